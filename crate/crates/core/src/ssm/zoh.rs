//! Zero-order-hold discretization of a diagonal continuous-time system.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Below this |ΔA| the exact ZOH input gain is replaced by its series limit.
pub const SERIES_THRESHOLD: f64 = 1e-4;

/// `(exp(u) - 1) / u`, with the second-order limit `1 + u/2 + u²/6` near zero.
#[inline]
pub fn phi<T: Real>(u: T) -> T {
    if u.abs() < T::c(SERIES_THRESHOLD) {
        T::one() + u * (T::c(0.5) + u * T::c(1.0 / 6.0))
    } else {
        u.exp_m1() / u
    }
}

/// Derivative of [`phi`]; a Taylor series below `1e-2`, which also covers
/// the near-zero branch.
#[inline]
pub fn dphi<T: Real>(u: T) -> T {
    if u.abs() < T::c(1e-2) {
        T::c(0.5) + u * (T::c(1.0 / 3.0) + u * (T::c(0.125) + u * T::c(1.0 / 30.0)))
    } else {
        (u.exp() * (u - T::one()) + T::one()) / (u * u)
    }
}

/// Scalar ZOH: returns `(Ā, B̄)` for step `delta`, transition `a` and input gain `b`.
///
/// `Ā = exp(Δa)`, `B̄ = (Δa)⁻¹ (exp(Δa) − 1) Δb`.
pub fn zoh_scalar<T: Real>(delta: T, a: T, b: T) -> Result<(T, T)> {
    if !(delta > T::zero()) || !delta.is_finite() {
        return Err(Error::Param(format!("step size must be positive and finite, got {delta}")));
    }
    let u = delta * a;
    let em = u.exp_m1();
    Ok((T::one() + em, delta * phi(u) * b))
}

/// Per-token discretized parameters for a diagonal SSM.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm<T: Real> {
    /// `[J, D_inner, N]`
    pub a_bar: Tensor<T>,
    /// `[J, D_inner, N]`
    pub b_bar: Tensor<T>,
}

impl<T: Real> DiscreteSsm<T> {
    pub fn len(&self) -> usize {
        self.a_bar.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.a_bar.shape()[1]
    }

    pub fn state_dim(&self) -> usize {
        self.a_bar.shape()[2]
    }
}

/// Discretizes `a: [D_inner, N]` (continuous, diagonal per channel), the
/// per-token input maps `b: [J, N]` and step sizes `delta: [J, D_inner]`.
pub fn discretize_zoh<T: Real>(a: &Tensor<T>, b: &Tensor<T>, delta: &Tensor<T>) -> Result<DiscreteSsm<T>> {
    let (&[din, n], &[j, nb], &[jd, dd]) = (a.shape(), b.shape(), delta.shape()) else {
        return Err(shape_err!(
            "discretize_zoh: a {:?}, b {:?}, delta {:?}",
            a.shape(),
            b.shape(),
            delta.shape()
        ));
    };
    if nb != n || jd != j || dd != din {
        return Err(shape_err!(
            "discretize_zoh: a {:?}, b {:?}, delta {:?}",
            a.shape(),
            b.shape(),
            delta.shape()
        ));
    }
    let mut a_bar = Vec::with_capacity(j * din * n);
    let mut b_bar = Vec::with_capacity(j * din * n);
    for k in 0..j {
        for d in 0..din {
            let dt = delta.data()[k * din + d];
            for s in 0..n {
                let (ab, bb) = zoh_scalar(dt, a.data()[d * n + s], b.data()[k * n + s])?;
                a_bar.push(ab);
                b_bar.push(bb);
            }
        }
    }
    Ok(DiscreteSsm {
        a_bar: Tensor::new(&[j, din, n], a_bar)?,
        b_bar: Tensor::new(&[j, din, n], b_bar)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    #[test]
    fn unit_step_unit_decay() {
        let (a, b) = zoh_scalar(1.0f64, -1.0, 1.0).unwrap();
        assert!((a - 1.0 / E).abs() < 1e-12);
        assert!((b - (1.0 - 1.0 / E)).abs() < 1e-12);
    }

    #[test]
    fn half_step_double_decay() {
        let (a, b) = zoh_scalar(0.5f64, -2.0, 1.0).unwrap();
        assert!((a - 1.0 / E).abs() < 1e-12);
        assert!((b - 0.5 * (1.0 - 1.0 / E)).abs() < 1e-12);
        assert!((b - 0.31606).abs() < 1e-5);
    }

    #[test]
    fn vanishing_transition_limit() {
        let (a, b) = zoh_scalar(0.3f64, -1e-12, 2.0).unwrap();
        assert!((a - 1.0).abs() < 1e-12);
        assert!((b - 0.6).abs() < 1e-12);
    }

    #[test]
    fn nonpositive_step_is_rejected() {
        assert!(matches!(zoh_scalar(0.0f64, -1.0, 1.0), Err(Error::Param(_))));
        assert!(zoh_scalar(-0.1f32, -1.0, 1.0).is_err());
    }

    #[test]
    fn series_branch_is_continuous() {
        let t = SERIES_THRESHOLD;
        let below = phi(-t * (1.0 - 1e-9));
        let above = phi(-t * (1.0 + 1e-9));
        assert!((below - above).abs() < 1e-8);
        let db = dphi(-t * (1.0 - 1e-9));
        let da = dphi(-t * (1.0 + 1e-9));
        assert!((db - da).abs() < 1e-4);
    }

    #[test]
    fn dphi_matches_finite_difference() {
        for &u in &[-3.0f64, -0.5, -0.02, -0.005, 0.004, 0.7] {
            let h = 1e-6;
            let fd = (phi(u + h) - phi(u - h)) / (2.0 * h);
            assert!((dphi(u) - fd).abs() < 1e-7, "u={u}: {} vs {fd}", dphi(u));
        }
    }

    #[test]
    fn discretized_transition_is_a_contraction() {
        let a = Tensor::<f64>::from_f64(&[2, 2], &[-1.0, -2.0, -0.5, -4.0]).unwrap();
        let b = Tensor::<f64>::from_f64(&[3, 2], &[1.0, 0.5, -1.0, 2.0, 0.0, 1.0]).unwrap();
        let dt = Tensor::<f64>::from_f64(&[3, 2], &[0.01, 0.1, 1.0, 0.2, 0.05, 3.0]).unwrap();
        let disc = discretize_zoh(&a, &b, &dt).unwrap();
        assert_eq!(disc.a_bar.shape(), &[3, 2, 2]);
        assert!(disc.a_bar.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
