//! Central finite-difference verification of tape gradients (64-bit only).

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference half step `h` in `(f(p+h) - f(p-h)) / 2h`.
    pub step: f64,
    /// Lower bound on the denominator of the relative error, so that
    /// coordinates with vanishing gradient are judged on absolute error.
    pub rel_floor: f64,
    /// Check at most this many evenly spaced coordinates per parameter.
    pub max_coords_per_param: Option<usize>,
    /// Use the fourth-order stencil
    /// `(-f(p+2h) + 8f(p+h) - 8f(p-h) + f(p-2h)) / 12h`, which tolerates a
    /// larger `h` and so less cancellation on large-valued objectives.
    pub five_point: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_floor: 1e-6,
            max_coords_per_param: None,
            five_point: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub name: String,
    pub coords_checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub per_parameter: Vec<ParamReport>,
}

impl GradReport {
    pub fn coords_checked(&self) -> usize {
        self.per_parameter.iter().map(|p| p.coords_checked).sum()
    }

    pub fn worst(&self) -> Option<&ParamReport> {
        self.per_parameter
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

fn evaluate<F>(f: &F, params: &[Tensor<f64>], with_grad: bool) -> Result<(Graph<f64>, Vec<Var>, Var, f64)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = if with_grad { Graph::new() } else { Graph::no_grad() };
    let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::Evaluation(format!(
            "function must be scalar-valued, got shape {:?}",
            g.shape(out)
        )));
    }
    let v = g.scalar(out);
    if !v.is_finite() {
        return Err(Error::Evaluation(format!("non-finite function value {v}")));
    }
    Ok((g, vars, out, v))
}

/// Compares tape gradients of the scalar `f` at `params` against central
/// finite differences, coordinate by coordinate.
pub fn grad_check<F>(
    f: F,
    params: &[(String, Tensor<f64>)],
    opts: &GradCheckOptions,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut values: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let (g, vars, out, _) = evaluate(&f, &values, true)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&values)
        .map(|(v, t)| grads.get_or_zeros(*v, t.numel()))
        .collect();
    drop(g);

    let h = opts.step;
    let mut report = GradReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        per_parameter: Vec::with_capacity(params.len()),
    };
    for (pi, (name, _)) in params.iter().enumerate() {
        let n = values[pi].numel();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        let mut pr = ParamReport {
            name: name.clone(),
            coords_checked: coords.len(),
            max_abs_err: 0.0,
            max_rel_err: 0.0,
        };
        for &c in &coords {
            let orig = values[pi].data()[c];
            let mut at = |off: f64| -> Result<f64> {
                values[pi].data_mut()[c] = orig + off;
                let v = evaluate(&f, &values, false)?.3;
                values[pi].data_mut()[c] = orig;
                Ok(v)
            };
            let numeric = if opts.five_point {
                (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h)
            } else {
                (at(h)? - at(-h)?) / (2.0 * h)
            };
            let a = analytic[pi][c];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.rel_floor);
            pr.max_abs_err = pr.max_abs_err.max(abs);
            pr.max_rel_err = pr.max_rel_err.max(rel);
        }
        report.max_abs_err = report.max_abs_err.max(pr.max_abs_err);
        report.max_rel_err = report.max_rel_err.max(pr.max_rel_err);
        report.per_parameter.push(pr);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn named(ts: Vec<Tensor<f64>>) -> Vec<(String, Tensor<f64>)> {
        ts.into_iter().enumerate().map(|(i, t)| (format!("p{i}"), t)).collect()
    }

    #[test]
    fn half_squared_norm_is_exact() {
        let p = Tensor::from_f64(&[3], &[0.5, -1.25, 2.0]).unwrap();
        let rep = grad_check(
            |g, v| {
                let sq = g.square(v[0]);
                let s = g.sum(sq);
                Ok(g.scale(s, 0.5))
            },
            &named(vec![p]),
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_err <= 1e-9, "{rep:?}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let p = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let rep = grad_check(
            |g, v| {
                let z = g.scale(v[0], 0.0);
                let s = g.sum(z);
                Ok(g.add_scalar(s, 3.0))
            },
            &named(vec![p]),
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(rep.max_abs_err, 0.0);
    }

    #[test]
    fn non_finite_value_is_an_evaluation_error() {
        let p = Tensor::from_f64(&[1], &[1000.0]).unwrap();
        let err = grad_check(
            |g, v| {
                let e = g.exp(v[0]);
                Ok(g.sum(e))
            },
            &named(vec![p]),
            &GradCheckOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Evaluation(_)));
    }
}
