//! First-order linear recurrences `h_k = a_k h_{k-1} + b_k`, evaluated either
//! left to right or with a work-efficient (Blelloch) up-sweep/down-sweep over
//! the associative composition `(a₂, b₂) ∘ (a₁, b₁) = (a₂a₁, a₂b₁ + b₂)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::DiscreteSsm;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanMode {
    Sequential,
    #[default]
    Parallel,
}

impl std::str::FromStr for ScanMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq" | "sequential" => Ok(ScanMode::Sequential),
            "par" | "parallel" => Ok(ScanMode::Parallel),
            _ => Err(Error::Config(format!("unknown scan mode '{s}'"))),
        }
    }
}

impl std::fmt::Display for ScanMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScanMode::Sequential => "sequential",
            ScanMode::Parallel => "parallel",
        })
    }
}

impl ScanMode {
    pub fn short(self) -> &'static str {
        match self {
            ScanMode::Sequential => "seq",
            ScanMode::Parallel => "par",
        }
    }
}

/// `(later, earlier)` composition of two affine maps `h ↦ a h + b`.
#[inline]
fn compose<T: Real>(later: (T, T), earlier: (T, T)) -> (T, T) {
    (later.0 * earlier.0, later.0 * earlier.1 + later.1)
}

/// Inclusive recurrence from `h_{-1} = 0`, left to right.
pub fn recurrence_sequential<T: Real>(a: &[T], b: &[T], h: &mut [T]) {
    let mut s = T::zero();
    for k in 0..a.len() {
        s = a[k] * s + b[k];
        h[k] = s;
    }
}

/// Inclusive recurrence from `h_{-1} = 0` via Blelloch exclusive scan.
///
/// `tree` is scratch space, resized to the next power of two.
pub fn recurrence_blelloch<T: Real>(a: &[T], b: &[T], h: &mut [T], tree: &mut Vec<(T, T)>) {
    let n = a.len();
    if n == 0 {
        return;
    }
    let size = n.next_power_of_two();
    tree.clear();
    tree.extend(a.iter().zip(b).map(|(&x, &y)| (x, y)));
    tree.resize(size, (T::one(), T::zero()));

    // up-sweep: node i accumulates the composition of its subtree
    let mut d = 1;
    while d < size {
        let mut i = 2 * d - 1;
        while i < size {
            tree[i] = compose(tree[i], tree[i - d]);
            i += 2 * d;
        }
        d *= 2;
    }
    // down-sweep: node i receives the composition of everything before it
    tree[size - 1] = (T::one(), T::zero());
    let mut d = size / 2;
    while d >= 1 {
        let mut i = 2 * d - 1;
        while i < size {
            let left = tree[i - d];
            tree[i - d] = tree[i];
            tree[i] = compose(left, tree[i]);
            i += 2 * d;
        }
        d /= 2;
    }
    for k in 0..n {
        h[k] = a[k] * tree[k].1 + b[k];
    }
}

pub fn recurrence<T: Real>(mode: ScanMode, a: &[T], b: &[T], h: &mut [T], tree: &mut Vec<(T, T)>) {
    match mode {
        ScanMode::Sequential => recurrence_sequential(a, b, h),
        ScanMode::Parallel => recurrence_blelloch(a, b, h, tree),
    }
}

fn check_shapes<T: Real>(disc: &DiscreteSsm<T>, c: &Tensor<T>, d_skip: &Tensor<T>, x: &Tensor<T>) -> Result<()> {
    let (j, din, n) = (disc.len(), disc.channels(), disc.state_dim());
    if disc.b_bar.shape() != disc.a_bar.shape()
        || c.shape() != [j, n]
        || d_skip.shape() != [din]
        || x.shape() != [j, din]
    {
        return Err(shape_err!(
            "scan: Ā {:?}, B̄ {:?}, C {:?}, D {:?}, x {:?}",
            disc.a_bar.shape(),
            disc.b_bar.shape(),
            c.shape(),
            d_skip.shape(),
            x.shape()
        ));
    }
    Ok(())
}

fn scan_with<T: Real>(
    mode: ScanMode,
    disc: &DiscreteSsm<T>,
    c: &Tensor<T>,
    d_skip: &Tensor<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_shapes(disc, c, d_skip, x)?;
    let (j, din, n) = (disc.len(), disc.channels(), disc.state_dim());
    let (ab, bb, cv, xv) = (disc.a_bar.data(), disc.b_bar.data(), c.data(), x.data());
    // one output column per channel, plus the first token whose state went non-finite
    let columns: Vec<(Vec<T>, Option<usize>)> = (0..din)
        .into_par_iter()
        .map_init(
            || (vec![T::zero(); j], vec![T::zero(); j], vec![T::zero(); j], Vec::new()),
            |(a, b, h, tree), d| {
                let mut y = vec![T::zero(); j];
                let mut bad: Option<usize> = None;
                for s in 0..n {
                    for k in 0..j {
                        let off = (k * din + d) * n + s;
                        a[k] = ab[off];
                        b[k] = bb[off] * xv[k * din + d];
                    }
                    recurrence(mode, a, b, h, tree);
                    if let Some(k) = h.iter().position(|v| !v.is_finite()) {
                        bad = Some(bad.map_or(k, |b| b.min(k)));
                    }
                    for k in 0..j {
                        y[k] += cv[k * n + s] * h[k];
                    }
                }
                for k in 0..j {
                    y[k] += d_skip.data()[d] * xv[k * din + d];
                }
                (y, bad)
            },
        )
        .collect();
    if let Some(k) = columns.iter().filter_map(|c| c.1).min() {
        return Err(Error::Numeric {
            index: k,
            msg: "non-finite scan state".into(),
        });
    }
    let mut out = vec![T::zero(); j * din];
    for (d, (col, _)) in columns.iter().enumerate() {
        for k in 0..j {
            out[k * din + d] = col[k];
        }
    }
    Tensor::new(&[j, din], out)
}

/// `h_k = Ā_k h_{k-1} + B̄_k x_k`, `y_k = C_k h_k + D x_k`, left to right from `h_{-1} = 0`.
///
/// Shapes: Ā, B̄ `[J, D_inner, N]`; `c: [J, N]`; `d_skip: [D_inner]`; `x: [J, D_inner]`.
pub fn scan_sequential<T: Real>(
    disc: &DiscreteSsm<T>,
    c: &Tensor<T>,
    d_skip: &Tensor<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    scan_with(ScanMode::Sequential, disc, c, d_skip, x)
}

/// Same result as [`scan_sequential`], computed with a Blelloch scan per state channel.
pub fn scan_parallel<T: Real>(
    disc: &DiscreteSsm<T>,
    c: &Tensor<T>,
    d_skip: &Tensor<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    scan_with(ScanMode::Parallel, disc, c, d_skip, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn scalar_disc(a: f64, b: f64, j: usize) -> DiscreteSsm<f64> {
        DiscreteSsm {
            a_bar: Tensor::full(&[j, 1, 1], a),
            b_bar: Tensor::full(&[j, 1, 1], b),
        }
    }

    #[test]
    fn hand_recurrence() {
        let disc = scalar_disc(0.5, 1.0, 3);
        let c = Tensor::ones(&[3, 1]);
        let d = Tensor::zeros(&[1]);
        let x = Tensor::ones(&[3, 1]);
        for y in [
            scan_sequential(&disc, &c, &d, &x).unwrap(),
            scan_parallel(&disc, &c, &d, &x).unwrap(),
        ] {
            assert_eq!(y.data(), &[1.0, 1.5, 1.75]);
        }
    }

    #[test]
    fn convolution_form_oracle() {
        // y_k = Σ_j C Ā^{k-j} B̄ x_j for a time-invariant scalar channel
        let (a, b, cc) = (0.8, 0.3, 1.7);
        let xs = [0.2, -1.0, 0.5, 2.0, 0.0, -0.7];
        let disc = scalar_disc(a, b, xs.len());
        let y = scan_sequential(
            &disc,
            &Tensor::full(&[xs.len(), 1], cc),
            &Tensor::zeros(&[1]),
            &Tensor::from_f64(&[xs.len(), 1], &xs).unwrap(),
        )
        .unwrap();
        for k in 0..xs.len() {
            let want: f64 = (0..=k).map(|j| cc * a.powi((k - j) as i32) * b * xs[j]).sum();
            assert!((y.data()[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_zero_output() {
        let disc = scalar_disc(0.9, 2.0, 5);
        let y = scan_parallel(&disc, &Tensor::ones(&[5, 1]), &Tensor::ones(&[1]), &Tensor::zeros(&[5, 1])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pure_skip_path() {
        let disc = scalar_disc(0.5, 1.0, 2);
        let x = Tensor::from_f64(&[2, 1], &[3.0, -1.0]).unwrap();
        let y = scan_sequential(&disc, &Tensor::zeros(&[2, 1]), &Tensor::full(&[1], 2.0), &x).unwrap();
        assert_eq!(y.data(), &[6.0, -2.0]);
    }

    #[test]
    fn single_token_is_bit_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let disc = DiscreteSsm {
            a_bar: Tensor::<f32>::uniform(&[1, 3, 4], 0.1, 0.9, &mut rng),
            b_bar: Tensor::<f32>::randn(&[1, 3, 4], 1.0, &mut rng),
        };
        let c = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let d = Tensor::randn(&[3], 1.0, &mut rng);
        let x = Tensor::randn(&[1, 3], 1.0, &mut rng);
        assert_eq!(
            scan_sequential(&disc, &c, &d, &x).unwrap(),
            scan_parallel(&disc, &c, &d, &x).unwrap()
        );
    }

    #[test]
    fn non_finite_state_reports_first_index() {
        let mut disc = scalar_disc(0.5, 1.0, 4);
        disc.b_bar.data_mut()[2] = f64::INFINITY;
        let err = scan_sequential(&disc, &Tensor::ones(&[4, 1]), &Tensor::zeros(&[1]), &Tensor::ones(&[4, 1]))
            .unwrap_err();
        assert!(matches!(err, Error::Numeric { index: 2, .. }), "{err}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let disc = scalar_disc(0.5, 1.0, 4);
        assert!(scan_sequential(&disc, &Tensor::ones(&[3, 1]), &Tensor::zeros(&[1]), &Tensor::ones(&[4, 1])).is_err());
    }

    proptest! {
        #[test]
        fn blelloch_matches_sequential(
            pairs in proptest::collection::vec((0.0f64..1.0, -5.0f64..5.0), 1..300),
        ) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let mut h1 = vec![0.0; a.len()];
            let mut h2 = vec![0.0; a.len()];
            recurrence_sequential(&a, &b, &mut h1);
            recurrence_blelloch(&a, &b, &mut h2, &mut Vec::new());
            for (x, y) in h1.iter().zip(&h2) {
                prop_assert!((x - y).abs() <= 1e-10 * (1.0 + x.abs()));
            }
        }

        #[test]
        fn state_stays_bounded(
            pairs in proptest::collection::vec((0.0f64..0.95, -1.0f64..1.0), 1..200),
            gain in 0.1f64..3.0,
        ) {
            // |h_k| ≤ |B̄| max|x| / (1 - max Ā)
            let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<f64> = pairs.iter().map(|p| gain * p.1).collect();
            let amax = a.iter().cloned().fold(0.0, f64::max);
            let mut h = vec![0.0; a.len()];
            recurrence_sequential(&a, &b, &mut h);
            let bound = gain / (1.0 - amax);
            prop_assert!(h.iter().all(|v| v.abs() <= bound + 1e-12));
        }
    }
}
