//! Multi-head self-attention and its video arrangements.

mod core;

use rand::Rng;

use crate::blocks::{Layout, TokenSequence};
use crate::error::{Error, Result};
use crate::nn::{init_tensor, Bound, Init, ParamId, ParamSet};
use crate::tensor::{Graph, Real, Var};

/// Longest sequence the dense global oracle accepts.
pub const GLOBAL_ORACLE_MAX_TOKENS: usize = 4096;

/// Head count for width `d`: one head per 64 channels, at least one.
pub fn default_heads(d: usize) -> usize {
    (d / 64).max(1)
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub dim: usize,
    pub heads: usize,
}

impl AttentionParams {
    /// `out_init` applies to `W_o`; zeros make the sublayer vanish at init.
    pub fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        name: &str,
        dim: usize,
        heads: usize,
        out_init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {dim}")));
        }
        let mut w = |n: &str, init| ps.add(format!("{name}.{n}"), init_tensor(&[dim, dim], init, rng));
        Ok(Self {
            wq: w("w_q", Init::Xavier),
            wk: w("w_k", Init::Xavier),
            wv: w("w_v", Init::Xavier),
            wo: w("w_o", out_init),
            dim,
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn numel(&self) -> usize {
        4 * self.dim * self.dim
    }
}

/// Unmasked multi-head self-attention on `x: [B, J, D]`.
pub fn multi_head_attention<T: Real>(g: &mut Graph<T>, p: &Bound, ap: &AttentionParams, x: Var) -> Result<Var> {
    let q = g.linear(x, p[ap.wq], None)?;
    let k = g.linear(x, p[ap.wk], None)?;
    let v = g.linear(x, p[ap.wv], None)?;
    let o = g.attention(q, k, v, ap.heads)?;
    g.linear(o, p[ap.wo], None)
}

/// Attention among the patches of each frame.
pub fn spatial_attention<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    ap: &AttentionParams,
    ts: &TokenSequence,
) -> Result<TokenSequence> {
    ts.expect(Layout::Spatial)?;
    Ok(ts.with_data(multi_head_attention(g, p, ap, ts.data)?))
}

/// Attention across frames at each patch position.
pub fn temporal_attention<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    ap: &AttentionParams,
    ts: &TokenSequence,
) -> Result<TokenSequence> {
    ts.expect(Layout::Temporal)?;
    Ok(ts.with_data(multi_head_attention(g, p, ap, ts.data)?))
}

/// Dense attention over the whole space-time sequence. Reference only.
pub fn global_attention_oracle<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    ap: &AttentionParams,
    ts: &TokenSequence,
) -> Result<TokenSequence> {
    ts.expect(Layout::Full)?;
    let j = g.shape(ts.data)[1];
    if j > GLOBAL_ORACLE_MAX_TOKENS {
        return Err(Error::Size(format!(
            "global attention over {j} tokens exceeds {GLOBAL_ORACLE_MAX_TOKENS}"
        )));
    }
    Ok(ts.with_data(multi_head_attention(g, p, ap, ts.data)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{relayout, Axes};
    use crate::tensor::{grad_check, GradCheckOptions, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(dim: usize, heads: usize) -> (ParamSet<f64>, AttentionParams) {
        let mut ps = ParamSet::new();
        let ap = AttentionParams::new(&mut ps, "attn", dim, heads, Init::Xavier, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        (ps, ap)
    }

    fn run(ps: &ParamSet<f64>, ap: &AttentionParams, x: &Tensor<f64>) -> Vec<f64> {
        let mut g = Graph::new();
        let p = ps.bind(&mut g);
        let xv = g.constant(x);
        let y = multi_head_attention(&mut g, &p, ap, xv).unwrap();
        g.value(y).to_vec()
    }

    #[test]
    fn heads_rule() {
        assert_eq!(default_heads(8), 1);
        assert_eq!(default_heads(384), 6);
        assert_eq!(default_heads(1152), 18);
    }

    #[test]
    fn single_token_is_value_then_output_projection() {
        let (ps, ap) = setup(4, 2);
        let x = Tensor::<f64>::from_f64(&[1, 1, 4], &[0.3, -1.0, 2.0, 0.5]).unwrap();
        let y = run(&ps, &ap, &x);
        let (wv, wo) = (ps.get(ap.wv), ps.get(ap.wo));
        let mut v = [0.0; 4];
        for i in 0..4 {
            for j in 0..4 {
                v[j] += x.data()[i] * wv.data()[i * 4 + j];
            }
        }
        for j in 0..4 {
            let want: f64 = (0..4).map(|i| v[i] * wo.data()[i * 4 + j]).sum();
            assert!((y[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_keys_split_evenly() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(&Tensor::from_f64(&[1, 2, 2], &[5.0, -3.0, 0.1, 9.0]).unwrap());
        let k = g.constant(&Tensor::from_f64(&[1, 2, 2], &[1.0, 2.0, 1.0, 2.0]).unwrap());
        let v = g.constant(&Tensor::from_f64(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let o = g.attention(q, k, v, 1).unwrap();
        for &x in g.value(o) {
            assert!((x - 0.5).abs() < 1e-15);
        }
        assert_eq!(g.counters.attention_matrix, 2 * 4 * 2);
    }

    #[test]
    fn permutation_equivariance() {
        let (ps, ap) = setup(4, 2);
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::randn(&[1, 5, 4], 1.0, &mut r);
        let perm = [3, 0, 4, 1, 2];
        let xp = Tensor::from_fn(&[1, 5, 4], |i| x.data()[perm[i / 4] * 4 + i % 4]);
        let (y, yp) = (run(&ps, &ap, &x), run(&ps, &ap, &xp));
        for i in 0..20 {
            assert!((yp[i] - y[perm[i / 4] * 4 + i % 4]).abs() < 1e-12);
        }
    }

    fn grid() -> Axes {
        Axes {
            batch: 1,
            n_f: 2,
            n_h: 1,
            n_w: 2,
            d: 4,
        }
    }

    #[test]
    fn spatial_frames_are_isolated() {
        let (ps, ap) = setup(4, 1);
        let a = grid();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let base = Tensor::<f64>::randn(&a.shape(Layout::Spatial), 1.0, &mut r);
        let mut bumped = base.clone();
        bumped.data_mut()[0] += 1.0;
        let eval = |t: &Tensor<f64>| {
            let mut g = Graph::new();
            let p = ps.bind(&mut g);
            let x = g.constant(t);
            let ts = TokenSequence::new(&g, x, Layout::Spatial, a).unwrap();
            let y = spatial_attention(&mut g, &p, &ap, &ts).unwrap();
            assert!(temporal_attention(&mut g, &p, &ap, &ts).is_err());
            g.value(y.data).to_vec()
        };
        let (y0, y1) = (eval(&base), eval(&bumped));
        assert_eq!(y0[8..], y1[8..]);
        assert_ne!(y0[..8], y1[..8]);
    }

    #[test]
    fn temporal_positions_are_isolated_and_static_stays_static() {
        let (ps, ap) = setup(4, 1);
        let a = grid();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let base = Tensor::<f64>::randn(&a.shape(Layout::Temporal), 1.0, &mut r);
        let mut bumped = base.clone();
        bumped.data_mut()[1] -= 0.5;
        let eval = |t: &Tensor<f64>| {
            let mut g = Graph::new();
            let p = ps.bind(&mut g);
            let x = g.constant(t);
            let ts = TokenSequence::new(&g, x, Layout::Temporal, a).unwrap();
            let y = temporal_attention(&mut g, &p, &ap, &ts).unwrap();
            g.value(y.data).to_vec()
        };
        let (y0, y1) = (eval(&base), eval(&bumped));
        assert_eq!(y0[8..], y1[8..]);
        // same token at every frame of each position
        let frame = [0.2, -0.1, 0.7, 1.1];
        let stat = Tensor::from_fn(&a.shape(Layout::Temporal), |i| frame[i % 4] * (1 + i / 8) as f64);
        let y = eval(&stat);
        assert_eq!(y[..4], y[4..8]);
        assert_eq!(y[8..12], y[12..]);
    }

    #[test]
    fn global_reduces_to_spatial_for_one_frame() {
        let (ps, ap) = setup(4, 2);
        let a = Axes {
            batch: 1,
            n_f: 1,
            n_h: 2,
            n_w: 2,
            d: 4,
        };
        let t = Tensor::<f64>::randn(&a.shape(Layout::Full), 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let mut g = Graph::new();
        let p = ps.bind(&mut g);
        let x = g.constant(&t);
        let full = TokenSequence::new(&g, x, Layout::Full, a).unwrap();
        let sp = relayout(&mut g, &full, Layout::Spatial).unwrap();
        let yg = global_attention_oracle(&mut g, &p, &ap, &full).unwrap();
        let ys = spatial_attention(&mut g, &p, &ap, &sp).unwrap();
        assert_eq!(g.value(yg.data), g.value(ys.data));
    }

    #[test]
    fn global_oracle_guard() {
        let (ps, ap) = setup(4, 1);
        let a = Axes {
            batch: 1,
            n_f: 65,
            n_h: 8,
            n_w: 8,
            d: 4,
        };
        let mut g = Graph::<f64>::no_grad();
        let p = ps.bind(&mut g);
        let x = g.constant(&Tensor::zeros(&a.shape(Layout::Full)));
        let ts = TokenSequence::new(&g, x, Layout::Full, a).unwrap();
        assert!(matches!(global_attention_oracle(&mut g, &p, &ap, &ts), Err(Error::Size(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (ps, ap) = setup(4, 2);
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let mut params: Vec<(String, Tensor<f64>)> = ps.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        params.push(("x".into(), Tensor::randn(&[2, 3, 4], 1.0, &mut r)));
        let w = Tensor::<f64>::randn(&[2, 3, 4], 1.0, &mut r);
        let report = grad_check(
            |g, v| {
                let p = Bound::from_vars(v[..4].to_vec());
                let y = multi_head_attention(g, &p, &ap, v[4])?;
                let wv = g.constant(&w);
                let prod = g.mul(y, wv)?;
                Ok(g.sum(prod))
            },
            &params,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }
}
