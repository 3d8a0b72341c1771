//! Patch tokenization and fixed sinusoidal embeddings.

use crate::error::{shape_err, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

fn sincos_1d(d: usize, pos: f64, out: &mut [f64]) {
    let half = d / 2;
    for i in 0..half {
        let w = 1.0 / 10000f64.powf(i as f64 / half as f64);
        out[i] = (pos * w).sin();
        out[half + i] = (pos * w).cos();
    }
}

/// Fixed space-time positional embedding `[n_f·n_h·n_w, d]` in spatial-first
/// order: a 2-D spatial table (half the channels per axis) plus a 1-D
/// temporal table over all channels.
pub fn positional_embedding<T: Real>(n_f: usize, n_h: usize, n_w: usize, d: usize) -> Result<Tensor<T>> {
    if d % 4 != 0 {
        return Err(shape_err!("positional embedding needs width divisible by 4, got {d}"));
    }
    let mut out = vec![0.0; n_f * n_h * n_w * d];
    let (mut sh, mut sw, mut st) = (vec![0.0; d / 2], vec![0.0; d / 2], vec![0.0; d]);
    for f in 0..n_f {
        sincos_1d(d, f as f64, &mut st);
        for h in 0..n_h {
            sincos_1d(d / 2, h as f64, &mut sh);
            for w in 0..n_w {
                sincos_1d(d / 2, w as f64, &mut sw);
                let row = &mut out[((f * n_h + h) * n_w + w) * d..][..d];
                for i in 0..d {
                    let spatial = if i < d / 2 { sh[i] } else { sw[i - d / 2] };
                    row[i] = spatial + st[i];
                }
            }
        }
    }
    Tensor::from_f64(&[n_f * n_h * n_w, d], &out)
}

/// Sinusoidal features `[len(t), dim]` of integer timesteps: cosines then sines.
pub fn timestep_features<T: Real>(t: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn(&[t.len(), dim], |i| {
        let (b, j) = (i / dim, i % dim);
        let k = j % half;
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let arg = t[b] as f64 * freq;
        T::c(if j < half { arg.cos() } else { arg.sin() })
    })
}

/// `[B, F, H, W, C]` → `[B, F·(H/p)·(W/p), p·p·C]` with tokens in
/// spatial-first order and patch features ordered `(dy, dx, c)`.
pub fn patchify<T: Real>(g: &mut Graph<T>, x: Var, p: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let [b, f, h, w, c] = s[..] else {
        return Err(shape_err!("patchify: expected [B, F, H, W, C], got {s:?}"));
    };
    if h % p != 0 || w % p != 0 {
        return Err(shape_err!("patchify: patch {p} does not divide {h}×{w}"));
    }
    let (nh, nw) = (h / p, w / p);
    let y = g.reshape(x, &[b * f, nh, p, nw, p, c])?;
    let y = g.permute(y, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(y, &[b, f * nh * nw, p * p * c])
}

/// Inverse of [`patchify`] for `[B, tokens, p·p·C]` into `[B, F, H, W, C]`.
pub fn unpatchify<T: Real>(g: &mut Graph<T>, x: Var, f: usize, h: usize, w: usize, p: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (nh, nw) = (h / p, w / p);
    let [b, n, e] = s[..] else {
        return Err(shape_err!("unpatchify: expected rank 3, got {s:?}"));
    };
    if n != f * nh * nw || e % (p * p) != 0 || h % p != 0 || w % p != 0 {
        return Err(shape_err!("unpatchify: {s:?} for {f}×{h}×{w}, patch {p}"));
    }
    let c = e / (p * p);
    let y = g.reshape(x, &[b * f, nh, nw, p, p, c])?;
    let y = g.permute(y, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(y, &[b, f, h, w, c])
}
