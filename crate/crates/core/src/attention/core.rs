//! Fused scaled dot-product attention over independent rows.

use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::tensor::{softmax_in_place, Graph, Real, Var};

impl<T: Real> Graph<T> {
    /// `softmax(Q Kᵀ / √hd) V` per head, for `q`, `k`, `v` of shape `[R, J, D]`
    /// split into `heads` contiguous column blocks. Unmasked.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        let [rows, len, dim] = shape[..] else {
            return Err(shape_err!("attention: expected [R, J, D], got {shape:?}"));
        };
        if self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(shape_err!(
                "attention: q {shape:?}, k {:?}, v {:?}",
                self.shape(k),
                self.shape(v)
            ));
        }
        if heads == 0 || dim % heads != 0 {
            return Err(shape_err!("attention: {heads} heads do not divide width {dim}"));
        }
        let hd = dim / heads;
        let scale = T::one() / T::c(hd as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = dim as isize;

        // per (row, head): probabilities [J, J] and head output [J, hd]
        let parts: Vec<(Vec<T>, Vec<T>)> = (0..rows * heads)
            .into_par_iter()
            .map(|rh| {
                let off = (rh / heads) * len * dim + (rh % heads) * hd;
                let mut p = vec![T::zero(); len * len];
                T::gemm(len, hd, len, scale, &qv[off..], d, 1, &kv[off..], 1, d, T::zero(), &mut p);
                p.chunks_mut(len).for_each(softmax_in_place);
                let mut o = vec![T::zero(); len * hd];
                T::gemm(len, len, hd, T::one(), &p, len as isize, 1, &vv[off..], d, 1, T::zero(), &mut o);
                (p, o)
            })
            .collect();
        let mut out = vec![T::zero(); rows * len * dim];
        for (rh, (_, o)) in parts.iter().enumerate() {
            let off = (rh / heads) * len * dim + (rh % heads) * hd;
            for j in 0..len {
                out[off + j * dim..off + j * dim + hd].copy_from_slice(&o[j * hd..(j + 1) * hd]);
            }
        }
        self.counters.attention_matrix += 2 * (rows * len * len * dim) as u64;
        let probs: Vec<Vec<T>> = parts.into_iter().map(|(p, _)| p).collect();

        Ok(self.push(shape, out, &[q, k, v], move |g, gout, gr| {
            let (qv, kv, vv) = (g.value(q), g.value(k), g.value(v));
            let grads: Vec<[Vec<T>; 3]> = (0..rows * heads)
                .into_par_iter()
                .map(|rh| {
                    let off = (rh / heads) * len * dim + (rh % heads) * hd;
                    let p = &probs[rh];
                    let go = &gout[off..];
                    // dV = Pᵀ dO
                    let mut gv = vec![T::zero(); len * hd];
                    T::gemm(len, len, hd, T::one(), p, 1, len as isize, go, d, 1, T::zero(), &mut gv);
                    // dP = dO Vᵀ, then softmax backward
                    let mut gs = vec![T::zero(); len * len];
                    T::gemm(len, hd, len, T::one(), go, d, 1, &vv[off..], 1, d, T::zero(), &mut gs);
                    for (gs, p) in gs.chunks_mut(len).zip(p.chunks(len)) {
                        let dot: T = gs.iter().zip(p).map(|(a, b)| *a * *b).sum();
                        for (a, b) in gs.iter_mut().zip(p) {
                            *a = *b * (*a - dot);
                        }
                    }
                    let mut gq = vec![T::zero(); len * hd];
                    T::gemm(len, len, hd, scale, &gs, len as isize, 1, &kv[off..], d, 1, T::zero(), &mut gq);
                    let mut gk = vec![T::zero(); len * hd];
                    T::gemm(len, len, hd, scale, &gs, 1, len as isize, &qv[off..], d, 1, T::zero(), &mut gk);
                    [gq, gk, gv]
                })
                .collect();
            for (which, var) in [q, k, v].into_iter().enumerate() {
                if let Some(s) = gr.slot(var) {
                    for (rh, gs) in grads.iter().enumerate() {
                        let off = (rh / heads) * len * dim + (rh % heads) * hd;
                        let src = &gs[which];
                        for j in 0..len {
                            let dst = &mut s[off + j * dim..off + j * dim + hd];
                            dst.iter_mut().zip(&src[j * hd..(j + 1) * hd]).for_each(|(a, b)| *a += *b);
                        }
                    }
                }
            }
        }))
    }
}
