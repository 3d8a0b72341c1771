use super::{Graph, Real, Var};
use crate::error::{shape_err, Result};

impl<T: Real> Graph<T> {
    /// Depthwise causal 1-D convolution along axis 1 of `x: [R, L, C]` with
    /// per-channel kernels `w: [C, K]` and bias `b: [C]`. Left zero padding:
    /// `y[l] = b + Σ_j w[j] · x[l - (K-1) + j]`.
    pub fn causal_conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 2 || ws[0] != xs[2] || self.shape(b) != [xs[2]] {
            return Err(shape_err!(
                "causal_conv1d: x {xs:?}, w {ws:?}, b {:?}",
                self.shape(b)
            ));
        }
        let (rows, len, ch) = (xs[0], xs[1], xs[2]);
        let k = ws[1];
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let base = r * len * ch;
            for l in 0..len {
                let o = &mut out[base + l * ch..base + (l + 1) * ch];
                o.copy_from_slice(bv);
                for j in 0..k {
                    let Some(src) = (l + j).checked_sub(k - 1) else {
                        continue;
                    };
                    let xi = &xv[base + src * ch..base + (src + 1) * ch];
                    for c in 0..ch {
                        o[c] += wv[c * k + j] * xi[c];
                    }
                }
            }
        }
        Ok(self.push(xs.clone(), out, &[x, w, b], move |gr_, g, gr| {
            if let Some(s) = gr.slot(b) {
                for (i, gv) in g.iter().enumerate() {
                    s[i % ch] += *gv;
                }
            }
            if let Some(s) = gr.slot(w) {
                let xv = gr_.value(x);
                for r in 0..rows {
                    let base = r * len * ch;
                    for l in 0..len {
                        for j in 0..k {
                            let Some(src) = (l + j).checked_sub(k - 1) else {
                                continue;
                            };
                            for c in 0..ch {
                                s[c * k + j] += g[base + l * ch + c] * xv[base + src * ch + c];
                            }
                        }
                    }
                }
            }
            if let Some(s) = gr.slot(x) {
                let wv = gr_.value(w);
                for r in 0..rows {
                    let base = r * len * ch;
                    for l in 0..len {
                        for j in 0..k {
                            let Some(src) = (l + j).checked_sub(k - 1) else {
                                continue;
                            };
                            for c in 0..ch {
                                s[base + src * ch + c] += g[base + l * ch + c] * wv[c * k + j];
                            }
                        }
                    }
                }
            }
        }))
    }
}
