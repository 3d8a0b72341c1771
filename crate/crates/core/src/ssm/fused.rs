//! Differentiable selective scan with on-the-fly ZOH discretization.

use rayon::prelude::*;

use super::scan::{recurrence, ScanMode};
use super::zoh::SERIES_THRESHOLD;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Graph, Real, Var};

#[inline(always)]
fn zoh_fwd<T: Real>(u: T) -> (T, T) {
    let em = u.expm1_fast();
    let series = T::one() + u * (T::c(0.5) + u * T::c(1.0 / 6.0));
    let ph = if u.abs() < T::c(SERIES_THRESHOLD) { series } else { em / u };
    (T::one() + em, ph)
}

#[inline(always)]
fn zoh_terms<T: Real>(u: T) -> (T, T, T) {
    let (abar, ph) = zoh_fwd(u);
    let em = abar - T::one();
    let series = T::c(0.5) + u * (T::c(1.0 / 3.0) + u * (T::c(0.125) + u * T::c(1.0 / 30.0)));
    let exact = (em * (u - T::one()) + u) / (u * u);
    let dp = if u.abs() < T::c(1e-2) { series } else { exact };
    (abar, ph, dp)
}

struct RowGrads<T> {
    gx: Vec<T>,
    gdelta: Vec<T>,
    gb: Vec<T>,
    gc: Vec<T>,
    ga: Vec<T>,
    gd: Vec<T>,
}

impl<T: Real> Graph<T> {
    /// Selective scan over axis 1.
    ///
    /// Shapes: `x`, `delta`: `[R, L, Din]`; `a`: `[Din, N]` (continuous,
    /// negative); `b`, `c`: `[R, L, N]`; `d`: `[Din]`. Each row is an
    /// independent sequence starting from a zero state.
    #[allow(clippy::too_many_arguments)]
    pub fn ssm_scan(&mut self, x: Var, delta: Var, a: Var, b: Var, c: Var, d: Var, mode: ScanMode) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [rows, len, din] = xs[..] else {
            return Err(shape_err!("ssm_scan: x must be [R, L, Din], got {xs:?}"));
        };
        let n = self.shape(a).get(1).copied().unwrap_or(0);
        if self.shape(delta) != xs.as_slice()
            || self.shape(a) != [din, n]
            || self.shape(b) != [rows, len, n]
            || self.shape(c) != [rows, len, n]
            || self.shape(d) != [din]
        {
            return Err(shape_err!(
                "ssm_scan: x {xs:?}, delta {:?}, A {:?}, B {:?}, C {:?}, D {:?}",
                self.shape(delta),
                self.shape(a),
                self.shape(b),
                self.shape(c),
                self.shape(d)
            ));
        }
        let (xv, dv, av, bv, cv, skip) = (
            self.value(x),
            self.value(delta),
            self.value(a),
            self.value(b),
            self.value(c),
            self.value(d),
        );
        let columns: Vec<Vec<T>> = (0..rows * din)
            .into_par_iter()
            .map_init(
                || (vec![T::zero(); len], vec![T::zero(); len], vec![T::zero(); len], Vec::new()),
                |(abuf, bbuf, hbuf, tree), rd| {
                    let (r, ch) = (rd / din, rd % din);
                    let at = |k: usize| (r * len + k) * din + ch;
                    let bn = |k: usize, s: usize| (r * len + k) * n + s;
                    let mut y = vec![T::zero(); len];
                    match mode {
                        ScanMode::Sequential => {
                            let a_c = &av[ch * n..(ch + 1) * n];
                            let (mut h, mut ab, mut ph) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
                            for k in 0..len {
                                let (dt, xk) = (dv[at(k)], xv[at(k)]);
                                for s in 0..n {
                                    (ab[s], ph[s]) = zoh_fwd(dt * a_c[s]);
                                }
                                let (bk, ck) = (&bv[bn(k, 0)..bn(k, n)], &cv[bn(k, 0)..bn(k, n)]);
                                let dx = dt * xk;
                                for s in 0..n {
                                    h[s] = ab[s] * h[s] + dx * ph[s] * bk[s];
                                }
                                y[k] = ck.iter().zip(&h).map(|(c, h)| *c * *h).sum();
                            }
                        }
                        ScanMode::Parallel => {
                            for s in 0..n {
                                for k in 0..len {
                                    let dt = dv[at(k)];
                                    let (abar, ph) = zoh_fwd(dt * av[ch * n + s]);
                                    abuf[k] = abar;
                                    bbuf[k] = dt * ph * bv[bn(k, s)] * xv[at(k)];
                                }
                                recurrence(mode, abuf, bbuf, hbuf, tree);
                                for k in 0..len {
                                    y[k] += cv[bn(k, s)] * hbuf[k];
                                }
                            }
                        }
                    }
                    for k in 0..len {
                        y[k] += skip[ch] * xv[at(k)];
                    }
                    y
                },
            )
            .collect();
        let mut out = vec![T::zero(); rows * len * din];
        for (rd, col) in columns.iter().enumerate() {
            let (r, ch) = (rd / din, rd % din);
            for k in 0..len {
                out[(r * len + k) * din + ch] = col[k];
            }
        }
        if let Some(pos) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                index: (pos / din) % len,
                msg: "non-finite selective-scan output".into(),
            });
        }
        self.counters.scan += (rows * len * din * (3 * n + n * n)) as u64;

        Ok(self.push(xs.clone(), out, &[x, delta, a, b, c, d], move |g, gout, gr| {
            let (xv, dv, av, bv, cv, skip) = (g.value(x), g.value(delta), g.value(a), g.value(b), g.value(c), g.value(d));
            let per_row: Vec<RowGrads<T>> = (0..rows)
                .into_par_iter()
                .map(|r| {
                    let mut rg = RowGrads {
                        gx: vec![T::zero(); len * din],
                        gdelta: vec![T::zero(); len * din],
                        gb: vec![T::zero(); len * n],
                        gc: vec![T::zero(); len * n],
                        ga: vec![T::zero(); din * n],
                        gd: vec![T::zero(); din],
                    };
                    let mut hs = vec![T::zero(); len * n];
                    let mut abar = vec![T::zero(); len * n];
                    let mut ph = vec![T::zero(); len * n];
                    let mut dp = vec![T::zero(); len * n];
                    let mut gh = vec![T::zero(); n];
                    let (mut gx_s, mut gdt_s) = (vec![T::zero(); n], vec![T::zero(); n]);
                    let brow = &bv[r * len * n..(r + 1) * len * n];
                    let crow = &cv[r * len * n..(r + 1) * len * n];
                    let rowv = |v: &[T], k: usize, ch: usize| v[(r * len + k) * din + ch];
                    for ch in 0..din {
                        let a_c = &av[ch * n..(ch + 1) * n];
                        // recompute states and cache the discretization terms
                        for k in 0..len {
                            let (dt, xk) = (rowv(dv, k, ch), rowv(xv, k, ch));
                            let o = k * n;
                            for s in 0..n {
                                let (ab, p, d) = zoh_terms(dt * a_c[s]);
                                abar[o + s] = ab;
                                ph[o + s] = p;
                                dp[o + s] = d;
                            }
                            let (done, cur) = hs.split_at_mut(o);
                            let prev = if k == 0 { None } else { Some(&done[o - n..]) };
                            let cur = &mut cur[..n];
                            let (ab, p, b) = (&abar[o..o + n], &ph[o..o + n], &brow[o..o + n]);
                            let dx = dt * xk;
                            match prev {
                                Some(prev) => {
                                    for s in 0..n {
                                        cur[s] = ab[s] * prev[s] + dx * p[s] * b[s];
                                    }
                                }
                                None => {
                                    for s in 0..n {
                                        cur[s] = dx * p[s] * b[s];
                                    }
                                }
                            }
                        }
                        gh.iter_mut().for_each(|v| *v = T::zero());
                        let zeros = vec![T::zero(); n];
                        for k in (0..len).rev() {
                            let (dt, xk, gy) = (rowv(dv, k, ch), rowv(xv, k, ch), rowv(gout, k, ch));
                            rg.gd[ch] += gy * xk;
                            let o = k * n;
                            let h = &hs[o..o + n];
                            let hprev = if k == 0 { &zeros[..] } else { &hs[o - n..o] };
                            let (ab, p, d) = (&abar[o..o + n], &ph[o..o + n], &dp[o..o + n]);
                            let (bk, ck) = (&brow[o..o + n], &crow[o..o + n]);
                            let gc = &mut rg.gc[o..o + n];
                            let gb = &mut rg.gb[o..o + n];
                            let ga = &mut rg.ga[ch * n..(ch + 1) * n];
                            for s in 0..n {
                                gc[s] += gy * h[s];
                                let ghs = gh[s] + ck[s] * gy;
                                let g_abar = ghs * hprev[s];
                                let g_bbar = ghs * xk;
                                gx_s[s] = ghs * dt * p[s] * bk[s];
                                gdt_s[s] = g_abar * a_c[s] * ab[s] + g_bbar * bk[s] * (p[s] + dt * d[s] * a_c[s]);
                                ga[s] += dt * (g_abar * ab[s] + g_bbar * dt * d[s] * bk[s]);
                                gb[s] += g_bbar * dt * p[s];
                                gh[s] = ghs * ab[s];
                            }
                            rg.gx[k * din + ch] += gy * skip[ch] + gx_s.iter().copied().sum::<T>();
                            rg.gdelta[k * din + ch] += gdt_s.iter().copied().sum::<T>();
                        }
                    }
                    rg
                })
                .collect();
            let row_block = |v: Var, field: fn(&RowGrads<T>) -> &Vec<T>, gr: &mut crate::tensor::Grads<T>| {
                if let Some(s) = gr.slot(v) {
                    for (r, rg) in per_row.iter().enumerate() {
                        let src = field(rg);
                        let dst = &mut s[r * src.len()..(r + 1) * src.len()];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
                    }
                }
            };
            row_block(x, |r| &r.gx, gr);
            row_block(delta, |r| &r.gdelta, gr);
            row_block(b, |r| &r.gb, gr);
            row_block(c, |r| &r.gc, gr);
            for (v, field) in [(a, (|r: &RowGrads<T>| &r.ga) as fn(&RowGrads<T>) -> &Vec<T>), (d, |r| &r.gd)] {
                if let Some(s) = gr.slot(v) {
                    for rg in &per_row {
                        s.iter_mut().zip(field(rg)).for_each(|(d, v)| *d += *v);
                    }
                }
            }
        }))
    }
}
