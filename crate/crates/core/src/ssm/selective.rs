//! Input-dependent (selective) SSM layer built on the fused scan.

use rand::Rng;

use super::scan::ScanMode;
use crate::error::{shape_err, Result};
use crate::nn::{Bound, Init, Linear, ParamId, ParamSet};
use crate::tensor::{Graph, Real, Tensor, Var};

pub const DT_MIN: f64 = 1e-3;
pub const DT_MAX: f64 = 1e-1;

/// Parameters of one selective scan direction.
#[derive(Clone, Debug)]
pub struct SsmParams {
    /// `D_inner -> dt_rank + 2N`, no bias.
    pub x_proj: Linear,
    /// `dt_rank -> D_inner` with bias.
    pub dt_proj: Linear,
    /// `[D_inner, N]`, `A = -exp(a_log)`.
    pub a_log: ParamId,
    /// `[D_inner]`
    pub d_skip: ParamId,
    pub d_inner: usize,
    pub d_state: usize,
    pub dt_rank: usize,
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl SsmParams {
    pub fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        name: &str,
        d_inner: usize,
        d_state: usize,
        dt_rank: usize,
        rng: &mut R,
    ) -> Self {
        let x_proj = Linear::new(ps, &format!("{name}.x_proj"), d_inner, dt_rank + 2 * d_state, false, Init::Xavier, rng);
        let std = (dt_rank as f64).powf(-0.5);
        let w = Tensor::uniform(&[dt_rank, d_inner], -std, std, rng);
        let dt_w = ps.add(format!("{name}.dt_proj.weight"), w);
        let bias: Vec<f64> = (0..d_inner)
            .map(|_| {
                let u: f64 = rng.random();
                let dt = (DT_MIN.ln() + u * (DT_MAX.ln() - DT_MIN.ln())).exp();
                inverse_softplus(dt)
            })
            .collect();
        let dt_b = ps.add(
            format!("{name}.dt_proj.bias"),
            Tensor::from_f64(&[d_inner], &bias).expect("bias shape"),
        );
        let dt_proj = Linear {
            w: dt_w,
            b: Some(dt_b),
            in_dim: dt_rank,
            out_dim: d_inner,
        };
        let a_log = Tensor::from_fn(&[d_inner, d_state], |i| T::c(((i % d_state) + 1) as f64).ln());
        let a_log = ps.add(format!("{name}.a_log"), a_log);
        let d_skip = ps.add(format!("{name}.d_skip"), Tensor::ones(&[d_inner]));
        Self {
            x_proj,
            dt_proj,
            a_log,
            d_skip,
            d_inner,
            d_state,
            dt_rank,
        }
    }

    pub fn numel(&self) -> usize {
        self.x_proj.numel() + self.dt_proj.numel() + self.d_inner * self.d_state + self.d_inner
    }
}

/// Selective scan of `x: [R, L, D_inner]` along axis 1.
pub fn selective_scan<T: Real>(g: &mut Graph<T>, p: &Bound, sp: &SsmParams, x: Var, mode: ScanMode) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 || shape[2] != sp.d_inner {
        return Err(shape_err!("selective_scan: expected [R, L, {}], got {shape:?}", sp.d_inner));
    }
    let proj = sp.x_proj.forward(g, p, x)?;
    let dt_in = g.slice_last(proj, 0, sp.dt_rank)?;
    let b = g.slice_last(proj, sp.dt_rank, sp.d_state)?;
    let c = g.slice_last(proj, sp.dt_rank + sp.d_state, sp.d_state)?;
    let dt = sp.dt_proj.forward(g, p, dt_in)?;
    let delta = g.softplus(dt);
    let ea = g.exp(p[sp.a_log]);
    let a = g.neg(ea);
    g.ssm_scan(x, delta, a, b, c, p[sp.d_skip], mode)
}

/// Reverses axis 1 of `x: [R, L, C]`.
pub fn flip_time<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let [rows, len, _] = shape[..] else {
        return Err(shape_err!("flip_time: expected rank 3, got {shape:?}"));
    };
    let idx: Vec<usize> = (0..rows).flat_map(|r| (0..len).rev().map(move |l| r * len + l)).collect();
    g.gather_rows(x, &idx, &shape)
}

/// Sum of a forward scan and a time-reversed scan with separate parameters.
pub fn bidirectional_scan<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    fwd: &SsmParams,
    bwd: &SsmParams,
    x: Var,
    mode: ScanMode,
) -> Result<Var> {
    let yf = selective_scan(g, p, fwd, x, mode)?;
    let xr = flip_time(g, x)?;
    let yr = selective_scan(g, p, bwd, xr, mode)?;
    let yb = flip_time(g, yr)?;
    g.add(yf, yb)
}
