use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{Matten, ModelConfig};
use crate::diffusion::{loss_vlb, make_schedule};
use crate::error::{Error, Result};
use crate::nn::Bound;
use crate::ssm::ScanMode;
use crate::tensor::{grad_check, GradCheckOptions, GradReport, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    /// Every differentiable primitive.
    Small,
    /// Primitives plus tiny instances of all four variants.
    Full,
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(Suite::Small),
            "full" => Ok(Suite::Full),
            _ => Err(Error::Config(format!("unknown suite '{s}' (small|full)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: String,
    pub report: GradReport,
}

type Params = Vec<(String, Tensor<f64>)>;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// `Σ y ⊙ w` with a fixed random `w`, so every output element matters.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(g.shape(y), 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let wv = g.constant(&w);
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

fn check<F>(name: &str, params: Params, f: F) -> Result<GradCase>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let report = grad_check(
        |g, v| {
            let y = f(g, v)?;
            if g.shape(y).iter().product::<usize>() == 1 {
                Ok(y)
            } else {
                project(g, y, 1234)
            }
        },
        &params,
        &GradCheckOptions::default(),
    )?;
    Ok(GradCase {
        name: name.into(),
        report,
    })
}

fn named(items: Vec<(&str, Tensor<f64>)>) -> Params {
    items.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

/// Finite-difference checks of every primitive.
pub fn primitive_cases() -> Result<Vec<GradCase>> {
    let r = &mut ChaCha8Rng::seed_from_u64(5);
    let mut out = Vec::new();
    let ab = named(vec![("a", randn(&[3, 4], r)), ("b", randn(&[3, 4], r))]);
    out.push(check("add", ab.clone(), |g, v| g.add(v[0], v[1]))?);
    out.push(check("sub", ab.clone(), |g, v| g.sub(v[0], v[1]))?);
    out.push(check("mul", ab.clone(), |g, v| g.mul(v[0], v[1]))?);
    out.push(check("mse", ab, |g, v| g.mse(v[0], v[1]))?);
    let x = named(vec![("x", randn(&[2, 3, 4], r))]);
    out.push(check("scale", x.clone(), |g, v| Ok(g.scale(v[0], 0.7)))?);
    out.push(check("add_scalar", x.clone(), |g, v| Ok(g.add_scalar(v[0], 0.3)))?);
    out.push(check("neg", x.clone(), |g, v| Ok(g.neg(v[0])))?);
    out.push(check("exp", x.clone(), |g, v| Ok(g.exp(v[0])))?);
    out.push(check("square", x.clone(), |g, v| Ok(g.square(v[0])))?);
    out.push(check("silu", x.clone(), |g, v| Ok(g.silu(v[0])))?);
    out.push(check("softplus", x.clone(), |g, v| Ok(g.softplus(v[0])))?);
    out.push(check("softmax", x.clone(), |g, v| Ok(g.softmax(v[0])))?);
    out.push(check("reshape", x.clone(), |g, v| g.reshape(v[0], &[6, 4]))?);
    out.push(check("permute", x.clone(), |g, v| g.permute(v[0], &[2, 0, 1]))?);
    out.push(check("gather_rows", x.clone(), |g, v| g.gather_rows(v[0], &[5, 0, 0, 3], &[4, 4]))?);
    out.push(check("slice_last", x.clone(), |g, v| g.slice_last(v[0], 1, 2))?);
    out.push(check("sum_axis", x.clone(), |g, v| g.sum_axis(v[0], 1))?);
    out.push(check("mean_axis", x.clone(), |g, v| g.mean_axis(v[0], 2))?);
    out.push(check("mean", x.clone(), |g, v| Ok(g.mean(v[0])))?);
    out.push(check("concat0", x.clone(), |g, v| g.concat0(&[v[0], v[0]]))?);
    let xw = named(vec![("x", randn(&[2, 3, 4], r)), ("v", randn(&[4], r))]);
    out.push(check("add_bcast", xw.clone(), |g, v| g.add_bcast(v[0], v[1]))?);
    out.push(check("mul_bcast", xw, |g, v| g.mul_bcast(v[0], v[1]))?);
    let xm = named(vec![("x", randn(&[2, 3, 4], r)), ("m", randn(&[2, 4], r))]);
    out.push(check("mul_per_sample", xm.clone(), |g, v| g.mul_per_sample(v[0], v[1]))?);
    out.push(check("add_per_sample", xm, |g, v| g.add_per_sample(v[0], v[1]))?);
    let mm = named(vec![("a", randn(&[3, 5], r)), ("b", randn(&[5, 2], r))]);
    out.push(check("matmul", mm, |g, v| g.matmul(v[0], v[1]))?);
    let lin = named(vec![("x", randn(&[2, 3, 5], r)), ("w", randn(&[5, 4], r)), ("b", randn(&[4], r))]);
    out.push(check("linear", lin, |g, v| g.linear(v[0], v[1], Some(v[2])))?);
    let ln = named(vec![("x", randn(&[3, 6], r)), ("gain", randn(&[6], r)), ("bias", randn(&[6], r))]);
    out.push(check("layer_norm", ln, |g, v| g.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-6))?);
    let conv = named(vec![("x", randn(&[2, 5, 3], r)), ("w", randn(&[3, 4], r)), ("b", randn(&[3], r))]);
    out.push(check("causal_conv1d", conv, |g, v| g.causal_conv1d(v[0], v[1], v[2]))?);
    let att = named(vec![("q", randn(&[2, 4, 6], r)), ("k", randn(&[2, 4, 6], r)), ("v", randn(&[2, 4, 6], r))]);
    out.push(check("attention", att, |g, v| g.attention(v[0], v[1], v[2], 2))?);
    for mode in [ScanMode::Sequential, ScanMode::Parallel] {
        let p = named(vec![
            ("x", randn(&[2, 6, 3], r)),
            ("delta_raw", randn(&[2, 6, 3], r)),
            ("a_log", Tensor::uniform(&[3, 2], -0.5, 0.5, r)),
            ("b", randn(&[2, 6, 2], r)),
            ("c", randn(&[2, 6, 2], r)),
            ("d", randn(&[3], r)),
        ]);
        out.push(check(&format!("ssm_scan_{}", mode.short()), p, move |g, v| {
            let delta = g.softplus(v[1]);
            let ea = g.exp(v[2]);
            let a = g.neg(ea);
            g.ssm_scan(v[0], delta, a, v[3], v[4], v[5], mode)
        })?);
    }
    let s = make_schedule(20)?;
    let x0 = Tensor::<f64>::uniform(&[2, 3], -1.0, 1.0, r);
    let xt = randn(&[2, 3], r);
    let eh = randn(&[2, 3], r);
    let vlb = named(vec![("sigma_raw", Tensor::uniform(&[2, 3], -0.9, 0.9, r))]);
    out.push(check("loss_vlb", vlb, |g, v| loss_vlb(g, &s, v[0], eh.data(), &xt, &x0, &[0, 11]))?);
    Ok(out)
}

/// Tiny instance used by the model checks: `D = 8`, `N = 4`, one latent channel pair.
pub fn tiny_model_config(variant: u8, layers: usize) -> ModelConfig {
    let mut c = ModelConfig::new(variant, layers, 8);
    c.d_state = 4;
    c.in_channels = 2;
    c.freq_dim = 8;
    c.scan_mode = ScanMode::Sequential;
    c
}

/// Gradient check of the whole network on a `[1, 2, 4, 4, C]` input.
/// Weights get O(1) perturbations and the step-size bias is zeroed so that
/// the transition parameters receive gradients well above finite-difference
/// roundoff.
pub fn model_gradient_report(cfg: ModelConfig, max_coords: Option<usize>) -> Result<GradReport> {
    let mut m = Matten::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(11))?;
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let names: Vec<String> = m.params.iter().map(|(n, _)| n.to_string()).collect();
    for (t, n) in m.params.tensors_mut().iter_mut().zip(&names) {
        if n.ends_with("dt_proj.bias") {
            t.data_mut().fill(0.0);
        }
        let noise = Tensor::<f64>::randn(t.shape(), 0.3, &mut r);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += *b);
    }
    let params: Params = m.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let c = m.config.in_channels;
    let x = Tensor::<f64>::randn(&[1, 2, 4, 4, c], 1.0, &mut r);
    let w = Tensor::<f64>::randn(&[1, 2, 4, 4, c], 1.0, &mut r);
    let classes = m.config.num_classes.map(|_| vec![1usize]);
    grad_check(
        |g, v| {
            let p = Bound::from_vars(v.to_vec());
            let xv = g.constant(&x);
            let out = m.forward(g, &p, xv, &[17], classes.as_deref())?;
            let wv = g.constant(&w);
            let a = g.mul(out.eps, wv)?;
            let b = g.mul(out.sigma_raw, out.sigma_raw)?;
            let s = g.add(a, b)?;
            Ok(g.sum(s))
        },
        &params,
        &GradCheckOptions {
            step: 1e-3,
            max_coords_per_param: max_coords,
            five_point: true,
            ..GradCheckOptions::default()
        },
    )
}

/// Model cases of the full suite: every variant at `L ≤ 3`, `D = 8`.
pub fn model_cases() -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    for (variant, layers) in [(1u8, 3usize), (2, 2), (3, 3), (4, 3)] {
        let report = model_gradient_report(tiny_model_config(variant, layers), Some(16))?;
        out.push(GradCase {
            name: format!("model_v{variant}_l{layers}"),
            report,
        });
    }
    Ok(out)
}

pub fn run_suite(suite: Suite) -> Result<Vec<GradCase>> {
    let mut cases = primitive_cases()?;
    if suite == Suite::Full {
        cases.extend(model_cases()?);
    }
    Ok(cases)
}
