use std::f64::consts::{LN_2, PI};

use super::schedule::{q_sample, DiffusionSchedule};
use crate::blocks::Matten;
use crate::error::{shape_err, Result};
use crate::nn::Bound;
use crate::tensor::{Graph, Real, Tensor, Var};

/// Weight of the variational term in the hybrid objective.
pub const VLB_WEIGHT: f64 = 1e-3;

/// Half-width of one quantization bin for data in [-1, 1] with 256 levels.
const BIN: f64 = 1.0 / 255.0;

/// `KL(N(m1, e^lv1) ‖ N(m2, e^lv2))` in nats.
pub fn normal_kl(m1: f64, lv1: f64, m2: f64, lv2: f64) -> f64 {
    let d = lv1 - lv2;
    0.5 * (d.exp_m1() - d + (m1 - m2).powi(2) * (-lv2).exp())
}

/// `∂ KL / ∂ lv2`.
fn normal_kl_dlv2(m1: f64, lv1: f64, m2: f64, lv2: f64) -> f64 {
    0.5 * (-(lv1 - lv2).exp_m1() - (m1 - m2).powi(2) * (-lv2).exp())
}

/// Standard normal CDF via the tanh approximation, and its derivative.
fn approx_cdf(u: f64) -> (f64, f64) {
    let k = (2.0 / PI).sqrt();
    let th = (k * (u + 0.044715 * u.powi(3))).tanh();
    (0.5 * (1.0 + th), 0.5 * (1.0 - th * th) * k * (1.0 + 3.0 * 0.044715 * u * u))
}

/// Log-probability of the bin containing `x` under `N(mean, e^{2·log_scale})`,
/// with open-ended edge bins at ±1. Returns the value and its derivative in
/// `log_scale`.
pub fn discretized_gaussian_log_likelihood(x: f64, mean: f64, log_scale: f64) -> (f64, f64) {
    let inv = (-log_scale).exp();
    let plus_in = inv * (x - mean + BIN);
    let min_in = inv * (x - mean - BIN);
    let (cdf_plus, dp) = approx_cdf(plus_in);
    let (cdf_min, dm) = approx_cdf(min_in);
    // ∂(·_in)/∂ log_scale = −(·_in)
    let (dplus, dmin) = (-dp * plus_in, -dm * min_in);
    let floor = 1e-12;
    if x < -0.999 {
        if cdf_plus > floor {
            (cdf_plus.ln(), dplus / cdf_plus)
        } else {
            (floor.ln(), 0.0)
        }
    } else if x > 0.999 {
        let tail = 1.0 - cdf_min;
        if tail > floor {
            (tail.ln(), -dmin / tail)
        } else {
            (floor.ln(), 0.0)
        }
    } else {
        let delta = cdf_plus - cdf_min;
        if delta > floor {
            (delta.ln(), (dplus - dmin) / delta)
        } else {
            (floor.ln(), 0.0)
        }
    }
}

/// Per-element variational term (bits) and its derivative in `s_raw`.
#[allow(clippy::too_many_arguments)]
fn vlb_element(s: &DiffusionSchedule, t: usize, x0: f64, xt: f64, eps_hat: f64, s_raw: f64) -> (f64, f64) {
    let (c1, c2) = (s.posterior_mean_coef1[t], s.posterior_mean_coef2[t]);
    let min_log = s.posterior_log_variance_clipped[t];
    let max_log = s.betas[t].ln();
    let frac = (s_raw + 1.0) * 0.5;
    let lv = frac * max_log + (1.0 - frac) * min_log;
    let dlv = 0.5 * (max_log - min_log);
    let x0_pred = s.sqrt_recip_alphas_cumprod[t] * xt - s.sqrt_recipm1_alphas_cumprod[t] * eps_hat;
    let model_mean = c1 * x0_pred + c2 * xt;
    if t == 0 {
        let (ll, dll) = discretized_gaussian_log_likelihood(x0, model_mean, 0.5 * lv);
        (-ll / LN_2, -dll * 0.5 * dlv / LN_2)
    } else {
        let true_mean = c1 * x0 + c2 * xt;
        let true_lv = s.posterior_log_variance_clipped[t];
        (
            normal_kl(true_mean, true_lv, model_mean, lv) / LN_2,
            normal_kl_dlv2(true_mean, true_lv, model_mean, lv) * dlv / LN_2,
        )
    }
}

/// Mean per-timestep variational term in bits, differentiable in
/// `sigma_raw` only: the model mean is built from the values of `eps_hat`
/// with no gradient path. All tensors are `[B, ..]` with one timestep per sample.
pub fn loss_vlb<T: Real>(
    g: &mut Graph<T>,
    s: &DiffusionSchedule,
    sigma_raw: Var,
    eps_hat: &[T],
    x_t: &Tensor<T>,
    x0: &Tensor<T>,
    t: &[usize],
) -> Result<Var> {
    let n = x0.numel();
    if g.value(sigma_raw).len() != n || eps_hat.len() != n || x_t.numel() != n || x0.shape()[0] != t.len() {
        return Err(shape_err!(
            "loss_vlb: sigma_raw {:?}, x0 {:?}, x_t {:?}, {} eps values, {} timesteps",
            g.shape(sigma_raw),
            x0.shape(),
            x_t.shape(),
            eps_hat.len(),
            t.len()
        ));
    }
    let per = n / t.len();
    let sr = g.value(sigma_raw);
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(n);
    for i in 0..n {
        let (v, d) = vlb_element(
            s,
            t[i / per],
            x0.data()[i].f64(),
            x_t.data()[i].f64(),
            eps_hat[i].f64(),
            sr[i].f64(),
        );
        total += v;
        grad.push(T::c(d / n as f64));
    }
    let value = T::c(total / n as f64);
    Ok(g.push(vec![1], vec![value], &[sigma_raw], move |_, gout, gr| {
        if let Some(slot) = gr.slot(sigma_raw) {
            slot.iter_mut().zip(&grad).for_each(|(a, b)| *a += gout[0] * *b);
        }
    }))
}

/// Terms of the hybrid objective for one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub simple: Var,
    /// Per-timestep variational term in bits.
    pub vlb: Var,
    /// `simple + λ·T·vlb`: the sum-over-timesteps bound is estimated by `T` times one term.
    pub total: Var,
}

/// Mean squared error between predicted and true noise.
pub fn loss_simple<T: Real>(g: &mut Graph<T>, eps_hat: Var, eps: Var) -> Result<Var> {
    g.mse(eps_hat, eps)
}

/// Corrupts `x0` at timesteps `t` with `eps`, runs the model and builds the hybrid loss.
#[allow(clippy::too_many_arguments)]
pub fn training_losses<T: Real>(
    g: &mut Graph<T>,
    model: &Matten<T>,
    p: &Bound,
    s: &DiffusionSchedule,
    x0: &Tensor<T>,
    t: &[usize],
    eps: &Tensor<T>,
    class: Option<&[usize]>,
) -> Result<LossTerms> {
    let xt = q_sample(s, x0, t, eps)?;
    let xv = g.constant(&xt);
    let model_t: Vec<usize> = t.iter().map(|&i| s.timestep_map[i]).collect();
    let out = model.forward(g, p, xv, &model_t, class)?;
    let ev = g.constant(eps);
    let simple = loss_simple(g, out.eps, ev)?;
    let eps_vals = g.value(out.eps).to_vec();
    let vlb = loss_vlb(g, s, out.sigma_raw, &eps_vals, &xt, x0, t)?;
    let weighted = g.scale(vlb, T::c(VLB_WEIGHT * s.len() as f64));
    let total = g.add(simple, weighted)?;
    Ok(LossTerms { simple, vlb, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;
    use crate::tensor::{grad_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kl_helper_closed_form() {
        let e = std::f64::consts::E;
        assert!((normal_kl(0.0, 1.0, 0.0, 0.0) - (e - 2.0) / 2.0).abs() < 1e-15);
        assert!((normal_kl(0.0, 1.0, 0.0, 0.0) - 0.359).abs() < 1e-3);
        assert_eq!(normal_kl(0.3, -1.2, 0.3, -1.2), 0.0);
        let h = 1e-6;
        let fd = (normal_kl(0.1, 0.2, -0.4, 0.5 + h) - normal_kl(0.1, 0.2, -0.4, 0.5 - h)) / (2.0 * h);
        assert!((fd - normal_kl_dlv2(0.1, 0.2, -0.4, 0.5)).abs() < 1e-8);
    }

    #[test]
    fn discretized_likelihood_derivative() {
        for &(x, m, ls) in &[(0.2, 0.1, -3.0), (-1.0, -0.9, -2.0), (1.0, 0.95, -4.0), (0.0, 0.0, -6.0)] {
            let h = 1e-6;
            let fd = (discretized_gaussian_log_likelihood(x, m, ls + h).0
                - discretized_gaussian_log_likelihood(x, m, ls - h).0)
                / (2.0 * h);
            let (_, d) = discretized_gaussian_log_likelihood(x, m, ls);
            assert!((fd - d).abs() < 1e-6 * (1.0 + d.abs()), "{x} {m} {ls}: {fd} vs {d}");
        }
        // a narrow Gaussian centered in the bin puts almost all mass there
        assert!(discretized_gaussian_log_likelihood(0.0, 0.0, -10.0).0 > -1e-6);
    }

    #[test]
    fn matched_posterior_gives_zero_kl() {
        let s = make_schedule(10).unwrap();
        let t = 5;
        let (x0, eps) = (0.4, -0.7);
        let xt = s.sqrt_alphas_cumprod[t] * x0 + s.sqrt_one_minus_alphas_cumprod[t] * eps;
        // exact eps and v = -1 (Σ = β̃)
        let (v, _) = vlb_element(&s, t, x0, xt, eps, -1.0);
        assert!(v.abs() < 1e-12, "{v}");
    }

    #[test]
    fn kl_is_nonnegative_and_gradient_is_exact() {
        let s = make_schedule(20).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::<f64>::uniform(&[3, 4], -1.0, 1.0, &mut r);
        let xt = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
        let eh = Tensor::<f64>::randn(&[3, 4], 1.0, &mut r);
        let t = [0usize, 7, 19];
        for i in 0..12 {
            let (v, _) = vlb_element(&s, t[i / 4], x0.data()[i], xt.data()[i], eh.data()[i], 0.3);
            assert!(v >= 0.0 || t[i / 4] == 0);
        }
        let params = vec![("sigma".to_string(), Tensor::<f64>::uniform(&[3, 4], -0.9, 0.9, &mut r))];
        let rep = grad_check(
            |g, v| loss_vlb(g, &s, v[0], eh.data(), &xt, &x0, &t),
            &params,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "{rep:?}");
    }

    #[test]
    fn simple_loss_of_zero_prediction_is_noise_power() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let eps = Tensor::<f64>::randn(&[20000], 1.0, &mut r);
        let mut g = Graph::new();
        let z = g.constant(&Tensor::zeros(&[20000]));
        let e = g.constant(&eps);
        let l = loss_simple(&mut g, z, e).unwrap();
        assert!((g.scalar(l) - 1.0).abs() < 0.05);
        let same = loss_simple(&mut g, e, e).unwrap();
        assert_eq!(g.scalar(same), 0.0);
    }
}
