use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::schedule::DiffusionSchedule;
use crate::blocks::Matten;
use crate::error::{shape_err, Error, Result};
use crate::nn::ParamSet;
use crate::tensor::{Graph, Real, Tensor};

/// Anything that predicts `(eps_hat, sigma_raw)` for a noisy batch.
pub trait Denoiser<T: Real> {
    fn predict(&self, x: &Tensor<T>, t: &[usize], class: Option<&[usize]>) -> Result<(Tensor<T>, Tensor<T>)>;
}

impl<T: Real> Denoiser<T> for Matten<T> {
    fn predict(&self, x: &Tensor<T>, t: &[usize], class: Option<&[usize]>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::no_grad();
        let p = self.params.bind(&mut g);
        let xv = g.constant(x);
        let out = self.forward(&mut g, &p, xv, t, class)?;
        Ok((g.tensor(out.eps), g.tensor(out.sigma_raw)))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum VarianceMode {
    /// Interpolate between β̃_t and β_t with the model's variance output.
    #[default]
    Learned,
    /// Fixed posterior variance β̃_t.
    Posterior,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleOptions {
    pub clip_denoised: bool,
    pub variance: VarianceMode,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            clip_denoised: true,
            variance: VarianceMode::Learned,
        }
    }
}

/// Mean and log-variance of `p(x_{i-1} | x_i)` at schedule index `i`.
pub fn p_mean_variance<T: Real>(
    s: &DiffusionSchedule,
    i: usize,
    x: &Tensor<T>,
    eps_hat: &Tensor<T>,
    sigma_raw: &Tensor<T>,
    opts: &SampleOptions,
) -> (Vec<f64>, Vec<f64>) {
    let min_log = s.posterior_log_variance_clipped[i];
    let max_log = s.betas[i].ln();
    let mut mean = Vec::with_capacity(x.numel());
    let mut logvar = Vec::with_capacity(x.numel());
    for ((xv, e), v) in x.data().iter().zip(eps_hat.data()).zip(sigma_raw.data()) {
        let xv = xv.f64();
        let mut x0 = s.sqrt_recip_alphas_cumprod[i] * xv - s.sqrt_recipm1_alphas_cumprod[i] * e.f64();
        if opts.clip_denoised {
            x0 = x0.clamp(-1.0, 1.0);
        }
        mean.push(s.posterior_mean_coef1[i] * x0 + s.posterior_mean_coef2[i] * xv);
        logvar.push(match opts.variance {
            VarianceMode::Learned => {
                let frac = (v.f64() + 1.0) * 0.5;
                frac * max_log + (1.0 - frac) * min_log
            }
            VarianceMode::Posterior => min_log,
        });
    }
    (mean, logvar)
}

/// Ancestral sampling over every index of `s` (use a respaced schedule for
/// fewer steps), starting from seeded Gaussian noise of `shape`.
pub fn p_sample_loop<T: Real, M: Denoiser<T> + ?Sized>(
    model: &M,
    s: &DiffusionSchedule,
    shape: &[usize],
    class: Option<&[usize]>,
    seed: u64,
    opts: &SampleOptions,
) -> Result<Tensor<T>> {
    if shape.is_empty() {
        return Err(shape_err!("p_sample_loop: empty shape"));
    }
    let b = shape[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::<T>::randn(shape, 1.0, &mut rng);
    for i in (0..s.len()).rev() {
        let (eps, sig) = model.predict(&x, &vec![s.timestep_map[i]; b], class)?;
        let (mean, logvar) = p_mean_variance(s, i, &x, &eps, &sig, opts);
        let noise = Tensor::<T>::randn(shape, 1.0, &mut rng);
        let data: Vec<T> = if i > 0 {
            mean.iter()
                .zip(&logvar)
                .zip(noise.data())
                .map(|((m, lv), z)| T::c(m + (0.5 * lv).exp() * z.f64()))
                .collect()
        } else {
            mean.iter().map(|&m| T::c(m)).collect()
        };
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Sampling { t: s.timestep_map[i] });
        }
        x = Tensor::new(shape, data)?;
    }
    Ok(x)
}

/// `ema ← decay·ema + (1−decay)·param` for every tensor.
pub fn ema_update<T: Real>(ema: &mut ParamSet<T>, params: &ParamSet<T>, decay: f64) -> Result<()> {
    ema.check_same_structure(params)?;
    let (d, one_minus) = (T::c(decay), T::c(1.0 - decay));
    for (e, p) in ema.tensors_mut().iter_mut().zip(params.tensors()) {
        e.data_mut().iter_mut().zip(p.data()).for_each(|(e, p)| *e = d * *e + one_minus * *p);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;

    struct Fixed(f64);

    impl Denoiser<f64> for Fixed {
        fn predict(&self, x: &Tensor<f64>, _: &[usize], _: Option<&[usize]>) -> Result<(Tensor<f64>, Tensor<f64>)> {
            Ok((Tensor::full(x.shape(), self.0), Tensor::full(x.shape(), -1.0)))
        }
    }

    #[test]
    fn single_step_is_one_posterior_step() {
        let s = make_schedule(1000).unwrap().strided(1).unwrap();
        let opts = SampleOptions {
            clip_denoised: false,
            variance: VarianceMode::Posterior,
        };
        let out = p_sample_loop(&Fixed(0.3), &s, &[1, 3], None, 5, &opts).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(&[1, 3], 1.0, &mut rng);
        let ab = make_schedule(1000).unwrap().alphas_cumprod[999];
        for (o, x) in out.data().iter().zip(x.data()) {
            let want = (x - (1.0 - ab).sqrt() * 0.3) / ab.sqrt();
            assert!((o - want).abs() < 1e-9 * want.abs().max(1.0), "{o} vs {want}");
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let s = make_schedule(20).unwrap().strided(5).unwrap();
        let o = SampleOptions::default();
        let a = p_sample_loop(&Fixed(0.0), &s, &[2, 4], None, 1, &o).unwrap();
        let b = p_sample_loop(&Fixed(0.0), &s, &[2, 4], None, 1, &o).unwrap();
        let c = p_sample_loop(&Fixed(0.0), &s, &[2, 4], None, 2, &o).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.shape(), &[2, 4]);
    }

    #[test]
    fn divergent_model_reports_timestep() {
        let s = make_schedule(10).unwrap();
        let err = p_sample_loop(&Fixed(f64::NAN), &s, &[1, 2], None, 0, &SampleOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Sampling { t: 9 }));
    }

    #[test]
    fn ema_arithmetic() {
        let mut ema = ParamSet::<f64>::new();
        ema.add("w", Tensor::ones(&[2]));
        let mut p = ParamSet::<f64>::new();
        p.add("w", Tensor::zeros(&[2]));
        ema_update(&mut ema, &p, 0.99).unwrap();
        assert!((ema.tensors()[0].data()[0] - 0.99).abs() < 1e-15);
        let same = ema.clone();
        let mut fixed = ema.clone();
        ema_update(&mut fixed, &same, 0.99).unwrap();
        assert!(fixed.max_abs_diff(&same) < 1e-16);

        let (e, pv) = (0.2, 1.5);
        let mut ema = ParamSet::<f64>::new();
        ema.add("w", Tensor::full(&[1], e));
        let mut p = ParamSet::<f64>::new();
        p.add("w", Tensor::full(&[1], pv));
        for _ in 0..10 {
            ema_update(&mut ema, &p, 0.99).unwrap();
        }
        let k = 0.99f64.powi(10);
        assert!((ema.tensors()[0].data()[0] - (e * k + pv * (1.0 - k))).abs() < 1e-14);

        let mut other = ParamSet::<f64>::new();
        other.add("v", Tensor::zeros(&[1]));
        assert!(matches!(ema_update(&mut ema, &other, 0.99), Err(Error::Structure(_))));
    }
}
