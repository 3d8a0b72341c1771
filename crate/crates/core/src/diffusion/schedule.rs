use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

/// Schedule description stored in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub steps: usize,
}

/// Noise schedule with every table the forward process, the posterior and
/// the learned-variance parameterization need. Always kept in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    pub alphas_cumprod: Vec<f64>,
    pub alphas_cumprod_prev: Vec<f64>,
    pub sqrt_alphas_cumprod: Vec<f64>,
    pub sqrt_one_minus_alphas_cumprod: Vec<f64>,
    pub sqrt_recip_alphas_cumprod: Vec<f64>,
    pub sqrt_recipm1_alphas_cumprod: Vec<f64>,
    /// β̃_t
    pub posterior_variance: Vec<f64>,
    /// log β̃_t with the t=0 entry replaced by t=1 (β̃_0 = 0).
    pub posterior_log_variance_clipped: Vec<f64>,
    pub posterior_mean_coef1: Vec<f64>,
    pub posterior_mean_coef2: Vec<f64>,
    /// Model timestep fed to the network for each entry (identity unless respaced).
    pub timestep_map: Vec<usize>,
}

/// Linear betas from `1e-4` to `2e-2` over `steps`.
pub fn make_schedule(steps: usize) -> Result<DiffusionSchedule> {
    if steps < 2 {
        return Err(Error::Param(format!("schedule needs at least 2 steps, got {steps}")));
    }
    let betas = (0..steps)
        .map(|i| BETA_START + (BETA_END - BETA_START) * i as f64 / (steps - 1) as f64)
        .collect();
    DiffusionSchedule::from_betas(betas)
}

impl DiffusionSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Param("betas must lie in (0, 1)".into()));
        }
        let n = betas.len();
        let mut ac = Vec::with_capacity(n);
        let mut prod = 1.0;
        for &b in &betas {
            prod *= 1.0 - b;
            ac.push(prod);
        }
        let acp: Vec<f64> = std::iter::once(1.0).chain(ac[..n - 1].iter().copied()).collect();
        let pv: Vec<f64> = (0..n).map(|t| betas[t] * (1.0 - acp[t]) / (1.0 - ac[t])).collect();
        let plv = (0..n)
            .map(|t| if t == 0 { pv.get(1).copied().unwrap_or(betas[0]).ln() } else { pv[t].ln() })
            .collect();
        Ok(Self {
            alphas_cumprod: ac.clone(),
            sqrt_alphas_cumprod: ac.iter().map(|a| a.sqrt()).collect(),
            sqrt_one_minus_alphas_cumprod: ac.iter().map(|a| (1.0 - a).sqrt()).collect(),
            sqrt_recip_alphas_cumprod: ac.iter().map(|a| (1.0 / a).sqrt()).collect(),
            sqrt_recipm1_alphas_cumprod: ac.iter().map(|a| (1.0 / a - 1.0).sqrt()).collect(),
            posterior_mean_coef1: (0..n).map(|t| betas[t] * acp[t].sqrt() / (1.0 - ac[t])).collect(),
            posterior_mean_coef2: (0..n)
                .map(|t| (1.0 - acp[t]) * (1.0 - betas[t]).sqrt() / (1.0 - ac[t]))
                .collect(),
            posterior_variance: pv,
            posterior_log_variance_clipped: plv,
            alphas_cumprod_prev: acp,
            timestep_map: (0..n).collect(),
            betas,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// Sub-sequence schedule over `use_timesteps` (sorted, distinct), with
    /// betas recomputed so the cumulative products match the originals.
    pub fn respace(&self, use_timesteps: &[usize]) -> Result<Self> {
        if use_timesteps.is_empty() || use_timesteps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Param("respacing timesteps must be increasing and nonempty".into()));
        }
        if *use_timesteps.last().unwrap() >= self.len() {
            return Err(Error::Param(format!("respacing index beyond {} steps", self.len())));
        }
        let mut last = 1.0;
        let mut betas = Vec::with_capacity(use_timesteps.len());
        for &t in use_timesteps {
            let ac = self.alphas_cumprod[t];
            betas.push(1.0 - ac / last);
            last = ac;
        }
        let mut s = Self::from_betas(betas)?;
        s.timestep_map = use_timesteps.iter().map(|&t| self.timestep_map[t]).collect();
        Ok(s)
    }

    /// `count` evenly strided steps ending at the last one.
    pub fn strided(&self, count: usize) -> Result<Self> {
        if count == 0 || count > self.len() {
            return Err(Error::Param(format!("cannot stride {} steps into {count}", self.len())));
        }
        if count == self.len() {
            return Ok(self.clone());
        }
        let n = self.len();
        let ts: Vec<usize> = if count == 1 {
            vec![n - 1]
        } else {
            (0..count).map(|i| (i * (n - 1)) / (count - 1)).collect()
        };
        self.respace(&ts)
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::Index(format!("timestep {t} outside schedule of {}", self.len())));
        }
        Ok(())
    }
}

/// `z_t = √ᾱ_t z0 + √(1−ᾱ_t) ε`, with one timestep per leading batch index.
pub fn q_sample<T: Real>(s: &DiffusionSchedule, z0: &Tensor<T>, t: &[usize], eps: &Tensor<T>) -> Result<Tensor<T>> {
    if z0.shape() != eps.shape() || z0.shape()[0] != t.len() {
        return Err(shape_err!(
            "q_sample: z0 {:?}, eps {:?}, {} timesteps",
            z0.shape(),
            eps.shape(),
            t.len()
        ));
    }
    for &ti in t {
        s.check_t(ti)?;
    }
    let per = z0.numel() / t.len();
    Tensor::new(
        z0.shape(),
        z0.data()
            .iter()
            .zip(eps.data())
            .enumerate()
            .map(|(i, (x, e))| {
                let ti = t[i / per];
                T::c(s.sqrt_alphas_cumprod[ti]) * *x + T::c(s.sqrt_one_minus_alphas_cumprod[ti]) * *e
            })
            .collect(),
    )
}
