//! Denoising diffusion: schedule, forward corruption, hybrid loss, sampling and EMA.

mod loss;
mod sample;
mod schedule;

pub use loss::{
    discretized_gaussian_log_likelihood, loss_simple, loss_vlb, normal_kl, training_losses, LossTerms, VLB_WEIGHT,
};
pub use sample::{ema_update, p_mean_variance, p_sample_loop, Denoiser, SampleOptions, VarianceMode};
pub use schedule::{make_schedule, q_sample, DiffusionSchedule, ScheduleSpec, BETA_END, BETA_START};
