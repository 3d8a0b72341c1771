//! Synthetic data, training and sampling runs, checkpoints, toy metrics and benchmarks.

pub mod bench;
pub mod config;
pub mod gradcheck;
pub mod metrics;
pub mod sample;
pub mod sprites;
pub mod train;

pub use config::{Precision, TrainConfig};
pub use metrics::{histogram_distance, inter_frame_difference, toy_metrics, ToyReport};
pub use sample::{sample_videos, write_png_grid, write_samples, Samples};
pub use sprites::{gen_sprites, Dataset, SpriteDatasetSpec, SpriteKind};
pub use train::{run_training, StepLosses, TrainState, Trainer};

/// Worker threads requested through `MATTEN_THREADS`, if set to a positive integer.
pub fn threads_from_env() -> Option<usize> {
    std::env::var("MATTEN_THREADS").ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Caps the global rayon pool at `MATTEN_THREADS` workers. Call once at startup.
pub fn init_threads() {
    if let Some(n) = threads_from_env() {
        // fails only when the pool was already built, which keeps the old size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}
