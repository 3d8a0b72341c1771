//! Discretized diagonal state-space models and their scans.

mod fused;
pub mod scan;
pub mod selective;
pub mod zoh;

pub use scan::{recurrence, recurrence_blelloch, recurrence_sequential, scan_parallel, scan_sequential, ScanMode};
pub use selective::{bidirectional_scan, flip_time, selective_scan, SsmParams};
pub use zoh::{discretize_zoh, dphi, phi, zoh_scalar, DiscreteSsm, SERIES_THRESHOLD};
