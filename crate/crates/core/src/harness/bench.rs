use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::ssm::{discretize_zoh, scan_parallel, scan_sequential, ScanMode};
use crate::tensor::{Graph, Tensor};

/// One timing measurement: best of the repetitions, in nanoseconds.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub j: usize,
    pub channels: usize,
    pub mode: String,
    pub nanos: u128,
    pub checksum: f64,
}

pub const BENCH_HEADER: &str = "J,channels,mode,nanos,checksum";

impl BenchRow {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.j, self.channels, self.mode, self.nanos, self.checksum)
    }
}

/// Powers of two from `min_j` to `max_j` inclusive.
pub fn pow2_range(min_j: usize, max_j: usize) -> Vec<usize> {
    let mut j = min_j.max(1).next_power_of_two();
    let mut out = Vec::new();
    while j <= max_j {
        out.push(j);
        j *= 2;
    }
    out
}

fn best_of<F: FnMut() -> Result<f64>>(reps: usize, mut f: F) -> Result<(u128, f64)> {
    let mut best = u128::MAX;
    let mut checksum = 0.0;
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        checksum = f()?;
        best = best.min(start.elapsed().as_nanos());
    }
    Ok((best, checksum))
}

/// Times the discretized selective scan (64-bit) over `J` tokens with
/// `channels` inner channels and state size `n`.
pub fn bench_scan(lengths: &[usize], channels: usize, n: usize, mode: ScanMode, reps: usize) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(lengths.len());
    for &j in lengths {
        let mut rng = ChaCha8Rng::seed_from_u64(j as u64);
        let a = Tensor::<f64>::uniform(&[channels, n], -1.0, -0.1, &mut rng);
        let b = Tensor::<f64>::randn(&[j, n], 1.0, &mut rng);
        let c = Tensor::<f64>::randn(&[j, n], 1.0, &mut rng);
        let delta = Tensor::<f64>::uniform(&[j, channels], 0.01, 0.1, &mut rng);
        let x = Tensor::<f64>::randn(&[j, channels], 1.0, &mut rng);
        let d = Tensor::<f64>::ones(&[channels]);
        let disc = discretize_zoh(&a, &b, &delta)?;
        let (nanos, checksum) = best_of(reps, || {
            let y = match mode {
                ScanMode::Sequential => scan_sequential(&disc, &c, &d, &x)?,
                ScanMode::Parallel => scan_parallel(&disc, &c, &d, &x)?,
            };
            Ok(y.data().iter().sum())
        })?;
        rows.push(BenchRow {
            j,
            channels,
            mode: mode.to_string(),
            nanos,
            checksum,
        });
    }
    Ok(rows)
}

/// Times single-head dense attention (32-bit, forward only) over `J` tokens of width `dim`.
pub fn bench_attention(lengths: &[usize], dim: usize, reps: usize) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(lengths.len());
    for &j in lengths {
        let mut rng = ChaCha8Rng::seed_from_u64(j as u64);
        let q = Tensor::<f32>::randn(&[1, j, dim], 1.0, &mut rng);
        let k = Tensor::<f32>::randn(&[1, j, dim], 1.0, &mut rng);
        let v = Tensor::<f32>::randn(&[1, j, dim], 1.0, &mut rng);
        let (nanos, checksum) = best_of(reps, || {
            let mut g = Graph::no_grad();
            let (q, k, v) = (g.constant(&q), g.constant(&k), g.constant(&v));
            let o = g.attention(q, k, v, 1)?;
            Ok(g.value(o).iter().map(|&x| f64::from(x)).sum())
        })?;
        rows.push(BenchRow {
            j,
            channels: dim,
            mode: "attention".into(),
            nanos,
            checksum,
        });
    }
    Ok(rows)
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{BENCH_HEADER}\n");
    for r in rows {
        s += &r.csv_row();
        s.push('\n');
    }
    s
}
