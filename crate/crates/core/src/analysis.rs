//! Analytic cost model: per-operation FLOP formulas, the attention/scan
//! crossover, whole-model FLOPs and exact parameter counts.
//!
//! One multiply-accumulate counts as two FLOPs everywhere. The matmul,
//! attention-matrix and scan categories use the same convention as the
//! runtime [`FlopCounters`](crate::tensor::FlopCounters), so a forward pass
//! on a small model reproduces them exactly. Elementwise work (norms,
//! activations, softmax, residual adds) is not counted.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::blocks::{Conditioning, ModelConfig, SublayerKind};
use crate::error::{Error, Result};

/// Attention-matrix term `2·J²·D` for one sequence.
pub fn flops_sa(j: u64, d: u64) -> u64 {
    2 * j * j * d
}

/// Feed-forward term `4·J·D²`.
pub fn flops_ffn(j: u64, d: u64) -> u64 {
    4 * j * d * d
}

/// Selective-scan term `3·J·(2D)·N + J·(2D)·N²` (expansion 2).
pub fn flops_ssm(j: u64, d: u64, n: u64) -> u64 {
    3 * j * (2 * d) * n + j * (2 * d) * n * n
}

/// Sequence length where `flops_sa(J, D) = flops_ssm(J, D, N)`: `N² + 3N`,
/// independent of `D`. The scan is cheaper above it.
pub fn crossover_length(n: u64) -> u64 {
    n * n + 3 * n
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Latent video extents seen by the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct VideoShape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl VideoShape {
    /// Latent shape for a pixel-space video encoded with spatial
    /// downsampling `factor` into `latent_channels` channels.
    pub fn from_pixels(frames: usize, height: usize, width: usize, factor: usize, latent_channels: usize) -> Result<Self> {
        if factor == 0 || height % factor != 0 || width % factor != 0 {
            return Err(Error::Config(format!("{height}x{width} is not divisible by factor {factor}")));
        }
        Ok(Self {
            frames,
            height: height / factor,
            width: width / factor,
            channels: latent_channels,
        })
    }
}

impl FromStr for VideoShape {
    type Err = Error;

    /// Parses `FxHxWxC`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(['x', 'X', '×'])
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("bad shape {s:?}: {e}")))?;
        match parts[..] {
            [frames, height, width, channels] if parts.iter().all(|&v| v > 0) => Ok(Self {
                frames,
                height,
                width,
                channels,
            }),
            _ => Err(Error::Config(format!("shape must be FxHxWxC with positive extents, got {s:?}"))),
        }
    }
}

impl fmt::Display for VideoShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.frames, self.height, self.width, self.channels)
    }
}

/// Cost of one named part of the network for a single video.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CostEntry {
    pub name: String,
    pub params: u64,
    pub matmul: u64,
    pub attention: u64,
    pub scan: u64,
    /// Depthwise causal convolution inside Mamba blocks.
    pub conv: u64,
}

impl CostEntry {
    fn named(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ..Self::default()
        }
    }

    pub fn flops(&self) -> u64 {
        self.matmul + self.attention + self.scan + self.conv
    }

    fn linear(&mut self, tokens: u64, din: u64, dout: u64, bias: bool) {
        self.matmul += 2 * tokens * din * dout;
        self.params += din * dout + if bias { dout } else { 0 };
    }

    fn add(&mut self, o: &CostEntry) {
        self.params += o.params;
        self.matmul += o.matmul;
        self.attention += o.attention;
        self.scan += o.scan;
        self.conv += o.conv;
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostBreakdown {
    pub shape: VideoShape,
    pub entries: Vec<CostEntry>,
    /// Field-wise sum of `entries`.
    pub total: CostEntry,
}

impl CostBreakdown {
    fn new(shape: VideoShape, entries: Vec<CostEntry>) -> Self {
        let mut total = CostEntry::named("total");
        entries.iter().for_each(|e| total.add(e));
        Self { shape, entries, total }
    }

    pub fn total_flops(&self) -> u64 {
        self.total.flops()
    }

    pub fn total_params(&self) -> u64 {
        self.total.params
    }

    pub fn gflops(&self) -> f64 {
        self.total_flops() as f64 / 1e9
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,params,matmul,attention,scan,conv,flops\n");
        for e in self.entries.iter().chain([&self.total]) {
            s += &format!(
                "{},{},{},{},{},{},{}\n",
                e.name,
                e.params,
                e.matmul,
                e.attention,
                e.scan,
                e.conv,
                e.flops()
            );
        }
        s
    }

    pub fn to_table(&self) -> String {
        let w = self.entries.iter().map(|e| e.name.len()).max().unwrap_or(5).max(5);
        let mut s = format!("{:<w$} {:>14} {:>12}\n", "name", "params", "GFLOPs");
        for e in self.entries.iter().chain([&self.total]) {
            s += &format!("{:<w$} {:>14} {:>12.3}\n", e.name, e.params, e.flops() as f64 / 1e9);
        }
        s
    }
}

fn mamba_cost(c: &ModelConfig, tokens: u64) -> CostEntry {
    let (d, di, n, r, k) = (
        c.hidden as u64,
        c.d_inner() as u64,
        c.d_state as u64,
        c.dt_rank() as u64,
        c.conv_kernel as u64,
    );
    let mut e = CostEntry::named("mamba");
    e.linear(tokens, d, 2 * di, false);
    e.conv += 2 * tokens * di * k;
    e.params += di * k + di;
    for _ in 0..2 {
        e.linear(tokens, di, r + 2 * n, false);
        e.linear(tokens, r, di, true);
        e.scan += tokens * di * (3 * n + n * n);
        e.params += di * n + di;
    }
    e.linear(tokens, di, d, false);
    e
}

/// FLOPs and parameters of `config` applied to one video of latent `shape`.
pub fn model_cost(config: &ModelConfig, shape: VideoShape) -> Result<CostBreakdown> {
    let plan = config.plan()?;
    let p = config.patch;
    if shape.height % p != 0 || shape.width % p != 0 {
        return Err(Error::Config(format!("latent {shape} not divisible by patch {p}")));
    }
    if shape.channels != config.in_channels {
        return Err(Error::Config(format!(
            "latent has {} channels, model expects {}",
            shape.channels, config.in_channels
        )));
    }
    let d = config.hidden as u64;
    let (n_f, s) = (shape.frames as u64, ((shape.height / p) * (shape.width / p)) as u64);
    let tokens = n_f * s;
    let p2c = (p * p * config.in_channels) as u64;
    let modulated = config.conditioning == Conditioning::MAdan;
    let mut entries = Vec::new();

    let mut pe = CostEntry::named("patch_embed");
    pe.linear(tokens, p2c, d, true);
    entries.push(pe);
    let mut te = CostEntry::named("t_embed");
    te.linear(1, config.freq_dim as u64, d, true);
    te.linear(1, d, d, true);
    entries.push(te);
    if let Some(nc) = config.num_classes {
        let mut ce = CostEntry::named("class_embed");
        ce.params = nc as u64 * d;
        entries.push(ce);
    }
    let mut cond = CostEntry::named(if modulated { "cond.trunk" } else { "cond.proj" });
    cond.linear(1, d, d, true);
    entries.push(cond);

    for (i, &kind) in plan.iter().enumerate() {
        let mut e = CostEntry::named(format!("blocks.{i}.{}", kind.short()));
        if modulated {
            e.linear(1, d, 3 * d, true);
        } else {
            e.params += 2 * d;
        }
        // (rows, tokens per row) seen by the sublayer body
        let (rows, len) = match kind {
            SublayerKind::SpatialAttention | SublayerKind::SpatialMamba => (n_f, s),
            SublayerKind::TemporalAttention | SublayerKind::TemporalMamba => (s, n_f),
            SublayerKind::GlobalMamba | SublayerKind::Mlp => (1, tokens),
        };
        let len = if modulated { len } else { len + 1 };
        let body_tokens = rows * len;
        match kind {
            SublayerKind::SpatialAttention | SublayerKind::TemporalAttention => {
                for _ in 0..4 {
                    e.linear(body_tokens, d, d, false);
                }
                e.attention += rows * flops_sa(len, d);
            }
            SublayerKind::Mlp => {
                e.linear(body_tokens, d, 4 * d, true);
                e.linear(body_tokens, 4 * d, d, true);
            }
            _ => e.add(&mamba_cost(config, body_tokens)),
        }
        entries.push(e);
    }

    let mut fin = CostEntry::named("final");
    if modulated {
        fin.linear(1, d, 2 * d, true);
    } else {
        fin.params += 2 * d;
    }
    fin.linear(tokens, d, (p * p * config.out_channels()) as u64, true);
    entries.push(fin);
    Ok(CostBreakdown::new(shape, entries))
}

/// Exact parameter total of the model built from `config`, by closed form.
pub fn param_count(config: &ModelConfig) -> Result<u64> {
    let plan = config.plan()?;
    let d = config.hidden as u64;
    let di = config.d_inner() as u64;
    let (n, r, k) = (config.d_state as u64, config.dt_rank() as u64, config.conv_kernel as u64);
    let p2 = (config.patch * config.patch) as u64;
    let c = config.in_channels as u64;
    let modulated = config.conditioning == Conditioning::MAdan;

    let norm = |width: u64| if modulated { d * width * d + width * d } else { 2 * d };
    let ssm = di * (r + 2 * n) + r * di + di + di * n + di;
    let mamba = d * 2 * di + di * k + di + 2 * ssm + di * d;
    let attention = 4 * d * d;
    let mlp = d * 4 * d + 4 * d + 4 * d * d + d;

    let mut total = p2 * c * d + d;
    total += config.freq_dim as u64 * d + d + d * d + d;
    total += config.num_classes.unwrap_or(0) as u64 * d;
    total += d * d + d;
    for kind in plan {
        total += norm(3)
            + match kind {
                SublayerKind::SpatialAttention | SublayerKind::TemporalAttention => attention,
                SublayerKind::Mlp => mlp,
                _ => mamba,
            };
    }
    total += norm(2) + d * p2 * 2 * c + p2 * 2 * c;
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::Matten;
    use crate::tensor::{Graph, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn formula_examples() {
        assert_eq!(flops_sa(1, 1), 2);
        assert_eq!(flops_sa(4096, 1152), 38_654_705_664);
        assert_eq!(flops_sa(200, 7), 4 * flops_sa(100, 7));
        assert_eq!(flops_ffn(1, 1), 4);
        assert_eq!(flops_ffn(256, 384), 150_994_944);
        assert_eq!(flops_ffn(512, 384), 2 * flops_ffn(256, 384));
        assert_eq!(flops_ssm(1, 1, 1), 8);
        assert_eq!(flops_ssm(4096, 1152, 16), 2_868_903_936);
        let ratio = flops_sa(4096, 1152) as f64 / flops_ssm(4096, 1152, 16) as f64;
        assert!((ratio - 13.47).abs() < 0.01, "{ratio}");
    }

    #[test]
    fn crossover() {
        assert_eq!(crossover_length(16), 304);
        assert_eq!(crossover_length(1), 4);
        for d in [64, 1024] {
            let j = crossover_length(16);
            assert_eq!(flops_sa(j, d), flops_ssm(j, d, 16));
            assert!(flops_sa(j + 1, d) > flops_ssm(j + 1, d, 16));
            assert!(flops_sa(j - 1, d) < flops_ssm(j - 1, d, 16));
        }
    }

    #[test]
    fn slope_of_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.7)).collect();
        assert!((loglog_slope(&xs, &ys) - 1.7).abs() < 1e-12);
    }

    #[test]
    fn shape_parsing() {
        let s: VideoShape = "16x32x32x4".parse().unwrap();
        assert_eq!(s, VideoShape::from_pixels(16, 256, 256, 8, 4).unwrap());
        assert_eq!(s.to_string(), "16x32x32x4");
        assert!("16x32x32".parse::<VideoShape>().is_err());
        assert!("0x1x1x1".parse::<VideoShape>().is_err());
    }

    #[test]
    fn degenerate_config_by_hand() {
        let mut c = ModelConfig::new(1, 1, 4);
        c.d_state = 2;
        c.patch = 1;
        c.in_channels = 1;
        c.freq_dim = 4;
        // dt_rank 1, d_inner 8, kernel 4
        let patch = 1 * 4 + 4;
        let temb = 4 * 4 + 4 + 4 * 4 + 4;
        let trunk = 4 * 4 + 4;
        let adan = 4 * 12 + 12;
        let in_proj = 4 * 16;
        let conv = 8 * 4 + 8;
        let ssm_dir = 8 * (1 + 4) + 1 * 8 + 8 + 8 * 2 + 8;
        let out_proj = 8 * 4;
        let final_adan = 4 * 8 + 8;
        let final_proj = 4 * 2 + 2;
        let want = patch + temb + trunk + adan + in_proj + conv + 2 * ssm_dir + out_proj + final_adan + final_proj;
        assert_eq!(param_count(&c).unwrap(), want);
        let m = Matten::<f64>::new(c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(m.num_params() as u64, want);
    }

    fn small(variant: u8, conditioning: Conditioning, attn_ffn: bool) -> ModelConfig {
        let mut c = ModelConfig::new(variant, 2, 8);
        c.d_state = 4;
        c.in_channels = 2;
        c.freq_dim = 8;
        c.conditioning = conditioning;
        c.attn_ffn = attn_ffn;
        c.num_classes = Some(3);
        c
    }

    #[test]
    fn closed_form_params_match_enumeration() {
        for v in 1..=4 {
            for cond in [Conditioning::MAdan, Conditioning::ConditionalTokens] {
                for ffn in [false, true] {
                    let c = small(v, cond, ffn);
                    let m = Matten::<f64>::new(c.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
                    let n = m.num_params() as u64;
                    assert_eq!(param_count(&c).unwrap(), n);
                    let shape = VideoShape {
                        frames: 2,
                        height: 4,
                        width: 4,
                        channels: 2,
                    };
                    assert_eq!(model_cost(&c, shape).unwrap().total_params(), n);
                }
            }
        }
    }

    #[test]
    fn analytic_flops_match_runtime_counters() {
        for v in 1..=4 {
            for cond in [Conditioning::MAdan, Conditioning::ConditionalTokens] {
                let c = small(v, cond, v >= 3);
                let m = Matten::<f64>::new(c.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
                let mut g = Graph::no_grad();
                let p = m.params.bind(&mut g);
                let x = g.constant(&Tensor::zeros(&[1, 3, 4, 6, 2]));
                m.forward(&mut g, &p, x, &[4], Some(&[1])).unwrap();
                let cost = model_cost(
                    &c,
                    VideoShape {
                        frames: 3,
                        height: 4,
                        width: 6,
                        channels: 2,
                    },
                )
                .unwrap();
                assert_eq!(cost.total.matmul, g.counters.matmul, "variant {v} {cond:?}");
                assert_eq!(cost.total.attention, g.counters.attention_matrix, "variant {v} {cond:?}");
                assert_eq!(cost.total.scan, g.counters.scan, "variant {v} {cond:?}");
            }
        }
    }

    #[test]
    fn totals_are_entry_sums() {
        let c = ModelConfig::preset("S", 3).unwrap();
        let cost = model_cost(&c, "16x32x32x4".parse().unwrap()).unwrap();
        let f: u64 = cost.entries.iter().map(|e| e.flops()).sum();
        let p: u64 = cost.entries.iter().map(|e| e.params).sum();
        assert_eq!((f, p), (cost.total_flops(), cost.total_params()));
        assert!(cost.to_csv().lines().count() == cost.entries.len() + 2);
        assert!(cost.to_table().contains("total"));
    }

    #[test]
    fn scan_term_is_bidirectional_ssm_formula() {
        let c = ModelConfig::preset("XL", 1).unwrap();
        let cost = model_cost(&c, "16x32x32x4".parse().unwrap()).unwrap();
        let per_layer = 2 * flops_ssm(4096, 1152, 16);
        assert_eq!(cost.total.scan, 28 * per_layer);
    }

    #[test]
    fn invalid_variant_is_config_error() {
        let c = ModelConfig::new(5, 2, 8);
        assert!(matches!(model_cost(&c, "1x2x2x4".parse().unwrap()), Err(Error::Config(_))));
    }
}
