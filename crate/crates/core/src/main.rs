use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use matten::analysis::{model_cost, VideoShape};
use matten::blocks::ModelConfig;
use matten::harness::bench::{bench_scan, pow2_range, to_csv};
use matten::harness::gradcheck::{run_suite, Suite};
use matten::harness::train::checkpoint_precision;
use matten::harness::{init_threads, run_training, write_samples, Precision, TrainConfig, Trainer};
use matten::ssm::ScanMode;
use matten::tensor::Real;
use matten::{Error, Result};

#[derive(Parser)]
#[command(name = "matten", version, about = "Mamba-attention video diffusion at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on procedural sprite videos.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        steps: u64,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint directory instead of initializing.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample videos from a checkpoint's EMA weights.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-sublayer FLOPs and parameters.
    Flops {
        /// Model or training config (JSON). Ignored when --preset is given.
        #[arg(long, required_unless_present = "preset")]
        config: Option<PathBuf>,
        /// Named size S, B, L or XL.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, default_value_t = 3)]
        variant: u8,
        /// Video shape FxHxWxC in pixels.
        #[arg(long)]
        shape: VideoShape,
        /// Spatial downsampling of the latent encoder; 1 means the shape is already latent.
        #[arg(long, default_value_t = 8)]
        vae_factor: usize,
    },
    /// Time the selective scan over a range of sequence lengths (CSV on stdout).
    BenchScan {
        #[arg(long, default_value_t = 256)]
        min_j: usize,
        #[arg(long, default_value_t = 8192)]
        max_j: usize,
        #[arg(long, default_value = "par")]
        mode: ScanMode,
        #[arg(long, default_value_t = 32)]
        channels: usize,
        #[arg(long, default_value_t = 16)]
        state: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value = "small")]
        suite: Suite,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

fn train<T: Real>(config: TrainConfig, resume: Option<&Path>, steps: u64, out: &Path) -> Result<()> {
    let mut tr = match resume {
        Some(dir) => Trainer::<T>::load(dir)?,
        None => Trainer::<T>::new(config)?,
    };
    let log = run_training(&mut tr, steps, out)?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        println!("step {}: total {:.5}", first.step, first.total);
        println!("step {}: total {:.5}", last.step, last.total);
    }
    println!("checkpoint written to {}", out.join("checkpoint").display());
    Ok(())
}

fn sample<T: Real>(ckpt: &Path, count: usize, seed: u64, out: &Path) -> Result<()> {
    let tr = Trainer::<T>::load(ckpt)?;
    let s = tr.sample(count, seed, None)?;
    write_samples(&s, out)?;
    println!("{} samples written to {}", s.count(), out.display());
    Ok(())
}

fn load_model_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    match TrainConfig::from_json(&text) {
        Ok(c) => Ok(c.model),
        Err(_) => ModelConfig::from_json(&text),
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train {
            config,
            steps,
            out,
            resume,
        } => {
            let config = TrainConfig::load(&config)?;
            let precision = match &resume {
                Some(dir) => checkpoint_precision(dir)?,
                None => config.precision,
            };
            match precision {
                Precision::F32 => train::<f32>(config, resume.as_deref(), steps, &out)?,
                Precision::F64 => train::<f64>(config, resume.as_deref(), steps, &out)?,
            }
        }
        Command::Sample { ckpt, count, seed, out } => match checkpoint_precision(&ckpt)? {
            Precision::F32 => sample::<f32>(&ckpt, count, seed, &out)?,
            Precision::F64 => sample::<f64>(&ckpt, count, seed, &out)?,
        },
        Command::Flops {
            config,
            preset,
            variant,
            shape,
            vae_factor,
        } => {
            let model = match (preset, config) {
                (Some(p), _) => ModelConfig::preset(&p, variant)?,
                (None, Some(path)) => load_model_config(&path)?,
                (None, None) => return Err(Error::Config("--config or --preset is required".into())),
            };
            let latent = if vae_factor == 1 {
                shape
            } else {
                VideoShape::from_pixels(shape.frames, shape.height, shape.width, vae_factor, model.in_channels)?
            };
            let cost = model_cost(&model, latent)?;
            print!("{}", cost.to_csv());
            println!();
            print!("{}", cost.to_table());
            println!(
                "latent {latent}: {:.1} GFLOPs, {:.2}M parameters",
                cost.gflops(),
                cost.total_params() as f64 / 1e6
            );
        }
        Command::BenchScan {
            min_j,
            max_j,
            mode,
            channels,
            state,
            reps,
        } => {
            let rows = bench_scan(&pow2_range(min_j, max_j), channels, state, mode, reps)?;
            print!("{}", to_csv(&rows));
        }
        Command::Gradcheck { suite, tol } => {
            let cases = run_suite(suite)?;
            let mut failed = 0;
            for c in &cases {
                let ok = c.report.max_rel_err <= tol;
                failed += usize::from(!ok);
                println!(
                    "{:<20} rel {:.3e}  abs {:.3e}  {}",
                    c.name,
                    c.report.max_rel_err,
                    c.report.max_abs_err,
                    if ok { "ok" } else { "FAIL" }
                );
            }
            println!("{} of {} checks within {tol:e}", cases.len() - failed, cases.len());
            if failed > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    init_threads();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
