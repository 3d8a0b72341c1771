use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Precision, TrainConfig};
use super::sprites::{flip_horizontal, gen_sprites, Dataset};
use crate::blocks::{Matten, ModelConfig};
use crate::diffusion::{ema_update, make_schedule, training_losses, DiffusionSchedule, ScheduleSpec};
use crate::error::{Error, Result};
use crate::nn::{AdamW, ParamSet};
use crate::tensor::{Archive, Graph, Real, Tensor};

pub const MODEL_FILE: &str = "model.json";
pub const STATE_FILE: &str = "train.json";
pub const TENSOR_FILE: &str = "tensors.mttn";

/// Losses of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub step: u64,
    pub simple: f64,
    pub vlb: f64,
    pub total: f64,
}

impl StepLosses {
    pub fn is_finite(&self) -> bool {
        self.simple.is_finite() && self.vlb.is_finite() && self.total.is_finite()
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.step, self.simple, self.vlb, self.total)
    }
}

pub const LOSS_HEADER: &str = "step,loss_simple,loss_vlb,total";

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal string: the position is a 128-bit counter.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self.word_pos.parse().map_err(|e| Error::Load {
            path: format!("{STATE_FILE}: rng.word_pos"),
            msg: format!("{e}"),
        })?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Everything in a checkpoint besides the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    pub step: u64,
    pub adam_step: u64,
    pub schedule: ScheduleSpec,
    pub rng: RngState,
}

/// Model, EMA copy, optimizer and data stream of one training run.
pub struct Trainer<T: Real> {
    pub config: TrainConfig,
    pub model: Matten<T>,
    pub ema: ParamSet<T>,
    pub opt: AdamW<T>,
    pub schedule: DiffusionSchedule,
    pub data: Dataset<T>,
    pub step: u64,
    rng: ChaCha8Rng,
}

impl<T: Real> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Matten::new(config.model.clone(), &mut ChaCha8Rng::seed_from_u64(config.seed))?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            ema: model.params.clone(),
            opt: AdamW::new(&model.params, config.lr, config.weight_decay),
            schedule: make_schedule(config.diffusion_steps)?,
            data: gen_sprites(&config.data)?,
            model,
            config,
            step: 0,
            rng,
        })
    }

    /// A copy of the model carrying the EMA weights.
    pub fn ema_model(&self) -> Matten<T> {
        let mut m = self.model.clone();
        m.params = self.ema.clone();
        m
    }

    /// Draws a batch: clean videos, labels, timesteps and noise.
    fn draw_batch(&mut self) -> Result<(Tensor<T>, Vec<usize>, Vec<usize>, Tensor<T>)> {
        let shape4 = self.config.data.video_shape();
        let per: usize = shape4.iter().product();
        let b = self.config.batch_size;
        let mut x0 = Vec::with_capacity(b * per);
        let mut labels = Vec::with_capacity(b);
        for _ in 0..b {
            let i = self.rng.random_range(0..self.data.len());
            let mut v = self.data.video(i).to_vec();
            if self.config.flip && self.rng.random_bool(0.5) {
                flip_horizontal(&mut v, shape4);
            }
            x0.extend(v);
            if let Some(l) = &self.data.labels {
                labels.push(l[i]);
            }
        }
        let t: Vec<usize> = (0..b).map(|_| self.rng.random_range(0..self.schedule.len())).collect();
        let shape = [b, shape4[0], shape4[1], shape4[2], shape4[3]];
        let eps = Tensor::randn(&shape, 1.0, &mut self.rng);
        Ok((Tensor::new(&shape, x0)?, labels, t, eps))
    }

    fn dump_batch(&self, dir: &Path, x0: &Tensor<T>, t: &[usize], eps: &Tensor<T>) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(format!("divergence_step{}.mttn", self.step + 1));
        let mut a = Archive::new();
        a.push("x0", x0);
        a.push("eps", eps);
        let tt: Vec<f64> = t.iter().map(|&v| v as f64).collect();
        a.push("t", &Tensor::<f64>::from_f64(&[t.len()], &tt)?);
        a.save(&path)?;
        Ok(path)
    }

    /// One AdamW step on the hybrid loss, then the EMA update. A non-finite
    /// loss aborts with the batch written to `dump_dir` (default: the
    /// current directory).
    pub fn train_step(&mut self, dump_dir: Option<&Path>) -> Result<StepLosses> {
        let (x0, labels, t, eps) = self.draw_batch()?;
        let class = self.config.class_conditional().then_some(labels.as_slice());
        let mut g = Graph::new();
        let p = self.model.params.bind(&mut g);
        let diverged = |tr: &Self| -> Result<StepLosses> {
            let dump = tr.dump_batch(dump_dir.unwrap_or(Path::new(".")), &x0, &t, &eps)?;
            Err(Error::Divergence {
                step: tr.step + 1,
                dump,
            })
        };
        let terms = match training_losses(&mut g, &self.model, &p, &self.schedule, &x0, &t, &eps, class) {
            Ok(terms) => terms,
            Err(Error::Numeric { .. }) => return diverged(self),
            Err(e) => return Err(e),
        };
        let losses = StepLosses {
            step: self.step + 1,
            simple: g.scalar(terms.simple).f64(),
            vlb: g.scalar(terms.vlb).f64(),
            total: g.scalar(terms.total).f64(),
        };
        if !losses.is_finite() {
            return diverged(self);
        }
        let grads = g.backward(terms.total)?;
        self.model.params.store_grads(&p, &grads);
        self.opt.step(&mut self.model.params)?;
        self.model.params.zero_grads();
        ema_update(&mut self.ema, &self.model.params, self.config.ema_decay)?;
        self.step += 1;
        Ok(losses)
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            config: self.config.clone(),
            step: self.step,
            adam_step: self.opt.step,
            schedule: ScheduleSpec {
                steps: self.schedule.len(),
            },
            rng: RngState::capture(&self.rng),
        }
    }

    /// Writes `model.json`, `train.json` and `tensors.mttn` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join(MODEL_FILE), self.model.config.to_json())?;
        fs::write(dir.join(STATE_FILE), serde_json::to_string_pretty(&self.state())?)?;
        let mut a = Archive::new();
        self.model.params.write_archive("param.", &mut a);
        self.ema.write_archive("ema.", &mut a);
        self.opt.write_archive(&mut a, &self.model.params);
        a.save(dir.join(TENSOR_FILE))
    }

    /// Restores a run saved by [`Trainer::save`].
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let (model_cfg, state) = read_checkpoint_meta(dir)?;
        if state.config.model != model_cfg {
            return Err(Error::Load {
                path: MODEL_FILE.into(),
                msg: "model config disagrees with the training state".into(),
            });
        }
        if state.schedule.steps != state.config.diffusion_steps {
            return Err(Error::Load {
                path: format!("{STATE_FILE}: schedule.steps"),
                msg: format!("{} vs diffusion_steps {}", state.schedule.steps, state.config.diffusion_steps),
            });
        }
        let mut tr = Self::new(state.config.clone())?;
        let tensor_path = dir.join(TENSOR_FILE);
        let a = Archive::load(&tensor_path).map_err(|e| Error::Load {
            path: tensor_path.display().to_string(),
            msg: e.to_string(),
        })?;
        tr.model.params.read_archive("param.", &a)?;
        tr.ema.read_archive("ema.", &a)?;
        tr.opt.read_archive(&a, &tr.model.params)?;
        tr.opt.step = state.adam_step;
        tr.step = state.step;
        tr.rng = state.rng.restore()?;
        Ok(tr)
    }
}

fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::Load {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Load {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

/// Model config and training state of the checkpoint in `dir`.
pub fn read_checkpoint_meta(dir: &Path) -> Result<(ModelConfig, TrainState)> {
    Ok((read_json(&dir.join(MODEL_FILE))?, read_json(&dir.join(STATE_FILE))?))
}

/// Precision recorded in a checkpoint.
pub fn checkpoint_precision(dir: &Path) -> Result<Precision> {
    Ok(read_checkpoint_meta(dir)?.1.config.precision)
}

/// Runs `steps` optimizer steps, appending to `out/losses.csv` and writing
/// `out/checkpoint` every `checkpoint_every` steps and at the end.
pub fn run_training<T: Real>(trainer: &mut Trainer<T>, steps: u64, out: &Path) -> Result<Vec<StepLosses>> {
    fs::create_dir_all(out)?;
    let csv_path = out.join("losses.csv");
    let fresh = !csv_path.exists();
    let mut csv = fs::OpenOptions::new().create(true).append(true).open(&csv_path)?;
    if fresh {
        writeln!(csv, "{LOSS_HEADER}")?;
    }
    let ckpt = out.join("checkpoint");
    let every = trainer.config.checkpoint_every;
    let mut log = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let l = trainer.train_step(Some(out))?;
        writeln!(csv, "{}", l.csv_row())?;
        log.push(l);
        if every > 0 && trainer.step % every == 0 {
            trainer.save(&ckpt)?;
        }
    }
    csv.flush()?;
    trainer.save(&ckpt)?;
    Ok(log)
}
