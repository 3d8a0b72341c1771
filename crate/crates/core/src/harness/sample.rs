use std::fs;
use std::io::BufWriter;
use std::path::Path;

use super::train::Trainer;
use crate::blocks::Matten;
use crate::diffusion::{p_sample_loop, DiffusionSchedule, SampleOptions};
use crate::error::{Error, Result};
use crate::tensor::{Archive, Real, Tensor};

/// Sampled videos `[N, F, H, W, C]` (absent when `N = 0`) and their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples<T: Real> {
    pub videos: Option<Tensor<T>>,
    pub labels: Option<Vec<usize>>,
}

impl<T: Real> Samples<T> {
    pub fn count(&self) -> usize {
        self.videos.as_ref().map_or(0, |v| v.shape()[0])
    }

    /// Archive with `samples` and, when labelled, `labels`. Empty for no samples.
    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        if let Some(v) = &self.videos {
            a.push("samples", v);
            if let Some(l) = &self.labels {
                let vals: Vec<f64> = l.iter().map(|&c| c as f64).collect();
                a.push("labels", &Tensor::<f64>::from_f64(&[l.len()], &vals)?);
            }
        }
        Ok(a)
    }
}

/// Draws `count` videos of `frame_shape = [F, H, W, C]` by ancestral sampling
/// over `steps` strided steps of `schedule`.
pub fn sample_videos<T: Real>(
    model: &Matten<T>,
    schedule: &DiffusionSchedule,
    steps: usize,
    frame_shape: [usize; 4],
    count: usize,
    labels: Option<Vec<usize>>,
    seed: u64,
) -> Result<Samples<T>> {
    if count == 0 {
        return Ok(Samples { videos: None, labels });
    }
    if labels.as_ref().is_some_and(|l| l.len() != count) {
        return Err(Error::Config(format!("{count} samples need {count} labels")));
    }
    let s = schedule.strided(steps)?;
    let [f, h, w, c] = frame_shape;
    let videos = p_sample_loop(model, &s, &[count, f, h, w, c], labels.as_deref(), seed, &SampleOptions::default())?;
    Ok(Samples {
        videos: Some(videos),
        labels,
    })
}

impl<T: Real> Trainer<T> {
    /// Samples from the EMA weights. Class-conditional runs cycle through the
    /// data classes unless `labels` is given.
    pub fn sample(&self, count: usize, seed: u64, labels: Option<Vec<usize>>) -> Result<Samples<T>> {
        let labels = match (labels, self.config.class_conditional()) {
            (Some(l), true) => Some(l),
            (Some(_), false) => return Err(Error::Config("labels given to an unconditional run".into())),
            (None, true) => {
                let k = self.config.data.classes.unwrap_or(1);
                Some((0..count).map(|i| i % k).collect())
            }
            (None, false) => None,
        };
        sample_videos(
            &self.ema_model(),
            &self.schedule,
            self.config.sample_steps,
            self.config.data.video_shape(),
            count,
            labels,
            seed,
        )
    }
}

fn to_byte(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

/// Writes one PNG with a row per video and a column per frame, separated by
/// one-pixel gutters. One or two channels are drawn as gray (first channel),
/// three or more as RGB (first three).
pub fn write_png_grid<T: Real>(videos: &Tensor<T>, path: &Path) -> Result<()> {
    let &[n, f, h, w, c] = videos.shape() else {
        return Err(Error::Shape(format!("grid needs [N, F, H, W, C], got {:?}", videos.shape())));
    };
    let rgb = c >= 3;
    let px = if rgb { 3 } else { 1 };
    let (gw, gh) = (f * (w + 1) - 1, n * (h + 1) - 1);
    let mut buf = vec![255u8; gw * gh * px];
    let d = videos.data();
    for i in 0..n {
        for t in 0..f {
            for y in 0..h {
                for x in 0..w {
                    let src = (((i * f + t) * h + y) * w + x) * c;
                    let dst = ((i * (h + 1) + y) * gw + t * (w + 1) + x) * px;
                    for k in 0..px {
                        buf[dst + k] = to_byte(d[src + k].f64());
                    }
                }
            }
        }
    }
    let file = fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), gw as u32, gh as u32);
    enc.set_color(if rgb { png::ColorType::Rgb } else { png::ColorType::Grayscale });
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Format(format!("png: {e}"));
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&buf).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(())
}

/// Writes `samples.mttn` and, when nonempty, `grid.png` into `dir`.
pub fn write_samples<T: Real>(samples: &Samples<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    samples.to_archive()?.save(dir.join("samples.mttn"))?;
    if let Some(v) = &samples.videos {
        write_png_grid(v, &dir.join("grid.png"))?;
    }
    Ok(())
}
