use serde::Serialize;

use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

pub const PSNR_CAP: f64 = 99.0;
const HIST_BINS: usize = 64;

/// Sample-quality statistics against a reference set of videos.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToyReport {
    /// Per-frame MSE to the nearest reference video, averaged over samples.
    pub frame_mse: Vec<f64>,
    pub mse: f64,
    /// For data in `[-1, 1]` (peak-to-peak 2), capped at [`PSNR_CAP`].
    pub psnr: f64,
    /// Mean absolute difference between consecutive frames of the samples.
    pub inter_frame_diff: f64,
    pub reference_inter_frame_diff: f64,
    /// Total-variation distance between pixel histograms, in `[0, 1]`.
    pub histogram_distance: f64,
}

/// Mean `|x_{t+1} - x_t|` over all videos of `[N, F, ...]`.
pub fn inter_frame_difference<T: Real>(videos: &Tensor<T>) -> Result<f64> {
    let s = videos.shape();
    if s.len() < 3 {
        return Err(shape_err!("videos must be [N, F, ...], got {s:?}"));
    }
    let (n, f) = (s[0], s[1]);
    if f < 2 {
        return Ok(0.0);
    }
    let per: usize = s[2..].iter().product();
    let d = videos.data();
    let mut total = 0.0;
    for i in 0..n {
        for t in 1..f {
            let a = &d[(i * f + t - 1) * per..(i * f + t) * per];
            let b = &d[(i * f + t) * per..(i * f + t + 1) * per];
            total += a.iter().zip(b).map(|(x, y)| (y.f64() - x.f64()).abs()).sum::<f64>();
        }
    }
    Ok(total / (n * (f - 1) * per) as f64)
}

fn histogram(values: &[f64]) -> Vec<f64> {
    let mut h = vec![0.0; HIST_BINS];
    for &v in values {
        let b = (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * HIST_BINS as f64) as usize;
        h[b.min(HIST_BINS - 1)] += 1.0;
    }
    let n = values.len().max(1) as f64;
    h.iter_mut().for_each(|x| *x /= n);
    h
}

/// Total-variation distance between the pixel histograms of `a` and `b`.
pub fn histogram_distance<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let ha = histogram(&a.data().iter().map(|v| v.f64()).collect::<Vec<_>>());
    let hb = histogram(&b.data().iter().map(|v| v.f64()).collect::<Vec<_>>());
    0.5 * ha.iter().zip(&hb).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (4.0 / mse).log10()).min(PSNR_CAP)
}

/// Compares `samples` with `reference`, both `[N, F, H, W, C]` with equal
/// per-video shape (the counts may differ).
pub fn toy_metrics<T: Real>(samples: &Tensor<T>, reference: &Tensor<T>) -> Result<ToyReport> {
    let (ss, rs) = (samples.shape(), reference.shape());
    if ss.len() != 5 || rs.len() != 5 || ss[1..] != rs[1..] {
        return Err(shape_err!("toy_metrics: samples {ss:?} vs reference {rs:?}"));
    }
    let (f, per_video) = (ss[1], ss[1..].iter().product::<usize>());
    let per_frame = per_video / f;
    let (sd, rd) = (samples.data(), reference.data());
    let mut frame_mse = vec![0.0; f];
    for i in 0..ss[0] {
        let s = &sd[i * per_video..(i + 1) * per_video];
        let nearest = (0..rs[0])
            .map(|j| {
                let r = &rd[j * per_video..(j + 1) * per_video];
                let e: f64 = s.iter().zip(r).map(|(a, b)| (a.f64() - b.f64()).powi(2)).sum();
                (e, j)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, j)| j)
            .unwrap_or(0);
        let r = &rd[nearest * per_video..(nearest + 1) * per_video];
        for (t, m) in frame_mse.iter_mut().enumerate() {
            let lo = t * per_frame;
            let e: f64 = (lo..lo + per_frame).map(|k| (s[k].f64() - r[k].f64()).powi(2)).sum();
            *m += e / per_frame as f64;
        }
    }
    frame_mse.iter_mut().for_each(|m| *m /= ss[0] as f64);
    let mse = frame_mse.iter().sum::<f64>() / f as f64;
    Ok(ToyReport {
        psnr: psnr(mse),
        mse,
        frame_mse,
        inter_frame_diff: inter_frame_difference(samples)?,
        reference_inter_frame_diff: inter_frame_difference(reference)?,
        histogram_distance: histogram_distance(samples, reference),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::sprites::{gen_sprites, SpriteDatasetSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sprites(seed: u64, n: usize) -> Tensor<f64> {
        gen_sprites::<f64>(&SpriteDatasetSpec::new(8, 16, 16, n, seed)).unwrap().videos
    }

    #[test]
    fn identical_sets() {
        let r = sprites(1, 4);
        let rep = toy_metrics(&r, &r).unwrap();
        assert_eq!(rep.mse, 0.0);
        assert_eq!(rep.psnr, PSNR_CAP);
        assert_eq!(rep.histogram_distance, 0.0);
        assert_eq!(rep.inter_frame_diff, rep.reference_inter_frame_diff);
        assert!(rep.inter_frame_diff > 0.0);
    }

    #[test]
    fn static_videos_have_zero_motion() {
        let mut s = SpriteDatasetSpec::new(8, 16, 16, 3, 2);
        s.speed = (0.0, 0.0);
        let v = gen_sprites::<f64>(&s).unwrap().videos;
        assert_eq!(inter_frame_difference(&v).unwrap(), 0.0);
    }

    #[test]
    fn nearest_reference_is_used() {
        let r = sprites(1, 5);
        let one = Tensor::new(&[1, 8, 16, 16, 1], r.data()[3 * 2048..4 * 2048].to_vec()).unwrap();
        assert_eq!(toy_metrics(&one, &r).unwrap().mse, 0.0);
    }

    #[test]
    fn noise_is_far_from_sprites_in_histogram() {
        let train = sprites(1, 32);
        let held = sprites(99, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let noise = Tensor::<f64>::uniform(train.shape(), -1.0, 1.0, &mut rng);
        let d_held = histogram_distance(&held, &train);
        let d_noise = histogram_distance(&noise, &train);
        assert!(d_noise >= 5.0 * d_held, "{d_noise} vs {d_held}");
    }

    #[test]
    fn shape_mismatch() {
        let a = Tensor::<f64>::zeros(&[1, 2, 4, 4, 1]);
        let b = Tensor::<f64>::zeros(&[1, 3, 4, 4, 1]);
        assert!(toy_metrics(&a, &b).is_err());
        assert!((psnr(4.0) - 0.0).abs() < 1e-12);
    }
}
