//! Denoiser error on frames, y-t slices and pixel-permuted frames.
//!
//! Each sample draws one plane from a video, noises it to the requested
//! signal level, predicts the noise and records the per-coordinate squared
//! error. Synthetic separable AR(1) videos stand in for real footage.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::attention::AttentionContext;
use crate::denoisers::{ar1_filter, null_prompt, Denoiser, NoiseLevel};
use crate::error::{config_err, shape_err, Error, Result};
use crate::math::sqrt;
use crate::par;
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::stvolume::{permute_pixels, slice, Axis, ImageBatch, Space, VideoVolume, VolumeDims};

/// What the denoiser sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InputKind {
    Frame,
    YtSlice,
    Permuted,
}

impl InputKind {
    pub const ALL: [InputKind; 3] = [InputKind::Frame, InputKind::YtSlice, InputKind::Permuted];

    pub fn name(self) -> &'static str {
        match self {
            InputKind::Frame => "frame",
            InputKind::YtSlice => "yt_slice",
            InputKind::Permuted => "permuted",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MseRow {
    pub alpha_bar: f64,
    pub kind: InputKind,
    pub mse: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MseReport {
    pub rows: Vec<MseRow>,
}

impl MseReport {
    pub fn get(&self, alpha_bar: f64, kind: InputKind) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.alpha_bar == alpha_bar && r.kind == kind)
            .map(|r| r.mse)
    }

    /// `alpha_bar,kind,mse,n` with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha_bar,kind,mse,n\n");
        for r in &self.rows {
            s += &format!("{},{},{},{}\n", r.alpha_bar, r.kind.name(), r.mse, r.n);
        }
        s
    }
}

/// `count` videos with unit-variance AR(1) correlation `rho_time` between
/// frames and `rho_space` between neighbouring rows and columns.
pub fn synthetic_videos(
    count: usize,
    dims: VolumeDims,
    rho_space: f64,
    rho_time: f64,
    seed: u64,
) -> Result<Vec<VideoVolume>> {
    for rho in [rho_space, rho_time] {
        if !(rho > -1.0 && rho < 1.0) {
            return Err(config_err!(
                "AR(1) coefficient must lie in (-1, 1), got {rho}"
            ));
        }
    }
    let (h, w, c) = (dims.height, dims.width, dims.channels);
    (0..count)
        .map(|i| {
            let mut r = rng::stream(seed, &[0x0076_6964_656f, i as u64]);
            let mut data: Vec<f64> = (0..dims.len()).map(|_| rng::normal_f64(&mut r)).collect();
            ar1_filter(&mut data, dims.n_frames, h * w * c, rho_time);
            for frame in data.chunks_mut(h * w * c) {
                ar1_filter(frame, h, w * c, rho_space);
                for row in frame.chunks_mut(w * c) {
                    ar1_filter(row, w, c, rho_space);
                }
            }
            VideoVolume::new(
                dims,
                Space::Latent,
                data.into_iter().map(|v| v as f32).collect(),
            )
        })
        .collect()
}

/// Signal levels at `count` evenly spaced steps of a schedule, noisiest last.
pub fn alpha_grid(schedule: &NoiseSchedule, count: usize) -> Vec<f64> {
    let t = schedule.steps();
    if count == 1 {
        return alloc::vec![schedule.alpha_bar(1)];
    }
    (0..count)
        .map(|i| {
            let step = 1 + (i * (t - 1) + (count - 1) / 2) / (count - 1);
            schedule.alpha_bar(step)
        })
        .collect()
}

const TAG_SAMPLE: u64 = 0x006d_7365;

fn one_sample(
    videos: &[VideoVolume],
    denoiser: &dyn Denoiser,
    alpha_bar: f64,
    kind: InputKind,
    seed: u64,
    tags: [u64; 3],
) -> Result<f64> {
    let mut r = rng::stream(seed, &[TAG_SAMPLE, tags[0], tags[1], tags[2]]);
    let video = &videos[r.random_range(0..videos.len())];
    let axis = if kind == InputKind::YtSlice {
        Axis::YT
    } else {
        Axis::XY
    };
    let index = r.random_range(0..axis.extent(video.dims()));
    let mut plane = slice(video, axis, index)?;
    if kind == InputKind::Permuted {
        plane = permute_pixels(&plane, r.random());
    }
    let eps = rng::normal_vec(&mut r, plane.data.len());
    let (a, b) = (sqrt(alpha_bar), sqrt(1.0 - alpha_bar));
    let noisy: Vec<f32> = plane
        .data
        .iter()
        .zip(&eps)
        .map(|(&x, &e)| (a * x as f64 + b * e as f64) as f32)
        .collect();
    let batch = ImageBatch::new(1, plane.rows, plane.cols, plane.channels, noisy)?;
    let level = NoiseLevel { step: 0, alpha_bar };
    let pred = denoiser.predict(
        &batch,
        level,
        &null_prompt(),
        &mut AttentionContext::per_image(),
    )?;
    if pred.data.len() != eps.len() {
        return Err(shape_err!(
            "denoiser returned {} values for {}",
            pred.data.len(),
            eps.len()
        ));
    }
    let se: f64 = pred
        .data
        .iter()
        .zip(&eps)
        .map(|(&p, &e)| {
            let d = p as f64 - e as f64;
            d * d
        })
        .sum();
    Ok(se / eps.len() as f64)
}

/// Mean per-coordinate squared noise-prediction error for every signal level
/// and input kind. Sample `s` of level `i` and kind `k` draws from its own
/// stream, so the report depends only on `seed`.
pub fn slice_mse_experiment(
    videos: &[VideoVolume],
    denoiser: &dyn Denoiser,
    alphas: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<MseReport> {
    if videos.is_empty() {
        return Err(Error::Input("no videos".into()));
    }
    if n_samples == 0 {
        return Err(config_err!("n_samples must be at least 1"));
    }
    if let Some(&a) = alphas.iter().find(|&&a| !(a > 0.0 && a < 1.0)) {
        return Err(config_err!("alpha_bar must lie in (0, 1), got {a}"));
    }
    if videos.iter().any(|v| v.dims() != videos[0].dims()) {
        return Err(shape_err!("videos differ in geometry"));
    }
    let mut rows = Vec::with_capacity(alphas.len() * 3);
    for (i, &alpha_bar) in alphas.iter().enumerate() {
        for kind in InputKind::ALL {
            let errs = par::map(n_samples, |s| {
                one_sample(
                    videos,
                    denoiser,
                    alpha_bar,
                    kind,
                    seed,
                    [i as u64, kind as u64, s as u64],
                )
            });
            let mut sum = 0.0;
            for e in errs {
                sum += e?;
            }
            rows.push(MseRow {
                alpha_bar,
                kind,
                mse: sum / n_samples as f64,
                n: n_samples,
            });
        }
    }
    Ok(MseReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoisers::{AnalyticDenoiser, GaussianPrior};

    fn setup(rho_s: f64, rho_t: f64) -> (Vec<VideoVolume>, AnalyticDenoiser) {
        let v = synthetic_videos(4, VolumeDims::new(12, 12, 12, 1), rho_s, rho_t, 1).unwrap();
        (
            v,
            AnalyticDenoiser::new(GaussianPrior::ar1(rho_s, rho_s).unwrap()),
        )
    }

    #[test]
    fn synthetic_video_statistics() {
        let v = synthetic_videos(20, VolumeDims::new(8, 8, 8, 1), 0.5, 0.9, 3).unwrap();
        let (mut var, mut cx, mut ct, mut n) = (0.0, 0.0, 0.0, 0.0);
        for video in &v {
            for t in 0..7 {
                for y in 0..8 {
                    for x in 0..7 {
                        let a = video.get(t, y, x, 0) as f64;
                        var += a * a;
                        cx += a * video.get(t, y, x + 1, 0) as f64;
                        ct += a * video.get(t + 1, y, x, 0) as f64;
                        n += 1.0;
                    }
                }
            }
        }
        assert!((var / n - 1.0).abs() < 0.08);
        assert!((cx / n - 0.5).abs() < 0.06);
        assert!((ct / n - 0.9).abs() < 0.06);
        assert!(synthetic_videos(1, VolumeDims::new(2, 2, 2, 1), 1.0, 0.5, 0).is_err());
    }

    #[test]
    fn report_is_seed_deterministic_and_well_formed() {
        let (v, d) = setup(0.5, 0.9);
        let a = slice_mse_experiment(&v, &d, &[0.9, 0.3], 40, 7).unwrap();
        assert_eq!(a, slice_mse_experiment(&v, &d, &[0.9, 0.3], 40, 7).unwrap());
        assert_ne!(a, slice_mse_experiment(&v, &d, &[0.9, 0.3], 40, 8).unwrap());
        assert_eq!(a.rows.len(), 6);
        assert!(a.rows.iter().all(|r| r.mse >= 0.0 && r.n == 40));
        let csv = a.to_csv();
        assert!(csv.starts_with("alpha_bar,kind,mse,n\n0.9,frame,"));
        assert_eq!(csv.lines().count(), 7);
        assert!(slice_mse_experiment(&v, &d, &[1.0], 4, 0).is_err());
        assert!(slice_mse_experiment(&v, &d, &[0.5], 0, 0).is_err());
    }

    #[test]
    fn frames_match_the_trace_formula() {
        let (v, d) = setup(0.6, 0.9);
        let r = slice_mse_experiment(&v, &d, &[0.5], 3000, 2).unwrap();
        let expect = d.prior.expected_mse(0.5, 12, 12, 1).unwrap();
        let got = r.get(0.5, InputKind::Frame).unwrap();
        assert!((got / expect - 1.0).abs() < 0.05, "{got} vs {expect}");
    }

    #[test]
    fn orderings() {
        let (v, d) = setup(0.5, 0.9);
        let r = slice_mse_experiment(&v, &d, &[0.9, 0.5, 0.1], 600, 4).unwrap();
        for a in [0.9, 0.5, 0.1] {
            let f = r.get(a, InputKind::Frame).unwrap();
            assert!(r.get(a, InputKind::Permuted).unwrap() > f);
            assert!(r.get(a, InputKind::YtSlice).unwrap() <= f);
        }
    }

    #[test]
    fn grid_spans_the_schedule() {
        let s = NoiseSchedule::strided(50, 1000, 0.00085, 0.012, 1.0).unwrap();
        let g = alpha_grid(&s, 10);
        assert_eq!(g.len(), 10);
        assert_eq!(g[0], s.alpha_bar(1));
        assert_eq!(g[9], s.alpha_bar(50));
        assert!(g.windows(2).all(|w| w[0] > w[1]));
    }
}
