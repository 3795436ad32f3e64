//! The inflated video denoiser.
//!
//! A video's noise is predicted by two branches that share one image
//! denoiser:
//!
//! - the frame branch denoises every frame with its self-attention widened
//!   to a set of key-frames, under classifier-free guidance;
//! - the slice branch denoises every y-t slice (optionally also every x-t
//!   slice) with the null prompt and plain attention.
//!
//! The two are mixed as `sqrt(g) frame + sqrt(1 - g) slice`, which keeps unit
//! variance when the branches are independent unit-variance fields.
//! Videos longer than the slice length run the slice branch on overlapping
//! segments and blend the results.

use alloc::vec::Vec;

use crate::attention::{keyframe_sets, AttentionContext, CacheAccess, LayerSelection};
use crate::denoisers::{cfg, null_prompt, Denoiser, NoiseLevel, PromptEmbedding};
use crate::error::{config_err, shape_err, Result};
use crate::math::sqrt;
use crate::stvolume::{blend_segments, segment_plan, Axis, BlendMode, VideoVolume};

#[derive(Debug, Clone, PartialEq)]
pub struct InflationConfig {
    /// Weight of the frame branch, in `[0, 1]`.
    pub gamma: f64,
    /// Guidance strength of the frame branch.
    pub cfg_strength_ea: f64,
    /// Guidance strength of the slice branch. The slice branch is conditioned
    /// on the null prompt, so both guidance terms coincide and any strength
    /// yields the same prediction.
    pub cfg_strength_s: f64,
    /// Also denoise x-t slices and average them with the y-t prediction.
    pub use_xt_slices: bool,
    /// Frames per slice-branch segment.
    pub seg_len: usize,
    pub blend_mode: BlendMode,
    /// Attention layers that take part in capture / injection.
    pub layers: LayerSelection,
}

impl Default for InflationConfig {
    fn default() -> Self {
        Self {
            gamma: 0.8,
            cfg_strength_ea: 10.0,
            cfg_strength_s: 1.0,
            use_xt_slices: false,
            seg_len: 64,
            blend_mode: BlendMode::Mean,
            layers: LayerSelection::UpPath,
        }
    }
}

impl InflationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(config_err!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(self.cfg_strength_ea >= 0.0 && self.cfg_strength_s >= 0.0) {
            return Err(config_err!("guidance strengths must be non-negative"));
        }
        if self.seg_len == 0 {
            return Err(config_err!("seg_len must be positive"));
        }
        Ok(())
    }
}

/// `sqrt(gamma) a + sqrt(1 - gamma) b`, elementwise in f64.
pub fn combine(a: &[f32], b: &[f32], gamma: f64) -> Result<Vec<f32>> {
    if a.len() != b.len() {
        return Err(shape_err!(
            "branches differ in size: {} vs {}",
            a.len(),
            b.len()
        ));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(config_err!("gamma must lie in [0, 1], got {gamma}"));
    }
    let (wa, wb) = (sqrt(gamma), sqrt(1.0 - gamma));
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| (wa * x as f64 + wb * y as f64) as f32)
        .collect())
}

/// An image denoiser lifted to videos.
pub struct InflatedDenoiser<'d> {
    pub denoiser: &'d dyn Denoiser,
    pub config: InflationConfig,
}

impl<'d> InflatedDenoiser<'d> {
    pub fn new(denoiser: &'d dyn Denoiser, config: InflationConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { denoiser, config })
    }

    /// Frame branch: extended attention over each frame's key-frames and
    /// guidance against the null prompt. `cache` applies to the conditional
    /// pass only, at diffusion step `level.step`.
    pub fn frame_branch(
        &self,
        video: &VideoVolume,
        level: NoiseLevel,
        prompt: &PromptEmbedding,
        cache: CacheAccess<'_>,
    ) -> Result<VideoVolume> {
        let frames = video.to_frames();
        let sets = keyframe_sets(video.n_frames());
        let mut ctx = AttentionContext::extended(&sets).with_cache(
            level.step,
            cache,
            self.config.layers.clone(),
        );
        let cond = self.denoiser.predict(&frames, level, prompt, &mut ctx)?;
        let s = self.config.cfg_strength_ea;
        let eps = if s == 1.0 {
            cond.data
        } else {
            let uncond = self.denoiser.predict(
                &frames,
                level,
                &null_prompt(),
                &mut AttentionContext::extended(&sets),
            )?;
            cfg(&cond.data, &uncond.data, s)?
        };
        video.with_data(eps)
    }

    /// Slice branch over the whole video, segmenting when it is longer than
    /// `seg_len`. Fewer frames than `seg_len` is a geometry error.
    pub fn slice_branch(&self, video: &VideoVolume, level: NoiseLevel) -> Result<VideoVolume> {
        let n = video.n_frames();
        let len = self.config.seg_len;
        if n < len {
            return Err(shape_err!(
                "slice branch needs at least {len} frames, got {n}"
            ));
        }
        if n == len {
            return self.slice_segment(video, level);
        }
        let plan = segment_plan(n, len, self.config.blend_mode)?;
        let preds = plan
            .segments
            .iter()
            .map(|s| self.slice_segment(&video.select_frames(s.start, s.len)?, level))
            .collect::<Result<Vec<_>>>()?;
        blend_segments(&preds, &plan)
    }

    fn slice_segment(&self, video: &VideoVolume, level: NoiseLevel) -> Result<VideoVolume> {
        let yt = self.along(video, Axis::YT, level)?;
        if !self.config.use_xt_slices {
            return Ok(yt);
        }
        let xt = self.along(video, Axis::XT, level)?;
        video.with_data(combine(yt.data(), xt.data(), 0.5)?)
    }

    fn along(&self, video: &VideoVolume, axis: Axis, level: NoiseLevel) -> Result<VideoVolume> {
        let batch = video.slice_batch(axis);
        let pred = self.denoiser.predict(
            &batch,
            level,
            &null_prompt(),
            &mut AttentionContext::per_image(),
        )?;
        VideoVolume::from_slice_batch(&pred, axis, video.dims(), video.space())
    }

    /// The combined prediction. A branch with zero weight is not evaluated.
    pub fn predict(
        &self,
        video: &VideoVolume,
        level: NoiseLevel,
        prompt: &PromptEmbedding,
        cache: CacheAccess<'_>,
    ) -> Result<VideoVolume> {
        let g = self.config.gamma;
        if g == 0.0 {
            return self.slice_branch(video, level);
        }
        let frames = self.frame_branch(video, level, prompt, cache)?;
        if g == 1.0 {
            return Ok(frames);
        }
        let slices = self.slice_branch(video, level)?;
        video.with_data(combine(frames.data(), slices.data(), g)?)
    }
}
