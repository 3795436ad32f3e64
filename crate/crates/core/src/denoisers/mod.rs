//! The noise-prediction interface and its implementations.
//!
//! A [`Denoiser`] maps a batch of noisy images at one noise level, a prompt
//! embedding and an attention context to a same-shaped noise estimate.
//! [`AnalyticDenoiser`] is the exact MMSE estimator under a Gaussian prior and
//! serves as an oracle; [`ToyUnet`] is a small untrained network with
//! self- and cross-attention whose attention layers honour the context.

mod gaussian;
mod unet;

pub(crate) use gaussian::ar1_filter;
pub use gaussian::{analytic_mmse, ar1_covariance, AnalyticDenoiser, GaussianPrior};
pub use unet::{SeededParams, TensorParams, ToyUnet, DOWNSAMPLE};

use alloc::string::String;
use alloc::vec::Vec;

use crate::attention::{AttentionContext, Tokens};
use crate::error::{shape_err, Result};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::stvolume::{ImageBatch, Slice2D};

/// Number of prompt tokens.
pub const PROMPT_TOKENS: usize = 8;
/// Width of one prompt token.
pub const PROMPT_DIM: usize = 64;

/// The diffusion step being denoised and its cumulative signal level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevel {
    pub step: usize,
    pub alpha_bar: f64,
}

impl NoiseLevel {
    pub fn at(schedule: &NoiseSchedule, step: usize) -> Self {
        Self {
            step,
            alpha_bar: schedule.alpha_bar(step),
        }
    }
}

/// A noise predictor `eps(x, level, prompt)`.
///
/// Implementations must be pure: the same inputs give bit-identical outputs,
/// and concurrent calls are allowed.
pub trait Denoiser: Send + Sync {
    fn predict(
        &self,
        x: &ImageBatch,
        level: NoiseLevel,
        prompt: &PromptEmbedding,
        attn: &mut AttentionContext<'_>,
    ) -> Result<ImageBatch>;
}

/// Text prompt stand-in: `PROMPT_TOKENS` vectors of width `PROMPT_DIM`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub text: String,
    pub tokens: Tokens,
}

impl PromptEmbedding {
    pub fn is_null(&self) -> bool {
        self.text.is_empty()
    }
}

/// Deterministic pseudo-embedding: token `i` is a standard normal vector
/// seeded by a hash of `(text, i)`. The empty prompt embeds to zeros.
pub fn embed_prompt(text: &str) -> PromptEmbedding {
    let mut data = Vec::with_capacity(PROMPT_TOKENS * PROMPT_DIM);
    if text.is_empty() {
        data.resize(PROMPT_TOKENS * PROMPT_DIM, 0.0);
    } else {
        let h = rng::fnv1a(text.bytes());
        for i in 0..PROMPT_TOKENS {
            data.extend(rng::normal_vec(
                &mut rng::stream(h, &[i as u64]),
                PROMPT_DIM,
            ));
        }
    }
    PromptEmbedding {
        text: text.into(),
        tokens: Tokens {
            rows: PROMPT_TOKENS,
            dim: PROMPT_DIM,
            data,
        },
    }
}

/// The null (unconditional) prompt.
pub fn null_prompt() -> PromptEmbedding {
    embed_prompt("")
}

/// Classifier-free guidance `uncond + s (cond - uncond)`.
pub fn cfg(cond: &[f32], uncond: &[f32], strength: f64) -> Result<Vec<f32>> {
    if cond.len() != uncond.len() {
        return Err(shape_err!(
            "guidance branches differ: {} vs {}",
            cond.len(),
            uncond.len()
        ));
    }
    Ok(cond
        .iter()
        .zip(uncond)
        .map(|(&c, &u)| (u as f64 + strength * (c as f64 - u as f64)) as f32)
        .collect())
}

/// Predicts the noise in one plane at schedule step `tau`, with plain
/// per-image attention.
pub fn predict_noise(
    d: &dyn Denoiser,
    x: &Slice2D,
    tau: usize,
    schedule: &NoiseSchedule,
    prompt: &PromptEmbedding,
) -> Result<Slice2D> {
    if tau == 0 || tau > schedule.steps() {
        return Err(crate::Error::OutOfBounds {
            index: tau,
            extent: schedule.steps() + 1,
        });
    }
    let out = d.predict(
        &ImageBatch::from_slice(x),
        NoiseLevel::at(schedule, tau),
        prompt,
        &mut AttentionContext::per_image(),
    )?;
    Ok(Slice2D {
        data: out.data,
        ..x.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_embedding() {
        let null = embed_prompt("");
        assert!(null.is_null());
        assert!(null.tokens.data.iter().all(|&v| v == 0.0));
        assert_eq!(null.tokens.data.len(), PROMPT_TOKENS * PROMPT_DIM);
        assert_eq!(embed_prompt("a cat"), embed_prompt("a cat"));
        assert_ne!(embed_prompt("a cat").tokens, embed_prompt("a dog").tokens);
    }

    #[test]
    fn guidance_arithmetic() {
        assert_eq!(cfg(&[0.1], &[0.0], 10.0).unwrap(), [1.0]);
        assert_eq!(cfg(&[0.3, -2.0], &[7.0, 1.5], 1.0).unwrap(), [0.3, -2.0]);
        assert_eq!(cfg(&[0.5], &[0.5], 7.5).unwrap(), [0.5]);
        assert!(cfg(&[0.5], &[], 1.0).is_err());
        // affine in the strength
        let (c, u) = ([0.25f32, -1.0], [1.0f32, 0.5]);
        let at = |s| cfg(&c, &u, s).unwrap();
        for i in 0..2 {
            let mid = 0.5 * (at(2.0)[i] + at(6.0)[i]);
            assert!((at(4.0)[i] - mid).abs() < 1e-6);
        }
    }
}
