//! Volume inversion, sampling with attention injection and the full edit
//! recipe.
//!
//! Inversion noises the latent video to every step independently, then walks
//! the steps backwards extracting the noise `z_t` that makes each DDPM step
//! land exactly on the next-lower noisy video. Sampling replays those noises
//! under a target prompt, starting `T_skip` steps below the top, and injects
//! the source queries / keys during its first steps. With the source prompt,
//! no skip and full injection, sampling reproduces the input.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{AttentionCache, CacheAccess, LayerSelection};
use crate::denoisers::{embed_prompt, Denoiser, NoiseLevel, PromptEmbedding};
use crate::error::{config_err, Error, Result};
use crate::inflated::{InflatedDenoiser, InflationConfig};
use crate::rng;
use crate::schedule::{ddpm_step, extract_noise, NoiseSchedule};
use crate::stvolume::{segment_plan, BlendMode, SegmentPlan, Space, VideoVolume, VolumeDims};

/// Pixel <-> latent mapping standing in for an autoencoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Codec {
    /// Latents are the pixels.
    #[default]
    Identity,
    /// 2x2 average pooling down, nearest-neighbour up.
    Pool2,
}

impl Codec {
    pub fn name(self) -> &'static str {
        match self {
            Codec::Identity => "identity",
            Codec::Pool2 => "pool2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Codec::Identity),
            "pool2" => Ok(Codec::Pool2),
            _ => Err(config_err!(
                "unknown codec `{s}` (expected identity or pool2)"
            )),
        }
    }

    pub fn encode(self, video: &VideoVolume) -> Result<VideoVolume> {
        let d = video.dims();
        match self {
            Codec::Identity => VideoVolume::new(d, Space::Latent, video.data().to_vec()),
            Codec::Pool2 => {
                if !d.height.is_multiple_of(2) || !d.width.is_multiple_of(2) {
                    return Err(Error::Input(format!(
                        "pool2 codec needs even sides, got {}x{}",
                        d.height, d.width
                    )));
                }
                let out = VolumeDims::new(d.n_frames, d.height / 2, d.width / 2, d.channels);
                VideoVolume::from_fn(out, Space::Latent, |t, y, x, c| {
                    let s = video.get(t, 2 * y, 2 * x, c)
                        + video.get(t, 2 * y, 2 * x + 1, c)
                        + video.get(t, 2 * y + 1, 2 * x, c)
                        + video.get(t, 2 * y + 1, 2 * x + 1, c);
                    0.25 * s
                })
            }
        }
    }

    /// Back to pixel space, clamped to `[-1, 1]`.
    pub fn decode(self, latent: &VideoVolume) -> Result<VideoVolume> {
        let d = latent.dims();
        let (out, f): (VolumeDims, usize) = match self {
            Codec::Identity => (d, 1),
            Codec::Pool2 => (
                VolumeDims::new(d.n_frames, 2 * d.height, 2 * d.width, d.channels),
                2,
            ),
        };
        VideoVolume::from_fn(out, Space::Pixel, |t, y, x, c| {
            latent.get(t, y / f, x / f, c).clamp(-1.0, 1.0)
        })
    }
}

/// All editing hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EditConfig {
    /// Diffusion steps `T`.
    pub steps: usize,
    /// Sampling starts at step `T - t_skip`.
    pub t_skip: usize,
    pub gamma: f64,
    /// Fraction of executed sampling steps (the noisiest ones) with injection.
    pub inject_fraction: f64,
    pub cfg_strength_ea: f64,
    pub cfg_strength_s: f64,
    pub seg_len: usize,
    /// `1` for DDPM, `0` for deterministic DDIM.
    pub eta: f64,
    pub seed: u64,
    pub codec: Codec,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Length of the fine beta grid the `steps` timesteps are strided from.
    pub train_steps: usize,
    pub use_xt_slices: bool,
    pub blend_mode: BlendMode,
    pub inject_layers: LayerSelection,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            t_skip: 8,
            gamma: 0.8,
            inject_fraction: 0.85,
            cfg_strength_ea: 10.0,
            cfg_strength_s: 1.0,
            seg_len: 64,
            eta: 1.0,
            seed: 0,
            codec: Codec::Identity,
            beta_start: 0.00085,
            beta_end: 0.012,
            train_steps: 1000,
            use_xt_slices: false,
            blend_mode: BlendMode::Mean,
            inject_layers: LayerSelection::UpPath,
        }
    }
}

/// Configuration keys in display order.
pub const CONFIG_KEYS: [&str; 16] = [
    "T",
    "T_skip",
    "gamma",
    "inject_fraction",
    "cfg_strength_EA",
    "cfg_strength_S",
    "seg_len",
    "eta",
    "seed",
    "codec",
    "beta_start",
    "beta_end",
    "train_steps",
    "use_xt_slices",
    "blend_mode",
    "inject_layers",
];

fn parse<T: core::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| config_err!("invalid value `{value}` for {key}"))
}

fn parse_layers(value: &str) -> Result<LayerSelection> {
    match value {
        "up" => Ok(LayerSelection::UpPath),
        "all" => Ok(LayerSelection::All),
        ids => ids
            .split(',')
            .map(|s| parse::<u16>("inject_layers", s))
            .collect::<Result<Vec<_>>>()
            .map(LayerSelection::Only),
    }
}

fn layers_name(l: &LayerSelection) -> String {
    match l {
        LayerSelection::UpPath => "up".into(),
        LayerSelection::All => "all".into(),
        LayerSelection::Only(ids) => ids
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join(","),
    }
}

impl EditConfig {
    /// Sets one key from its textual value. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "T" => self.steps = parse(key, v)?,
            "T_skip" => self.t_skip = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "inject_fraction" => self.inject_fraction = parse(key, v)?,
            "cfg_strength_EA" => self.cfg_strength_ea = parse(key, v)?,
            "cfg_strength_S" => self.cfg_strength_s = parse(key, v)?,
            "seg_len" => self.seg_len = parse(key, v)?,
            "eta" => self.eta = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "codec" => self.codec = Codec::parse(v)?,
            "beta_start" => self.beta_start = parse(key, v)?,
            "beta_end" => self.beta_end = parse(key, v)?,
            "train_steps" => self.train_steps = parse(key, v)?,
            "use_xt_slices" => {
                self.use_xt_slices = match v {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    _ => return Err(config_err!("invalid value `{v}` for {key}")),
                }
            }
            "blend_mode" => {
                self.blend_mode = match v {
                    "mean" => BlendMode::Mean,
                    "independent" => BlendMode::Independent,
                    _ => {
                        return Err(config_err!(
                            "invalid value `{v}` for {key} (mean or independent)"
                        ))
                    }
                }
            }
            "inject_layers" => self.inject_layers = parse_layers(v)?,
            _ => return Err(config_err!("unknown configuration key `{key}`")),
        }
        Ok(())
    }

    /// `(key, value)` pairs in [`CONFIG_KEYS`] order; values parse back with
    /// [`Self::set`].
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let blend = match self.blend_mode {
            BlendMode::Mean => "mean",
            BlendMode::Independent => "independent",
        };
        let values = [
            self.steps.to_string(),
            self.t_skip.to_string(),
            self.gamma.to_string(),
            self.inject_fraction.to_string(),
            self.cfg_strength_ea.to_string(),
            self.cfg_strength_s.to_string(),
            self.seg_len.to_string(),
            self.eta.to_string(),
            self.seed.to_string(),
            self.codec.name().into(),
            self.beta_start.to_string(),
            self.beta_end.to_string(),
            self.train_steps.to_string(),
            self.use_xt_slices.to_string(),
            blend.into(),
            layers_name(&self.inject_layers),
        ];
        CONFIG_KEYS.iter().copied().zip(values).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(config_err!("T must be at least 1"));
        }
        if self.t_skip >= self.steps {
            return Err(config_err!(
                "T_skip ({}) must be below T ({})",
                self.t_skip,
                self.steps
            ));
        }
        if !(0.0..=1.0).contains(&self.inject_fraction) {
            return Err(config_err!(
                "inject_fraction must lie in [0, 1], got {}",
                self.inject_fraction
            ));
        }
        self.inflation().validate()?;
        self.schedule()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::strided(
            self.steps,
            self.train_steps,
            self.beta_start,
            self.beta_end,
            self.eta,
        )
    }

    pub fn inflation(&self) -> InflationConfig {
        InflationConfig {
            gamma: self.gamma,
            cfg_strength_ea: self.cfg_strength_ea,
            cfg_strength_s: self.cfg_strength_s,
            use_xt_slices: self.use_xt_slices,
            seg_len: self.seg_len,
            blend_mode: self.blend_mode,
            layers: self.inject_layers.clone(),
        }
    }

    pub fn sampling_plan(&self) -> Result<SamplingPlan> {
        SamplingPlan::new(self.steps, self.t_skip, self.inject_fraction)
    }

    /// Whether two configurations share the diffusion schedule, so a record
    /// made under one can be sampled under the other.
    fn same_schedule(&self, other: &Self) -> bool {
        self.steps == other.steps
            && self.eta == other.eta
            && self.beta_start == other.beta_start
            && self.beta_end == other.beta_end
            && self.train_steps == other.train_steps
    }
}

/// Which steps sampling executes and which of them inject attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplingPlan {
    /// The first (noisiest) executed step, `T - T_skip`.
    pub first_step: usize,
    /// Number of executed steps.
    pub executed: usize,
    /// Number of leading executed steps with injection,
    /// `ceil(inject_fraction * executed)`.
    pub injected: usize,
}

impl SamplingPlan {
    pub fn new(steps: usize, t_skip: usize, inject_fraction: f64) -> Result<Self> {
        if t_skip >= steps {
            return Err(config_err!("T_skip ({t_skip}) must be below T ({steps})"));
        }
        if !(0.0..=1.0).contains(&inject_fraction) {
            return Err(config_err!(
                "inject_fraction must lie in [0, 1], got {inject_fraction}"
            ));
        }
        let executed = steps - t_skip;
        // the guard absorbs products like 0.85 * 20 = 17.000000000000004
        let injected = libm::ceil(inject_fraction * executed as f64 - 1e-9).max(0.0) as usize;
        Ok(Self {
            first_step: executed,
            executed,
            injected: injected.min(executed),
        })
    }

    /// Executed steps, noisiest first.
    pub fn steps(&self) -> impl Iterator<Item = usize> {
        (1..=self.first_step).rev()
    }

    pub fn injects(&self, step: usize) -> bool {
        step >= 1 && step <= self.first_step && self.first_step - step < self.injected
    }
}

/// Everything sampling needs to replay an inversion.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionRecord {
    pub dims: VolumeDims,
    /// `noises[t - 1]` is `z_t`; empty for a DDIM inversion.
    pub noises: Vec<Vec<f32>>,
    /// `trajectory[t]` is the noisy latent at step `t`; `trajectory[0]` is
    /// the (reconstructed) source.
    pub trajectory: Vec<Vec<f32>>,
    /// Source queries / keys of the injected steps.
    pub cache: AttentionCache,
    pub config: EditConfig,
    pub source_prompt: PromptEmbedding,
}

impl InversionRecord {
    /// The terminal noisy video `x_T`.
    pub fn terminal(&self) -> Result<VideoVolume> {
        self.at(self.trajectory.len() - 1)
    }

    pub fn at(&self, step: usize) -> Result<VideoVolume> {
        let data = self.trajectory.get(step).ok_or(Error::OutOfBounds {
            index: step,
            extent: self.trajectory.len(),
        })?;
        VideoVolume::new(self.dims, Space::Latent, data.clone())
    }

    pub fn is_ddim(&self) -> bool {
        self.noises.is_empty()
    }

    /// FNV-1a over the noises and trajectory bits.
    pub fn checksum(&self) -> u64 {
        let bits = self
            .noises
            .iter()
            .chain(&self.trajectory)
            .flat_map(|v| v.iter().flat_map(|x| x.to_bits().to_le_bytes()));
        rng::fnv1a(bits)
    }
}

const TAG_FORWARD_NOISE: u64 = 0x006e_6f69_7365;

/// The independent standard normal draws used to noise the source to `step`:
/// one stream per `(seed, step, frame)`.
fn forward_noise_draws(seed: u64, step: usize, dims: VolumeDims) -> Vec<f32> {
    let mut out = Vec::with_capacity(dims.len());
    for f in 0..dims.n_frames {
        let mut r = rng::stream(seed, &[TAG_FORWARD_NOISE, step as u64, f as u64]);
        out.extend(rng::normal_vec(&mut r, dims.frame_len()));
    }
    out
}

fn check_frames(video: &VideoVolume, config: &EditConfig) -> Result<()> {
    if config.gamma < 1.0 && video.n_frames() < config.seg_len {
        return Err(Error::Input(format!(
            "inversion needs at least seg_len = {} frames, got {}",
            config.seg_len,
            video.n_frames()
        )));
    }
    Ok(())
}

/// DDPM inversion of a latent video under the source prompt.
///
/// Noise is extracted with the same guided prediction that sampling uses, and
/// each lower noisy video is replaced by the exact result of the DDPM step
/// that sampling will compute, so replaying the noises is bit-exact.
pub fn invert(
    denoiser: &dyn Denoiser,
    source: &VideoVolume,
    prompt: &PromptEmbedding,
    config: &EditConfig,
) -> Result<InversionRecord> {
    config.validate()?;
    if config.eta == 0.0 {
        return Err(Error::Unsupported(
            "DDPM inversion needs eta > 0; use the DDIM inversion for eta = 0".into(),
        ));
    }
    check_frames(source, config)?;
    let schedule = config.schedule()?;
    let plan = config.sampling_plan()?;
    let model = InflatedDenoiser::new(denoiser, config.inflation())?;
    let dims = source.dims();
    let steps = schedule.steps();

    let mut trajectory = Vec::with_capacity(steps + 1);
    trajectory.push(source.data().to_vec());
    for t in 1..=steps {
        trajectory.push(schedule.forward_noise(
            source.data(),
            t,
            &forward_noise_draws(config.seed, t, dims),
        )?);
    }
    let mut noises = vec![Vec::new(); steps];
    let mut cache = AttentionCache::new();
    for t in (1..=steps).rev() {
        let x = VideoVolume::new(dims, Space::Latent, core::mem::take(&mut trajectory[t]))?;
        let access = if plan.injects(t) {
            CacheAccess::Capture(&mut cache)
        } else {
            CacheAccess::Off
        };
        let eps = model.predict(&x, NoiseLevel::at(&schedule, t), prompt, access)?;
        let mu = schedule.mu_hat(x.data(), eps.data(), t)?;
        let sigma = schedule.sigma(t);
        let z = extract_noise(&trajectory[t - 1], &mu, sigma, t)?;
        trajectory[t - 1] = ddpm_step(&mu, sigma, &z)?;
        trajectory[t] = x.into_data();
        noises[t - 1] = z;
    }
    Ok(InversionRecord {
        dims,
        noises,
        trajectory,
        cache,
        config: config.clone(),
        source_prompt: prompt.clone(),
    })
}

/// Deterministic DDIM inversion (`eta = 0`). The prediction for step `t` is
/// evaluated at the lower video `x_{t-1}`.
pub fn invert_ddim(
    denoiser: &dyn Denoiser,
    source: &VideoVolume,
    prompt: &PromptEmbedding,
    config: &EditConfig,
) -> Result<InversionRecord> {
    config.validate()?;
    if config.eta != 0.0 {
        return Err(config_err!(
            "DDIM inversion needs eta = 0, got {}",
            config.eta
        ));
    }
    check_frames(source, config)?;
    let schedule = config.schedule()?;
    let plan = config.sampling_plan()?;
    let model = InflatedDenoiser::new(denoiser, config.inflation())?;
    let dims = source.dims();
    let mut trajectory = vec![source.data().to_vec()];
    let mut cache = AttentionCache::new();
    for t in 1..=schedule.steps() {
        let x = VideoVolume::new(dims, Space::Latent, trajectory[t - 1].clone())?;
        let access = if plan.injects(t) {
            CacheAccess::Capture(&mut cache)
        } else {
            CacheAccess::Off
        };
        let eps = model.predict(&x, NoiseLevel::at(&schedule, t), prompt, access)?;
        trajectory.push(schedule.ddim_invert_step(x.data(), eps.data(), t)?);
    }
    Ok(InversionRecord {
        dims,
        noises: Vec::new(),
        trajectory,
        cache,
        config: config.clone(),
        source_prompt: prompt.clone(),
    })
}

/// Inversion matching the configured sampler.
pub fn invert_any(
    denoiser: &dyn Denoiser,
    source: &VideoVolume,
    prompt: &PromptEmbedding,
    config: &EditConfig,
) -> Result<InversionRecord> {
    if config.eta == 0.0 {
        invert_ddim(denoiser, source, prompt, config)
    } else {
        invert(denoiser, source, prompt, config)
    }
}

/// Replays an inversion under the target prompt.
pub fn sample(
    denoiser: &dyn Denoiser,
    record: &InversionRecord,
    prompt: &PromptEmbedding,
    config: &EditConfig,
) -> Result<VideoVolume> {
    config.validate()?;
    if !record.config.same_schedule(config) {
        return Err(config_err!(
            "the inversion record was made with a different diffusion schedule"
        ));
    }
    let schedule = config.schedule()?;
    let steps = schedule.steps();
    if record.trajectory.len() != steps + 1 || !(record.is_ddim() || record.noises.len() == steps) {
        return Err(Error::Input("inversion record is incomplete".into()));
    }
    if record.is_ddim() != (config.eta == 0.0) {
        return Err(config_err!(
            "record and configuration disagree on DDPM vs DDIM"
        ));
    }
    let plan = config.sampling_plan()?;
    let model = InflatedDenoiser::new(denoiser, config.inflation())?;
    let mut x = record.at(plan.first_step)?;
    for t in plan.steps() {
        let access = if plan.injects(t) {
            CacheAccess::Inject(&record.cache)
        } else {
            CacheAccess::Off
        };
        let eps = model.predict(&x, NoiseLevel::at(&schedule, t), prompt, access)?;
        let mu = schedule.mu_hat(x.data(), eps.data(), t)?;
        let next = if record.is_ddim() {
            mu
        } else {
            ddpm_step(&mu, schedule.sigma(t), &record.noises[t - 1])?
        };
        x = x.with_data(next)?;
    }
    Ok(x)
}

/// Doubles the frame rate by inserting midpoints: `2n - 1` frames, padded to
/// `2n` by repeating the last frame.
pub fn interpolate_frames(video: &VideoVolume) -> Result<VideoVolume> {
    let n = video.n_frames();
    if n < 2 {
        return Err(Error::Input(
            "interpolation needs at least two frames".into(),
        ));
    }
    let mut frames = Vec::with_capacity(2 * n);
    for t in 0..n {
        frames.push(video.frame(t).to_vec());
        if t + 1 < n {
            let mid = video
                .frame(t)
                .iter()
                .zip(video.frame(t + 1))
                .map(|(a, b)| 0.5 * (a + b))
                .collect();
            frames.push(mid);
        }
    }
    frames.push(video.frame(n - 1).to_vec());
    VideoVolume::from_frames(
        &frames,
        video.height(),
        video.width(),
        video.channels(),
        video.space(),
    )
}

/// Keeps the even frames, undoing [`interpolate_frames`].
pub fn subsample(video: &VideoVolume) -> Result<VideoVolume> {
    let idx: Vec<usize> = (0..video.n_frames()).step_by(2).collect();
    video.gather_frames(&idx)
}

/// How an edit of a given length will run.
#[derive(Debug, Clone, PartialEq)]
pub struct EditPlan {
    pub input_frames: usize,
    /// Whether frames are doubled before editing and halved afterwards.
    pub interpolated: bool,
    /// Frames the diffusion runs on.
    pub working_frames: usize,
    /// Segments of the slice branch.
    pub segments: SegmentPlan,
    pub sampling: SamplingPlan,
}

/// The fewest frames an edit accepts: more than half a segment.
pub fn min_frames(seg_len: usize) -> usize {
    seg_len / 2 + 1
}

/// Frame counts only matter to the slice branch; with `gamma = 1` any
/// non-empty video is edited as is.
pub fn plan_edit(n_frames: usize, config: &EditConfig) -> Result<EditPlan> {
    config.validate()?;
    let slices = config.gamma < 1.0;
    let min = if slices {
        min_frames(config.seg_len)
    } else {
        1
    };
    if n_frames < min {
        return Err(Error::Input(format!(
            "{n_frames} frames is too short; editing needs at least {min} (seg_len {})",
            config.seg_len
        )));
    }
    let interpolated = slices && n_frames < config.seg_len;
    let working_frames = if interpolated { 2 * n_frames } else { n_frames };
    let seg_len = if slices {
        config.seg_len
    } else {
        config.seg_len.min(working_frames)
    };
    Ok(EditPlan {
        input_frames: n_frames,
        interpolated,
        working_frames,
        segments: segment_plan(working_frames, seg_len, config.blend_mode)?,
        sampling: config.sampling_plan()?,
    })
}

#[derive(Debug, Clone)]
pub struct EditOutput {
    /// The edited video, in the input's space and geometry.
    pub video: VideoVolume,
    pub record: InversionRecord,
    pub plan: EditPlan,
}

/// The whole recipe: encode, interpolate short videos, invert under the
/// source prompt, sample under the target prompt, undo interpolation, decode.
/// Latent-space input skips the codec.
pub fn edit(
    denoiser: &dyn Denoiser,
    video: &VideoVolume,
    source_text: &str,
    target_text: &str,
    config: &EditConfig,
) -> Result<EditOutput> {
    let plan = plan_edit(video.n_frames(), config)?;
    let pixel = video.space() == Space::Pixel;
    let latent = if pixel {
        config.codec.encode(video)?
    } else {
        video.clone()
    };
    let work = if plan.interpolated {
        interpolate_frames(&latent)?
    } else {
        latent
    };
    let record = invert_any(denoiser, &work, &embed_prompt(source_text), config)?;
    let edited = sample(denoiser, &record, &embed_prompt(target_text), config)?;
    let edited = if plan.interpolated {
        subsample(&edited)?
    } else {
        edited
    };
    let video = if pixel {
        config.codec.decode(&edited)?
    } else {
        edited
    };
    Ok(EditOutput {
        video,
        record,
        plan,
    })
}
