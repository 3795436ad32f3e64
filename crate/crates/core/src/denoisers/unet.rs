//! A two-level toy U-Net with self- and cross-attention.
//!
//! Layout (NHWC, base width 32, GroupNorm with 8 groups, SiLU):
//!
//! ```text
//! conv_in -> res(32) ----------------------------------------> skip0
//!   pool -> res(64) ----------------------------------> skip1    |
//!     pool -> res(64) + attn#0                          |        |
//!   up <- res(128 -> 64) + attn#1 <- concat(skip1) <----+        |
//! up <- res(96 -> 32) <- concat(skip0) <-------------------------+
//! norm -> silu -> conv_out
//! ```
//!
//! Attention block `#0` sits at the bottleneck, `#1` on the decoder path.
//! Each block runs self-attention through the caller's
//! [`AttentionContext`] (so frames can attend to key-frames and queries /
//! keys can be captured or injected), then cross-attention to the prompt.
//! Weights are untrained.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{self, AttentionContext, AttentionLayer};
use crate::error::{config_err, shape_err, Error, Result};
use crate::math::{cos, exp, ln, sin};
use crate::nn::{
    avg_pool2, concat_channels, silu_inplace, upsample2, Conv2d, GroupNorm, Linear, NamedTensor,
    ParamSource,
};
use crate::rng;
use crate::stvolume::ImageBatch;

use super::{Denoiser, NoiseLevel, PromptEmbedding, PROMPT_DIM};

/// Spatial dimensions must be divisible by this factor.
pub const DOWNSAMPLE: usize = 4;

const BASE: usize = 32;
const GROUPS: usize = 8;
const TIME_DIM: usize = 32;
const EMB_DIM: usize = 128;
const HEAD_DIM: usize = 32;
const INIT_STD: f32 = 0.02;

/// Draws every weight from `N(0, std^2)` on a stream keyed by the seed and the
/// tensor name; biases start at zero and norm scales at one.
#[derive(Debug, Clone)]
pub struct SeededParams {
    seed: u64,
    std: f32,
}

impl SeededParams {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            std: INIT_STD,
        }
    }
}

impl ParamSource for SeededParams {
    fn weight(&mut self, name: &str, dims: &[usize]) -> Result<Vec<f32>> {
        let mut r = rng::stream(self.seed, &[rng::fnv1a(name.bytes())]);
        let n = dims.iter().product();
        Ok(rng::normal_vec(&mut r, n)
            .into_iter()
            .map(|v| v * self.std)
            .collect())
    }

    fn zeros(&mut self, _: &str, dims: &[usize]) -> Result<Vec<f32>> {
        Ok(vec![0.0; dims.iter().product()])
    }

    fn ones(&mut self, _: &str, dims: &[usize]) -> Result<Vec<f32>> {
        Ok(vec![1.0; dims.iter().product()])
    }
}

/// Serves parameters from a set of named tensors (a loaded weights file).
#[derive(Debug, Clone, Default)]
pub struct TensorParams {
    tensors: BTreeMap<String, NamedTensor>,
}

impl TensorParams {
    pub fn new(tensors: impl IntoIterator<Item = NamedTensor>) -> Self {
        Self {
            tensors: tensors.into_iter().map(|t| (t.name.clone(), t)).collect(),
        }
    }

    fn take(&mut self, name: &str, dims: &[usize]) -> Result<Vec<f32>> {
        let t = self
            .tensors
            .remove(name)
            .ok_or_else(|| Error::Input(format!("weights are missing tensor `{name}`")))?;
        if t.dims != dims {
            return Err(shape_err!(
                "tensor `{name}` has dims {:?}, expected {dims:?}",
                t.dims
            ));
        }
        Ok(t.data)
    }

    /// Names that were supplied but never requested.
    pub fn leftover(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }
}

impl ParamSource for TensorParams {
    fn weight(&mut self, name: &str, dims: &[usize]) -> Result<Vec<f32>> {
        self.take(name, dims)
    }
    fn zeros(&mut self, name: &str, dims: &[usize]) -> Result<Vec<f32>> {
        self.take(name, dims)
    }
    fn ones(&mut self, name: &str, dims: &[usize]) -> Result<Vec<f32>> {
        self.take(name, dims)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(src: &mut dyn ParamSource, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(src, &format!("{name}.norm1"), GROUPS, c_in)?,
            conv1: Conv2d::new(src, &format!("{name}.conv1"), c_in, c_out, 3)?,
            time: Linear::new(src, &format!("{name}.time"), EMB_DIM, c_out, true)?,
            norm2: GroupNorm::new(src, &format!("{name}.norm2"), GROUPS, c_out)?,
            conv2: Conv2d::new(src, &format!("{name}.conv2"), c_out, c_out, 3)?,
            skip: if c_in == c_out {
                None
            } else {
                Some(Conv2d::new(src, &format!("{name}.skip"), c_in, c_out, 1)?)
            },
        })
    }

    /// `emb` is the SiLU-activated time embedding.
    fn forward(&self, x: &ImageBatch, emb: &[f32]) -> Result<ImageBatch> {
        let mut h = self.norm1.forward(x)?;
        silu_inplace(&mut h.data);
        let mut h = self.conv1.forward(&h)?;
        let shift = self.time.forward(emb, 1);
        h.data
            .chunks_mut(h.channels)
            .for_each(|px| px.iter_mut().zip(&shift).for_each(|(v, s)| *v += s));
        let mut h = self.norm2.forward(&h)?;
        silu_inplace(&mut h.data);
        let mut h = self.conv2.forward(&h)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        h.data.iter_mut().zip(&skip.data).for_each(|(v, s)| *v += s);
        Ok(h)
    }

    fn visit(&self, out: &mut Vec<NamedTensor>) {
        self.norm1.visit(out);
        self.conv1.visit(out);
        self.time.visit(out);
        self.norm2.visit(out);
        self.conv2.visit(out);
        if let Some(s) = &self.skip {
            s.visit(out);
        }
    }
}

#[derive(Debug, Clone)]
struct AttnBlock {
    layer: AttentionLayer,
    norm: GroupNorm,
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
    cross_norm: GroupNorm,
    cross_q: Linear,
    cross_k: Linear,
    cross_v: Linear,
    cross_out: Linear,
}

impl AttnBlock {
    fn new(src: &mut dyn ParamSource, name: &str, c: usize, layer: AttentionLayer) -> Result<Self> {
        let lin = |src: &mut dyn ParamSource, part: &str, i, o, bias| {
            Linear::new(src, &format!("{name}.{part}"), i, o, bias)
        };
        Ok(Self {
            layer,
            norm: GroupNorm::new(src, &format!("{name}.norm"), GROUPS, c)?,
            to_q: lin(src, "to_q", c, HEAD_DIM, false)?,
            to_k: lin(src, "to_k", c, HEAD_DIM, false)?,
            to_v: lin(src, "to_v", c, HEAD_DIM, false)?,
            to_out: lin(src, "to_out", HEAD_DIM, c, true)?,
            cross_norm: GroupNorm::new(src, &format!("{name}.cross_norm"), GROUPS, c)?,
            cross_q: lin(src, "cross_q", c, HEAD_DIM, false)?,
            cross_k: lin(src, "cross_k", PROMPT_DIM, HEAD_DIM, false)?,
            cross_v: lin(src, "cross_v", PROMPT_DIM, HEAD_DIM, false)?,
            cross_out: lin(src, "cross_out", HEAD_DIM, c, true)?,
        })
    }

    fn forward(
        &self,
        x: &mut ImageBatch,
        prompt: &PromptEmbedding,
        ctx: &mut AttentionContext<'_>,
    ) -> Result<()> {
        let (n, tokens) = (x.n, x.pixels());
        let rows = n * tokens;
        let h = self.norm.forward(x)?;
        let q = self.to_q.forward(&h.data, rows);
        let k = self.to_k.forward(&h.data, rows);
        let v = self.to_v.forward(&h.data, rows);
        let a = ctx.attend(self.layer, &q, &k, &v, n, tokens, HEAD_DIM, HEAD_DIM)?;
        let o = self.to_out.forward(&a, rows);
        x.data.iter_mut().zip(&o).for_each(|(d, s)| *d += s);

        let h = self.cross_norm.forward(x)?;
        let q = self.cross_q.forward(&h.data, rows);
        let p = &prompt.tokens;
        let k = self.cross_k.forward(&p.data, p.rows);
        let v = self.cross_v.forward(&p.data, p.rows);
        let a = attention::attend(&q, rows, &k, &v, p.rows, HEAD_DIM, HEAD_DIM);
        let o = self.cross_out.forward(&a, rows);
        x.data.iter_mut().zip(&o).for_each(|(d, s)| *d += s);
        Ok(())
    }

    fn visit(&self, out: &mut Vec<NamedTensor>) {
        self.norm.visit(out);
        for l in [&self.to_q, &self.to_k, &self.to_v, &self.to_out] {
            l.visit(out);
        }
        self.cross_norm.visit(out);
        for l in [&self.cross_q, &self.cross_k, &self.cross_v, &self.cross_out] {
            l.visit(out);
        }
    }
}

/// The toy U-Net denoiser. Works on any `H x W` divisible by [`DOWNSAMPLE`]
/// with `in_channels` channels.
#[derive(Debug, Clone)]
pub struct ToyUnet {
    in_channels: usize,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down0: ResBlock,
    down1: ResBlock,
    mid: ResBlock,
    mid_attn: AttnBlock,
    up1: ResBlock,
    up1_attn: AttnBlock,
    up0: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl ToyUnet {
    /// Randomly initialized network; the same seed gives the same weights.
    pub fn seeded(in_channels: usize, seed: u64) -> Result<Self> {
        Self::build(in_channels, &mut SeededParams::new(seed))
    }

    /// Network from named tensors, e.g. a loaded weights file. Every tensor
    /// must be present with the expected shape and none may be left over.
    pub fn from_tensors(in_channels: usize, tensors: Vec<NamedTensor>) -> Result<Self> {
        let mut src = TensorParams::new(tensors);
        let net = Self::build(in_channels, &mut src)?;
        let extra = src.leftover();
        if !extra.is_empty() {
            return Err(Error::Input(format!(
                "unexpected tensors in weights: {}",
                extra.join(", ")
            )));
        }
        Ok(net)
    }

    pub fn build(in_channels: usize, src: &mut dyn ParamSource) -> Result<Self> {
        if in_channels == 0 {
            return Err(config_err!("the U-Net needs at least one input channel"));
        }
        let c = in_channels;
        Ok(Self {
            in_channels,
            time1: Linear::new(src, "time.fc1", TIME_DIM, EMB_DIM, true)?,
            time2: Linear::new(src, "time.fc2", EMB_DIM, EMB_DIM, true)?,
            conv_in: Conv2d::new(src, "conv_in", c, BASE, 3)?,
            down0: ResBlock::new(src, "down0", BASE, BASE)?,
            down1: ResBlock::new(src, "down1", BASE, 2 * BASE)?,
            mid: ResBlock::new(src, "mid", 2 * BASE, 2 * BASE)?,
            mid_attn: AttnBlock::new(
                src,
                "mid.attn",
                2 * BASE,
                AttentionLayer {
                    id: 0,
                    up_path: false,
                },
            )?,
            up1: ResBlock::new(src, "up1", 4 * BASE, 2 * BASE)?,
            up1_attn: AttnBlock::new(
                src,
                "up1.attn",
                2 * BASE,
                AttentionLayer {
                    id: 1,
                    up_path: true,
                },
            )?,
            up0: ResBlock::new(src, "up0", 3 * BASE, BASE)?,
            norm_out: GroupNorm::new(src, "norm_out", GROUPS, BASE)?,
            conv_out: Conv2d::new(src, "conv_out", BASE, c, 3)?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// The attention layers in evaluation order.
    pub fn attention_layers(&self) -> [AttentionLayer; 2] {
        [self.mid_attn.layer, self.up1_attn.layer]
    }

    /// All parameters as named tensors, in construction order.
    pub fn tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        self.time1.visit(&mut out);
        self.time2.visit(&mut out);
        self.conv_in.visit(&mut out);
        self.down0.visit(&mut out);
        self.down1.visit(&mut out);
        self.mid.visit(&mut out);
        self.mid_attn.visit(&mut out);
        self.up1.visit(&mut out);
        self.up1_attn.visit(&mut out);
        self.up0.visit(&mut out);
        self.norm_out.visit(&mut out);
        self.conv_out.visit(&mut out);
        out
    }

    /// FNV-1a over tensor names, shapes and weight bits.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for t in self.tensors() {
            bytes.extend_from_slice(t.name.as_bytes());
            t.dims
                .iter()
                .for_each(|d| bytes.extend_from_slice(&(*d as u64).to_le_bytes()));
            t.data
                .iter()
                .for_each(|v| bytes.extend_from_slice(&v.to_bits().to_le_bytes()));
        }
        rng::fnv1a(bytes)
    }

    /// Sinusoidal embedding of the noise level, then the time MLP, SiLU-activated.
    fn time_embedding(&self, alpha_bar: f64) -> Vec<f32> {
        let t = 1000.0 * (1.0 - alpha_bar);
        let half = TIME_DIM / 2;
        let mut feat = Vec::with_capacity(TIME_DIM);
        for i in 0..half {
            let freq = exp(-ln(10_000.0) * i as f64 / half as f64);
            feat.push(sin(t * freq) as f32);
        }
        for i in 0..half {
            let freq = exp(-ln(10_000.0) * i as f64 / half as f64);
            feat.push(cos(t * freq) as f32);
        }
        let mut h = self.time1.forward(&feat, 1);
        silu_inplace(&mut h);
        let mut h = self.time2.forward(&h, 1);
        silu_inplace(&mut h);
        h
    }
}

impl Denoiser for ToyUnet {
    fn predict(
        &self,
        x: &ImageBatch,
        level: NoiseLevel,
        prompt: &PromptEmbedding,
        attn: &mut AttentionContext<'_>,
    ) -> Result<ImageBatch> {
        if x.channels != self.in_channels
            || !x.height.is_multiple_of(DOWNSAMPLE)
            || !x.width.is_multiple_of(DOWNSAMPLE)
            || x.n == 0
        {
            return Err(shape_err!(
                "U-Net expects {} channels and sides divisible by {DOWNSAMPLE}, got {}x{}x{}",
                self.in_channels,
                x.height,
                x.width,
                x.channels
            ));
        }
        let emb = self.time_embedding(level.alpha_bar);
        let h = self.conv_in.forward(x)?;
        let skip0 = self.down0.forward(&h, &emb)?;
        let skip1 = self.down1.forward(&avg_pool2(&skip0)?, &emb)?;
        let mut h = self.mid.forward(&avg_pool2(&skip1)?, &emb)?;
        self.mid_attn.forward(&mut h, prompt, attn)?;
        let h = concat_channels(&upsample2(&h), &skip1)?;
        let mut h = self.up1.forward(&h, &emb)?;
        self.up1_attn.forward(&mut h, prompt, attn)?;
        let h = concat_channels(&upsample2(&h), &skip0)?;
        let h = self.up0.forward(&h, &emb)?;
        let mut h = self.norm_out.forward(&h)?;
        silu_inplace(&mut h.data);
        self.conv_out.forward(&h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{keyframe_sets, AttentionCache, CacheAccess, LayerSelection};
    use crate::denoisers::{embed_prompt, null_prompt};

    fn input(n: usize, h: usize, w: usize, c: usize, seed: u64) -> ImageBatch {
        let mut r = rng::stream(seed, &[]);
        ImageBatch::new(n, h, w, c, rng::normal_vec(&mut r, n * h * w * c)).unwrap()
    }

    const LEVEL: NoiseLevel = NoiseLevel {
        step: 10,
        alpha_bar: 0.6,
    };

    #[test]
    fn seeded_weights_are_reproducible() {
        let a = ToyUnet::seeded(4, 7).unwrap();
        assert_eq!(a.checksum(), ToyUnet::seeded(4, 7).unwrap().checksum());
        assert_ne!(a.checksum(), ToyUnet::seeded(4, 8).unwrap().checksum());
        let b = ToyUnet::from_tensors(4, a.tensors()).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let mut short = a.tensors();
        short.pop();
        assert!(matches!(
            ToyUnet::from_tensors(4, short),
            Err(Error::Input(_))
        ));
        assert!(ToyUnet::from_tensors(3, a.tensors()).is_err());
        assert!(matches!(ToyUnet::seeded(0, 1), Err(Error::Config(_))));
    }

    #[test]
    fn shape_and_determinism() {
        let net = ToyUnet::seeded(4, 1).unwrap();
        let x = input(2, 32, 32, 4, 2);
        let p = embed_prompt("a red car");
        let y1 = net
            .predict(&x, LEVEL, &p, &mut AttentionContext::per_image())
            .unwrap();
        let y2 = net
            .predict(&x, LEVEL, &p, &mut AttentionContext::per_image())
            .unwrap();
        assert!(y1.same_shape(&x));
        assert_eq!(y1.data, y2.data);
        assert!(y1.data.iter().all(|v| v.is_finite()));
        let y3 = net
            .predict(
                &x,
                LEVEL,
                &null_prompt(),
                &mut AttentionContext::per_image(),
            )
            .unwrap();
        assert_ne!(y1.data, y3.data);
        let bad = input(1, 30, 32, 4, 0);
        assert!(matches!(
            net.predict(&bad, LEVEL, &p, &mut AttentionContext::per_image()),
            Err(Error::Shape(_))
        ));
        let bad = input(1, 8, 8, 3, 0);
        assert!(net
            .predict(&bad, LEVEL, &p, &mut AttentionContext::per_image())
            .is_err());
    }

    #[test]
    fn batch_items_are_independent_under_per_image_attention() {
        let net = ToyUnet::seeded(2, 3).unwrap();
        let x = input(3, 8, 12, 2, 5);
        let p = embed_prompt("x");
        let all = net
            .predict(&x, LEVEL, &p, &mut AttentionContext::per_image())
            .unwrap();
        let one = ImageBatch::new(1, 8, 12, 2, x.image(1).to_vec()).unwrap();
        let single = net
            .predict(&one, LEVEL, &p, &mut AttentionContext::per_image())
            .unwrap();
        assert_eq!(all.image(1), &single.data[..]);
    }

    #[test]
    fn lipschitz_probe() {
        let net = ToyUnet::seeded(4, 9).unwrap();
        let x = input(1, 16, 16, 4, 1);
        let mut r = rng::stream(2, &[]);
        let p = embed_prompt("probe");
        let fx = net
            .predict(&x, LEVEL, &p, &mut AttentionContext::per_image())
            .unwrap();
        for _ in 0..5 {
            let delta: Vec<f32> = rng::normal_vec(&mut r, x.data.len())
                .into_iter()
                .map(|v| v * 1e-3)
                .collect();
            let xd = ImageBatch::new(
                1,
                16,
                16,
                4,
                x.data.iter().zip(&delta).map(|(a, b)| a + b).collect(),
            )
            .unwrap();
            let fxd = net
                .predict(&xd, LEVEL, &p, &mut AttentionContext::per_image())
                .unwrap();
            let num: f64 = fx
                .data
                .iter()
                .zip(&fxd.data)
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum();
            let den: f64 = delta.iter().map(|d| (*d as f64).powi(2)).sum();
            assert!((num / den).sqrt() < 1e3);
        }
    }

    #[test]
    fn capture_and_inject_through_the_network() {
        let net = ToyUnet::seeded(4, 4).unwrap();
        let x = input(6, 8, 8, 4, 6);
        let p = embed_prompt("source");
        let sets = keyframe_sets(6);
        let mut cache = AttentionCache::new();
        let plain = net
            .predict(&x, LEVEL, &p, &mut AttentionContext::extended(&sets))
            .unwrap();
        let cap = net
            .predict(
                &x,
                LEVEL,
                &p,
                &mut AttentionContext::extended(&sets).with_cache(
                    10,
                    CacheAccess::Capture(&mut cache),
                    LayerSelection::All,
                ),
            )
            .unwrap();
        assert_eq!(plain.data, cap.data);
        assert_eq!(cache.len(), 12);
        let inj = net
            .predict(
                &x,
                LEVEL,
                &p,
                &mut AttentionContext::extended(&sets).with_cache(
                    10,
                    CacheAccess::Inject(&cache),
                    LayerSelection::All,
                ),
            )
            .unwrap();
        assert_eq!(plain.data, inj.data);
        let other = embed_prompt("target");
        let free = net
            .predict(&x, LEVEL, &other, &mut AttentionContext::extended(&sets))
            .unwrap();
        assert_ne!(free.data, plain.data);
        let wrong_step = net.predict(
            &x,
            LEVEL,
            &p,
            &mut AttentionContext::extended(&sets).with_cache(
                11,
                CacheAccess::Inject(&cache),
                LayerSelection::All,
            ),
        );
        assert!(matches!(wrong_step, Err(Error::CacheMiss { step: 11, .. })));
    }
}
