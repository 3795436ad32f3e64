//! Self-attention, extended (cross-frame) attention, key-frame selection and
//! the capture / injection cache for source-video queries and keys.
//!
//! Extended attention lets each frame's queries attend to the keys and values
//! of a small set of key-frames: the frame itself, one global frame in the
//! middle of the video, and two local frames from the 6-frame window holding
//! the frame. During inversion the queries and keys of selected layers are
//! captured per `(step, layer, frame)`; during sampling they can be injected
//! back so the target pass recomputes the source attention map against its
//! own values.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::math::{fast_expf, sqrtf};
use crate::nn::{matmul, matmul_bt};
use crate::par;
use crate::rng;

/// Length of the processing window that local key-frames are drawn from.
pub const WINDOW: usize = 6;

/// A row-major `rows x dim` matrix of token vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokens {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl Tokens {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(shape_err!(
                "{rows}x{dim} tokens need {} values, got {}",
                rows * dim,
                data.len()
            ));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn random(rows: usize, dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[]);
        Self {
            rows,
            dim,
            data: rng::normal_vec(&mut r, rows * dim),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Row-wise concatenation.
    pub fn concat(parts: &[&Tokens]) -> Result<Self> {
        let dim = parts.first().map(|t| t.dim).unwrap_or(0);
        if parts.iter().any(|t| t.dim != dim) {
            return Err(shape_err!("cannot concatenate tokens of different widths"));
        }
        let mut data = Vec::with_capacity(parts.iter().map(|t| t.data.len()).sum());
        parts.iter().for_each(|t| data.extend_from_slice(&t.data));
        Ok(Self {
            rows: parts.iter().map(|t| t.rows).sum(),
            dim,
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Queries, keys and values of one attention evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensors {
    pub q: Tokens,
    pub k: Tokens,
    pub v: Tokens,
}

/// Row-stochastic `softmax(Q K^T / sqrt(d))`.
pub fn attention_weights(q: &Tokens, k: &Tokens) -> Result<Tokens> {
    if q.dim != k.dim {
        return Err(shape_err!("query width {} != key width {}", q.dim, k.dim));
    }
    if k.rows == 0 {
        return Err(shape_err!("attention needs at least one key"));
    }
    let mut s = matmul_bt(&q.data, &k.data, q.rows, q.dim, k.rows);
    softmax_rows(&mut s, k.rows, 1.0 / sqrtf(q.dim as f32));
    Tokens::new(q.rows, k.rows, s)
}

fn softmax_rows(s: &mut [f32], width: usize, scale: f32) {
    for row in s.chunks_mut(width) {
        let m = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) * scale;
        row.iter_mut().for_each(|v| *v = fast_expf(*v * scale - m));
        let inv = 1.0 / row.iter().sum::<f32>();
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// `softmax(Q K^T / sqrt(d)) V` on flat buffers.
pub(crate) fn attend(
    q: &[f32],
    n_q: usize,
    k: &[f32],
    v: &[f32],
    n_k: usize,
    d: usize,
    d_v: usize,
) -> Vec<f32> {
    let mut s = matmul_bt(q, k, n_q, d, n_k);
    softmax_rows(&mut s, n_k, 1.0 / sqrtf(d as f32));
    matmul(&s, v, n_q, n_k, d_v)
}

/// Scaled dot-product attention of one token set.
pub fn self_attention(at: &AttentionTensors) -> Result<Tokens> {
    let AttentionTensors { q, k, v } = at;
    if q.dim != k.dim || k.rows != v.rows {
        return Err(shape_err!(
            "incompatible attention tensors: Q {}x{}, K {}x{}, V {}x{}",
            q.rows,
            q.dim,
            k.rows,
            k.dim,
            v.rows,
            v.dim
        ));
    }
    if k.rows == 0 {
        return Err(shape_err!("attention needs at least one key"));
    }
    Tokens::new(
        q.rows,
        v.dim,
        attend(&q.data, q.rows, &k.data, &v.data, k.rows, q.dim, v.dim),
    )
}

/// Learned query / key / value projections (`d_in x d`, `d_in x d`,
/// `d_in x d_v`).
#[derive(Debug, Clone, PartialEq)]
pub struct Projections {
    pub w_q: Tokens,
    pub w_k: Tokens,
    pub w_v: Tokens,
}

impl Projections {
    /// Gaussian projections (std `1 / sqrt(d_in)`) for tests and examples.
    pub fn seeded(d_in: usize, d: usize, d_v: usize, seed: u64) -> Self {
        let scale = 1.0 / sqrtf(d_in as f32);
        let mk = |cols, tag| {
            let mut t = Tokens::random(d_in, cols, rng::derive_seed(seed, &[tag]));
            t.data.iter_mut().for_each(|v| *v *= scale);
            t
        };
        Self {
            w_q: mk(d, 1),
            w_k: mk(d, 2),
            w_v: mk(d_v, 3),
        }
    }

    fn project(w: &Tokens, z: &Tokens) -> Result<Tokens> {
        if z.dim != w.rows {
            return Err(shape_err!(
                "latent width {} != projection input {}",
                z.dim,
                w.rows
            ));
        }
        Tokens::new(
            z.rows,
            w.dim,
            matmul(&z.data, &w.data, z.rows, z.dim, w.dim),
        )
    }

    /// Q from `frame`; K and V from the concatenation of `keyframes`.
    pub fn tensors(&self, frame: &Tokens, keyframes: &[&Tokens]) -> Result<AttentionTensors> {
        if keyframes.is_empty() {
            return Err(shape_err!(
                "extended attention needs at least one key-frame"
            ));
        }
        if keyframes.iter().any(|k| k.dim != frame.dim) {
            return Err(shape_err!(
                "key-frame latents differ in width from the frame"
            ));
        }
        let all = Tokens::concat(keyframes)?;
        Ok(AttentionTensors {
            q: Self::project(&self.w_q, frame)?,
            k: Self::project(&self.w_k, &all)?,
            v: Self::project(&self.w_v, &all)?,
        })
    }
}

/// Attention of `frame`'s queries over keys and values gathered from all
/// `keyframes` (include the frame itself to reproduce the usual set).
pub fn extended_attention(
    frame: &Tokens,
    keyframes: &[&Tokens],
    proj: &Projections,
) -> Result<Tokens> {
    self_attention(&proj.tensors(frame, keyframes)?)
}

/// Key-frames for one 6-frame processing window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyFramePlan {
    pub global_frame: usize,
    pub local_frames: [usize; 2],
    pub window_start: usize,
    pub window_len: usize,
}

/// Global frame at the middle of the video; local frames at the 2nd and 5th
/// positions of the window (clamped into the video for a short tail window).
pub fn select_keyframes(window_start: usize, n_frames: usize) -> KeyFramePlan {
    let n = n_frames.max(1);
    let start = window_start.min(n - 1);
    let last = n - 1;
    KeyFramePlan {
        global_frame: n / 2,
        local_frames: [(start + 1).min(last), (start + 4).min(last)],
        window_start: start,
        window_len: WINDOW.min(n - start),
    }
}

impl KeyFramePlan {
    /// `[frame, global, local, local]` without repeats, in that order.
    pub fn key_set(&self, frame: usize) -> Vec<usize> {
        let mut set = Vec::with_capacity(4);
        for f in [
            frame,
            self.global_frame,
            self.local_frames[0],
            self.local_frames[1],
        ] {
            if !set.contains(&f) {
                set.push(f);
            }
        }
        set
    }
}

/// Key sets of every frame under consecutive non-overlapping windows.
pub fn keyframe_sets(n_frames: usize) -> Vec<Vec<usize>> {
    (0..n_frames)
        .map(|f| select_keyframes(f - f % WINDOW, n_frames).key_set(f))
        .collect()
}

pub type LayerId = u16;

/// Identity of one attention layer inside a denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionLayer {
    pub id: LayerId,
    /// Whether the layer sits on the decoder (upsampling) path.
    pub up_path: bool,
}

/// Which attention layers take part in capture and injection.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum LayerSelection {
    #[default]
    UpPath,
    All,
    Only(Vec<LayerId>),
}

impl LayerSelection {
    pub fn includes(&self, layer: AttentionLayer) -> bool {
        match self {
            LayerSelection::UpPath => layer.up_path,
            LayerSelection::All => true,
            LayerSelection::Only(ids) => ids.contains(&layer.id),
        }
    }
}

/// Captured queries and keys of one frame at one layer and step.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedQk {
    pub tokens: usize,
    pub dim: usize,
    pub q: Vec<f32>,
    pub k: Vec<f32>,
}

/// `(step, layer, frame) -> (Q, K)` store. Entries are write-once.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionCache {
    entries: BTreeMap<(usize, LayerId, usize), CachedQk>,
}

impl AttentionCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn capture(
        &mut self,
        step: usize,
        layer: LayerId,
        frame: usize,
        entry: CachedQk,
    ) -> Result<()> {
        if entry.q.len() != entry.tokens * entry.dim || entry.k.len() != entry.tokens * entry.dim {
            return Err(shape_err!(
                "cached Q/K do not match {}x{}",
                entry.tokens,
                entry.dim
            ));
        }
        match self.entries.entry((step, layer, frame)) {
            alloc::collections::btree_map::Entry::Occupied(_) => Err(Error::Input(alloc::format!(
                "attention already captured for step {step}, layer {layer}, frame {frame}"
            ))),
            alloc::collections::btree_map::Entry::Vacant(v) => {
                v.insert(entry);
                Ok(())
            }
        }
    }

    /// The stored entry; a miss is an error.
    pub fn inject(&self, step: usize, layer: LayerId, frame: usize) -> Result<&CachedQk> {
        self.entries
            .get(&(step, layer, frame))
            .ok_or(Error::CacheMiss { step, layer, frame })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, LayerId, usize), &CachedQk)> {
        self.entries.iter()
    }
}

/// What the cache does during a denoiser call.
#[derive(Debug, Default)]
pub enum CacheAccess<'a> {
    #[default]
    Off,
    Capture(&'a mut AttentionCache),
    Inject(&'a AttentionCache),
}

/// Per-call attention behaviour handed to a denoiser: plain per-image
/// attention or extended attention over key sets, plus optional cache access.
///
/// Images in the batch are identified by their batch index, which is the
/// frame index when the batch holds a whole video.
#[derive(Debug, Default)]
pub struct AttentionContext<'a> {
    key_sets: Option<&'a [Vec<usize>]>,
    step: usize,
    cache: CacheAccess<'a>,
    layers: LayerSelection,
}

impl<'a> AttentionContext<'a> {
    /// Every image attends only to itself; no cache.
    pub fn per_image() -> Self {
        Self::default()
    }

    /// Image `i` attends to the images listed in `key_sets[i]`.
    pub fn extended(key_sets: &'a [Vec<usize>]) -> Self {
        Self {
            key_sets: Some(key_sets),
            ..Self::default()
        }
    }

    pub fn with_cache(
        mut self,
        step: usize,
        cache: CacheAccess<'a>,
        layers: LayerSelection,
    ) -> Self {
        self.step = step;
        self.cache = cache;
        self.layers = layers;
        self
    }

    /// Runs one attention layer over a batch of `n` images, each with
    /// `tokens` queries/keys of width `d` and values of width `d_v`.
    /// Returns `n * tokens x d_v` outputs.
    #[allow(clippy::too_many_arguments)]
    pub fn attend(
        &mut self,
        layer: AttentionLayer,
        q: &[f32],
        k: &[f32],
        v: &[f32],
        n: usize,
        tokens: usize,
        d: usize,
        d_v: usize,
    ) -> Result<Vec<f32>> {
        if q.len() != n * tokens * d || k.len() != n * tokens * d || v.len() != n * tokens * d_v {
            return Err(shape_err!(
                "attention inputs do not match {n} images of {tokens}x{d}"
            ));
        }
        let active = self.layers.includes(layer);
        let mut injected: Option<(Vec<f32>, Vec<f32>)> = None;
        match &mut self.cache {
            CacheAccess::Capture(cache) if active => {
                let span = tokens * d;
                for i in 0..n {
                    cache.capture(
                        self.step,
                        layer.id,
                        i,
                        CachedQk {
                            tokens,
                            dim: d,
                            q: q[i * span..(i + 1) * span].to_vec(),
                            k: k[i * span..(i + 1) * span].to_vec(),
                        },
                    )?;
                }
            }
            CacheAccess::Inject(cache) if active => {
                let mut qs = Vec::with_capacity(q.len());
                let mut ks = Vec::with_capacity(k.len());
                for i in 0..n {
                    let e = cache.inject(self.step, layer.id, i)?;
                    if e.tokens != tokens || e.dim != d {
                        return Err(shape_err!(
                            "cached attention {}x{} does not fit layer {} ({tokens}x{d})",
                            e.tokens,
                            e.dim,
                            layer.id
                        ));
                    }
                    qs.extend_from_slice(&e.q);
                    ks.extend_from_slice(&e.k);
                }
                injected = Some((qs, ks));
            }
            _ => {}
        }
        let (q, k) = match &injected {
            Some((qs, ks)) => (qs.as_slice(), ks.as_slice()),
            None => (q, k),
        };
        if let Some(sets) = self.key_sets {
            if sets.len() != n {
                return Err(shape_err!("{} key sets for {n} images", sets.len()));
            }
            if let Some(bad) = sets.iter().flatten().find(|&&j| j >= n) {
                return Err(Error::OutOfBounds {
                    index: *bad,
                    extent: n,
                });
            }
        }
        let key_sets = self.key_sets;
        let outs = par::map(n, |i| {
            let qi = &q[i * tokens * d..(i + 1) * tokens * d];
            let own = [i];
            let set: &[usize] = match key_sets {
                Some(s) => &s[i],
                None => &own,
            };
            if set.len() == 1 {
                let j = set[0];
                return attend(
                    qi,
                    tokens,
                    &k[j * tokens * d..(j + 1) * tokens * d],
                    &v[j * tokens * d_v..(j + 1) * tokens * d_v],
                    tokens,
                    d,
                    d_v,
                );
            }
            let mut ke = Vec::with_capacity(set.len() * tokens * d);
            let mut ve = Vec::with_capacity(set.len() * tokens * d_v);
            for &j in set {
                ke.extend_from_slice(&k[j * tokens * d..(j + 1) * tokens * d]);
                ve.extend_from_slice(&v[j * tokens * d_v..(j + 1) * tokens * d_v]);
            }
            attend(qi, tokens, &ke, &ve, set.len() * tokens, d, d_v)
        });
        Ok(outs.concat())
    }
}
