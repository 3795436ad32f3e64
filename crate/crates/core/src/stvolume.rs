//! Space-time volumes and their planar slices.
//!
//! A [`VideoVolume`] stores samples frame-major in `(t, y, x, c)` order, so an
//! x-y slice (a frame) is one contiguous run while y-t and x-t slices are
//! strided gathers.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{shape_err, Error, Result};
use crate::rng;

/// Which space the samples live in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    /// Pixel values normalized to `[-1, 1]`.
    Pixel,
    /// Codec latents; any finite value.
    Latent,
}

/// Extents of a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VolumeDims {
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl VolumeDims {
    pub fn new(n_frames: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            n_frames,
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.n_frames * self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }
}

/// The `(x, y, t)` space-time volume of a video, in pixel or latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoVolume {
    dims: VolumeDims,
    space: Space,
    data: Vec<f32>,
}

impl VideoVolume {
    /// Validates geometry, finiteness and (for pixel space) the `[-1, 1]` range.
    pub fn new(dims: VolumeDims, space: Space, data: Vec<f32>) -> Result<Self> {
        if dims.n_frames == 0 || dims.height == 0 || dims.width == 0 || dims.channels == 0 {
            return Err(shape_err!("volume extents must be non-zero, got {dims:?}"));
        }
        if data.len() != dims.len() {
            return Err(shape_err!(
                "volume {dims:?} needs {} samples, got {}",
                dims.len(),
                data.len()
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite sample at flat index {i}")));
        }
        if space == Space::Pixel {
            if let Some(i) = data.iter().position(|v| !(-1.0..=1.0).contains(v)) {
                return Err(Error::Input(format!(
                    "pixel sample {} at flat index {i} outside [-1, 1]",
                    data[i]
                )));
            }
        }
        Ok(Self { dims, space, data })
    }

    pub fn zeros(dims: VolumeDims, space: Space) -> Self {
        Self {
            dims,
            space,
            data: vec![0.0; dims.len()],
        }
    }

    /// Builds a volume from `f(t, y, x, c)`.
    pub fn from_fn(
        dims: VolumeDims,
        space: Space,
        mut f: impl FnMut(usize, usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.len());
        for t in 0..dims.n_frames {
            for y in 0..dims.height {
                for x in 0..dims.width {
                    for c in 0..dims.channels {
                        data.push(f(t, y, x, c));
                    }
                }
            }
        }
        Self::new(dims, space, data)
    }

    /// Stacks equally-shaped frames (each `height * width * channels`).
    pub fn from_frames(
        frames: &[Vec<f32>],
        height: usize,
        width: usize,
        channels: usize,
        space: Space,
    ) -> Result<Self> {
        let dims = VolumeDims::new(frames.len(), height, width, channels);
        let mut data = Vec::with_capacity(dims.len());
        for (t, f) in frames.iter().enumerate() {
            if f.len() != dims.frame_len() {
                return Err(shape_err!(
                    "frame {t} has {} samples, expected {}",
                    f.len(),
                    dims.frame_len()
                ));
            }
            data.extend_from_slice(f);
        }
        Self::new(dims, space, data)
    }

    pub fn dims(&self) -> VolumeDims {
        self.dims
    }
    pub fn n_frames(&self) -> usize {
        self.dims.n_frames
    }
    pub fn height(&self) -> usize {
        self.dims.height
    }
    pub fn width(&self) -> usize {
        self.dims.width
    }
    pub fn channels(&self) -> usize {
        self.dims.channels
    }
    pub fn space(&self) -> Space {
        self.space
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, t: usize, y: usize, x: usize, c: usize) -> usize {
        ((t * self.dims.height + y) * self.dims.width + x) * self.dims.channels + c
    }

    #[inline]
    pub fn get(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(t, y, x, c)]
    }

    /// Samples of frame `t`, contiguous.
    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.dims.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    /// Same geometry, new samples (latent space; validated as such).
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::new(self.dims, Space::Latent, data)
    }

    /// Re-tags the volume's space, validating the pixel range if needed.
    pub fn into_space(self, space: Space) -> Result<Self> {
        Self::new(self.dims, space, self.data)
    }

    /// Frames `start..start + len` as a new volume.
    pub fn select_frames(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.dims.n_frames {
            return Err(Error::OutOfBounds {
                index: start + len,
                extent: self.dims.n_frames,
            });
        }
        let n = self.dims.frame_len();
        Ok(Self {
            dims: VolumeDims {
                n_frames: len,
                ..self.dims
            },
            space: self.space,
            data: self.data[start * n..(start + len) * n].to_vec(),
        })
    }

    /// Frames picked by index, in order.
    pub fn gather_frames(&self, indices: &[usize]) -> Result<Self> {
        let n = self.dims.frame_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &t in indices {
            if t >= self.dims.n_frames {
                return Err(Error::OutOfBounds {
                    index: t,
                    extent: self.dims.n_frames,
                });
            }
            data.extend_from_slice(self.frame(t));
        }
        Self::new(
            VolumeDims {
                n_frames: indices.len(),
                ..self.dims
            },
            self.space,
            data,
        )
    }

    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// All frames as an image batch.
    pub fn to_frames(&self) -> ImageBatch {
        ImageBatch {
            n: self.dims.n_frames,
            height: self.dims.height,
            width: self.dims.width,
            channels: self.dims.channels,
            data: self.data.clone(),
        }
    }

    /// Every slice along `axis` packed as an image batch (one image per index).
    pub fn slice_batch(&self, axis: Axis) -> ImageBatch {
        let d = self.dims;
        let (rows, cols) = axis.slice_shape(d);
        let count = axis.extent(d);
        let c = d.channels;
        let mut data = vec![0.0; count * rows * cols * c];
        for i in 0..count {
            let base = i * rows * cols * c;
            for r in 0..rows {
                for q in 0..cols {
                    let (t, y, x) = axis.volume_coords(i, r, q);
                    let src = self.index(t, y, x, 0);
                    let dst = base + (r * cols + q) * c;
                    data[dst..dst + c].copy_from_slice(&self.data[src..src + c]);
                }
            }
        }
        ImageBatch {
            n: count,
            height: rows,
            width: cols,
            channels: c,
            data,
        }
    }

    /// Inverse of [`Self::slice_batch`].
    pub fn from_slice_batch(
        batch: &ImageBatch,
        axis: Axis,
        dims: VolumeDims,
        space: Space,
    ) -> Result<Self> {
        let (rows, cols) = axis.slice_shape(dims);
        if batch.n != axis.extent(dims)
            || batch.height != rows
            || batch.width != cols
            || batch.channels != dims.channels
        {
            return Err(shape_err!(
                "slice batch {}x{}x{}x{} does not match {axis:?} slices of {dims:?}",
                batch.n,
                batch.height,
                batch.width,
                batch.channels
            ));
        }
        let c = dims.channels;
        let mut data = vec![0.0; dims.len()];
        for i in 0..batch.n {
            let base = i * rows * cols * c;
            for r in 0..rows {
                for q in 0..cols {
                    let (t, y, x) = axis.volume_coords(i, r, q);
                    let dst = ((t * dims.height + y) * dims.width + x) * c;
                    let src = base + (r * cols + q) * c;
                    data[dst..dst + c].copy_from_slice(&batch.data[src..src + c]);
                }
            }
        }
        Self::new(dims, space, data)
    }
}

/// A batch of `n` images in NHWC layout. Used for frames, slices and
/// intermediate feature maps alike.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ImageBatch {
    pub fn zeros(n: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            n,
            height,
            width,
            channels,
            data: vec![0.0; n * height * width * channels],
        }
    }

    pub fn new(
        n: usize,
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if data.len() != n * height * width * channels {
            return Err(shape_err!(
                "batch {n}x{height}x{width}x{channels} needs {} samples, got {}",
                n * height * width * channels,
                data.len()
            ));
        }
        Ok(Self {
            n,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.n == other.n
            && self.height == other.height
            && self.width == other.width
            && self.channels == other.channels
    }

    pub fn from_slice(s: &Slice2D) -> Self {
        Self {
            n: 1,
            height: s.rows,
            width: s.cols,
            channels: s.channels,
            data: s.data.clone(),
        }
    }
}

/// Slicing plane. `XY` planes are frames; `YT` and `XT` planes are
/// spatiotemporal slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    XY,
    YT,
    XT,
}

impl Axis {
    /// Number of slices along this axis (the extent of the remaining axis).
    pub fn extent(self, d: VolumeDims) -> usize {
        match self {
            Axis::XY => d.n_frames,
            Axis::YT => d.width,
            Axis::XT => d.height,
        }
    }

    /// `(rows, cols)` of one slice.
    pub fn slice_shape(self, d: VolumeDims) -> (usize, usize) {
        match self {
            Axis::XY => (d.height, d.width),
            Axis::YT => (d.n_frames, d.height),
            Axis::XT => (d.n_frames, d.width),
        }
    }

    /// Maps `(slice index, row, col)` to volume `(t, y, x)`.
    #[inline]
    fn volume_coords(self, index: usize, r: usize, q: usize) -> (usize, usize, usize) {
        match self {
            Axis::XY => (index, r, q),
            Axis::YT => (r, q, index),
            Axis::XT => (r, index, q),
        }
    }
}

/// One plane of a volume: `rows x cols x channels`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2D {
    pub axis: Axis,
    pub index: usize,
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Slice2D {
    #[inline]
    pub fn get(&self, r: usize, q: usize, c: usize) -> f32 {
        self.data[(r * self.cols + q) * self.channels + c]
    }
}

/// Extracts plane `index` along `axis`.
pub fn slice(vol: &VideoVolume, axis: Axis, index: usize) -> Result<Slice2D> {
    let d = vol.dims();
    let extent = axis.extent(d);
    if index >= extent {
        return Err(Error::OutOfBounds { index, extent });
    }
    let (rows, cols) = axis.slice_shape(d);
    let c = d.channels;
    let data = if axis == Axis::XY {
        vol.frame(index).to_vec()
    } else {
        let mut data = Vec::with_capacity(rows * cols * c);
        for r in 0..rows {
            for q in 0..cols {
                let (t, y, x) = axis.volume_coords(index, r, q);
                let s = vol.index(t, y, x, 0);
                data.extend_from_slice(&vol.data()[s..s + c]);
            }
        }
        data
    };
    Ok(Slice2D {
        axis,
        index,
        rows,
        cols,
        channels: c,
        data,
    })
}

/// Every plane along `axis`, in index order.
pub fn slice_all(vol: &VideoVolume, axis: Axis) -> Vec<Slice2D> {
    (0..axis.extent(vol.dims()))
        .map(|i| slice(vol, axis, i).expect("index within extent"))
        .collect()
}

/// Rebuilds a volume from a complete set of planes along `axis` (any order).
pub fn assemble(
    slices: &[Slice2D],
    axis: Axis,
    dims: VolumeDims,
    space: Space,
) -> Result<VideoVolume> {
    let extent = axis.extent(dims);
    let (rows, cols) = axis.slice_shape(dims);
    let mut seen = vec![false; extent];
    let mut data = vec![0.0; dims.len()];
    let c = dims.channels;
    for s in slices {
        if s.axis != axis {
            return Err(Error::Assembly(format!(
                "slice along {:?} in a {axis:?} assembly",
                s.axis
            )));
        }
        if s.rows != rows || s.cols != cols || s.channels != c || s.data.len() != rows * cols * c {
            return Err(Error::Assembly(format!(
                "slice {} has shape {}x{}x{}, expected {rows}x{cols}x{c}",
                s.index, s.rows, s.cols, s.channels
            )));
        }
        if s.index >= extent {
            return Err(Error::OutOfBounds {
                index: s.index,
                extent,
            });
        }
        if core::mem::replace(&mut seen[s.index], true) {
            return Err(Error::Assembly(format!(
                "duplicate slice index {}",
                s.index
            )));
        }
        for r in 0..rows {
            for q in 0..cols {
                let (t, y, x) = axis.volume_coords(s.index, r, q);
                let dst = ((t * dims.height + y) * dims.width + x) * c;
                let src = (r * cols + q) * c;
                data[dst..dst + c].copy_from_slice(&s.data[src..src + c]);
            }
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Assembly(format!("missing slice index {missing}")));
    }
    VideoVolume::new(dims, space, data)
}

/// Randomly rearranges the pixel positions of a plane. All channels of a
/// pixel move together; the same seed always yields the same permutation.
pub fn permute_pixels(frame: &Slice2D, seed: u64) -> Slice2D {
    let n = frame.rows * frame.cols;
    let c = frame.channels;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[0x7065_726d]));
    let mut data = Vec::with_capacity(frame.data.len());
    for &src in &order {
        data.extend_from_slice(&frame.data[src * c..(src + 1) * c]);
    }
    Slice2D {
        data,
        ..frame.clone()
    }
}

/// How overlapping segment predictions are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BlendMode {
    /// Weights sum to one (a convex average).
    #[default]
    Mean,
    /// The same ramps rescaled so squared weights sum to one, which preserves
    /// unit variance when the segment predictions are independent.
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn contains(&self, frame: usize) -> bool {
        frame >= self.start && frame < self.end()
    }
}

/// Overlapping fixed-length windows covering `[0, n_frames)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentPlan {
    pub n_frames: usize,
    pub segments: Vec<Segment>,
    pub mode: BlendMode,
}

/// Covers `n_frames` with the fewest `seg_len` windows such that consecutive
/// windows overlap by at least one frame, spreading the overlap evenly.
pub fn segment_plan(n_frames: usize, seg_len: usize, mode: BlendMode) -> Result<SegmentPlan> {
    if seg_len == 0 {
        return Err(Error::Config("segment length must be positive".into()));
    }
    if n_frames < seg_len {
        return Err(Error::Input(format!(
            "{n_frames} frames is shorter than the {seg_len}-frame segment; interpolate first"
        )));
    }
    let spare = n_frames - seg_len;
    let count = if spare == 0 {
        1
    } else if seg_len == 1 {
        return Err(Error::Config("one-frame segments cannot overlap".into()));
    } else {
        1 + spare.div_ceil(seg_len - 1)
    };
    let segments = (0..count)
        .map(|i| {
            let start = if count == 1 {
                0
            } else {
                // round(i * spare / (count - 1))
                (2 * i * spare + (count - 1)) / (2 * (count - 1))
            };
            Segment {
                start,
                len: seg_len,
            }
        })
        .collect();
    Ok(SegmentPlan {
        n_frames,
        segments,
        mode,
    })
}

impl SegmentPlan {
    /// Blend weights of every segment covering `frame`, as
    /// `(segment index, weight)`.
    ///
    /// Inside an overlap the incoming segment ramps up linearly and the
    /// outgoing one ramps down, so in `Mean` mode the weights are a partition
    /// of unity; `Independent` rescales them to unit squared sum.
    pub fn frame_weights(&self, frame: usize) -> Vec<(usize, f64)> {
        let segs = &self.segments;
        let mut raw: Vec<(usize, f64)> = Vec::with_capacity(2);
        for (i, s) in segs.iter().enumerate() {
            if !s.contains(frame) {
                continue;
            }
            let mut w = 1.0;
            if i > 0 && frame < segs[i - 1].end() && segs[i - 1].end() > s.start {
                let overlap = (segs[i - 1].end() - s.start) as f64;
                w *= (frame - s.start + 1) as f64 / (overlap + 1.0);
            }
            if i + 1 < segs.len() && frame >= segs[i + 1].start && s.end() > segs[i + 1].start {
                let overlap = (s.end() - segs[i + 1].start) as f64;
                w *= (s.end() - frame) as f64 / (overlap + 1.0);
            }
            raw.push((i, w));
        }
        let norm = match self.mode {
            BlendMode::Mean => raw.iter().map(|(_, w)| w).sum::<f64>(),
            BlendMode::Independent => {
                crate::math::sqrt(raw.iter().map(|(_, w)| w * w).sum::<f64>())
            }
        };
        raw.into_iter().map(|(i, w)| (i, w / norm)).collect()
    }
}

/// Merges per-segment volumes (each `seg_len` frames, in plan order) into one
/// `n_frames` volume using [`SegmentPlan::frame_weights`].
pub fn blend_segments(preds: &[VideoVolume], plan: &SegmentPlan) -> Result<VideoVolume> {
    if preds.len() != plan.segments.len() || preds.is_empty() {
        return Err(shape_err!(
            "{} predictions for a {}-segment plan",
            preds.len(),
            plan.segments.len()
        ));
    }
    let first = preds[0].dims();
    for (p, s) in preds.iter().zip(&plan.segments) {
        let d = p.dims();
        if d.n_frames != s.len
            || d.height != first.height
            || d.width != first.width
            || d.channels != first.channels
        {
            return Err(shape_err!("prediction {d:?} does not fit segment {s:?}"));
        }
    }
    let dims = VolumeDims {
        n_frames: plan.n_frames,
        ..first
    };
    let flen = dims.frame_len();
    let mut data = vec![0.0f32; dims.len()];
    let mut acc = vec![0.0f64; flen];
    for f in 0..plan.n_frames {
        let weights = plan.frame_weights(f);
        if weights.is_empty() {
            return Err(shape_err!("frame {f} is not covered by the plan"));
        }
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (i, w) in weights {
            let local = f - plan.segments[i].start;
            for (a, &v) in acc.iter_mut().zip(preds[i].frame(local)) {
                *a += w * v as f64;
            }
        }
        for (d, a) in data[f * flen..(f + 1) * flen].iter_mut().zip(&acc) {
            *d = *a as f32;
        }
    }
    VideoVolume::new(dims, Space::Latent, data)
}
