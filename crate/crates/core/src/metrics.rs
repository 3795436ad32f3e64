//! Motion-based edit evaluation.
//!
//! Dense flow comes from Horn–Schunck on grayscale intensities in `0..=255`.
//! The flow error compares the forward flows of a source and an edited video
//! over the source pixels whose forward and backward flows agree.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::math::sqrt;
use crate::par;
use crate::rng;
use crate::stvolume::VideoVolume;

/// Per-pixel displacement `(u, v)` in pixels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            u: vec![0.0; height * width],
            v: vec![0.0; height * width],
        }
    }

    pub fn uniform(height: usize, width: usize, u: f64, v: f64) -> Self {
        Self {
            height,
            width,
            u: vec![u; height * width],
            v: vec![v; height * width],
        }
    }

    /// Mean displacement length.
    pub fn mean_magnitude(&self) -> f64 {
        let n = self.u.len().max(1) as f64;
        self.u
            .iter()
            .zip(&self.v)
            .map(|(a, b)| sqrt(a * a + b * b))
            .sum::<f64>()
            / n
    }

    /// Bilinear sample at a fractional position; `None` outside the grid.
    pub fn sample(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let (w, h) = (self.width as f64, self.height as f64);
        if !(x >= 0.0 && y >= 0.0 && x <= w - 1.0 && y <= h - 1.0) {
            return None;
        }
        let (x0, y0) = (x as usize, y as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let lerp = |f: &[f64]| {
            let top = f[y0 * self.width + x0] * (1.0 - fx) + f[y0 * self.width + x1] * fx;
            let bot = f[y1 * self.width + x0] * (1.0 - fx) + f[y1 * self.width + x1] * fx;
            top * (1.0 - fy) + bot * fy
        };
        Some((lerp(&self.u), lerp(&self.v)))
    }
}

/// Horn–Schunck settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowParams {
    /// Smoothness weight; the energy uses `alpha^2`.
    pub alpha: f64,
    pub iterations: usize,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            iterations: 200,
        }
    }
}

/// A grayscale image.
#[derive(Debug, Clone, PartialEq)]
pub struct Gray {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Gray {
    /// Channel mean of an interleaved frame in `[-1, 1]`, mapped to `0..=255`.
    pub fn from_frame(frame: &[f32], height: usize, width: usize, channels: usize) -> Result<Self> {
        if channels == 0 || frame.len() != height * width * channels {
            return Err(shape_err!(
                "frame of {} values is not {height}x{width}x{channels}",
                frame.len()
            ));
        }
        let data = frame
            .chunks_exact(channels)
            .map(|px| (px.iter().map(|&v| v as f64).sum::<f64>() / channels as f64 + 1.0) * 127.5)
            .collect();
        Ok(Self {
            height,
            width,
            data,
        })
    }

    fn at(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.data[y * self.width + x]
    }
}

/// Spatial and temporal derivatives of a frame pair.
struct Gradients {
    ix: Vec<f64>,
    iy: Vec<f64>,
    it: Vec<f64>,
}

fn gradients(a: &Gray, b: &Gray) -> Gradients {
    let (h, w) = (a.height, a.width);
    let mut g = Gradients {
        ix: vec![0.0; h * w],
        iy: vec![0.0; h * w],
        it: vec![0.0; h * w],
    };
    for y in 0..h {
        for x in 0..w {
            let (yi, xi) = (y as isize, x as isize);
            let dx = |f: &Gray| 0.5 * (f.at(yi, xi + 1) - f.at(yi, xi - 1));
            let dy = |f: &Gray| 0.5 * (f.at(yi + 1, xi) - f.at(yi - 1, xi));
            let p = y * w + x;
            g.ix[p] = 0.5 * (dx(a) + dx(b));
            g.iy[p] = 0.5 * (dy(a) + dy(b));
            g.it[p] = b.data[p] - a.data[p];
        }
    }
    g
}

fn neighbours(p: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (y, x) = (p / w, p % w);
    [
        (x > 0).then(|| p - 1),
        (x + 1 < w).then(|| p + 1),
        (y > 0).then(|| p - w),
        (y + 1 < h).then(|| p + w),
    ]
    .into_iter()
    .flatten()
}

fn check_pair(a: &Gray, b: &Gray) -> Result<()> {
    if a.height != b.height
        || a.width != b.width
        || a.data.len() != a.height * a.width
        || b.data.len() != a.data.len()
    {
        return Err(shape_err!(
            "frames differ: {}x{} vs {}x{}",
            a.height,
            a.width,
            b.height,
            b.width
        ));
    }
    if a.data.is_empty() {
        return Err(shape_err!("empty frame"));
    }
    Ok(())
}

/// Horn–Schunck energy `sum (Ix u + Iy v + It)^2 + alpha^2 sum |grad u|^2 + |grad v|^2`,
/// each neighbour pair counted once.
pub fn flow_energy(a: &Gray, b: &Gray, flow: &FlowField, alpha: f64) -> Result<f64> {
    check_pair(a, b)?;
    let g = gradients(a, b);
    let (h, w) = (a.height, a.width);
    let mut data = 0.0;
    let mut smooth = 0.0;
    for p in 0..h * w {
        let r = g.ix[p] * flow.u[p] + g.iy[p] * flow.v[p] + g.it[p];
        data += r * r;
        for q in neighbours(p, h, w).filter(|&q| q > p) {
            let (du, dv) = (flow.u[p] - flow.u[q], flow.v[p] - flow.v[q]);
            smooth += du * du + dv * dv;
        }
    }
    Ok(data + alpha * alpha * smooth)
}

/// Horn–Schunck flow from `a` to `b`, starting from zero.
pub fn optical_flow(a: &Gray, b: &Gray, params: FlowParams) -> Result<FlowField> {
    optical_flow_from(a, b, params, FlowField::zeros(a.height, a.width))
}

/// Horn–Schunck iterations from an initial field. Each sweep replaces every
/// pixel's `(u, v)` in turn with the exact minimiser of the energy given its
/// neighbours (Gauss–Seidel), so the energy never increases.
pub fn optical_flow_from(
    a: &Gray,
    b: &Gray,
    params: FlowParams,
    init: FlowField,
) -> Result<FlowField> {
    check_pair(a, b)?;
    let (h, w) = (a.height, a.width);
    if init.height != h || init.width != w {
        return Err(shape_err!(
            "initial flow is {}x{}, frames are {h}x{w}",
            init.height,
            init.width
        ));
    }
    let g = gradients(a, b);
    let a2 = params.alpha * params.alpha;
    let mut f = init;
    for _ in 0..params.iterations {
        for p in 0..h * w {
            let (mut su, mut sv, mut n) = (0.0, 0.0, 0.0);
            for q in neighbours(p, h, w) {
                su += f.u[q];
                sv += f.v[q];
                n += 1.0;
            }
            if n == 0.0 {
                // a single pixel has no smoothness term; take the least-norm solution
                let d = g.ix[p] * g.ix[p] + g.iy[p] * g.iy[p];
                let s = if d > 0.0 { -g.it[p] / d } else { 0.0 };
                f.u[p] = s * g.ix[p];
                f.v[p] = s * g.iy[p];
                continue;
            }
            let (ub, vb) = (su / n, sv / n);
            let k = a2 * n;
            let r = (g.ix[p] * ub + g.iy[p] * vb + g.it[p])
                / (k + g.ix[p] * g.ix[p] + g.iy[p] * g.iy[p]);
            f.u[p] = ub - g.ix[p] * r;
            f.v[p] = vb - g.iy[p] * r;
        }
    }
    Ok(f)
}

/// Source pixels whose flow survives the forward-backward check.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyMask {
    pub height: usize,
    pub width: usize,
    pub keep: Vec<bool>,
}

impl ConsistencyMask {
    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn kept_fraction(&self) -> f64 {
        self.kept() as f64 / self.keep.len().max(1) as f64
    }
}

/// Keeps `p` iff `|fwd(p) + bwd(p + fwd(p))| <= 1`, with `bwd` sampled
/// bilinearly. Targets outside the frame are dropped.
pub fn lr_mask(fwd: &FlowField, bwd: &FlowField) -> Result<ConsistencyMask> {
    if fwd.height != bwd.height || fwd.width != bwd.width {
        return Err(shape_err!(
            "flows differ: {}x{} vs {}x{}",
            fwd.height,
            fwd.width,
            bwd.height,
            bwd.width
        ));
    }
    let w = fwd.width;
    let keep = (0..fwd.u.len())
        .map(|p| {
            let (x, y) = ((p % w) as f64, (p / w) as f64);
            let (u, v) = (fwd.u[p], fwd.v[p]);
            match bwd.sample(x + u, y + v) {
                Some((bu, bv)) => (u + bu) * (u + bu) + (v + bv) * (v + bv) <= 1.0,
                None => false,
            }
        })
        .collect();
    Ok(ConsistencyMask {
        height: fwd.height,
        width: w,
        keep,
    })
}

fn gray_frames(video: &VideoVolume) -> Result<Vec<Gray>> {
    (0..video.n_frames())
        .map(|t| {
            Gray::from_frame(
                video.frame(t),
                video.height(),
                video.width(),
                video.channels(),
            )
        })
        .collect()
}

/// Forward flows `t -> t+1` for every consecutive pair.
pub fn forward_flows(video: &VideoVolume, params: FlowParams) -> Result<Vec<FlowField>> {
    let g = gray_frames(video)?;
    par::map(g.len().saturating_sub(1), |t| {
        optical_flow(&g[t], &g[t + 1], params)
    })
    .into_iter()
    .collect()
}

/// Forward-backward masks of the source video.
pub fn source_masks(
    video: &VideoVolume,
    params: FlowParams,
) -> Result<(Vec<FlowField>, Vec<ConsistencyMask>)> {
    let g = gray_frames(video)?;
    let pairs = g.len().saturating_sub(1);
    let both = par::map(pairs, |t| -> Result<_> {
        let f = optical_flow(&g[t], &g[t + 1], params)?;
        let b = optical_flow(&g[t + 1], &g[t], params)?;
        let m = lr_mask(&f, &b)?;
        Ok((f, m))
    });
    let mut flows = Vec::with_capacity(pairs);
    let mut masks = Vec::with_capacity(pairs);
    for r in both {
        let (f, m) = r?;
        flows.push(f);
        masks.push(m);
    }
    Ok((flows, masks))
}

/// Mean `|flow_src - flow_edit|` over all consistent source pixels of all
/// consecutive frame pairs.
pub fn flow_error(source: &VideoVolume, edited: &VideoVolume) -> Result<f64> {
    flow_error_with(source, edited, FlowParams::default())
}

pub fn flow_error_with(
    source: &VideoVolume,
    edited: &VideoVolume,
    params: FlowParams,
) -> Result<f64> {
    if source.dims() != edited.dims() {
        return Err(shape_err!(
            "source is {:?}, edit is {:?}",
            source.dims(),
            edited.dims()
        ));
    }
    if source.n_frames() < 2 {
        return Err(Error::Input("flow error needs at least two frames".into()));
    }
    let (src_flows, masks) = source_masks(source, params)?;
    let edit_flows = forward_flows(edited, params)?;
    let (mut sum, mut count) = (0.0, 0usize);
    for ((s, e), m) in src_flows.iter().zip(&edit_flows).zip(&masks) {
        for p in (0..m.keep.len()).filter(|&p| m.keep[p]) {
            let (du, dv) = (s.u[p] - e.u[p], s.v[p] - e.v[p]);
            sum += sqrt(du * du + dv * dv);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Input(
            "no source pixel passes the consistency check".into(),
        ));
    }
    Ok(sum / count as f64)
}

/// Maps a frame to a feature vector; [`embed_consistency`] normalises it.
pub trait FrameEmbedder {
    fn embed(&self, frame: &[f32], height: usize, width: usize, channels: usize) -> Vec<f64>;
}

/// Block-average the frame onto a `grid x grid` raster, then project with a
/// seeded Gaussian matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RandomProjection {
    pub grid: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for RandomProjection {
    fn default() -> Self {
        Self {
            grid: 8,
            dim: 64,
            seed: 0,
        }
    }
}

impl FrameEmbedder for RandomProjection {
    fn embed(&self, frame: &[f32], height: usize, width: usize, channels: usize) -> Vec<f64> {
        let (gh, gw) = (self.grid.min(height).max(1), self.grid.min(width).max(1));
        let mut pooled = vec![0.0f64; gh * gw * channels];
        let mut counts = vec![0usize; gh * gw];
        for y in 0..height {
            for x in 0..width {
                let cell = (y * gh / height) * gw + x * gw / width;
                counts[cell] += 1;
                let px = &frame[(y * width + x) * channels..(y * width + x + 1) * channels];
                for (c, &v) in px.iter().enumerate() {
                    pooled[cell * channels + c] += v as f64;
                }
            }
        }
        for (cell, &n) in counts.iter().enumerate() {
            for v in &mut pooled[cell * channels..(cell + 1) * channels] {
                *v /= n.max(1) as f64;
            }
        }
        let mut r = rng::stream(self.seed, &[pooled.len() as u64, self.dim as u64]);
        (0..self.dim)
            .map(|_| pooled.iter().map(|&p| p * rng::normal_f64(&mut r)).sum())
            .collect()
    }
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = sqrt(v.iter().map(|x| x * x).sum());
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Mean cosine similarity of consecutive frame embeddings, in `[-1, 1]`.
/// Two all-zero embeddings count as identical.
pub fn embed_consistency(video: &VideoVolume, embedder: &dyn FrameEmbedder) -> Result<f64> {
    let n = video.n_frames();
    if n == 0 {
        return Err(Error::Input("empty video".into()));
    }
    if n == 1 {
        return Ok(1.0);
    }
    let e: Vec<Vec<f64>> = (0..n)
        .map(|t| {
            unit(embedder.embed(
                video.frame(t),
                video.height(),
                video.width(),
                video.channels(),
            ))
        })
        .collect();
    let mut sum = 0.0;
    for pair in e.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if a.len() != b.len() {
            return Err(Error::Input(format!(
                "embedding sizes differ: {} vs {}",
                a.len(),
                b.len()
            )));
        }
        let zero = |v: &[f64]| v.iter().all(|&x| x == 0.0);
        let cos = if zero(a) && zero(b) {
            1.0
        } else {
            a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
        };
        sum += cos.clamp(-1.0, 1.0);
    }
    Ok(sum / (n - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::exp;
    use crate::stvolume::{Space, VolumeDims};
    use proptest::prelude::*;

    fn blob(h: usize, w: usize, cx: f64, cy: f64) -> Gray {
        let data = (0..h * w)
            .map(|p| {
                let (x, y) = ((p % w) as f64, (p / w) as f64);
                255.0 * exp(-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * 16.0))
            })
            .collect();
        Gray {
            height: h,
            width: w,
            data,
        }
    }

    #[test]
    fn identical_and_flat_frames_give_zero_flow() {
        let a = blob(16, 16, 8.0, 8.0);
        assert_eq!(
            optical_flow(&a, &a, FlowParams::default()).unwrap(),
            FlowField::zeros(16, 16)
        );
        let flat = Gray {
            height: 8,
            width: 8,
            data: vec![40.0; 64],
        };
        let brighter = Gray {
            height: 8,
            width: 8,
            data: vec![90.0; 64],
        };
        let f = optical_flow(&flat, &brighter, FlowParams::default()).unwrap();
        assert!(f.u.iter().chain(&f.v).all(|&x| x == 0.0));
        assert!(optical_flow(&a, &flat, FlowParams::default()).is_err());
    }

    #[test]
    fn shifted_blob() {
        let a = blob(32, 32, 14.0, 16.0);
        let b = blob(32, 32, 16.0, 16.0);
        let f = optical_flow(&a, &b, FlowParams::default()).unwrap();
        // average over the blob core, where the image has structure
        let core: Vec<usize> = (0..32 * 32).filter(|&p| a.data[p] > 60.0).collect();
        let mu = core.iter().map(|&p| f.u[p]).sum::<f64>() / core.len() as f64;
        let mv = core.iter().map(|&p| f.v[p]).sum::<f64>() / core.len() as f64;
        assert!((mu - 2.0).abs() < 0.5, "u = {mu}");
        assert!(mv.abs() < 0.1, "v = {mv}");
    }

    #[test]
    fn energy_never_increases() {
        let a = blob(12, 12, 5.0, 6.0);
        let b = blob(12, 12, 6.5, 5.0);
        let p = FlowParams {
            alpha: 10.0,
            iterations: 1,
        };
        let mut f = FlowField::zeros(12, 12);
        let mut e = flow_energy(&a, &b, &f, p.alpha).unwrap();
        for _ in 0..30 {
            f = optical_flow_from(&a, &b, p, f).unwrap();
            let next = flow_energy(&a, &b, &f, p.alpha).unwrap();
            assert!(next <= e * (1.0 + 1e-12), "{next} > {e}");
            e = next;
        }
    }

    #[test]
    fn mask_cases() {
        let z = FlowField::zeros(6, 7);
        assert_eq!(lr_mask(&z, &z).unwrap().kept(), 42);
        let three = FlowField::uniform(6, 7, 3.0, 0.0);
        assert_eq!(lr_mask(&three, &z).unwrap().kept(), 0);
        let f = FlowField::uniform(6, 7, 0.4, 0.0);
        let b = FlowField::uniform(6, 7, -0.4, 0.0);
        // the last column points outside the frame
        assert_eq!(lr_mask(&f, &b).unwrap().kept(), 36);
        assert!(lr_mask(&z, &FlowField::zeros(7, 6)).is_err());
    }

    #[test]
    fn bilinear_sampling() {
        let mut f = FlowField::zeros(2, 2);
        f.u = vec![0.0, 1.0, 2.0, 3.0];
        assert_eq!(f.sample(0.5, 0.5), Some((1.5, 0.0)));
        assert_eq!(f.sample(1.0, 1.0), Some((3.0, 0.0)));
        assert_eq!(f.sample(1.01, 0.0), None);
        assert_eq!(f.sample(-0.01, 0.0), None);
    }

    fn moving_blob_video(n: usize, step: f64) -> VideoVolume {
        let d = VolumeDims::new(n, 24, 24, 3);
        VideoVolume::from_fn(d, Space::Pixel, |t, y, x, c| {
            let (cx, cy) = (8.0 + step * t as f64, 12.0);
            let g = exp(-((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / 18.0);
            (g * (1.0 - 0.2 * c as f64) * 1.6 - 0.8) as f32
        })
        .unwrap()
    }

    #[test]
    fn flow_error_cases() {
        let v = moving_blob_video(4, 2.0);
        assert_eq!(flow_error(&v, &v).unwrap(), 0.0);
        let inverted = v
            .with_data(v.data().iter().map(|x| -x).collect())
            .unwrap()
            .into_space(Space::Pixel)
            .unwrap();
        assert!(flow_error(&v, &inverted).unwrap() < 0.3);
        let frozen = v
            .gather_frames(&[0, 0, 0, 0])
            .unwrap()
            .into_space(Space::Pixel)
            .unwrap();
        let err = flow_error(&v, &frozen).unwrap();
        let (flows, masks) = source_masks(&v, FlowParams::default()).unwrap();
        let (mut s, mut n) = (0.0, 0);
        for (f, m) in flows.iter().zip(&masks) {
            for p in (0..m.keep.len()).filter(|&p| m.keep[p]) {
                s += sqrt(f.u[p].powi(2) + f.v[p].powi(2));
                n += 1;
            }
        }
        assert!((err - s / n as f64).abs() < 1e-9);
        assert!(flow_error(&v, &v.select_frames(0, 3).unwrap()).is_err());
    }

    #[test]
    fn consistency_scores() {
        let d = VolumeDims::new(3, 4, 4, 2);
        let c = VideoVolume::from_fn(d, Space::Pixel, |_, y, x, _| (x as f32 - y as f32) / 8.0)
            .unwrap();
        let e = RandomProjection::default();
        assert!((embed_consistency(&c, &e).unwrap() - 1.0).abs() < 1e-12);
        struct Axes;
        impl FrameEmbedder for Axes {
            fn embed(&self, frame: &[f32], _: usize, _: usize, _: usize) -> Vec<f64> {
                let mut v = vec![0.0; 2];
                v[(frame[0] > 0.0) as usize] = 1.0;
                v
            }
        }
        let alt = VideoVolume::from_fn(
            d,
            Space::Pixel,
            |t, _, _, _| if t % 2 == 0 { 0.5 } else { -0.5 },
        )
        .unwrap();
        assert_eq!(embed_consistency(&alt, &Axes).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn consistency_is_a_cosine(seed in 0u64..500) {
            let d = VolumeDims::new(4, 6, 6, 2);
            let mut r = rng::stream(seed, &[]);
            let data = rng::normal_vec(&mut r, d.len()).into_iter().map(|v| v.clamp(-1.0, 1.0)).collect();
            let v = VideoVolume::new(d, Space::Pixel, data).unwrap();
            let s = embed_consistency(&v, &RandomProjection { seed, ..RandomProjection::default() }).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }

        #[test]
        fn self_error_is_zero(seed in 0u64..200) {
            let d = VolumeDims::new(3, 6, 6, 1);
            let mut r = rng::stream(seed, &[1]);
            let data = rng::normal_vec(&mut r, d.len()).into_iter().map(|v| (0.5 * v).clamp(-1.0, 1.0)).collect();
            let v = VideoVolume::new(d, Space::Pixel, data).unwrap();
            let p = FlowParams { alpha: 10.0, iterations: 20 };
            if let Ok(e) = flow_error_with(&v, &v, p) {
                prop_assert_eq!(e, 0.0);
            }
        }
    }
}
