use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::math::{silu, sqrt};
use crate::par;
use crate::stvolume::ImageBatch;

use super::{matmul, matmul_into};

/// A named parameter tensor, the unit of weight files.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Supplies parameter tensors while a network is being built.
pub trait ParamSource {
    /// A trainable weight matrix.
    fn weight(&mut self, name: &str, dims: &[usize]) -> Result<Vec<f32>>;
    /// A bias or shift, zero-initialized.
    fn zeros(&mut self, name: &str, dims: &[usize]) -> Result<Vec<f32>>;
    /// A scale, one-initialized.
    fn ones(&mut self, name: &str, dims: &[usize]) -> Result<Vec<f32>>;
}

fn push(out: &mut Vec<NamedTensor>, name: &str, dims: &[usize], data: &[f32]) {
    out.push(NamedTensor {
        name: name.into(),
        dims: dims.to_vec(),
        data: data.to_vec(),
    });
}

/// Fully connected layer, `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    name: String,
    pub d_in: usize,
    pub d_out: usize,
    weight: Vec<f32>,
    bias: Option<Vec<f32>>,
}

impl Linear {
    pub fn new(
        src: &mut dyn ParamSource,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = src.weight(&alloc::format!("{name}.weight"), &[d_in, d_out])?;
        let bias = if bias {
            Some(src.zeros(&alloc::format!("{name}.bias"), &[d_out])?)
        } else {
            None
        };
        Ok(Self {
            name: name.into(),
            d_in,
            d_out,
            weight,
            bias,
        })
    }

    /// Applies the layer to `rows` row vectors stored contiguously.
    pub fn forward(&self, x: &[f32], rows: usize) -> Vec<f32> {
        let mut y = matmul(x, &self.weight, rows, self.d_in, self.d_out);
        if let Some(b) = &self.bias {
            y.chunks_mut(self.d_out)
                .for_each(|r| r.iter_mut().zip(b).for_each(|(v, b)| *v += b));
        }
        y
    }

    pub fn visit(&self, out: &mut Vec<NamedTensor>) {
        push(
            out,
            &alloc::format!("{}.weight", self.name),
            &[self.d_in, self.d_out],
            &self.weight,
        );
        if let Some(b) = &self.bias {
            push(out, &alloc::format!("{}.bias", self.name), &[self.d_out], b);
        }
    }
}

/// Same-padded square convolution (kernel 1 or 3), weights stored
/// `(ky, kx, c_in) x c_out`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl Conv2d {
    pub fn new(
        src: &mut dyn ParamSource,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
    ) -> Result<Self> {
        if kernel != 1 && kernel != 3 {
            return Err(crate::error::Error::Config(alloc::format!(
                "unsupported kernel size {kernel}"
            )));
        }
        let weight = src.weight(
            &alloc::format!("{name}.weight"),
            &[kernel, kernel, c_in, c_out],
        )?;
        let bias = src.zeros(&alloc::format!("{name}.bias"), &[c_out])?;
        Ok(Self {
            name: name.into(),
            c_in,
            c_out,
            kernel,
            weight,
            bias,
        })
    }

    pub fn forward(&self, x: &ImageBatch) -> Result<ImageBatch> {
        if x.channels != self.c_in {
            return Err(shape_err!(
                "{}: expected {} channels, got {}",
                self.name,
                self.c_in,
                x.channels
            ));
        }
        let (h, w) = (x.height, x.width);
        let hw = h * w;
        let mut out = ImageBatch::zeros(x.n, h, w, self.c_out);
        let per_group = x.n.div_ceil(par::workers()).max(1);
        par::for_each_chunk(&mut out.data, per_group * hw * self.c_out, |g, dst| {
            // one patch buffer per group of images; padding taps stay zero
            let mut cols = if self.kernel == 3 {
                vec![0.0; hw * 9 * self.c_in]
            } else {
                Vec::new()
            };
            for (j, dst) in dst.chunks_mut(hw * self.c_out).enumerate() {
                let src = x.image(g * per_group + j);
                if self.kernel == 1 {
                    matmul_into(src, &self.weight, dst, hw, self.c_in, self.c_out, false);
                } else {
                    im2col3(src, h, w, self.c_in, &mut cols);
                    matmul_into(
                        &cols,
                        &self.weight,
                        dst,
                        hw,
                        9 * self.c_in,
                        self.c_out,
                        false,
                    );
                }
                dst.chunks_mut(self.c_out)
                    .for_each(|px| px.iter_mut().zip(&self.bias).for_each(|(v, b)| *v += b));
            }
        });
        Ok(out)
    }

    pub fn visit(&self, out: &mut Vec<NamedTensor>) {
        let k = self.kernel;
        push(
            out,
            &alloc::format!("{}.weight", self.name),
            &[k, k, self.c_in, self.c_out],
            &self.weight,
        );
        push(
            out,
            &alloc::format!("{}.bias", self.name),
            &[self.c_out],
            &self.bias,
        );
    }
}

/// Patch matrix for a zero-padded 3x3 convolution: one row of `(ky, kx, c)`
/// taps per output pixel. Entries for out-of-image taps are left untouched, so
/// `cols` must hold zeros there (it is only ever reused for equal shapes).
fn im2col3(src: &[f32], h: usize, w: usize, c: usize, cols: &mut [f32]) {
    let row = 9 * c;
    for y in 0..h {
        for ky in 0..3 {
            let sy = y as isize + ky as isize - 1;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            let srow = &src[sy as usize * w * c..(sy as usize + 1) * w * c];
            for x in 0..w {
                let d = (y * w + x) * row + ky * 3 * c;
                // taps kx = 0..3 read pixels x-1..=x+1, contiguous in the source
                let lo = x.saturating_sub(1);
                let hi = (x + 2).min(w);
                let off = (lo + 1 - x) * c;
                cols[d + off..d + off + (hi - lo) * c].copy_from_slice(&srow[lo * c..hi * c]);
            }
        }
    }
}

/// Group normalization over `(h, w, channels / groups)` per image.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    name: String,
    groups: usize,
    channels: usize,
    gamma: Vec<f32>,
    beta: Vec<f32>,
}

const GN_EPS: f64 = 1e-5;

impl GroupNorm {
    pub fn new(
        src: &mut dyn ParamSource,
        name: &str,
        groups: usize,
        channels: usize,
    ) -> Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(crate::error::Error::Config(alloc::format!(
                "{channels} channels not divisible into {groups} groups"
            )));
        }
        Ok(Self {
            name: name.into(),
            groups,
            channels,
            gamma: src.ones(&alloc::format!("{name}.gamma"), &[channels])?,
            beta: src.zeros(&alloc::format!("{name}.beta"), &[channels])?,
        })
    }

    pub fn forward(&self, x: &ImageBatch) -> Result<ImageBatch> {
        if x.channels != self.channels {
            return Err(shape_err!(
                "{}: expected {} channels, got {}",
                self.name,
                self.channels,
                x.channels
            ));
        }
        let mut out = x.clone();
        let c = self.channels;
        let per = c / self.groups;
        let hw = x.pixels();
        par::for_each_chunk(&mut out.data, hw * c, |_, img| {
            let mut s = vec![0.0f64; c];
            let mut s2 = vec![0.0f64; c];
            for px in img.chunks(c) {
                for ((a, b), &v) in s.iter_mut().zip(s2.iter_mut()).zip(px) {
                    *a += v as f64;
                    *b += v as f64 * v as f64;
                }
            }
            let n = (hw * per) as f64;
            let mut scale = vec![0.0f32; c];
            let mut shift = vec![0.0f32; c];
            for g in 0..self.groups {
                let r = g * per..(g + 1) * per;
                let mean = s[r.clone()].iter().sum::<f64>() / n;
                let var = (s2[r.clone()].iter().sum::<f64>() / n - mean * mean).max(0.0);
                let inv = 1.0 / sqrt(var + GN_EPS);
                for ch in r {
                    let a = inv * self.gamma[ch] as f64;
                    scale[ch] = a as f32;
                    shift[ch] = (self.beta[ch] as f64 - mean * a) as f32;
                }
            }
            for px in img.chunks_mut(c) {
                for ((v, a), b) in px.iter_mut().zip(&scale).zip(&shift) {
                    *v = *v * a + b;
                }
            }
        });
        Ok(out)
    }

    pub fn visit(&self, out: &mut Vec<NamedTensor>) {
        push(
            out,
            &alloc::format!("{}.gamma", self.name),
            &[self.channels],
            &self.gamma,
        );
        push(
            out,
            &alloc::format!("{}.beta", self.name),
            &[self.channels],
            &self.beta,
        );
    }
}

pub fn silu_inplace(x: &mut [f32]) {
    x.iter_mut().for_each(|v| *v = silu(*v));
}

/// 2x2 average pooling; odd trailing rows/columns are not allowed.
pub fn avg_pool2(x: &ImageBatch) -> Result<ImageBatch> {
    if !x.height.is_multiple_of(2) || !x.width.is_multiple_of(2) {
        return Err(shape_err!("cannot 2x-pool a {}x{} map", x.height, x.width));
    }
    let (h2, w2, c) = (x.height / 2, x.width / 2, x.channels);
    let mut out = ImageBatch::zeros(x.n, h2, w2, c);
    for i in 0..x.n {
        let src = x.image(i);
        let dst = &mut out.data[i * h2 * w2 * c..(i + 1) * h2 * w2 * c];
        for y in 0..h2 {
            for xx in 0..w2 {
                for ch in 0..c {
                    let at = |yy: usize, xq: usize| src[(yy * x.width + xq) * c + ch];
                    let s = at(2 * y, 2 * xx)
                        + at(2 * y, 2 * xx + 1)
                        + at(2 * y + 1, 2 * xx)
                        + at(2 * y + 1, 2 * xx + 1);
                    dst[(y * w2 + xx) * c + ch] = 0.25 * s;
                }
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &ImageBatch) -> ImageBatch {
    let (h2, w2, c) = (x.height * 2, x.width * 2, x.channels);
    let mut out = ImageBatch::zeros(x.n, h2, w2, c);
    for i in 0..x.n {
        let src = x.image(i);
        let dst = &mut out.data[i * h2 * w2 * c..(i + 1) * h2 * w2 * c];
        for y in 0..h2 {
            for xx in 0..w2 {
                let s = ((y / 2) * x.width + xx / 2) * c;
                let d = (y * w2 + xx) * c;
                dst[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
    }
    out
}

/// Channel-wise concatenation `[a, b]` of equally sized maps.
pub fn concat_channels(a: &ImageBatch, b: &ImageBatch) -> Result<ImageBatch> {
    if a.n != b.n || a.height != b.height || a.width != b.width {
        return Err(shape_err!(
            "cannot concatenate {}x{} with {}x{}",
            a.height,
            a.width,
            b.height,
            b.width
        ));
    }
    let c = a.channels + b.channels;
    let mut data = Vec::with_capacity(a.n * a.pixels() * c);
    for (pa, pb) in a.data.chunks(a.channels).zip(b.data.chunks(b.channels)) {
        data.extend_from_slice(pa);
        data.extend_from_slice(pb);
    }
    ImageBatch::new(a.n, a.height, a.width, c, data)
}
