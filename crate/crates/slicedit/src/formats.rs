//! On-disk formats.
//!
//! - STV1: a video volume. Magic `STV1`, then `n, h, w, c` as little-endian
//!   `u32`, then `n*h*w*c` little-endian `f32` in `(t, y, x, c)` order. Read
//!   as latent data.
//! - STW1: named tensors. Magic `STW1`, a `u32` count, then per tensor a
//!   `u16` name length, the UTF-8 name, a `u8` rank, `rank` `u32` dims and
//!   the `f32` data.
//! - Frame directories: binary PPM (`P6`) files named `frame_00000.ppm`,
//!   `frame_00001.ppm`, ... Bytes map to `[-1, 1]` as `v / 127.5 - 1`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use slicedit_core::nn::NamedTensor;
use slicedit_core::stvolume::{Space, VideoVolume, VolumeDims};

const STV1: &[u8; 4] = b"STV1";
const STW1: &[u8; 4] = b"STW1";

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed {kind} data: {reason}")]
    Malformed { kind: &'static str, reason: String },
    #[error(transparent)]
    Core(#[from] slicedit_core::Error),
}

pub type Result<T> = std::result::Result<T, FormatError>;

fn malformed(kind: &'static str, reason: impl Into<String>) -> FormatError {
    FormatError::Malformed {
        kind,
        reason: reason.into(),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| FormatError::Io {
        path: path.into(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| FormatError::Io {
        path: path.into(),
        source,
    })
}

/// Little-endian cursor over a byte buffer.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    kind: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], kind: &'static str) -> Self {
        Self {
            bytes,
            pos: 0,
            kind,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| malformed(self.kind, format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| malformed(self.kind, "size overflow"))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        if self.take(4).ok() != Some(&magic[..]) {
            return Err(malformed(self.kind, "bad magic"));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(malformed(
                self.kind,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn dim_u32(d: usize, kind: &'static str) -> Result<u32> {
    u32::try_from(d).map_err(|_| malformed(kind, format!("dimension {d} exceeds u32")))
}

pub fn encode_stv1(video: &VideoVolume) -> Result<Vec<u8>> {
    let d = video.dims();
    let mut out = Vec::with_capacity(20 + 4 * d.len());
    out.extend_from_slice(STV1);
    for x in [d.n_frames, d.height, d.width, d.channels] {
        out.extend_from_slice(&dim_u32(x, "STV1")?.to_le_bytes());
    }
    for v in video.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_stv1(bytes: &[u8]) -> Result<VideoVolume> {
    let mut r = Reader::new(bytes, "STV1");
    r.magic(STV1)?;
    let (n, h, w, c) = (
        r.u32()? as usize,
        r.u32()? as usize,
        r.u32()? as usize,
        r.u32()? as usize,
    );
    let d = VolumeDims::new(n, h, w, c);
    let len = [n, h, w, c]
        .iter()
        .try_fold(1usize, |a, &x| a.checked_mul(x))
        .ok_or_else(|| malformed("STV1", "size overflow"))?;
    let data = r.f32s(len)?;
    r.finish()?;
    Ok(VideoVolume::new(d, Space::Latent, data)?)
}

pub fn read_stv1(path: &Path) -> Result<VideoVolume> {
    decode_stv1(&read_file(path)?)
}

pub fn write_stv1(path: &Path, video: &VideoVolume) -> Result<()> {
    write_file(path, &encode_stv1(video)?)
}

pub fn is_stv1(path: &Path) -> bool {
    fs::File::open(path)
        .and_then(|mut f| {
            let mut m = [0u8; 4];
            io::Read::read_exact(&mut f, &mut m).map(|_| &m == STV1)
        })
        .unwrap_or(false)
}

pub fn encode_tensors(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(STW1);
    out.extend_from_slice(&dim_u32(tensors.len(), "STW1")?.to_le_bytes());
    for t in tensors {
        let name = t.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| malformed("STW1", format!("name too long: {}", t.name)))?;
        let rank = u8::try_from(t.dims.len())
            .map_err(|_| malformed("STW1", format!("rank too high: {}", t.name)))?;
        if t.dims.iter().product::<usize>() != t.data.len() {
            return Err(malformed(
                "STW1",
                format!(
                    "tensor {} has {} values for dims {:?}",
                    t.name,
                    t.data.len(),
                    t.dims
                ),
            ));
        }
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(rank);
        for &d in &t.dims {
            out.extend_from_slice(&dim_u32(d, "STW1")?.to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = Reader::new(bytes, "STW1");
    r.magic(STW1)?;
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| malformed("STW1", "tensor name is not UTF-8"))?
            .to_owned();
        let rank = r.u8()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &x| a.checked_mul(x))
            .ok_or_else(|| malformed("STW1", "size overflow"))?;
        let data = r.f32s(n)?;
        out.push(NamedTensor { name, dims, data });
    }
    r.finish()?;
    Ok(out)
}

pub fn read_tensors(path: &Path) -> Result<Vec<NamedTensor>> {
    decode_tensors(&read_file(path)?)
}

pub fn write_tensors(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    write_file(path, &encode_tensors(tensors)?)
}

/// An 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ppm {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

pub fn encode_ppm(img: &Ppm) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.rgb);
    out
}

/// Parses a binary PPM. Comments are allowed in the header; samples with a
/// maximum below 255 are rescaled to `0..=255`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Ppm> {
    let mut pos = 0;
    let mut token = || -> Result<&[u8]> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(malformed("PPM", "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(&bytes[start..pos])
    };
    if token()? != b"P6" {
        return Err(malformed("PPM", "only binary P6 images are supported"));
    }
    let mut number = |what: &str| -> Result<usize> {
        std::str::from_utf8(token()?)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed("PPM", format!("bad {what}")))
    };
    let (width, height, maxval) = (number("width")?, number("height")?, number("maxval")?);
    if !(1..=255).contains(&maxval) {
        return Err(malformed("PPM", format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the samples
    let start = pos + 1;
    let n = width * height * 3;
    let data = bytes
        .get(start..start + n)
        .ok_or_else(|| malformed("PPM", format!("expected {n} sample bytes")))?;
    let rgb = if maxval == 255 {
        data.to_vec()
    } else {
        data.iter()
            .map(|&v| ((v as u32 * 255 + maxval as u32 / 2) / maxval as u32).min(255) as u8)
            .collect()
    };
    Ok(Ppm { width, height, rgb })
}

pub fn to_unit(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

pub fn to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("frame_{index:05}.ppm"))
}

/// Reads `frame_00000.ppm, frame_00001.ppm, ...` until the first missing
/// index. All frames must share one size.
pub fn read_frame_dir(dir: &Path) -> Result<VideoVolume> {
    let mut frames = Vec::new();
    let mut size = None;
    loop {
        let path = frame_path(dir, frames.len());
        if !path.is_file() {
            break;
        }
        let img = decode_ppm(&read_file(&path)?)?;
        let this = (img.width, img.height);
        if *size.get_or_insert(this) != this {
            return Err(malformed(
                "PPM",
                format!(
                    "{} is {}x{}, expected {:?}",
                    path.display(),
                    this.0,
                    this.1,
                    size
                ),
            ));
        }
        frames.push(img.rgb.iter().map(|&v| to_unit(v)).collect::<Vec<f32>>());
    }
    let Some((w, h)) = size else {
        return Err(malformed(
            "PPM",
            format!("no frame_00000.ppm in {}", dir.display()),
        ));
    };
    Ok(VideoVolume::from_frames(&frames, h, w, 3, Space::Pixel)?)
}

/// Writes one PPM per frame. Single-channel videos are written as gray.
pub fn write_frame_dir(dir: &Path, video: &VideoVolume) -> Result<()> {
    let c = video.channels();
    if c != 1 && c != 3 {
        return Err(malformed("PPM", format!("cannot write {c}-channel frames")));
    }
    fs::create_dir_all(dir).map_err(|source| FormatError::Io {
        path: dir.into(),
        source,
    })?;
    for t in 0..video.n_frames() {
        let rgb = video
            .frame(t)
            .iter()
            .flat_map(|&v| std::iter::repeat_n(to_byte(v), 4 - c))
            .collect();
        let img = Ppm {
            width: video.width(),
            height: video.height(),
            rgb,
        };
        write_file(&frame_path(dir, t), &encode_ppm(&img))?;
    }
    Ok(())
}

/// How a video was stored, so results can be written back the same way.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VideoFormat {
    Stv1,
    FrameDir,
}

/// Reads a frame directory or an STV1 file.
pub fn read_video(path: &Path) -> Result<(VideoVolume, VideoFormat)> {
    if path.is_dir() {
        Ok((read_frame_dir(path)?, VideoFormat::FrameDir))
    } else {
        Ok((read_stv1(path)?, VideoFormat::Stv1))
    }
}

pub fn write_video(path: &Path, video: &VideoVolume, format: VideoFormat) -> Result<()> {
    match format {
        VideoFormat::Stv1 => write_stv1(path, video),
        VideoFormat::FrameDir => write_frame_dir(path, video),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_mapping() {
        assert_eq!(to_unit(0), -1.0);
        assert_eq!(to_unit(255), 1.0);
        for b in 0..=255u8 {
            assert_eq!(to_byte(to_unit(b)), b);
        }
        assert_eq!(to_byte(7.0), 255);
        assert_eq!(to_byte(0.0), 128);
    }

    #[test]
    fn stv1_layout() {
        let v =
            VideoVolume::new(VolumeDims::new(1, 1, 2, 1), Space::Latent, vec![1.0, -2.5]).unwrap();
        let b = encode_stv1(&v).unwrap();
        assert_eq!(&b[..4], b"STV1");
        assert_eq!(&b[4..20], &[1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[20..24], &1.0f32.to_le_bytes());
        assert_eq!(decode_stv1(&b).unwrap(), v);
        assert!(decode_stv1(&b[..23]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(decode_stv1(&extra).is_err());
        let mut nan = b.clone();
        nan[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode_stv1(&nan).is_err());
    }

    #[test]
    fn ppm_header_variants() {
        let img =
            decode_ppm(b"P6 # comment\n2 1\n# another\n255\n\x00\x01\x02\x03\x04\x05").unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.rgb, [0, 1, 2, 3, 4, 5]);
        let low = decode_ppm(b"P6 1 1 15\n\x0f\x00\x07").unwrap();
        assert_eq!(low.rgb, [255, 0, 119]);
        assert!(decode_ppm(b"P3 1 1 255\n1 2 3").is_err());
        assert!(decode_ppm(b"P6 2 2 255\n\x00").is_err());
        assert!(decode_ppm(b"P6 1 1 65535\n\x00\x00").is_err());
    }

    #[test]
    fn tensor_layout() {
        let t = vec![
            NamedTensor {
                name: "a".into(),
                dims: vec![2],
                data: vec![1.0, 2.0],
            },
            NamedTensor {
                name: "empty".into(),
                dims: vec![0, 3],
                data: vec![],
            },
            NamedTensor {
                name: "scalar".into(),
                dims: vec![],
                data: vec![4.0],
            },
        ];
        let b = encode_tensors(&t).unwrap();
        assert_eq!(&b[..8], b"STW1\x03\x00\x00\x00");
        assert_eq!(&b[8..12], &[1, 0, b'a', 1]);
        assert_eq!(decode_tensors(&b).unwrap(), t);
        let bad = NamedTensor {
            name: "x".into(),
            dims: vec![3],
            data: vec![0.0],
        };
        assert!(encode_tensors(&[bad]).is_err());
        assert!(decode_tensors(&b[..b.len() - 1]).is_err());
    }
}
