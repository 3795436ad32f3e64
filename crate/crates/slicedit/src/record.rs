//! Inversion records stored as STW1 tensor files.
//!
//! Tensor names:
//! - `dims`: `[n, h, w, c]`
//! - `config:KEY=VALUE`: one empty tensor per configuration entry
//! - `prompt:TEXT`: the source prompt embedding
//! - `noise.T`, `trajectory.T`: per-step volumes
//! - `qk.STEP.LAYER.FRAME.q` / `.k`: cached attention queries and keys

use std::collections::BTreeMap;
use std::path::Path;

use slicedit_core::attention::{AttentionCache, CachedQk, Tokens};
use slicedit_core::denoisers::PromptEmbedding;
use slicedit_core::nn::NamedTensor;
use slicedit_core::pipeline::{EditConfig, InversionRecord};
use slicedit_core::stvolume::VolumeDims;

use crate::formats::{self, FormatError, Result};

fn bad(reason: impl Into<String>) -> FormatError {
    FormatError::Malformed {
        kind: "record",
        reason: reason.into(),
    }
}

fn tensor(name: String, dims: Vec<usize>, data: Vec<f32>) -> NamedTensor {
    NamedTensor { name, dims, data }
}

pub fn record_to_tensors(record: &InversionRecord) -> Vec<NamedTensor> {
    let d = record.dims;
    let mut out = vec![tensor(
        "dims".into(),
        vec![4],
        [d.n_frames, d.height, d.width, d.channels]
            .iter()
            .map(|&x| x as f32)
            .collect(),
    )];
    for (k, v) in record.config.entries() {
        out.push(tensor(format!("config:{k}={v}"), vec![0], vec![]));
    }
    let p = &record.source_prompt;
    out.push(tensor(
        format!("prompt:{}", p.text),
        vec![p.tokens.rows, p.tokens.dim],
        p.tokens.data.clone(),
    ));
    for (i, z) in record.noises.iter().enumerate() {
        out.push(tensor(format!("noise.{}", i + 1), vec![z.len()], z.clone()));
    }
    for (t, x) in record.trajectory.iter().enumerate() {
        out.push(tensor(format!("trajectory.{t}"), vec![x.len()], x.clone()));
    }
    for (&(step, layer, frame), e) in record.cache.iter() {
        for (part, data) in [("q", &e.q), ("k", &e.k)] {
            out.push(tensor(
                format!("qk.{step}.{layer}.{frame}.{part}"),
                vec![e.tokens, e.dim],
                data.clone(),
            ));
        }
    }
    out
}

fn index(s: &str, what: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| bad(format!("bad {what} index in `{s}`")))
}

/// Query and key tensors of one cache entry, as they turn up.
type QkPair = (Option<NamedTensor>, Option<NamedTensor>);

pub fn record_from_tensors(tensors: Vec<NamedTensor>) -> Result<InversionRecord> {
    let mut dims = None;
    let mut config = EditConfig::default();
    let mut prompt = None;
    let mut noises = BTreeMap::new();
    let mut trajectory = BTreeMap::new();
    let mut qk: BTreeMap<(usize, u16, usize), QkPair> = BTreeMap::new();
    for t in tensors {
        if t.name == "dims" {
            if t.data.len() != 4 {
                return Err(bad("dims must have four entries"));
            }
            let v: Vec<usize> = t.data.iter().map(|&x| x as usize).collect();
            dims = Some(VolumeDims::new(v[0], v[1], v[2], v[3]));
        } else if let Some(entry) = t.name.strip_prefix("config:") {
            let (k, v) = entry
                .split_once('=')
                .ok_or_else(|| bad(format!("bad config entry `{entry}`")))?;
            config.set(k, v)?;
        } else if let Some(text) = t.name.strip_prefix("prompt:") {
            let [rows, dim] = t.dims[..] else {
                return Err(bad("prompt embedding must be two-dimensional"));
            };
            prompt = Some(PromptEmbedding {
                text: text.into(),
                tokens: Tokens::new(rows, dim, t.data)?,
            });
        } else if let Some(i) = t.name.strip_prefix("noise.") {
            noises.insert(index(i, "noise")?, t.data);
        } else if let Some(i) = t.name.strip_prefix("trajectory.") {
            trajectory.insert(index(i, "trajectory")?, t.data);
        } else if let Some(key) = t.name.strip_prefix("qk.") {
            let parts: Vec<&str> = key.split('.').collect();
            let [step, layer, frame, part] = parts[..] else {
                return Err(bad(format!("bad cache tensor `{}`", t.name)));
            };
            let layer = layer
                .parse()
                .map_err(|_| bad(format!("bad layer in `{}`", t.name)))?;
            let slot = qk
                .entry((index(step, "step")?, layer, index(frame, "frame")?))
                .or_default();
            match part {
                "q" => slot.0 = Some(t),
                "k" => slot.1 = Some(t),
                _ => return Err(bad(format!("bad cache tensor `{}`", t.name))),
            }
        } else {
            return Err(bad(format!("unexpected tensor `{}`", t.name)));
        }
    }
    let dims = dims.ok_or_else(|| bad("missing dims"))?;
    let source_prompt = prompt.ok_or_else(|| bad("missing prompt"))?;
    let dense = |m: BTreeMap<usize, Vec<f32>>, first: usize, what: &str| -> Result<Vec<Vec<f32>>> {
        m.into_iter()
            .enumerate()
            .map(|(i, (k, v))| {
                if k != i + first {
                    return Err(bad(format!("{what} steps are not contiguous")));
                }
                if v.len() != dims.len() {
                    return Err(bad(format!(
                        "{what}.{k} has {} values, expected {}",
                        v.len(),
                        dims.len()
                    )));
                }
                Ok(v)
            })
            .collect()
    };
    let noises = dense(noises, 1, "noise")?;
    let trajectory = dense(trajectory, 0, "trajectory")?;
    let mut cache = AttentionCache::new();
    for ((step, layer, frame), pair) in qk {
        let (Some(q), Some(k)) = pair else {
            return Err(bad(format!(
                "cache entry {step}.{layer}.{frame} lacks q or k"
            )));
        };
        let [tokens, dim] = q.dims[..] else {
            return Err(bad("cache tensors must be two-dimensional"));
        };
        if k.dims != q.dims {
            return Err(bad(format!(
                "cache entry {step}.{layer}.{frame} has mismatched q and k"
            )));
        }
        cache.capture(
            step,
            layer,
            frame,
            CachedQk {
                tokens,
                dim,
                q: q.data,
                k: k.data,
            },
        )?;
    }
    Ok(InversionRecord {
        dims,
        noises,
        trajectory,
        cache,
        config,
        source_prompt,
    })
}

pub fn save_record(path: &Path, record: &InversionRecord) -> Result<()> {
    formats::write_tensors(path, &record_to_tensors(record))
}

pub fn load_record(path: &Path) -> Result<InversionRecord> {
    record_from_tensors(formats::read_tensors(path)?)
}
