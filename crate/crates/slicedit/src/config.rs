//! Configuration files and `key=value` overrides.
//!
//! A file is flat `key = value` text with keys named as in [`CONFIG_KEYS`].
//! Values may be bare words or TOML literals, so every TOML document without
//! tables is accepted:
//!
//! ```toml
//! # comments run to the end of the line
//! T = 50
//! gamma = 0.8
//! codec = pool2
//! inject_layers = [0, 1]
//! ```

use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use slicedit_core::pipeline::{EditConfig, CONFIG_KEYS};
use toml::{Table, Value};

fn value_text(key: &str, v: &Value) -> Result<String> {
    Ok(match v {
        Value::String(s) => s.clone(),
        Value::Integer(i) => i.to_string(),
        Value::Float(f) => f.to_string(),
        Value::Boolean(b) => b.to_string(),
        Value::Array(items) => items
            .iter()
            .map(|x| value_text(key, x))
            .collect::<Result<Vec<_>>>()?
            .join(","),
        _ => bail!("unsupported value for {key}"),
    })
}

/// The text of one value: a TOML literal if it parses as one, else the bare
/// word up to any comment.
fn parse_value(key: &str, raw: &str) -> Result<String> {
    if let Ok(table) = format!("v = {raw}").parse::<Table>() {
        return value_text(key, &table["v"]);
    }
    let bare = raw.split_once('#').map_or(raw, |(v, _)| v).trim();
    if bare.is_empty() {
        bail!("missing value for {key}");
    }
    Ok(bare.to_string())
}

/// Applies every `key = value` line of a document to `config`. Blank lines
/// and `#` comments are skipped; repeated keys are errors.
pub fn apply_document(config: &mut EditConfig, text: &str) -> Result<()> {
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, raw) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected `key = value`", i + 1))?;
        let k = k.trim();
        if !seen.insert(k.to_string()) {
            bail!("line {}: `{k}` is set twice", i + 1);
        }
        let v = parse_value(k, raw.trim()).with_context(|| format!("line {}", i + 1))?;
        config
            .set(k, &v)
            .with_context(|| format!("line {}", i + 1))?;
    }
    Ok(())
}

pub fn apply_file(config: &mut EditConfig, path: &Path) -> Result<()> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    apply_document(config, &text).with_context(|| format!("in {}", path.display()))
}

/// Applies a `key=value` override.
pub fn apply_override(config: &mut EditConfig, assignment: &str) -> Result<()> {
    let (k, v) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{assignment}` is not of the form key=value"))?;
    let k = k.trim();
    config.set(k, &parse_value(k, v.trim())?)?;
    Ok(())
}

/// The configuration as a TOML document, one key per line in
/// [`CONFIG_KEYS`] order. It loads back with [`apply_document`].
pub fn to_toml(config: &EditConfig) -> String {
    let mut out = String::new();
    for (k, v) in config.entries() {
        let is_number = v.parse::<i64>().is_ok() || v.parse::<f64>().is_ok();
        let literal = if is_number || v == "true" || v == "false" {
            v
        } else {
            format!("{v:?}")
        };
        out += &format!("{k} = {literal}\n");
    }
    debug_assert_eq!(out.lines().count(), CONFIG_KEYS.len());
    out
}
