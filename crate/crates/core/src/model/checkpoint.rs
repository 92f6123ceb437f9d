//! Checkpoint container.
//!
//! Layout: the magic line `PATKIT1`, the manifest length in bytes on its own
//! line, the UTF-8 manifest, then the tensor blobs. Each blob is a
//! little-endian `u32` rank, `rank` little-endian `u32` dims and the values as
//! little-endian floats of the width named by `dtype`. The manifest has four
//! sections:
//!
//! ```text
//! [config]    frozen key = value lines
//! [state]     dtype (f32 | f64), epoch, step, tau, adam_t, rng_seed (hex), rng_stream, rng_word_pos
//! [metrics]   the metrics CSV
//! [tensors]   name <TAB> dims joined by 'x' <TAB> blob offset <TAB> blob length
//! ```
//!
//! Parameters are stored under their own names, Adam moments under
//! `adam.m.<name>` and `adam.v.<name>`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::PatConfig;
use super::net::PatModel;
use super::train::{Adam, MetricRow, TrainState, METRICS_HEADER};
use crate::error::{PatError, Result};
use crate::nn::Module;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &str = "PATKIT1";

fn fmt_err(msg: impl Into<String>) -> PatError {
    PatError::Format(format!("checkpoint: {}", msg.into()))
}

fn push_blob<T: Real>(blobs: &mut Vec<u8>, manifest: &mut String, name: &str, t: &Tensor<T>) {
    let offset = blobs.len();
    blobs.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        blobs.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        if wide::<T>() {
            blobs.extend_from_slice(&v.f64().to_le_bytes());
        } else {
            blobs.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    let dims: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
    manifest.push_str(&format!("{name}\t{}\t{offset}\t{}\n", dims.join("x"), blobs.len() - offset));
}

fn wide<T: Real>() -> bool {
    std::mem::size_of::<T>() == 8
}

/// Serializes model parameters, optimizer moments, rng position and metrics.
pub fn to_bytes<T: Real>(model: &PatModel<T>, state: &TrainState<T>) -> Vec<u8> {
    let mut manifest = String::from("[config]\n");
    manifest.push_str(&model.config.to_text());
    manifest.push_str("[state]\n");
    let seed: String = state.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    manifest.push_str(&format!(
        "dtype = {}\nepoch = {}\nstep = {}\ntau = {}\nadam_t = {}\nrng_seed = {seed}\nrng_stream = {}\nrng_word_pos = {}\n",
        if wide::<T>() { "f64" } else { "f32" },
        state.epoch,
        state.step,
        state.tau,
        state.adam.t,
        state.rng.get_stream(),
        state.rng.get_word_pos()
    ));
    manifest.push_str("[metrics]\n");
    manifest.push_str(METRICS_HEADER);
    manifest.push('\n');
    for row in &state.history {
        manifest.push_str(&row.csv());
        manifest.push('\n');
    }
    manifest.push_str("[tensors]\n");
    let mut blobs = Vec::new();
    let params = model.params();
    for p in &params {
        push_blob(&mut blobs, &mut manifest, &p.name, &p.value);
    }
    for (p, (m, v)) in params.iter().zip(state.adam.m.iter().zip(&state.adam.v)) {
        push_blob(&mut blobs, &mut manifest, &format!("adam.m.{}", p.name), m);
        push_blob(&mut blobs, &mut manifest, &format!("adam.v.{}", p.name), v);
    }
    let mut out = format!("{MAGIC}\n{}\n", manifest.len()).into_bytes();
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&blobs);
    out
}

pub fn save<T: Real>(path: &Path, model: &PatModel<T>, state: &TrainState<T>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, to_bytes(model, state))?;
    Ok(())
}

fn read_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| fmt_err("truncated header"))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| fmt_err("header is not UTF-8"))
}

fn read_blob<T: Real>(blobs: &[u8], offset: usize, len: usize, dims: &[usize], width: usize) -> Result<Tensor<T>> {
    let b = blobs
        .get(offset..offset + len)
        .ok_or_else(|| fmt_err(format!("blob at {offset}+{len} out of bounds")))?;
    let word = |i: usize| u32::from_le_bytes(b[4 * i..4 * i + 4].try_into().unwrap());
    let numel: usize = dims.iter().product();
    if b.len() < 4 || word(0) as usize != dims.len() || b.len() != 4 * (1 + dims.len()) + width * numel {
        return Err(fmt_err("blob header disagrees with manifest"));
    }
    for (i, &d) in dims.iter().enumerate() {
        if word(1 + i) as usize != d {
            return Err(fmt_err("blob shape disagrees with manifest"));
        }
    }
    let data: Vec<T> = b[4 * (1 + dims.len())..]
        .chunks_exact(width)
        .map(|c| match width {
            8 => T::of(f64::from_le_bytes(c.try_into().unwrap())),
            _ => T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64),
        })
        .collect();
    Tensor::new(dims, data)
}

/// Parsed checkpoint contents.
pub struct Checkpoint<T> {
    pub model: PatModel<T>,
    pub state: TrainState<T>,
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut pos = 0;
    if read_line(bytes, &mut pos)? != MAGIC {
        return Err(fmt_err(format!("missing {MAGIC} magic")));
    }
    let len: usize = read_line(bytes, &mut pos)?
        .parse()
        .map_err(|_| fmt_err("bad manifest length"))?;
    let manifest = bytes
        .get(pos..pos + len)
        .ok_or_else(|| fmt_err("truncated manifest"))
        .and_then(|m| std::str::from_utf8(m).map_err(|_| fmt_err("manifest is not UTF-8")))?;
    let blobs = &bytes[pos + len..];

    let mut sections: HashMap<&str, Vec<&str>> = HashMap::new();
    let mut current = "";
    for line in manifest.lines() {
        if line.starts_with('[') && line.ends_with(']') {
            current = &line[1..line.len() - 1];
            sections.entry(current).or_default();
        } else {
            sections.entry(current).or_default().push(line);
        }
    }
    let section = |name: &str| sections.get(name).ok_or_else(|| fmt_err(format!("missing [{name}] section")));

    let config = PatConfig::from_text(&section("config")?.join("\n"))?;
    let mut kv = HashMap::new();
    for line in section("state")? {
        if let Some((k, v)) = line.split_once('=') {
            kv.insert(k.trim(), v.trim());
        }
    }
    fn field<V: std::str::FromStr>(kv: &HashMap<&str, &str>, k: &str) -> Result<V> {
        kv.get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| fmt_err(format!("bad or missing state field {k}")))
    }
    let width = match kv.get("dtype").copied() {
        Some("f32") => 4,
        Some("f64") => 8,
        other => return Err(fmt_err(format!("unknown dtype {other:?}"))),
    };
    let seed_hex: String = field(&kv, "rng_seed")?;
    if seed_hex.len() != 64 {
        return Err(fmt_err("rng_seed must be 64 hex digits"));
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16).map_err(|_| fmt_err("bad rng_seed"))?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(field(&kv, "rng_stream")?);
    rng.set_word_pos(field(&kv, "rng_word_pos")?);

    let history = section("metrics")?
        .iter()
        .filter(|l| !l.is_empty() && **l != METRICS_HEADER)
        .map(|l| MetricRow::parse(l))
        .collect::<Result<Vec<_>>>()?;

    let mut tensors: HashMap<String, Tensor<T>> = HashMap::new();
    for line in section("tensors")? {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(fmt_err(format!("bad tensor entry {line:?}")));
        }
        let dims = f[1]
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| fmt_err(format!("bad shape in {line:?}")))?;
        let offset: usize = f[2].parse().map_err(|_| fmt_err("bad offset"))?;
        let len: usize = f[3].parse().map_err(|_| fmt_err("bad length"))?;
        tensors.insert(f[0].to_string(), read_blob(blobs, offset, len, &dims, width)?);
    }

    let mut model = PatModel::<T>::new(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
        let t = tensors
            .remove(name)
            .ok_or_else(|| fmt_err(format!("tensor {name} missing")))?;
        if t.shape() != shape {
            return Err(fmt_err(format!("tensor {name} has shape {:?}, model wants {shape:?}", t.shape())));
        }
        Ok(t)
    };
    let names: Vec<(String, Vec<usize>)> = model.params().iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect();
    let mut values = Vec::with_capacity(names.len());
    let mut adam = Adam {
        t: field(&kv, "adam_t")?,
        m: Vec::with_capacity(names.len()),
        v: Vec::with_capacity(names.len()),
    };
    for (name, shape) in &names {
        values.push(take(name, shape)?);
        adam.m.push(take(&format!("adam.m.{name}"), shape)?);
        adam.v.push(take(&format!("adam.v.{name}"), shape)?);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(fmt_err(format!("unexpected tensor {extra}")));
    }
    let mut it = values.into_iter();
    model.visit_mut(&mut |p| p.value = it.next().unwrap());

    let state = TrainState {
        epoch: field(&kv, "epoch")?,
        step: field(&kv, "step")?,
        tau: field(&kv, "tau")?,
        adam,
        rng,
        history,
    };
    Ok(Checkpoint { model, state })
}

/// Bits per stored value (32 or 64), read from the manifest.
pub fn stored_bits(bytes: &[u8]) -> Result<u32> {
    let head = &bytes[..bytes.len().min(1 << 16)];
    let text = String::from_utf8_lossy(head);
    match text.lines().find_map(|l| l.strip_prefix("dtype = ")) {
        Some("f32") => Ok(32),
        Some("f64") => Ok(64),
        other => Err(fmt_err(format!("unknown dtype {other:?}"))),
    }
}

pub fn load<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    from_bytes(&fs::read(path)?)
}
