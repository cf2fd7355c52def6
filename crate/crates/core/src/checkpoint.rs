//! MCNF checkpoint files.
//!
//! Layout (little-endian): magic `MCNF`, `u32` version, `u32` tensor count,
//! then per tensor a `u16` name length, the UTF-8 name, a `u8` rank, `u32`
//! dimensions and `f32` values. Two leading tensors, `meta.config` and
//! `meta.decoder_modes`, carry the architecture so a file can be loaded on
//! its own.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::segnet::{DecoderMode, Model, ModelConfig};
use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 4] = b"MCNF";
pub const VERSION: u32 = 1;
const META_CONFIG: &str = "meta.config";
const META_MODES: &str = "meta.decoder_modes";

pub fn encode<T: Element>(model: &Model<T>) -> Result<Vec<u8>> {
    let cfg = model.config();
    let meta = [
        cfg.in_channels,
        cfg.num_classes,
        cfg.base_width,
        cfg.depth,
        cfg.norm_enabled as usize,
    ];
    let mut tensors: Vec<(&str, Vec<usize>, Vec<f32>)> = vec![
        (META_CONFIG, vec![meta.len()], meta.iter().map(|&v| v as f32).collect()),
        (
            META_MODES,
            vec![cfg.decoder_modes.len()],
            cfg.decoder_modes.iter().map(|m| m.code() as f32).collect(),
        ),
    ];
    for e in model.params().entries() {
        tensors.push((
            &e.name,
            e.value.shape().to_vec(),
            e.value.data().iter().map(|v| v.as_f64() as f32).collect(),
        ));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::Config(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(shape.len() as u8);
        for d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, self.pos, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Decode every named tensor in file order.
pub fn decode_tensors(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(path, 0, "not an MCNF checkpoint"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(path, 4, format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let at = r.pos;
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(path, at + 2, "tensor name is not UTF-8"))?
            .to_string();
        let ndim = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::format(path, at, "tensor too large"))?, "values")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, r.pos, "trailing bytes after last tensor"));
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Model<f32>> {
    let tensors = decode_tensors(bytes, path)?;
    let find = |name: &str| {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::format(path, 0, format!("missing tensor '{name}'")))
    };
    let meta = find(META_CONFIG)?.data();
    if meta.len() != 5 {
        return Err(Error::format(path, 0, "meta.config must hold 5 values"));
    }
    let modes = find(META_MODES)?
        .data()
        .iter()
        .map(|&c| DecoderMode::from_code(c as u8).ok_or_else(|| Error::format(path, 0, format!("unknown decoder mode code {c}"))))
        .collect::<Result<Vec<_>>>()?;
    let config = ModelConfig {
        n_decoders: modes.len(),
        decoder_modes: modes,
        in_channels: meta[0] as usize,
        num_classes: meta[1] as usize,
        base_width: meta[2] as usize,
        depth: meta[3] as usize,
        norm_enabled: meta[4] != 0.0,
    };
    let mut model = Model::<f32>::build(config, 0)?;
    let expected = model.params().len();
    let mut loaded = 0;
    for (name, t) in tensors {
        if name.starts_with("meta.") {
            continue;
        }
        model
            .params_mut()
            .set(&name, t)
            .map_err(|e| Error::format(path, 0, format!("tensor '{name}': {e}")))?;
        loaded += 1;
    }
    if loaded != expected {
        return Err(Error::format(
            path,
            0,
            format!("checkpoint has {loaded} parameter tensors, model needs {expected}"),
        ));
    }
    Ok(model)
}

pub fn save<T: Element>(model: &Model<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
