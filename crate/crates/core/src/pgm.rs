//! Binary PGM (P5) reading and writing. Images use maxval 65535 (16-bit
//! big-endian samples), labels and heatmaps maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub data: Vec<u16>,
}

impl Pgm {
    pub fn new(width: usize, height: usize, maxval: u16, data: Vec<u16>) -> Result<Self> {
        if maxval == 0 {
            return Err(Error::Input("PGM maxval must be positive".into()));
        }
        if data.len() != width * height {
            return Err(Error::Input(format!(
                "PGM of {width}x{height} needs {} samples, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > maxval) {
            return Err(Error::Input(format!("PGM sample {v} exceeds maxval {maxval}")));
        }
        Ok(Self {
            width,
            height,
            maxval,
            data,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval < 256 {
            out.extend(self.data.iter().map(|&v| v as u8));
        } else {
            for &v in &self.data {
                out.extend_from_slice(&v.to_be_bytes());
            }
        }
        out
    }

    /// Parse a P5 file. `path` is only used for error messages.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut pos = 0;
        if bytes.len() < 2 || &bytes[..2] != b"P5" {
            return Err(Error::format(path, 0, "missing P5 magic"));
        }
        pos += 2;
        let mut fields = [0usize; 3];
        for (k, field) in fields.iter_mut().enumerate() {
            skip_space_and_comments(bytes, &mut pos);
            let start = pos;
            while pos < bytes.len() && bytes[pos].is_ascii_digit() {
                pos += 1;
            }
            if start == pos {
                let what = ["width", "height", "maxval"][k];
                return Err(Error::format(path, pos, format!("expected {what}")));
            }
            let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
            *field = text
                .parse()
                .map_err(|_| Error::format(path, start, format!("number '{text}' out of range")))?;
        }
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(Error::format(path, pos, "expected whitespace after maxval"));
        }
        pos += 1;
        let [width, height, maxval] = fields;
        if width == 0 || height == 0 {
            return Err(Error::format(path, pos, "zero image dimension"));
        }
        if maxval == 0 || maxval > 65535 {
            return Err(Error::format(path, pos, format!("maxval {maxval} not in 1..=65535")));
        }
        let bps = if maxval < 256 { 1 } else { 2 };
        let need = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(bps))
            .ok_or_else(|| Error::format(path, pos, "image dimensions overflow"))?;
        let body = &bytes[pos..];
        if body.len() < need {
            return Err(Error::format(
                path,
                bytes.len(),
                format!("truncated pixel data: expected {need} bytes, found {}", body.len()),
            ));
        }
        let data: Vec<u16> = if bps == 1 {
            body[..need].iter().map(|&b| b as u16).collect()
        } else {
            body[..need].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        };
        if let Some(i) = data.iter().position(|&v| v as usize > maxval) {
            return Err(Error::format(
                path,
                pos + i * bps,
                format!("sample {} exceeds maxval {maxval}", data[i]),
            ));
        }
        Ok(Self {
            width,
            height,
            maxval: maxval as u16,
            data,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

fn skip_space_and_comments(bytes: &[u8], pos: &mut usize) {
    while *pos < bytes.len() {
        if bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        } else if bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
}

/// Quantize intensities in `[0, 1]` to 16 bits.
pub fn quantize16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

pub fn dequantize16(v: u16) -> f64 {
    v as f64 / 65535.0
}
