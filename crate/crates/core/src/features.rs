//! Keypoints with descriptors, and their text and binary file formats.
//!
//! Text: a header `ASLF1 <count> <dim>`, then one line per keypoint
//! `x y score pyramid_scale d₁ … d_dim`. Binary: `"ASLB"`, `u32` count,
//! `u32` dim, then per keypoint `x y score pyramid_scale` and the descriptor,
//! all little-endian `f32`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::detector::Keypoint;
use crate::error::{Error, Result};

pub const TEXT_MAGIC: &str = "ASLF1";
pub const BINARY_MAGIC: &[u8; 4] = b"ASLB";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureSet {
    pub keypoints: Vec<Keypoint>,
    /// Row-major, `dim` values per keypoint.
    pub descriptors: Vec<f32>,
    pub dim: usize,
}

impl FeatureSet {
    pub fn new(dim: usize) -> Self {
        Self {
            keypoints: Vec::new(),
            descriptors: Vec::new(),
            dim,
        }
    }

    pub fn push(&mut self, kp: Keypoint, descriptor: &[f32]) -> Result<()> {
        if descriptor.len() != self.dim {
            return Err(Error::shape(format!(
                "descriptor of length {} in a {}-d set",
                descriptor.len(),
                self.dim
            )));
        }
        self.keypoints.push(kp);
        self.descriptors.extend_from_slice(descriptor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn descriptor(&self, i: usize) -> &[f32] {
        &self.descriptors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{TEXT_MAGIC} {} {}", self.len(), self.dim).unwrap();
        for (i, kp) in self.keypoints.iter().enumerate() {
            write!(s, "{} {} {} {}", kp.x, kp.y, kp.score, kp.pyramid_scale).unwrap();
            for v in self.descriptor(i) {
                write!(s, " {v}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::format("empty feature file"))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some(TEXT_MAGIC) {
            return Err(Error::format("feature file: bad magic"));
        }
        let parse_usize = |f: Option<&str>, what: &str| -> Result<usize> {
            f.and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(format!("feature file: bad {what}")))
        };
        let count = parse_usize(fields.next(), "count")?;
        let dim = parse_usize(fields.next(), "descriptor dimension")?;
        let mut set = FeatureSet::new(dim);
        for (n, line) in lines.enumerate() {
            let vals: Vec<f32> = line
                .split_whitespace()
                .map(|v| v.parse::<f32>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format(format!("feature file line {}: {e}", n + 2)))?;
            if vals.len() != 4 + dim {
                return Err(Error::format(format!(
                    "feature file line {}: {} values, expected {}",
                    n + 2,
                    vals.len(),
                    4 + dim
                )));
            }
            set.push(keypoint_from(&vals[..4]), &vals[4..])?;
        }
        if set.len() != count {
            return Err(Error::format(format!(
                "feature file declares {count} keypoints but holds {}",
                set.len()
            )));
        }
        set.ensure_finite()?;
        Ok(set)
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.len() * (4 + self.dim) * 4);
        out.extend_from_slice(BINARY_MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for (i, kp) in self.keypoints.iter().enumerate() {
            for v in [kp.x, kp.y, kp.score, kp.pyramid_scale]
                .iter()
                .chain(self.descriptor(i))
            {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_binary(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != BINARY_MAGIC {
            return Err(Error::format("binary feature file: bad magic"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (count, dim) = (word(4), word(8));
        let record = (4 + dim) * 4;
        let body = &bytes[12..];
        if Some(body.len()) != count.checked_mul(record) {
            return Err(Error::format(format!(
                "binary feature file: {} payload bytes for {count} records of {record}",
                body.len()
            )));
        }
        let mut set = FeatureSet::new(dim);
        if record > 0 {
            for rec in body.chunks_exact(record) {
                let vals: Vec<f32> = rec
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                set.push(keypoint_from(&vals[..4]), &vals[4..])?;
            }
        }
        set.ensure_finite()?;
        Ok(set)
    }

    fn ensure_finite(&self) -> Result<()> {
        let kp_ok = self
            .keypoints
            .iter()
            .all(|k| k.x.is_finite() && k.y.is_finite() && k.score.is_finite() && k.pyramid_scale.is_finite());
        if !kp_ok || self.descriptors.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("feature file holds non-finite values"));
        }
        Ok(())
    }

    /// Writes the binary format when `binary`, the text format otherwise.
    pub fn save(&self, path: impl AsRef<Path>, binary: bool) -> Result<()> {
        if binary {
            fs::write(path, self.to_binary())?;
        } else {
            fs::write(path, self.to_text())?;
        }
        Ok(())
    }

    /// Reads either format, recognized by its magic.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.starts_with(BINARY_MAGIC) {
            Self::from_binary(&bytes)
        } else {
            let text = std::str::from_utf8(&bytes).map_err(|_| Error::format("feature file is not utf-8"))?;
            Self::from_text(text)
        }
    }
}

fn keypoint_from(v: &[f32]) -> Keypoint {
    Keypoint {
        x: v[0],
        y: v[1],
        score: v[2],
        level_hint: 0,
        pyramid_scale: v[3],
    }
}
