//! Named weight tensors, their binary file format and seeded initialization.
//!
//! File layout (little-endian):
//!
//! ```text
//! "ASLW" | version: u8 = 1
//! repeated: name_len: u16 | name: utf-8 | rank: u8 | dims: u32 × rank | values: f32 × Π dims
//! terminator: name_len = 0
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ASLW";
pub const VERSION: u8 = 1;

/// Gain applied to offset-predictor kernels so freshly initialized
/// deformations stay close to the regular grid.
pub const PREDICTOR_GAIN: f32 = 0.1;

/// How a tensor is filled by [`seeded_random_weights`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitRule {
    /// Uniform in `±sqrt(6 / fan_in)` times `gain`.
    Uniform { fan_in: usize, gain: f32 },
    Zeros,
    Ones,
    /// Zeros except a single channel set to one.
    OneHot { index: usize },
}

/// One entry of an architecture table.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub init: InitRule,
}

impl TensorSpec {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, init: InitRule) -> Self {
        Self {
            name: name.into(),
            dims,
            init,
        }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    entries: Vec<WeightEntry>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, dims: Vec<usize>, values: Vec<f32>) -> Result<()> {
        let name = name.into();
        if dims.iter().product::<usize>() != values.len() {
            return Err(Error::shape(format!(
                "{name}: {} values for dims {dims:?}",
                values.len()
            )));
        }
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(Error::validation("weight names must be 1..=65535 bytes"));
        }
        self.entries.push(WeightEntry { name, dims, values });
        Ok(())
    }

    pub fn entries(&self) -> &[WeightEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [WeightEntry] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&WeightEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Looks up `name` and checks its dims.
    pub fn tensor(&self, name: &str, dims: &[usize]) -> Result<&[f32]> {
        let e = self
            .get(name)
            .ok_or_else(|| Error::validation(format!("missing weight tensor {name}")))?;
        if e.dims != dims {
            return Err(Error::validation(format!(
                "{name} has dims {:?}, expected {dims:?}",
                e.dims
            )));
        }
        Ok(&e.values)
    }

    /// Every table entry present exactly once with matching dims, and nothing extra.
    pub fn validate(&self, table: &[TensorSpec]) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::validation(format!("duplicate weight tensor {}", e.name)));
            }
        }
        for spec in table {
            self.tensor(&spec.name, &spec.dims)?;
        }
        let known: HashSet<&str> = table.iter().map(|s| s.name.as_str()).collect();
        if let Some(extra) = self.entries.iter().find(|e| !known.contains(e.name.as_str())) {
            return Err(Error::validation(format!(
                "unexpected weight tensor {}",
                extra.name
            )));
        }
        if let Some(e) = self
            .entries
            .iter()
            .find(|e| e.values.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::validation(format!("{} holds non-finite values", e.name)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dims.len() as u8);
            for &d in &e.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&0u16.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("weight file: bad magic"));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(Error::format(format!(
                "weight file: version {version}, expected {VERSION}"
            )));
        }
        let mut store = WeightStore::new();
        loop {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            if name_len == 0 {
                break;
            }
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format("weight file: name is not utf-8"))?
                .to_owned();
            let rank = r.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize);
            }
            let count: usize = dims.iter().product();
            let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::format("dims overflow"))?)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.insert(name, dims, values)?;
        }
        Ok(store)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format("weight file truncated")),
        }
    }
}

pub fn write_weights(store: &WeightStore, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, store.to_bytes())?;
    Ok(())
}

pub fn read_weights(path: impl AsRef<Path>) -> Result<WeightStore> {
    WeightStore::from_bytes(&fs::read(path)?)
}

/// Deterministic initialization of every tensor in `table`.
///
/// A single ChaCha8 stream seeded with `seed` is consumed in table order; each
/// uniform draw is `(next_u32 >> 8) · 2⁻²⁴ ∈ [0, 1)`, mapped to `±bound`.
pub fn seeded_random_weights(seed: u64, table: &[TensorSpec]) -> WeightStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightStore::new();
    for spec in table {
        let n = spec.len();
        let values = match spec.init {
            InitRule::Uniform { fan_in, gain } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt() as f32 * gain;
                (0..n)
                    .map(|_| {
                        let u = (rng.next_u32() >> 8) as f32 / (1u32 << 24) as f32;
                        (2.0 * u - 1.0) * bound
                    })
                    .collect()
            }
            InitRule::Zeros => vec![0.0; n],
            InitRule::Ones => vec![1.0; n],
            InitRule::OneHot { index } => {
                let mut v = vec![0.0; n];
                v[index] = 1.0;
                v
            }
        };
        store
            .insert(spec.name.clone(), spec.dims.clone(), values)
            .expect("spec dims match generated length");
    }
    store
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table() -> Vec<TensorSpec> {
        vec![
            TensorSpec::new("a.weight", vec![3, 3, 1, 1], InitRule::Uniform { fan_in: 9, gain: 1.0 }),
            TensorSpec::new("a.bias", vec![1], InitRule::Zeros),
            TensorSpec::new("a.var", vec![1], InitRule::Ones),
        ]
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = seeded_random_weights(42, &table());
        let b = seeded_random_weights(42, &table());
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = seeded_random_weights(43, &table());
        assert_ne!(a, c);
    }

    #[test]
    fn small_kernel_has_nine_finite_values() {
        let s = seeded_random_weights(0, &table());
        let w = s.tensor("a.weight", &[3, 3, 1, 1]).unwrap();
        assert_eq!(w.len(), 9);
        let bound = (6.0f32 / 9.0).sqrt();
        assert!(w.iter().all(|v| v.is_finite() && v.abs() <= bound));
        s.validate(&table()).unwrap();
    }

    #[test]
    fn round_trip_through_file() {
        let s = seeded_random_weights(9, &table());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        write_weights(&s, &path).unwrap();
        assert_eq!(read_weights(&path).unwrap(), s);
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let mut bytes = seeded_random_weights(1, &table()).to_bytes();
        bytes[0] = b'X';
        assert!(matches!(WeightStore::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_version_is_format_error() {
        let mut bytes = seeded_random_weights(1, &table()).to_bytes();
        bytes[4] = 2;
        assert!(matches!(WeightStore::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_file_is_format_error() {
        let bytes = seeded_random_weights(1, &table()).to_bytes();
        assert!(WeightStore::from_bytes(&bytes[..bytes.len() - 5]).is_err());
    }

    #[test]
    fn missing_layer_is_named() {
        let full = seeded_random_weights(1, &table());
        let mut partial = WeightStore::new();
        for e in full.entries().iter().filter(|e| e.name != "a.bias") {
            partial.insert(e.name.clone(), e.dims.clone(), e.values.clone()).unwrap();
        }
        let err = partial.validate(&table()).unwrap_err();
        assert!(err.to_string().contains("a.bias"), "{err}");
    }

    #[test]
    fn shape_and_duplicate_mismatch_rejected() {
        let mut s = seeded_random_weights(1, &table());
        s.insert("a.bias", vec![1], vec![0.0]).unwrap();
        assert!(s.validate(&table()).unwrap_err().to_string().contains("duplicate"));

        let mut t = table();
        t[1].dims = vec![2];
        assert!(seeded_random_weights(1, &table()).validate(&t).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_store_round_trips_bytewise(
            entries in proptest::collection::vec(
                ("[a-z]{1,12}", proptest::collection::vec(1usize..4, 0..3), any::<u32>()),
                0..5,
            )
        ) {
            let mut s = WeightStore::new();
            for (name, dims, bits) in entries {
                let n: usize = dims.iter().product();
                let values = (0..n).map(|i| f32::from_bits(bits.wrapping_add(i as u32 * 7919))).collect();
                s.insert(name, dims, values).unwrap();
            }
            let bytes = s.to_bytes();
            let back = WeightStore::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
