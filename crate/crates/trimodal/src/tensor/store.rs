//! Named parameter storage and the on-disk tensor container.
//!
//! The container is a manifest (name, shape, byte offset) plus one contiguous
//! little-endian blob of values. The same format backs model checkpoints and
//! exported embedding files; round-trips are byte-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Precision, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TMTENSR1";

/// Deterministic per-name seed derivation, stable across runs and platforms.
pub fn seed_for(base: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    splitmix64(base ^ h)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Mutable collection of named parameter tensors.
///
/// Iteration order is the sorted name order, so every pass over the store is
/// deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Replace an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        match self.params.get_mut(name) {
            Some(old) => {
                if old.shape() != t.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "ParamStore::set",
                        lhs: old.shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
                *old = t;
                Ok(())
            }
            None => Err(Error::MissingParam(name.to_string())),
        }
    }

    /// Scaled-normal init (std 0.02 unless overridden), derived from the
    /// parameter name so creation order never matters.
    pub fn init_randn(&mut self, name: &str, shape: Vec<usize>, std: f64, base_seed: u64) {
        if !self.params.contains_key(name) {
            let t = Tensor::randn(shape, std, seed_for(base_seed, name));
            self.params.insert(name.to_string(), t);
        }
    }

    pub fn init_const(&mut self, name: &str, shape: Vec<usize>, value: f64) {
        if !self.params.contains_key(name) {
            let numel = shape.iter().product();
            let t = Tensor::new(shape, vec![value; numel]).expect("consistent shape");
            self.params.insert(name.to_string(), t);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_tensors(self) -> BTreeMap<String, Tensor> {
        self.params
    }

    pub fn from_tensors(params: BTreeMap<String, Tensor>) -> Self {
        ParamStore { params }
    }
}

/// One-graph cache of parameter leaves.
///
/// Forward code requests parameters by name; the first request per graph
/// clones the tensor into a leaf node, later requests reuse it. After
/// `backward`, [`ParamBinding::bound`] pairs each touched parameter with its
/// node so the optimizer can read gradients off the graph. A binding must not
/// outlive the graph it populated.
pub struct ParamBinding<'a> {
    store: &'a ParamStore,
    vars: std::cell::RefCell<BTreeMap<String, super::Var>>,
}

impl<'a> ParamBinding<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        ParamBinding {
            store,
            vars: std::cell::RefCell::new(BTreeMap::new()),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn var(&self, g: &mut super::Graph, name: &str) -> Result<super::Var> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(*v);
        }
        let t = self.store.get(name)?.clone();
        let v = g.leaf(t, true);
        self.vars.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters touched so far, in sorted name order.
    pub fn bound(&self) -> Vec<(String, super::Var)> {
        self.vars
            .borrow()
            .iter()
            .map(|(k, v)| (k.clone(), *v))
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    dtype: String,
    extras: serde_json::Value,
    entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

/// Write tensors to `path` in the container format.
pub fn save_tensors(
    path: &Path,
    tensors: &BTreeMap<String, Tensor>,
    precision: Precision,
    extras: &serde_json::Value,
) -> Result<()> {
    let width = precision.byte_width();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += (t.numel() * width) as u64;
    }
    let manifest = Manifest {
        version: 1,
        dtype: precision.as_str().to_string(),
        extras: extras.clone(),
        entries,
    };
    let json = serde_json::to_vec(&manifest)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for t in tensors.values() {
        match precision {
            Precision::F64 => {
                for v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            Precision::F32 => {
                for v in t.data() {
                    w.write_all(&(*v as f32).to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a container written by [`save_tensors`].
pub fn load_tensors(
    path: &Path,
) -> Result<(BTreeMap<String, Tensor>, Precision, serde_json::Value)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: not a tensor container (bad magic)",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let json_len = u64::from_le_bytes(len_bytes) as usize;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json)?;
    let manifest: Manifest = serde_json::from_slice(&json)?;
    if manifest.version != 1 {
        return Err(Error::Format(format!(
            "unsupported container version {}",
            manifest.version
        )));
    }
    let precision = Precision::parse(&manifest.dtype)?;
    let width = precision.byte_width();

    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;

    let mut out = BTreeMap::new();
    for e in &manifest.entries {
        let numel: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + numel * width;
        if end > blob.len() {
            return Err(Error::Format(format!(
                "entry `{}` extends past end of blob",
                e.name
            )));
        }
        let mut data = Vec::with_capacity(numel);
        match precision {
            Precision::F64 => {
                for chunk in blob[start..end].chunks_exact(8) {
                    data.push(f64::from_le_bytes(chunk.try_into().expect("exact chunk")));
                }
            }
            Precision::F32 => {
                for chunk in blob[start..end].chunks_exact(4) {
                    data.push(f64::from(f32::from_le_bytes(
                        chunk.try_into().expect("exact chunk"),
                    )));
                }
            }
        }
        out.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    Ok((out, precision, manifest.extras))
}
