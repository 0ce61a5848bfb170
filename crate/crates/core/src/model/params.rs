//! Named parameter tensors, initialization and checkpoint files.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use usst_numcore::{Graph, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

impl Param {
    /// Group label: the name up to the first dot.
    pub fn group(&self) -> &str {
        self.name.split('.').next().unwrap_or(&self.name)
    }
}

/// Ordered parameter collection with name lookup.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, frozen: bool) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, frozen });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.position(name).map(|i| &self.params[i])
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.value.numel()).sum()
    }

    /// Adds every parameter to `g`; frozen ones (or all, when `trainable` is
    /// false) become constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable && !p.frozen {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Graph handles of a bound [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

/// Seeded initializer used while building a store.
pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Glorot-uniform `[fan_in, fan_out]` matrix scaled by `gain`.
    pub fn glorot(&mut self, fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
        let a = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(vec![fan_in, fan_out], a)
    }

    pub fn uniform(&mut self, shape: Vec<usize>, a: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-a..=a)).collect();
        Tensor::new(shape, data).expect("shape matches data")
    }
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    offset: usize,
    shape: Vec<usize>,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct ArchiveManifest<M> {
    meta: M,
    params: Vec<Entry>,
}

fn sidecar(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

/// Writes `path.bin` (little-endian doubles) and `path.json` (manifest with
/// name, offset, shape and frozen flag per tensor, plus `meta`).
pub fn save_archive<M: Serialize>(path: &Path, store: &ParamStore, meta: &M) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut bin = BufWriter::new(File::create(sidecar(path, "bin"))?);
    let mut entries = Vec::with_capacity(store.len());
    let mut offset = 0;
    for p in store.params() {
        for v in p.value.data() {
            bin.write_all(&v.to_le_bytes())?;
        }
        entries.push(Entry {
            name: p.name.clone(),
            offset,
            shape: p.value.shape().to_vec(),
            frozen: p.frozen,
        });
        offset += p.value.numel();
    }
    bin.flush()?;
    let mut js = BufWriter::new(File::create(sidecar(path, "json"))?);
    serde_json::to_writer_pretty(&mut js, &ArchiveManifest { meta, params: entries })?;
    js.write_all(b"\n")?;
    js.flush()?;
    Ok(())
}

pub fn load_archive<M: for<'de> Deserialize<'de>>(path: &Path) -> Result<(ParamStore, M)> {
    let manifest: ArchiveManifest<M> = serde_json::from_reader(BufReader::new(File::open(sidecar(path, "json"))?))?;
    let mut raw = Vec::new();
    BufReader::new(File::open(sidecar(path, "bin"))?).read_to_end(&mut raw)?;
    if raw.len() % 8 != 0 {
        return Err(Error::Config(format!("{} is not a whole number of doubles", sidecar(path, "bin").display())));
    }
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut store = ParamStore::new();
    for e in manifest.params {
        let n: usize = e.shape.iter().product();
        let data = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| Error::Config(format!("tensor {} runs past the end of the archive", e.name)))?
            .to_vec();
        store.insert(e.name, Tensor::new(e.shape, data)?, e.frozen);
    }
    Ok((store, manifest.meta))
}
