//! Named parameter storage, seeded initialization and the weight-archive format.
//!
//! Archive layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "SHWKARC\0"
//! version    u32      ARCHIVE_VERSION
//! config     u64      hash of the network config the weights belong to
//! step       u64      training step of the snapshot
//! count      u32      number of parameter blocks
//! per block, sorted by name:
//!   name_len u32, name (utf-8), ndim u32, dims u32 × ndim, data f32 × numel
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const ARCHIVE_MAGIC: &[u8; 8] = b"SHWKARC\0";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
    /// Uniform on `[-b, b]`.
    Uniform(f64),
}

impl Init {
    /// Fan-in scaled uniform init, the usual default for linear layers.
    pub fn fan_in(fan_in: usize) -> Init {
        Init::Uniform(1.0 / (fan_in.max(1) as f64).sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    /// Missing parameters are created from their init.
    Create,
    /// Every requested parameter must already exist.
    Require,
}

/// Owns every trainable tensor of a network, keyed by dotted name.
pub struct ParamStore {
    vars: Mutex<BTreeMap<String, Var>>,
    dtype: DType,
    device: Device,
    seed: u64,
    mode: Mode,
    frozen: bool,
    step: u64,
}

impl ParamStore {
    /// Empty store that initializes parameters on first request.
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: Mutex::new(BTreeMap::new()),
            dtype,
            device: Device::Cpu,
            seed,
            mode: Mode::Create,
            frozen: false,
            step: 0,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn root(&self) -> Params<'_> {
        Params {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.vars.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.lock().unwrap().keys().cloned().collect()
    }

    /// All variables in name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.vars
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.lock().unwrap().get(name).cloned()
    }

    pub fn tensor(&self, name: &str) -> Option<Tensor> {
        self.var(name).map(|v| v.as_tensor().clone())
    }

    pub fn num_elements(&self) -> usize {
        self.vars
            .lock()
            .unwrap()
            .values()
            .map(|v| v.elem_count())
            .sum()
    }

    fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut vars = self.vars.lock().unwrap();
        if let Some(v) = vars.get(name) {
            if v.dims() != shape {
                return Err(Error::Archive(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    v.dims()
                )));
            }
            return Ok(self.expose(v));
        }
        if self.mode == Mode::Require {
            return Err(Error::Archive(format!("missing parameter `{name}`")));
        }
        let values = init_values(self.seed, name, shape, init);
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let v = Var::from_tensor(&t)?;
        let out = self.expose(&v);
        vars.insert(name.to_string(), v);
        Ok(out)
    }

    fn expose(&self, v: &Var) -> Tensor {
        if self.frozen {
            v.as_tensor().detach()
        } else {
            v.as_tensor().clone()
        }
    }

    fn copy_with(&self, frozen: bool) -> Result<ParamStore> {
        let vars = self
            .vars
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| Ok((k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(ParamStore {
            vars: Mutex::new(vars),
            dtype: self.dtype,
            device: self.device.clone(),
            seed: self.seed,
            mode: Mode::Require,
            frozen,
            step: self.step,
        })
    }

    /// Deep copy of the current values. The copy refuses to create new parameters.
    pub fn snapshot(&self) -> Result<ParamStore> {
        self.copy_with(false)
    }

    /// Deep copy whose tensors are detached from autograd.
    pub fn frozen_snapshot(&self) -> Result<ParamStore> {
        self.copy_with(true)
    }

    /// Same store viewed as frozen. Shares storage with `self`.
    pub fn frozen_view(&self) -> ParamStore {
        ParamStore {
            vars: Mutex::new(self.vars.lock().unwrap().clone()),
            dtype: self.dtype,
            device: self.device.clone(),
            seed: self.seed,
            mode: Mode::Require,
            frozen: true,
            step: self.step,
        }
    }

    /// Same values converted to another dtype, trainable.
    pub fn to_dtype(&self, dtype: DType) -> Result<ParamStore> {
        let vars = self
            .vars
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| Ok((k.clone(), Var::from_tensor(&v.as_tensor().to_dtype(dtype)?)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(ParamStore {
            vars: Mutex::new(vars),
            dtype,
            device: self.device.clone(),
            seed: self.seed,
            mode: self.mode,
            frozen: self.frozen,
            step: self.step,
        })
    }

    /// Overwrites the values of existing parameters from `other`, for names starting with
    /// `prefix`. Returns the number of tensors imported.
    pub fn import_prefix(&self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let vars = self.vars.lock().unwrap();
        let mut n = 0;
        for (name, src) in other.vars() {
            if !name.starts_with(prefix) {
                continue;
            }
            let dst = vars
                .get(&name)
                .ok_or_else(|| Error::Archive(format!("imported block `{name}` is unknown")))?;
            if dst.dims() != src.dims() {
                return Err(Error::Archive(format!(
                    "imported block `{name}` has shape {:?}, expected {:?}",
                    src.dims(),
                    dst.dims()
                )));
            }
            dst.set(&src.as_tensor().to_dtype(self.dtype)?)?;
            n += 1;
        }
        Ok(n)
    }

    pub fn encode(&self, config_hash: u64) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&config_hash.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let vars = self.vars();
        out.extend_from_slice(&(vars.len() as u32).to_le_bytes());
        for (name, var) in vars {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(var.dims().len() as u32).to_le_bytes());
            for d in var.dims() {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            let values = var
                .as_tensor()
                .to_dtype(DType::F32)?
                .flatten_all()?
                .to_vec1::<f32>()?;
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], dtype: DType) -> Result<(ArchiveHeader, ParamStore)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != ARCHIVE_MAGIC {
            return Err(Error::Archive("bad magic".into()));
        }
        let version = r.u32()?;
        if version != ARCHIVE_VERSION {
            return Err(Error::Archive(format!("unsupported archive version {version}")));
        }
        let config_hash = r.u64()?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut vars = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Archive("parameter name is not utf-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let dims = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = dims.iter().product();
            let raw = r.take(numel * 4)?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::from_vec(values, dims, &Device::Cpu)?.to_dtype(dtype)?;
            vars.insert(name, Var::from_tensor(&t)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Archive("trailing bytes after last block".into()));
        }
        let store = ParamStore {
            vars: Mutex::new(vars),
            dtype,
            device: Device::Cpu,
            seed: 0,
            mode: Mode::Require,
            frozen: false,
            step,
        };
        Ok((
            ArchiveHeader {
                version,
                config_hash,
                step,
                count,
            },
            store,
        ))
    }

    pub fn save(&self, path: &Path, config_hash: u64) -> Result<()> {
        let bytes = self.encode(config_hash)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, dtype: DType) -> Result<(ArchiveHeader, ParamStore)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, dtype)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchiveHeader {
    pub version: u32,
    pub config_hash: u64,
    pub step: u64,
    pub count: usize,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Archive("truncated archive".into())),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

/// Scoped view into a [`ParamStore`].
#[derive(Clone)]
pub struct Params<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Params<'a> {
    pub fn pp(&self, name: impl AsRef<str>) -> Params<'a> {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Params {
            store: self.store,
            prefix,
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.get(&full, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

fn name_seed(seed: u64, name: &str) -> u64 {
    let digest = Sha256::digest(name.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    seed ^ u64::from_le_bytes(b)
}

fn init_values(seed: u64, name: &str, shape: &[usize], init: Init) -> Vec<f64> {
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, name));
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Const(c) => vec![c; n],
        Init::Normal(std) => {
            let d = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| d.sample(&mut rng)).collect()
        }
        Init::Uniform(b) => {
            if b == 0.0 {
                return vec![0.0; n];
            }
            let d = Uniform::new_inclusive(-b, b).expect("finite bound");
            (0..n).map(|_| d.sample(&mut rng)).collect()
        }
    }
}

/// Stable 64-bit hash of a serializable config, recorded in archives and run outputs.
pub fn config_hash<T: Serialize>(cfg: &T) -> u64 {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(b)
}
