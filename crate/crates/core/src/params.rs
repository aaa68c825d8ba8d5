//! Named parameter collections and their on-disk container.
//!
//! The container is `MGAIT1` followed by a little-endian `u64` header length,
//! a JSON header listing every tensor (name, kind, shape, byte offset into the
//! data block), and the data block of little-endian `f64` values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Trace, Var};
use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: &[u8; 6] = b"MGAIT1";
const CONTAINER_VERSION: u32 = 1;

/// Trainable tensors plus non-trainable buffers (batch-norm running statistics),
/// in a fixed order determined by whoever built the set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    params: Vec<(String, Tensor)>,
    buffers: Vec<(String, Tensor)>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_param(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.push((name.into(), value));
    }

    pub fn push_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.push((name.into(), value));
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn buffers(&self) -> &[(String, Tensor)] {
        &self.buffers
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        if slot.1.shape() != value.shape() {
            return Err(Error::shape("set", slot.1.shape(), value.shape()));
        }
        slot.1 = value;
        Ok(())
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .buffers
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::invalid(format!("unknown buffer {name}")))?;
        if slot.1.shape() != value.shape() {
            return Err(Error::shape("set_buffer", slot.1.shape(), value.shape()));
        }
        slot.1 = value;
        Ok(())
    }

    /// Checks that `other` has identical names and shapes, in the same order.
    pub fn check_compatible(&self, other: &[(String, Tensor)]) -> Result<()> {
        if self.params.len() != other.len() {
            return Err(Error::invalid(format!(
                "parameter count mismatch: {} vs {}",
                self.params.len(),
                other.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.params.iter().zip(other) {
            if na != nb {
                return Err(Error::invalid(format!("parameter order mismatch: {na} vs {nb}")));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::shape("parameters", ta.shape(), tb.shape()));
            }
        }
        Ok(())
    }

    /// Elementwise combination of two sets with the same layout; buffers are
    /// taken from `self`.
    pub fn zip_with(&self, other: &ParameterSet, f: impl Fn(f64, f64) -> f64) -> Result<ParameterSet> {
        self.check_compatible(&other.params)?;
        let params = self
            .params
            .iter()
            .zip(&other.params)
            .map(|((n, a), (_, b))| Ok((n.clone(), a.zip_map(b, "zip_with", &f)?)))
            .collect::<Result<_>>()?;
        Ok(ParameterSet {
            params,
            buffers: self.buffers.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(&str, &Tensor) -> Tensor) -> ParameterSet {
        ParameterSet {
            params: self.params.iter().map(|(n, t)| (n.clone(), f(n, t))).collect(),
            buffers: self.buffers.clone(),
        }
    }

    /// Bitwise equality of every parameter and buffer.
    pub fn bit_eq(&self, other: &ParameterSet) -> bool {
        let same = |a: &[(String, Tensor)], b: &[(String, Tensor)]| {
            a.len() == b.len() && a.iter().zip(b).all(|((na, ta), (nb, tb))| na == nb && ta.bit_eq(tb))
        };
        same(&self.params, &other.params) && same(&self.buffers, &other.buffers)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().chain(&self.buffers).all(|(_, t)| t.is_finite())
    }

    /// Registers every parameter as a differentiable leaf of `trace`.
    pub fn bind<'t>(&self, trace: &'t Trace) -> BoundParams<'t> {
        BoundParams {
            names: self.params.iter().map(|(n, _)| n.clone()).collect(),
            vars: self.params.iter().map(|(_, t)| trace.param(t.clone())).collect(),
        }
    }

    /// Registers every parameter as a constant of `trace`.
    pub fn bind_constants<'t>(&self, trace: &'t Trace) -> BoundParams<'t> {
        BoundParams {
            names: self.params.iter().map(|(n, _)| n.clone()).collect(),
            vars: self.params.iter().map(|(_, t)| trace.constant(t.clone())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut data = Vec::new();
        for (kind, list) in [("param", &self.params), ("buffer", &self.buffers)] {
            for (name, t) in list.iter() {
                entries.push(HeaderEntry {
                    name: name.clone(),
                    kind: kind.to_string(),
                    shape: t.shape().to_vec(),
                    offset: data.len() as u64,
                });
                for v in t.data() {
                    data.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let header = serde_json::to_vec(&Header {
            version: CONTAINER_VERSION,
            data_bytes: data.len() as u64,
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(CONTAINER_MAGIC.len() + 8 + header.len() + data.len());
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let rest = bytes
            .strip_prefix(CONTAINER_MAGIC.as_slice())
            .ok_or("missing MGAIT1 magic")?;
        if rest.len() < 8 {
            return Err("truncated header length".into());
        }
        let header_len = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
        let rest = &rest[8..];
        if rest.len() < header_len {
            return Err("truncated header".into());
        }
        let header: Header = serde_json::from_slice(&rest[..header_len]).map_err(|e| e.to_string())?;
        if header.version != CONTAINER_VERSION {
            return Err(format!("unsupported container version {}", header.version));
        }
        let data = &rest[header_len..];
        if data.len() as u64 != header.data_bytes {
            return Err(format!("data block is {} bytes, header says {}", data.len(), header.data_bytes));
        }
        let mut set = ParameterSet::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + n * 8;
            let raw = data.get(start..end).ok_or_else(|| format!("tensor {} out of bounds", e.name))?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(&e.shape, values).map_err(|err| err.to_string())?;
            match e.kind.as_str() {
                "param" => set.push_param(e.name, t),
                "buffer" => set.push_buffer(e.name, t),
                other => return Err(format!("unknown tensor kind {other}")),
            }
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|message| Error::Format {
            path: path.to_path_buf(),
            message,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    data_bytes: u64,
    tensors: Vec<HeaderEntry>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    kind: String,
    shape: Vec<usize>,
    offset: u64,
}

/// Parameters registered on a trace, addressable by name.
#[derive(Clone)]
pub struct BoundParams<'t> {
    names: Vec<String>,
    vars: Vec<Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn from_vars(names: Vec<String>, vars: Vec<Var<'t>>) -> Self {
        assert_eq!(names.len(), vars.len());
        Self { names, vars }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Same names, new nodes.
    pub fn with_vars(&self, vars: Vec<Var<'t>>) -> Self {
        Self::from_vars(self.names.clone(), vars)
    }
}
