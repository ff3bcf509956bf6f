//! Named tensors and the flat little-endian weights file.
//!
//! Layout: `u32` tensor count, then per tensor `u32` name length, UTF-8 name,
//! `u32` rank, `rank × u32` dims, and `f32` row-major data.

use std::collections::BTreeMap;
use std::path::Path;

use crate::backbone::sparse::ConvParams;
use crate::error::{Error, Result};
use crate::Real;

/// Anything holding learnable tensors.
pub trait ParamSet<T> {
    /// Visits every tensor as `(name, shape, values)` in a fixed order.
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, v| n += v.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Real> ParamSet<T> for ConvParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        f(&join(prefix, "weight"), &[self.taps, self.in_ch, self.out_ch], &self.weight);
        f(&join(prefix, "bias"), &[self.out_ch], &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        f(&join(prefix, "weight"), &[self.taps, self.in_ch, self.out_ch], &mut self.weight);
        f(&join(prefix, "bias"), &[self.out_ch], &mut self.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered collection of named `f32` tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    order: Vec<String>,
    tensors: BTreeMap<String, Tensor>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f32>) -> Result<()> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("TensorStore::insert", shape.iter().product::<usize>(), data.len()));
        }
        if self.tensors.contains_key(name) {
            return Err(Error::invalid("name", format!("duplicate tensor `{name}`")));
        }
        self.order.push(name.to_string());
        self.tensors.insert(
            name.to_string(),
            Tensor {
                shape: shape.to_vec(),
                data,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(String::as_str)
    }

    pub fn from_params<T: Real>(params: &dyn ParamSet<T>) -> Self {
        let mut store = Self::new();
        params.visit("", &mut |name, shape, data| {
            let v = data.iter().map(|x| x.to_f64_lossy() as f32).collect();
            store.insert(name, shape, v).expect("parameter names are unique");
        });
        store
    }

    /// Copies every tensor into `params`. Names and shapes must match
    /// exactly; extra tensors in the store are an error too.
    pub fn load_into<T: Real>(&self, params: &mut dyn ParamSet<T>) -> Result<()> {
        let mut err = None;
        let mut seen = 0usize;
        params.visit_mut("", &mut |name, shape, data| {
            if err.is_some() {
                return;
            }
            match self.tensors.get(name) {
                None => err = Some(Error::invalid("weights", format!("missing tensor `{name}`"))),
                Some(t) if t.shape != shape => {
                    err = Some(Error::shape("weights tensor shape", format!("{name} {shape:?}"), format!("{:?}", t.shape)))
                }
                Some(t) => {
                    seen += 1;
                    for (d, s) in data.iter_mut().zip(&t.data) {
                        *d = T::lit(*s as f64);
                    }
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if seen != self.len() {
            return Err(Error::invalid(
                "weights",
                format!("{} tensors in file, {seen} expected", self.len()),
            ));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.order.len() as u32).to_le_bytes());
        for name in &self.order {
            let t = &self.tensors[name];
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0, path };
        let count = cur.u32()?;
        let mut store = Self::new();
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| cur.err("tensor name is not UTF-8"))?
                .to_string();
            let rank = cur.u32()? as usize;
            let shape = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = cur.take(n.checked_mul(4).ok_or_else(|| cur.err("tensor too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store
                .insert(&name, &shape, data)
                .map_err(|e| Error::parse(path, 0, e.to_string()))?;
        }
        if cur.pos != bytes.len() {
            return Err(cur.err("trailing bytes after last tensor"));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn err(&self, reason: &str) -> Error {
        Error::parse(self.path, 0, format!("byte {}: {reason}", self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
