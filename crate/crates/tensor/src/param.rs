//! Named parameter collections and their flat binary file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"CRPS"   version u32   count u32
//! count × { name_len u32, name (UTF-8), rank u32, extents u64 × rank, data f64 × Π extents }
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CRPS";
pub const VERSION: u32 = 1;

/// Parameters keyed by name, iterated in lexicographic order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts `t` as a trainable parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(TensorError::Domain {
                op: "param_insert",
                detail: format!("duplicate parameter `{name}`"),
            });
        }
        self.params.insert(name, t.with_requires_grad(true));
        Ok(())
    }

    /// Conv weight `[out, in, k, k]` and bias `[out]` drawn from U(±√(1/fan_in)).
    pub fn init_conv(&mut self, name: &str, out_ch: usize, in_ch: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        let bound = (1.0 / (in_ch * k * k) as f64).sqrt();
        let w = Tensor::from_fn([out_ch, in_ch, k, k], |_| rng.random_range(-bound..bound));
        let b = Tensor::from_fn([out_ch], |_| rng.random_range(-bound..bound));
        self.insert(format!("{name}.weight"), w)?;
        self.insert(format!("{name}.bias"), b)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| TensorError::UnknownParam(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params.get_mut(name).ok_or_else(|| TensorError::UnknownParam(name.into()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Moves every parameter from `other` into `self`.
    pub fn merge(&mut self, other: ParamSet) -> Result<()> {
        for (k, v) in other.params {
            self.insert(k, v)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Records every parameter on `tape`. Parameters for which `frozen` returns true are
    /// recorded as constants and receive no gradient.
    pub fn bind(&self, tape: &mut Tape, frozen: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| {
                let v = if frozen(k) { tape.constant(t.clone()) } else { tape.leaf(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Adds the gradients of bound parameters into their grad buffers.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) -> Result<()> {
        for (name, &var) in &bound.vars {
            if let Some(g) = grads.get(var) {
                self.get_mut(name)?.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.numel() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(TensorError::Parse { offset: 0, detail: format!("bad magic {magic:?}") });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(TensorError::Parse { offset: 4, detail: format!("unsupported version {version}") });
        }
        let count = r.u32("count")?;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let at = r.pos;
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|e| TensorError::Parse { offset: at + 4, detail: format!("name is not UTF-8: {e}") })?
                .to_owned();
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            let mut numel: usize = 1;
            for _ in 0..rank {
                let e_at = r.pos;
                let e = usize::try_from(r.u64("extent")?)
                    .map_err(|_| TensorError::Parse { offset: e_at, detail: "extent overflows usize".into() })?;
                numel = numel
                    .checked_mul(e)
                    .ok_or_else(|| TensorError::Parse { offset: e_at, detail: "element count overflows".into() })?;
                shape.push(e);
            }
            let nbytes = numel
                .checked_mul(8)
                .ok_or_else(|| TensorError::Parse { offset: r.pos, detail: "payload size overflows".into() })?;
            let raw = r.take(nbytes, "tensor data")?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(shape, data)?;
            set.insert(name, t).map_err(|e| TensorError::Parse { offset: at, detail: e.to_string() })?;
        }
        if r.pos != bytes.len() {
            return Err(TensorError::Parse { offset: r.pos, detail: "trailing bytes after last parameter".into() });
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| TensorError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| TensorError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| TensorError::Parse {
            offset: self.pos,
            detail: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Handles recorded elsewhere, e.g. by a gradient checker.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound { vars: vars.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| TensorError::UnknownParam(name.into()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}
