//! Binary tensor records (`SSTF`) and model checkpoints (`SSCK`).
//!
//! All integers and floats are little-endian. A tensor record is
//! `"SSTF" | u32 version | u32 ndim | ndim x u64 dims | u8 dtype | payload`,
//! with dtype 0 meaning f32. A checkpoint is
//! `"SSCK" | u32 version | u32 len | config text | u32 count | count x (u32 len | name | SSTF)`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::nn::AdamState;
use crate::params::ParamStore;
use crate::tensor::{numel, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"SSTF";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SSCK";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        let b = self.take(8, what)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let m = self.take(4, "magic")?;
        if m != expected {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u32("version")?;
        if v != FORMAT_VERSION {
            return Err(Error::Version {
                found: v,
                expected: FORMAT_VERSION,
            });
        }
        Ok(())
    }

    fn string(&mut self, what: &'static str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        core::str::from_utf8(b)
            .map(ToString::to_string)
            .map_err(|_| Error::Format(format!("{what} is not valid UTF-8")))
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub fn write_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(TENSOR_MAGIC);
    put_u32(out, FORMAT_VERSION);
    put_u32(out, t.rank() as u32);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.push(DTYPE_F32);
    out.reserve(4 * t.numel());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn read_tensor(r: &mut Reader<'_>) -> Result<Tensor> {
    r.magic(TENSOR_MAGIC)?;
    r.version()?;
    let ndim = r.u32("tensor rank")? as usize;
    if ndim > 8 {
        return Err(Error::Format(format!("tensor rank {ndim} too large")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u64("tensor dims")? as usize);
    }
    let dtype = r.u8("tensor dtype")?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype {dtype}")));
    }
    let n = numel(&shape);
    let bytes = r.take(
        n.checked_mul(4).ok_or(Error::Truncated("tensor payload"))?,
        "tensor payload",
    )?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::new();
    write_tensor(&mut out, t);
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    read_tensor(&mut Reader::new(bytes))
}

/// Everything needed to resume or reuse a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Architecture and run-state keys; `state.*` keys are bookkeeping.
    pub config: KvMap,
    pub params: ParamStore,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(config: KvMap, params: ParamStore) -> Self {
        Self {
            config,
            params,
            adam: None,
        }
    }

    pub fn step(&self) -> u64 {
        self.config.get("state.step").unwrap_or(0)
    }

    pub fn set_step(&mut self, step: u64) {
        self.config.set("state.step", step);
    }

    /// Fails unless every non-`state.` key of `expected` carries the same
    /// value in this checkpoint.
    pub fn check_architecture(&self, expected: &KvMap) -> Result<()> {
        for (k, v) in expected.iter() {
            if k.starts_with("state.") {
                continue;
            }
            match self.config.raw(k) {
                Some(found) if found == v => {}
                Some(found) => {
                    return Err(Error::Architecture(format!(
                        "{k}: checkpoint has {found}, expected {v}"
                    )))
                }
                None => return Err(Error::Architecture(format!("{k}: missing from checkpoint"))),
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        let mut config = self.config.clone();
        if let Some(a) = &self.adam {
            config.set("state.adam_step", a.step);
        }
        put_str(&mut out, &config.to_text());
        let extra = if self.adam.is_some() { 3 } else { 1 };
        put_u32(&mut out, (self.params.len() * extra) as u32);
        for (name, t) in self.params.iter() {
            put_str(&mut out, name);
            write_tensor(&mut out, t);
        }
        if let Some(a) = &self.adam {
            for (prefix, moments) in [(ADAM_M, &a.m), (ADAM_V, &a.v)] {
                for ((name, _), t) in self.params.iter().zip(moments) {
                    put_str(&mut out, &format!("{prefix}{name}"));
                    write_tensor(&mut out, t);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        r.version()?;
        let config = KvMap::parse(&r.string("config blob")?)
            .map_err(|e| Error::Format(format!("config blob: {e}")))?;
        let count = r.u32("tensor count")? as usize;
        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for _ in 0..count {
            let name = r.string("tensor name")?;
            let t = read_tensor(&mut r)?;
            if let Some(rest) = name.strip_prefix(ADAM_M) {
                m.push((rest.to_string(), t));
            } else if let Some(rest) = name.strip_prefix(ADAM_V) {
                v.push((rest.to_string(), t));
            } else {
                params.push((name, t));
            }
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
        }
        let params = ParamStore::from_entries(params)?;
        let adam = if m.is_empty() && v.is_empty() {
            None
        } else {
            let order = |entries: Vec<(String, Tensor)>| -> Result<Vec<Tensor>> {
                if entries.len() != params.len() {
                    return Err(Error::Format(
                        "optimizer moments do not cover every parameter".into(),
                    ));
                }
                entries
                    .into_iter()
                    .zip(params.iter())
                    .map(|((n, t), (pn, p))| {
                        if n != pn || t.shape() != p.shape() {
                            Err(Error::Format(format!(
                                "optimizer moment {n} does not match {pn}"
                            )))
                        } else {
                            Ok(t)
                        }
                    })
                    .collect()
            };
            let mut state = AdamState::new(&params);
            state.m = order(m)?;
            state.v = order(v)?;
            state.step = config.get("state.adam_step").unwrap_or(0);
            Some(state)
        };
        Ok(Self {
            config,
            params,
            adam,
        })
    }
}
