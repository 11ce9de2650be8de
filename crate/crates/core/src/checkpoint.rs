//! Binary checkpoint (`.osdm`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "OSDM"  u32 version
//! u32 n   n bytes of key=value network configuration
//! u64     training step
//! table   parameters
//! u8      1 if optimizer state follows, else 0
//! [u64 optimizer step, table m, table v]
//! ```
//!
//! A table is `u32 count` followed by entries
//! `u32 name_len, name, u8 dtype (1 = f64), u32 rank, rank × u64 dims,
//! payload`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kv;
use crate::net::{Network, NetworkConfig, ParamStore};
use crate::optim::AdamW;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"OSDM";
pub const VERSION: u32 = 1;
pub const EXTENSION: &str = "osdm";
const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub params: ParamStore,
    pub optimizer: Option<AdamW>,
    pub step: u64,
}

impl Checkpoint {
    pub fn from_network(net: &Network, optimizer: Option<&AdamW>, step: u64) -> Self {
        Checkpoint {
            config: net.config().clone(),
            params: net.params().clone(),
            optimizer: optimizer.cloned(),
            step,
        }
    }

    /// Rebuilds the network and installs the stored tensors. Every stored
    /// name must exist with the same shape, and every parameter must be
    /// stored.
    pub fn to_network(&self) -> Result<Network> {
        let mut net = Network::new(self.config.clone())?;
        if net.params().len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, network expects {}",
                self.params.len(),
                net.params().len()
            )));
        }
        for (name, t) in self.params.iter() {
            net.params_mut().set(name, t.clone())?;
        }
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = kv::render(&self.config.to_pairs());
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let names: Vec<&str> = self.params.iter().map(|(n, _)| n).collect();
        write_table(&mut out, &names, self.params.tensors());
        match &self.optimizer {
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.step.to_le_bytes());
                write_table(&mut out, &names, &opt.m);
                write_table(&mut out, &names, &opt.v);
            }
            None => out.push(0),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not an .osdm checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let n = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Format("config is not UTF-8".into()))?;
        let mut config = NetworkConfig::default();
        for (k, v) in kv::parse_lines(text)? {
            if !config.set(&k, &v)? {
                return Err(Error::Format(format!("unknown configuration key `{k}`")));
            }
        }
        let step = r.u64()?;
        let (names, tensors) = read_table(&mut r)?;
        let mut params = ParamStore::new();
        for (name, t) in names.iter().zip(tensors) {
            if params.id(name).is_some() {
                return Err(Error::Format(format!("duplicate tensor `{name}`")));
            }
            params.add(name.clone(), t);
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let opt_step = r.u64()?;
                let (mn, m) = read_table(&mut r)?;
                let (vn, v) = read_table(&mut r)?;
                if mn != names || vn != names {
                    return Err(Error::Format(
                        "optimizer tables do not match parameters".into(),
                    ));
                }
                let mut opt = AdamW::new(params.tensors());
                for (i, (a, b)) in m.iter().zip(&v).enumerate() {
                    if a.shape() != params.tensors()[i].shape() || b.shape() != a.shape() {
                        return Err(Error::Format(format!(
                            "optimizer moment shape mismatch for `{}`",
                            names[i]
                        )));
                    }
                }
                opt.step = opt_step;
                opt.m = m;
                opt.v = v;
                Some(opt)
            }
            t => return Err(Error::Format(format!("bad optimizer flag {t}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config,
            params,
            optimizer,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Self::from_bytes(&bytes)
    }
}

fn write_table(out: &mut Vec<u8>, names: &[&str], tensors: &[Tensor]) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in names.iter().zip(tensors) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_table(r: &mut Reader<'_>) -> Result<(Vec<String>, Vec<Tensor>)> {
    let count = r.u32()? as usize;
    let (mut names, mut tensors) = (Vec::new(), Vec::new());
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F64 {
            return Err(Error::Format(format!(
                "tensor `{name}`: unsupported dtype tag {dtype}"
            )));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&l| l.checked_mul(8).is_some_and(|b| b <= r.remaining()))
            .ok_or_else(|| Error::Format(format!("tensor `{name}`: payload truncated")))?;
        let data = r
            .take(len * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t =
            Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
        names.push(name);
        tensors.push(t);
    }
    Ok((names, tensors))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format("unexpected end of checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
