//! Binary checkpoint container.
//!
//! Layout (little endian): the 8-byte magic `DAUCKPT1`, a `u32` version, a
//! `u32` block count, then per block a `u32` name length, the UTF-8 name, a
//! `u64` payload length, the payload and a CRC32 of name and payload.
//! Numeric arrays are stored as `f64`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Network, NetworkSpec};
use crate::optim::ParamGroup;
use crate::tensor::Scalar;
use crate::train::RNG_ID;

pub const MAGIC: &[u8; 8] = b"DAUCKPT1";
pub const VERSION: u32 = 1;

/// Everything needed to rebuild a network and continue training it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub step: u64,
    pub rng: String,
    /// Learnable arrays in [`Network::param_layout`] order.
    pub params: Vec<(String, Vec<f64>)>,
    pub buffers: Vec<(String, Vec<f64>)>,
    /// Per group: multiplier, decay flag and velocity.
    pub groups: Vec<(f64, bool, Vec<f64>)>,
}

impl Checkpoint {
    pub fn capture<T: Scalar>(net: &Network<T>, groups: &[ParamGroup], step: usize) -> Self {
        let params = net
            .param_layout()
            .into_iter()
            .zip(net.params())
            .map(|(info, v)| (info.name, v.iter().map(|x| x.f64()).collect()))
            .collect();
        Checkpoint {
            spec: net.spec().clone(),
            step: step as u64,
            rng: RNG_ID.to_string(),
            params,
            buffers: net.buffers(),
            groups: groups
                .iter()
                .map(|g| (g.lr_multiplier, g.weight_decay_enabled, g.velocity.clone()))
                .collect(),
        }
    }

    /// Builds the network and optimiser groups. Nothing is returned unless
    /// every array matches the layout and every DAU invariant holds.
    pub fn restore<T: Scalar>(&self) -> Result<(Network<T>, Vec<ParamGroup>)> {
        if self.rng != RNG_ID {
            return Err(Error::Data(format!("checkpoint RNG `{}` is not `{RNG_ID}`", self.rng)));
        }
        let mut net = Network::<T>::build(&self.spec)?;
        let layout = net.param_layout();
        if layout.len() != self.params.len() || layout.len() != self.groups.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameter arrays and {} groups, network needs {}",
                self.params.len(),
                self.groups.len(),
                layout.len()
            )));
        }
        for (info, (name, v)) in layout.iter().zip(&self.params) {
            if &info.name != name || info.len != v.len() {
                return Err(Error::Data(format!(
                    "parameter `{name}` ({} values) does not match `{}` ({} values)",
                    v.len(),
                    info.name,
                    info.len
                )));
            }
        }
        for (dst, (_, src)) in net.params_mut().into_iter().zip(&self.params) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = T::of(s);
            }
        }
        for (name, v) in &self.buffers {
            net.set_buffer(name, v)?;
        }
        net.validate()?;
        let mut groups = net.param_groups(1.0);
        for (g, (mult, decay, vel)) in groups.iter_mut().zip(&self.groups) {
            if vel.len() != g.velocity.len() {
                return Err(Error::dim("velocity", g.velocity.len(), vel.len()));
            }
            g.lr_multiplier = *mult;
            g.weight_decay_enabled = *decay;
            g.velocity.clone_from(vel);
        }
        Ok((net, groups))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut blocks: Vec<(String, Vec<u8>)> = vec![
            ("spec".into(), self.spec.to_text().into_bytes()),
            ("step".into(), self.step.to_le_bytes().to_vec()),
            ("rng".into(), self.rng.clone().into_bytes()),
        ];
        for (name, v) in &self.params {
            blocks.push((format!("param:{name}"), f64_bytes(v)));
        }
        for (name, v) in &self.buffers {
            blocks.push((format!("buffer:{name}"), f64_bytes(v)));
        }
        for (i, (mult, decay, vel)) in self.groups.iter().enumerate() {
            let mut p = mult.to_le_bytes().to_vec();
            p.push(*decay as u8);
            p.extend(f64_bytes(vel));
            blocks.push((format!("group:{i}"), p));
        }
        let mut out = MAGIC.to_vec();
        out.extend(VERSION.to_le_bytes());
        out.extend((blocks.len() as u32).to_le_bytes());
        for (name, payload) in blocks {
            let mut crc = crc32fast::Hasher::new();
            crc.update(name.as_bytes());
            crc.update(&payload);
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((payload.len() as u64).to_le_bytes());
            out.extend(&payload);
            out.extend(crc.finalize().to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: "not a DAU checkpoint (bad magic)".into(),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32("block count")?;
        let mut spec = None;
        let mut step = None;
        let mut rng = None;
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        let mut groups = Vec::new();
        for _ in 0..count {
            let (name, payload) = r.block()?;
            let corrupt = |m: &str| Error::Format {
                offset: r.pos as u64,
                message: format!("block `{name}`: {m}"),
            };
            if name == "spec" {
                let text = std::str::from_utf8(payload).map_err(|_| corrupt("not UTF-8"))?;
                spec = Some(NetworkSpec::from_text(text)?);
            } else if name == "step" {
                step = Some(u64::from_le_bytes(payload.try_into().map_err(|_| corrupt("bad length"))?));
            } else if name == "rng" {
                rng = Some(String::from_utf8(payload.to_vec()).map_err(|_| corrupt("not UTF-8"))?);
            } else if let Some(n) = name.strip_prefix("param:") {
                params.push((n.to_string(), read_f64s(payload).ok_or_else(|| corrupt("bad length"))?));
            } else if let Some(n) = name.strip_prefix("buffer:") {
                buffers.push((n.to_string(), read_f64s(payload).ok_or_else(|| corrupt("bad length"))?));
            } else if name.starts_with("group:") {
                if payload.len() < 9 {
                    return Err(corrupt("bad length"));
                }
                let mult = f64::from_le_bytes(payload[..8].try_into().expect("8 bytes"));
                let vel = read_f64s(&payload[9..]).ok_or_else(|| corrupt("bad length"))?;
                groups.push((mult, payload[8] != 0, vel));
            } else {
                return Err(corrupt("unknown block"));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                message: "trailing bytes after the last block".into(),
            });
        }
        let missing = |b: &str| Error::Format {
            offset: bytes.len() as u64,
            message: format!("missing `{b}` block"),
        };
        Ok(Checkpoint {
            spec: spec.ok_or_else(|| missing("spec"))?,
            step: step.ok_or_else(|| missing("step"))?,
            rng: rng.ok_or_else(|| missing("rng"))?,
            params,
            buffers,
            groups,
        })
    }
}

fn f64_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn read_f64s(b: &[u8]) -> Option<Vec<f64>> {
    if b.len() % 8 != 0 {
        return None;
    }
    Some(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                message: format!("file ends inside {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    /// A named block with its checksum verified. A block cut short by the
    /// end of the file fails its checksum.
    fn block(&mut self) -> Result<(String, &'a [u8])> {
        let len = self.u32("block header")? as usize;
        let name_bytes = self.take(len, "block name")?;
        let name = String::from_utf8_lossy(name_bytes).into_owned();
        let truncated = |_| Error::Checksum { block: name.clone() };
        let size = self.take(8, "block length").map_err(truncated)?;
        let size = u64::from_le_bytes(size.try_into().expect("8 bytes")) as usize;
        let payload = self.take(size, "block payload").map_err(truncated)?;
        let stored = self.take(4, "block checksum").map_err(truncated)?;
        let mut crc = crc32fast::Hasher::new();
        crc.update(name_bytes);
        crc.update(payload);
        if crc.finalize() != u32::from_le_bytes(stored.try_into().expect("4 bytes")) {
            return Err(Error::Checksum { block: name });
        }
        Ok((name, payload))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
