//! Versioned binary snapshot of a network: every parameter, BN running
//! statistics, conv init weights and α.
//!
//! Layout (little endian): magic `RFDK`, `u32` version, space name,
//! genotype string (empty for a supernet), `u32` entry count, then per
//! entry its name, `u32` rank, `u64` dims and `f64` values. Strings are a
//! `u32` byte length followed by UTF-8.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Module, ParamKind};
use crate::space::{AlphaTable, Genotype, SpaceId};
use crate::supernet::Network;

const MAGIC: &[u8; 4] = b"RFDK";
pub const VERSION: u32 = 1;
const ALPHA: &str = "alpha";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub space: SpaceId,
    pub genotype: Option<Genotype>,
    pub entries: BTreeMap<String, Entry>,
}

impl Checkpoint {
    pub fn capture(net: &Network) -> Self {
        let mut entries = BTreeMap::new();
        for p in net.params() {
            let name = if p.kind == ParamKind::ArchAlpha {
                ALPHA.to_string()
            } else {
                p.name.clone()
            };
            entries.insert(
                name,
                Entry {
                    shape: p.tensor.shape().to_vec(),
                    data: p.tensor.data().to_vec(),
                },
            );
        }
        for bn in net.batch_norms() {
            let base = bn.gamma.name.trim_end_matches(".gamma");
            let c = bn.channels();
            for (suffix, v) in [("running_mean", &bn.running_mean), ("running_var", &bn.running_var)] {
                entries.insert(
                    format!("{base}.{suffix}"),
                    Entry {
                        shape: vec![c],
                        data: v.clone(),
                    },
                );
            }
        }
        for seq in net.seqs() {
            for conv in seq.convs() {
                entries.insert(
                    format!("{}.init", conv.weight.name),
                    Entry {
                        shape: conv.weight.tensor.shape().to_vec(),
                        data: conv.init_weight.clone(),
                    },
                );
            }
        }
        Checkpoint {
            space: net.cfg.space,
            genotype: net.genotype.clone(),
            entries,
        }
    }

    pub fn alpha(&self) -> Result<Option<AlphaTable>> {
        self.entries
            .get(ALPHA)
            .map(|e| AlphaTable::from_logits(self.space, e.data.clone()))
            .transpose()
    }

    fn take(&self, name: &str, shape: &[usize]) -> Result<&[f64]> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry `{name}`")))?;
        if e.shape != shape {
            return Err(Error::Checkpoint(format!(
                "entry `{name}` has shape {:?}, network expects {shape:?}",
                e.shape
            )));
        }
        Ok(&e.data)
    }

    /// Copies every stored value into a network of identical structure.
    pub fn restore(&self, net: &mut Network) -> Result<()> {
        if net.cfg.space != self.space || net.genotype != self.genotype {
            return Err(Error::Checkpoint(
                "network structure differs from the checkpoint".into(),
            ));
        }
        let loaded: Vec<Vec<f64>> = net
            .params()
            .iter()
            .map(|p| {
                let name = if p.kind == ParamKind::ArchAlpha {
                    ALPHA
                } else {
                    p.name.as_str()
                };
                Ok(self.take(name, p.tensor.shape())?.to_vec())
            })
            .collect::<Result<_>>()?;
        for (p, data) in net.params_mut().into_iter().zip(loaded) {
            p.tensor.data_mut().copy_from_slice(&data);
        }
        for bn in net.batch_norms_mut() {
            let base = bn.gamma.name.trim_end_matches(".gamma").to_string();
            let c = bn.channels();
            bn.running_mean = self.take(&format!("{base}.running_mean"), &[c])?.to_vec();
            bn.running_var = self.take(&format!("{base}.running_var"), &[c])?.to_vec();
        }
        let inits: Vec<Vec<f64>> = net
            .seqs()
            .iter()
            .flat_map(|s| s.convs())
            .map(|c| {
                Ok(self
                    .take(&format!("{}.init", c.weight.name), c.weight.tensor.shape())?
                    .to_vec())
            })
            .collect::<Result<_>>()?;
        for (conv, init) in net.convs_mut().into_iter().zip(inits) {
            conv.init_weight = init;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, self.space.name());
        put_str(
            &mut out,
            &self.genotype.as_ref().map(Genotype::to_string).unwrap_or_default(),
        );
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            put_str(&mut out, name);
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let space: SpaceId = r
            .string()?
            .parse()
            .map_err(|_| Error::Checkpoint("unknown space".into()))?;
        let genotype = match r.string()? {
            s if s.is_empty() => None,
            s => Some(Genotype::parse_in(space, &s)?),
        };
        let count = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(
                    n.checked_mul(8)
                        .ok_or_else(|| Error::Checkpoint("entry too large".into()))?,
                )?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            entries.insert(name, Entry { shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            space,
            genotype,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}
