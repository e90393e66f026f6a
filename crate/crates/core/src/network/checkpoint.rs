//! NETP checkpoint files.
//!
//! Layout, all integers little-endian:
//! `"NETP"`, `u32` layer count, then per layer `u32` name length, name bytes,
//! `u32` rank (4), shape `[cout, cin, 3, 3]` as `u32`s, `f32` kernel, `f32`
//! bias. Training checkpoints continue with `"ADAM"`, `u64` step counter,
//! `u64` completed epochs, then the first and second moments as two more
//! layer lists (count + layers).

use std::path::Path;

use super::layers::{Conv, KSIZE};
use super::{AdamState, NetParams};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"NETP";
const ADAM_MAGIC: &[u8; 4] = b"ADAM";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: NetParams<f32>,
    pub adam: Option<AdamState<f32>>,
    /// Epochs completed when the optimizer state was saved.
    pub epoch: u64,
}

impl Checkpoint {
    pub fn weights_only(params: NetParams<f32>) -> Self {
        Self {
            params,
            adam: None,
            epoch: 0,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * (self.params.param_count() + 64));
        out.extend_from_slice(MAGIC);
        write_layers(&mut out, &self.params);
        if let Some(adam) = &self.adam {
            out.extend_from_slice(ADAM_MAGIC);
            out.extend_from_slice(&adam.t.to_le_bytes());
            out.extend_from_slice(&self.epoch.to_le_bytes());
            write_layers(&mut out, &adam.m);
            write_layers(&mut out, &adam.v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Corrupt("missing NETP magic".into()));
        }
        let params = read_layers(&mut r)?;
        let mut ck = Self::weights_only(params);
        if r.pos < bytes.len() {
            if r.take(4)? != ADAM_MAGIC {
                return Err(Error::Corrupt("unexpected data after parameters".into()));
            }
            let t = r.u64()?;
            ck.epoch = r.u64()?;
            let m = read_layers(&mut r)?;
            let v = read_layers(&mut r)?;
            ck.adam = Some(AdamState { t, m, v });
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Corrupt(m) => Error::Corrupt(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn write_layers(out: &mut Vec<u8>, p: &NetParams<f32>) {
    out.extend_from_slice(&(p.layers.len() as u32).to_le_bytes());
    for l in &p.layers {
        out.extend_from_slice(&(l.name.len() as u32).to_le_bytes());
        out.extend_from_slice(l.name.as_bytes());
        out.extend_from_slice(&4u32.to_le_bytes());
        for d in [l.cout, l.cin, KSIZE, KSIZE] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in l.weight.iter().chain(&l.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn read_layers(r: &mut Reader) -> Result<NetParams<f32>> {
    let count = r.u32()? as usize;
    if count > 1024 {
        return Err(Error::Corrupt(format!("implausible layer count {count}")));
    }
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Corrupt("layer name is not UTF-8".into()))?;
        let rank = r.u32()?;
        if rank != 4 {
            return Err(Error::Corrupt(format!("layer {name}: rank {rank}, expected 4")));
        }
        let shape = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|d| d as usize);
        if shape[2] != KSIZE || shape[3] != KSIZE {
            return Err(Error::Corrupt(format!("layer {name}: kernel {shape:?}")));
        }
        let (cout, cin) = (shape[0], shape[1]);
        let mut layer = Conv::zeros(&name, cin, cout);
        let total = layer.weight.len() + layer.bias.len();
        let raw = r.take(4 * total)?;
        let mut vals = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        layer.weight.iter_mut().for_each(|v| *v = vals.next().unwrap());
        layer.bias.iter_mut().for_each(|v| *v = vals.next().unwrap());
        layers.push(layer);
    }
    let p = NetParams { layers };
    p.check_shapes()
        .map_err(|e| Error::Corrupt(format!("architecture mismatch: {e}")))?;
    Ok(p)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Corrupt(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            ))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
