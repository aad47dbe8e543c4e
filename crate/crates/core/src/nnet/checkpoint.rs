//! `PLNW` parameter checkpoints.
//!
//! Layout (little-endian): magic, `u16` version, `u32` config length, JSON
//! config, `u64` seed, `u64` parameter count, parameters as `f64`, `u64`
//! running-statistics count, running statistics as `f64`, CRC-32 of all
//! preceding bytes.

use std::io::{Read, Write};
use std::path::Path;

use super::{NetConfig, Network, ParamStore};
use crate::error::{Error, Result};

const MAGIC: [u8; 4] = *b"PLNW";
pub const PLNW_VERSION: u16 = 1;

pub fn write_checkpoint<W: Write>(mut out: W, cfg: &NetConfig, params: &ParamStore) -> Result<()> {
    Network::new(cfg)?.check_params(params)?;
    let json = serde_json::to_vec(cfg).map_err(|e| Error::Malformed(format!("net config: {e}")))?;
    let mut buf = Vec::with_capacity(64 + json.len() + 8 * (params.len() + params.running().len()));
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&PLNW_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&params.seed().to_le_bytes());
    for block in [params.values(), params.running()] {
        buf.extend_from_slice(&(block.len() as u64).to_le_bytes());
        for v in block {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    out.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < self.pos + n {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n,
                available: self.bytes.len().saturating_sub(self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Malformed("vector length overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(NetConfig, ParamStore)> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
    if version != PLNW_VERSION {
        return Err(Error::Version {
            found: version,
            expected: PLNW_VERSION,
        });
    }
    let json_len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
    let json = cur.take(json_len)?;
    let seed = cur.u64()?;
    let values = cur.f64s()?;
    let running = cur.f64s()?;
    let body_end = cur.pos;
    let stored = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Malformed(format!("{} trailing bytes after checkpoint", bytes.len() - cur.pos)));
    }
    let cfg: NetConfig = serde_json::from_slice(json).map_err(|e| Error::Malformed(format!("net config: {e}")))?;
    let net = Network::new(&cfg)?;
    let params = ParamStore::from_parts(values, net.layers().to_vec(), running, seed);
    net.check_params(&params)?;
    Ok((cfg, params))
}

pub fn save_checkpoint(path: &Path, cfg: &NetConfig, params: &ParamStore) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(file), cfg, params)
}

pub fn load_checkpoint(path: &Path) -> Result<(NetConfig, ParamStore)> {
    read_checkpoint(std::fs::File::open(path)?)
}
