//! Labeled datasets and the single-file `PLDS` bundle.
//!
//! Bundle layout, little-endian:
//!
//! ```text
//! header   magic "PLDS", u16 version, u16 reserved, u32 site count,
//!          u32 sample count, u64 offsets of the site, label, index,
//!          stack and manifest sections, u64 payload length, u32 CRC-32
//! sites    per site: u8 kind, f64 x, f64 y, f64 z
//! labels   per sample: u32 id, u32 tx id, u32 rx id, f64 frequency,
//!          f64 path loss, u8 los, u8 split
//! index    per sample: u64 offset into the stack section, u32 length
//! stacks   concatenated FSTK records
//! manifest u32 length + JSON provenance
//! ```
//!
//! Offsets are relative to the start of the payload, which begins right
//! after the header; the checksum covers the whole payload.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{HeightField, SceneSpec, Site, SiteKind};
use crate::error::{Error, Result};
use crate::oracle::{self, OracleConfig};
use crate::preprocess::{build_feature_stack, FeatureConfig, FeatureOptions, FeatureStack, FSTK_VERSION};

const MAGIC: [u8; 4] = *b"PLDS";
pub const PLDS_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 2 + 4 + 4 + 5 * 8 + 8 + 4;
const SITE_LEN: usize = 1 + 3 * 8;
const LABEL_LEN: usize = 3 * 4 + 2 * 8 + 2;
const INDEX_LEN: usize = 8 + 4;

/// Share of each transmitter's samples assigned to training.
pub const TRAIN_FRACTION: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            other => Err(Error::Malformed(format!("unknown split code {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub tx_id: usize,
    pub rx_id: usize,
    pub frequency: f64,
    pub pl_db: f64,
    pub los: bool,
    pub stack: FeatureStack,
}

/// Generator settings recorded with every bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub scene: Option<SceneSpec>,
    pub oracle: OracleConfig,
    pub features: FeatureConfig,
    pub options: FeatureOptions,
    pub split_seed: u64,
    pub train_fraction: f64,
    pub plds_version: u16,
    pub fstk_version: u16,
    pub generator: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Split of each sample, aligned with the sample list.
    pub splits: Vec<Split>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub sites: Vec<Site>,
    pub samples: Vec<Sample>,
    pub manifest: Manifest,
}

/// Stratified split: within each transmitter, a seeded shuffle sends the
/// first `round(fraction * n)` samples to training and the rest to validation.
pub fn assign_splits(tx_ids: &[usize], fraction: f64, seed: u64) -> Vec<Split> {
    let mut splits = vec![Split::Val; tx_ids.len()];
    let groups: BTreeSet<usize> = tx_ids.iter().copied().collect();
    for tx in groups {
        let mut members: Vec<usize> = (0..tx_ids.len()).filter(|&i| tx_ids[i] == tx).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (tx as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        members.shuffle(&mut rng);
        let n_train = (fraction * members.len() as f64).round() as usize;
        for &i in &members[..n_train] {
            splits[i] = Split::Train;
        }
    }
    splits
}

/// Labels every (Tx, Rx) pair with the oracle and builds its feature stack.
pub fn build_dataset(
    field: &HeightField,
    sites: &[Site],
    oracle_cfg: &OracleConfig,
    features: &FeatureConfig,
    options: FeatureOptions,
    split_seed: u64,
) -> Result<LabeledDataset> {
    features.validate()?;
    let labels = oracle::generate_labels(field, sites, oracle_cfg)?;
    let samples: Vec<Sample> = labels
        .par_iter()
        .enumerate()
        .map(|(id, l)| {
            build_feature_stack(field, &l.tx, &l.rx, l.frequency, features, options)
                .map(|stack| Sample {
                    id,
                    tx_id: l.tx_id,
                    rx_id: l.rx_id,
                    frequency: l.frequency,
                    pl_db: l.pl_db,
                    los: l.los,
                    stack,
                })
                .map_err(|e| e.in_pair(l.tx_id, l.rx_id))
        })
        .collect::<Result<_>>()?;
    let tx_ids: Vec<usize> = samples.iter().map(|s| s.tx_id).collect();
    let ds = LabeledDataset {
        sites: sites.to_vec(),
        manifest: Manifest {
            splits: assign_splits(&tx_ids, TRAIN_FRACTION, split_seed),
            provenance: Provenance {
                scene: None,
                oracle: oracle_cfg.clone(),
                features: features.clone(),
                options,
                split_seed,
                train_fraction: TRAIN_FRACTION,
                plds_version: PLDS_VERSION,
                fstk_version: FSTK_VERSION,
                generator: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).to_string(),
            },
        },
        samples,
    };
    ds.validate()?;
    Ok(ds)
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split_of(&self, i: usize) -> Split {
        self.manifest.splits[i]
    }

    /// Positions of samples in `split`, in sample order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.manifest.splits[i] == split).collect()
    }

    /// Fractions of samples in (train, val).
    pub fn split_fractions(&self) -> (f64, f64) {
        let n = self.len().max(1) as f64;
        let train = self.indices(Split::Train).len() as f64 / n;
        (train, 1.0 - train)
    }

    /// Distinct transmitter ids in ascending order.
    pub fn tx_ids(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.tx_id).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Samples matching `keep`, with their splits.
    pub fn subset(&self, mut keep: impl FnMut(&Sample) -> bool) -> LabeledDataset {
        let mut samples = Vec::new();
        let mut splits = Vec::new();
        for (s, sp) in self.samples.iter().zip(&self.manifest.splits) {
            if keep(s) {
                samples.push(s.clone());
                splits.push(*sp);
            }
        }
        LabeledDataset {
            sites: self.sites.clone(),
            samples,
            manifest: Manifest {
                splits,
                provenance: self.manifest.provenance.clone(),
            },
        }
    }

    /// Copy with channel ablations applied to every stack.
    pub fn ablated(&self, options: FeatureOptions) -> LabeledDataset {
        let mut out = self.clone();
        for s in &mut out.samples {
            s.stack = s.stack.ablated(options);
        }
        out.manifest.provenance.options = FeatureOptions {
            use_distance: options.use_distance && self.manifest.provenance.options.use_distance,
            use_mask: options.use_mask && self.manifest.provenance.options.use_mask,
        };
        out
    }

    /// Labels finite and within `(0, ceiling]`, one split per sample, unique ids.
    pub fn validate(&self) -> Result<()> {
        if self.manifest.splits.len() != self.samples.len() {
            return Err(Error::LengthMismatch(self.manifest.splits.len(), self.samples.len()));
        }
        let ceiling = self.manifest.provenance.oracle.clip_ceiling_db;
        let mut ids = BTreeSet::new();
        for s in &self.samples {
            if !(s.pl_db.is_finite() && s.pl_db > 0.0 && s.pl_db <= ceiling) {
                return Err(Error::Malformed(format!(
                    "sample {} has path loss {} outside (0, {ceiling}]",
                    s.id, s.pl_db
                )));
            }
            if !ids.insert(s.id) {
                return Err(Error::DuplicateId(s.id));
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut sites = Vec::with_capacity(self.sites.len() * SITE_LEN);
        for s in &self.sites {
            sites.push(match s.kind {
                SiteKind::Tx => 0u8,
                SiteKind::Rx => 1u8,
            });
            for v in [s.x, s.y, s.z] {
                sites.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut labels = Vec::with_capacity(self.len() * LABEL_LEN);
        let mut index = Vec::with_capacity(self.len() * INDEX_LEN);
        let mut stacks = Vec::new();
        for (s, sp) in self.samples.iter().zip(&self.manifest.splits) {
            for v in [s.id, s.tx_id, s.rx_id] {
                labels.extend_from_slice(&u32::try_from(v).map_err(|_| Error::Malformed(format!("id {v} exceeds u32")))?.to_le_bytes());
            }
            labels.extend_from_slice(&s.frequency.to_le_bytes());
            labels.extend_from_slice(&s.pl_db.to_le_bytes());
            labels.push(u8::from(s.los));
            labels.push(sp.code());
            let rec = s.stack.encode();
            index.extend_from_slice(&(stacks.len() as u64).to_le_bytes());
            index.extend_from_slice(&(rec.len() as u32).to_le_bytes());
            stacks.extend_from_slice(&rec);
        }
        let json = serde_json::to_vec(&self.manifest.provenance).map_err(|e| Error::Malformed(format!("provenance: {e}")))?;
        let mut manifest = Vec::with_capacity(4 + json.len());
        manifest.extend_from_slice(&(json.len() as u32).to_le_bytes());
        manifest.extend_from_slice(&json);

        let sections = [sites, labels, index, stacks, manifest];
        let mut offsets = [0u64; 5];
        let mut payload = Vec::with_capacity(sections.iter().map(Vec::len).sum());
        for (o, sec) in offsets.iter_mut().zip(&sections) {
            *o = payload.len() as u64;
            payload.extend_from_slice(sec);
        }
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&PLDS_VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.sites.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for o in offsets {
            out.extend_from_slice(&o.to_le_bytes());
        }
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<LabeledDataset> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC,
                found: magic,
            });
        }
        let version = r.u16()?;
        if version != PLDS_VERSION {
            return Err(Error::Version {
                found: version,
                expected: PLDS_VERSION,
            });
        }
        r.u16()?;
        let n_sites = r.u32()? as usize;
        let n_samples = r.u32()? as usize;
        let mut offsets = [0usize; 5];
        for o in &mut offsets {
            *o = r.u64()? as usize;
        }
        let payload_len = r.u64()? as usize;
        let stored = r.u32()?;
        let payload = r.take(payload_len)?;
        if r.pos != bytes.len() {
            return Err(Error::Malformed(format!("{} trailing bytes after bundle", bytes.len() - r.pos)));
        }
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }

        let section = |k: usize| -> Result<&[u8]> {
            let start = offsets[k];
            let end = if k + 1 < offsets.len() { offsets[k + 1] } else { payload.len() };
            if start > end || end > payload.len() {
                return Err(Error::Malformed(format!("section {k} spans {start}..{end} of {}", payload.len())));
            }
            Ok(&payload[start..end])
        };
        let expect = |k: usize, len: usize| -> Result<&[u8]> {
            let s = section(k)?;
            if s.len() != len {
                return Err(Error::Malformed(format!("section {k} has {} bytes, expected {len}", s.len())));
            }
            Ok(s)
        };

        let mut sr = Reader {
            bytes: expect(0, n_sites * SITE_LEN)?,
            pos: 0,
        };
        let mut sites = Vec::with_capacity(n_sites);
        for _ in 0..n_sites {
            let kind = match sr.take(1)?[0] {
                0 => SiteKind::Tx,
                1 => SiteKind::Rx,
                k => return Err(Error::Malformed(format!("unknown site kind code {k}"))),
            };
            let (x, y, z) = (sr.f64()?, sr.f64()?, sr.f64()?);
            sites.push(Site { x, y, z, kind });
        }

        let mut lr = Reader {
            bytes: expect(1, n_samples * LABEL_LEN)?,
            pos: 0,
        };
        let mut ir = Reader {
            bytes: expect(2, n_samples * INDEX_LEN)?,
            pos: 0,
        };
        let stack_bytes = section(3)?;
        let mut samples = Vec::with_capacity(n_samples);
        let mut splits = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let (id, tx_id, rx_id) = (lr.u32()? as usize, lr.u32()? as usize, lr.u32()? as usize);
            let frequency = lr.f64()?;
            let pl_db = lr.f64()?;
            let los = match lr.take(1)?[0] {
                0 => false,
                1 => true,
                v => return Err(Error::Malformed(format!("los flag {v}"))),
            };
            splits.push(Split::from_code(lr.take(1)?[0])?);
            let off = ir.u64()? as usize;
            let len = ir.u32()? as usize;
            let rec = stack_bytes
                .get(off..off + len)
                .ok_or_else(|| Error::Malformed(format!("stack record {off}+{len} outside section")))?;
            let (stack, used) = FeatureStack::decode(rec)?;
            if used != len {
                return Err(Error::Malformed(format!("stack record of {len} bytes decoded as {used}")));
            }
            samples.push(Sample {
                id,
                tx_id,
                rx_id,
                frequency,
                pl_db,
                los,
                stack,
            });
        }

        let mut mr = Reader {
            bytes: section(4)?,
            pos: 0,
        };
        let json_len = mr.u32()? as usize;
        let provenance: Provenance =
            serde_json::from_slice(mr.take(json_len)?).map_err(|e| Error::Malformed(format!("provenance: {e}")))?;
        let ds = LabeledDataset {
            sites,
            samples,
            manifest: Manifest { splits, provenance },
        };
        ds.validate()?;
        Ok(ds)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
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

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn save_dataset(path: &Path, ds: &LabeledDataset) -> Result<()> {
    std::fs::write(path, ds.encode()?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    LabeledDataset::decode(&std::fs::read(path)?)
}
