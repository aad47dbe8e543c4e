//! Output bookkeeping: every file written by a command is hashed and listed
//! in `provenance.json` together with the configuration that produced it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plmap_core::preprocess::FeatureOptions;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const PROVENANCE_FILE: &str = "provenance.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::from(e).context(&path.display().to_string()))?;
    Ok(sha256_hex(&bytes))
}

/// The command line that produced a directory, replayable by `verify`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Invocation {
    Gen,
    Train { data: PathBuf, options: FeatureOptions },
    Cv { data: PathBuf, options: FeatureOptions },
    Ablate { data: PathBuf },
    Eval {
        data: PathBuf,
        checkpoint: PathBuf,
        tx: Option<usize>,
        options: FeatureOptions,
    },
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Invocation::Gen => "gen",
            Invocation::Train { .. } => "train",
            Invocation::Cv { .. } => "cv",
            Invocation::Ablate { .. } => "ablate",
            Invocation::Eval { .. } => "eval",
        }
    }

    pub fn inputs(&self) -> Vec<&Path> {
        match self {
            Invocation::Gen => vec![],
            Invocation::Train { data, .. } | Invocation::Cv { data, .. } | Invocation::Ablate { data } => vec![data],
            Invocation::Eval { data, checkpoint, .. } => vec![data, checkpoint],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Formats {
    pub plds: u16,
    pub fstk: u16,
    pub plnw: u16,
}

impl Default for Formats {
    fn default() -> Self {
        Self {
            plds: plmap_core::dataset::PLDS_VERSION,
            fstk: plmap_core::preprocess::FSTK_VERSION,
            plnw: plmap_core::nnet::PLNW_VERSION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub scene: u64,
    pub split: u64,
    pub train: u64,
    /// Initialization seed per training run, keyed by run name.
    pub runs: BTreeMap<String, Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub sha256: String,
    /// Digest with run-time measurements removed; absent for files that are
    /// entirely measurements.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stable_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub timing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub invocation: Invocation,
    pub config: RunConfig,
    pub seeds: Seeds,
    pub formats: Formats,
    /// Feature ablations in effect, per training run.
    pub options: BTreeMap<String, FeatureOptions>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, OutputEntry>,
}

/// Writes files under one output directory and records their digests.
pub struct OutputDir {
    root: PathBuf,
    entries: BTreeMap<String, OutputEntry>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(root)
            .map_err(|e| CliError::usage(format!("output directory {} is not writable: {e}", root.display())))?;
        Ok(Self {
            root: root.to_path_buf(),
            entries: BTreeMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn put(&mut self, rel: &str, bytes: &[u8], entry: OutputEntry) -> Result<(), CliError> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes).map_err(|e| CliError::from(e).context(&path.display().to_string()))?;
        self.entries.insert(rel.to_string(), entry);
        Ok(())
    }

    pub fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
        let bytes = bytes.as_ref();
        let entry = OutputEntry {
            sha256: sha256_hex(bytes),
            stable_sha256: None,
            timing: false,
        };
        self.put(rel, bytes, entry)
    }

    /// A file carrying measurements; `stable` is its content with those removed.
    pub fn write_timed(&mut self, rel: &str, bytes: impl AsRef<[u8]>, stable: Option<&[u8]>) -> Result<(), CliError> {
        let bytes = bytes.as_ref();
        let entry = OutputEntry {
            sha256: sha256_hex(bytes),
            stable_sha256: stable.map(sha256_hex),
            timing: true,
        };
        self.put(rel, bytes, entry)
    }

    pub fn finish(self, mut prov: Provenance) -> Result<Provenance, CliError> {
        prov.outputs = self.entries;
        let json = serde_json::to_string_pretty(&prov).expect("provenance serializes");
        std::fs::write(self.root.join(PROVENANCE_FILE), json + "\n")?;
        Ok(prov)
    }
}

pub fn read_provenance(dir: &Path) -> Result<Provenance, CliError> {
    let path = dir.join(PROVENANCE_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::new("format", format!("{}: {e}", path.display())))
}
