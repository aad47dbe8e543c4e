//! Run configuration: one TOML file with a section per module.

use std::path::Path;

use plmap_core::preprocess::FeatureConfig;
use plmap_core::{MaskParams, NetConfig, OracleConfig, SceneSpec, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub oracle: OracleConfig,
    pub features: FeatureConfig,
    pub dataset: DatasetSection,
    pub net: NetConfig,
    pub train: TrainConfig,
}

const SECTIONS: [&str; 6] = ["scene", "oracle", "features", "dataset", "net", "train"];

fn section<T: DeserializeOwned>(name: &str, value: toml::Value) -> Result<T, CliError> {
    T::deserialize(value).map_err(|e| {
        let msg = e.message().replace("missing field", "missing key").replace("unknown field", "unknown key");
        CliError::config(format!("[{name}] {}", msg.trim()))
    })
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| e.context(&path.display().to_string()))
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            let line = e.span().map(|s| text[..s.start].lines().count().max(1));
            let at = line.map(|l| format!(" at line {l}")).unwrap_or_default();
            CliError::config(format!("syntax error{at}: {}", e.message().trim()))
        })?;
        if let Some(extra) = table.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(CliError::config(format!("unknown section [{extra}]")));
        }
        let mut take = |name: &str| table.remove(name).ok_or_else(|| CliError::config(format!("missing section [{name}]")));
        let scene = take("scene")?;
        let oracle = take("oracle")?;
        let mut features = take("features")?;
        let dataset = take("dataset")?;
        let net = take("net")?;
        let train = take("train")?;

        // nested table gets its own section name in error messages
        let mask = match features.as_table_mut().and_then(|t| t.remove("mask")) {
            Some(m) => m,
            None => return Err(CliError::config("missing section [features.mask]")),
        };
        let mask: MaskParams = section("features.mask", mask)?;
        if let Some(t) = features.as_table_mut() {
            t.insert("mask".into(), toml::Value::try_from(mask).expect("mask serializes"));
        }

        let cfg = RunConfig {
            scene: section("scene", scene)?,
            oracle: section("oracle", oracle)?,
            features: section("features", features)?,
            dataset: section("dataset", dataset)?,
            net: section("net", net)?,
            train: section("train", train)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.scene.validate()?;
        self.oracle.validate()?;
        self.features.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        if self.scene.frequency != self.oracle.frequency {
            return Err(CliError::config(format!(
                "scene.frequency ({}) and oracle.frequency ({}) differ",
                self.scene.frequency, self.oracle.frequency
            )));
        }
        if self.net.input_hw != (self.features.h, self.features.w) {
            return Err(CliError::config(format!(
                "net.input_hw {:?} does not match the feature grid {}x{}",
                self.net.input_hw, self.features.h, self.features.w
            )));
        }
        if self.net.fusion != self.features.fusion {
            return Err(CliError::config("net.fusion and features.fusion differ"));
        }
        Ok(())
    }

    /// Replaces every seed with `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.scene.seed = seed;
        self.dataset.split_seed = seed;
        self.train.seed = seed;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
