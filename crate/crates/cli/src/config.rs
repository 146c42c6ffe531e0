use std::fs;
use std::path::{Path, PathBuf};

use dargan::data::{NoiseKind, ValSize, TEST_SNRS, TRAIN_SNRS};
use dargan::discriminator::DiscriminatorConfig;
use dargan::dsp::StftConfig;
use dargan::generator::GeneratorConfig;
use dargan::metrics::PesqAdapter;
use dargan::phase::PppConfig;
use dargan::training::GanTrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const RUN_DIR_ENV: &str = "DARGAN_RUN_DIR";
pub const CONFIG_COPY: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_utterances: usize,
    pub test_utterances: usize,
    pub duration_s: f64,
    /// Utterances moved from the training set to validation.
    pub val_count: usize,
    pub noises: Vec<NoiseKind>,
    pub train_snrs: Vec<f64>,
    pub test_snrs: Vec<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_utterances: 16,
            test_utterances: 4,
            duration_s: 1.0,
            val_count: 2,
            noises: NoiseKind::ALL.to_vec(),
            train_snrs: TRAIN_SNRS.to_vec(),
            test_snrs: TEST_SNRS.to_vec(),
        }
    }
}

impl DataConfig {
    pub fn val_size(&self) -> ValSize {
        ValSize::Count(self.val_count)
    }

    fn validate(&self) -> Result<(), String> {
        if self.train_utterances < 2 || self.test_utterances < 2 {
            return Err("data.train_utterances and data.test_utterances must be >= 2".into());
        }
        if self.val_count == 0 || self.val_count >= self.train_utterances {
            return Err(format!(
                "data.val_count must be in [1, {}), got {}",
                self.train_utterances, self.val_count
            ));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(format!("data.duration_s must be positive, got {}", self.duration_s));
        }
        if self.noises.is_empty() {
            return Err("data.noises must not be empty".into());
        }
        for (key, list) in [("data.train_snrs", &self.train_snrs), ("data.test_snrs", &self.test_snrs)] {
            if list.is_empty() || list.iter().any(|v| !v.is_finite()) {
                return Err(format!("{key} must be a non-empty list of finite numbers"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Command template with `{clean}` and `{est}` placeholders.
    pub pesq_cmd: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_dir: PathBuf,
    /// Seed for corpus synthesis and the train/validation split.
    pub seed: u64,
    pub dsp: StftConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub training: GanTrainConfig,
    /// Phase post-processing; trained after the GAN only when present.
    #[serde(alias = "ppp", skip_serializing_if = "Option::is_none")]
    pub phase: Option<PppConfig>,
    pub data: DataConfig,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_dir: PathBuf::from("run"),
            seed: 0,
            dsp: StftConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            training: GanTrainConfig::default(),
            phase: None,
            data: DataConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

/// Parses `key.path=value`; the value is read as a TOML value and falls back to a bare string.
fn parse_override(text: &str) -> Result<(Vec<String>, toml::Value), CliError> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| invalid(format!("override `{text}` is not of the form key.path=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(invalid(format!("override `{text}` has an empty key segment")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((path, value))
}

fn apply_override(root: &mut toml::Table, path: &[String], value: toml::Value) -> Result<(), CliError> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = root;
    for (i, seg) in parents.iter().enumerate() {
        let entry = table
            .entry(seg.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| invalid(format!("`{}` is not a section", path[..=i].join("."))))?;
    }
    table.insert(last.clone(), value);
    Ok(())
}

impl RunConfig {
    /// Reads `path` (or defaults when `None`), applies dotted overrides and the
    /// run-directory environment variable, and validates every section.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| invalid(format!("cannot read {}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| invalid(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (key, value) = parse_override(o)?;
            apply_override(&mut table, &key, value)?;
        }
        let mut cfg: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let key = e.path().to_string();
            invalid(format!("invalid value for `{key}`: {}", e.into_inner()))
        })?;
        if let Some(dir) = std::env::var_os(RUN_DIR_ENV).filter(|v| !v.is_empty()) {
            cfg.run_dir = PathBuf::from(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let wrap = |e: dargan::Error| invalid(e.to_string());
        self.dsp.validate().map_err(wrap)?;
        self.generator.validate().map_err(wrap)?;
        self.discriminator.validate().map_err(wrap)?;
        self.training.validate().map_err(wrap)?;
        if let Some(p) = &self.phase {
            p.validate().map_err(wrap)?;
        }
        self.data.validate().map_err(invalid)?;
        if let Some(cmd) = &self.metrics.pesq_cmd {
            PesqAdapter::new(cmd.clone()).map_err(wrap)?;
        }
        if self.run_dir.as_os_str().is_empty() {
            return Err(invalid("run_dir must not be empty"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the effective configuration next to the run's outputs.
    pub fn save_copy(&self) -> Result<(), CliError> {
        fs::create_dir_all(&self.run_dir).map_err(|e| CliError::io(&self.run_dir, e))?;
        let path = self.run_dir.join(CONFIG_COPY);
        fs::write(&path, self.to_toml()).map_err(|e| CliError::io(&path, e))
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.run_dir.join("corpus")
    }

    pub fn manifest_path(&self, split: &str) -> PathBuf {
        self.run_dir.join("manifests").join(format!("{split}.jsonl"))
    }

    pub fn ppp_dir(&self) -> PathBuf {
        self.run_dir.join("ppp")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = RunConfig::load(
            None,
            &[
                "training.epochs=3".into(),
                "data.noises=[\"white\"]".into(),
                "phase.iterations=2".into(),
                "run_dir=somewhere".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.training.epochs, 3);
        assert_eq!(cfg.data.noises, vec![NoiseKind::White]);
        assert_eq!(cfg.phase.unwrap().iterations, 2);
    }

    #[test]
    fn bad_values_name_their_key() {
        let err = RunConfig::load(None, &["data.train_snrs=\"loud\"".into()]).unwrap_err();
        assert!(err.to_string().contains("data.train_snrs"), "{err}");
        let err = RunConfig::load(None, &["training.bogus=1".into()]).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = RunConfig::load(None, &["training.lr_g=-1".into()]).unwrap_err();
        assert!(matches!(err, CliError::Validation(_)));
        assert!(RunConfig::load(None, &["nokey".into()]).is_err());
    }
}
