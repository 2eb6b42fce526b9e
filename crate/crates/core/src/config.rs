//! Run configuration: one TOML file, `section.key=value` overrides on top,
//! defaults for everything left out.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::ClassifierTrainConfig;
use crate::data::SyntheticConfig;
use crate::diffusion::{DenoiserTrainConfig, ScheduleSpec};
use crate::error::{Error, Result};
use crate::guidance::CounterfactualConfig;
use crate::metrics::EvalOptions;
use crate::target::{Distance, EncodingKind, Pooling};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Image folder (one subfolder per class); the synthetic corpus when unset.
    pub dataset: Option<PathBuf>,
    pub checkpoints: PathBuf,
    pub output: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            checkpoints: PathBuf::from("run/checkpoints"),
            output: PathBuf::from("run/output"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: SyntheticConfig,
    /// Share of the dataset held back from training; the index and the
    /// evaluation samples both come from it.
    pub validation_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticConfig {
                samples: 6000,
                ..Default::default()
            },
            validation_fraction: 0.4,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    Identity,
    Autoencoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub kind: CodecKind,
    pub latent_dim: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            kind: CodecKind::Identity,
            latent_dim: 96,
            steps: 2000,
            batch: 64,
            lr: 2e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub schedule: ScheduleSpec,
    pub denoiser: DenoiserTrainConfig,
    pub codec: CodecConfig,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexConfig {
    /// Share of the validation split used as reference set; the rest is evaluated.
    pub ratio: f64,
    pub encoding: EncodingKind,
    /// Encoding layer; the model's default concept layer when unset.
    pub layer: Option<String>,
    pub pooling: Pooling,
    pub distance: Distance,
    /// Reference patches exported per concept.
    pub references: usize,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            ratio: 0.9,
            encoding: EncodingKind::Activation,
            layer: None,
            pooling: Pooling::Mean,
            distance: Distance::Euclidean,
            references: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    /// Sample `i` of the evaluation split uses seed `seed + i`.
    pub seed: u64,
    pub workers: usize,
    /// Only the first `limit` evaluation samples.
    pub limit: Option<usize>,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub classifier: ClassifierTrainConfig,
    pub diffusion: DiffusionConfig,
    pub index: IndexConfig,
    pub counterfactual: CounterfactualConfig,
    pub generate: GenerateConfig,
    pub metrics: EvalOptions,
}

/// Set `section.key = value` in a TOML tree. The value is parsed as a TOML
/// value and taken as a bare string when that fails.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{key}`")));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut node = table;
    for p in &parts[..parts.len() - 1] {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parse TOML text, apply overrides and validate.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults, then the file (if any), then the overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => {
                if !p.exists() {
                    return Err(Error::MissingPath(p.to_path_buf()));
                }
                std::fs::read_to_string(p)?
            }
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Range checks, plus existence of the dataset path.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let frac = |v: f64| v > 0.0 && v < 1.0;
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if let Some(p) = &self.paths.dataset {
            if !p.exists() {
                return Err(Error::MissingPath(p.clone()));
            }
        }
        let s = &self.data.synthetic;
        if !(2..=crate::data::PALETTE.len()).contains(&s.classes) {
            return bad(format!("data.synthetic.classes must lie in 2..={}", crate::data::PALETTE.len()));
        }
        if s.size < 8 {
            return bad("data.synthetic.size must be at least 8".into());
        }
        if s.samples < 2 * s.classes {
            return bad("data.synthetic.samples must be at least twice the class count".into());
        }
        if !frac(self.data.validation_fraction) {
            return bad("data.validation_fraction must lie in (0, 1)".into());
        }
        let c = &self.classifier;
        if c.width == 0 || c.batch == 0 || !pos(c.lr) || !(0.0..1.0).contains(&c.holdout) {
            return bad("classifier: width and batch must be positive, lr > 0, holdout in [0, 1)".into());
        }
        self.diffusion.schedule.build()?;
        let d = &self.diffusion.denoiser;
        if d.hidden == 0 || d.batch == 0 || d.time_freqs == 0 || d.eval_batch == 0 || !pos(d.lr) {
            return bad("diffusion.denoiser: sizes must be positive and lr > 0".into());
        }
        if !(0.0..=1.0).contains(&d.cond_dropout) {
            return bad("diffusion.denoiser.cond_dropout must lie in [0, 1]".into());
        }
        let k = &self.diffusion.codec;
        if k.latent_dim == 0 || k.batch == 0 || !pos(k.lr) {
            return bad("diffusion.codec: sizes must be positive and lr > 0".into());
        }
        if !(self.index.ratio > 0.0 && self.index.ratio <= 1.0) {
            return bad("index.ratio must lie in (0, 1]".into());
        }
        if self.index.references == 0 {
            return bad("index.references must be at least 1".into());
        }
        self.counterfactual.validate(self.diffusion.schedule.steps)?;
        if self.generate.workers == 0 {
            return bad("generate.workers must be at least 1".into());
        }
        if self.generate.limit == Some(0) {
            return bad("generate.limit must be at least 1".into());
        }
        if self.metrics.random_draws == 0 {
            return bad("metrics.random_draws must be at least 1".into());
        }
        Ok(())
    }

    /// Hash of every setting that can change a generated artifact. Paths,
    /// worker count and sample limit are left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = PathsConfig::default();
        c.generate.workers = 1;
        c.generate.limit = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }
}
