//! Run configuration: every knob of a pipeline run in one TOML document.
//!
//! A run starts from a named preset, then applies the config file, then
//! dotted `key=value` overrides. Unknown keys are rejected at every layer.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::denoiser::DenoiserConfig;
use crate::diffusion::DiffusionConfig;
use crate::encoder::EncoderConfig;
use crate::eval::EvalConfig;
use crate::kg::{default_synthetic_spec, SyntheticSpec};
use crate::train::{Precision, Stage1Config, Stage2Config};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("override {0:?} is not of the form key=value")]
    BadOverride(String),
    #[error("unknown preset {0:?} (known: desk, fb15k-237-img, wn18-img)")]
    UnknownPreset(String),
}

/// Where a run reads and writes its artifacts. Unset paths default to
/// fixed names inside the output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory holding `train.tsv`, `dev.tsv`, `test.tsv` and optionally
    /// `features.txt`.
    pub data: Option<PathBuf>,
    pub encoder: Option<PathBuf>,
    pub denoiser: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointConfig {
    pub precision: Precision,
    /// Load checkpoints even when their config hash differs.
    pub force: bool,
}

impl Default for CheckpointConfig {
    fn default() -> Self {
        Self {
            precision: Precision::F64,
            force: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub paths: PathsConfig,
    pub synthetic: SyntheticSpec,
    pub encoder: EncoderConfig,
    pub diffusion: DiffusionConfig,
    pub denoiser: DenoiserConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub eval: EvalConfig,
    pub checkpoint: CheckpointConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            seed: 0,
            paths: PathsConfig::default(),
            synthetic: default_synthetic_spec(),
            encoder: EncoderConfig::default(),
            diffusion: DiffusionConfig::default(),
            denoiser: DenoiserConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            eval: EvalConfig::default(),
            checkpoint: CheckpointConfig::default(),
        }
    }
}

/// The parts of a run config that fix the encoder's parameter layout.
#[derive(Serialize)]
struct EncoderIdentity<'a> {
    encoder: &'a EncoderConfig,
}

/// The parts that fix the denoiser's layout and meaning.
#[derive(Serialize)]
struct DenoiserIdentity<'a> {
    denoiser: &'a DenoiserConfig,
    diffusion: &'a DiffusionConfig,
}

impl RunConfig {
    /// Named starting points. `desk` is the laptop-scale default; the other
    /// two carry the published full-scale optimizer and denoiser settings.
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let mut c = Self {
            preset: name.to_string(),
            ..Self::default()
        };
        match name {
            "desk" => {}
            "fb15k-237-img" => {
                c.diffusion.steps = 40;
                c.denoiser.blocks = 1;
                c.denoiser.mlp = 2048;
                c.stage2.lr = 2e-5;
                c.stage2.min_lr = 0.0;
                c.stage2.batch_size = 96;
            }
            "wn18-img" => {
                c.diffusion.steps = 30;
                c.denoiser.blocks = 1;
                c.denoiser.mlp = 1024;
                c.stage2.lr = 3e-5;
                c.stage2.min_lr = 0.0;
                c.stage2.batch_size = 128;
            }
            other => return Err(ConfigError::UnknownPreset(other.to_string())),
        }
        Ok(c)
    }

    /// Preset, then `file` (TOML text), then `overrides` (`a.b=value`).
    pub fn resolve(file: Option<&str>, overrides: &[String]) -> Result<Self, ConfigError> {
        let file_table: Table = match file {
            Some(text) => text.parse().map_err(|e: toml::de::Error| ConfigError::Invalid(e.to_string()))?,
            None => Table::new(),
        };
        let parsed: Vec<(Vec<String>, Value)> = overrides.iter().map(|o| parse_override(o)).collect::<Result<_, _>>()?;

        let mut preset = match file_table.get("preset") {
            Some(Value::String(s)) => s.clone(),
            Some(_) => return Err(ConfigError::Invalid("preset must be a string".into())),
            None => "desk".to_string(),
        };
        for (path, value) in &parsed {
            if let ([key], Value::String(s)) = (path.as_slice(), value) {
                if key == "preset" {
                    preset = s.clone();
                }
            }
        }

        let base = Self::preset(&preset)?;
        let mut merged = Value::try_from(&base)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        merge(&mut merged, Value::Table(file_table));
        for (path, value) in parsed {
            set_path(&mut merged, &path, value)?;
        }
        let cfg: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = path
            .map(|p| std::fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.to_path_buf(), source }))
            .transpose()?;
        Self::resolve(text.as_deref(), overrides)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.stage1.validate().map_err(|e| bad(&e))?;
        self.stage2.validate().map_err(|e| bad(&e))?;
        self.diffusion.schedule().map_err(|e| bad(&e))?;
        if self.eval.trajectory_top == 0 {
            return Err(ConfigError::Invalid("eval.trajectory_top must be positive".into()));
        }
        Ok(())
    }

    /// The fully resolved config as TOML; resolving this text with no
    /// overrides gives back an equal config.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config is always representable as TOML")
    }

    pub fn encoder_hash(&self) -> [u8; 32] {
        crate::train::checkpoint::config_hash(&EncoderIdentity { encoder: &self.encoder })
            .expect("encoder config is always representable as TOML")
    }

    pub fn denoiser_hash(&self) -> [u8; 32] {
        crate::train::checkpoint::config_hash(&DenoiserIdentity {
            denoiser: &self.denoiser,
            diffusion: &self.diffusion,
        })
        .expect("denoiser config is always representable as TOML")
    }
}

fn parse_override(s: &str) -> Result<(Vec<String>, Value), ConfigError> {
    let (key, raw) = s.split_once('=').ok_or_else(|| ConfigError::BadOverride(s.to_string()))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::BadOverride(s.to_string()));
    }
    // a TOML literal when it parses as one, a bare string otherwise
    let value = format!("v = {}", raw.trim())
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.trim().to_string()));
    Ok((key.split('.').map(str::to_string).collect(), value))
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, path: &[String], value: Value) -> Result<(), ConfigError> {
    let mut cur = root;
    for (i, key) in path.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| ConfigError::Invalid(format!("{} is not a section", path[..i].join("."))))?;
        if i + 1 == path.len() {
            table.insert(key.clone(), value);
            return Ok(());
        }
        cur = table.entry(key.clone()).or_insert_with(|| Value::Table(Table::new()));
    }
    unreachable!("override paths are non-empty")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let c = RunConfig::resolve(None, &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.diffusion.steps, 40);
        assert_eq!(c.diffusion.chains, 4);
        assert_eq!(c.encoder.mgat_layers, 3);
        assert_eq!(c.denoiser.blocks, 1);
        assert_eq!((c.stage1.lr, c.stage1.batch_size, c.stage1.epochs), (1e-3, 32, 200));
    }

    #[test]
    fn file_then_overrides() {
        let file = "seed = 3\n[encoder]\ndim = 16\n[stage2]\nno_kl = true\n";
        let c = RunConfig::resolve(Some(file), &["encoder.dim=8".into(), "eval.split=\"dev\"".into()]).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.encoder.dim, 8);
        assert!(c.stage2.no_kl);
        assert_eq!(c.eval.split, crate::kg::Split::Dev);
        // bare strings need no quotes
        let c = RunConfig::resolve(None, &["paths.data=some/dir".into()]).unwrap();
        assert_eq!(c.paths.data, Some(PathBuf::from("some/dir")));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::resolve(Some("[encoder]\nwidth = 3\n"), &[]), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::resolve(None, &["stage1.nope=1".into()]), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::resolve(None, &["novalue".into()]), Err(ConfigError::BadOverride(_))));
    }

    #[test]
    fn both_losses_off_rejected() {
        let r = RunConfig::resolve(None, &["stage2.no_kl=true".into(), "stage2.no_bce=true".into()]);
        assert!(matches!(r, Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn presets_carry_published_settings() {
        let c = RunConfig::resolve(Some("preset = \"fb15k-237-img\"\n"), &[]).unwrap();
        assert_eq!((c.diffusion.steps, c.denoiser.mlp, c.stage2.lr, c.stage2.batch_size), (40, 2048, 2e-5, 96));
        let c = RunConfig::resolve(None, &["preset=wn18-img".into()]).unwrap();
        assert_eq!((c.diffusion.steps, c.denoiser.mlp, c.stage2.lr, c.stage2.batch_size), (30, 1024, 3e-5, 128));
        // file values still win over the preset
        let c = RunConfig::resolve(Some("preset = \"wn18-img\"\n[stage2]\nbatch_size = 4\n"), &[]).unwrap();
        assert_eq!(c.stage2.batch_size, 4);
        assert!(matches!(RunConfig::preset("imagenet"), Err(ConfigError::UnknownPreset(_))));
    }

    #[test]
    fn effective_config_round_trips() {
        let c = RunConfig::resolve(None, &["seed=11".into(), "denoiser.no_condition=true".into()]).unwrap();
        let again = RunConfig::resolve(Some(&c.to_toml()), &[]).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn hashes_follow_model_sections_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.stage1.epochs = 3;
        assert_eq!(a.encoder_hash(), b.encoder_hash());
        b.encoder.dim = 7;
        assert_ne!(a.encoder_hash(), b.encoder_hash());
        assert_eq!(a.denoiser_hash(), b.denoiser_hash());
    }
}
