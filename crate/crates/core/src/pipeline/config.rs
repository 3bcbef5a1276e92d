//! Experiment configuration: JSON or TOML files, dotted `key=value`
//! overrides, and the `RACMF_SEED` environment override.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cmf::BackboneConfig;
use crate::controller::ControllerConfig;
use crate::error::{Error, Result};
use crate::rl::{PpoConfig, RewardConfig};
use crate::rollout::RolloutConfig;
use crate::synth::{mix_seed, DegradationTemplate, PhantomSpec, Split, SplitFractions};

pub const SEED_ENV: &str = "RACMF_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_pairs: usize,
    pub phantom: PhantomSpec,
    pub degradation: DegradationTemplate,
    pub split: SplitFractions,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_pairs: 64,
            phantom: PhantomSpec::default(),
            degradation: DegradationTemplate::default(),
            split: SplitFractions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: Split,
    /// Gray levels for radiomic quantization.
    pub n_levels: usize,
    /// Side of the square NPS patches.
    pub nps_patch: usize,
    /// Fraction of the lowest-variance body tiles used as NPS patches.
    pub nps_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            n_levels: crate::metrics::radiomics::DEFAULT_LEVELS,
            nps_patch: 8,
            nps_fraction: 0.1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_levels < 2 {
            return Err(Error::spec("eval.n_levels", "must be >= 2"));
        }
        if self.nps_patch < crate::metrics::nps::MIN_PATCH_SIDE {
            return Err(Error::spec(
                "eval.nps_patch",
                format!("must be >= {}", crate::metrics::nps::MIN_PATCH_SIDE),
            ));
        }
        if !(self.nps_fraction > 0.0 && self.nps_fraction <= 1.0) {
            return Err(Error::spec("eval.nps_fraction", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Global seed; every stochastic stream derives from it and its
    /// section seed.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub rollout: RolloutConfig,
    pub controller: ControllerConfig,
    pub ppo: PpoConfig,
    pub reward: RewardConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            backbone: BackboneConfig::default(),
            rollout: RolloutConfig::default(),
            controller: ControllerConfig::default(),
            ppo: PpoConfig::default(),
            reward: RewardConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data.n_pairs == 0 {
            return Err(Error::spec("data.n_pairs", "must be >= 1"));
        }
        self.data.phantom.validate()?;
        self.data.split.counts(self.data.n_pairs)?;
        self.backbone.validate()?;
        let m = self.backbone.net_shape().size_multiple();
        let (h, w) = (self.data.phantom.height, self.data.phantom.width);
        if h % m != 0 || w % m != 0 {
            return Err(Error::spec(
                "data.phantom",
                format!("image size {h}x{w} must be divisible by {m} for backbone depth {}", self.backbone.depth),
            ));
        }
        self.rollout.validate()?;
        self.controller.validate()?;
        if self.controller.m_max != self.rollout.m_max {
            return Err(Error::spec(
                "controller.m_max",
                format!("must equal rollout.m_max ({})", self.rollout.m_max),
            ));
        }
        self.ppo.validate()?;
        self.reward.validate()?;
        self.eval.validate()
    }

    /// Copy with every section seed combined with the global seed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let g = self.seed;
        c.backbone.seed = mix_seed(g ^ self.backbone.seed, 0xBAC0);
        c.controller.seed = mix_seed(g ^ self.controller.seed, 0xC0DE);
        c.ppo.seed = mix_seed(g ^ self.ppo.seed, 0x990);
        c.rollout.init_seed = mix_seed(g ^ self.rollout.init_seed, 0x1417);
        c
    }

    /// Seed passed to the dataset builder.
    pub fn data_seed(&self) -> u64 {
        mix_seed(self.seed ^ self.data.phantom.seed, 0xDA7A)
    }
}

fn parse_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let origin = path.display().to_string();
    let is_toml = path.extension().and_then(|e| e.to_str()) == Some("toml");
    if is_toml {
        toml::from_str::<Value>(&text).map_err(|e| Error::format(origin, e.to_string()))
    } else {
        serde_json::from_str::<Value>(&text).map_err(|e| Error::format(origin, e.to_string()))
    }
}

/// Sets `a.b.c = value`, creating intermediate objects. The value is parsed
/// as JSON when possible and kept as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::spec(assignment, "override must look like key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::spec(assignment, "empty key segment"));
    }
    let value = serde_json::from_str::<Value>(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            return Err(Error::spec(key, format!("`{}` is not a section", parts[..i].join("."))));
        }
        let map = node.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last segment")
}

/// File (optional) → overrides → seed env var → typed, validated config.
pub fn load_config(path: Option<&Path>, overrides: &[String], env_seed: Option<&str>) -> Result<ExperimentConfig> {
    let mut root = match path {
        Some(p) => parse_file(p)?,
        None => Value::Object(Default::default()),
    };
    if !root.is_object() {
        return Err(Error::spec("config", "top level must be a table/object"));
    }
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    if let Some(s) = env_seed {
        let seed: u64 = s
            .trim()
            .parse()
            .map_err(|_| Error::spec(SEED_ENV, format!("not an unsigned integer: {s:?}")))?;
        root.as_object_mut().expect("object").insert("seed".into(), seed.into());
    }
    let cfg: ExperimentConfig = serde_json::from_value(root).map_err(|e| Error::spec("config", e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}
