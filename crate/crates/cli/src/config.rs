//! Config-file defaults shared by every subcommand.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use groupcap::model::ModelConfig;
use serde::{Deserialize, Deserializer, Serialize};

/// A usage error: bad flags or an unusable config file (exit status 1).
#[derive(Debug)]
pub struct Usage(pub String);

/// `xe:rl` epoch counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct StageEpochs {
    pub xe: usize,
    pub rl: usize,
}

impl FromStr for StageEpochs {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (xe, rl) = s.split_once(':').ok_or_else(|| format!("`{s}` is not of the form xe:rl"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}` in `{s}`: {e}"));
        Ok(Self {
            xe: parse(xe)?,
            rl: parse(rl)?,
        })
    }
}

impl fmt::Display for StageEpochs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.xe, self.rl)
    }
}

impl<'de> Deserialize<'de> for StageEpochs {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Architecture fields a config file may override; the rest come from the
/// dataset and training seed.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub d_model: Option<usize>,
    pub heads: Option<usize>,
    pub d_ff: Option<usize>,
    pub enc_layers: Option<usize>,
    pub dec_layers: Option<usize>,
    pub max_len: Option<usize>,
}

impl ModelOverrides {
    pub fn apply(&self, cfg: &mut ModelConfig) {
        let set = |dst: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut cfg.d_model, self.d_model);
        set(&mut cfg.heads, self.heads);
        set(&mut cfg.d_ff, self.d_ff);
        set(&mut cfg.enc_layers, self.enc_layers);
        set(&mut cfg.dec_layers, self.dec_layers);
        set(&mut cfg.max_len, self.max_len);
    }
}

/// Values read from `--config`, keyed like the long flags with `_` for `-`.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub k: Option<usize>,
    #[serde(alias = "in")]
    pub dataset: Option<PathBuf>,
    pub groups: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub beam: Option<usize>,
    pub disloss_mode: Option<String>,
    pub stage_epochs: Option<StageEpochs>,
    pub lr: Option<f64>,
    pub rl_lr: Option<f64>,
    pub batch_groups: Option<usize>,
    pub variant: Option<String>,
    pub checkpoint_every: Option<usize>,
    pub log: Option<PathBuf>,
    pub min_freq: Option<usize>,
    pub epoch: Option<usize>,
    pub captions: Option<PathBuf>,
    pub group: Option<usize>,
    pub images: Option<usize>,
    pub regions: Option<usize>,
    pub dim: Option<usize>,
    pub concepts: Option<usize>,
    pub captions_per_image: Option<usize>,
    pub unique_mentions: Option<usize>,
    pub noise: Option<f64>,
    pub sidecar: Option<bool>,
    pub model: Option<ModelOverrides>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Usage> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Usage(format!("reading config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Usage(format!("config {}: {e}", path.display())))
    }
}

pub fn required<T>(value: Option<T>, key: &str) -> Result<T, Usage> {
    value.ok_or_else(|| Usage(format!("--{} is required (flag or config key `{key}`)", key.replace('_', "-"))))
}
