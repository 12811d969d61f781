//! Run configuration: JSON with a documented default for every field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SynthParams;
use crate::error::{Error, Result};
use crate::model::ArchSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Temperature {
    /// Gumbel temperature at the first mask-learning epoch of a phase.
    #[serde(default = "d_t_start")]
    pub start: f64,
    /// Temperature at the last mask-learning epoch (linear anneal).
    #[serde(default = "d_t_end")]
    pub end: f64,
}

fn d_t_start() -> f64 {
    1.0
}
fn d_t_end() -> f64 {
    0.1
}

impl Default for Temperature {
    fn default() -> Self {
        Self {
            start: d_t_start(),
            end: d_t_end(),
        }
    }
}

impl Temperature {
    pub fn at(&self, epoch: usize, epochs: usize) -> f64 {
        if epochs <= 1 {
            return self.start;
        }
        self.start + (self.end - self.start) * epoch as f64 / (epochs - 1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Epochs {
    /// Epochs with stochastic masks and learned mask logits.
    #[serde(default = "d_mask_epochs")]
    pub mask: usize,
    /// Epochs after the masks are frozen (weights and head only).
    #[serde(default = "d_finetune_epochs")]
    pub finetune: usize,
}

fn d_mask_epochs() -> usize {
    4
}
fn d_finetune_epochs() -> usize {
    8
}

impl Default for Epochs {
    fn default() -> Self {
        Self {
            mask: d_mask_epochs(),
            finetune: d_finetune_epochs(),
        }
    }
}

impl Epochs {
    pub fn total(&self) -> usize {
        self.mask + self.finetune
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskInit {
    #[serde(default = "d_grown_init")]
    pub grown: f64,
    #[serde(default = "d_keep_init")]
    pub attentive: f64,
    #[serde(default = "d_keep_init")]
    pub selective: f64,
    /// Initial grown-mask logit of the seed slots.
    #[serde(default = "d_keep_init")]
    pub seed: f64,
}

fn d_grown_init() -> f64 {
    -1.0
}
fn d_keep_init() -> f64 {
    1.0
}

impl Default for MaskInit {
    fn default() -> Self {
        Self {
            grown: d_grown_init(),
            attentive: d_keep_init(),
            selective: d_keep_init(),
            seed: d_keep_init(),
        }
    }
}

/// Switches for the individual mechanisms of the full method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    #[serde(default = "d_true")]
    pub selective: bool,
    #[serde(default = "d_true")]
    pub attentive: bool,
    #[serde(default = "d_true")]
    pub retrain: bool,
}

fn d_true() -> bool {
    true
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            selective: true,
            attentive: true,
            retrain: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSource {
    pub images: PathBuf,
    pub labels: PathBuf,
    /// One task per line, whitespace-separated class ids.
    pub groups: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSource {
    Synthetic(SynthParams),
    Idx(IdxSource),
}

impl Default for TaskSource {
    fn default() -> Self {
        TaskSource::Synthetic(SynthParams::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub arch: ArchSpec,
    /// L0 weight on the grown mask, divided by the number of grown-mask logits.
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub temperature: Temperature,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    /// Learning rate of the mask logits.
    #[serde(default = "d_mask_lr")]
    pub mask_lr: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub epochs: Epochs,
    /// Largest allowed active/full parameter ratio.
    #[serde(default = "d_cap")]
    pub growth_cap: f64,
    /// Target accuracy is the scratch validation accuracy minus this.
    #[serde(default = "d_slack")]
    pub target_slack: f64,
    #[serde(default)]
    pub mask_init: MaskInit,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub data: TaskSource,
    /// Samples per task in the fingerprint probe batch.
    #[serde(default = "d_probe")]
    pub probe_size: usize,
    /// Root directory for run outputs. Not part of the digest.
    #[serde(default = "d_output")]
    pub output_dir: PathBuf,
}

fn d_lambda() -> f64 {
    1e-3
}
fn d_lr() -> f64 {
    0.01
}
fn d_momentum() -> f64 {
    0.9
}
fn d_mask_lr() -> f64 {
    0.05
}
fn d_batch() -> usize {
    16
}
fn d_cap() -> f64 {
    0.6
}
fn d_slack() -> f64 {
    0.02
}
fn d_probe() -> usize {
    64
}
fn d_output() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

fn range_err(field: &str, v: impl std::fmt::Display, bounds: &str) -> Error {
    Error::Config(format!("{field} = {v} is out of range {bounds}"))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(range_err("lambda", self.lambda, "[0, ∞)"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(range_err("lr", self.lr, "(0, ∞)"));
        }
        if !(self.mask_lr > 0.0 && self.mask_lr.is_finite()) {
            return Err(range_err("mask_lr", self.mask_lr, "(0, ∞)"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(range_err("momentum", self.momentum, "[0, 1)"));
        }
        for (name, t) in [
            ("temperature.start", self.temperature.start),
            ("temperature.end", self.temperature.end),
        ] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(range_err(name, t, "(0, ∞)"));
            }
        }
        if self.batch_size == 0 {
            return Err(range_err("batch_size", 0, "[1, ∞)"));
        }
        if self.epochs.total() == 0 {
            return Err(Error::Config(
                "epochs.mask + epochs.finetune must be >= 1".into(),
            ));
        }
        if !(self.growth_cap > 0.0 && self.growth_cap <= 1.0) {
            return Err(range_err("growth_cap", self.growth_cap, "(0, 1]"));
        }
        if !(0.0..1.0).contains(&self.target_slack) {
            return Err(range_err("target_slack", self.target_slack, "[0, 1)"));
        }
        for (name, v) in [
            ("mask_init.grown", self.mask_init.grown),
            ("mask_init.attentive", self.mask_init.attentive),
            ("mask_init.selective", self.mask_init.selective),
            ("mask_init.seed", self.mask_init.seed),
        ] {
            if !v.is_finite() {
                return Err(range_err(name, v, "(-∞, ∞)"));
            }
        }
        if self.probe_size == 0 {
            return Err(range_err("probe_size", 0, "[1, ∞)"));
        }
        self.arch.validate()?;
        if let TaskSource::Synthetic(s) = &self.data {
            s.validate()
                .map_err(|e| Error::Config(format!("data.synthetic: {e}")))?;
            if s.image_size != self.arch.image_size {
                return Err(Error::Config(format!(
                    "data.synthetic.image_size {} differs from arch.image_size {}",
                    s.image_size, self.arch.image_size
                )));
            }
            if self.arch.in_channels != 1 {
                return Err(Error::Config("synthetic data has one input channel".into()));
            }
        }
        Ok(())
    }

    /// SHA-256 (hex) of the canonical JSON of every field except `output_dir`.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("output_dir");
        }
        hex(&Sha256::digest(v.to_string().as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        e => e,
    })
}
