//! Run configuration: nested sections addressed by dotted keys.
//!
//! Files are TOML restricted to dotted `key = value` lines, which keeps them
//! flat and diff-friendly. Command-line overrides use the same dotted keys.
//! Unknown keys are rejected by name.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source_root: String,
    pub target_root: String,
    /// Directory of preprocessed target pairs; empty means generate on the fly.
    pub target_pairs: String,
    pub template_side: usize,
    pub search_side: usize,
    pub context: f32,
    pub keyframe_stride: usize,
    pub conf_threshold: f32,
    pub min_area: f32,
    pub max_area_frac: f32,
    /// `stub` or `offline`.
    pub segmenter: String,
    /// Stub segmenter: minimum absolute deviation from the frame median.
    pub stub_delta: f32,
    pub jitter_px: f32,
    pub scale_jitter: f32,
    /// Source pairs draw the search frame at most this many frames away.
    pub source_frame_gap: usize,
    /// Source pairs are generated from every n-th frame.
    pub source_stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source_root: String::new(),
            target_root: String::new(),
            target_pairs: String::new(),
            template_side: 96,
            search_side: 192,
            context: 2.0,
            keyframe_stride: 10,
            conf_threshold: 0.5,
            min_area: 16.0,
            max_area_frac: 0.5,
            segmenter: "stub".into(),
            stub_delta: 48.0,
            jitter_px: 8.0,
            scale_jitter: 0.05,
            source_frame_gap: 5,
            source_stride: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub norm_groups: usize,
    /// Backbone stage whose correlation response feeds the heads.
    pub head_stage: usize,
    pub head_width: usize,
    pub head_convs: usize,
    pub lambda_cls: f64,
    pub lambda_reg: f64,
    pub lambda_cen: f64,
    pub window_influence: f32,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            widths: vec![16, 32, 64, 128],
            norm_groups: 4,
            head_stage: 4,
            head_width: 32,
            head_convs: 2,
            lambda_cls: 1.0,
            lambda_reg: 3.0,
            lambda_cen: 1.0,
            window_influence: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgdaConfig {
    pub enabled: bool,
    pub stages: Vec<usize>,
    pub d_model: usize,
    pub n_heads: usize,
    pub ff_width: usize,
    pub layers: usize,
    /// Feature maps larger than this are average-pooled before tokenization.
    pub max_token_side: usize,
    pub grl_coefficient: f64,
    /// Fraction of all iterations over which the coefficient ramps up linearly.
    pub grl_warmup: f64,
    /// `two_pass` descends the generator loss directly; `grl` reverses the
    /// discriminator's target-domain objective.
    pub generator_mode: String,
}

impl Default for AgdaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            stages: vec![1, 2, 3, 4],
            d_model: 64,
            n_heads: 4,
            ff_width: 128,
            layers: 2,
            max_token_side: 8,
            grl_coefficient: 1.0,
            grl_warmup: 0.0,
            generator_mode: "two_pass".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsdaConfig {
    pub enabled: bool,
    pub stage: usize,
    pub memory_size: usize,
    pub refit_interval: usize,
    pub kernel_multipliers: Vec<f64>,
    pub cluster_min: usize,
    pub cluster_max: usize,
    pub vote_weights: Vec<f64>,
    pub kmeans_iters: usize,
    pub kmeans_restarts: usize,
    /// Scale applied to the alignment loss before the backbone update.
    pub weight: f64,
}

impl Default for CsdaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            stage: 4,
            memory_size: 1024,
            refit_interval: 50,
            kernel_multipliers: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            cluster_min: 2,
            cluster_max: 10,
            vote_weights: vec![1.0, 2.0, 3.0, 4.0],
            kmeans_iters: 50,
            kmeans_restarts: 3,
            weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_discriminator: f64,
    pub lr_backbone: f64,
    pub poly_power: f64,
    /// Checkpoint directory used as initialization; empty means random init.
    pub init_checkpoint: String,
    pub out_dir: String,
    /// Caps the iterations per epoch; 0 means one pass over the longer dataset.
    pub max_steps_per_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 24,
            lr_discriminator: 0.005,
            lr_backbone: 0.001,
            poly_power: 0.8,
            init_checkpoint: String::new(),
            out_dir: "runs/default".into(),
            max_steps_per_epoch: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub dataset_root: String,
    pub out_dir: String,
    /// Descriptor pairs drawn per domain for the domain-gap probe.
    pub probe_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            dataset_root: String::new(),
            out_dir: "runs/eval".into(),
            probe_samples: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub preset: Preset,
    pub deterministic: bool,
    pub data: DataConfig,
    pub tracker: TrackerConfig,
    pub agda: AgdaConfig,
    pub csda: CsdaConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let mut cfg = RunConfig {
            seed: 0,
            preset,
            deterministic: false,
            data: DataConfig::default(),
            tracker: TrackerConfig::default(),
            agda: AgdaConfig::default(),
            csda: CsdaConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        };
        if preset == Preset::Desk {
            cfg.train.epochs = 5;
            cfg.train.batch_size = 8;
        }
        cfg
    }

    /// Resolves a config from an optional file plus `key=value` overrides.
    /// The preset, if named in either place, selects the base defaults.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut user = match file {
            Some(path) => {
                let text =
                    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{ov}` is not key=value")))?;
            insert_dotted(&mut user, key.trim(), parse_value(raw.trim()))?;
        }
        Self::from_table(user)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table = text
            .parse::<toml::Table>()
            .map_err(|e| Error::Config(e.to_string()))?;
        Self::from_table(table)
    }

    fn from_table(user: toml::Table) -> Result<Self> {
        let known = known_keys();
        let mut flat = BTreeMap::new();
        flatten("", &toml::Value::Table(user.clone()), &mut flat);
        for key in flat.keys() {
            if !known.contains_key(key) {
                return Err(Error::UnknownKey(key.clone()));
            }
        }
        let preset = match flat.get("preset") {
            Some(toml::Value::String(s)) if s == "paper" => Preset::Paper,
            Some(toml::Value::String(s)) if s == "desk" => Preset::Desk,
            Some(other) => return Err(Error::Config(format!("invalid preset {other}"))),
            None => Preset::Desk,
        };
        let mut base = match toml::Value::try_from(RunConfig::preset(preset)) {
            Ok(toml::Value::Table(t)) => t,
            _ => unreachable!("config serializes to a table"),
        };
        merge(&mut base, user);
        let cfg: RunConfig = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.train.epochs == 0 {
            return bad("train.epochs must be >= 1");
        }
        if self.train.batch_size < 2 || self.train.batch_size % 2 != 0 {
            return bad("train.batch_size must be even and >= 2");
        }
        if self.train.lr_backbone <= 0.0 || self.train.lr_discriminator <= 0.0 {
            return bad("learning rates must be positive");
        }
        if self.tracker.widths.len() != 4 {
            return bad("tracker.widths must list 4 stage widths");
        }
        if !(1..=4).contains(&self.tracker.head_stage) {
            return bad("tracker.head_stage must be in 1..=4");
        }
        if self.tracker.in_channels != 1 && self.tracker.in_channels != 3 {
            return bad("tracker.in_channels must be 1 or 3");
        }
        if self.data.search_side != 2 * self.data.template_side {
            return bad("data.search_side must be twice data.template_side");
        }
        if self.data.template_side % 16 != 0 {
            return bad("data.template_side must be divisible by 16");
        }
        if !(0.0..=1.0).contains(&self.data.conf_threshold) {
            return bad("data.conf_threshold must be in [0, 1]");
        }
        if self.data.keyframe_stride == 0 || self.data.source_stride == 0 {
            return bad("strides must be >= 1");
        }
        if self.agda.stages.iter().any(|s| !(1..=4).contains(s)) {
            return bad("agda.stages must be in 1..=4");
        }
        if self.agda.d_model % self.agda.n_heads.max(1) != 0 {
            return bad("agda.d_model must be divisible by agda.n_heads");
        }
        if !matches!(self.agda.generator_mode.as_str(), "two_pass" | "grl") {
            return bad("agda.generator_mode must be `two_pass` or `grl`");
        }
        if self.agda.grl_coefficient < 0.0 {
            return bad("agda.grl_coefficient must be >= 0");
        }
        if self.csda.kernel_multipliers.is_empty()
            || self.csda.kernel_multipliers.iter().any(|&m| m <= 0.0)
        {
            return bad("csda.kernel_multipliers must be non-empty and positive");
        }
        if self.csda.cluster_min < 2 || self.csda.cluster_max < self.csda.cluster_min {
            return bad("csda cluster range must satisfy 2 <= min <= max");
        }
        if self.csda.vote_weights.len() != 4 {
            return bad("csda.vote_weights must list 4 stage weights");
        }
        if !matches!(self.data.segmenter.as_str(), "stub" | "offline") {
            return bad("data.segmenter must be `stub` or `offline`");
        }
        Ok(())
    }

    /// Dotted `key = value` lines, sorted. The output parses back as a config.
    pub fn snapshot(&self) -> String {
        let value = toml::Value::try_from(self).expect("config serializes");
        let mut flat = BTreeMap::new();
        flatten("", &value, &mut flat);
        let mut out = String::new();
        for (k, v) in flat {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.snapshot().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

fn known_keys() -> BTreeMap<String, toml::Value> {
    let value = toml::Value::try_from(RunConfig::default()).expect("config serializes");
    let mut flat = BTreeMap::new();
    flatten("", &value, &mut flat);
    flat
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut BTreeMap<String, toml::Value>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn merge(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn insert_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty());
    let last = last.ok_or_else(|| Error::Config(format!("empty key in `{key}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::UnknownKey(key.to_string())),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_preset_values() {
        let cfg = RunConfig::preset(Preset::Paper);
        assert_eq!(cfg.train.epochs, 20);
        assert_eq!(cfg.train.batch_size, 24);
        assert_eq!(cfg.train.lr_discriminator, 0.005);
        assert_eq!(cfg.train.poly_power, 0.8);
        assert_eq!((cfg.csda.cluster_min, cfg.csda.cluster_max), (2, 10));
        assert_eq!(cfg.csda.vote_weights, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(cfg.agda.stages, vec![1, 2, 3, 4]);
        assert_eq!(cfg.csda.stage, 4);
    }

    #[test]
    fn desk_preset_shrinks_run() {
        let cfg = RunConfig::default();
        assert_eq!((cfg.train.epochs, cfg.train.batch_size), (5, 8));
    }

    #[test]
    fn overrides_and_preset_selection() {
        let cfg = RunConfig::resolve(
            None,
            &[
                "preset = paper".into(),
                "train.lr_backbone=0.01".into(),
                "agda.enabled=false".into(),
                "data.source_root=/tmp/src".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.preset, Preset::Paper);
        assert_eq!(cfg.train.epochs, 20);
        assert_eq!(cfg.train.lr_backbone, 0.01);
        assert!(!cfg.agda.enabled);
        assert_eq!(cfg.data.source_root, "/tmp/src");
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::resolve(None, &["train.epocs=3".into()]).unwrap_err();
        assert!(matches!(err, Error::UnknownKey(ref k) if k == "train.epocs"));
        assert_eq!(err.exit_code(), 2);
        let err = RunConfig::from_toml_str("bogus = 1").unwrap_err();
        assert!(matches!(err, Error::UnknownKey(_)));
    }

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.seed = 42;
        cfg.csda.kernel_multipliers = vec![0.5, 2.0];
        let back = RunConfig::from_toml_str(&cfg.snapshot()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::resolve(None, &["train.batch_size=7".into()]).is_err());
        assert!(RunConfig::resolve(None, &["data.template_side=100".into(), "data.search_side=200".into()]).is_err());
    }
}
