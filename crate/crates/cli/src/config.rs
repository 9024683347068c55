//! Run configuration: plain key=value text, overridable by flags.
//!
//! One flat namespace covers the model, training, and post-processing
//! settings so a run directory's `config.txt` can reproduce the run
//! exactly. Unknown keys are rejected with the list of valid ones.

use std::fmt;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use drnet_core::heads::MultiHeadConfig;
use drnet_core::model::{FeatureRefineMode, Model, ModelConfig, TemporalPair, Variant};
use drnet_core::optim::SgdConfig;
use drnet_core::postprocess::PostprocessConfig;
use drnet_core::training::TrainConfig;

/// What a run trains or evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunVariant {
    /// Dual-refinement static detector.
    Drnet,
    /// Plain four-scale baseline.
    Ssd4s,
    /// Temporal pair without feature location refinement.
    Trnet,
    /// Temporal pair with the full anchor-offset detection.
    Tdrnet,
}

impl RunVariant {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "drnet" => RunVariant::Drnet,
            "ssd4s" => RunVariant::Ssd4s,
            "trnet" => RunVariant::Trnet,
            "tdrnet" => RunVariant::Tdrnet,
            _ => bail!("unknown variant '{}'; expected drnet|ssd4s|trnet|tdrnet", s),
        })
    }
}

impl fmt::Display for RunVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RunVariant::Drnet => "drnet",
            RunVariant::Ssd4s => "ssd4s",
            RunVariant::Trnet => "trnet",
            RunVariant::Tdrnet => "tdrnet",
        };
        f.write_str(s)
    }
}

const RUN_KEYS: &[&str] = &[
    "variant",
    "steps",
    "batch",
    "seed",
    "lr",
    "momentum",
    "weight_decay",
    "score_threshold",
    "nms_iou",
    "top_k",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub variant: RunVariant,
    pub model: ModelConfig,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub post: PostprocessConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sgd = SgdConfig::default();
        RunConfig {
            variant: RunVariant::Drnet,
            model: ModelConfig::default(),
            steps: 2000,
            batch: 4,
            seed: 0,
            lr: sgd.base_lr,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
            post: PostprocessConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("config line {}: expected key=value", lineno + 1))?;
            self.apply_key(key.trim(), value.trim())
                .with_context(|| format!("config line {}", lineno + 1))?;
        }
        Ok(())
    }

    pub fn apply_key(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "variant" => self.variant = RunVariant::parse(value)?,
            "steps" => self.steps = value.parse().context("steps")?,
            "batch" => self.batch = value.parse().context("batch")?,
            "seed" => self.seed = value.parse().context("seed")?,
            "lr" => self.lr = value.parse().context("lr")?,
            "momentum" => self.momentum = value.parse().context("momentum")?,
            "weight_decay" => self.weight_decay = value.parse().context("weight_decay")?,
            "score_threshold" => self.post.score_threshold = value.parse().context("score_threshold")?,
            "nms_iou" => self.post.nms_iou = value.parse().context("nms_iou")?,
            "top_k" => self.post.top_k = value.parse().context("top_k")?,
            _ => self.model.apply_key(key, value).map_err(|e| match e {
                drnet_core::model::CheckpointError::UnknownKey(k, model_keys) => {
                    anyhow!(
                        "unknown config key '{}'; valid keys: {}, {}",
                        k,
                        RUN_KEYS.join(", "),
                        model_keys
                    )
                }
                other => anyhow!(other),
            })?,
        }
        Ok(())
    }

    /// The exact resolved configuration, echoed into every run directory.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("variant={}\n", self.variant));
        s.push_str(&format!("steps={}\n", self.steps));
        s.push_str(&format!("batch={}\n", self.batch));
        s.push_str(&format!("seed={}\n", self.seed));
        s.push_str(&format!("lr={}\n", self.lr));
        s.push_str(&format!("momentum={}\n", self.momentum));
        s.push_str(&format!("weight_decay={}\n", self.weight_decay));
        s.push_str(&format!("score_threshold={}\n", self.post.score_threshold));
        s.push_str(&format!("nms_iou={}\n", self.post.nms_iou));
        s.push_str(&format!("top_k={}\n", self.post.top_k));
        for line in self.model.to_kv().lines() {
            if !line.starts_with("variant=") {
                s.push_str(line);
                s.push('\n');
            }
        }
        s
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch,
            seed: self.seed,
            sgd: SgdConfig {
                momentum: self.momentum,
                weight_decay: self.weight_decay,
                base_lr: self.lr,
            },
        }
    }

    /// Builds the network(s) this run trains.
    pub fn build(&self) -> Result<BuiltModel> {
        let mut model_cfg = self.model.clone();
        Ok(match self.variant {
            RunVariant::Drnet => {
                model_cfg.variant = Variant::Drnet;
                BuiltModel::Single(Model::build(model_cfg, self.seed))
            }
            RunVariant::Ssd4s => {
                model_cfg.variant = Variant::Ssd4s;
                model_cfg.deform_head = false;
                model_cfg.feature_refine = FeatureRefineMode::Off;
                BuiltModel::Single(Model::build(model_cfg, self.seed))
            }
            RunVariant::Trnet => {
                model_cfg.deform_head = false;
                model_cfg.feature_refine = FeatureRefineMode::Off;
                BuiltModel::Pair(drnet_core::model::build_pair(&model_cfg, self.seed))
            }
            RunVariant::Tdrnet => {
                model_cfg.deform_head = true;
                model_cfg.feature_refine = FeatureRefineMode::FromAnchorOffsets;
                BuiltModel::Pair(drnet_core::model::build_pair(&model_cfg, self.seed))
            }
        })
    }

    /// Maps the ablation flags onto the head configuration.
    pub fn apply_ablations(&mut self, no_feature_refine: bool, no_deform_head: bool, single_head: bool, multi_head: bool) -> Result<()> {
        if single_head && multi_head {
            bail!("--single-head and --multi-head are mutually exclusive");
        }
        if single_head {
            self.model.head = MultiHeadConfig::single();
        }
        if multi_head {
            self.model.head = MultiHeadConfig::default_dual();
        }
        if no_feature_refine {
            // keep the deformable head but feed it offsets computed from
            // the detection features (the original deformable pipeline)
            self.model.feature_refine = FeatureRefineMode::FromFeatures;
        }
        if no_deform_head {
            self.model.deform_head = false;
            self.model.feature_refine = FeatureRefineMode::Off;
        }
        Ok(())
    }
}

pub enum BuiltModel {
    Single(Model),
    Pair(TemporalPair),
}
