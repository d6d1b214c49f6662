//! Run configuration: one flat YAML or JSON mapping.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregator::PriorFlags;
use crate::error::{KadError, Result};
use crate::losses::{DistillMode, LossWeights};
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorKind {
    Semantic,
    Visual,
    Spatial,
}

pub fn flags_from(kinds: &[PriorKind]) -> PriorFlags {
    PriorFlags {
        semantic: kinds.contains(&PriorKind::Semantic),
        visual: kinds.contains(&PriorKind::Visual),
        spatial: kinds.contains(&PriorKind::Spatial),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(flatten)]
    pub loss: LossWeights,

    /// Learning rate of everything except the backbone.
    pub lr: f64,
    pub lr_backbone: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Epochs per cosine cycle before the learning rate restarts.
    pub restart_epochs: usize,
    /// Floor of the cosine schedule as a fraction of the base rate.
    pub min_lr_factor: f64,

    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,

    /// Priors fused into the oracle query; empty disables the teacher.
    pub priors: Vec<PriorKind>,
    pub distill: DistillMode,
    /// Supervise unmatched student queries towards score 0.
    pub negatives: bool,

    pub train_annotations: PathBuf,
    pub train_images: PathBuf,
    pub val_annotations: Option<PathBuf>,
    pub val_images: Option<PathBuf>,
    pub prior_cache: Option<PathBuf>,
    pub output: PathBuf,
    /// Evaluate on the validation split every this many epochs; 0 only at the end.
    pub eval_every: usize,
    /// Use only the first `n` training records.
    pub train_limit: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            lr: 1e-4,
            lr_backbone: 1e-5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: None,
            restart_epochs: 10,
            min_lr_factor: 0.0,
            epochs: 50,
            batch_size: 4,
            seed: 0,
            priors: vec![PriorKind::Semantic, PriorKind::Visual, PriorKind::Spatial],
            distill: DistillMode::EmbAttn,
            negatives: true,
            train_annotations: PathBuf::from("data/train/annotations.json"),
            train_images: PathBuf::from("data/train"),
            val_annotations: None,
            val_images: None,
            prior_cache: None,
            output: PathBuf::from("runs/default"),
            eval_every: 0,
            train_limit: None,
        }
    }
}

impl RunConfig {
    pub fn prior_flags(&self) -> PriorFlags {
        flags_from(&self.priors)
    }

    /// Whether the teacher branch runs at all.
    pub fn uses_teacher(&self) -> bool {
        self.prior_flags().any()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let fail = |m: String| Err(KadError::Config(m));
        if self.distill != DistillMode::Off && !self.uses_teacher() {
            return fail("distillation needs at least one enabled prior".into());
        }
        if self.prior_flags().needs_cache() && self.prior_cache.is_none() {
            return fail("semantic or visual priors enabled but no prior_cache given".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if self.restart_epochs == 0 {
            return fail("restart_epochs must be >= 1".into());
        }
        for (name, v) in [("lr", self.lr), ("lr_backbone", self.lr_backbone), ("weight_decay", self.weight_decay)] {
            if !v.is_finite() || v < 0.0 {
                return fail(format!("{name} must be finite and >= 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.min_lr_factor) {
            return fail("min_lr_factor must lie in [0, 1]".into());
        }
        if self.val_annotations.is_some() != self.val_images.is_some() {
            return fail("val_annotations and val_images go together".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return fail("grad_clip must be > 0".into());
            }
        }
        Ok(())
    }

    /// Parses YAML or JSON (JSON is valid YAML) and resolves relative paths
    /// against the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| KadError::load(path, e.to_string()))?;
        let mut cfg: RunConfig = serde_yaml::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.train_annotations);
        fix(&mut self.train_images);
        fix(&mut self.output);
        for p in [&mut self.val_annotations, &mut self.val_images, &mut self.prior_cache]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }
}
