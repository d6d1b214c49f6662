//! The two-branch training loop.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, CheckpointMeta, EpochRecord};
use super::config::RunConfig;
use super::inference::evaluate_ap;
use super::schedule::CosineRestarts;
use crate::aggregator::{PriorBundle, PriorFlags};
use crate::blob::Matrix;
use crate::data::{load_dataset, SceneRecord};
use crate::error::{KadError, Result};
use crate::losses::{attn_distill_loss, detection_loss, emb_distill_loss, total_objective, LossReport, LossWeights};
use crate::matching::{cost_matrix, hungarian_assign, MatchCost};
use crate::model::{images_to_tensor, KadModel};
use crate::priors::{read_prior_cache, PriorCache};

/// Records of one split with their pixels decoded at model resolution.
#[derive(Debug, Clone)]
pub struct LoadedSplit {
    pub records: Vec<SceneRecord>,
    pub pixels: Vec<Vec<u8>>,
    pub image_size: usize,
}

impl LoadedSplit {
    pub fn load(annotations: &Path, images_root: &Path, image_size: usize, limit: Option<usize>) -> Result<Self> {
        let mut records = load_dataset(annotations, images_root)?;
        if let Some(n) = limit {
            records.truncate(n);
        }
        let pixels = records
            .par_iter()
            .map(|r| r.load_rgb(image_size))
            .collect::<Result<Vec<_>>>()?;
        Ok(LoadedSplit {
            records,
            pixels,
            image_size,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn images(&self, idx: &[usize], device: &Device) -> Result<Tensor> {
        let refs: Vec<&[u8]> = idx.iter().map(|&i| self.pixels[i].as_slice()).collect();
        images_to_tensor(&refs, self.image_size, device)
    }

    pub fn gt_boxes(&self, idx: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let data: Vec<f64> = idx.iter().flat_map(|&i| self.records[i].gt_box.to_array()).collect();
        Ok(Tensor::from_vec(data, (idx.len(), 4), device)?.to_dtype(dtype)?)
    }
}

/// Prior bundles for a batch. Spatial-only runs need no cache.
pub fn batch_bundles(
    split: &LoadedSplit,
    idx: &[usize],
    cache: Option<&PriorCache>,
    flags: PriorFlags,
    dims: (usize, usize),
) -> Result<Vec<PriorBundle>> {
    idx.iter()
        .map(|&i| {
            let r = &split.records[i];
            match cache.filter(|_| flags.needs_cache()) {
                Some(c) => c.bundle(&r.category, r.gt_box),
                None => Ok(PriorBundle {
                    text_embeddings: Matrix::zeros(0, dims.0),
                    image_embeddings: Matrix::zeros(0, dims.1),
                    gt_box: r.gt_box,
                    category: r.category.clone(),
                }),
            }
        })
        .collect()
}

/// One JSON line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub lr_backbone: f64,
    #[serde(flatten)]
    pub report: LossReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub history: Vec<EpochRecord>,
}

pub struct Trainer {
    config: RunConfig,
    model: KadModel,
    opt_backbone: AdamW,
    opt_rest: AdamW,
    backbone_vars: Vec<Var>,
    rest_vars: Vec<Var>,
    cache: Option<PriorCache>,
    train: LoadedSplit,
    val: Option<LoadedSplit>,
    schedule: CosineRestarts,
    step: usize,
    epoch: usize,
    history: Vec<EpochRecord>,
}

impl Trainer {
    /// Loads data and priors and checks that every training category has a
    /// bundle before any step runs.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let train = LoadedSplit::load(
            &config.train_annotations,
            &config.train_images,
            config.model.image_size,
            config.train_limit,
        )?;
        let val = match (&config.val_annotations, &config.val_images) {
            (Some(a), Some(i)) => Some(LoadedSplit::load(a, i, config.model.image_size, None)?),
            _ => None,
        };
        Self::with_data(config, train, val)
    }

    pub fn with_data(config: RunConfig, train: LoadedSplit, val: Option<LoadedSplit>) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(KadError::Config("training split has no records".into()));
        }
        if train.image_size != config.model.image_size {
            return Err(KadError::Config(format!(
                "split decoded at {}px, model expects {}px",
                train.image_size, config.model.image_size
            )));
        }
        let flags = config.prior_flags();
        let cache = match (&config.prior_cache, flags.needs_cache()) {
            (Some(path), true) => {
                let c = read_prior_cache(path)?;
                if (c.text_dim, c.image_dim) != (config.model.text_dim, config.model.image_dim) {
                    return Err(KadError::Config(format!(
                        "prior cache dims {}x{} do not match model text_dim/image_dim {}x{}",
                        c.text_dim, c.image_dim, config.model.text_dim, config.model.image_dim
                    )));
                }
                let mut missing: Vec<&str> = train
                    .records
                    .iter()
                    .map(|r| r.category.as_str())
                    .filter(|cat| c.get(cat).is_none())
                    .collect();
                missing.sort_unstable();
                missing.dedup();
                if !missing.is_empty() {
                    return Err(KadError::Config(format!("no prior bundle for categories {missing:?}")));
                }
                for name in c.categories() {
                    let e = c.get(name).unwrap();
                    if flags.semantic && e.text.rows() == 0 || flags.visual && e.image.rows() == 0 {
                        return Err(KadError::Config(format!(
                            "category {name:?} lacks embeddings for an enabled prior"
                        )));
                    }
                }
                Some(c)
            }
            _ => None,
        };

        let model = KadModel::new(&config.model, config.seed, DType::F32, &Device::Cpu)?;
        let (mut backbone_vars, mut rest_vars) = (Vec::new(), Vec::new());
        for (name, var) in model.store().vars() {
            if KadModel::is_backbone_param(&name) {
                backbone_vars.push(var);
            } else {
                rest_vars.push(var);
            }
        }
        let params = |lr: f64| ParamsAdamW {
            lr,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
        };
        let opt_backbone = AdamW::new(backbone_vars.clone(), params(config.lr_backbone))?;
        let opt_rest = AdamW::new(rest_vars.clone(), params(config.lr))?;
        let steps_per_epoch = train.len().div_ceil(config.batch_size);
        let schedule = CosineRestarts::new(config.restart_epochs * steps_per_epoch, config.min_lr_factor);
        Ok(Trainer {
            config,
            model,
            opt_backbone,
            opt_rest,
            backbone_vars,
            rest_vars,
            cache,
            train,
            val,
            schedule,
            step: 0,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn model(&self) -> &KadModel {
        &self.model
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn cache(&self) -> Option<&PriorCache> {
        self.cache.as_ref()
    }

    pub fn train_split(&self) -> &LoadedSplit {
        &self.train
    }

    pub fn val_split(&self) -> Option<&LoadedSplit> {
        self.val.as_ref()
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    /// Batches of one epoch in seeded shuffled order.
    pub fn epoch_batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// Forward pass and losses for a batch of training records.
    pub fn batch_loss(&self, idx: &[usize], weights: &LossWeights) -> Result<(Tensor, LossReport, Vec<usize>)> {
        let device = self.model.device();
        let dtype = self.model.dtype();
        let images = self.train.images(idx, device)?;
        let gt = self.train.gt_boxes(idx, dtype, device)?;

        let feats = self.model.encode(&images)?;
        let student = self.model.student_on_features(&feats)?;

        // matching sees plain numbers, never the graph
        let match_cost = MatchCost { lambda: weights.lambda };
        let matched = student
            .detections()?
            .iter()
            .zip(idx)
            .map(|(d, &i)| {
                let costs = cost_matrix(&d.scores, &d.boxes, &[self.train.records[i].gt_box], match_cost)?;
                Ok(hungarian_assign(&costs)?.pairs[0].0)
            })
            .collect::<Result<Vec<_>>>()?;

        let l_v = detection_loss(&student.scores, &student.boxes, &matched, &gt, weights.lambda, self.config.negatives)?;
        let mode = self.config.distill;
        let (l_k, l_emb, l_attn) = if self.config.uses_teacher() {
            let flags = self.config.prior_flags();
            let bundles = batch_bundles(&self.train, idx, self.cache.as_ref(), flags, self.model.aggregator().dims())?;
            let refs: Vec<&PriorBundle> = bundles.iter().collect();
            let oracles = self.model.aggregator().build_oracle_batch(&refs, flags, dtype, device)?;
            let teacher = self.model.run_teacher(&feats, &oracles)?;
            let l_k = detection_loss(&teacher.scores, &teacher.boxes, &vec![0; idx.len()], &gt, weights.lambda, false)?;
            let l_emb = if mode.uses_embeddings() {
                Some(emb_distill_loss(&teacher.trace.embeddings, &student.trace.embeddings, &matched)?)
            } else {
                None
            };
            let l_attn = if mode.uses_attention() {
                Some(attn_distill_loss(&teacher.trace.attention, &student.trace.attention, &matched)?)
            } else {
                None
            };
            (Some(l_k), l_emb, l_attn)
        } else {
            (None, None, None)
        };
        let (total, report) = total_objective(&l_v, l_k.as_ref(), l_emb.as_ref(), l_attn.as_ref(), weights, mode)?;
        Ok((total, report, matched))
    }

    /// Loss report of a batch under the current parameters, with no update.
    pub fn replay(&self, idx: &[usize], weights: &LossWeights) -> Result<LossReport> {
        Ok(self.batch_loss(idx, weights)?.1)
    }

    fn dump_nonfinite(&self, idx: &[usize], report: &LossReport, matched: &[usize]) -> Result<PathBuf> {
        fs::create_dir_all(&self.config.output)?;
        let path = self.config.output.join("nonfinite_batch.json");
        let images: Vec<_> = idx
            .iter()
            .map(|&i| {
                let r = &self.train.records[i];
                serde_json::json!({
                    "image_id": r.image_id,
                    "path": r.image_path,
                    "category": r.category,
                    "gt_box": r.gt_box.to_array(),
                })
            })
            .collect();
        let dump = serde_json::json!({
            "epoch": self.epoch,
            "step": self.step,
            "report": report,
            "matched": matched,
            "images": images,
        });
        fs::write(&path, serde_json::to_string_pretty(&dump)?)?;
        Ok(path)
    }

    /// One optimizer step on a batch.
    pub fn train_step(&mut self, idx: &[usize]) -> Result<StepLog> {
        let weights = self.config.loss;
        let (total, report, matched) = self.batch_loss(idx, &weights)?;
        let value = total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !report.is_finite() || !value.is_finite() {
            let path = self.dump_nonfinite(idx, &report, &matched)?;
            return Err(KadError::NonFiniteLoss {
                step: self.step,
                detail: format!("{report:?}; batch written to {}", path.display()),
            });
        }
        // the f64 report must describe the f32 graph that is optimized
        if (value - report.total).abs() > 1e-4 * report.total.abs().max(1.0) {
            return Err(KadError::ContractViolation(format!(
                "graph total {value} disagrees with report total {}",
                report.total
            )));
        }
        let mut grads = total.backward()?;
        if let Some(clip) = self.config.grad_clip {
            clip_grad_norm(&mut grads, self.backbone_vars.iter().chain(&self.rest_vars), clip)?;
        }
        let factor = self.schedule.factor(self.step);
        let lr = self.config.lr * factor;
        let lr_backbone = self.config.lr_backbone * factor;
        self.opt_rest.set_learning_rate(lr);
        self.opt_backbone.set_learning_rate(lr_backbone);
        self.opt_backbone.step(&grads)?;
        self.opt_rest.step(&grads)?;
        debug_assert!(self.model.student_branch().shares_storage_with(self.model.teacher_branch()));
        let log = StepLog {
            epoch: self.epoch,
            step: self.step,
            lr,
            lr_backbone,
            report,
        };
        self.step += 1;
        Ok(log)
    }

    /// Runs one epoch, appending step lines to `log`.
    pub fn train_epoch(&mut self, log: &mut dyn Write) -> Result<EpochRecord> {
        let start = Instant::now();
        let batches = self.epoch_batches(self.epoch);
        let mut sum = LossReport::default();
        for idx in &batches {
            let line = self.train_step(idx)?;
            serde_json::to_writer(&mut *log, &line)?;
            log.write_all(b"\n")?;
            let r = line.report;
            sum.l_v += r.l_v;
            sum.l_k += r.l_k;
            sum.l_emb += r.l_emb;
            sum.l_attn += r.l_attn;
            sum.l_distill += r.l_distill;
            sum.total += r.total;
        }
        log.flush()?;
        let n = batches.len() as f64;
        let mean = LossReport {
            l_v: sum.l_v / n,
            l_k: sum.l_k / n,
            l_emb: sum.l_emb / n,
            l_attn: sum.l_attn / n,
            l_distill: sum.l_distill / n,
            total: sum.total / n,
        };
        self.epoch += 1;
        let last = self.epoch == self.config.epochs;
        let due = self.config.eval_every > 0 && self.epoch % self.config.eval_every == 0;
        let val = match &self.val {
            Some(v) if last || due => Some(evaluate_ap(&self.model, v, 16)?.summary()),
            _ => None,
        };
        let record = EpochRecord {
            epoch: self.epoch,
            steps: batches.len(),
            mean,
            val,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} loss {:.4} val {:?} ({:.0}s)",
            record.epoch,
            record.mean.total,
            record.val,
            record.seconds
        );
        self.history.push(record.clone());
        Ok(record)
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta::new(self.config.clone(), self.epoch, self.step, self.history.clone())
    }

    /// Trains for the configured epochs, checkpointing after each.
    pub fn run(&mut self) -> Result<TrainOutcome> {
        fs::create_dir_all(&self.config.output)?;
        let log_path = self.config.output.join("train_log.jsonl");
        let mut log = BufWriter::new(File::create(&log_path)?);
        let checkpoint = self.config.output.join("checkpoint");
        save_checkpoint(&self.model, &self.meta(), &checkpoint)?;
        while self.epoch < self.config.epochs {
            self.train_epoch(&mut log)?;
            save_checkpoint(&self.model, &self.meta(), &checkpoint)?;
        }
        Ok(TrainOutcome {
            checkpoint,
            log: log_path,
            history: self.history.clone(),
        })
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_grad_norm<'a>(
    grads: &mut candle_core::backprop::GradStore,
    vars: impl Iterator<Item = &'a Var> + Clone,
    max_norm: f64,
) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars.clone() {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / (norm + 1e-12);
        for v in vars {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), (g * scale)?);
            }
        }
    }
    Ok(norm)
}

/// `train`: builds a trainer from `config` and runs it to completion.
pub fn train(config: RunConfig) -> Result<TrainOutcome> {
    Trainer::new(config)?.run()
}
