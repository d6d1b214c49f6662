//! Training objectives: the detection loss shared by the student and teacher
//! branches, the attention and embedding distillation terms, and the total
//! objective that combines them.
//!
//! All tensor losses are dtype-generic so the same code paths run in `f32`
//! for training and in `f64` for gradient verification.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{KadError, Result};
use crate::geometry::tensor as boxes;

/// Probabilities are clamped to `[EPS, 1 - EPS]` before the log.
pub const BCE_EPS: f64 = 1e-7;
/// Attention rows whose sum deviates more than this are rejected.
pub const SIMPLEX_TOL: f64 = 1e-4;
const MIN_NORM: f64 = 1e-12;
const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Box terms against the confidence term.
    pub lambda: f64,
    /// Weight of the distillation loss in the total objective.
    pub alpha: f64,
    /// Attention term against the embedding term inside the distillation loss.
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 5.0,
            alpha: 0.2,
            eta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("alpha", self.alpha), ("eta", self.eta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(KadError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which distillation terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DistillMode {
    #[serde(rename = "off")]
    Off,
    #[serde(rename = "emb")]
    Emb,
    #[default]
    #[serde(rename = "emb+attn", alias = "emb&attn")]
    EmbAttn,
}

impl DistillMode {
    pub fn uses_embeddings(self) -> bool {
        !matches!(self, DistillMode::Off)
    }

    pub fn uses_attention(self) -> bool {
        matches!(self, DistillMode::EmbAttn)
    }
}

/// Per-step loss breakdown, serialized as one JSON line per training step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_v: f64,
    pub l_k: f64,
    pub l_emb: f64,
    pub l_attn: f64,
    pub l_distill: f64,
    pub total: f64,
}

impl LossReport {
    /// Exact linear combination of the components. Terms disabled by `mode`
    /// are reported as zero.
    pub fn compose(
        l_v: f64,
        l_k: f64,
        l_emb: f64,
        l_attn: f64,
        weights: &LossWeights,
        mode: DistillMode,
    ) -> Self {
        let l_emb = if mode.uses_embeddings() { l_emb } else { 0.0 };
        let l_attn = if mode.uses_attention() { l_attn } else { 0.0 };
        let l_distill = l_emb + weights.eta * l_attn;
        LossReport {
            l_v,
            l_k,
            l_emb,
            l_attn,
            l_distill,
            total: l_v + l_k + weights.alpha * l_distill,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_v, self.l_k, self.l_emb, self.l_attn, self.l_distill, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Elementwise binary cross-entropy against a constant target.
pub fn bce(prob: &Tensor, target: f64) -> Result<Tensor> {
    let p = prob.clamp(BCE_EPS, 1.0 - BCE_EPS)?;
    let pos = (p.log()? * -target)?;
    let neg = ((1.0 - &p)?.log()? * -(1.0 - target))?;
    Ok((pos + neg)?)
}

/// `(B, k)` one-hot selector for the matched index of every batch row.
fn one_hot(matched: &[usize], k: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let mut data = vec![0f64; matched.len() * k];
    for (b, &i) in matched.iter().enumerate() {
        if i >= k {
            return Err(KadError::IndexOutOfRange { index: i, len: k });
        }
        data[b * k + i] = 1.0;
    }
    Ok(Tensor::from_vec(data, (matched.len(), k), device)?.to_dtype(dtype)?)
}

/// Picks row `matched[b]` out of `(B, k, n)`, giving `(B, n)`.
pub fn select_rows(x: &Tensor, matched: &[usize]) -> Result<Tensor> {
    let (b, k, _) = x.dims3()?;
    if b != matched.len() {
        return Err(KadError::Input(format!("{} matches for batch of {b}", matched.len())));
    }
    let mask = one_hot(matched, k, x.dtype(), x.device())?.unsqueeze(2)?;
    Ok(x.broadcast_mul(&mask)?.sum(1)?)
}

/// Detection loss averaged over the batch.
///
/// `scores` is `(B, k)` of probabilities, `pred_boxes` `(B, k, 4)` center-form,
/// `gt` `(B, 4)`. Row `matched[b]` is supervised with target score 1 plus the
/// weighted GIoU and L1 box terms. With `negatives`, the remaining `k - 1`
/// scores of each row receive target 0, averaged per row. The teacher has
/// `k = 1`, so the negative term vanishes.
pub fn detection_loss(
    scores: &Tensor,
    pred_boxes: &Tensor,
    matched: &[usize],
    gt: &Tensor,
    lambda: f64,
    negatives: bool,
) -> Result<Tensor> {
    let (b, k) = scores.dims2()?;
    let mask = one_hot(matched, k, scores.dtype(), scores.device())?;
    let matched_score = (scores * &mask)?.sum(1)?;
    let matched_box = select_rows(pred_boxes, matched)?;
    let geometric = (boxes::giou_loss(&matched_box, gt)? + boxes::box_l1(&matched_box, gt)?)?;
    let per_image = (bce(&matched_score, 1.0)? + (geometric * lambda)?)?;
    let per_image = if negatives && k > 1 {
        let unmatched = (1.0 - &mask)?;
        let neg = (bce(scores, 0.0)? * unmatched)?.sum(1)?;
        (per_image + (neg / (k - 1) as f64)?)?
    } else {
        per_image
    };
    debug_assert_eq!(per_image.dims1()?, b);
    Ok(per_image.mean(0)?)
}

fn check_simplex(rows: &Tensor, what: &str) -> Result<()> {
    let rows = rows.to_dtype(DType::F64)?.flatten_to(D::Minus2)?;
    let sums = rows.sum(D::Minus1)?.to_vec1::<f64>()?;
    if let Some((i, s)) = sums.iter().enumerate().find(|(_, s)| (*s - 1.0).abs() > SIMPLEX_TOL) {
        return Err(KadError::ContractViolation(format!(
            "{what} attention row {i} sums to {s}"
        )));
    }
    let min = rows.min(D::Minus1)?.min(0)?.to_scalar::<f64>()?;
    if min < 0.0 {
        return Err(KadError::ContractViolation(format!("{what} attention has entry {min}")));
    }
    Ok(())
}

fn check_layers(teacher: &[Tensor], student: &[Tensor]) -> Result<()> {
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(KadError::Input(format!(
            "teacher has {} layers, student {}",
            teacher.len(),
            student.len()
        )));
    }
    Ok(())
}

/// Sum over layers of `KL(teacher || student[matched])`, averaged over the
/// batch. Teacher rows are fixed targets and receive no gradient.
///
/// Each layer holds `(B, 1, N)` teacher and `(B, k, N)` student attention.
pub fn attn_distill_loss(teacher: &[Tensor], student: &[Tensor], matched: &[usize]) -> Result<Tensor> {
    check_layers(teacher, student)?;
    let mut total: Option<Tensor> = None;
    for (t, s) in teacher.iter().zip(student) {
        let t = t.detach().squeeze(1)?;
        let s = select_rows(s, matched)?;
        if t.dims() != s.dims() {
            return Err(KadError::Input(format!(
                "attention shapes differ: teacher {:?}, student {:?}",
                t.dims(),
                s.dims()
            )));
        }
        check_simplex(&t, "teacher")?;
        check_simplex(&s, "student")?;
        let log_t = t.clamp(LOG_FLOOR, f64::INFINITY)?.log()?;
        let log_s = s.clamp(LOG_FLOOR, f64::INFINITY)?.log()?;
        let kl = (&t * (log_t - log_s)?)?.sum(1)?.mean(0)?;
        total = Some(match total {
            Some(acc) => (acc + kl)?,
            None => kl,
        });
    }
    Ok(total.expect("at least one layer"))
}

/// Sum over layers of `1 - cos(teacher, student[matched])`, averaged over the
/// batch. Each layer holds `(B, 1, d)` teacher and `(B, k, d)` student
/// embeddings. Teacher embeddings receive no gradient.
pub fn emb_distill_loss(teacher: &[Tensor], student: &[Tensor], matched: &[usize]) -> Result<Tensor> {
    check_layers(teacher, student)?;
    let mut total: Option<Tensor> = None;
    for (layer, (t, s)) in teacher.iter().zip(student).enumerate() {
        let t = t.detach().squeeze(1)?;
        let s = select_rows(s, matched)?;
        let t_norm = t.sqr()?.sum(1)?.sqrt()?;
        let s_norm = s.sqr()?.sum(1)?.sqrt()?;
        for n in t_norm
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?
            .into_iter()
            .chain(s_norm.to_dtype(DType::F64)?.to_vec1::<f64>()?)
        {
            if !(n > MIN_NORM) {
                return Err(KadError::DegenerateEmbedding(n, layer));
            }
        }
        let cos = ((&t * &s)?.sum(1)? / (t_norm * s_norm)?)?;
        let term = (1.0 - cos)?.mean(0)?;
        total = Some(match total {
            Some(acc) => (acc + term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one layer"))
}

/// Total objective `l_v + l_k + alpha * (l_emb + eta * l_attn)` as a tensor
/// for backpropagation, with the matching report. Missing terms count as zero.
pub fn total_objective(
    l_v: &Tensor,
    l_k: Option<&Tensor>,
    l_emb: Option<&Tensor>,
    l_attn: Option<&Tensor>,
    weights: &LossWeights,
    mode: DistillMode,
) -> Result<(Tensor, LossReport)> {
    let mut total = l_v.clone();
    if let Some(k) = l_k {
        total = (total + k)?;
    }
    let l_emb = l_emb.filter(|_| mode.uses_embeddings());
    let l_attn = l_attn.filter(|_| mode.uses_attention());
    if let Some(e) = l_emb {
        total = (total + (e * weights.alpha)?)?;
    }
    if let Some(a) = l_attn {
        total = (total + (a * (weights.alpha * weights.eta))?)?;
    }
    let value = |t: Option<&Tensor>| -> Result<f64> { t.map_or(Ok(0.0), scalar) };
    let report = LossReport::compose(
        scalar(l_v)?,
        value(l_k)?,
        value(l_emb)?,
        value(l_attn)?,
        weights,
        mode,
    );
    Ok((total, report))
}
