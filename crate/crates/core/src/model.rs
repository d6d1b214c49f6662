//! The detection network: a small convolutional backbone, a transformer
//! encoder, and one decoder plus detection heads that serve both the student
//! (learnable queries) and the teacher (oracle query).
//!
//! The two branches hold the very same decoder and head instances, so every
//! update to one is an update to the other.

use std::sync::Arc;

use candle_core::{DType, Device, Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::aggregator::{Aggregator, FusionMode, OracleQuery};
use crate::error::{KadError, Result};
use crate::geometry::BoxN;
use crate::nn::{sine_position_encoding, FeedForward, LayerNorm, Linear, MultiHeadAttention, Parameters};
use crate::params::{Init, ParamPath, VarStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Feature and query width `d`.
    pub dim: usize,
    /// Number of learnable student queries `m`.
    pub num_queries: usize,
    pub decoder_layers: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Square input side in pixels.
    pub image_size: usize,
    /// Channels of the three stride-2 convolution blocks; a fourth stride-1
    /// block maps to `dim`.
    pub backbone_channels: [usize; 3],
    /// Width of fused text priors `d_t`.
    pub text_dim: usize,
    /// Width of fused image priors `d_v`.
    pub image_dim: usize,
    pub fusion: FusionMode,
    /// Layer-normalize channels after each stride-2 backbone block.
    pub backbone_norm: bool,
    /// Predict box centers as offsets from the centroid of the last decoder
    /// layer's cross-attention instead of from the embedding alone.
    pub attention_reference: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 128,
            num_queries: 25,
            decoder_layers: 3,
            encoder_layers: 2,
            heads: 4,
            ffn_dim: 256,
            image_size: 96,
            backbone_channels: [32, 64, 96],
            text_dim: 510,
            image_dim: 510,
            fusion: FusionMode::Attentive,
            backbone_norm: true,
            attention_reference: true,
        }
    }
}

impl ModelConfig {
    pub const STRIDE: usize = 8;

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(KadError::Config(m));
        if self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.dim % 4 != 0 {
            return fail(format!("dim {} must be a multiple of 4 for 2-D position encoding", self.dim));
        }
        if self.num_queries == 0 || self.decoder_layers == 0 {
            return fail("need at least one query and one decoder layer".into());
        }
        if self.image_size == 0 || self.image_size % Self::STRIDE != 0 {
            return fail(format!("image size {} must be a positive multiple of 8", self.image_size));
        }
        if self.text_dim == 0 || self.image_dim == 0 {
            return fail("prior widths must be >= 1".into());
        }
        Ok(())
    }

    /// Side of the encoded feature map.
    pub fn feature_side(&self) -> usize {
        self.image_size / Self::STRIDE
    }
}

/// 3x3 convolution on channels-last maps, lowered to patch extraction plus a
/// matmul. candle's native conv backward is several times slower on CPU.
#[derive(Debug, Clone)]
struct Conv {
    /// `(cout, 9 * cin)`, patch order `(dy, dx, c)`.
    weight: Tensor,
    bias: Tensor,
    stride: usize,
}

impl Conv {
    const K: usize = 3;

    fn new(cin: usize, cout: usize, stride: usize, vb: &ParamPath) -> Result<Self> {
        let fan_in = (cin * Self::K * Self::K) as f64;
        Ok(Conv {
            weight: vb.get((cout, cin * Self::K * Self::K), "weight", Init::Uniform((6.0 / fan_in).sqrt()))?,
            bias: vb.get(cout, "bias", Init::Const(0.0))?,
            stride,
        })
    }

    /// `(B, H, W, C)` to `(B, H', W', cout)` with padding 1.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (k, s) = (Self::K, self.stride);
        let (b, h, w, c) = x.dims4()?;
        let ho = (h + 2 - k) / s + 1;
        let wo = (w + 2 - k) / s + 1;
        // pad so that every tap can take a contiguous window of s * out rows
        let x = x
            .pad_with_zeros(1, 1, k - 1 + s * ho - h - 1)?
            .pad_with_zeros(2, 1, k - 1 + s * wo - w - 1)?;
        let mut taps = Vec::with_capacity(k * k);
        for dy in 0..k {
            for dx in 0..k {
                let v = x.narrow(1, dy, s * ho)?.narrow(2, dx, s * wo)?;
                let v = if s > 1 {
                    v.reshape((b, ho, s, wo, s, c))?
                        .narrow(2, 0, 1)?
                        .narrow(4, 0, 1)?
                        .reshape((b, ho, wo, c))?
                } else {
                    v
                };
                taps.push(v);
            }
        }
        let patches = Tensor::cat(&taps, 3)?.reshape((b * ho * wo, k * k * c))?;
        let y = patches.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?;
        Ok(y.reshape((b, ho, wo, ()))?)
    }
}

impl Parameters for Conv {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Four 3x3 convolution blocks with total stride 8.
#[derive(Debug, Clone)]
pub struct Backbone {
    blocks: Vec<Conv>,
    norms: Vec<LayerNorm>,
}

impl Backbone {
    fn new(config: &ModelConfig, vb: &ParamPath) -> Result<Self> {
        let [c1, c2, c3] = config.backbone_channels;
        Ok(Backbone {
            blocks: vec![
                Conv::new(3, c1, 2, &vb.pp("0"))?,
                Conv::new(c1, c2, 2, &vb.pp("1"))?,
                Conv::new(c2, c3, 2, &vb.pp("2"))?,
                Conv::new(c3, config.dim, 1, &vb.pp("3"))?,
            ],
            norms: if config.backbone_norm {
                [c1, c2, c3]
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| LayerNorm::new(c, &vb.pp(format!("{i}.norm"))))
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            },
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        let last = self.blocks.len() - 1;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x)?;
            if i < last {
                if let Some(norm) = self.norms.get(i) {
                    x = norm.forward(&x)?;
                }
                x = x.relu()?;
            }
        }
        Ok(x)
    }
}

impl Parameters for Backbone {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect_params(&format!("{prefix}.{i}"), out);
        }
        for (i, n) in self.norms.iter().enumerate() {
            n.collect_params(&format!("{prefix}.{i}.norm"), out);
        }
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
}

impl EncoderLayer {
    fn new(config: &ModelConfig, vb: &ParamPath) -> Result<Self> {
        Ok(EncoderLayer {
            attn: MultiHeadAttention::new(config.dim, config.heads, &vb.pp("attn"))?,
            norm1: LayerNorm::new(config.dim, &vb.pp("norm1"))?,
            ffn: FeedForward::new(config.dim, config.ffn_dim, &vb.pp("ffn"))?,
            norm2: LayerNorm::new(config.dim, &vb.pp("norm2"))?,
        })
    }

    fn forward(&self, x: &Tensor, pos: &Tensor) -> Result<Tensor> {
        let qk = x.broadcast_add(pos)?;
        let (a, _) = self.attn.forward(&qk, &qk, x)?;
        let x = self.norm1.forward(&(x + a)?)?;
        Ok(self.norm2.forward(&(&x + self.ffn.forward(&x)?)?)?)
    }
}

impl Parameters for EncoderLayer {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.attn.collect_params(&format!("{prefix}.attn"), out);
        self.norm1.collect_params(&format!("{prefix}.norm1"), out);
        self.ffn.collect_params(&format!("{prefix}.ffn"), out);
        self.norm2.collect_params(&format!("{prefix}.norm2"), out);
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
    norm3: LayerNorm,
}

impl DecoderLayer {
    fn new(config: &ModelConfig, vb: &ParamPath) -> Result<Self> {
        Ok(DecoderLayer {
            self_attn: MultiHeadAttention::new(config.dim, config.heads, &vb.pp("self_attn"))?,
            norm1: LayerNorm::new(config.dim, &vb.pp("norm1"))?,
            cross_attn: MultiHeadAttention::new(config.dim, config.heads, &vb.pp("cross_attn"))?,
            norm2: LayerNorm::new(config.dim, &vb.pp("norm2"))?,
            ffn: FeedForward::new(config.dim, config.ffn_dim, &vb.pp("ffn"))?,
            norm3: LayerNorm::new(config.dim, &vb.pp("norm3"))?,
        })
    }

    /// Returns the layer output and its head-averaged cross-attention.
    fn forward(&self, tgt: &Tensor, query_pos: &Tensor, memory: &Tensor, memory_pos: &Tensor) -> Result<(Tensor, Tensor)> {
        let q = (tgt + query_pos)?;
        let (sa, _) = self.self_attn.forward(&q, &q, tgt)?;
        let tgt = self.norm1.forward(&(tgt + sa)?)?;
        let key = memory.broadcast_add(memory_pos)?;
        let (ca, attn) = self.cross_attn.forward(&(&tgt + query_pos)?, &key, memory)?;
        let tgt = self.norm2.forward(&(tgt + ca)?)?;
        let tgt = self.norm3.forward(&(&tgt + self.ffn.forward(&tgt)?)?)?;
        Ok((tgt, attn))
    }
}

impl Parameters for DecoderLayer {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.self_attn.collect_params(&format!("{prefix}.self_attn"), out);
        self.norm1.collect_params(&format!("{prefix}.norm1"), out);
        self.cross_attn.collect_params(&format!("{prefix}.cross_attn"), out);
        self.norm2.collect_params(&format!("{prefix}.norm2"), out);
        self.ffn.collect_params(&format!("{prefix}.ffn"), out);
        self.norm3.collect_params(&format!("{prefix}.norm3"), out);
    }
}

#[derive(Debug)]
pub struct Decoder {
    layers: Vec<DecoderLayer>,
}

impl Parameters for Decoder {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.collect_params(&format!("{prefix}.{i}"), out);
        }
    }
}

const REF_EPS: f64 = 1e-4;
/// Starting gate on the attention reference, `sigmoid(2) ~ 0.88`.
const REF_GATE_BIAS: f64 = 2.0;

#[derive(Debug)]
pub struct DetectionHeads {
    box_mlp: [Linear; 3],
    score: Linear,
    ref_gate: Option<Linear>,
}

fn logit(p: &Tensor) -> Result<Tensor> {
    let p = p.clamp(REF_EPS, 1.0 - REF_EPS)?;
    Ok((p.log()? - (1.0 - &p)?.log()?)?)
}

impl DetectionHeads {
    fn new(dim: usize, config: &ModelConfig, vb: &ParamPath) -> Result<Self> {
        Ok(DetectionHeads {
            box_mlp: [
                Linear::new(dim, dim, &vb.pp("box.0"))?,
                Linear::new(dim, dim, &vb.pp("box.1"))?,
                Linear::new(dim, 4, &vb.pp("box.2"))?,
            ],
            score: Linear::new(dim, 1, &vb.pp("score"))?,
            ref_gate: if config.attention_reference {
                Some(Linear::new(dim, 1, &vb.pp("ref_gate"))?)
            } else {
                None
            },
        })
    }

    /// Final embeddings `x` `(B, k, d)` to scores `(B, k)` and center-form
    /// boxes `(B, k, 4)`.
    ///
    /// With an attention centroid `reference` `(B, k, 2)`, center logits are
    /// offsets from its gated logit.
    fn forward(&self, x: &Tensor, reference: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let h = self.box_mlp[0].forward(x)?.relu()?;
        let h = self.box_mlp[1].forward(&h)?.relu()?;
        let mut logits = self.box_mlp[2].forward(&h)?;
        if let Some(r) = reference {
            let mut c = logit(r)?;
            if let Some(g) = &self.ref_gate {
                let gate = candle_nn::ops::sigmoid(&(g.forward(x)? + REF_GATE_BIAS)?)?;
                c = c.broadcast_mul(&gate)?;
            }
            let wh = logits.narrow(2, 2, 2)?;
            logits = Tensor::cat(&[(logits.narrow(2, 0, 2)? + c)?, wh], 2)?;
        }
        let boxes = candle_nn::ops::sigmoid(&logits)?;
        let scores = candle_nn::ops::sigmoid(&self.score.forward(x)?)?.squeeze(2)?;
        Ok((scores, boxes))
    }
}

impl Parameters for DetectionHeads {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, l) in self.box_mlp.iter().enumerate() {
            l.collect_params(&format!("{prefix}.box.{i}"), out);
        }
        self.score.collect_params(&format!("{prefix}.score"), out);
        if let Some(g) = &self.ref_gate {
            g.collect_params(&format!("{prefix}.ref_gate"), out);
        }
    }
}

/// A decoder plus heads. Student and teacher branches are clones of the same
/// `Arc`s.
#[derive(Debug, Clone)]
pub struct Branch {
    decoder: Arc<Decoder>,
    heads: Arc<DetectionHeads>,
}

impl Branch {
    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = self.decoder.named_params("decoder");
        self.heads.collect_params("heads", &mut out);
        out
    }

    pub fn shares_storage_with(&self, other: &Branch) -> bool {
        Arc::ptr_eq(&self.decoder, &other.decoder) && Arc::ptr_eq(&self.heads, &other.heads)
    }
}

/// Encoder output for a batch.
#[derive(Debug, Clone)]
pub struct EncodedFeatures {
    /// `(B, H*W, d)`.
    pub features: Tensor,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryKind {
    Student,
    Teacher,
}

/// Per-layer decoder embeddings and head-averaged cross-attention.
#[derive(Debug, Clone)]
pub struct DecoderTrace {
    /// Per layer `(B, k, d)`.
    pub embeddings: Vec<Tensor>,
    /// Per layer `(B, k, H*W)`.
    pub attention: Vec<Tensor>,
    pub h: usize,
    pub w: usize,
}

impl DecoderTrace {
    pub fn layers(&self) -> usize {
        self.attention.len()
    }

    pub fn detach(&self) -> DecoderTrace {
        DecoderTrace {
            embeddings: self.embeddings.iter().map(Tensor::detach).collect(),
            attention: self.attention.iter().map(Tensor::detach).collect(),
            h: self.h,
            w: self.w,
        }
    }
}

/// Differentiable head outputs of one branch.
#[derive(Debug, Clone)]
pub struct BranchOutput {
    /// `(B, k)` probabilities.
    pub scores: Tensor,
    /// `(B, k, 4)` center-form boxes.
    pub boxes: Tensor,
    pub trace: DecoderTrace,
    pub kind: QueryKind,
}

/// Scored boxes for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    pub scores: Vec<f64>,
    pub boxes: Vec<BoxN>,
}

impl DetectionSet {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Index and value of the highest score; lowest index on ties.
    pub fn top(&self) -> Option<(usize, f64, BoxN)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &s) in self.scores.iter().enumerate() {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        best.map(|(i, s)| (i, s, self.boxes[i]))
    }
}

impl BranchOutput {
    /// Detached per-image detection sets. Box sides are floored at `1e-6` so
    /// that saturated sigmoids still give valid boxes.
    pub fn detections(&self) -> Result<Vec<DetectionSet>> {
        let scores = self.scores.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let boxes = self.boxes.to_dtype(DType::F64)?.to_vec3::<f64>()?;
        scores
            .into_iter()
            .zip(boxes)
            .map(|(s, b)| {
                let boxes = b
                    .into_iter()
                    .map(|c| BoxN::new(c[0], c[1], c[2].max(1e-6), c[3].max(1e-6)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(DetectionSet { scores: s, boxes })
            })
            .collect()
    }
}

/// One heatmap per decoder layer, `h x w`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub layer: usize,
    pub h: usize,
    pub w: usize,
    pub values: Vec<f32>,
}

/// Per-layer attention of query `query` in batch row `batch` as `H x W` maps.
pub fn attention_export(trace: &DecoderTrace, batch: usize, query: usize) -> Result<Vec<Heatmap>> {
    trace
        .attention
        .iter()
        .enumerate()
        .map(|(layer, a)| {
            let (b, k, n) = a.dims3()?;
            if batch >= b {
                return Err(KadError::IndexOutOfRange { index: batch, len: b });
            }
            if query >= k {
                return Err(KadError::IndexOutOfRange { index: query, len: k });
            }
            if n != trace.h * trace.w {
                return Err(KadError::Input(format!("attention width {n} is not {}x{}", trace.h, trace.w)));
            }
            let values = a.get(batch)?.get(query)?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            Ok(Heatmap {
                layer,
                h: trace.h,
                w: trace.w,
                values,
            })
        })
        .collect()
}

/// The full detector: shared vision pathway, student queries, teacher
/// aggregator, and the shared decoder/heads reachable from both branches.
#[derive(Debug)]
pub struct KadModel {
    config: ModelConfig,
    store: VarStore,
    backbone: Backbone,
    encoder: Vec<EncoderLayer>,
    position: Tensor,
    /// `(H*W, 2)` normalized `(x, y)` centers of the feature cells.
    centers: Tensor,
    queries: Tensor,
    student: Branch,
    teacher: Branch,
    aggregator: Aggregator,
}

impl KadModel {
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let store = VarStore::new(seed, dtype, device);
        let root = store.root();
        let backbone = Backbone::new(config, &root.pp("backbone"))?;
        let encoder = (0..config.encoder_layers)
            .map(|i| EncoderLayer::new(config, &root.pp(format!("encoder.{i}"))))
            .collect::<Result<Vec<_>>>()?;
        let decoder = Arc::new(Decoder {
            layers: (0..config.decoder_layers)
                .map(|i| DecoderLayer::new(config, &root.pp(format!("decoder.{i}"))))
                .collect::<Result<Vec<_>>>()?,
        });
        let heads = Arc::new(DetectionHeads::new(config.dim, config, &root.pp("heads"))?);
        let queries = root.get((config.num_queries, config.dim), "queries", Init::Normal(1.0))?;
        let aggregator = Aggregator::new(config.text_dim, config.image_dim, config.dim, config.fusion, &root.pp("aggregator"))?;
        let side = config.feature_side();
        let position = sine_position_encoding(side, side, config.dim, dtype, device)?;
        let centers: Vec<f32> = (0..side * side)
            .flat_map(|i| [((i % side) as f32 + 0.5) / side as f32, ((i / side) as f32 + 0.5) / side as f32])
            .collect();
        let centers = Tensor::from_vec(centers, (side * side, 2), device)?.to_dtype(dtype)?;
        let student = Branch { decoder, heads };
        let teacher = student.clone();
        Ok(KadModel {
            config: config.clone(),
            store,
            backbone,
            encoder,
            position,
            centers,
            queries,
            student,
            teacher,
            aggregator,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &VarStore {
        &self.store
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn aggregator(&self) -> &Aggregator {
        &self.aggregator
    }

    pub fn student_branch(&self) -> &Branch {
        &self.student
    }

    pub fn teacher_branch(&self) -> &Branch {
        &self.teacher
    }

    /// Names of backbone parameters (the low learning-rate group).
    pub fn is_backbone_param(name: &str) -> bool {
        name.starts_with("backbone.")
    }

    /// `encode`: images `(B, 3, S, S)` in `[0, 1]` to encoder features.
    pub fn encode(&self, images: &Tensor) -> Result<EncodedFeatures> {
        let (_, c, h, w) = images.dims4()?;
        let s = self.config.image_size;
        if c != 3 || h != s || w != s {
            return Err(KadError::Input(format!(
                "expected images (B, 3, {s}, {s}), got {:?}",
                images.dims()
            )));
        }
        let x = (images.to_dtype(self.dtype())? - 0.5)?;
        let fmap = self.backbone.forward(&x.permute((0, 2, 3, 1))?.contiguous()?)?;
        let (b, fh, fw, d) = fmap.dims4()?;
        let mut x = fmap.reshape((b, fh * fw, d))?;
        for layer in &self.encoder {
            x = layer.forward(&x, &self.position)?;
        }
        Ok(EncodedFeatures { features: x, h: fh, w: fw })
    }

    /// `decode`: runs `queries` `(B, k, d)` through the shared decoder and heads.
    pub fn decode(&self, feats: &EncodedFeatures, queries: &Tensor, kind: QueryKind) -> Result<BranchOutput> {
        let (b, k, d) = queries.dims3()?;
        if d != self.config.dim {
            return Err(KadError::Input(format!("query width {d}, model width {}", self.config.dim)));
        }
        let (fb, n, _) = feats.features.dims3()?;
        if fb != b || n != feats.h * feats.w {
            return Err(KadError::Input(format!(
                "features {:?} do not match {b} query sets",
                feats.features.dims()
            )));
        }
        if kind == QueryKind::Teacher && k != 1 {
            return Err(KadError::Input(format!("teacher takes one query, got {k}")));
        }
        let branch = match kind {
            QueryKind::Student => &self.student,
            QueryKind::Teacher => &self.teacher,
        };
        let mut tgt = queries.clone();
        let mut embeddings = Vec::with_capacity(branch.decoder.layers.len());
        let mut attention = Vec::with_capacity(branch.decoder.layers.len());
        for layer in &branch.decoder.layers {
            let (out, attn) = layer.forward(&tgt, queries, &feats.features, &self.position)?;
            embeddings.push(out.clone());
            attention.push(attn);
            tgt = out;
        }
        let reference = match attention.last() {
            Some(a) if self.config.attention_reference => Some(a.broadcast_matmul(&self.centers)?),
            _ => None,
        };
        let (scores, boxes) = branch.heads.forward(&tgt, reference.as_ref())?;
        Ok(BranchOutput {
            scores,
            boxes,
            trace: DecoderTrace {
                embeddings,
                attention,
                h: feats.h,
                w: feats.w,
            },
            kind,
        })
    }

    /// Learnable queries broadcast over a batch of `b`.
    pub fn student_queries(&self, b: usize) -> Result<Tensor> {
        Ok(self.queries.unsqueeze(0)?.broadcast_as((b, self.config.num_queries, self.config.dim))?.contiguous()?)
    }

    pub fn student_on_features(&self, feats: &EncodedFeatures) -> Result<BranchOutput> {
        let b = feats.features.dim(0)?;
        self.decode(feats, &self.student_queries(b)?, QueryKind::Student)
    }

    /// `run_student`: encode and decode with the learnable queries only.
    pub fn run_student(&self, images: &Tensor) -> Result<(EncodedFeatures, BranchOutput)> {
        let feats = self.encode(images)?;
        let out = self.student_on_features(&feats)?;
        Ok((feats, out))
    }

    /// `run_teacher`: one oracle query per batch row against shared features.
    pub fn run_teacher(&self, feats: &EncodedFeatures, oracles: &[OracleQuery]) -> Result<BranchOutput> {
        let b = feats.features.dim(0)?;
        if oracles.len() != b {
            return Err(KadError::Input(format!("{} oracle queries for batch of {b}", oracles.len())));
        }
        for o in oracles {
            if o.vector.dims() != [1, self.config.dim] {
                return Err(KadError::Input(format!(
                    "oracle query has shape {:?}, expected [1, {}]",
                    o.vector.dims(),
                    self.config.dim
                )));
            }
        }
        let q = Tensor::stack(&oracles.iter().map(|o| o.vector.clone()).collect::<Vec<_>>(), 0)?;
        self.decode(feats, &q, QueryKind::Teacher)
    }
}

/// Converts interleaved `HxWx3` `u8` images to a `(B, 3, H, W)` tensor in `[0, 1]`.
pub fn images_to_tensor(images: &[&[u8]], size: usize, device: &Device) -> Result<Tensor> {
    let plane = size * size;
    let mut data = vec![0f32; images.len() * 3 * plane];
    for (b, img) in images.iter().enumerate() {
        if img.len() != 3 * plane {
            return Err(KadError::Input(format!(
                "image {b} has {} bytes, expected {}",
                img.len(),
                3 * plane
            )));
        }
        let base = b * 3 * plane;
        for (p, px) in img.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[base + c * plane + p] = px[c] as f32 / 255.0;
            }
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, size, size), device)?)
}
