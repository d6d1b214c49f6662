//! Knowledge aggregation: fuses the semantic and visual prior embeddings of a
//! category and the ground-truth box into the teacher's oracle query.

use candle_core::{DType, Device, Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::blob::Matrix;
use crate::error::{KadError, Result};
use crate::geometry::BoxN;
use crate::nn::{softmax_last, Linear, Parameters};
use crate::params::{Init, ParamPath};

/// Initial weight bound of the four box columns of the projection. The box
/// is four numbers next to a thousand prior dimensions; with the fan-in bound
/// its signal would start out negligible.
const SPATIAL_INIT_BOUND: f64 = 1.0;

/// Priors available for one training sample.
#[derive(Debug, Clone)]
pub struct PriorBundle {
    /// `p x d_t`, one row per generated description.
    pub text_embeddings: Matrix,
    /// `q x d_v`, may be empty.
    pub image_embeddings: Matrix,
    pub gt_box: BoxN,
    pub category: String,
}

impl PriorBundle {
    pub fn validate(&self) -> Result<()> {
        if self.text_embeddings.rows() == 0 {
            return Err(KadError::EmptyInput("prior bundle has no text embeddings"));
        }
        if !self.text_embeddings.is_finite() || !self.image_embeddings.is_finite() {
            return Err(KadError::Input(format!(
                "non-finite prior embedding for category {}",
                self.category
            )));
        }
        self.gt_box.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    #[default]
    Attentive,
    Max,
    Avg,
}

/// Which priors feed the oracle query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorFlags {
    pub semantic: bool,
    pub visual: bool,
    pub spatial: bool,
}

impl PriorFlags {
    pub const ALL: PriorFlags = PriorFlags {
        semantic: true,
        visual: true,
        spatial: true,
    };
    pub const NONE: PriorFlags = PriorFlags {
        semantic: false,
        visual: false,
        spatial: false,
    };
    pub const SPATIAL: PriorFlags = PriorFlags {
        semantic: false,
        visual: false,
        spatial: true,
    };

    pub fn any(&self) -> bool {
        self.semantic || self.visual || self.spatial
    }

    /// Whether a prior cache is needed at all.
    pub fn needs_cache(&self) -> bool {
        self.semantic || self.visual
    }
}

impl Default for PriorFlags {
    fn default() -> Self {
        PriorFlags::ALL
    }
}

/// Single-head self-attention with a residual connection, no normalization.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    q: Linear,
    k: Linear,
    v: Linear,
}

impl SelfAttention {
    pub fn new(dim: usize, vb: &ParamPath) -> Result<Self> {
        Ok(SelfAttention {
            q: Linear::new(dim, dim, &vb.pp("q"))?,
            k: Linear::new(dim, dim, &vb.pp("k"))?,
            v: Linear::new(dim, dim, &vb.pp("v"))?,
        })
    }

    /// `(n, d) -> (n, d)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let d = x.dim(1)?;
        let logits = (self.q.forward(x)?.matmul(&self.k.forward(x)?.t()?)? / (d as f64).sqrt())?;
        let attn = softmax_last(&logits)?;
        Ok((x + attn.matmul(&self.v.forward(x)?)?)?)
    }
}

impl Parameters for SelfAttention {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.q.collect_params(&format!("{prefix}.q"), out);
        self.k.collect_params(&format!("{prefix}.k"), out);
        self.v.collect_params(&format!("{prefix}.v"), out);
    }
}

#[derive(Debug, Clone)]
pub struct FusionParams {
    pub mode: FusionMode,
    attention: Option<SelfAttention>,
}

impl FusionParams {
    pub fn new(mode: FusionMode, dim: usize, vb: &ParamPath) -> Result<Self> {
        let attention = match mode {
            FusionMode::Attentive => Some(SelfAttention::new(dim, vb)?),
            FusionMode::Max | FusionMode::Avg => None,
        };
        Ok(FusionParams { mode, attention })
    }

    /// Pooling without learned parameters.
    pub fn pooling(mode: FusionMode) -> Result<Self> {
        if mode == FusionMode::Attentive {
            return Err(KadError::Config("attentive fusion needs attention weights".into()));
        }
        Ok(FusionParams { mode, attention: None })
    }
}

impl Parameters for FusionParams {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        if let Some(a) = &self.attention {
            a.collect_params(&format!("{prefix}.attn"), out);
        }
    }
}

/// Fuses `n` embedding rows into one: attentive mode runs one self-attention
/// layer and max-pools over rows; `max` and `avg` pool the raw rows.
pub fn attentive_fuse(embeddings: &Tensor, params: &FusionParams) -> Result<Tensor> {
    let (n, _) = embeddings.dims2()?;
    if n == 0 {
        return Err(KadError::EmptyInput("no embeddings to fuse"));
    }
    let fused = match params.mode {
        FusionMode::Attentive => {
            let attn = params
                .attention
                .as_ref()
                .ok_or_else(|| KadError::Config("attentive fusion without attention weights".into()))?;
            attn.forward(embeddings)?.max_keepdim(0)?
        }
        FusionMode::Max => embeddings.max_keepdim(0)?,
        FusionMode::Avg => embeddings.mean_keepdim(0)?,
    };
    Ok(fused)
}

/// Fused oracle query, `(1, d)`.
#[derive(Debug, Clone)]
pub struct OracleQuery {
    pub vector: Tensor,
    pub provenance: PriorFlags,
}

/// Learned parameters that turn a [`PriorBundle`] into an [`OracleQuery`].
#[derive(Debug, Clone)]
pub struct Aggregator {
    text: FusionParams,
    image: FusionParams,
    projection: Linear,
    text_dim: usize,
    image_dim: usize,
    query_dim: usize,
}

impl Aggregator {
    pub fn new(
        text_dim: usize,
        image_dim: usize,
        query_dim: usize,
        mode: FusionMode,
        vb: &ParamPath,
    ) -> Result<Self> {
        Ok(Aggregator {
            text: FusionParams::new(mode, text_dim, &vb.pp("text"))?,
            image: FusionParams::new(mode, image_dim, &vb.pp("image"))?,
            projection: Linear::with_init(
                text_dim + image_dim + 4,
                query_dim,
                Init::UniformTail {
                    bound: 1.0 / ((text_dim + image_dim + 4) as f64).sqrt(),
                    tail: 4,
                    tail_bound: SPATIAL_INIT_BOUND,
                },
                &vb.pp("projection"),
            )?,
            text_dim,
            image_dim,
            query_dim,
        })
    }

    /// Width of the concatenation fed to the projection.
    pub fn input_width(&self) -> usize {
        self.text_dim + self.image_dim + 4
    }

    pub fn query_dim(&self) -> usize {
        self.query_dim
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.text_dim, self.image_dim)
    }

    /// The unprojected concatenation `[T; V; b]`, `(1, d_t + d_v + 4)`.
    /// Disabled priors are zero-filled at their nominal widths.
    pub fn concat_priors(&self, bundle: &PriorBundle, flags: PriorFlags, dtype: DType, device: &Device) -> Result<Tensor> {
        let (text, image) = self.fuse_bundle(bundle, flags, device)?;
        self.concat_parts(&text, &image, bundle, flags, dtype, device)
    }

    /// Fused text and image rows of a bundle, zeros where disabled.
    fn fuse_bundle(&self, bundle: &PriorBundle, flags: PriorFlags, device: &Device) -> Result<(Tensor, Tensor)> {
        if !flags.any() {
            return Err(KadError::Config("oracle query needs at least one enabled prior".into()));
        }
        let text = if flags.semantic {
            self.fuse_part(&bundle.text_embeddings, self.text_dim, &self.text, "text", device)?
        } else {
            Tensor::zeros((1, self.text_dim), DType::F32, device)?
        };
        let image = if flags.visual {
            self.fuse_part(&bundle.image_embeddings, self.image_dim, &self.image, "image", device)?
        } else {
            Tensor::zeros((1, self.image_dim), DType::F32, device)?
        };
        Ok((text, image))
    }

    fn concat_parts(
        &self,
        text: &Tensor,
        image: &Tensor,
        bundle: &PriorBundle,
        flags: PriorFlags,
        dtype: DType,
        device: &Device,
    ) -> Result<Tensor> {
        bundle.gt_box.validate()?;
        let spatial = if flags.spatial {
            let b = bundle.gt_box.to_array().map(|v| v as f32);
            Tensor::from_slice(&b, (1, 4), device)?
        } else {
            Tensor::zeros((1, 4), DType::F32, device)?
        };
        Ok(Tensor::cat(&[text.to_dtype(dtype)?, image.to_dtype(dtype)?, spatial.to_dtype(dtype)?], 1)?)
    }

    fn fuse_part(
        &self,
        rows: &Matrix,
        dim: usize,
        params: &FusionParams,
        what: &str,
        device: &Device,
    ) -> Result<Tensor> {
        if rows.cols() != dim {
            return Err(KadError::Input(format!(
                "{what} embeddings have width {}, aggregator expects {dim}",
                rows.cols()
            )));
        }
        if rows.rows() == 0 {
            return Err(KadError::Config(format!(
                "{what} prior enabled but the bundle has no {what} embeddings"
            )));
        }
        attentive_fuse(&rows.to_tensor(device)?, params)
    }

    /// `build_oracle_query`: fuse, concatenate, project to the query width.
    pub fn build_oracle_query(&self, bundle: &PriorBundle, flags: PriorFlags, dtype: DType, device: &Device) -> Result<OracleQuery> {
        Ok(self.build_oracle_batch(&[bundle], flags, dtype, device)?.remove(0))
    }

    /// One oracle query per bundle. Bundles of the same category share one
    /// fusion pass, so their text and image parts are identical.
    pub fn build_oracle_batch(
        &self,
        bundles: &[&PriorBundle],
        flags: PriorFlags,
        dtype: DType,
        device: &Device,
    ) -> Result<Vec<OracleQuery>> {
        let mut fused: Vec<(&str, (Tensor, Tensor))> = Vec::new();
        let mut rows = Vec::with_capacity(bundles.len());
        for bundle in bundles {
            let parts = match fused.iter().find(|(c, _)| *c == bundle.category) {
                Some((_, parts)) => parts.clone(),
                None => {
                    let parts = self.fuse_bundle(bundle, flags, device)?;
                    fused.push((&bundle.category, parts.clone()));
                    parts
                }
            };
            rows.push(self.concat_parts(&parts.0, &parts.1, bundle, flags, dtype, device)?);
        }
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let projected = self.projection.forward(&Tensor::cat(&rows, 0)?)?;
        (0..bundles.len())
            .map(|i| {
                crate::instrument::record_oracle_build();
                Ok(OracleQuery {
                    vector: projected.narrow(0, i, 1)?,
                    provenance: flags,
                })
            })
            .collect()
    }
}

impl Parameters for Aggregator {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.text.collect_params(&format!("{prefix}.text"), out);
        self.image.collect_params(&format!("{prefix}.image"), out);
        self.projection.collect_params(&format!("{prefix}.projection"), out);
    }
}
