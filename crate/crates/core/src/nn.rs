//! Small differentiable building blocks on top of candle tensors.
//!
//! Layers keep their parameter tensors visible through [`Parameters`] so the
//! model can enumerate them by path, which the parameter-sharing checks rely on.

use candle_core::{DType, Device, Module, Tensor, D};

use crate::error::Result;
use crate::params::{Init, ParamPath};

pub type CResult<T> = candle_core::Result<T>;

/// Anything that owns named parameter tensors.
pub trait Parameters {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>);

    fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.collect_params(prefix, &mut out);
        out
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, vb: &ParamPath) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self::with_init(in_dim, out_dim, Init::Uniform(bound), vb)
    }

    /// Like [`Linear::new`] with a custom weight initialization.
    pub fn with_init(in_dim: usize, out_dim: usize, weight_init: Init, vb: &ParamPath) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = vb.get((out_dim, in_dim), "weight", weight_init)?;
        let bias = vb.get(out_dim, "bias", Init::Uniform(bound))?;
        Ok(Linear { weight, bias })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> CResult<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().expect("non-scalar input");
        let rows = x.elem_count() / in_dim;
        let y = x.reshape((rows, in_dim))?.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(0)?;
        y.reshape(out_dims)
    }
}

impl Parameters for Linear {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        out.push((join(prefix, "bias"), self.bias.clone()));
    }
}

/// Layer normalization over the last dimension, written with primitive ops so
/// that it is differentiable.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, vb: &ParamPath) -> Result<Self> {
        Ok(LayerNorm {
            gamma: vb.get(dim, "gamma", Init::Const(1.0))?,
            beta: vb.get(dim, "beta", Init::Const(0.0))?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> CResult<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)
    }
}

impl Parameters for LayerNorm {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((join(prefix, "gamma"), self.gamma.clone()));
        out.push((join(prefix, "beta"), self.beta.clone()));
    }
}

/// Softmax over the last dimension built from differentiable primitives.
pub fn softmax_last(x: &Tensor) -> CResult<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

/// Multi-head scaled dot-product attention.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(dim: usize, heads: usize, vb: &ParamPath) -> Result<Self> {
        Ok(MultiHeadAttention {
            q: Linear::new(dim, dim, &vb.pp("q"))?,
            k: Linear::new(dim, dim, &vb.pp("k"))?,
            v: Linear::new(dim, dim, &vb.pp("v"))?,
            o: Linear::new(dim, dim, &vb.pp("o"))?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> CResult<Tensor> {
        let (b, n, d) = x.dims3()?;
        x.reshape((b, n, self.heads, d / self.heads))?.transpose(1, 2)?.contiguous()
    }

    /// Returns the output `(B, Nq, d)` and the head-averaged attention
    /// `(B, Nq, Nk)`.
    pub fn forward(&self, query: &Tensor, key: &Tensor, value: &Tensor) -> CResult<(Tensor, Tensor)> {
        let (b, nq, d) = query.dims3()?;
        let head_dim = d / self.heads;
        let q = self.split(&self.q.forward(query)?)?;
        let k = self.split(&self.k.forward(key)?)?;
        let v = self.split(&self.v.forward(value)?)?;
        let logits = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (head_dim as f64).sqrt())?;
        let attn = softmax_last(&logits)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, nq, d))?;
        let averaged = attn.mean(1)?;
        Ok((self.o.forward(&out)?, averaged))
    }
}

impl Parameters for MultiHeadAttention {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.q.collect_params(&join(prefix, "q"), out);
        self.k.collect_params(&join(prefix, "k"), out);
        self.v.collect_params(&join(prefix, "v"), out);
        self.o.collect_params(&join(prefix, "o"), out);
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(dim: usize, hidden: usize, vb: &ParamPath) -> Result<Self> {
        Ok(FeedForward {
            up: Linear::new(dim, hidden, &vb.pp("up"))?,
            down: Linear::new(hidden, dim, &vb.pp("down"))?,
        })
    }
}

impl Module for FeedForward {
    fn forward(&self, x: &Tensor) -> CResult<Tensor> {
        self.down.forward(&self.up.forward(x)?.relu()?)
    }
}

impl Parameters for FeedForward {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.up.collect_params(&join(prefix, "up"), out);
        self.down.collect_params(&join(prefix, "down"), out);
    }
}

/// Fixed 2-D sinusoidal positional encoding, `(H*W, d)`, row-major over the
/// grid. The first half of the channels encodes `y`, the second half `x`.
pub fn sine_position_encoding(h: usize, w: usize, d: usize, dtype: DType, device: &Device) -> CResult<Tensor> {
    let half = d / 2;
    let pairs = half / 2;
    let mut data = vec![0f64; h * w * d];
    let scale = 2.0 * std::f64::consts::PI;
    for y in 0..h {
        for x in 0..w {
            let row = &mut data[(y * w + x) * d..(y * w + x + 1) * d];
            let ny = (y as f64 + 0.5) / h as f64 * scale;
            let nx = (x as f64 + 0.5) / w as f64 * scale;
            for i in 0..pairs {
                let freq = 10000f64.powf(2.0 * i as f64 / half as f64);
                row[2 * i] = (ny / freq).sin();
                row[2 * i + 1] = (ny / freq).cos();
                row[half + 2 * i] = (nx / freq).sin();
                row[half + 2 * i + 1] = (nx / freq).cos();
            }
        }
    }
    Tensor::from_vec(data, (h * w, d), device)?.to_dtype(dtype)
}
