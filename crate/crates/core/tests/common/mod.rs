#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn var(data: Vec<f64>, shape: &[usize]) -> Var {
    Var::from_tensor(&Tensor::from_vec(data, shape, &Device::Cpu).unwrap()).unwrap()
}

pub fn tensor(data: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Center-form boxes well inside the unit square.
pub fn boxes(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .flat_map(|_| {
            let w = rng.random_range(0.1..0.5);
            let h = rng.random_range(0.1..0.5);
            [
                rng.random_range(0.3..0.7),
                rng.random_range(0.3..0.7),
                w,
                h,
            ]
        })
        .collect()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// `max |analytic - numeric| / max(max |analytic|, max |numeric|)`.
    pub rel_error: f64,
    pub max_abs_grad: f64,
    pub entries: usize,
}

/// Compares backprop gradients of a scalar `f` against central finite
/// differences for every entry of every input.
pub fn grad_check(inputs: &[Var], f: impl Fn(&[Tensor]) -> Tensor) -> GradCheck {
    let tensors: Vec<Tensor> = inputs.iter().map(|v| v.as_tensor().clone()).collect();
    let grads = f(&tensors).backward().unwrap();
    let mut worst_diff = 0f64;
    let mut scale = 0f64;
    let mut entries = 0;
    for (i, v) in inputs.iter().enumerate() {
        let base: Vec<f64> = v.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let analytic: Vec<f64> = match grads.get(v.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
            None => vec![0.0; base.len()],
        };
        let shape = v.as_tensor().dims().to_vec();
        for j in 0..base.len() {
            let eval = |delta: f64| {
                let mut x = base.clone();
                x[j] += delta;
                let mut probe = tensors.clone();
                probe[i] = tensor(x, &shape);
                scalar(&f(&probe))
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            worst_diff = worst_diff.max((analytic[j] - numeric).abs());
            scale = scale.max(analytic[j].abs()).max(numeric.abs());
            entries += 1;
        }
    }
    GradCheck {
        rel_error: if scale > 0.0 { worst_diff / scale } else { worst_diff },
        max_abs_grad: scale,
        entries,
    }
}

pub mod fixture {
    use std::path::{Path, PathBuf};

    use kad_core::data::{synth_generate, SynthConfig};
    use kad_core::engine::{LoadedSplit, PriorKind, RunConfig};
    use kad_core::losses::DistillMode;
    use kad_core::priors::{mock_priors, write_prior_cache};
    use tempfile::TempDir;

    /// A rendered synthetic dataset plus a mock prior cache on disk.
    pub struct Fixture {
        pub dir: TempDir,
        pub synth: SynthConfig,
        pub train: LoadedSplit,
        pub val: LoadedSplit,
        pub cache: PathBuf,
    }

    impl Fixture {
        pub fn new(train_size: usize, val_size: usize, seed: u64) -> Self {
            let synth = SynthConfig {
                train_size,
                val_size,
                seed,
                ..SynthConfig::default()
            };
            Self::with_synth(synth)
        }

        pub fn with_synth(synth: SynthConfig) -> Self {
            let dir = tempfile::tempdir().unwrap();
            let data = dir.path().join("data");
            synth_generate(&synth, &data).unwrap();
            let cache = dir.path().join("priors");
            let mock = mock_priors(&synth.categories, synth.seed, 10, 100, 510, 510).unwrap();
            write_prior_cache(&mock, &cache).unwrap();
            let load = |split: &str| {
                let root = data.join(split);
                LoadedSplit::load(&root.join("annotations.json"), &root, synth.image_size, None).unwrap()
            };
            let train = load("train");
            let val = load("val");
            Fixture {
                dir,
                synth,
                train,
                val,
                cache,
            }
        }

        pub fn path(&self) -> &Path {
            self.dir.path()
        }

        /// Run config over this fixture's data, writing under `name`.
        pub fn config(&self, name: &str, priors: &[PriorKind], distill: DistillMode) -> RunConfig {
            let data = self.path().join("data");
            RunConfig {
                priors: priors.to_vec(),
                distill,
                train_annotations: data.join("train/annotations.json"),
                train_images: data.join("train"),
                val_annotations: Some(data.join("val/annotations.json")),
                val_images: Some(data.join("val")),
                prior_cache: Some(self.cache.clone()),
                output: self.path().join("runs").join(name),
                ..RunConfig::default()
            }
        }
    }

    pub const ALL_PRIORS: [PriorKind; 3] = [PriorKind::Semantic, PriorKind::Visual, PriorKind::Spatial];
}
