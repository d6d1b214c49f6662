//! Prior generation: descriptions, then images per description, then
//! embeddings of both, one category at a time with bounded fan-out.

use serde_json::Value;

use super::cache::{CategoryPriors, Failure, PriorCache, Provenance};
use super::provider::{
    EmbedInput, Embedder, HttpEmbedder, HttpImageGenerator, HttpTextGenerator, ImageGenerator, ProviderConfig,
    TextGenerator,
};
use crate::blob::Matrix;
use crate::error::{KadError, Result};

pub const PROMPT_TEMPLATE: &str = "describe {p} interaction descriptions of {object} undergoing state change (including tools)";

pub fn interaction_prompt(object: &str, p: usize) -> String {
    PROMPT_TEMPLATE.replace("{p}", &p.to_string()).replace("{object}", object)
}

pub struct Providers {
    pub text: Box<dyn TextGenerator>,
    pub image: Box<dyn ImageGenerator>,
    pub embedder: Box<dyn Embedder>,
}

impl Providers {
    /// HTTP adapters for all three roles. Fails if any credential is unset.
    pub fn from_config(cfg: &ProviderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Providers {
            text: Box::new(HttpTextGenerator::new(&cfg.text, cfg.temperature)?),
            image: Box::new(HttpImageGenerator::new(&cfg.image)?),
            embedder: Box::new(HttpEmbedder::new(&cfg.embedding)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    /// Descriptions per category.
    pub p: usize,
    pub images_per_description: usize,
    pub image_seed: u64,
    pub parallelism: usize,
}

struct Generated {
    priors: CategoryPriors,
    image_settings: serde_json::Map<String, Value>,
}

fn to_matrix(rows: Vec<Vec<f32>>, what: &str) -> Result<Matrix> {
    let dim = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != dim) {
        return Err(KadError::Provider(format!("{what} embeddings have inconsistent widths")));
    }
    let n = rows.len();
    Matrix::new(n, dim, rows.into_iter().flatten().collect())
}

fn generate_one(category: &str, providers: &Providers, opts: &GenerateOptions) -> Result<Generated> {
    let prompt = interaction_prompt(category, opts.p);
    let mut descriptions = providers.text.describe(&prompt, opts.p)?;
    if descriptions.len() < opts.p {
        return Err(KadError::Provider(format!(
            "asked for {} descriptions, got {}",
            opts.p,
            descriptions.len()
        )));
    }
    descriptions.truncate(opts.p);

    let mut images = Vec::with_capacity(opts.p * opts.images_per_description);
    let mut image_settings = serde_json::Map::new();
    for (i, d) in descriptions.iter().enumerate() {
        for j in 0..opts.images_per_description {
            let seed = opts.image_seed + (i * 1000 + j) as u64;
            let img = providers.image.generate(d, seed)?;
            if image_settings.is_empty() {
                image_settings = img.settings;
            }
            images.push(img.bytes);
        }
    }

    let text_inputs: Vec<EmbedInput> = descriptions.iter().map(|d| EmbedInput::Text(d)).collect();
    let text = to_matrix(providers.embedder.embed(&text_inputs)?, "text")?;
    let image_inputs: Vec<EmbedInput> = images.iter().map(|b| EmbedInput::Image(b)).collect();
    let image = if image_inputs.is_empty() {
        // text-only bundle; image rows live in the same embedding space
        Matrix::zeros(0, text.cols())
    } else {
        to_matrix(providers.embedder.embed(&image_inputs)?, "image")?
    };
    if !text.is_finite() || !image.is_finite() {
        return Err(KadError::Provider("non-finite embedding values".into()));
    }
    Ok(Generated {
        priors: CategoryPriors {
            text,
            image,
            descriptions,
        },
        image_settings,
    })
}

/// `generate_priors`: builds a cache for `categories`. A category whose
/// providers fail after retries is recorded in `failures` and left out.
pub fn generate_priors(categories: &[String], providers: &Providers, opts: &GenerateOptions) -> Result<PriorCache> {
    if opts.p == 0 {
        return Err(KadError::Config("p must be >= 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.parallelism.max(1))
        .build()
        .map_err(|e| KadError::Config(e.to_string()))?;
    let results: Vec<(String, Result<Generated>)> = pool.install(|| {
        use rayon::prelude::*;
        categories
            .par_iter()
            .map(|c| (c.clone(), generate_one(c, providers, opts)))
            .collect()
    });

    let mut provenance = Provenance {
        kind: "http".into(),
        text_model: Some(providers.text.identity()),
        image_model: Some(providers.image.identity()),
        embedding_model: Some(providers.embedder.identity()),
        temperature: providers.text.temperature(),
        image_seed_base: Some(opts.image_seed),
        prompt_template: Some(PROMPT_TEMPLATE.to_string()),
        ..Provenance::default()
    };
    let mut dims: Option<(usize, usize)> = None;
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (name, result) in results {
        let generated = result.and_then(|g| {
            let d = (g.priors.text.cols(), g.priors.image.cols());
            match dims {
                Some(expected) if expected != d => Err(KadError::Provider(format!(
                    "embedding widths {d:?} differ from earlier categories {expected:?}"
                ))),
                _ => {
                    dims = Some(d);
                    Ok(g)
                }
            }
        });
        match generated {
            Ok(g) => {
                if provenance.image_settings.is_empty() {
                    provenance.image_settings = g.image_settings.into_iter().collect();
                }
                ok.push((name, g.priors));
            }
            Err(e) => {
                log::warn!("priors for {name:?} omitted: {e}");
                failures.push(Failure {
                    category: name,
                    error: e.to_string(),
                });
            }
        }
    }
    let (d_t, d_v) = dims.unwrap_or((0, 0));
    let mut cache = PriorCache::new(d_t, d_v, provenance);
    for (name, priors) in ok {
        cache.insert(&name, priors)?;
    }
    cache.failures = failures;
    Ok(cache)
}
