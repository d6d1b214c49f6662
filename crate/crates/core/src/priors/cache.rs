//! On-disk prior cache: one directory per category holding `text.f32` and
//! `image.f32`, plus a `manifest.json` with dims, counts and SHA-256 sums.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::aggregator::PriorBundle;
use crate::blob::{sha256_hex, write_atomic, Matrix};
use crate::error::{KadError, Result};
use crate::geometry::BoxN;

pub const MANIFEST: &str = "manifest.json";
pub const TEXT_BLOB: &str = "text.f32";
pub const IMAGE_BLOB: &str = "image.f32";
const FORMAT_VERSION: u32 = 1;

/// Text and image embeddings of one category.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryPriors {
    /// `p x d_t`.
    pub text: Matrix,
    /// `q x d_v`; `q` may be zero.
    pub image: Matrix,
    /// Generated descriptions, when known.
    pub descriptions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub file: String,
    pub count: usize,
    pub dim: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub name: String,
    /// Directory relative to the cache root.
    pub dir: String,
    pub text: BlobEntry,
    pub image: BlobEntry,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub descriptions: Vec<String>,
}

/// Where the embeddings came from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    /// `"mock"` or `"http"`.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_seed_base: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_template: Option<String>,
    /// Whatever the image provider reported about its sampler.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub image_settings: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub category: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub text_dim: usize,
    pub image_dim: usize,
    pub categories: Vec<CategoryEntry>,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<Failure>,
}

/// In-memory prior cache keyed by category name.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorCache {
    pub text_dim: usize,
    pub image_dim: usize,
    pub entries: BTreeMap<String, CategoryPriors>,
    pub provenance: Provenance,
    /// Categories whose generation failed and were left out.
    pub failures: Vec<Failure>,
}

impl PriorCache {
    pub fn new(text_dim: usize, image_dim: usize, provenance: Provenance) -> Self {
        PriorCache {
            text_dim,
            image_dim,
            entries: BTreeMap::new(),
            provenance,
            failures: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: &str, priors: CategoryPriors) -> Result<()> {
        if priors.text.cols() != self.text_dim || priors.image.cols() != self.image_dim {
            return Err(KadError::Input(format!(
                "category {name}: embeddings are {}/{} wide, cache holds {}/{}",
                priors.text.cols(),
                priors.image.cols(),
                self.text_dim,
                self.image_dim
            )));
        }
        self.entries.insert(name.to_string(), priors);
        Ok(())
    }

    pub fn categories(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get(&self, category: &str) -> Option<&CategoryPriors> {
        self.entries.get(category)
    }

    /// The bundle for one sample: the category's embeddings plus its box.
    pub fn bundle(&self, category: &str, gt_box: BoxN) -> Result<PriorBundle> {
        crate::instrument::record_cache_read();
        let entry = self
            .get(category)
            .ok_or_else(|| KadError::Config(format!("no priors cached for category {category:?}")))?;
        Ok(PriorBundle {
            text_embeddings: entry.text.clone(),
            image_embeddings: entry.image.clone(),
            gt_box,
            category: category.to_string(),
        })
    }
}

/// Directory name for a category: lowercase ASCII alphanumerics, others as `_`,
/// suffixed with a short hash so distinct names never collide.
fn category_dir(name: &str) -> String {
    let slug: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect();
    format!("{slug}-{}", &sha256_hex(name.as_bytes())[..8])
}

/// `write_prior_cache`: writes blobs then the manifest, each atomically.
pub fn write_prior_cache(cache: &PriorCache, root: &Path) -> Result<PathBuf> {
    fs::create_dir_all(root)?;
    let mut categories = Vec::with_capacity(cache.entries.len());
    for (name, priors) in &cache.entries {
        let dir = category_dir(name);
        fs::create_dir_all(root.join(&dir))?;
        let blob = |m: &Matrix, file: &str| -> Result<BlobEntry> {
            let sha256 = m.write(&root.join(&dir).join(file))?;
            Ok(BlobEntry {
                file: file.to_string(),
                count: m.rows(),
                dim: m.cols(),
                sha256,
            })
        };
        categories.push(CategoryEntry {
            name: name.clone(),
            dir: dir.clone(),
            text: blob(&priors.text, TEXT_BLOB)?,
            image: blob(&priors.image, IMAGE_BLOB)?,
            descriptions: priors.descriptions.clone(),
        });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        text_dim: cache.text_dim,
        image_dim: cache.image_dim,
        categories,
        provenance: cache.provenance.clone(),
        failures: cache.failures.clone(),
    };
    let path = root.join(MANIFEST);
    write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(path)
}

fn read_blob(root: &Path, entry: &CategoryEntry, blob: &BlobEntry, expected_dim: usize) -> Result<Matrix> {
    let path = root.join(&entry.dir).join(&blob.file);
    if !path.is_file() {
        return Err(KadError::incomplete(&path, "blob listed in manifest is missing"));
    }
    let bytes = fs::read(&path)?;
    if sha256_hex(&bytes) != blob.sha256 {
        return Err(KadError::corruption(&path, "checksum mismatch"));
    }
    let m = Matrix::from_bytes(&bytes, &path)?;
    if m.rows() != blob.count || m.cols() != blob.dim || m.cols() != expected_dim {
        return Err(KadError::incomplete(
            &path,
            format!(
                "blob is {}x{}, manifest says {}x{} (cache dim {expected_dim})",
                m.rows(),
                m.cols(),
                blob.count,
                blob.dim
            ),
        ));
    }
    Ok(m)
}

/// `read_prior_cache`: loads and verifies every blob listed in the manifest.
pub fn read_prior_cache(root: &Path) -> Result<PriorCache> {
    crate::instrument::record_cache_read();
    let path = root.join(MANIFEST);
    if !path.is_file() {
        return Err(KadError::incomplete(&path, "manifest not found"));
    }
    let manifest: Manifest =
        serde_json::from_slice(&fs::read(&path)?).map_err(|e| KadError::corruption(&path, e.to_string()))?;
    if manifest.version != FORMAT_VERSION {
        return Err(KadError::corruption(&path, format!("unsupported version {}", manifest.version)));
    }
    let mut cache = PriorCache::new(manifest.text_dim, manifest.image_dim, manifest.provenance.clone());
    cache.failures = manifest.failures.clone();
    for entry in &manifest.categories {
        let text = read_blob(root, entry, &entry.text, manifest.text_dim)?;
        let image = read_blob(root, entry, &entry.image, manifest.image_dim)?;
        cache.entries.insert(
            entry.name.clone(),
            CategoryPriors {
                text,
                image,
                descriptions: entry.descriptions.clone(),
            },
        );
    }
    Ok(cache)
}

/// Per-blob verification outcome for `priors verify`.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub categories: usize,
    pub blobs: usize,
    pub problems: Vec<String>,
}

/// Checks every blob and reports all problems instead of stopping at the first.
pub fn verify_prior_cache(root: &Path) -> Result<VerifyReport> {
    let path = root.join(MANIFEST);
    if !path.is_file() {
        return Err(KadError::incomplete(&path, "manifest not found"));
    }
    let manifest: Manifest =
        serde_json::from_slice(&fs::read(&path)?).map_err(|e| KadError::corruption(&path, e.to_string()))?;
    let mut report = VerifyReport {
        categories: manifest.categories.len(),
        blobs: 0,
        problems: Vec::new(),
    };
    for entry in &manifest.categories {
        for (blob, dim) in [(&entry.text, manifest.text_dim), (&entry.image, manifest.image_dim)] {
            report.blobs += 1;
            if let Err(e) = read_blob(root, entry, blob, dim) {
                report.problems.push(e.to_string());
            }
        }
    }
    Ok(report)
}

/// `mock_priors`: seeded stand-in embeddings. Each category gets its own mean
/// vector, and rows are that mean plus smaller isotropic noise.
pub fn mock_priors(categories: &[String], seed: u64, p: usize, q: usize, d_t: usize, d_v: usize) -> Result<PriorCache> {
    if d_t == 0 || d_v == 0 {
        return Err(KadError::Config("prior dims must be >= 1".into()));
    }
    let provenance = Provenance {
        kind: "mock".into(),
        seed: Some(seed),
        ..Provenance::default()
    };
    let mut cache = PriorCache::new(d_t, d_v, provenance);
    let unit = Normal::new(0.0f32, 1.0).expect("valid normal");
    for name in categories {
        // keyed by name, not position, so subsets of categories agree
        let key = u64::from_le_bytes(sha256_hex(name.as_bytes()).as_bytes()[..8].try_into().unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ key);
        let mut draw = |rows: usize, dim: usize| -> Result<Matrix> {
            let mean: Vec<f32> = (0..dim).map(|_| unit.sample(&mut rng)).collect();
            let data = (0..rows)
                .flat_map(|_| mean.iter().map(|m| m + 0.3 * unit.sample(&mut rng)).collect::<Vec<_>>())
                .collect();
            Matrix::new(rows, dim, data)
        };
        let text = draw(p, d_t)?;
        let image = draw(q, d_v)?;
        cache.insert(
            name,
            CategoryPriors {
                text,
                image,
                descriptions: Vec::new(),
            },
        )?;
    }
    Ok(cache)
}
