//! Synthetic active-object scenes.
//!
//! Each scene holds several textured shapes. One instance of the target
//! category is active: a hand glyph touches it and part of its surface is
//! tinted. At least one other instance of the same category is always present,
//! so category alone never identifies the active object.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::coco::{box_to_coco_bbox, CocoAnnotation, CocoCategory, CocoFile, CocoImage};
use crate::blob::write_atomic;
use crate::error::{KadError, Result};
use crate::geometry::{iou, BoxN};

pub const DEFAULT_CATEGORIES: [&str; 6] = ["carrot", "cup", "knife", "bowl", "bottle", "sponge"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub categories: Vec<String>,
    /// Total objects per scene, inclusive range.
    pub instances: (usize, usize),
    /// Same-category non-active instances per scene, inclusive range, min >= 1.
    pub distractors: (usize, usize),
    pub hand_marker: bool,
    /// Fractional darkening of the tinted part of the active object.
    pub perturbation: f64,
    /// Object side range in pixels.
    pub object_size: (usize, usize),
    pub train_size: usize,
    pub val_size: usize,
    pub seed: u64,
    pub max_retries: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 96,
            categories: DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect(),
            instances: (3, 5),
            distractors: (1, 2),
            hand_marker: true,
            perturbation: 0.25,
            object_size: (14, 26),
            train_size: 2000,
            val_size: 400,
            seed: 0,
            max_retries: 200,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(KadError::Config(format!("synth: {m}")));
        if self.distractors.0 < 1 {
            return fail("at least one same-category distractor is required");
        }
        if self.distractors.0 > self.distractors.1 || self.instances.0 > self.instances.1 {
            return fail("empty range");
        }
        if self.instances.0 < self.distractors.1 + 1 {
            return fail("instance range must leave room for the active object and its distractors");
        }
        if self.categories.is_empty() {
            return fail("no categories");
        }
        if self.object_size.0 < 4 || self.object_size.0 > self.object_size.1 || self.object_size.1 * 2 > self.image_size {
            return fail("object size range does not fit the image");
        }
        if !(0.0..=1.0).contains(&self.perturbation) {
            return fail("perturbation must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Triangle,
    Disk,
    Bar,
    Ellipse,
    Tall,
    Square,
}

#[derive(Debug, Clone, Copy)]
struct Appearance {
    shape: Shape,
    color: [f32; 3],
    /// Aspect `w / h`.
    aspect: f64,
    stripe_period: f32,
}

fn appearance(category: usize) -> Appearance {
    const TABLE: [Appearance; 6] = [
        Appearance { shape: Shape::Triangle, color: [0.93, 0.52, 0.13], aspect: 0.8, stripe_period: 4.0 },
        Appearance { shape: Shape::Disk, color: [0.20, 0.45, 0.85], aspect: 1.0, stripe_period: 6.0 },
        Appearance { shape: Shape::Bar, color: [0.55, 0.57, 0.60], aspect: 2.4, stripe_period: 3.0 },
        Appearance { shape: Shape::Ellipse, color: [0.55, 0.35, 0.20], aspect: 1.6, stripe_period: 5.0 },
        Appearance { shape: Shape::Tall, color: [0.15, 0.62, 0.30], aspect: 0.45, stripe_period: 4.5 },
        Appearance { shape: Shape::Square, color: [0.92, 0.85, 0.20], aspect: 1.0, stripe_period: 3.5 },
    ];
    let mut a = TABLE[category % TABLE.len()];
    if category >= TABLE.len() {
        // extra categories reuse shapes with a rotated palette
        let k = (category / TABLE.len()) as f32;
        a.color = [a.color[1], a.color[2], (a.color[0] + 0.3 * k) % 1.0];
    }
    a
}

fn inside(shape: Shape, u: f64, v: f64) -> bool {
    match shape {
        Shape::Triangle => (-1.0..=1.0).contains(&v) && u.abs() <= (v + 1.0) / 2.0,
        Shape::Disk | Shape::Ellipse => u * u + v * v <= 1.0,
        Shape::Bar | Shape::Tall | Shape::Square => u.abs() <= 1.0 && v.abs() <= 1.0,
    }
}

/// Placed object in pixel corners `[x1, y1, x2, y2)`.
#[derive(Debug, Clone, Copy)]
struct Placed {
    category: usize,
    x1: usize,
    y1: usize,
    x2: usize,
    y2: usize,
}

impl Placed {
    fn to_box(self, size: usize) -> Result<BoxN> {
        let s = size as f64;
        super::coco::pixel_corners_to_box(self.x1 as f64, self.y1 as f64, self.x2 as f64, self.y2 as f64, s, s)
    }

    fn overlaps(&self, other: &Placed, margin: usize) -> bool {
        self.x1 < other.x2 + margin && other.x1 < self.x2 + margin && self.y1 < other.y2 + margin && other.y1 < self.y2 + margin
    }
}

/// One rendered scene before it is written out.
#[derive(Debug, Clone)]
pub struct Scene {
    pub rgb: Vec<u8>,
    pub category: usize,
    pub active: BoxN,
    /// `(category, box)` of every non-active instance.
    pub others: Vec<(usize, BoxN)>,
}

struct Canvas {
    size: usize,
    px: Vec<[f32; 3]>,
}

impl Canvas {
    fn background(size: usize, rng: &mut ChaCha8Rng) -> Self {
        let base: f32 = rng.random_range(0.62..0.82);
        let tint = [rng.random_range(-0.04..0.04f32), rng.random_range(-0.04..0.04f32), rng.random_range(-0.04..0.04f32)];
        let px = (0..size * size)
            .map(|_| {
                let n: f32 = rng.random_range(-0.035..0.035);
                [base + tint[0] + n, base + tint[1] + n, base + tint[2] + n]
            })
            .collect();
        Canvas { size, px }
    }

    fn draw_object(&mut self, obj: &Placed, look: &Appearance, shade: f32, tint: Option<(f64, f64, f32)>) {
        let cx = (obj.x1 + obj.x2) as f64 / 2.0;
        let cy = (obj.y1 + obj.y2) as f64 / 2.0;
        let hw = (obj.x2 - obj.x1) as f64 / 2.0;
        let hh = (obj.y2 - obj.y1) as f64 / 2.0;
        for y in obj.y1..obj.y2 {
            for x in obj.x1..obj.x2 {
                let u = (x as f64 + 0.5 - cx) / hw;
                let v = (y as f64 + 0.5 - cy) / hh;
                if !inside(look.shape, u, v) {
                    continue;
                }
                let stripe = if ((x + y) as f32 / look.stripe_period).floor() as i64 % 2 == 0 { 1.0 } else { 0.86 };
                let mut f = stripe * shade;
                if let Some((nu, nv, amount)) = tint {
                    // tinted half-plane through the object center
                    if u * nu + v * nv > 0.0 {
                        f *= 1.0 - amount;
                    }
                }
                self.px[y * self.size + x] = look.color.map(|c| c * f);
            }
        }
    }

    fn draw_hand(&mut self, cx: f64, cy: f64, r: f64) {
        let skin = [0.96, 0.76, 0.62];
        let size = self.size as f64;
        let x0 = (cx - r - 2.0).floor().max(0.0) as usize;
        let y0 = (cy - r - 2.0).floor().max(0.0) as usize;
        let x1 = ((cx + r + 2.0).ceil().min(size)) as usize;
        let y1 = ((cy + r + 2.0).ceil().min(size)) as usize;
        for y in y0..y1 {
            for x in x0..x1 {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                let d2 = dx * dx + dy * dy;
                if d2 <= r * r {
                    self.px[y * self.size + x] = skin;
                } else if d2 <= (r + 1.2) * (r + 1.2) {
                    self.px[y * self.size + x] = [0.45, 0.30, 0.25];
                }
            }
        }
    }

    fn into_rgb(self) -> Vec<u8> {
        self.px
            .into_iter()
            .flat_map(|p| p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect()
    }
}

fn sample_object(category: usize, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let look = appearance(category);
    let side = rng.random_range(cfg.object_size.0..=cfg.object_size.1) as f64;
    let (w, h) = if look.aspect >= 1.0 {
        (side, side / look.aspect)
    } else {
        (side * look.aspect, side)
    };
    (w.round().max(4.0) as usize, h.round().max(4.0) as usize)
}

const LAYOUT_ATTEMPTS: usize = 20;

/// Renders scene `index` of a split. Pure function of `(cfg, split_seed, index)`.
pub fn render_scene(cfg: &SynthConfig, split_seed: u64, index: usize) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index as u64);
    let size = cfg.image_size;
    let ncat = cfg.categories.len();
    let target = rng.random_range(0..ncat);
    let same = 1 + rng.random_range(cfg.distractors.0..=cfg.distractors.1);
    let total = rng.random_range(cfg.instances.0..=cfg.instances.1).max(same);
    let mut cats = vec![target; same];
    while cats.len() < total {
        if ncat == 1 {
            cats.push(target);
            continue;
        }
        let c = rng.random_range(0..ncat);
        if c != target {
            cats.push(c);
        }
    }

    let margin = 3;
    // a crowded layout is redrawn from scratch rather than dropped
    let mut placed: Vec<Placed> = Vec::with_capacity(total);
    for _ in 0..LAYOUT_ATTEMPTS {
        placed.clear();
        for &c in &cats {
            let found = (0..cfg.max_retries).find_map(|_| {
                let (w, h) = sample_object(c, cfg, &mut rng);
                let x1 = rng.random_range(2..size - w - 2);
                let y1 = rng.random_range(2..size - h - 2);
                let cand = Placed { category: c, x1, y1, x2: x1 + w, y2: y1 + h };
                placed.iter().all(|p| !p.overlaps(&cand, margin + 6)).then_some(cand)
            });
            match found {
                Some(cand) => placed.push(cand),
                None => break,
            }
        }
        if placed.len() == total {
            break;
        }
    }
    if placed.len() != total {
        return Err(KadError::Generation(format!(
            "scene {index}: could not place {total} objects in {LAYOUT_ATTEMPTS} layouts of {} tries each",
            cfg.max_retries
        )));
    }

    let mut canvas = Canvas::background(size, &mut rng);
    // the first `same` entries are the target category; the first one is active
    let active = placed[0];
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    for (i, obj) in placed.iter().enumerate() {
        let shade: f32 = rng.random_range(0.9..1.05);
        let tint = (i == 0).then(|| (angle.cos(), angle.sin(), cfg.perturbation as f32));
        canvas.draw_object(obj, &appearance(obj.category), shade, tint);
    }
    if cfg.hand_marker {
        // glyph centred on a random point of the active object's border
        let w = (active.x2 - active.x1) as f64;
        let h = (active.y2 - active.y1) as f64;
        let t: f64 = rng.random_range(0.2..0.8);
        let (hx, hy) = match rng.random_range(0..4) {
            0 => (active.x1 as f64 + t * w, active.y1 as f64),
            1 => (active.x1 as f64 + t * w, active.y2 as f64),
            2 => (active.x1 as f64, active.y1 as f64 + t * h),
            _ => (active.x2 as f64, active.y1 as f64 + t * h),
        };
        let r = (w.min(h) * 0.22).clamp(2.5, 4.5);
        canvas.draw_hand(hx, hy, r);
    }

    let active_box = active.to_box(size)?;
    let others = placed[1..]
        .iter()
        .map(|p| Ok((p.category, p.to_box(size)?)))
        .collect::<Result<Vec<_>>>()?;
    debug_assert!(others.iter().all(|(_, b)| iou(&b.to_corners(), &active_box.to_corners()) < 1.0));
    Ok(Scene {
        rgb: canvas.into_rgb(),
        category: target,
        active: active_box,
        others,
    })
}

fn encode_png(rgb: &[u8], size: usize) -> Result<Vec<u8>> {
    let img = image::RgbImage::from_raw(size as u32, size as u32, rgb.to_vec())
        .ok_or_else(|| KadError::Generation("pixel buffer size mismatch".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Summary of a generated split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSummary {
    pub name: String,
    pub annotation_path: PathBuf,
    pub images_root: PathBuf,
    pub scenes: usize,
    pub skipped: Vec<usize>,
}

fn generate_split(cfg: &SynthConfig, out: &Path, name: &str, count: usize, split_seed: u64) -> Result<SplitSummary> {
    let root = out.join(name);
    let images_dir = root.join("images");
    fs::create_dir_all(&images_dir)?;
    let size = cfg.image_size;
    let rendered: Vec<(usize, Result<Scene>)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let scene = render_scene(cfg, split_seed, i);
            if let Ok(s) = &scene {
                let bytes = encode_png(&s.rgb, size)?;
                write_atomic(&images_dir.join(format!("{i:06}.png")), &bytes)?;
            }
            Ok::<_, KadError>((i, scene))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut coco = CocoFile {
        images: Vec::new(),
        annotations: Vec::new(),
        categories: cfg
            .categories
            .iter()
            .enumerate()
            .map(|(i, n)| CocoCategory { id: i as u64 + 1, name: n.clone() })
            .collect(),
    };
    let mut skipped = Vec::new();
    let mut ann_id = 1u64;
    let s = size as f64;
    for (i, scene) in rendered {
        let scene = match scene {
            Ok(scene) => scene,
            Err(e) => {
                log::warn!("skipping scene {i}: {e}");
                skipped.push(i);
                continue;
            }
        };
        let image_id = i as u64 + 1;
        coco.images.push(CocoImage {
            id: image_id,
            file_name: format!("images/{i:06}.png"),
            width: size as u32,
            height: size as u32,
        });
        let all = std::iter::once((scene.category, scene.active, 1u8)).chain(scene.others.iter().map(|&(c, b)| (c, b, 0u8)));
        for (cat, b, active) in all {
            let bbox = box_to_coco_bbox(&b, s, s);
            coco.annotations.push(CocoAnnotation {
                id: ann_id,
                image_id,
                category_id: cat as u64 + 1,
                bbox,
                area: bbox[2] * bbox[3],
                iscrowd: 0,
                active: Some(active),
            });
            ann_id += 1;
        }
    }
    let annotation_path = root.join("annotations.json");
    write_atomic(&annotation_path, serde_json::to_string_pretty(&coco)?.as_bytes())?;
    Ok(SplitSummary {
        name: name.to_string(),
        annotation_path,
        images_root: root,
        scenes: coco.images.len(),
        skipped,
    })
}

/// `synth_generate`: writes `train/` and `val/` splits under `out`.
pub fn synth_generate(cfg: &SynthConfig, out: &Path) -> Result<Vec<SplitSummary>> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    write_atomic(&out.join("synth_config.json"), serde_json::to_string_pretty(cfg)?.as_bytes())?;
    Ok(vec![
        generate_split(cfg, out, "train", cfg.train_size, cfg.seed)?,
        generate_split(cfg, out, "val", cfg.val_size, cfg.seed ^ 0x5EED_0F_7A11)?,
    ])
}
