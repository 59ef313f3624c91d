//! Synthetic labeled-shapes dataset, padding/cropping and batching.
//!
//! Every image is a textured low-saturation background with a handful of
//! saturated shapes. Shape class `k` (2..=N) fixes both the geometry
//! (`(k - 2) % 3` selects rectangle, ellipse or triangle) and the base hue,
//! so the label map is recoverable from appearance.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::image::{ImagePlane, LabelMap};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_samples: usize,
    pub image_size: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub min_shapes: usize,
    pub max_shapes: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_samples: 64,
            image_size: 64,
            num_classes: 4,
            seed: 0,
            min_shapes: 1,
            max_shapes: 4,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2 (background plus one shape class), got {}",
                self.num_classes
            )));
        }
        if self.num_classes > 255 {
            return Err(Error::Config("num_classes must fit in an 8-bit label file".into()));
        }
        if self.image_size == 0 || self.image_size % 8 != 0 {
            return Err(Error::Config(format!(
                "image_size must be a positive multiple of 8, got {}",
                self.image_size
            )));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::Config(format!(
                "shape range {}..={} is empty",
                self.min_shapes, self.max_shapes
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub image: ImagePlane,
    pub labels: LabelMap,
}

/// Seed of sample `index`: the dataset seed xor a scrambled index, so each
/// sample is generated independently of every other.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    seed ^ splitmix64(index)
}

pub(crate) fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<LabeledImage>> {
    spec.validate()?;
    Ok((0..spec.num_samples)
        .into_par_iter()
        .map(|i| generate_sample(spec, i))
        .collect())
}

#[derive(Clone, Copy, Debug)]
enum Geometry {
    Rectangle,
    Ellipse,
    Triangle,
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    class: u16,
    geometry: Geometry,
    // Bounding box, inclusive-exclusive.
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    color: [f64; 3],
}

impl Shape {
    fn overlaps(&self, other: &Shape, margin: f64) -> bool {
        self.x0 < other.x1 + margin
            && other.x0 < self.x1 + margin
            && self.y0 < other.y1 + margin
            && other.y0 < self.y1 + margin
    }

    fn contains(&self, px: f64, py: f64) -> bool {
        if px < self.x0 || px >= self.x1 || py < self.y0 || py >= self.y1 {
            return false;
        }
        match self.geometry {
            Geometry::Rectangle => true,
            Geometry::Ellipse => {
                let cx = 0.5 * (self.x0 + self.x1);
                let cy = 0.5 * (self.y0 + self.y1);
                let rx = 0.5 * (self.x1 - self.x0);
                let ry = 0.5 * (self.y1 - self.y0);
                ((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2) <= 1.0
            }
            Geometry::Triangle => {
                // Apex at top centre, base along the bottom edge.
                let t = (py - self.y0) / (self.y1 - self.y0);
                let cx = 0.5 * (self.x0 + self.x1);
                let half = 0.5 * (self.x1 - self.x0) * t;
                (px - cx).abs() <= half
            }
        }
    }
}

/// Base colour of a shape class: evenly spaced saturated hues.
fn class_color(class: u16, num_classes: usize) -> [f64; 3] {
    let shape_classes = (num_classes - 1) as f64;
    let hue = f64::from(class - 2) / shape_classes;
    hsv_to_rgb(hue, 0.85, 0.9)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor() as u32;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn quantize8(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn generate_sample(spec: &DatasetSpec, index: usize) -> LabeledImage {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, index as u64));
    let size = spec.image_size;
    let sf = size as f64;

    // Background: muted base colour, oriented stripes, fine grain.
    let gray = rng.random_range(0.25..0.6);
    let tint: [f64; 3] = std::array::from_fn(|_| gray + rng.random_range(-0.05..0.05));
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let freq = rng.random_range(2.0..6.0) * std::f64::consts::TAU / sf;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos() * freq, angle.sin() * freq);

    let count = rng.random_range(spec.min_shapes..=spec.max_shapes);
    let mut shapes: Vec<Shape> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.random_range(2..=spec.num_classes) as u16;
        let geometry = match (class - 2) % 3 {
            0 => Geometry::Rectangle,
            1 => Geometry::Ellipse,
            _ => Geometry::Triangle,
        };
        let base = class_color(class, spec.num_classes);
        let color = base.map(|c| (c + rng.random_range(-0.06..0.06)).clamp(0.0, 1.0));
        let mut candidate = None;
        // Rejection-sample a non-overlapping box; give up after a few tries
        // and accept overlap (later shapes then paint over earlier ones).
        for attempt in 0..40 {
            let w = rng.random_range(sf / 6.0..sf / 2.5);
            let h = rng.random_range(sf / 6.0..sf / 2.5);
            let x0 = rng.random_range(0.0..sf - w);
            let y0 = rng.random_range(0.0..sf - h);
            let shape = Shape {
                class,
                geometry,
                x0,
                y0,
                x1: x0 + w,
                y1: y0 + h,
                color,
            };
            let free = shapes.iter().all(|s| !s.overlaps(&shape, 1.0));
            if free || attempt == 39 {
                candidate = Some(shape);
                break;
            }
        }
        shapes.extend(candidate);
    }

    let mut labels = LabelMap::filled(size, size, 1);
    let mut image = ImagePlane::filled(size, size, 0.0);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let stripe = 0.08 * (dx * px + dy * py + phase).sin();
            let mut rgb = tint.map(|t| t + stripe);
            for s in &shapes {
                if s.contains(px, py) {
                    labels.set(y, x, s.class);
                    // Soft vertical shading inside the shape.
                    let shade = 0.08 * ((py - s.y0) / (s.y1 - s.y0) - 0.5);
                    rgb = s.color.map(|c| c - shade);
                }
            }
            for (c, v) in rgb.iter().enumerate() {
                let grain = rng.random_range(-0.025..0.025);
                image.set(c, y, x, quantize8(v + grain));
            }
        }
    }

    LabeledImage {
        id: format!("{:05}", index),
        image,
        labels,
    }
}

/// Reflect index for a dimension of length `n` (edge sample not repeated).
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Pads bottom and right by reflection so both sides are multiples of
/// `factor`. Returns the padded image and the original `(height, width)`.
pub fn pad_to_factor(x: &ImagePlane, factor: usize) -> (ImagePlane, (usize, usize)) {
    assert!(factor >= 1, "pad factor must be positive");
    let (h, w) = x.size();
    let ph = h.div_ceil(factor) * factor;
    let pw = w.div_ceil(factor) * factor;
    if (ph, pw) == (h, w) {
        return (x.clone(), (h, w));
    }
    let padded = ImagePlane::from_fn(ph, pw, |c, y, xx| x.get(c, reflect(y, h), reflect(xx, w)));
    (padded, (h, w))
}

/// Top-left crop back to `original`.
pub fn crop_to_size(x: &ImagePlane, original: (usize, usize)) -> Result<ImagePlane> {
    let (h, w) = original;
    if h > x.height() || w > x.width() {
        return Err(Error::Contract(format!(
            "cannot crop {}x{} image to {h}x{w}",
            x.height(),
            x.width()
        )));
    }
    if (h, w) == x.size() {
        return Ok(x.clone());
    }
    Ok(ImagePlane::from_fn(h, w, |c, y, xx| x.get(c, y, xx)))
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    spec: DatasetSpec,
    samples: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    width: usize,
    height: usize,
    image: String,
    labels: String,
}

pub const MANIFEST: &str = "manifest.json";

/// Writes `images/<id>.png`, `labels/<id>.png` and `manifest.json`.
pub fn save_dataset(dir: &Path, spec: &DatasetSpec, samples: &[LabeledImage]) -> Result<()> {
    let images = dir.join("images");
    let labels = dir.join("labels");
    fs::create_dir_all(&images).at(&images)?;
    fs::create_dir_all(&labels).at(&labels)?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let image = format!("images/{}.png", s.id);
        let label = format!("labels/{}.png", s.id);
        s.image.save_png(&dir.join(&image))?;
        s.labels.save_png(&dir.join(&label))?;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            width: s.image.width(),
            height: s.image.height(),
            image,
            labels: label,
        });
    }
    let manifest = Manifest {
        spec: spec.clone(),
        samples: entries,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).at(&path)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetSpec, Vec<LabeledImage>)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).at(&path)?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        let image = ImagePlane::load(&dir.join(&e.image))?;
        let labels = LabelMap::load(&dir.join(&e.labels))?;
        if image.size() != (e.height, e.width) || labels.size() != image.size() {
            return Err(Error::Contract(format!("sample {} has inconsistent sizes", e.id)));
        }
        labels.validate(manifest.spec.num_classes)?;
        samples.push(LabeledImage {
            id: e.id.clone(),
            image,
            labels,
        });
    }
    Ok((manifest.spec, samples))
}

/// Deterministic mini-batch order: the stream of sample indices is a
/// concatenation of per-epoch permutations, each seeded by `(seed, epoch)`.
///
/// Batch `step` is a pure function of `step`, so resuming training at any
/// step reproduces the exact batches of an uninterrupted run.
#[derive(Clone, Debug)]
pub struct Batcher {
    num_samples: usize,
    batch_size: usize,
    seed: u64,
}

impl Batcher {
    pub fn new(num_samples: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if num_samples == 0 {
            return Err(Error::InsufficientSamples { needed: 1, got: 0 });
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(Self {
            num_samples,
            batch_size,
            seed,
        })
    }

    fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.num_samples).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ splitmix64(epoch ^ 0xba7c_4e5d));
        order.shuffle(&mut rng);
        order
    }

    pub fn batch(&self, step: u64) -> Vec<usize> {
        let n = self.num_samples as u64;
        let start = step * self.batch_size as u64;
        let mut out = Vec::with_capacity(self.batch_size);
        let mut epoch = u64::MAX;
        let mut perm = Vec::new();
        for pos in start..start + self.batch_size as u64 {
            if pos / n != epoch {
                epoch = pos / n;
                perm = self.permutation(epoch);
            }
            out.push(perm[(pos % n) as usize]);
        }
        out
    }
}
