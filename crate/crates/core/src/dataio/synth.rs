//! Synthetic plate generator.
//!
//! Every image is a dark table with a light circular plate; food classes
//! are grown on the plate as compact regions with an exact pixel count, so
//! the ledger of per-class counts is known without re-reading the masks.
//! Regions grow outward from a random seed pixel in order of a shape-specific
//! distance (elliptic, or an angularly modulated "blob" radius).

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::presets::class_table;
use super::{save_manifest, write_image, write_mask, ClassTable, DatasetManifest, ManifestEntry, Split, Stage};
use crate::error::{Error, Result};
use crate::maskcore::LabelMask;

/// Plate radius as a fraction of the image side.
pub const PLATE_RADIUS: f64 = 0.46;
const TABLE_COLOR: [u8; 3] = [62, 54, 50];
const PLATE_COLOR: [u8; 3] = [214, 216, 222];
const DEFAULT_PALETTE: [[u8; 3]; 6] = [
    [142, 70, 32],
    [236, 196, 84],
    [86, 146, 62],
    [188, 40, 48],
    [120, 96, 170],
    [40, 150, 170],
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ProportionTarget {
    /// Each image draws its proportion uniformly from `[min, max]`.
    Range { min: f64, max: f64 },
    /// Pooled proportion over the stage is exactly `mean` (to one pixel);
    /// individual images spread by up to `±spread·mean`.
    Pooled { mean: f64, spread: f64 },
}

impl ProportionTarget {
    fn max(&self) -> f64 {
        match *self {
            ProportionTarget::Range { max, .. } => max,
            ProportionTarget::Pooled { mean, spread } => mean * (1.0 + spread),
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        match *self {
            ProportionTarget::Range { min, max } if !(0.0 <= min && min <= max && max <= 1.0) => {
                Err(format!("range [{min}, {max}] is not inside [0, 1]"))
            }
            ProportionTarget::Pooled { mean, spread }
                if !((0.0..=1.0).contains(&mean) && (0.0..=1.0).contains(&spread)) =>
            {
                Err(format!("pooled mean {mean} / spread {spread} outside [0, 1]"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionShape {
    Ellipse,
    Blob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub food_type: String,
    /// Class names; index 0 must be `background`.
    pub classes: Vec<String>,
    pub image_size: usize,
    pub n_pre: usize,
    pub n_post: usize,
    /// One target per food class (classes `1..C`).
    pub pre: Vec<ProportionTarget>,
    pub post: Vec<ProportionTarget>,
    pub shape: RegionShape,
    /// Per-channel Gaussian noise, as a fraction of full intensity.
    pub noise: f64,
    /// Food-class colors; defaults to a built-in palette.
    #[serde(default)]
    pub palette: Option<Vec<[u8; 3]>>,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<ClassTable> {
        let table = ClassTable::from_names(&self.classes)?;
        let food = table.len() - 1;
        let bad = |m: String| Err(Error::InfeasibleSpec(m));
        if self.image_size == 0 {
            return bad("image_size must be positive".into());
        }
        if self.pre.len() != food || self.post.len() != food {
            return bad(format!(
                "need {food} pre and post targets, got {} and {}",
                self.pre.len(),
                self.post.len()
            ));
        }
        for t in self.pre.iter().chain(&self.post) {
            t.validate().map_err(Error::InfeasibleSpec)?;
        }
        for (stage, targets) in [("pre", &self.pre), ("post", &self.post)] {
            let sum: f64 = targets.iter().map(ProportionTarget::max).sum();
            if sum > 1.0 {
                return bad(format!("{stage} targets can sum to {sum:.3} > 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad(format!("noise {} outside [0, 1]", self.noise));
        }
        if let Some(p) = &self.palette {
            if p.len() < food {
                return bad(format!("palette has {} colors for {food} food classes", p.len()));
            }
        }
        Ok(table)
    }

    fn color(&self, class: usize) -> [u8; 3] {
        match &self.palette {
            Some(p) => p[class - 1],
            None => DEFAULT_PALETTE[(class - 1) % DEFAULT_PALETTE.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedImage {
    pub name: String,
    pub stage: Stage,
    pub image: RgbImage,
    pub mask: LabelMask,
    /// Exact pixel count per class.
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub image: String,
    pub class: usize,
    pub pixel_count: u64,
}

pub struct SynthOutput {
    pub manifest: DatasetManifest,
    pub manifest_path: PathBuf,
    pub ledger_path: PathBuf,
    pub ledger: Vec<LedgerRow>,
}

/// Per-image class pixel counts for one stage.
fn stage_counts(
    targets: &[ProportionTarget],
    n: usize,
    area: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<u64>>> {
    let mut per_image = vec![vec![0u64; targets.len()]; n];
    for (k, t) in targets.iter().enumerate() {
        match *t {
            ProportionTarget::Range { min, max } => {
                for img in per_image.iter_mut() {
                    let p = if max > min { rng.gen_range(min..=max) } else { min };
                    img[k] = (p * area as f64).round() as u64;
                }
            }
            ProportionTarget::Pooled { mean, spread } => {
                let total = (mean * (n * area) as f64).round() as i64;
                let mut offsets: Vec<f64> = (0..n)
                    .map(|j| if n > 1 { 2.0 * j as f64 / (n - 1) as f64 - 1.0 } else { 0.0 })
                    .collect();
                offsets.shuffle(rng);
                let mut assigned = 0i64;
                for (j, img) in per_image.iter_mut().enumerate() {
                    let c = if j + 1 == n {
                        total - assigned
                    } else {
                        (mean * area as f64 * (1.0 + spread * offsets[j])).round() as i64
                    };
                    if c < 0 || c as usize > area {
                        return Err(Error::InfeasibleSpec(format!(
                            "pooled target {mean} cannot be met with {n} images"
                        )));
                    }
                    img[k] = c as u64;
                    assigned += c;
                }
            }
        }
    }
    Ok(per_image)
}

struct Canvas<'a> {
    size: usize,
    labels: Vec<u8>,
    allowed: Vec<bool>,
    rng: &'a mut ChaCha8Rng,
}

impl Canvas<'_> {
    fn free_pixels(&self) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.allowed[i] && self.labels[i] == 0)
            .collect()
    }

    /// Labels exactly `count` free plate pixels with `class`.
    fn grow(&mut self, class: u8, count: u64, shape: RegionShape) -> Result<()> {
        let size = self.size;
        let mut placed = 0u64;
        while placed < count {
            let free = self.free_pixels();
            let Some(&seed) = free.choose(self.rng) else {
                return Err(Error::InfeasibleSpec(format!(
                    "plate is full; class {class} is {} pixels short",
                    count - placed
                )));
            };
            let (cx, cy) = ((seed % size) as f64, (seed / size) as f64);
            let angle = self.rng.gen_range(0.0..std::f64::consts::PI);
            let aspect = self.rng.gen_range(0.6..1.0);
            let lobes = self.rng.gen_range(2..6) as f64;
            let phase = self.rng.gen_range(0.0..std::f64::consts::TAU);
            let (sin, cos) = angle.sin_cos();
            let key = |i: usize| {
                let dx = (i % size) as f64 - cx;
                let dy = (i / size) as f64 - cy;
                let u = dx * cos + dy * sin;
                let v = (-dx * sin + dy * cos) / aspect;
                let r = (u * u + v * v).sqrt();
                let r = match shape {
                    RegionShape::Ellipse => r,
                    RegionShape::Blob => r / (1.0 + 0.3 * (lobes * v.atan2(u) + phase).sin()),
                };
                // Non-negative floats order like their bit patterns; the index breaks ties.
                Reverse((r.to_bits(), i))
            };
            let mut heap = BinaryHeap::new();
            let mut queued = vec![false; self.labels.len()];
            heap.push(key(seed));
            queued[seed] = true;
            while let Some(Reverse((_, i))) = heap.pop() {
                self.labels[i] = class;
                placed += 1;
                if placed == count {
                    break;
                }
                let (x, y) = (i % size, i / size);
                let mut visit = |j: usize| {
                    if !queued[j] && self.allowed[j] && self.labels[j] == 0 {
                        queued[j] = true;
                        heap.push(key(j));
                    }
                };
                if x > 0 {
                    visit(i - 1);
                }
                if x + 1 < size {
                    visit(i + 1);
                }
                if y > 0 {
                    visit(i - size);
                }
                if y + 1 < size {
                    visit(i + size);
                }
            }
        }
        Ok(())
    }
}

fn plate_mask(size: usize) -> Vec<bool> {
    let c = (size as f64 - 1.0) / 2.0;
    let r = PLATE_RADIUS * size as f64;
    (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64 - c, (i / size) as f64 - c);
            x * x + y * y <= r * r
        })
        .collect()
}

fn render(spec: &SyntheticSpec, labels: &[u8], plate: &[bool], rng: &mut ChaCha8Rng) -> RgbImage {
    let size = spec.image_size;
    let noise = Normal::new(0.0, spec.noise * 255.0).expect("noise is finite and non-negative");
    // One brightness factor per class keeps regions from being flat colors.
    let shade: Vec<f64> = (0..spec.classes.len()).map(|_| rng.gen_range(0.9..1.1)).collect();
    let mut img = RgbImage::new(size as u32, size as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        let class = labels[i] as usize;
        let base = match class {
            0 if plate[i] => PLATE_COLOR,
            0 => TABLE_COLOR,
            c => spec.color(c),
        };
        let mut out = [0u8; 3];
        for (o, &b) in out.iter_mut().zip(&base) {
            let v = b as f64 * shade[class] + if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            *o = v.round().clamp(0.0, 255.0) as u8;
        }
        *px = Rgb(out);
    }
    img
}

/// Generates all images and masks in memory (pre first, then post).
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<GeneratedImage>> {
    let table = spec.validate()?;
    let size = spec.image_size;
    let area = size * size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let plate = plate_mask(size);
    let plate_area = plate.iter().filter(|&&b| b).count();
    let mut out = Vec::with_capacity(spec.n_pre + spec.n_post);
    for (stage, targets, n) in [
        (Stage::Pre, &spec.pre, spec.n_pre),
        (Stage::Post, &spec.post, spec.n_post),
    ] {
        let counts = stage_counts(targets, n, area, &mut rng)?;
        for (j, food_counts) in counts.into_iter().enumerate() {
            let food: u64 = food_counts.iter().sum();
            if food as usize > plate_area {
                return Err(Error::InfeasibleSpec(format!(
                    "{stage} image {j} needs {food} food pixels but the plate has {plate_area}"
                )));
            }
            let mut canvas = Canvas {
                size,
                labels: vec![0; area],
                allowed: plate.clone(),
                rng: &mut rng,
            };
            for (k, &c) in food_counts.iter().enumerate() {
                canvas.grow(k as u8 + 1, c, spec.shape)?;
            }
            let labels = canvas.labels;
            let image = render(spec, &labels, &plate, &mut rng);
            let mut counts = vec![area as u64 - food];
            counts.extend(food_counts);
            out.push(GeneratedImage {
                name: format!("{stage}_{j:04}"),
                stage,
                image,
                mask: LabelMask::new(size, size, table.len(), labels)?,
                counts,
            });
        }
    }
    Ok(out)
}

/// Writes images, masks, `manifest.json` and `ledger.csv` under `out_dir`.
/// Every entry is put in the train split.
pub fn synth_generate(spec: &SyntheticSpec, out_dir: impl AsRef<Path>) -> Result<SynthOutput> {
    let out_dir = out_dir.as_ref();
    let table = spec.validate()?;
    let generated = generate(spec)?;
    fs::create_dir_all(out_dir)?;
    let mut manifest = DatasetManifest::new(spec.food_type.clone(), table);
    manifest.base_dir = out_dir.to_path_buf();
    let mut ledger = Vec::new();
    for g in &generated {
        let image = PathBuf::from("images").join(format!("{}.png", g.name));
        let mask = PathBuf::from("masks").join(format!("{}.png", g.name));
        write_image(&g.image, out_dir.join(&image))?;
        write_mask(&g.mask, out_dir.join(&mask))?;
        manifest.entries.push(ManifestEntry {
            image: image.clone(),
            mask,
            stage: g.stage,
            split: Split::Train,
        });
        for (class, &pixel_count) in g.counts.iter().enumerate() {
            ledger.push(LedgerRow {
                image: image.to_string_lossy().into_owned(),
                class,
                pixel_count,
            });
        }
    }
    let manifest_path = out_dir.join("manifest.json");
    save_manifest(&manifest, &manifest_path)?;
    let ledger_path = out_dir.join("ledger.csv");
    let mut w = csv::Writer::from_path(&ledger_path)?;
    for row in &ledger {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(SynthOutput {
        manifest,
        manifest_path,
        ledger_path,
        ledger,
    })
}

pub fn read_ledger(path: impl AsRef<Path>) -> Result<Vec<LedgerRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Pooled pre/post food-class proportions of the waste fixture, one entry
/// per food type: `(food type, pre, post)`, classes in preset order.
pub const TABLE6_TARGETS: [(&str, &[f64], &[f64]); 5] = [
    ("AdasPolo", &[0.399], &[0.047]),
    ("CheloGoosht", &[0.085, 0.291], &[0.005, 0.061]),
    ("Fesenjan", &[0.138, 0.261], &[0.025, 0.028]),
    ("GheymeBademjan", &[0.143, 0.328], &[0.017, 0.066]),
    ("ProteinFries", &[0.096, 0.129], &[0.021, 0.010]),
];

/// 256×256 fixture specs whose pooled proportions hit the waste table.
pub fn table6_fixture_specs(seed: u64) -> Vec<SyntheticSpec> {
    TABLE6_TARGETS
        .iter()
        .enumerate()
        .map(|(k, (food, pre, post))| {
            let names = class_table(food).expect("fixture foods are presets").names().to_vec();
            SyntheticSpec {
                food_type: food.to_string(),
                classes: names,
                image_size: 256,
                n_pre: 6,
                n_post: 8,
                pre: pre.iter().map(|&mean| ProportionTarget::Pooled { mean, spread: 0.15 }).collect(),
                post: post.iter().map(|&mean| ProportionTarget::Pooled { mean, spread: 0.5 }).collect(),
                shape: RegionShape::Blob,
                noise: 0.02,
                palette: None,
                seed: seed.wrapping_add(k as u64),
            }
        })
        .collect()
}

/// Writes the five fixture datasets to `out_dir/<food type>/`.
pub fn write_table6_fixture(out_dir: impl AsRef<Path>, seed: u64) -> Result<Vec<SynthOutput>> {
    table6_fixture_specs(seed)
        .iter()
        .map(|spec| synth_generate(spec, out_dir.as_ref().join(&spec.food_type)))
        .collect()
}

/// Three-class plate set used for the toy training runs.
pub fn training_spec(image_size: usize, n_images: usize, seed: u64) -> SyntheticSpec {
    let n_pre = n_images / 2;
    SyntheticSpec {
        food_type: "SyntheticPlate".into(),
        classes: vec!["background".into(), "Stew".into(), "Rice".into()],
        image_size,
        n_pre,
        n_post: n_images - n_pre,
        pre: vec![
            ProportionTarget::Range { min: 0.10, max: 0.20 },
            ProportionTarget::Range { min: 0.18, max: 0.30 },
        ],
        post: vec![
            ProportionTarget::Range { min: 0.03, max: 0.10 },
            ProportionTarget::Range { min: 0.04, max: 0.12 },
        ],
        shape: RegionShape::Blob,
        noise: 0.04,
        palette: None,
        seed,
    }
}
