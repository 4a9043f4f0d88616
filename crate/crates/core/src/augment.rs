//! Probabilistic augmentation that keeps masks aligned with images.
//!
//! A spec is an ordered list of steps, each applied independently with its
//! own probability. Sampling a plan for `(seed, index)` is deterministic, so
//! an augmented set can be regenerated without storing it.
//!
//! Units: rotation and hue in degrees; shear as a percentage of the
//! perpendicular coordinate (15 means a factor of 0.15); saturation and
//! brightness as offsets in percent of full scale on HSV S and V; exposure
//! as a percent gain on all channels; blur as a Gaussian sigma in pixels.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::presets::food_preset;
use crate::dataio::Sample;
use crate::error::{Error, Result};
use crate::maskcore::LabelMask;

pub const DEFAULT_PROBABILITY: f64 = 0.5;

fn default_probability() -> f64 {
    DEFAULT_PROBABILITY
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StepKind {
    FlipH,
    FlipV,
    /// One of CW, CCW or 180, chosen uniformly.
    Rot90,
    Rotate { max_degrees: f64 },
    Shear { max_percent: f64 },
    Hue { max_degrees: f64 },
    Saturation { max_percent: f64 },
    Brightness { max_percent: f64 },
    Exposure { max_percent: f64 },
    Blur { max_px: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    #[serde(flatten)]
    pub kind: StepKind,
    #[serde(default = "default_probability")]
    pub probability: f64,
}

impl Step {
    pub fn new(kind: StepKind) -> Self {
        Step {
            kind,
            probability: DEFAULT_PROBABILITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AugmentationSpec {
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quarter {
    Cw,
    Ccw,
    Half,
}

/// A concrete operation with its sampled parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "op")]
pub enum PlanOp {
    FlipH,
    FlipV,
    Rot90 { turn: Quarter },
    Rotate { degrees: f64 },
    Shear { x: f64, y: f64 },
    Hue { degrees: f64 },
    Saturation { percent: f64 },
    Brightness { percent: f64 },
    Exposure { percent: f64 },
    Blur { sigma: f64 },
}

impl PlanOp {
    pub fn is_photometric(&self) -> bool {
        matches!(
            self,
            PlanOp::Hue { .. }
                | PlanOp::Saturation { .. }
                | PlanOp::Brightness { .. }
                | PlanOp::Exposure { .. }
                | PlanOp::Blur { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AugmentationPlan {
    pub ops: Vec<PlanOp>,
}

impl AugmentationPlan {
    pub fn is_identity(&self) -> bool {
        self.ops.is_empty()
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        for (i, step) in self.steps.iter().enumerate() {
            if !(0.0..=1.0).contains(&step.probability) {
                return Err(Error::InvalidConfig(format!(
                    "step {i}: probability {} outside [0, 1]",
                    step.probability
                )));
            }
            let range = match step.kind {
                StepKind::FlipH | StepKind::FlipV | StepKind::Rot90 => continue,
                StepKind::Rotate { max_degrees } | StepKind::Hue { max_degrees } => max_degrees,
                StepKind::Shear { max_percent }
                | StepKind::Saturation { max_percent }
                | StepKind::Brightness { max_percent }
                | StepKind::Exposure { max_percent } => max_percent,
                StepKind::Blur { max_px } => max_px,
            };
            if !(range.is_finite() && range >= 0.0) {
                return Err(Error::InvalidConfig(format!("step {i}: range {range} must be finite and non-negative")));
            }
            if matches!(step.kind, StepKind::Shear { .. }) && range >= 100.0 {
                return Err(Error::InvalidConfig(format!("step {i}: shear {range}% is degenerate")));
            }
        }
        Ok(())
    }

    /// Sets every step's probability, e.g. 0 for an identity pipeline.
    pub fn with_probability(mut self, p: f64) -> Self {
        for s in &mut self.steps {
            s.probability = p;
        }
        self
    }

    /// The built-in pipeline for one of the five food types.
    pub fn preset(food: &str) -> Result<Self> {
        use StepKind::*;
        let name = food_preset(food)?.name;
        let mut steps = vec![FlipH, FlipV, Rot90, Rotate { max_degrees: 15.0 }];
        let rest: &[StepKind] = match name {
            "AdasPolo" => &[
                Shear { max_percent: 10.0 },
                Saturation { max_percent: 5.0 },
                Brightness { max_percent: 10.0 },
                Exposure { max_percent: 3.0 },
                Blur { max_px: 1.0 },
            ],
            "CheloGoosht" => &[
                Shear { max_percent: 15.0 },
                Hue { max_degrees: 15.0 },
                Saturation { max_percent: 20.0 },
                Brightness { max_percent: 15.0 },
                Exposure { max_percent: 5.0 },
            ],
            "Fesenjan" => &[
                Shear { max_percent: 15.0 },
                Hue { max_degrees: 18.0 },
                Saturation { max_percent: 15.0 },
                Brightness { max_percent: 10.0 },
                Exposure { max_percent: 10.0 },
                Blur { max_px: 1.3 },
            ],
            "GheymeBademjan" => &[
                Shear { max_percent: 15.0 },
                Hue { max_degrees: 15.0 },
                Saturation { max_percent: 15.0 },
                Brightness { max_percent: 15.0 },
                Blur { max_px: 1.2 },
            ],
            _ => &[
                Shear { max_percent: 15.0 },
                Hue { max_degrees: 15.0 },
                Saturation { max_percent: 10.0 },
                Brightness { max_percent: 15.0 },
                Exposure { max_percent: 5.0 },
                Blur { max_px: 1.2 },
            ],
        };
        steps.extend_from_slice(rest);
        Ok(AugmentationSpec {
            steps: steps.into_iter().map(Step::new).collect(),
        })
    }
}

fn symmetric(rng: &mut ChaCha8Rng, max: f64) -> f64 {
    if max > 0.0 {
        rng.gen_range(-max..=max)
    } else {
        0.0
    }
}

/// Draws the plan for image `index`; each index gets its own RNG stream.
pub fn sample_plan(spec: &AugmentationSpec, seed: u64, index: u64) -> AugmentationPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut ops = Vec::new();
    for step in &spec.steps {
        if !rng.gen_bool(step.probability.clamp(0.0, 1.0)) {
            continue;
        }
        ops.push(match step.kind {
            StepKind::FlipH => PlanOp::FlipH,
            StepKind::FlipV => PlanOp::FlipV,
            StepKind::Rot90 => PlanOp::Rot90 {
                turn: [Quarter::Cw, Quarter::Ccw, Quarter::Half][rng.gen_range(0..3)],
            },
            StepKind::Rotate { max_degrees } => PlanOp::Rotate {
                degrees: symmetric(&mut rng, max_degrees),
            },
            StepKind::Shear { max_percent } => PlanOp::Shear {
                x: symmetric(&mut rng, max_percent),
                y: symmetric(&mut rng, max_percent),
            },
            StepKind::Hue { max_degrees } => PlanOp::Hue {
                degrees: symmetric(&mut rng, max_degrees),
            },
            StepKind::Saturation { max_percent } => PlanOp::Saturation {
                percent: symmetric(&mut rng, max_percent),
            },
            StepKind::Brightness { max_percent } => PlanOp::Brightness {
                percent: symmetric(&mut rng, max_percent),
            },
            StepKind::Exposure { max_percent } => PlanOp::Exposure {
                percent: symmetric(&mut rng, max_percent),
            },
            StepKind::Blur { max_px } => PlanOp::Blur {
                sigma: if max_px > 0.0 { rng.gen_range(0.0..=max_px) } else { 0.0 },
            },
        });
    }
    AugmentationPlan { ops }
}

/// Applies a plan. Geometry moves image and mask together; colour changes
/// touch the image only.
pub fn apply(plan: &AugmentationPlan, image: &RgbImage, mask: &LabelMask) -> Result<(RgbImage, LabelMask)> {
    if image.width() as usize != mask.width() || image.height() as usize != mask.height() {
        return Err(Error::DimensionMismatch {
            left: format!("image {}x{}", image.width(), image.height()),
            right: format!("mask {}x{}", mask.width(), mask.height()),
        });
    }
    let mut img = image.clone();
    let mut m = mask.clone();
    for op in plan.ops.iter() {
        match *op {
            PlanOp::FlipH | PlanOp::FlipV | PlanOp::Rot90 { .. } => {
                (img, m) = permute(op, &img, &m)?;
            }
            PlanOp::Rotate { degrees } => {
                let (s, c) = degrees.to_radians().sin_cos();
                // Inverse of a rotation is its transpose.
                (img, m) = affine(&img, &m, [[c, s], [-s, c]])?;
            }
            PlanOp::Shear { x, y } => {
                let (sx, sy) = (x / 100.0, y / 100.0);
                let det = 1.0 - sx * sy;
                (img, m) = affine(&img, &m, [[1.0 / det, -sx / det], [-sy / det, 1.0 / det]])?;
            }
            PlanOp::Hue { degrees } => map_hsv(&mut img, |h, s, v| ((h + degrees).rem_euclid(360.0), s, v)),
            PlanOp::Saturation { percent } => {
                map_hsv(&mut img, |h, s, v| (h, (s + percent / 100.0).clamp(0.0, 1.0), v))
            }
            PlanOp::Brightness { percent } => {
                map_hsv(&mut img, |h, s, v| (h, s, (v + percent / 100.0).clamp(0.0, 1.0)))
            }
            PlanOp::Exposure { percent } => {
                let gain = 1.0 + percent / 100.0;
                for p in img.pixels_mut() {
                    for ch in p.0.iter_mut() {
                        *ch = (*ch as f64 * gain).round().clamp(0.0, 255.0) as u8;
                    }
                }
            }
            PlanOp::Blur { sigma } => img = gaussian_blur(&img, sigma),
        }
    }
    Ok((img, m))
}

/// Flips and quarter turns: exact pixel permutations.
fn permute(op: &PlanOp, img: &RgbImage, mask: &LabelMask) -> Result<(RgbImage, LabelMask)> {
    let (w, h) = (mask.width(), mask.height());
    let (ow, oh) = match op {
        PlanOp::Rot90 { turn: Quarter::Cw | Quarter::Ccw } => (h, w),
        _ => (w, h),
    };
    // Source pixel for output (x, y).
    let src = |x: usize, y: usize| -> (usize, usize) {
        match op {
            PlanOp::FlipH => (w - 1 - x, y),
            PlanOp::FlipV => (x, h - 1 - y),
            PlanOp::Rot90 { turn: Quarter::Cw } => (y, h - 1 - x),
            PlanOp::Rot90 { turn: Quarter::Ccw } => (w - 1 - y, x),
            _ => (w - 1 - x, h - 1 - y),
        }
    };
    let mut out = RgbImage::new(ow as u32, oh as u32);
    let mut labels = Vec::with_capacity(ow * oh);
    for y in 0..oh {
        for x in 0..ow {
            let (sx, sy) = src(x, y);
            out.put_pixel(x as u32, y as u32, *img.get_pixel(sx as u32, sy as u32));
            labels.push(mask.get(sx, sy));
        }
    }
    Ok((out, LabelMask::new(ow, oh, mask.num_classes(), labels)?))
}

/// Resamples about the image centre. `inv` maps output offsets to source
/// offsets. Masks use nearest neighbour, images bilinear; anything that
/// lands outside the frame becomes background / black.
fn affine(img: &RgbImage, mask: &LabelMask, inv: [[f64; 2]; 2]) -> Result<(RgbImage, LabelMask)> {
    let (w, h) = (mask.width(), mask.height());
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let mut out = RgbImage::new(w as u32, h as u32);
    let mut labels = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = inv[0][0] * dx + inv[0][1] * dy + cx;
            let sy = inv[1][0] * dx + inv[1][1] * dy + cy;
            let (nx, ny) = (sx.round(), sy.round());
            if nx < 0.0 || ny < 0.0 || nx >= w as f64 || ny >= h as f64 {
                continue;
            }
            labels[y * w + x] = mask.get(nx as usize, ny as usize);
            out.put_pixel(x as u32, y as u32, bilinear(img, sx, sy));
        }
    }
    Ok((out, LabelMask::new(w, h, mask.num_classes(), labels)?))
}

fn bilinear(img: &RgbImage, x: f64, y: f64) -> Rgb<u8> {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let at = |xi: i64, yi: i64| img.get_pixel(xi.clamp(0, w - 1) as u32, yi.clamp(0, h - 1) as u32).0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let (a, b, c, d) = (at(x0, y0), at(x0 + 1, y0), at(x0, y0 + 1), at(x0 + 1, y0 + 1));
    let mut px = [0u8; 3];
    for k in 0..3 {
        let top = a[k] as f64 * (1.0 - fx) + b[k] as f64 * fx;
        let bottom = c[k] as f64 * (1.0 - fx) + d[k] as f64 * fx;
        px[k] = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
    }
    Rgb(px)
}

fn rgb_to_hsv([r, g, b]: [u8; 3]) -> (f64, f64, f64) {
    let (r, g, b) = (r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|u| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

fn map_hsv(img: &mut RgbImage, f: impl Fn(f64, f64, f64) -> (f64, f64, f64)) {
    for p in img.pixels_mut() {
        let (h, s, v) = rgb_to_hsv(p.0);
        let (h, s, v) = f(h, s, v);
        p.0 = hsv_to_rgb(h, s, v);
    }
}

fn gaussian_blur(img: &RgbImage, sigma: f64) -> RgbImage {
    if sigma < 0.1 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let (w, h) = (img.width() as i64, img.height() as i64);
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut dst = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for (k, wk) in kernel.iter().enumerate() {
                    let o = k as i64 - radius;
                    let (sx, sy) = if horizontal {
                        ((x + o).clamp(0, w - 1), y)
                    } else {
                        (x, (y + o).clamp(0, h - 1))
                    };
                    let i = ((sy * w + sx) * 3) as usize;
                    for ch in 0..3 {
                        acc[ch] += wk * src[i + ch];
                    }
                }
                let i = ((y * w + x) * 3) as usize;
                for ch in 0..3 {
                    dst[i + ch] = acc[ch] / norm;
                }
            }
        }
        dst
    };
    let src: Vec<f64> = img.as_raw().iter().map(|&v| v as f64).collect();
    let out = pass(&pass(&src, true), false);
    let raw = out.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    RgbImage::from_raw(img.width(), img.height(), raw).expect("buffer has the image's size")
}

/// Expands a training set to `multiplier` copies per source. With
/// `include_original` the first copy is the untouched source; otherwise
/// every copy is sampled. Plan indices are `source * multiplier + copy`.
pub fn expand_training_set(
    samples: &[Sample],
    spec: &AugmentationSpec,
    multiplier: usize,
    seed: u64,
    include_original: bool,
) -> Result<Vec<Sample>> {
    if multiplier == 0 {
        return Err(Error::InvalidConfig("multiplier must be at least 1".into()));
    }
    spec.validate()?;
    let mut out = Vec::with_capacity(samples.len() * multiplier);
    for (i, s) in samples.iter().enumerate() {
        for copy in 0..multiplier {
            if copy == 0 && include_original {
                out.push(s.clone());
                continue;
            }
            let plan = sample_plan(spec, seed, (i * multiplier + copy) as u64);
            let (image, mask) = apply(&plan, &s.image, &s.mask)?;
            out.push(Sample {
                id: format!("{}_aug{copy}", s.id),
                image,
                mask,
            });
        }
    }
    Ok(out)
}
