//! Label masks and the pixel counting shared by the metrics and waste code.
//!
//! A [`LabelMask`] is a dense `H×W` grid of class indices in `0..num_classes`,
//! stored row-major. Class 0 is always background.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hard per-pixel class map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMask {
    width: usize,
    height: usize,
    num_classes: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    /// Builds a mask after checking dimensions and label range.
    pub fn new(width: usize, height: usize, num_classes: usize, labels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidMask(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if num_classes == 0 || num_classes > 256 {
            return Err(Error::InvalidMask(format!(
                "num_classes must be in 1..=256, got {num_classes}"
            )));
        }
        if labels.len() != width * height {
            return Err(Error::InvalidMask(format!(
                "expected {} labels for {width}x{height}, got {}",
                width * height,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&v| v as usize >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                num_classes,
            });
        }
        Ok(Self {
            width,
            height,
            num_classes,
            labels,
        })
    }

    /// All-background mask.
    pub fn background(width: usize, height: usize, num_classes: usize) -> Result<Self> {
        Self::new(width, height, num_classes, vec![0; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Writes a label, checking it against the class count.
    pub fn set(&mut self, x: usize, y: usize, label: u8) -> Result<()> {
        if label as usize >= self.num_classes {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: self.num_classes,
            });
        }
        self.labels[y * self.width + x] = label;
        Ok(())
    }

    pub fn into_labels(self) -> Vec<u8> {
        self.labels
    }

    fn same_shape(&self, other: &LabelMask) -> Result<()> {
        if self.width != other.width
            || self.height != other.height
            || self.num_classes != other.num_classes
        {
            return Err(Error::DimensionMismatch {
                left: format!("{}x{} C={}", self.width, self.height, self.num_classes),
                right: format!("{}x{} C={}", other.width, other.height, other.num_classes),
            });
        }
        Ok(())
    }
}

/// Pixel count per class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub counts: Vec<u64>,
}

impl ClassCounts {
    pub fn zeros(num_classes: usize) -> Self {
        Self {
            counts: vec![0; num_classes],
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    /// Element-wise accumulation; both vectors must have the same length.
    pub fn accumulate(&mut self, other: &ClassCounts) -> Result<()> {
        if self.counts.len() != other.counts.len() {
            return Err(Error::DimensionMismatch {
                left: format!("C={}", self.counts.len()),
                right: format!("C={}", other.counts.len()),
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn proportions(&self) -> Proportions {
        let total = self.total() as f64;
        Proportions {
            values: self
                .counts
                .iter()
                .map(|&c| if total > 0.0 { c as f64 / total } else { 0.0 })
                .collect(),
        }
    }
}

/// Per-class fraction of the mask area. Stored as fractions, not percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proportions {
    pub values: Vec<f64>,
}

impl Proportions {
    pub fn percent(&self) -> Vec<f64> {
        self.values.iter().map(|v| v * 100.0).collect()
    }
}

/// Per-class true positive, false positive and false negative pixel counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub total_pixels: u64,
}

impl ConfusionCounts {
    pub fn num_classes(&self) -> usize {
        self.tp.len()
    }

    pub fn correct(&self) -> u64 {
        self.tp.iter().sum()
    }
}

pub fn class_pixel_counts(mask: &LabelMask) -> ClassCounts {
    let mut counts = vec![0u64; mask.num_classes];
    for &v in &mask.labels {
        counts[v as usize] += 1;
    }
    ClassCounts { counts }
}

pub fn class_proportions(mask: &LabelMask) -> Proportions {
    class_pixel_counts(mask).proportions()
}

pub fn confusion_counts(pred: &LabelMask, gt: &LabelMask) -> Result<ConfusionCounts> {
    pred.same_shape(gt)?;
    let c = gt.num_classes;
    let mut tp = vec![0u64; c];
    let mut fp = vec![0u64; c];
    let mut fn_ = vec![0u64; c];
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        if p == g {
            tp[p as usize] += 1;
        } else {
            fp[p as usize] += 1;
            fn_[g as usize] += 1;
        }
    }
    Ok(ConfusionCounts {
        tp,
        fp,
        fn_,
        total_pixels: gt.area() as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize) -> LabelMask {
        let labels = (0..w * h).map(|_| rng.gen_range(0..c) as u8).collect();
        LabelMask::new(w, h, c, labels).unwrap()
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(LabelMask::new(0, 4, 2, vec![]).is_err());
        assert!(LabelMask::new(2, 2, 2, vec![0, 1, 0]).is_err());
        assert!(matches!(
            LabelMask::new(2, 2, 2, vec![0, 1, 2, 0]),
            Err(Error::LabelOutOfRange { label: 2, .. })
        ));
    }

    #[test]
    fn counts_single_class() {
        let m = LabelMask::background(256, 256, 2).unwrap();
        assert_eq!(class_pixel_counts(&m).counts, vec![65536, 0]);
        assert_eq!(class_proportions(&m).values, vec![1.0, 0.0]);
    }

    #[test]
    fn counts_small_enumeration() {
        let m = LabelMask::new(2, 2, 3, vec![0, 1, 1, 2]).unwrap();
        assert_eq!(class_pixel_counts(&m).counts, vec![1, 2, 1]);
        let half = LabelMask::new(2, 2, 2, vec![0, 0, 1, 1]).unwrap();
        assert_eq!(class_proportions(&half).values, vec![0.5, 0.5]);
    }

    #[test]
    fn counts_match_per_pixel_tally() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random_mask(&mut rng, 64, 64, 5);
        let mut tally = [0u64; 5];
        for y in 0..64 {
            for x in 0..64 {
                tally[m.get(x, y) as usize] += 1;
            }
        }
        assert_eq!(class_pixel_counts(&m).counts, tally.to_vec());
    }

    #[test]
    fn confusion_total_disagreement() {
        let pred = LabelMask::new(2, 2, 2, vec![1; 4]).unwrap();
        let gt = LabelMask::background(2, 2, 2).unwrap();
        let conf = confusion_counts(&pred, &gt).unwrap();
        assert_eq!(conf.tp, vec![0, 0]);
        assert_eq!(conf.fp, vec![0, 4]);
        assert_eq!(conf.fn_, vec![4, 0]);
    }

    #[test]
    fn confusion_rejects_shape_mismatch() {
        let a = LabelMask::background(2, 2, 2).unwrap();
        let b = LabelMask::background(2, 3, 2).unwrap();
        assert!(matches!(
            confusion_counts(&a, &b),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn confusion_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pred = random_mask(&mut rng, 16, 16, 3);
        let gt = random_mask(&mut rng, 16, 16, 3);
        let conf = confusion_counts(&pred, &gt).unwrap();
        for c in 0..3u8 {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for y in 0..16 {
                for x in 0..16 {
                    let (p, g) = (pred.get(x, y), gt.get(x, y));
                    if p == c && g == c {
                        tp += 1;
                    }
                    if p == c && g != c {
                        fp += 1;
                    }
                    if p != c && g == c {
                        fn_ += 1;
                    }
                }
            }
            let i = c as usize;
            assert_eq!((conf.tp[i], conf.fp[i], conf.fn_[i]), (tp, fp, fn_));
        }
    }

    proptest! {
        #[test]
        fn count_and_confusion_invariants(
            seed in any::<u64>(),
            w in 1usize..24,
            h in 1usize..24,
            c in 1usize..6,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pred = random_mask(&mut rng, w, h, c);
            let gt = random_mask(&mut rng, w, h, c);
            let gc = class_pixel_counts(&gt);
            let pc = class_pixel_counts(&pred);
            prop_assert_eq!(gc.total(), (w * h) as u64);
            let sum: f64 = class_proportions(&gt).values.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);

            let conf = confusion_counts(&pred, &gt).unwrap();
            for k in 0..c {
                prop_assert_eq!(conf.tp[k] + conf.fn_[k], gc.counts[k]);
                prop_assert_eq!(conf.tp[k] + conf.fp[k], pc.counts[k]);
            }
            prop_assert!(conf.correct() <= conf.total_pixels);

            let selfc = confusion_counts(&gt, &gt).unwrap();
            prop_assert!(selfc.fp.iter().all(|&v| v == 0));
            prop_assert!(selfc.fn_.iter().all(|&v| v == 0));
        }
    }
}
