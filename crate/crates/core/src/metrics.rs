//! Segmentation metrics: pixel accuracy, IoU, Dice and distributional pixel
//! accuracy (DPA), with macro or ground-truth-weighted class aggregation.
//!
//! DPA compares class *proportions* only:
//! `DPA_c = 1 - |P_c_pred / T_pred - P_c_gt / T_gt|`, so a prediction with the
//! right amount of each class in the wrong place still scores 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskcore::{class_pixel_counts, confusion_counts, ClassCounts, ConfusionCounts, LabelMask};

/// Per-class scores. `defined[c]` is false when class `c` appears in neither
/// the prediction nor the ground truth; its value is then meaningless.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassMetric {
    pub values: Vec<f64>,
    pub defined: Vec<bool>,
}

impl PerClassMetric {
    pub fn num_classes(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, class: usize) -> Option<f64> {
        self.defined[class].then_some(self.values[class])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    Macro,
    Weighted,
}

impl std::str::FromStr for Averaging {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macro" => Ok(Averaging::Macro),
            "weighted" => Ok(Averaging::Weighted),
            other => Err(Error::InvalidConfig(format!(
                "aggregation must be macro or weighted, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregationMode {
    pub mode: Averaging,
    pub include_background: bool,
}

impl Default for AggregationMode {
    fn default() -> Self {
        Self {
            mode: Averaging::Weighted,
            include_background: false,
        }
    }
}

impl AggregationMode {
    pub fn weighted() -> Self {
        Self::default()
    }

    pub fn macro_avg() -> Self {
        Self {
            mode: Averaging::Macro,
            include_background: false,
        }
    }

    pub fn with_background(mut self, include: bool) -> Self {
        self.include_background = include;
        self
    }
}

pub fn pixel_accuracy(conf: &ConfusionCounts) -> f64 {
    if conf.total_pixels == 0 {
        return 0.0;
    }
    conf.correct() as f64 / conf.total_pixels as f64
}

fn ratio_metric(conf: &ConfusionCounts, tp_scale: u64) -> PerClassMetric {
    let c = conf.num_classes();
    let mut values = vec![0.0; c];
    let mut defined = vec![false; c];
    for k in 0..c {
        let denom = tp_scale * conf.tp[k] + conf.fp[k] + conf.fn_[k];
        if denom > 0 {
            values[k] = (tp_scale * conf.tp[k]) as f64 / denom as f64;
            defined[k] = true;
        }
    }
    PerClassMetric { values, defined }
}

pub fn per_class_iou(conf: &ConfusionCounts) -> PerClassMetric {
    ratio_metric(conf, 1)
}

pub fn per_class_dice(conf: &ConfusionCounts) -> PerClassMetric {
    ratio_metric(conf, 2)
}

pub fn per_class_dpa(pred_counts: &ClassCounts, gt_counts: &ClassCounts) -> Result<PerClassMetric> {
    let (tp, tg) = (pred_counts.total(), gt_counts.total());
    if tp != tg {
        return Err(Error::AreaMismatch { pred: tp, gt: tg });
    }
    if pred_counts.num_classes() != gt_counts.num_classes() {
        return Err(Error::DimensionMismatch {
            left: format!("pred C={}", pred_counts.num_classes()),
            right: format!("gt C={}", gt_counts.num_classes()),
        });
    }
    let total = tg as f64;
    let (values, defined) = pred_counts
        .counts
        .iter()
        .zip(&gt_counts.counts)
        .map(|(&p, &g)| {
            let v = 1.0 - (p as f64 / total - g as f64 / total).abs();
            (v, p + g > 0)
        })
        .unzip();
    Ok(PerClassMetric { values, defined })
}

/// Collapses per-class scores to one number.
///
/// Macro averages the defined classes equally; weighted uses ground-truth
/// pixel counts as weights, so undefined classes (and classes with no
/// ground-truth pixels) contribute nothing.
pub fn aggregate(metric: &PerClassMetric, gt_counts: &ClassCounts, mode: AggregationMode) -> Result<f64> {
    let start = usize::from(!mode.include_background);
    let classes = (start..metric.num_classes()).filter(|&c| metric.defined[c]);
    match mode.mode {
        Averaging::Macro => {
            let (sum, n) = classes.fold((0.0, 0usize), |(s, n), c| (s + metric.values[c], n + 1));
            if n == 0 {
                return Err(Error::NoDefinedClasses);
            }
            Ok(sum / n as f64)
        }
        Averaging::Weighted => {
            let (sum, weight) = classes.fold((0.0, 0u64), |(s, w), c| {
                let n = gt_counts.counts[c];
                (s + n as f64 * metric.values[c], w + n)
            });
            if weight == 0 {
                return Err(Error::NoDefinedClasses);
            }
            Ok(sum / weight as f64)
        }
    }
}

/// Scores of a single predicted mask against its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub pixel_accuracy: f64,
    pub iou: PerClassMetric,
    pub dice: PerClassMetric,
    pub dpa: PerClassMetric,
    pub mean_iou: Option<f64>,
    pub mean_dice: Option<f64>,
    pub mean_dpa: Option<f64>,
}

pub fn image_metrics(pred: &LabelMask, gt: &LabelMask, mode: AggregationMode) -> Result<ImageMetrics> {
    let conf = confusion_counts(pred, gt)?;
    let gt_counts = class_pixel_counts(gt);
    let iou = per_class_iou(&conf);
    let dice = per_class_dice(&conf);
    let dpa = per_class_dpa(&class_pixel_counts(pred), &gt_counts)?;
    let agg = |m: &PerClassMetric| aggregate(m, &gt_counts, mode).ok();
    Ok(ImageMetrics {
        pixel_accuracy: pixel_accuracy(&conf),
        mean_iou: agg(&iou),
        mean_dice: agg(&dice),
        mean_dpa: agg(&dpa),
        iou,
        dice,
        dpa,
    })
}

/// Split-level report: every number is the mean of the per-image values,
/// skipping images on which that value is undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub aggregation: AggregationMode,
    pub n_images: usize,
    pub pixel_accuracy: f64,
    pub iou: f64,
    pub dice: f64,
    pub dpa: f64,
    pub per_class_iou: PerClassMetric,
    pub per_class_dice: PerClassMetric,
    pub per_class_dpa: PerClassMetric,
}

#[derive(Default)]
struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn push(&mut self, v: Option<f64>) {
        if let Some(v) = v {
            self.sum += v;
            self.n += 1;
        }
    }

    fn get(&self) -> Option<f64> {
        (self.n > 0).then(|| self.sum / self.n as f64)
    }
}

fn mean_per_class(items: &[ImageMetrics], pick: impl Fn(&ImageMetrics) -> &PerClassMetric) -> PerClassMetric {
    let c = pick(&items[0]).num_classes();
    let mut acc: Vec<Mean> = (0..c).map(|_| Mean::default()).collect();
    for m in items {
        for (k, a) in acc.iter_mut().enumerate() {
            a.push(pick(m).get(k));
        }
    }
    PerClassMetric {
        values: acc.iter().map(|a| a.get().unwrap_or(0.0)).collect(),
        defined: acc.iter().map(|a| a.n > 0).collect(),
    }
}

/// Averages per-image metrics in the given order.
pub fn summarize(items: &[ImageMetrics], aggregation: AggregationMode) -> Result<MetricsReport> {
    if items.is_empty() {
        return Err(Error::EmptySplit("metrics input".into()));
    }
    let mut pa = Mean::default();
    let (mut iou, mut dice, mut dpa) = (Mean::default(), Mean::default(), Mean::default());
    for m in items {
        pa.push(Some(m.pixel_accuracy));
        iou.push(m.mean_iou);
        dice.push(m.mean_dice);
        dpa.push(m.mean_dpa);
    }
    Ok(MetricsReport {
        aggregation,
        n_images: items.len(),
        pixel_accuracy: pa.get().unwrap_or(0.0),
        iou: iou.get().unwrap_or(0.0),
        dice: dice.get().unwrap_or(0.0),
        dpa: dpa.get().unwrap_or(0.0),
        per_class_iou: mean_per_class(items, |m| &m.iou),
        per_class_dice: mean_per_class(items, |m| &m.dice),
        per_class_dpa: mean_per_class(items, |m| &m.dpa),
    })
}

/// Evaluates `(prediction, ground truth)` pairs and averages over them.
pub fn evaluate_pairs<'a, I>(pairs: I, aggregation: AggregationMode) -> Result<MetricsReport>
where
    I: IntoIterator<Item = (&'a LabelMask, &'a LabelMask)>,
{
    let items = pairs
        .into_iter()
        .map(|(p, g)| image_metrics(p, g, aggregation))
        .collect::<Result<Vec<_>>>()?;
    summarize(&items, aggregation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square(size: usize, x0: usize, y0: usize, side: usize) -> LabelMask {
        let mut m = LabelMask::background(size, size, 2).unwrap();
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                m.set(x, y, 1).unwrap();
            }
        }
        m
    }

    fn counts(v: &[u64]) -> ClassCounts {
        ClassCounts { counts: v.to_vec() }
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let gt = square(8, 2, 2, 3);
        let m = image_metrics(&gt, &gt, AggregationMode::weighted()).unwrap();
        assert_eq!(m.pixel_accuracy, 1.0);
        for c in 0..2 {
            assert_eq!(m.iou.get(c), Some(1.0));
            assert_eq!(m.dice.get(c), Some(1.0));
            assert_eq!(m.dpa.get(c), Some(1.0));
        }
    }

    #[test]
    fn total_disagreement_is_zero_accuracy() {
        let gt = LabelMask::background(2, 2, 2).unwrap();
        let pred = LabelMask::new(2, 2, 2, vec![1; 4]).unwrap();
        let conf = confusion_counts(&pred, &gt).unwrap();
        assert_eq!(pixel_accuracy(&conf), 0.0);
    }

    #[test]
    fn ninety_of_hundred_correct() {
        let gt = LabelMask::background(10, 10, 2).unwrap();
        let mut labels = vec![0u8; 100];
        labels[..10].fill(1);
        let pred = LabelMask::new(10, 10, 2, labels).unwrap();
        let conf = confusion_counts(&pred, &gt).unwrap();
        assert!((pixel_accuracy(&conf) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn half_overlap_iou_and_dice() {
        // Two 100-pixel regions sharing 50 pixels.
        let conf = ConfusionCounts {
            tp: vec![0, 50],
            fp: vec![0, 50],
            fn_: vec![0, 50],
            total_pixels: 400,
        };
        let iou = per_class_iou(&conf);
        let dice = per_class_dice(&conf);
        assert!((iou.values[1] - 1.0 / 3.0).abs() < 1e-12);
        assert!((dice.values[1] - 0.5).abs() < 1e-12);
        assert!(!iou.defined[0]);
        assert!(!dice.defined[0]);
    }

    #[test]
    fn one_sided_class_is_defined_zero() {
        let gt = square(4, 0, 0, 2);
        let pred = LabelMask::background(4, 4, 2).unwrap();
        let conf = confusion_counts(&pred, &gt).unwrap();
        assert_eq!(per_class_iou(&conf).get(1), Some(0.0));
        assert_eq!(per_class_dice(&conf).get(1), Some(0.0));
    }

    #[test]
    fn dpa_examples() {
        let d = per_class_dpa(&counts(&[70, 30]), &counts(&[50, 50])).unwrap();
        assert!((d.values[1] - 0.8).abs() < 1e-12);
        assert!(matches!(
            per_class_dpa(&counts(&[70, 30]), &counts(&[50, 51])),
            Err(Error::AreaMismatch { .. })
        ));
    }

    #[test]
    fn translated_square_contrast() {
        let gt = square(16, 0, 0, 4);
        let pred = square(16, 10, 10, 4);
        let m = image_metrics(&pred, &gt, AggregationMode::weighted()).unwrap();
        assert_eq!(m.dpa.get(1), Some(1.0));
        assert_eq!(m.iou.get(1), Some(0.0));
        assert_eq!(m.dice.get(1), Some(0.0));
        assert!((m.pixel_accuracy - (256.0 - 32.0) / 256.0).abs() < 1e-12);
    }

    #[test]
    fn aggregation_examples() {
        let m = PerClassMetric {
            values: vec![1.0, 0.0],
            defined: vec![true, true],
        };
        let gt = counts(&[900, 100]);
        let macro_all = AggregationMode::macro_avg().with_background(true);
        let weighted_all = AggregationMode::weighted().with_background(true);
        assert!((aggregate(&m, &gt, macro_all).unwrap() - 0.5).abs() < 1e-12);
        assert!((aggregate(&m, &gt, weighted_all).unwrap() - 0.9).abs() < 1e-12);

        let m = PerClassMetric {
            values: vec![0.1, 0.8],
            defined: vec![true, true],
        };
        assert!((aggregate(&m, &gt, AggregationMode::macro_avg()).unwrap() - 0.8).abs() < 1e-12);
        assert!((aggregate(&m, &gt, AggregationMode::weighted()).unwrap() - 0.8).abs() < 1e-12);

        let none = PerClassMetric {
            values: vec![1.0, 0.0],
            defined: vec![true, false],
        };
        assert!(matches!(
            aggregate(&none, &gt, AggregationMode::macro_avg()),
            Err(Error::NoDefinedClasses)
        ));
    }

    #[test]
    fn undefined_class_is_skipped_by_macro() {
        let m = PerClassMetric {
            values: vec![0.0, 0.6, 0.0],
            defined: vec![true, true, false],
        };
        let gt = counts(&[10, 10, 0]);
        assert!((aggregate(&m, &gt, AggregationMode::macro_avg()).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn summarize_averages_over_images() {
        let gt = square(8, 0, 0, 4);
        let bad = LabelMask::background(8, 8, 2).unwrap();
        let report = evaluate_pairs([(&gt, &gt), (&bad, &gt)], AggregationMode::weighted()).unwrap();
        assert_eq!(report.n_images, 2);
        assert!((report.iou - 0.5).abs() < 1e-12);
        assert!((report.pixel_accuracy - (1.0 + 48.0 / 64.0) / 2.0).abs() < 1e-12);
        assert!(summarize(&[], AggregationMode::weighted()).is_err());
    }

    fn random_pair(seed: u64, side: usize, c: usize) -> (LabelMask, LabelMask) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = || {
            let labels = (0..side * side).map(|_| rng.gen_range(0..c) as u8).collect();
            LabelMask::new(side, side, c, labels).unwrap()
        };
        (gen(), gen())
    }

    proptest! {
        #[test]
        fn iou_dice_relationship(seed in any::<u64>(), c in 2usize..5) {
            let (pred, gt) = random_pair(seed, 12, c);
            let conf = confusion_counts(&pred, &gt).unwrap();
            let iou = per_class_iou(&conf);
            let dice = per_class_dice(&conf);
            for k in 0..c {
                if let (Some(i), Some(d)) = (iou.get(k), dice.get(k)) {
                    prop_assert!(i <= d + 1e-15);
                    prop_assert!((d - 2.0 * i / (1.0 + i)).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn dpa_is_one_iff_counts_match(seed in any::<u64>(), c in 2usize..5) {
            let (pred, gt) = random_pair(seed, 10, c);
            let pc = class_pixel_counts(&pred);
            let gc = class_pixel_counts(&gt);
            let d = per_class_dpa(&pc, &gc).unwrap();
            for k in 0..c {
                prop_assert_eq!(d.values[k] == 1.0, pc.counts[k] == gc.counts[k]);
            }
        }

        #[test]
        fn dpa_ignores_count_preserving_shuffles(seed in any::<u64>()) {
            let (pred, gt) = random_pair(seed, 10, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let mut labels = pred.labels().to_vec();
            labels.shuffle(&mut rng);
            let shuffled = LabelMask::new(10, 10, 3, labels).unwrap();
            let gc = class_pixel_counts(&gt);
            let a = per_class_dpa(&class_pixel_counts(&pred), &gc).unwrap();
            let b = per_class_dpa(&class_pixel_counts(&shuffled), &gc).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn weighted_with_uniform_counts_is_macro(
            vals in proptest::collection::vec(0.0f64..1.0, 2..6),
            n in 1u64..1000,
        ) {
            let c = vals.len();
            let m = PerClassMetric { values: vals, defined: vec![true; c] };
            let gt = ClassCounts { counts: vec![n; c] };
            let w = aggregate(&m, &gt, AggregationMode::weighted()).unwrap();
            let mac = aggregate(&m, &gt, AggregationMode::macro_avg()).unwrap();
            prop_assert!((w - mac).abs() < 1e-12);
            let lo = m.values[1..].iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = m.values[1..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(w >= lo - 1e-12 && w <= hi + 1e-12);
        }
    }
}
