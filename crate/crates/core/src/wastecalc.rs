//! Consumption and waste estimation from pre/post-consumption masks.
//!
//! Pre-consumption masks are pooled into a per-class benchmark proportion.
//! Every post-consumption dish is then compared against that benchmark to
//! get a per-class eating rate; the rates are averaged over dishes and the
//! remaining (waste) rate is the complement.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataio::DatasetManifest;
use crate::error::{Error, Result};
use crate::maskcore::{class_pixel_counts, class_proportions, ClassCounts, LabelMask};

/// Pooled mean pre-consumption proportion per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreBenchmark {
    pub values: Vec<f64>,
    pub n_pre_images: usize,
}

/// Per-class eating rates (percent) of a single post-consumption dish.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EatingRecord {
    pub dish: String,
    /// Indexed by class; background (index 0) is always `None`.
    pub rates: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WasteOptions {
    /// Clamp negative eating rates (post proportion above the benchmark) to 0.
    pub clamp_eating_rate: bool,
}

impl Default for WasteOptions {
    fn default() -> Self {
        Self {
            clamp_eating_rate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WasteRow {
    pub class_index: usize,
    pub class_name: String,
    pub pre_average: f64,
    pub post_average: f64,
    pub eating_rate: f64,
    pub remaining_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WasteReport {
    pub food_type: String,
    pub rows: Vec<WasteRow>,
    /// Sum of the food-class pre averages.
    pub total_pre: f64,
    /// Sum of the food-class post averages.
    pub total_post: f64,
    pub n_pre: usize,
    /// Number of post-consumption dishes the eating rates were averaged over.
    pub n_post: usize,
    pub dishes: Vec<EatingRecord>,
}

fn pooled_counts(masks: &[LabelMask]) -> Result<ClassCounts> {
    let first = masks.first().ok_or(Error::EmptyInput("mask list"))?;
    let mut pooled = ClassCounts::zeros(first.num_classes());
    for m in masks {
        pooled.accumulate(&class_pixel_counts(m))?;
    }
    Ok(pooled)
}

/// Pixel-pooled class proportions over a set of masks.
pub fn pooled_proportions(masks: &[LabelMask]) -> Result<Vec<f64>> {
    Ok(pooled_counts(masks)?.proportions().values)
}

pub fn pooled_pre_benchmark(pre_masks: &[LabelMask]) -> Result<PreBenchmark> {
    Ok(PreBenchmark {
        values: pooled_proportions(pre_masks)?,
        n_pre_images: pre_masks.len(),
    })
}

/// Eating rate in percent of one class on one dish.
///
/// With `clamp` set, a post proportion larger than the benchmark yields 0
/// instead of a negative rate.
pub fn eating_rate(benchmark: f64, post_prop: f64, clamp: bool) -> Result<f64> {
    eating_rate_for_class(0, benchmark, post_prop, clamp)
}

fn eating_rate_for_class(class: usize, benchmark: f64, post_prop: f64, clamp: bool) -> Result<f64> {
    if benchmark <= 0.0 {
        return Err(Error::ZeroBenchmark { class });
    }
    let rate = (benchmark - post_prop) / benchmark * 100.0;
    Ok(if clamp { rate.max(0.0) } else { rate })
}

pub fn mean_eating_rate(rates: &[f64]) -> Result<f64> {
    if rates.is_empty() {
        return Err(Error::EmptyInput("eating rates"));
    }
    Ok(rates.iter().sum::<f64>() / rates.len() as f64)
}

pub fn remaining_rate(mean_eating: f64) -> f64 {
    100.0 - mean_eating
}

/// Assembles the per-class eating/remaining table for one food type.
///
/// `pre` and `post` are the resolved masks of the manifest's pre and post
/// entries. Background is excluded from the rows.
pub fn waste_report(
    manifest: &DatasetManifest,
    pre: &[LabelMask],
    post: &[LabelMask],
    opts: WasteOptions,
) -> Result<WasteReport> {
    if pre.is_empty() {
        return Err(Error::EmptyInput("pre-consumption masks"));
    }
    if post.is_empty() {
        return Err(Error::EmptyInput("post-consumption masks"));
    }
    let benchmark = pooled_pre_benchmark(pre)?;
    let post_avg = pooled_proportions(post)?;
    let num_classes = benchmark.values.len();
    if post_avg.len() != num_classes {
        return Err(Error::DimensionMismatch {
            left: format!("pre C={num_classes}"),
            right: format!("post C={}", post_avg.len()),
        });
    }

    let mut dishes = Vec::with_capacity(post.len());
    for (j, mask) in post.iter().enumerate() {
        let props = class_proportions(mask);
        let mut rates = vec![None];
        for c in 1..num_classes {
            rates.push(Some(eating_rate_for_class(
                c,
                benchmark.values[c],
                props.values[c],
                opts.clamp_eating_rate,
            )?));
        }
        dishes.push(EatingRecord {
            dish: format!("post-{j}"),
            rates,
        });
    }

    let mut rows = Vec::with_capacity(num_classes.saturating_sub(1));
    for c in 1..num_classes {
        let per_dish: Vec<f64> = dishes.iter().filter_map(|d| d.rates[c]).collect();
        let eating = mean_eating_rate(&per_dish)?;
        rows.push(WasteRow {
            class_index: c,
            class_name: manifest.class_name(c).to_string(),
            pre_average: benchmark.values[c],
            post_average: post_avg[c],
            eating_rate: eating,
            remaining_rate: remaining_rate(eating),
        });
    }

    Ok(WasteReport {
        food_type: manifest.food_type.clone(),
        total_pre: rows.iter().map(|r| r.pre_average).sum(),
        total_post: rows.iter().map(|r| r.post_average).sum(),
        rows,
        n_pre: pre.len(),
        n_post: post.len(),
        dishes,
    })
}

pub const WASTE_CSV_HEADER: [&str; 6] = [
    "food_type",
    "class",
    "pre_weighted_average",
    "post_weighted_average",
    "eating_rate",
    "remaining_rate",
];

impl WasteReport {
    /// Table-style CSV: proportions to three decimals, rates to one.
    /// A trailing `Total` row carries the summed food proportions.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(WASTE_CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                self.food_type.clone(),
                format!("{} / {}", r.class_index, r.class_name),
                format!("{:.3}", r.pre_average),
                format!("{:.3}", r.post_average),
                format!("{:.1}", r.eating_rate),
                format!("{:.1}", r.remaining_rate),
            ])?;
        }
        w.write_record([
            self.food_type.clone(),
            "Total".to_string(),
            format!("{:.3}", self.total_pre),
            format!("{:.3}", self.total_post),
            String::new(),
            String::new(),
        ])?;
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}
