//! Dataset manifests, mask files, split assignment and the synthetic plate
//! generator.
//!
//! # Manifest (`schema_version` 1)
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "food_type": "Fesenjan",
//!   "classes": ["background", "Fesenjan stew", "Rice"],
//!   "entries": [
//!     {"image": "images/pre_0000.png", "mask": "masks/pre_0000.png",
//!      "stage": "pre", "split": "train"}
//!   ]
//! }
//! ```
//!
//! Paths are relative to the manifest's directory unless absolute. `stage` is
//! `pre` or `post`, `split` is `train`, `val` or `test`. Class 0 must be
//! named `background`. Pre and post entries are not paired.
//!
//! # Masks
//!
//! 8-bit single-channel PNG; each pixel value is a class index.

pub mod presets;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskcore::LabelMask;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pre,
    Post,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!(
                "split must be train, val or test, got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Pre => "pre",
            Stage::Post => "post",
        })
    }
}

/// Index → class name; index 0 is always `background`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassTable {
    names: Vec<String>,
}

impl ClassTable {
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let names: Vec<String> = names.iter().map(|s| s.as_ref().to_string()).collect();
        Self::validate(&names).map_err(|m| Error::InvalidConfig(m))?;
        Ok(Self { names })
    }

    fn validate(names: &[String]) -> std::result::Result<(), String> {
        match names.first() {
            None => Err("class table is empty".into()),
            Some(first) if first != "background" => {
                Err(format!("class 0 must be named \"background\", got {first:?}"))
            }
            _ if names.len() > 256 => Err(format!("at most 256 classes, got {}", names.len())),
            _ => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub stage: Stage,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub food_type: String,
    pub classes: ClassTable,
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths resolve against; not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(food_type: impl Into<String>, classes: ClassTable) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            food_type: food_type.into(),
            classes,
            entries: Vec::new(),
            base_dir: PathBuf::new(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_name(&self, index: usize) -> &str {
        self.classes.name(index).unwrap_or("?")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn entries_where<'a>(
        &'a self,
        stage: Option<Stage>,
        split: Option<Split>,
    ) -> impl Iterator<Item = &'a ManifestEntry> + 'a {
        self.entries.iter().filter(move |e| {
            stage.is_none_or(|s| e.stage == s) && split.is_none_or(|s| e.split == s)
        })
    }

    /// Parses and validates manifest JSON without touching the filesystem.
    pub fn from_json_str(text: &str, source_name: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let manifest: DatasetManifest = serde_path_to_error::deserialize(de).map_err(|e| {
            let inner = e.inner();
            Error::Parse {
                source_name: source_name.to_string(),
                location: format!(
                    "field `{}` (line {}, column {})",
                    e.path(),
                    inner.line(),
                    inner.column()
                ),
                message: inner.to_string(),
            }
        })?;
        let field_err = |field: &str, message: String| Error::Parse {
            source_name: source_name.to_string(),
            location: format!("field `{field}`"),
            message,
        };
        if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(field_err(
                "schema_version",
                format!(
                    "unsupported schema version {}, expected {MANIFEST_SCHEMA_VERSION}",
                    manifest.schema_version
                ),
            ));
        }
        ClassTable::validate(&manifest.classes.names).map_err(|m| field_err("classes", m))?;
        Ok(manifest)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Every referenced file that does not exist.
    pub fn missing_files(&self) -> Vec<PathBuf> {
        self.entries
            .iter()
            .flat_map(|e| [self.resolve(&e.image), self.resolve(&e.mask)])
            .filter(|p| !p.exists())
            .collect()
    }
}

/// Reads a manifest and checks that every file it references exists.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut manifest = DatasetManifest::from_json_str(&text, &path.display().to_string())?;
    manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let missing = manifest.missing_files();
    if !missing.is_empty() {
        return Err(Error::MissingFile(missing));
    }
    Ok(manifest)
}

pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut text = manifest.to_json_string()?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Reads an 8-bit single-channel mask and validates labels against `num_classes`.
pub fn read_mask(path: impl AsRef<Path>, num_classes: usize) -> Result<LabelMask> {
    let img = image::ImageReader::open(path.as_ref())?
        .with_guessed_format()?
        .decode()?;
    let gray = match img {
        DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::Format(format!(
                "{}: expected 8-bit single-channel, got {:?}",
                path.as_ref().display(),
                other.color()
            )))
        }
    };
    let (w, h) = gray.dimensions();
    LabelMask::new(w as usize, h as usize, num_classes, gray.into_raw())
}

pub fn write_mask(mask: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    let img = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, mask.labels().to_vec())
        .expect("mask buffer matches its dimensions");
    ensure_parent(path.as_ref())?;
    img.save_with_format(path.as_ref(), image::ImageFormat::Png)?;
    Ok(())
}

pub fn read_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    Ok(image::ImageReader::open(path.as_ref())?
        .with_guessed_format()?
        .decode()?
        .into_rgb8())
}

pub fn write_image(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    ensure_parent(path.as_ref())?;
    img.save_with_format(path.as_ref(), image::ImageFormat::Png)?;
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// An image with its mask, loaded in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub mask: LabelMask,
}

/// Loads every entry matching the filters, in manifest order.
pub fn load_samples(manifest: &DatasetManifest, stage: Option<Stage>, split: Option<Split>) -> Result<Vec<Sample>> {
    manifest
        .entries_where(stage, split)
        .map(|e| {
            let image = read_image(manifest.resolve(&e.image))?;
            let mask = read_mask(manifest.resolve(&e.mask), manifest.num_classes())?;
            if image.width() as usize != mask.width() || image.height() as usize != mask.height() {
                return Err(Error::DimensionMismatch {
                    left: format!("image {}x{}", image.width(), image.height()),
                    right: format!("mask {}x{}", mask.width(), mask.height()),
                });
            }
            let id = e
                .mask
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok(Sample { id, image, mask })
        })
        .collect()
}

/// Masks only, for the waste estimate and histograms.
pub fn load_masks(manifest: &DatasetManifest, stage: Option<Stage>, split: Option<Split>) -> Result<Vec<LabelMask>> {
    manifest
        .entries_where(stage, split)
        .map(|e| read_mask(manifest.resolve(&e.mask), manifest.num_classes()))
        .collect()
}

/// Split sizes for `n` entries: test is carved first, then validation from
/// what remains. Both use round-half-away-from-zero.
pub fn split_sizes(n: usize, test_fraction: f64, val_fraction_of_train: f64) -> (usize, usize, usize) {
    let n_test = (n as f64 * test_fraction).round() as usize;
    let rest = n.saturating_sub(n_test);
    let n_val = (rest as f64 * val_fraction_of_train).round() as usize;
    (rest.saturating_sub(n_val), n_val, n_test)
}

/// Assigns splits with a seeded shuffle; entry order is preserved.
pub fn split_dataset(
    entries: &[ManifestEntry],
    test_fraction: f64,
    val_fraction_of_train: f64,
    seed: u64,
) -> Result<Vec<ManifestEntry>> {
    for (name, f) in [("test_fraction", test_fraction), ("val_fraction", val_fraction_of_train)] {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::InvalidConfig(format!("{name} must lie in (0, 1), got {f}")));
        }
    }
    let n = entries.len();
    let (n_train, n_val, n_test) = split_sizes(n, test_fraction, val_fraction_of_train);
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::TooFewEntries(format!(
            "{n} entries give train/val/test = {n_train}/{n_val}/{n_test}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = entries.to_vec();
    for (rank, &i) in order.iter().enumerate() {
        out[i].split = if rank < n_test {
            Split::Test
        } else if rank < n_test + n_val {
            Split::Val
        } else {
            Split::Train
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn entry(i: usize, stage: Stage) -> ManifestEntry {
        ManifestEntry {
            image: format!("images/{i}.png").into(),
            mask: format!("masks/{i}.png").into(),
            stage,
            split: Split::Train,
        }
    }

    fn sample_manifest() -> DatasetManifest {
        let mut m = DatasetManifest::new("Fesenjan", presets::class_table("Fesenjan").unwrap());
        m.entries = vec![entry(0, Stage::Pre), entry(1, Stage::Post)];
        m
    }

    #[test]
    fn manifest_json_roundtrip() {
        let m = sample_manifest();
        let text = m.to_json_string().unwrap();
        let back = DatasetManifest::from_json_str(&text, "mem").unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn unknown_stage_names_the_field() {
        let text = sample_manifest().to_json_string().unwrap().replacen("\"post\"", "\"during\"", 1);
        match DatasetManifest::from_json_str(&text, "mem") {
            Err(Error::Parse { location, message, .. }) => {
                assert!(location.contains("entries[1].stage"), "{location}");
                assert!(message.contains("during"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn class_zero_must_be_background() {
        let text = sample_manifest()
            .to_json_string()
            .unwrap()
            .replacen("\"background\"", "\"plate\"", 1);
        assert!(matches!(
            DatasetManifest::from_json_str(&text, "mem"),
            Err(Error::Parse { location, .. }) if location.contains("classes")
        ));
    }

    #[test]
    fn missing_files_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        save_manifest(&sample_manifest(), &path).unwrap();
        match load_manifest(&path) {
            Err(Error::MissingFile(list)) => assert_eq!(list.len(), 4),
            other => panic!("expected missing files, got {other:?}"),
        }
    }

    #[test]
    fn mask_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let labels: Vec<u8> = (0..12).map(|i| (i % 3) as u8).collect();
        let mask = LabelMask::new(4, 3, 3, labels).unwrap();
        let p = dir.path().join("m.png");
        write_mask(&mask, &p).unwrap();
        assert_eq!(read_mask(&p, 3).unwrap(), mask);
        assert!(matches!(read_mask(&p, 2), Err(Error::LabelOutOfRange { label: 2, .. })));

        let seven = LabelMask::new(1, 1, 8, vec![7]).unwrap();
        write_mask(&seven, &p).unwrap();
        assert!(matches!(read_mask(&p, 3), Err(Error::LabelOutOfRange { label: 7, .. })));

        let rgb = dir.path().join("rgb.png");
        write_image(&RgbImage::new(2, 2), &rgb).unwrap();
        assert!(matches!(read_mask(&rgb, 3), Err(Error::Format(_))));
    }

    #[test]
    fn split_sizes_rule() {
        assert_eq!(split_sizes(100, 0.25, 0.15), (64, 11, 25));
        assert_eq!(split_sizes(80, 0.125, 1.0 / 7.0), (60, 10, 10));
    }

    #[test]
    fn split_is_deterministic_disjoint_and_complete() {
        let entries: Vec<ManifestEntry> = (0..100).map(|i| entry(i, Stage::Pre)).collect();
        let a = split_dataset(&entries, 0.25, 0.15, 3).unwrap();
        let b = split_dataset(&entries, 0.25, 0.15, 3).unwrap();
        let c = split_dataset(&entries, 0.25, 0.15, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let count = |s| a.iter().filter(|e| e.split == s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (64, 11, 25));
        let images: HashSet<_> = a.iter().map(|e| e.image.clone()).collect();
        assert_eq!(images.len(), 100);
    }

    #[test]
    fn split_rejects_tiny_inputs() {
        let entries: Vec<ManifestEntry> = (0..3).map(|i| entry(i, Stage::Pre)).collect();
        assert!(matches!(split_dataset(&entries, 0.25, 0.15, 0), Err(Error::TooFewEntries(_))));
        assert!(split_dataset(&entries, 0.0, 0.15, 0).is_err());
    }
}
