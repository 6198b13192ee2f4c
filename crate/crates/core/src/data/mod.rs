//! Datasets of (frame, contour) pairs: splitting, subsampling, resizing,
//! manifests on disk, augmentation and a synthetic generator.

mod augment;
mod synthetic;

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{imageops, ImageBuffer, Luma};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contour::{read_annotations, write_annotation, Contour, Heatmap};
use crate::error::{invalid, Error, Result};

pub use augment::{augment_pair, AffineParams, AugmentationConfig};
pub use synthetic::{
    generate_synthetic, generate_synthetic_with_curves, synthesize_frame, SyntheticConfig,
    SyntheticCurve,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(invalid(format!("unknown split '{other}'"))),
        }
    }
}

/// A grayscale frame normalised to [0, 1] and its annotated contour in that
/// frame's pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub frame: Heatmap,
    pub contour: Contour,
}

impl Item {
    pub fn id(&self) -> &str {
        &self.contour.frame_id
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub items: Vec<Item>,
    pub split: Option<Split>,
}

impl Dataset {
    pub fn new(items: Vec<Item>) -> Self {
        Self { items, split: None }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Common square side length, if every frame shares one.
    pub fn image_size(&self) -> Option<usize> {
        let first = self.items.first()?;
        let s = first.frame.width();
        self.items
            .iter()
            .all(|it| it.frame.width() == s && it.frame.height() == s)
            .then_some(s)
    }

    fn with_split(items: Vec<Item>, split: Split) -> Self {
        Self {
            items,
            split: Some(split),
        }
    }

    /// Rescales every frame to `size`×`size` and maps contours accordingly.
    pub fn resized(&self, size: usize) -> Result<Dataset> {
        let items = self
            .items
            .iter()
            .map(|it| resize_item(it, size))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            items,
            split: self.split,
        })
    }
}

/// Maps pixel-centre coordinates between resolutions.
pub fn rescale_coord(v: f64, from: usize, to: usize) -> f64 {
    (v + 0.5) * to as f64 / from as f64 - 0.5
}

pub fn rescale_contour(c: &Contour, from: (usize, usize), to: (usize, usize)) -> Contour {
    let mut out = c.clone();
    for p in &mut out.points {
        p.x = rescale_coord(p.x, from.0, to.0);
        p.y = rescale_coord(p.y, from.1, to.1);
    }
    if let Some(s) = out.px_per_mm.as_mut() {
        *s *= to.0 as f64 / from.0 as f64;
    }
    out
}

/// Bilinear (triangle filter) resize of a [0,1] image.
pub fn resize_frame(frame: &Heatmap, width: usize, height: usize) -> Result<Heatmap> {
    if frame.width() == width && frame.height() == height {
        return Ok(frame.clone());
    }
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(frame.width() as u32, frame.height() as u32, frame.values().to_vec())
            .ok_or_else(|| invalid("frame buffer size mismatch"))?;
    let out = imageops::resize(&buf, width as u32, height as u32, imageops::FilterType::Triangle);
    Heatmap::from_values(
        width,
        height,
        out.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    )
}

fn resize_item(it: &Item, size: usize) -> Result<Item> {
    let (w, h) = (it.frame.width(), it.frame.height());
    let mut contour = it.contour.clone();
    if contour.px_per_mm.is_none() {
        contour.px_per_mm = Some(contour.scale());
    }
    Ok(Item {
        frame: resize_frame(&it.frame, size, size)?,
        contour: rescale_contour(&contour, (w, h), (size, size)),
    })
}

fn seeded_order(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Seeded random partition into train/val/test. Train and val sizes are
/// rounded to the nearest integer; test takes the remainder.
pub fn split_dataset(
    items: Vec<Item>,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (ft, fv, fe) = fractions;
    if [ft, fv, fe].iter().any(|f| !(0.0..=1.0).contains(f)) || (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(invalid(format!(
            "split fractions must be in [0,1] and sum to 1, got ({ft}, {fv}, {fe})"
        )));
    }
    let n = items.len();
    if n < 3 {
        return Err(invalid(format!("need at least 3 items to split, got {n}")));
    }
    let n_train = ((ft * n as f64).round() as usize).min(n);
    let n_val = ((fv * n as f64).round() as usize).min(n - n_train);
    let order = seeded_order(n, seed);
    let mut slots: Vec<Option<Item>> = items.into_iter().map(Some).collect();
    let mut take = |range: std::ops::Range<usize>| -> Vec<Item> {
        order[range].iter().map(|&i| slots[i].take().unwrap()).collect()
    };
    let train = take(0..n_train);
    let val = take(n_train..n_train + n_val);
    let test = take(n_train + n_val..n);
    Ok((
        Dataset::with_split(train, Split::Train),
        Dataset::with_split(val, Split::Val),
        Dataset::with_split(test, Split::Test),
    ))
}

/// Prefix of one seeded shuffle, so smaller fractions nest inside larger ones.
pub fn subsample_training(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid(format!("fraction must be in (0, 1], got {fraction}")));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if fraction == 1.0 {
        return Ok(dataset.clone());
    }
    let n = dataset.len();
    let k = ((fraction * n as f64).round() as usize).clamp(1, n);
    let order = seeded_order(n, seed);
    Ok(Dataset {
        items: order[..k].iter().map(|&i| dataset.items[i].clone()).collect(),
        split: dataset.split,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub frame: PathBuf,
    pub annotation: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

/// On-disk dataset index. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub items: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes frames as 8-bit PNG, annotations as JSON and a manifest into `dir`.
pub fn write_dataset(dir: &Path, items: &[(Option<Split>, &Item)]) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("frames"))?;
    fs::create_dir_all(dir.join("annotations"))?;
    let mut entries = Vec::with_capacity(items.len());
    for (split, item) in items {
        let frame = PathBuf::from("frames").join(format!("{}.png", item.id()));
        let annotation = PathBuf::from("annotations").join(format!("{}.json", item.id()));
        item.frame.save_png(&dir.join(&frame))?;
        write_annotation(&dir.join(&annotation), &item.contour)?;
        entries.push(ManifestEntry {
            frame,
            annotation,
            split: *split,
        });
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&Manifest { items: entries })?)?;
    Ok(path)
}

/// Reads a manifest and every referenced frame and annotation.
pub fn load_manifest(path: &Path) -> Result<Vec<(Option<Split>, Item)>> {
    let text = fs::read_to_string(path)?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    manifest
        .items
        .iter()
        .map(|e| {
            let frame = Heatmap::load_png(&base.join(&e.frame))?;
            let mut contours = read_annotations(&base.join(&e.annotation))?;
            if contours.len() != 1 {
                return Err(Error::Parse(format!(
                    "{}: expected one contour, found {}",
                    e.annotation.display(),
                    contours.len()
                )));
            }
            Ok((
                e.split,
                Item {
                    frame,
                    contour: contours.remove(0),
                },
            ))
        })
        .collect()
}

/// Groups manifest items by their split tag; untagged items are returned
/// separately.
pub fn datasets_by_split(
    tagged: Vec<(Option<Split>, Item)>,
) -> (Dataset, Dataset, Dataset, Vec<Item>) {
    let mut train = Dataset::with_split(Vec::new(), Split::Train);
    let mut val = Dataset::with_split(Vec::new(), Split::Val);
    let mut test = Dataset::with_split(Vec::new(), Split::Test);
    let mut untagged = Vec::new();
    for (s, item) in tagged {
        match s {
            Some(Split::Train) => train.items.push(item),
            Some(Split::Val) => val.items.push(item),
            Some(Split::Test) => test.items.push(item),
            None => untagged.push(item),
        }
    }
    (train, val, test, untagged)
}
