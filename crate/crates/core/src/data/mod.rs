//! Samples, label maps, datasets on disk, synthetic data and augmentation.

mod augment;
mod io;
mod synth;

pub use augment::{augment_classification, augment_segmentation, AugmentConfig, ColorJitter};
pub use io::{load_dataset, load_images, read_image, read_label, write_image, write_label};
pub use synth::{class_color, synth_classification, synth_generate};

use std::collections::BTreeSet;

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::Tensor;

/// Label value excluded from losses and metrics.
pub const IGNORE: u8 = 255;

/// Per-pixel class indices, `IGNORE` where unlabeled.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err!("label map {height}x{width} needs {} values, got {}", height * width, data.len()));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Distinct values present, including `IGNORE`.
    pub fn values(&self) -> BTreeSet<u8> {
        self.data.iter().copied().collect()
    }

    pub fn ignored_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == IGNORE).count()
    }

    /// Nearest-neighbour resampling with half-pixel centres.
    pub fn resize_nearest(&self, out_h: usize, out_w: usize) -> Self {
        let ys: Vec<usize> = (0..out_h).map(|i| nearest_source(i, self.height, out_h)).collect();
        let xs: Vec<usize> = (0..out_w).map(|j| nearest_source(j, self.width, out_w)).collect();
        let data = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).map(|(y, x)| self.get(y, x)).collect();
        Self { height: out_h, width: out_w, data }
    }

    /// Errors if any value is neither a class index below `num_classes` nor `IGNORE`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().find(|&&v| v != IGNORE && v as usize >= num_classes) {
            Some(v) => Err(Error::Dataset(format!("label value {v} is out of range for {num_classes} classes"))),
            None => Ok(()),
        }
    }
}

fn nearest_source(i: usize, src: usize, dst: usize) -> usize {
    (((i as f64 + 0.5) * src as f64 / dst as f64) as usize).min(src - 1)
}

/// Supervision attached to an image.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Segmentation(LabelMap),
    Class(u8),
    Unlabeled,
}

/// One image `[3, H, W]` with values in `[0, 1]` and its target.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    pub target: Target,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn label(&self) -> Option<&LabelMap> {
        match &self.target {
            Target::Segmentation(l) => Some(l),
            _ => None,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let s = self.image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(shape_err!("sample {}: image must be [3, H, W], got {s:?}", self.id));
        }
        match &self.target {
            Target::Segmentation(l) => {
                if (l.height(), l.width()) != (s[1], s[2]) {
                    return Err(Error::Dataset(format!(
                        "sample {}: image is {}x{} but label is {}x{}",
                        self.id,
                        s[2],
                        s[1],
                        l.width(),
                        l.height()
                    )));
                }
                l.validate(num_classes).map_err(|e| Error::Dataset(format!("sample {}: {e}", self.id)))
            }
            Target::Class(c) if *c as usize >= num_classes => {
                Err(Error::Dataset(format!("sample {}: class {c} out of range for {num_classes} classes", self.id)))
            }
            _ => Ok(()),
        }
    }
}

/// Indexed collection of samples sharing one class count, ordered by id.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(num_classes: usize, mut samples: Vec<Sample>) -> Result<Self> {
        if num_classes == 0 || num_classes > 255 {
            return Err(invalid!("num_classes must be in 1..=255, got {num_classes}"));
        }
        for s in &samples {
            s.validate(num_classes)?;
        }
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = samples.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::Dataset(format!("duplicate sample id {}", w[0].id)));
        }
        Ok(Self { num_classes, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Sample> {
        self.samples.iter()
    }

    /// Union of two datasets with the same class count; ids must stay unique.
    pub fn union(&self, other: &Dataset) -> Result<Dataset> {
        if self.num_classes != other.num_classes {
            return Err(Error::Dataset(format!(
                "cannot combine datasets with {} and {} classes",
                self.num_classes, other.num_classes
            )));
        }
        Dataset::new(self.num_classes, self.samples.iter().chain(&other.samples).cloned().collect())
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        Dataset { num_classes: self.num_classes, samples: self.samples.iter().take(n).cloned().collect() }
    }

    /// Writes `images/<id>.png` plus `labels/<id>.png` or `classes.csv`.
    pub fn save(&self, root: &std::path::Path) -> Result<()> {
        io::save_dataset(self, root)
    }
}
