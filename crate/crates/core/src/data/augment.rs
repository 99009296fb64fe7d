use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LabelMap, Sample, Target, IGNORE};
use crate::nn::resize_planes;
use crate::tensor::Tensor;

/// Maximum relative deltas for colour jitter; a zero delta disables that adjustment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl ColorJitter {
    pub const NONE: Self = Self { brightness: 0.0, contrast: 0.0, saturation: 0.0 };
}

impl Default for ColorJitter {
    fn default() -> Self {
        Self { brightness: 0.2, contrast: 0.2, saturation: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub crop: usize,
    pub scale_range: (f64, f64),
    pub hflip_prob: f64,
    pub jitter: ColorJitter,
    pub cls_resize_range: (usize, usize),
    pub cls_crop: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop: 768,
            scale_range: (0.5, 2.0),
            hflip_prob: 0.5,
            jitter: ColorJitter::default(),
            cls_resize_range: (256, 480),
            cls_crop: 224,
        }
    }
}

impl AugmentConfig {
    /// No geometric or photometric change for images of `crop`×`crop`.
    pub fn identity(crop: usize) -> Self {
        Self { crop, scale_range: (1.0, 1.0), hflip_prob: 0.0, jitter: ColorJitter::NONE, ..Self::default() }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(crate::error::invalid!("scale range must satisfy 0 < lo <= hi, got [{lo}, {hi}]"));
        }
        if self.crop == 0 || self.cls_crop == 0 {
            return Err(crate::error::invalid!("crop sizes must be positive"));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(crate::error::invalid!("hflip probability must be in [0, 1], got {}", self.hflip_prob));
        }
        let (a, b) = self.cls_resize_range;
        if a == 0 || a > b {
            return Err(crate::error::invalid!("classification resize range must satisfy 0 < lo <= hi, got [{a}, {b}]"));
        }
        let j = self.jitter;
        if [j.brightness, j.contrast, j.saturation].iter().any(|d| !(0.0..1.0).contains(d)) {
            return Err(crate::error::invalid!("colour jitter deltas must be in [0, 1)"));
        }
        Ok(())
    }
}

fn resize_image(img: &Tensor<f32>, oh: usize, ow: usize) -> Tensor<f32> {
    let s = img.shape();
    if (s[1], s[2]) == (oh, ow) {
        return img.clone();
    }
    Tensor::from_vec(&[3, oh, ow], resize_planes(img.data(), 3, s[1], s[2], oh, ow)).expect("resize shape")
}

/// Window of `img` starting at `(y0, x0)`; pixels outside the source become `fill`.
fn window_image(img: &Tensor<f32>, y0: usize, x0: usize, oh: usize, ow: usize) -> Tensor<f32> {
    let s = img.shape();
    let (h, w) = (s[1], s[2]);
    let d = img.data();
    let mut out = vec![0f32; 3 * oh * ow];
    for c in 0..3 {
        for y in 0..oh.min(h.saturating_sub(y0)) {
            for x in 0..ow.min(w.saturating_sub(x0)) {
                out[(c * oh + y) * ow + x] = d[(c * h + y0 + y) * w + x0 + x];
            }
        }
    }
    Tensor::from_vec(&[3, oh, ow], out).expect("crop shape")
}

fn window_label(l: &LabelMap, y0: usize, x0: usize, oh: usize, ow: usize) -> LabelMap {
    let mut out = LabelMap::filled(oh, ow, IGNORE);
    for y in 0..oh.min(l.height().saturating_sub(y0)) {
        for x in 0..ow.min(l.width().saturating_sub(x0)) {
            out.data_mut()[y * ow + x] = l.get(y0 + y, x0 + x);
        }
    }
    out
}

fn flip_image(img: &mut Tensor<f32>) {
    let w = img.shape()[2];
    img.data_mut().chunks_exact_mut(w).for_each(|row| row.reverse());
}

fn flip_label(l: &mut LabelMap) {
    let w = l.width();
    l.data_mut().chunks_exact_mut(w).for_each(|row| row.reverse());
}

/// Brightness, contrast and saturation jitter in that order, clamped to `[0, 1]`.
fn jitter(img: &mut Tensor<f32>, cfg: ColorJitter, rng: &mut ChaCha8Rng) {
    let factor = |rng: &mut ChaCha8Rng, d: f64| (d > 0.0).then(|| rng.random_range(1.0 - d..=1.0 + d) as f32);
    let b = factor(rng, cfg.brightness);
    let c = factor(rng, cfg.contrast);
    let s = factor(rng, cfg.saturation);
    let plane = img.shape()[1] * img.shape()[2];
    let d = img.data_mut();
    let gray = |d: &[f32], i: usize| 0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i];
    if let Some(b) = b {
        d.iter_mut().for_each(|v| *v = (*v * b).clamp(0.0, 1.0));
    }
    if let Some(c) = c {
        let mean = (0..plane).map(|i| gray(d, i) as f64).sum::<f64>() as f32 / plane as f32;
        d.iter_mut().for_each(|v| *v = ((*v - mean) * c + mean).clamp(0.0, 1.0));
    }
    if let Some(s) = s {
        for i in 0..plane {
            let g = gray(d, i);
            for ch in 0..3 {
                let v = &mut d[ch * plane + i];
                *v = ((*v - g) * s + g).clamp(0.0, 1.0);
            }
        }
    }
}

/// Random scale, pad, crop, flip and colour jitter of a segmentation sample.
///
/// The image is resampled bilinearly and the label by nearest neighbour. Padding uses
/// 0 for the image and `IGNORE` for the label. Fully determined by `seed`.
pub fn augment_segmentation(s: &Sample, cfg: &AugmentConfig, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = cfg.scale_range;
    let factor = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let oh = ((s.height() as f64 * factor).round() as usize).max(1);
    let ow = ((s.width() as f64 * factor).round() as usize).max(1);
    let image = resize_image(&s.image, oh, ow);
    let label = s.label().map(|l| if (oh, ow) == (l.height(), l.width()) { l.clone() } else { l.resize_nearest(oh, ow) });

    let y0 = if oh > cfg.crop { rng.random_range(0..=oh - cfg.crop) } else { 0 };
    let x0 = if ow > cfg.crop { rng.random_range(0..=ow - cfg.crop) } else { 0 };
    let mut image = window_image(&image, y0, x0, cfg.crop, cfg.crop);
    let mut label = label.map(|l| window_label(&l, y0, x0, cfg.crop, cfg.crop));

    if cfg.hflip_prob > 0.0 && rng.random_bool(cfg.hflip_prob) {
        flip_image(&mut image);
        if let Some(l) = label.as_mut() {
            flip_label(l);
        }
    }
    jitter(&mut image, cfg.jitter, &mut rng);
    let target = match label {
        Some(l) => Target::Segmentation(l),
        None => s.target.clone(),
    };
    Sample { id: s.id.clone(), image, target }
}

/// Output size with the shorter side set to `short` and the aspect ratio kept.
fn shorter_side_dims(h: usize, w: usize, short: usize) -> (usize, usize) {
    let scaled = |long: usize, side: usize| ((long as f64 * short as f64 / side as f64).round() as usize).max(1);
    if h <= w {
        (short, scaled(w, h))
    } else {
        (scaled(h, w), short)
    }
}

/// Shorter side resized to a random length, random square crop, flip and colour jitter.
pub fn augment_classification(s: &Sample, cfg: &AugmentConfig, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = cfg.cls_resize_range;
    let short = rng.random_range(a..=b);
    let (oh, ow) = shorter_side_dims(s.height(), s.width(), short);
    let image = resize_image(&s.image, oh, ow);
    let crop = cfg.cls_crop;
    let y0 = if oh > crop { rng.random_range(0..=oh - crop) } else { 0 };
    let x0 = if ow > crop { rng.random_range(0..=ow - crop) } else { 0 };
    let mut image = window_image(&image, y0, x0, crop, crop);
    if cfg.hflip_prob > 0.0 && rng.random_bool(cfg.hflip_prob) {
        flip_image(&mut image);
    }
    jitter(&mut image, cfg.jitter, &mut rng);
    Sample { id: s.id.clone(), image, target: s.target.clone() }
}
