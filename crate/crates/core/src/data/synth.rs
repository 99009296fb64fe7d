use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, LabelMap, Sample, Target};
use crate::backbone::INPUT_MULTIPLE;
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Representative display colour of a class: gray for class 0, evenly spaced hues otherwise.
pub fn class_color(class: u8, num_classes: usize) -> [u8; 3] {
    if class == 0 {
        return [128, 128, 128];
    }
    if class == super::IGNORE {
        return [0, 0, 0];
    }
    let hue = 360.0 * (class as f64 - 1.0) / (num_classes.max(2) - 1) as f64;
    hsv_to_rgb(hue, 0.9, 0.9).map(|v| (v * 255.0).round() as u8)
}

fn shape_color(rng: &mut ChaCha8Rng, hue_center: f64, families: usize) -> [u8; 3] {
    let spread = 0.15 * 360.0 / families as f64;
    let h = hue_center + rng.random_range(-spread..=spread);
    let s = rng.random_range(0.75..=1.0);
    let v = rng.random_range(0.7..=1.0);
    hsv_to_rgb(h, s, v).map(|c| (c * 255.0).round() as u8)
}

/// Low-saturation gray texture: a random base level, soft stripes and pixel noise.
fn background(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<[u8; 3]> {
    let base = rng.random_range(0.35..0.6);
    let freq = rng.random_range(0.1..0.4);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.02..0.02));
    let (ca, sa) = (angle.cos(), angle.sin());
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            let level = base + 0.06 * (freq * (x * ca + y * sa)).sin() + rng.random_range(-0.04..0.04);
            tint.map(|t| ((level + t).clamp(0.0, 1.0) * 255.0).round() as u8)
        })
        .collect()
}

enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Disk { cy: f64, cx: f64, r: f64 },
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize, scale: f64) -> Self {
        let (hf, wf) = (h as f64, w as f64);
        match rng.random_range(0..3) {
            0 => {
                let (sh, sw) = (rng.random_range(0.2..0.45) * hf * scale, rng.random_range(0.2..0.45) * wf * scale);
                let (y0, x0) = (rng.random_range(0.0..hf - sh), rng.random_range(0.0..wf - sw));
                Shape::Rect { y0, x0, y1: y0 + sh, x1: x0 + sw }
            }
            1 => {
                let r = rng.random_range(0.1..0.22) * hf.min(wf) * scale;
                Shape::Disk { cy: rng.random_range(r..hf - r), cx: rng.random_range(r..wf - r), r }
            }
            _ => {
                let horizontal = rng.random_bool(0.5);
                let (long, short) = if horizontal { (wf, hf) } else { (hf, wf) };
                let len = rng.random_range(0.5..0.9) * long;
                let thick = rng.random_range(0.06..0.12) * short * scale.max(1.0);
                let a = rng.random_range(0.0..long - len);
                let b = rng.random_range(0.0..short - thick);
                if horizontal {
                    Shape::Rect { y0: b, x0: a, y1: b + thick, x1: a + len }
                } else {
                    Shape::Rect { y0: a, x0: b, y1: a + len, x1: b + thick }
                }
            }
        }
    }

    fn contains(&self, y: usize, x: usize) -> bool {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => py >= y0 && py < y1 && px >= x0 && px < x1,
            Shape::Disk { cy, cx, r } => (py - cy).powi(2) + (px - cx).powi(2) <= r * r,
        }
    }
}

fn to_tensor(pixels: &[[u8; 3]], h: usize, w: usize) -> Tensor<f32> {
    let plane = h * w;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in pixels.iter().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("synthetic image shape")
}

fn check_size(n: usize, h: usize, w: usize, num_classes: usize) -> Result<()> {
    if n == 0 {
        return Err(invalid!("sample count must be positive"));
    }
    if h == 0 || w == 0 || !h.is_multiple_of(INPUT_MULTIPLE) || !w.is_multiple_of(INPUT_MULTIPLE) {
        return Err(invalid!(
            "image size {h}x{w} is not divisible by {INPUT_MULTIPLE}: height and width must be positive multiples of {INPUT_MULTIPLE}"
        ));
    }
    if !(2..=255).contains(&num_classes) {
        return Err(invalid!("num_classes must be in 2..=255, got {num_classes}"));
    }
    Ok(())
}

/// Segmentation set of coloured rectangles, disks and bars on a gray textured background.
///
/// Class 0 is the background; a shape's class fixes its hue family. Labels are
/// pixel exact and every sample depends only on `(seed, index)`.
pub fn synth_generate(seed: u64, n: usize, h: usize, w: usize, num_classes: usize) -> Result<Dataset> {
    check_size(n, h, w, num_classes)?;
    let families = num_classes - 1;
    let samples = (0..n)
        .map(|i| {
            let mut rng = sample_rng(seed, i);
            let mut pixels = background(&mut rng, h, w);
            let mut label = vec![0u8; h * w];
            for _ in 0..rng.random_range(2..=4) {
                let class = rng.random_range(1..num_classes) as u8;
                let color = shape_color(&mut rng, 360.0 * (class as f64 - 1.0) / families as f64, families);
                let shape = Shape::random(&mut rng, h, w, 1.0);
                for y in 0..h {
                    for x in 0..w {
                        if shape.contains(y, x) {
                            pixels[y * w + x] = color;
                            label[y * w + x] = class;
                        }
                    }
                }
            }
            Sample {
                id: format!("{i:05}"),
                image: to_tensor(&pixels, h, w),
                target: Target::Segmentation(LabelMap::from_vec(h, w, label).expect("label size")),
            }
        })
        .collect();
    Dataset::new(num_classes, samples)
}

/// Classification set: one large shape per image whose hue family is the class.
///
/// Classes cycle through `0..num_classes` so the set is balanced.
pub fn synth_classification(seed: u64, n: usize, size: usize, num_classes: usize) -> Result<Dataset> {
    check_size(n, size, size, num_classes)?;
    let samples = (0..n)
        .map(|i| {
            let mut rng = sample_rng(seed ^ 0x5eed_c1a5, i);
            let class = (i % num_classes) as u8;
            let mut pixels = background(&mut rng, size, size);
            let color = shape_color(&mut rng, 360.0 * class as f64 / num_classes as f64, num_classes);
            let shape = Shape::random(&mut rng, size, size, 1.8);
            for y in 0..size {
                for x in 0..size {
                    if shape.contains(y, x) {
                        pixels[y * size + x] = color;
                    }
                }
            }
            Sample { id: format!("{i:05}"), image: to_tensor(&pixels, size, size), target: Target::Class(class) }
        })
        .collect();
    Dataset::new(num_classes, samples)
}
