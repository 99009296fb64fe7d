use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};

use super::{Dataset, LabelMap, Sample, Target};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit RGB PNG as a `[3, H, W]` tensor in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let d = image.data();
    let buf: Vec<u8> = (0..plane)
        .flat_map(|i| (0..3).map(move |c| (d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    let img = RgbImage::from_raw(w as u32, h as u32, buf).expect("rgb buffer size");
    img.save(path)?;
    Ok(())
}

/// Single-channel 8-bit PNG of class indices.
pub fn read_label(path: &Path) -> Result<LabelMap> {
    match image::open(path)? {
        DynamicImage::ImageLuma8(img) => {
            LabelMap::from_vec(img.height() as usize, img.width() as usize, img.into_raw())
        }
        other => Err(Error::Dataset(format!(
            "label {} must be an 8-bit single-channel PNG, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

pub fn write_label(path: &Path, label: &LabelMap) -> Result<()> {
    let img = GrayImage::from_raw(label.width() as u32, label.height() as u32, label.data().to_vec())
        .expect("label buffer size");
    img.save(path)?;
    Ok(())
}

fn png_ids(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::Dataset(format!("cannot read {}: {e}", dir.display())))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            out.push((id, path));
        }
    }
    out.sort();
    Ok(out)
}

fn read_classes(path: &Path) -> Result<Vec<(String, u8)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line == "id,class") {
            continue;
        }
        let (id, class) = line
            .split_once(',')
            .ok_or_else(|| Error::Dataset(format!("{}:{}: expected `id,class`", path.display(), n + 1)))?;
        let class = class
            .trim()
            .parse()
            .map_err(|_| Error::Dataset(format!("{}:{}: bad class `{class}`", path.display(), n + 1)))?;
        out.push((id.trim().to_string(), class));
    }
    Ok(out)
}

/// Loads and validates every pair of `root/images/<id>.png` and `root/labels/<id>.png`.
///
/// A directory with `classes.csv` instead of `labels/` is read as a classification set.
pub fn load_dataset(root: &Path, num_classes: usize) -> Result<Dataset> {
    let images_dir = root.join("images");
    if !images_dir.is_dir() {
        return Err(Error::Dataset(format!("{} has no images/ directory", root.display())));
    }
    let images = png_ids(&images_dir)?;
    let labels_dir = root.join("labels");
    let classes_csv = root.join("classes.csv");
    let mut samples = Vec::with_capacity(images.len());
    if labels_dir.is_dir() {
        let labels = png_ids(&labels_dir)?;
        let label_ids: Vec<&String> = labels.iter().map(|(id, _)| id).collect();
        if let Some((id, _)) = labels.iter().find(|(id, _)| images.binary_search_by(|(i, _)| i.cmp(id)).is_err()) {
            return Err(Error::Dataset(format!("label {id} has no matching image")));
        }
        for (id, path) in images {
            if label_ids.binary_search(&&id).is_err() {
                return Err(Error::Dataset(format!("image {id} has no matching label")));
            }
            let image = read_image(&path)?;
            let label = read_label(&labels_dir.join(format!("{id}.png")))?;
            samples.push(Sample { id, image, target: Target::Segmentation(label) });
        }
    } else if classes_csv.is_file() {
        let mut classes = read_classes(&classes_csv)?;
        classes.sort();
        for (id, path) in images {
            let class = match classes.binary_search_by(|(i, _)| i.cmp(&id)) {
                Ok(k) => classes[k].1,
                Err(_) => return Err(Error::Dataset(format!("image {id} is missing from classes.csv"))),
            };
            samples.push(Sample { id, image: read_image(&path)?, target: Target::Class(class) });
        }
    } else {
        return Err(Error::Dataset(format!("{} has neither labels/ nor classes.csv", root.display())));
    }
    Dataset::new(num_classes, samples)
}

/// Images without targets, from `dir/images/` if present, else `dir` itself.
pub fn load_images(dir: &Path, num_classes: usize) -> Result<Dataset> {
    let images_dir = if dir.join("images").is_dir() { dir.join("images") } else { dir.to_path_buf() };
    let samples = png_ids(&images_dir)?
        .into_iter()
        .map(|(id, path)| Ok(Sample { id, image: read_image(&path)?, target: Target::Unlabeled }))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(num_classes, samples)
}

pub(super) fn save_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    let images = root.join("images");
    fs::create_dir_all(&images)?;
    let mut classes = String::new();
    for s in ds.iter() {
        write_image(&images.join(format!("{}.png", s.id)), &s.image)?;
        match &s.target {
            Target::Segmentation(l) => {
                let dir = root.join("labels");
                fs::create_dir_all(&dir)?;
                write_label(&dir.join(format!("{}.png", s.id)), l)?;
            }
            Target::Class(c) => classes.push_str(&format!("{},{c}\n", s.id)),
            Target::Unlabeled => {}
        }
    }
    if !classes.is_empty() {
        fs::write(root.join("classes.csv"), format!("id,class\n{classes}"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;

    #[test]
    fn save_load_round_trip_is_pixel_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_generate(3, 3, 32, 64, 4).unwrap();
        ds.save(dir.path()).unwrap();
        let back = load_dataset(dir.path(), 4).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back, ds);
    }

    #[test]
    fn validation_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_generate(1, 2, 64, 64, 4).unwrap();
        ds.save(dir.path()).unwrap();
        let small = LabelMap::filled(32, 32, 0);
        write_label(&dir.path().join("labels").join(format!("{}.png", ds.get(0).id)), &small).unwrap();
        let err = load_dataset(dir.path(), 4).unwrap_err().to_string();
        assert!(err.contains("64x64") && err.contains("32x32"), "{err}");

        let bad = LabelMap::filled(64, 64, 200);
        write_label(&dir.path().join("labels").join(format!("{}.png", ds.get(0).id)), &bad).unwrap();
        let err = load_dataset(dir.path(), 19).unwrap_err().to_string();
        assert!(err.contains("200"), "{err}");

        fs::remove_file(dir.path().join("labels").join(format!("{}.png", ds.get(1).id))).unwrap();
        assert!(load_dataset(dir.path(), 4).is_err());
    }

    #[test]
    fn classification_layout_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = crate::data::synth_classification(5, 4, 32, 3).unwrap();
        ds.save(dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path(), 3).unwrap(), ds);
        assert_eq!(load_images(dir.path(), 3).unwrap().len(), 4);
    }
}
