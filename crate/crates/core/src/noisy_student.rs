//! Teacher pseudo-labelling with a confidence threshold, and student training on the union.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::backbone::{validate_input, NetworkSpec};
use crate::data::{write_image, write_label, Dataset, LabelMap, Sample, Target, IGNORE};
use crate::error::{invalid, shape_err, Error, Result};
use crate::eval::batch_of_one;
use crate::seg_head::SegNet;
use crate::tensor::Tensor;
use crate::train::{save_checkpoint, train, TrainConfig, TrainReport, TrainState};

pub const DEFAULT_THRESHOLD: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelConfig {
    pub threshold: f64,
    /// Where to write the pseudo-labelled dataset and `coverage.csv`; nothing is written when `None`.
    pub output_dir: Option<PathBuf>,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self { threshold: DEFAULT_THRESHOLD, output_dir: None }
    }
}

impl PseudoLabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(invalid!("threshold must be in [0, 1], got {}", self.threshold));
        }
        Ok(())
    }
}

/// Hard labels from `[N, C, H, W]` logits: the arg-max class where its softmax
/// probability is at least `threshold`, `IGNORE` elsewhere.
///
/// The probability of the top class is `1 / sum_c exp(l_c - l_max)`, evaluated in double precision.
pub fn threshold_logits(logits: &Tensor<f32>, threshold: f64) -> Result<Vec<LabelMap>> {
    let s = logits.shape();
    if s.len() != 4 {
        return Err(shape_err!("expected [N, C, H, W] logits, got {s:?}"));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let plane = h * w;
    logits
        .data()
        .chunks_exact(c * plane)
        .map(|img| {
            let data = (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for ch in 1..c {
                        if img[ch * plane + p] > img[best * plane + p] {
                            best = ch;
                        }
                    }
                    let top = img[best * plane + p] as f64;
                    let z: f64 = (0..c).map(|ch| (img[ch * plane + p] as f64 - top).exp()).sum();
                    if 1.0 / z >= threshold {
                        best as u8
                    } else {
                        IGNORE
                    }
                })
                .collect();
            LabelMap::from_vec(h, w, data)
        })
        .collect()
}

/// Pseudo label of one `[1, 3, H, W]` image from a frozen teacher.
pub fn pseudo_label(teacher: &SegNet<f32>, image: &Tensor<f32>, threshold: f64) -> Result<LabelMap> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(invalid!("threshold must be in [0, 1], got {threshold}"));
    }
    if image.shape().first() != Some(&1) {
        return Err(shape_err!("pseudo_label takes a single image [1, 3, H, W], got {:?}", image.shape()));
    }
    Ok(threshold_logits(&teacher.logits(image)?, threshold)?.remove(0))
}

/// Pseudo-labelled copy of an image set with its coverage statistics.
#[derive(Clone, Debug)]
pub struct PseudoSet {
    pub dataset: Dataset,
    /// Fraction of labelled pixels per image id.
    pub coverage: Vec<(String, f64)>,
    pub overall_coverage: f64,
    pub ignored_pixels: usize,
    pub total_pixels: usize,
}

impl PseudoSet {
    pub fn coverage_csv(&self) -> String {
        let mut out = String::from("id,coverage\n");
        for (id, c) in &self.coverage {
            writeln!(out, "{id},{c}").expect("string write");
        }
        writeln!(out, "overall,{}", self.overall_coverage).expect("string write");
        out
    }
}

/// Labels every image of `images` with the teacher and optionally writes the result.
///
/// Output layout: `images/`, `labels/` and `coverage.csv` under `cfg.output_dir`.
pub fn generate_pseudo_set(teacher: &SegNet<f32>, images: &Dataset, cfg: &PseudoLabelConfig) -> Result<PseudoSet> {
    cfg.validate()?;
    if images.num_classes != teacher.spec.num_classes {
        return Err(Error::Dataset(format!(
            "teacher predicts {} classes but the image set declares {}",
            teacher.spec.num_classes, images.num_classes
        )));
    }
    for s in images.iter() {
        validate_input(&[1, 3, s.height(), s.width()]).map_err(|e| invalid!("image {}: {e}", s.id))?;
    }
    if let Some(dir) = &cfg.output_dir {
        for sub in ["images", "labels"] {
            fs::create_dir_all(dir.join(sub))
                .map_err(|e| Error::InvalidArgument(format!("cannot write to {}: {e}", dir.display())))?;
        }
    }
    let mut samples = Vec::with_capacity(images.len());
    let mut coverage = Vec::with_capacity(images.len());
    let (mut ignored, mut total) = (0, 0);
    for s in images.iter() {
        let label = pseudo_label(teacher, &batch_of_one(&s.image)?, cfg.threshold)?;
        let n = label.data().len();
        let ign = label.ignored_count();
        ignored += ign;
        total += n;
        coverage.push((s.id.clone(), (n - ign) as f64 / n as f64));
        if let Some(dir) = &cfg.output_dir {
            write_image(&dir.join("images").join(format!("{}.png", s.id)), &s.image)?;
            write_label(&dir.join("labels").join(format!("{}.png", s.id)), &label)?;
        }
        samples.push(Sample { id: s.id.clone(), image: s.image.clone(), target: Target::Segmentation(label) });
    }
    let overall_coverage = if total == 0 { 0.0 } else { (total - ignored) as f64 / total as f64 };
    let set = PseudoSet {
        dataset: Dataset::new(images.num_classes, samples)?,
        coverage,
        overall_coverage,
        ignored_pixels: ignored,
        total_pixels: total,
    };
    if let Some(dir) = &cfg.output_dir {
        fs::write(dir.join("coverage.csv"), set.coverage_csv())?;
    }
    Ok(set)
}

/// Labelled samples plus pseudo-labelled ones, the latter renamed `pseudo-<id>`.
pub fn combine(labeled: &Dataset, pseudo: &Dataset) -> Result<Dataset> {
    let renamed: Vec<Sample> =
        pseudo.iter().map(|s| Sample { id: format!("pseudo-{}", s.id), ..s.clone() }).collect();
    labeled.union(&Dataset::new(pseudo.num_classes, renamed)?)
}

#[derive(Clone, Debug)]
pub struct NoisyStudentConfig {
    pub spec: NetworkSpec,
    pub teacher: TrainConfig,
    pub student: TrainConfig,
    pub pseudo: PseudoLabelConfig,
}

#[derive(Clone, Debug)]
pub struct NoisyStudentOutcome {
    pub teacher: SegNet<f32>,
    pub student: SegNet<f32>,
    pub teacher_report: TrainReport,
    pub student_report: TrainReport,
    pub pseudo: PseudoSet,
}

/// Teacher on `labeled`, one round of pseudo labels on `unlabeled`, then a freshly
/// initialised student on the union with augmentation as the noise.
///
/// With `out_dir`, writes `teacher.ckpt`, `student.ckpt`, loss curves and the pseudo set under `pseudo/`.
pub fn noisy_student_train(
    labeled: &Dataset,
    unlabeled: &Dataset,
    cfg: &NoisyStudentConfig,
    out_dir: Option<&Path>,
) -> Result<NoisyStudentOutcome> {
    cfg.pseudo.validate()?;
    if labeled.num_classes != unlabeled.num_classes {
        return Err(Error::Dataset(format!(
            "labelled set has {} classes, unlabelled set {}",
            labeled.num_classes, unlabeled.num_classes
        )));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut teacher = TrainState::from_config(SegNet::build(&cfg.spec, cfg.teacher.seed)?, &cfg.teacher);
    let teacher_report = train(&mut teacher, labeled, &cfg.teacher)?;

    let mut pcfg = cfg.pseudo.clone();
    if let (Some(dir), None) = (out_dir, &pcfg.output_dir) {
        pcfg.output_dir = Some(dir.join("pseudo"));
    }
    let pseudo = if unlabeled.is_empty() {
        PseudoSet {
            dataset: Dataset::new(labeled.num_classes, vec![])?,
            coverage: vec![],
            overall_coverage: 0.0,
            ignored_pixels: 0,
            total_pixels: 0,
        }
    } else {
        generate_pseudo_set(&teacher.model, unlabeled, &pcfg)?
    };

    let combined = combine(labeled, &pseudo.dataset)?;
    let mut student = TrainState::from_config(SegNet::build(&cfg.spec, cfg.student.seed)?, &cfg.student);
    let student_report = train(&mut student, &combined, &cfg.student)?;

    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("teacher.ckpt"), &teacher)?;
        save_checkpoint(&dir.join("student.ckpt"), &student)?;
        teacher_report.write_csv(&dir.join("teacher_loss.csv"))?;
        student_report.write_csv(&dir.join("student_loss.csv"))?;
    }
    Ok(NoisyStudentOutcome {
        teacher: teacher.model,
        student: student.model,
        teacher_report,
        student_report,
        pseudo,
    })
}
