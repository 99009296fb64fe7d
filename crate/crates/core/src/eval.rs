//! Confusion-matrix segmentation metrics.

use std::fmt::Write;

use crate::data::{Dataset, LabelMap, IGNORE};
use crate::error::{invalid, shape_err, Error, Result};
use crate::seg_head::SegNet;
use crate::tensor::Tensor;

/// `counts[g * C + p]` = pixels with ground truth `g` predicted as `p`; ignored pixels are skipped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(shape_err!("{classes} classes need {} counts, got {}", classes * classes, counts.len()));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(shape_err!(
                "prediction is {}x{} but ground truth is {}x{}",
                pred.width(),
                pred.height(),
                gt.width(),
                gt.height()
            ));
        }
        if let Some(p) = pred.data().iter().find(|&&p| p as usize >= self.classes) {
            return Err(invalid!("predicted class {p} out of range for {} classes", self.classes));
        }
        if let Some(g) = gt.data().iter().find(|&&g| g != IGNORE && g as usize >= self.classes) {
            return Err(invalid!("ground-truth class {g} out of range for {} classes", self.classes));
        }
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g != IGNORE {
                self.counts[g as usize * self.classes + p as usize] += 1;
            }
        }
        Ok(())
    }

    /// Entrywise sum.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(invalid!("cannot merge {}-class and {}-class matrices", self.classes, other.classes));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// `None` for classes absent from both ground truth and predictions.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..self.classes).map(|g| self.get(g, c)).sum();
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean IoU over classes with a defined IoU.
    pub fn miou(&self) -> Result<f64> {
        mean_defined(&self.iou_per_class())
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::InvalidArgument("pixel accuracy is undefined for an empty evaluation".into()));
        }
        let trace: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        Ok(trace as f64 / total as f64)
    }

    /// Rows `class_<i>,<iou|undefined>`, then `miou` and `pixel_accuracy`.
    pub fn to_csv(&self) -> Result<String> {
        let mut out = String::from("metric,value\n");
        for (c, iou) in self.iou_per_class().iter().enumerate() {
            match iou {
                Some(v) => writeln!(out, "class_{c},{v}").expect("string write"),
                None => writeln!(out, "class_{c},undefined").expect("string write"),
            }
        }
        writeln!(out, "miou,{}", self.miou()?).expect("string write");
        writeln!(out, "pixel_accuracy,{}", self.pixel_accuracy()?).expect("string write");
        Ok(out)
    }
}

/// Mean of the defined entries.
pub fn mean_defined(ious: &[Option<f64>]) -> Result<f64> {
    let defined: Vec<f64> = ious.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::InvalidArgument("mIoU is undefined: no class appears in the evaluation".into()));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// `[3, H, W]` image viewed as a `[1, 3, H, W]` batch.
pub fn batch_of_one(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(shape_err!("expected a [3, H, W] image, got {s:?}"));
    }
    image.reshape(&[1, s[0], s[1], s[2]])
}

/// Confusion matrix of `model` over a labelled dataset, one image at a time.
pub fn evaluate(model: &SegNet<f32>, ds: &Dataset) -> Result<ConfusionMatrix> {
    if ds.is_empty() {
        return Err(Error::Dataset("evaluation set is empty".into()));
    }
    let mut cm = ConfusionMatrix::new(model.spec.num_classes);
    for s in ds.iter() {
        let gt = s.label().ok_or_else(|| Error::Dataset(format!("sample {} has no label map", s.id)))?;
        let x = batch_of_one(&s.image)?;
        let pred = model.predict(&x)?.remove(0);
        cm.accumulate(&pred, gt)?;
    }
    Ok(cm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lm(data: &[u8]) -> LabelMap {
        LabelMap::from_vec(1, data.len(), data.to_vec()).unwrap()
    }

    fn hand_example() -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&lm(&[0, 1, 1]), &lm(&[0, 1, 0])).unwrap();
        cm
    }

    #[test]
    fn hand_counted_example() {
        let cm = hand_example();
        assert_eq!(cm, ConfusionMatrix::from_counts(2, vec![1, 1, 0, 1]).unwrap());
        assert_eq!(cm.iou_per_class(), [Some(0.5), Some(0.5)]);
        assert_eq!(cm.miou().unwrap(), 0.5);
        assert!((cm.pixel_accuracy().unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn edge_cases() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&lm(&[0, 1]), &lm(&[IGNORE, IGNORE])).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(cm.miou().is_err() && cm.pixel_accuracy().is_err());

        let diag = ConfusionMatrix::from_counts(3, vec![4, 0, 0, 0, 0, 0, 0, 0, 2]).unwrap();
        assert_eq!(diag.iou_per_class(), [Some(1.0), None, Some(1.0)]);
        assert_eq!(diag.miou().unwrap(), 1.0);
        assert_eq!(diag.pixel_accuracy().unwrap(), 1.0);

        assert_eq!(mean_defined(&[Some(0.8), None, None]).unwrap(), 0.8);
        let fp = ConfusionMatrix::from_counts(2, vec![4, 1, 0, 0]).unwrap();
        assert_eq!(fp.iou_per_class(), [Some(0.8), Some(0.0)]);
        assert_eq!(ConfusionMatrix::from_counts(2, vec![1; 4]).unwrap().pixel_accuracy().unwrap(), 0.5);

        assert!(cm.accumulate(&lm(&[3]), &lm(&[0])).is_err());
        assert!(cm.accumulate(&lm(&[0, 0]), &lm(&[0])).is_err());
    }

    #[test]
    fn csv_schema() {
        let csv = hand_example().to_csv().unwrap();
        assert_eq!(csv, "metric,value\nclass_0,0.5\nclass_1,0.5\nmiou,0.5\npixel_accuracy,0.6666666666666666\n");
        let csv = ConfusionMatrix::from_counts(2, vec![3, 0, 0, 0]).unwrap().to_csv().unwrap();
        assert!(csv.contains("class_1,undefined"));
    }

    proptest! {
        #[test]
        fn accumulation_is_additive(a in prop::collection::vec(0u8..3, 12), b in prop::collection::vec(0u8..3, 12), g in prop::collection::vec(prop::sample::select(vec![0u8, 1, 2, IGNORE]), 24)) {
            let mut split = ConfusionMatrix::new(3);
            split.accumulate(&lm(&a), &lm(&g[..12])).unwrap();
            split.accumulate(&lm(&b), &lm(&g[12..])).unwrap();
            let mut reversed = ConfusionMatrix::new(3);
            reversed.accumulate(&lm(&b), &lm(&g[12..])).unwrap();
            reversed.accumulate(&lm(&a), &lm(&g[..12])).unwrap();
            let mut joint = ConfusionMatrix::new(3);
            let ab: Vec<u8> = a.iter().chain(&b).copied().collect();
            joint.accumulate(&lm(&ab), &lm(&g)).unwrap();
            prop_assert_eq!(&split, &joint);
            prop_assert_eq!(&split, &reversed);
            for iou in split.iou_per_class().into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&iou));
            }
        }

        #[test]
        fn perfect_prediction_scores_one(g in prop::collection::vec(0u8..4, 1..40)) {
            let mut cm = ConfusionMatrix::new(4);
            cm.accumulate(&lm(&g), &lm(&g)).unwrap();
            prop_assert_eq!(cm.miou().unwrap(), 1.0);
        }
    }
}
