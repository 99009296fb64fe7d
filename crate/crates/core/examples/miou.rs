//! Confusion matrix, per-class IoU and mIoU on hand-made label maps.

use hrseg::data::{LabelMap, IGNORE};
use hrseg::eval::ConfusionMatrix;

fn main() -> hrseg::Result<()> {
    let gt = LabelMap::from_vec(2, 4, vec![0, 0, 1, 1, 2, 2, IGNORE, 1])?;
    let pred = LabelMap::from_vec(2, 4, vec![0, 1, 1, 1, 2, 0, 2, 1])?;
    let mut cm = ConfusionMatrix::new(4);
    cm.accumulate(&pred, &gt)?;
    for (c, iou) in cm.iou_per_class().iter().enumerate() {
        match iou {
            Some(v) => println!("class {c}: IoU {v:.4}"),
            None => println!("class {c}: absent from both maps, left out of the mean"),
        }
    }
    println!("mIoU {:.4}, pixel accuracy {:.4}", cm.miou()?, cm.pixel_accuracy()?);
    Ok(())
}
