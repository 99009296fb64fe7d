//! Image classification with the backbone and a linear head under the step schedule.

use hrseg::backbone::{Classifier, NetworkSpec};
use hrseg::data::{synth_classification, AugmentConfig, Target};
use hrseg::eval::batch_of_one;
use hrseg::train::{train, TrainConfig, TrainState};

fn main() -> hrseg::Result<()> {
    let ds = synth_classification(0, 24, 64, 3)?;
    let augment = AugmentConfig { cls_resize_range: (64, 80), cls_crop: 64, ..AugmentConfig::default() };
    let cfg = TrainConfig { batch_size: 6, epochs: 12, augment, ..TrainConfig::classification() };
    let cfg = TrainConfig { lr_policy: hrseg::train::LrPolicy::Step { milestones: vec![6, 9], factor: 0.1 }, ..cfg };
    let mut state = TrainState::from_config(Classifier::build(&NetworkSpec::tiny(3), 0)?, &cfg);
    let report = train(&mut state, &ds, &cfg)?;
    let correct = ds
        .iter()
        .filter(|s| {
            let Target::Class(c) = s.target else { return false };
            state.model.predict(&batch_of_one(&s.image).expect("image")).expect("forward")[0] == c as usize
        })
        .count();
    let (first, last) = (report.losses.first().expect("losses"), report.losses.last().expect("losses"));
    println!("loss {:.4} -> {:.4}, train accuracy {correct}/{}", first.loss, last.loss, ds.len());
    Ok(())
}
