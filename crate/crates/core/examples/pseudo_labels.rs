//! Confidence-thresholded pseudo labels from a briefly trained teacher.

use hrseg::backbone::NetworkSpec;
use hrseg::data::{synth_generate, AugmentConfig};
use hrseg::noisy_student::{generate_pseudo_set, PseudoLabelConfig};
use hrseg::seg_head::SegNet;
use hrseg::train::{train, TrainConfig, TrainState};

fn main() -> hrseg::Result<()> {
    let labeled = synth_generate(0, 8, 64, 64, 3)?;
    let unlabeled = synth_generate(1, 4, 64, 64, 3)?;
    let cfg = TrainConfig { batch_size: 4, epochs: 20, augment: AugmentConfig::identity(64), ..TrainConfig::default() };
    let mut teacher = TrainState::from_config(SegNet::build(&NetworkSpec::tiny(3), 0)?, &cfg);
    train(&mut teacher, &labeled, &cfg)?;
    for threshold in [0.0, 0.5, 0.9, 0.99] {
        let set = generate_pseudo_set(&teacher.model, &unlabeled, &PseudoLabelConfig { threshold, output_dir: None })?;
        println!(
            "threshold {threshold:<4}: coverage {:.4} ({} of {} pixels ignored)",
            set.overall_coverage, set.ignored_pixels, set.total_pixels
        );
    }
    Ok(())
}
