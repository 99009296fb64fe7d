//! Teacher, pseudo labels and student on synthetic data, compared on a held-out set.
//!
//! `cargo run --release --example noisy_student -- [epochs] [out_dir]`

use std::path::PathBuf;

use hrseg::backbone::NetworkSpec;
use hrseg::data::{synth_generate, AugmentConfig};
use hrseg::eval::evaluate;
use hrseg::noisy_student::{noisy_student_train, NoisyStudentConfig, PseudoLabelConfig};
use hrseg::train::TrainConfig;

fn main() -> hrseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(40, |a| a.parse().expect("epochs"));
    let out = args.next().map(PathBuf::from);
    let labeled = synth_generate(0, 16, 64, 64, 3)?;
    let unlabeled = synth_generate(1, 64, 64, 64, 3)?;
    let held_out = synth_generate(2, 16, 64, 64, 3)?;
    let augment = AugmentConfig { crop: 64, scale_range: (0.75, 1.5), ..AugmentConfig::default() };
    let teacher = TrainConfig { batch_size: 4, epochs, augment, ..TrainConfig::default() };
    let student = TrainConfig { seed: 1, ..teacher.clone() };
    let cfg = NoisyStudentConfig { spec: NetworkSpec::tiny(3), teacher, student, pseudo: PseudoLabelConfig::default() };
    let outcome = noisy_student_train(&labeled, &unlabeled, &cfg, out.as_deref())?;
    println!("pseudo-label coverage at threshold 0.9: {:.4}", outcome.pseudo.overall_coverage);
    println!("teacher held-out mIoU {:.4}", evaluate(&outcome.teacher, &held_out)?.miou()?);
    println!("student held-out mIoU {:.4}", evaluate(&outcome.student, &held_out)?.miou()?);
    if let Some(dir) = out {
        println!("checkpoints, loss curves and pseudo labels written under {}", dir.display());
    }
    Ok(())
}
