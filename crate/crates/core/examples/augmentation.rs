//! Random scale, pad, crop, flip and color jitter on one synthetic sample.

use hrseg::data::{augment_segmentation, synth_generate, AugmentConfig, IGNORE};

fn main() -> hrseg::Result<()> {
    let ds = synth_generate(3, 1, 64, 64, 4)?;
    let cfg = AugmentConfig { crop: 96, ..AugmentConfig::default() };
    for seed in 0..5 {
        let s = augment_segmentation(ds.get(0), &cfg, seed);
        let label = s.label().expect("segmentation sample");
        let padded = label.ignored_count();
        let mean = s.image.data().iter().sum::<f32>() / s.image.numel() as f32;
        println!(
            "seed {seed}: {}x{} crop, {padded} padded pixels labeled {IGNORE}, mean intensity {mean:.3}",
            s.height(),
            s.width()
        );
    }
    Ok(())
}
