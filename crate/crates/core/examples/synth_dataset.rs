//! Generates a synthetic segmentation set, writes it as PNGs and reads it back.
//!
//! `cargo run --example synth_dataset -- [out_dir]`

use std::path::PathBuf;

use hrseg::data::{load_dataset, synth_generate};

fn main() -> hrseg::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("hrseg-synth"), PathBuf::from);
    let ds = synth_generate(1, 8, 64, 96, 4)?;
    ds.save(&out)?;
    let back = load_dataset(&out, 4)?;
    assert_eq!(back, ds);
    for s in back.iter() {
        let label = s.label().expect("segmentation sample");
        let mut hist = [0usize; 4];
        label.data().iter().for_each(|&c| hist[c as usize] += 1);
        println!("{} {}x{} pixels per class {hist:?}", s.id, s.height(), s.width());
    }
    println!("wrote and reloaded {} samples under {}", back.len(), out.display());
    Ok(())
}
