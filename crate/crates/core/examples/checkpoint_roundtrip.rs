//! Saves a briefly trained model with its optimizer state and restores it.

use hrseg::backbone::NetworkSpec;
use hrseg::data::{synth_generate, AugmentConfig};
use hrseg::seg_head::SegNet;
use hrseg::train::{load_checkpoint, save_checkpoint, train, Checkpoint, TrainConfig, TrainState};

fn main() -> hrseg::Result<()> {
    let ds = synth_generate(0, 4, 64, 64, 3)?;
    let cfg = TrainConfig { batch_size: 2, epochs: 2, augment: AugmentConfig::identity(64), ..TrainConfig::default() };
    let mut state = TrainState::from_config(SegNet::build(&NetworkSpec::tiny(3), 0)?, &cfg);
    train(&mut state, &ds, &cfg)?;

    let dir = std::env::temp_dir().join("hrseg-checkpoint");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("model.ckpt");
    save_checkpoint(&path, &state)?;
    let restored: TrainState<SegNet<f32>> = load_checkpoint(&path, cfg.momentum, cfg.weight_decay)?;
    let image = hrseg::eval::batch_of_one(&ds.get(0).image)?;
    assert_eq!(state.model.predict(&image)?, restored.model.predict(&image)?);

    let again = dir.join("again.ckpt");
    save_checkpoint(&again, &restored)?;
    let (a, b) = (std::fs::read(&path)?, std::fs::read(&again)?);
    let ck = Checkpoint::read(&path)?;
    println!("{} tensors, {} bytes, epoch {}, iteration {}", ck.tensors.len(), a.len(), restored.epoch, restored.iteration);
    println!("predictions identical, re-saved file identical: {}", a == b);
    Ok(())
}
