//! Overfits the desk-scale network on 16 synthetic images and reports train mIoU.
//!
//! `cargo run --release --example overfit_desk -- [epochs]`

use std::time::Instant;

use hrseg::backbone::NetworkSpec;
use hrseg::data::{synth_generate, AugmentConfig};
use hrseg::eval::evaluate;
use hrseg::seg_head::SegNet;
use hrseg::train::{train_with, TrainConfig, TrainState};

fn main() -> hrseg::Result<()> {
    let epochs = std::env::args().nth(1).map_or(300, |a| a.parse().expect("epochs"));
    let ds = synth_generate(0, 16, 64, 64, 4)?;
    let spec = NetworkSpec::desk(4);
    let cfg = TrainConfig { batch_size: 4, epochs, augment: AugmentConfig::identity(64), ..TrainConfig::default() };
    let mut state = TrainState::from_config(SegNet::build(&spec, 0)?, &cfg);
    let start = Instant::now();
    let report = train_with(&mut state, &ds, &cfg, |st, rep| {
        if st.epoch % 25 == 0 {
            let miou = evaluate(&st.model, &ds)?.miou()?;
            let loss = rep.losses.last().map_or(f64::NAN, |r| r.loss);
            println!("epoch {:>3} loss {loss:.4} train mIoU {miou:.4} ({:.0}s)", st.epoch, start.elapsed().as_secs_f64());
        }
        Ok(true)
    })?;
    let cm = evaluate(&state.model, &ds)?;
    println!("{} steps in {:.0}s", report.steps, start.elapsed().as_secs_f64());
    print!("{}", cm.to_csv()?);
    Ok(())
}
