//! Feature pyramid and logit shapes of the tiny network for several input sizes.

use hrseg::backbone::NetworkSpec;
use hrseg::seg_head::SegNet;
use hrseg::tensor::{Fill, Tape, Tensor};

fn main() -> hrseg::Result<()> {
    let net = SegNet::<f32>::build(&NetworkSpec::tiny(3), 0)?;
    for (h, w) in [(32, 32), (64, 96), (128, 64)] {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(&[1, 3, h, w], Fill::Uniform { lo: 0.0, hi: 1.0 }, 0)?);
        let pyramid = net.backbone.forward(&mut hrseg::nn::Ctx::eval(&mut tape, &net.store), x)?;
        println!("input {h}x{w}");
        for (s, &m) in pyramid.maps.iter().enumerate() {
            println!("  scale {} {:?}", s + 1, tape.shape(m));
        }
        let out = net.forward_eval(&mut tape, x)?;
        println!("  logits  {:?}", tape.shape(out.final_logits));
    }
    match net.logits(&Tensor::zeros(&[1, 3, 50, 64])) {
        Err(e) => println!("50x64 rejected: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
