use crate::error::{shape_err, Result};
use crate::nn::{BatchNorm2d, Conv2d, Ctx};
use crate::tensor::{ops, ParamStore, Real, Var};

/// Basic two-convolution residual block.
///
/// `relu(bn2(conv2(relu(bn1(conv1(x))))) + shortcut(x))`, where the shortcut is the
/// identity or, when stride or width change, a 1×1 strided projection.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub projection: Option<Conv2d>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl ResidualBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        seed: u64,
    ) -> Self {
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), in_channels, out_channels, 3, stride, 1, false, seed);
        let bn1 = BatchNorm2d::new(store, &format!("{name}.bn1"), out_channels);
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), out_channels, out_channels, 3, 1, 1, false, seed);
        let bn2 = BatchNorm2d::new(store, &format!("{name}.bn2"), out_channels);
        let projection = (stride != 1 || in_channels != out_channels).then(|| {
            Conv2d::new(store, &format!("{name}.proj"), in_channels, out_channels, 1, stride, 0, false, seed)
        });
        Self { conv1, bn1, conv2, bn2, projection, in_channels, out_channels, stride }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(cx, x)?;
        let h = self.bn1.forward(cx, h)?;
        let h = ops::relu(cx.tape, h);
        let h = self.conv2.forward(cx, h)?;
        let h = self.bn2.forward(cx, h)?;
        let shortcut = match &self.projection {
            Some(p) => p.forward(cx, x)?,
            None => x,
        };
        if cx.tape.shape(h) != cx.tape.shape(shortcut) {
            return Err(shape_err!(
                "residual shortcut {:?} does not match main path {:?}",
                cx.tape.shape(shortcut),
                cx.tape.shape(h)
            ));
        }
        let sum = ops::add(cx.tape, h, shortcut)?;
        Ok(ops::relu(cx.tape, sum))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Fill, GradCheckOptions, Tape, Tensor};

    #[test]
    fn zero_main_path_reduces_to_relu() {
        let mut store = ParamStore::<f64>::new();
        let block = ResidualBlock::new(&mut store, "b", 3, 3, 1, 0);
        assert!(block.projection.is_none());
        for id in [block.conv1.weight, block.conv2.weight] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::<f64>::new(&[1, 3, 5, 5], Fill::Uniform { lo: -1.0, hi: 1.0 }, 1).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let y = block.forward(&mut Ctx::eval(&mut tape, &store), xv).unwrap();
        let want: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
        assert_eq!(tape.value(y), &want[..]);
    }

    #[test]
    fn downsampling_block_shape() {
        let mut store = ParamStore::<f32>::new();
        let block = ResidualBlock::new(&mut store, "b", 200, 320, 2, 0);
        assert!(block.projection.is_some());
        let mut tape = Tape::new();
        let xv = tape.constant(&Tensor::zeros(&[1, 200, 8, 8]));
        let y = block.forward(&mut Ctx::eval(&mut tape, &store), xv).unwrap();
        assert_eq!(tape.shape(y), &[1, 320, 4, 4]);
    }

    #[test]
    fn block_input_gradient_matches_finite_differences() {
        for (cin, cout, stride) in [(3, 3, 1), (2, 4, 2)] {
            let mut store = ParamStore::<f64>::new();
            let block = ResidualBlock::new(&mut store, "b", cin, cout, stride, 3);
            let x = Tensor::<f64>::new(&[2, cin, 6, 6], Fill::Uniform { lo: 0.1, hi: 1.0 }, 4).unwrap();
            let r = grad_check(
                |t, xv| {
                    let mut s = store.clone();
                    let y = block.forward(&mut Ctx::train(t, &mut s), xv)?;
                    let sq = ops::mul(t, y, y)?;
                    Ok(ops::sum(t, sq))
                },
                &x,
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(r.passed, "{cin}->{cout} stride {stride}: {r:?}");
            assert!(r.checked > 0);
        }
    }
}
