use crate::error::{shape_err, Result};
use crate::tensor::{Backward, GradSink, Real, Tape, Var};

struct PoolBackward {
    x: Var,
    plane: usize,
}

impl<T: Real> Backward<T> for PoolBackward {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }

    fn backward(&self, _out: Var, g: &[T], sink: &mut GradSink<'_, T>) {
        let scale = T::one() / T::from_f64(self.plane as f64);
        if let Some(gx) = sink.grad_mut(self.x) {
            for (block, &gv) in gx.chunks_exact_mut(self.plane).zip(g) {
                block.iter_mut().for_each(|d| *d += gv * scale);
            }
        }
    }
}

/// Spatial mean per channel: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    if s.len() != 4 {
        return Err(shape_err!("global_avg_pool expects [N, C, H, W], got {s:?}"));
    }
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let denom = T::from_f64(plane as f64);
    let out: Vec<T> = tape.value(x).chunks_exact(plane).map(|p| p.iter().copied().sum::<T>() / denom).collect();
    Ok(tape.push_op(vec![n, c], out, &[x], PoolBackward { x, plane }))
}
