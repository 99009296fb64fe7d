use crate::error::{shape_err, Result};
use crate::tensor::{Backward, GradSink, Real, Tape, Var};

struct ConcatBackward {
    a: Var,
    b: Var,
    n: usize,
    a_block: usize,
    b_block: usize,
}

impl<T: Real> Backward<T> for ConcatBackward {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(&self, _out: Var, g: &[T], sink: &mut GradSink<'_, T>) {
        let stride = self.a_block + self.b_block;
        if let Some(ga) = sink.grad_mut(self.a) {
            for n in 0..self.n {
                let src = &g[n * stride..n * stride + self.a_block];
                ga[n * self.a_block..(n + 1) * self.a_block].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
        }
        if let Some(gb) = sink.grad_mut(self.b) {
            for n in 0..self.n {
                let src = &g[n * stride + self.a_block..(n + 1) * stride];
                gb[n * self.b_block..(n + 1) * self.b_block].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
        }
    }
}

/// Concatenates `a [N, Ca, H, W]` and `b [N, Cb, H, W]` along channels, `a` first.
pub fn concat_channels<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
        return Err(shape_err!("concat_channels needs matching N, H, W; got {sa:?} and {sb:?}"));
    }
    let (n, ca, cb, plane) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
    let shape = vec![n, ca + cb, sa[2], sa[3]];
    let (a_block, b_block) = (ca * plane, cb * plane);
    let (av, bv) = (tape.value(a), tape.value(b));
    let mut out = Vec::with_capacity(n * (a_block + b_block));
    for i in 0..n {
        out.extend_from_slice(&av[i * a_block..(i + 1) * a_block]);
        out.extend_from_slice(&bv[i * b_block..(i + 1) * b_block]);
    }
    Ok(tape.push_op(shape, out, &[a, b], ConcatBackward { a, b, n, a_block, b_block }))
}
