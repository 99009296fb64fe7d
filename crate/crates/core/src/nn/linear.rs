use crate::error::{shape_err, Result};
use crate::nn::{param_seed, Ctx};
use crate::tensor::{gemm, Backward, Fill, GradSink, ParamId, ParamKind, ParamStore, Real, Tape, Tensor, Var};

struct LinearBackward {
    x: Var,
    w: Var,
    b: Var,
    n: usize,
    d: usize,
    k: usize,
}

impl<T: Real> Backward<T> for LinearBackward {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn backward(&self, _out: Var, g: &[T], sink: &mut GradSink<'_, T>) {
        let (xv, wv) = (sink.value(self.x), sink.value(self.w));
        if let Some(gx) = sink.grad_mut(self.x) {
            gemm(false, false, self.n, self.d, self.k, g, wv, gx, true);
        }
        if let Some(gw) = sink.grad_mut(self.w) {
            gemm(true, false, self.k, self.d, self.n, g, xv, gw, true);
        }
        if let Some(gb) = sink.grad_mut(self.b) {
            for row in g.chunks_exact(self.k) {
                gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
            }
        }
    }
}

/// `y = x · weightᵀ + bias` for `x [N, D]`, `weight [K, D]`, `bias [K]`.
pub fn linear<T: Real>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let (xs, ws, bs) = (tape.shape(x), tape.shape(weight), tape.shape(bias));
    if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || bs != [ws[0]] {
        return Err(shape_err!("linear: incompatible shapes x {xs:?}, weight {ws:?}, bias {bs:?}"));
    }
    let (n, d, k) = (xs[0], xs[1], ws[0]);
    let mut out = vec![T::zero(); n * k];
    gemm(false, true, n, k, d, tape.value(x), tape.value(weight), &mut out, false);
    let bv = tape.value(bias);
    for row in out.chunks_exact_mut(k) {
        row.iter_mut().zip(bv).for_each(|(a, &b)| *a += b);
    }
    Ok(tape.push_op(vec![n, k], out, &[x, weight, bias], LinearBackward { x, w: weight, b: bias, n, d, k }))
}

/// Fully connected layer initialized uniformly in `±1/sqrt(in_features)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, in_features: usize, out_features: usize, seed: u64) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let fill = Fill::Uniform { lo: -bound, hi: bound };
        let (wn, bn) = (format!("{name}.weight"), format!("{name}.bias"));
        let w = Tensor::new(&[out_features, in_features], fill, param_seed(seed, &wn)).expect("linear shape");
        let b = Tensor::new(&[out_features], fill, param_seed(seed, &bn)).expect("linear shape");
        Self {
            weight: store.add(wn, ParamKind::Trainable, w),
            bias: store.add(bn, ParamKind::Trainable, b),
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = cx.param(self.bias);
        linear(cx.tape, x, w, b)
    }
}
