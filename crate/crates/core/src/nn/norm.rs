use crate::error::{invalid, shape_err, Result};
use crate::nn::Ctx;
use crate::tensor::{Backward, GradSink, ParamId, ParamKind, ParamStore, Real, Tape, Tensor, Var};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel statistics of one training batch.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, used for the running estimate.
    pub var: Vec<T>,
}

struct Dims {
    n: usize,
    c: usize,
    plane: usize,
}

fn dims(shape: &[usize]) -> Result<Dims> {
    if shape.len() < 2 {
        return Err(shape_err!("batch_norm expects [N, C, ...], got {shape:?}"));
    }
    Ok(Dims { n: shape[0], c: shape[1], plane: shape[2..].iter().product() })
}

fn check_affine<T: Real>(tape: &Tape<T>, gamma: Var, beta: Var, c: usize) -> Result<()> {
    if tape.shape(gamma) != [c] || tape.shape(beta) != [c] {
        return Err(shape_err!(
            "batch_norm affine params {:?}/{:?} do not match {c} channels",
            tape.shape(gamma),
            tape.shape(beta)
        ));
    }
    Ok(())
}

struct BnBackward<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    mean: Vec<T>,
    inv_std: Vec<T>,
    n: usize,
    c: usize,
    plane: usize,
    /// Statistics came from the batch itself, so they depend on `x`.
    batch_stats: bool,
}

impl<T: Real> BnBackward<T> {
    fn blocks(&self, ch: usize) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        (0..self.n).map(move |b| {
            let start = (b * self.c + ch) * self.plane;
            start..start + self.plane
        })
    }
}

impl<T: Real> Backward<T> for BnBackward<T> {
    fn name(&self) -> &'static str {
        if self.batch_stats {
            "batch_norm_train"
        } else {
            "batch_norm_eval"
        }
    }

    fn backward(&self, _out: Var, dy: &[T], sink: &mut GradSink<'_, T>) {
        let xv = sink.value(self.x);
        let gv = sink.value(self.gamma);
        let m = T::from_f64((self.n * self.plane) as f64);
        let mut sum_dy = vec![T::zero(); self.c];
        let mut sum_dy_xhat = vec![T::zero(); self.c];
        for ch in 0..self.c {
            let (mu, is) = (self.mean[ch], self.inv_std[ch]);
            for r in self.blocks(ch) {
                for i in r {
                    sum_dy[ch] += dy[i];
                    sum_dy_xhat[ch] += dy[i] * (xv[i] - mu) * is;
                }
            }
        }
        if let Some(gg) = sink.grad_mut(self.gamma) {
            gg.iter_mut().zip(&sum_dy_xhat).for_each(|(a, &b)| *a += b);
        }
        if let Some(gb) = sink.grad_mut(self.beta) {
            gb.iter_mut().zip(&sum_dy).for_each(|(a, &b)| *a += b);
        }
        let ranges: Vec<(usize, Vec<std::ops::Range<usize>>)> =
            (0..self.c).map(|ch| (ch, self.blocks(ch).collect())).collect();
        if let Some(gx) = sink.grad_mut(self.x) {
            for (ch, blocks) in ranges {
                let (mu, is) = (self.mean[ch], self.inv_std[ch]);
                let scale = gv[ch] * is;
                for r in blocks {
                    for i in r {
                        if self.batch_stats {
                            let xhat = (xv[i] - mu) * is;
                            gx[i] += scale * (dy[i] - (sum_dy[ch] + xhat * sum_dy_xhat[ch]) / m);
                        } else {
                            gx[i] += scale * dy[i];
                        }
                    }
                }
            }
        }
    }
}

fn normalize<T: Real>(xv: &[T], gv: &[T], bv: &[T], mean: &[T], inv_std: &[T], d: &Dims) -> Vec<T> {
    let mut out = vec![T::zero(); xv.len()];
    for b in 0..d.n {
        for ch in 0..d.c {
            let start = (b * d.c + ch) * d.plane;
            let (mu, is, g, be) = (mean[ch], inv_std[ch], gv[ch], bv[ch]);
            for i in start..start + d.plane {
                out[i] = g * (xv[i] - mu) * is + be;
            }
        }
    }
    out
}

/// Training-mode batch normalization over `(N, spatial)` per channel.
///
/// Returns the output and the batch statistics for updating running estimates.
pub fn batch_norm_train<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> Result<(Var, BatchStats<T>)> {
    let d = dims(tape.shape(x))?;
    check_affine(tape, gamma, beta, d.c)?;
    let count = d.n * d.plane;
    if count < 2 {
        return Err(invalid!(
            "training-mode batch_norm needs at least 2 values per channel, got N*H*W = {count}"
        ));
    }
    let xv = tape.value(x);
    let mut mean = vec![T::zero(); d.c];
    let mut var = vec![T::zero(); d.c];
    for ch in 0..d.c {
        let mut s = 0.0f64;
        for b in 0..d.n {
            let start = (b * d.c + ch) * d.plane;
            s += xv[start..start + d.plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mu = s / count as f64;
        let mut ss = 0.0f64;
        for b in 0..d.n {
            let start = (b * d.c + ch) * d.plane;
            ss += xv[start..start + d.plane].iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>();
        }
        mean[ch] = T::from_f64(mu);
        var[ch] = T::from_f64(ss / count as f64);
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::from_f64(eps)).sqrt()).collect();
    let out = normalize(xv, tape.value(gamma), tape.value(beta), &mean, &inv_std, &d);
    let unbiased = T::from_f64(count as f64 / (count - 1) as f64);
    let stats = BatchStats { mean: mean.clone(), var: var.iter().map(|&v| v * unbiased).collect() };
    let shape = tape.shape(x).to_vec();
    let op = BnBackward { x, gamma, beta, mean, inv_std, n: d.n, c: d.c, plane: d.plane, batch_stats: true };
    Ok((tape.push_op(shape, out, &[x, gamma, beta], op), stats))
}

/// Evaluation-mode batch normalization with fixed statistics.
pub fn batch_norm_eval<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    running_mean: &[T],
    running_var: &[T],
    eps: f64,
) -> Result<Var> {
    let d = dims(tape.shape(x))?;
    check_affine(tape, gamma, beta, d.c)?;
    if running_mean.len() != d.c || running_var.len() != d.c {
        return Err(shape_err!("batch_norm running statistics do not match {} channels", d.c));
    }
    let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + T::from_f64(eps)).sqrt()).collect();
    let out = normalize(tape.value(x), tape.value(gamma), tape.value(beta), running_mean, &inv_std, &d);
    let shape = tape.shape(x).to_vec();
    let op = BnBackward {
        x,
        gamma,
        beta,
        mean: running_mean.to_vec(),
        inv_std,
        n: d.n,
        c: d.c,
        plane: d.plane,
        batch_stats: false,
    };
    Ok(tape.push_op(shape, out, &[x, gamma, beta], op))
}

/// Batch normalization layer; gamma=1, beta=0, running mean 0 and variance 1 at init.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let ones = || Tensor::from_vec(&[channels], vec![T::one(); channels]).expect("bn shape");
        Self {
            gamma: store.add(format!("{name}.gamma"), ParamKind::Trainable, ones()),
            beta: store.add(format!("{name}.beta"), ParamKind::Trainable, Tensor::zeros(&[channels])),
            running_mean: store.add(format!("{name}.running_mean"), ParamKind::Buffer, Tensor::zeros(&[channels])),
            running_var: store.add(format!("{name}.running_var"), ParamKind::Buffer, ones()),
            channels,
            momentum: BN_MOMENTUM,
            eps: BN_EPSILON,
        }
    }

    /// Batch statistics (and a running-stat update) in training mode, running statistics otherwise.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = cx.param(self.gamma);
        let beta = cx.param(self.beta);
        if cx.is_train() {
            let (y, stats) = batch_norm_train(cx.tape, x, gamma, beta, self.eps)?;
            let m = T::from_f64(self.momentum);
            let keep = T::one() - m;
            let store = cx.store_mut().expect("train context");
            let rm = store.get_mut(self.running_mean).data_mut();
            rm.iter_mut().zip(&stats.mean).for_each(|(r, &b)| *r = keep * *r + m * b);
            let rv = store.get_mut(self.running_var).data_mut();
            rv.iter_mut().zip(&stats.var).for_each(|(r, &b)| *r = keep * *r + m * b);
            Ok(y)
        } else {
            let store = cx.store();
            let rm = store.get(self.running_mean).data().to_vec();
            let rv = store.get(self.running_var).data().to_vec();
            batch_norm_eval(cx.tape, x, gamma, beta, &rm, &rv, self.eps)
        }
    }
}
