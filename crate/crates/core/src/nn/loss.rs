use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Backward, GradSink, Real, Tape, Var};

/// `(N, C, pixels per sample)` of a `[N, C]` or `[N, C, H, W]` score tensor.
fn score_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape.len() {
        2 => Ok((shape[0], shape[1], 1)),
        4 => Ok((shape[0], shape[1], shape[2] * shape[3])),
        _ => Err(shape_err!("expected [N, C] or [N, C, H, W] scores, got {shape:?}")),
    }
}

/// Stable per-pixel softmax over the channel axis.
fn softmax_into<T: Real>(x: &[T], n: usize, c: usize, plane: usize, out: &mut [T]) {
    let mut buf = vec![T::zero(); c];
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut m = T::neg_infinity();
            for ch in 0..c {
                m = m.max(x[base + ch * plane + p]);
            }
            let mut z = T::zero();
            for ch in 0..c {
                let e = (x[base + ch * plane + p] - m).exp();
                buf[ch] = e;
                z += e;
            }
            for ch in 0..c {
                out[base + ch * plane + p] = buf[ch] / z;
            }
        }
    }
}

struct SoftmaxBackward {
    x: Var,
    n: usize,
    c: usize,
    plane: usize,
}

impl<T: Real> Backward<T> for SoftmaxBackward {
    fn name(&self) -> &'static str {
        "softmax_channels"
    }

    fn backward(&self, out: Var, g: &[T], sink: &mut GradSink<'_, T>) {
        let s = sink.value(out);
        let Some(gx) = sink.grad_mut(self.x) else { return };
        for b in 0..self.n {
            let base = b * self.c * self.plane;
            for p in 0..self.plane {
                let dot: T = (0..self.c).map(|ch| g[base + ch * self.plane + p] * s[base + ch * self.plane + p]).sum();
                for ch in 0..self.c {
                    let i = base + ch * self.plane + p;
                    gx[i] += s[i] * (g[i] - dot);
                }
            }
        }
    }
}

/// Per-pixel softmax across channels of `[N, C, H, W]` (or `[N, C]`) scores.
pub fn softmax_channels<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let (n, c, plane) = score_dims(tape.shape(x))?;
    let mut out = vec![T::zero(); tape.value(x).len()];
    softmax_into(tape.value(x), n, c, plane, &mut out);
    let shape = tape.shape(x).to_vec();
    Ok(tape.push_op(shape, out, &[x], SoftmaxBackward { x, n, c, plane }))
}

struct CrossEntropyBackward<T> {
    logits: Var,
    probs: Vec<T>,
    labels: Vec<u8>,
    ignore: u8,
    n: usize,
    c: usize,
    plane: usize,
    count: usize,
}

impl<T: Real> Backward<T> for CrossEntropyBackward<T> {
    fn name(&self) -> &'static str {
        "cross_entropy_ignore"
    }

    fn backward(&self, _out: Var, g: &[T], sink: &mut GradSink<'_, T>) {
        let Some(gx) = sink.grad_mut(self.logits) else { return };
        let scale = g[0] / T::from_f64(self.count as f64);
        for b in 0..self.n {
            let base = b * self.c * self.plane;
            for p in 0..self.plane {
                let label = self.labels[b * self.plane + p];
                if label == self.ignore {
                    continue;
                }
                for ch in 0..self.c {
                    let i = base + ch * self.plane + p;
                    let target = if ch == label as usize { T::one() } else { T::zero() };
                    gx[i] += scale * (self.probs[i] - target);
                }
            }
        }
    }
}

/// Mean negative log-likelihood over pixels whose label differs from `ignore`.
///
/// `labels` holds one class index per pixel in `[N, H, W]` order. Errors when every
/// pixel is ignored.
pub fn cross_entropy_ignore<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[u8], ignore: u8) -> Result<Var> {
    let (n, c, plane) = score_dims(tape.shape(logits))?;
    if labels.len() != n * plane {
        return Err(shape_err!(
            "cross_entropy: {} labels for logits of shape {:?}",
            labels.len(),
            tape.shape(logits)
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l != ignore && l as usize >= c) {
        return Err(invalid!("label {bad} out of range for {c} classes"));
    }
    let count = labels.iter().filter(|&&l| l != ignore).count();
    if count == 0 {
        return Err(invalid!("cross_entropy: every pixel carries the ignore label"));
    }
    let x = tape.value(logits);
    let mut probs = vec![T::zero(); x.len()];
    softmax_into(x, n, c, plane, &mut probs);
    let mut total = 0.0f64;
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let label = labels[b * plane + p];
            if label == ignore {
                continue;
            }
            let m = (0..c).map(|ch| x[base + ch * plane + p].as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).map(|ch| (x[base + ch * plane + p].as_f64() - m).exp()).sum();
            total += m + z.ln() - x[base + label as usize * plane + p].as_f64();
        }
    }
    let loss = T::from_f64(total / count as f64);
    let op = CrossEntropyBackward { logits, probs, labels: labels.to_vec(), ignore, n, c, plane, count };
    Ok(tape.push_op(vec![1], vec![loss], &[logits], op))
}
