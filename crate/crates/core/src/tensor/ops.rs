//! Elementwise arithmetic, reductions and piecewise-linear activations.

use super::{Backward, GradSink, Real, Tape, Var};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// How the right operand lines up with the left one.
#[derive(Clone, Copy, Debug)]
enum Layout {
    Same,
    /// `b` has shape `[C]`; `a` has `C` on axis 1 and `inner` values per channel block.
    PerChannel { channels: usize, inner: usize },
}

fn layout(a: &[usize], b: &[usize]) -> Result<Layout> {
    if a == b {
        return Ok(Layout::Same);
    }
    if b.len() == 1 && a.len() >= 2 && a[1] == b[0] {
        return Ok(Layout::PerChannel { channels: b[0], inner: a[2..].iter().product() });
    }
    Err(shape_err!("cannot combine shapes {a:?} and {b:?}"))
}

/// Channel index of each element of `a` under a per-channel layout.
fn for_each_channel(len: usize, channels: usize, inner: usize, mut f: impl FnMut(usize, usize)) {
    debug_assert_eq!(len % (channels * inner), 0);
    for i in 0..len {
        f(i, (i / inner) % channels);
    }
}

struct Binary {
    op: BinaryOp,
    a: Var,
    b: Var,
    layout: Layout,
}

impl<T: Real> Backward<T> for Binary {
    fn name(&self) -> &'static str {
        match self.op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        }
    }

    fn backward(&self, _out: Var, g: &[T], sink: &mut GradSink<'_, T>) {
        let av = sink.value(self.a);
        let bv = sink.value(self.b);
        match self.layout {
            Layout::Same => {
                if let Some(ga) = sink.grad_mut(self.a) {
                    match self.op {
                        BinaryOp::Add | BinaryOp::Sub => ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y),
                        BinaryOp::Mul => {
                            for i in 0..g.len() {
                                ga[i] += g[i] * bv[i];
                            }
                        }
                    }
                }
                if let Some(gb) = sink.grad_mut(self.b) {
                    match self.op {
                        BinaryOp::Add => gb.iter_mut().zip(g).for_each(|(x, &y)| *x += y),
                        BinaryOp::Sub => gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y),
                        BinaryOp::Mul => {
                            for i in 0..g.len() {
                                gb[i] += g[i] * av[i];
                            }
                        }
                    }
                }
            }
            Layout::PerChannel { channels, inner } => {
                if let Some(ga) = sink.grad_mut(self.a) {
                    match self.op {
                        BinaryOp::Add | BinaryOp::Sub => ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y),
                        BinaryOp::Mul => for_each_channel(g.len(), channels, inner, |i, c| {
                            ga[i] += g[i] * bv[c];
                        }),
                    }
                }
                if let Some(gb) = sink.grad_mut(self.b) {
                    for_each_channel(g.len(), channels, inner, |i, c| match self.op {
                        BinaryOp::Add => gb[c] += g[i],
                        BinaryOp::Sub => gb[c] -= g[i],
                        BinaryOp::Mul => gb[c] += g[i] * av[i],
                    });
                }
            }
        }
    }
}

/// `a (op) b`, where `b` has `a`'s shape or is a per-channel vector `[C]`.
pub fn elementwise<T: Real>(tape: &mut Tape<T>, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
    let layout = layout(tape.shape(a), tape.shape(b))?;
    let av = tape.value(a);
    let bv = tape.value(b);
    let apply = |x: T, y: T| match op {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
    };
    let out: Vec<T> = match layout {
        Layout::Same => av.iter().zip(bv).map(|(&x, &y)| apply(x, y)).collect(),
        Layout::PerChannel { channels, inner } => {
            let mut out = Vec::with_capacity(av.len());
            for_each_channel(av.len(), channels, inner, |i, c| out.push(apply(av[i], bv[c])));
            out
        }
    };
    let shape = tape.shape(a).to_vec();
    Ok(tape.push_op(shape, out, &[a, b], Binary { op, a, b, layout }))
}

pub fn add<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    elementwise(tape, BinaryOp::Add, a, b)
}

pub fn sub<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    elementwise(tape, BinaryOp::Sub, a, b)
}

pub fn mul<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    elementwise(tape, BinaryOp::Mul, a, b)
}

struct Scale<T> {
    x: Var,
    factor: T,
}

impl<T: Real> Backward<T> for Scale<T> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, _out: Var, g: &[T], sink: &mut GradSink<'_, T>) {
        if let Some(gx) = sink.grad_mut(self.x) {
            gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b * self.factor);
        }
    }
}

pub fn scale<T: Real>(tape: &mut Tape<T>, x: Var, factor: T) -> Var {
    let out = tape.value(x).iter().map(|&v| v * factor).collect();
    let shape = tape.shape(x).to_vec();
    tape.push_op(shape, out, &[x], Scale { x, factor })
}

struct Reduce<T> {
    x: Var,
    factor: T,
    name: &'static str,
}

impl<T: Real> Backward<T> for Reduce<T> {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, _out: Var, g: &[T], sink: &mut GradSink<'_, T>) {
        let d = g[0] * self.factor;
        if let Some(gx) = sink.grad_mut(self.x) {
            gx.iter_mut().for_each(|a| *a += d);
        }
    }
}

/// Sum of all elements, shape `[1]`.
pub fn sum<T: Real>(tape: &mut Tape<T>, x: Var) -> Var {
    let s = tape.value(x).iter().copied().sum();
    tape.push_op(vec![1], vec![s], &[x], Reduce { x, factor: T::one(), name: "sum" })
}

/// Mean of all elements, shape `[1]`.
pub fn mean<T: Real>(tape: &mut Tape<T>, x: Var) -> Var {
    let n = T::from_f64(tape.value(x).len() as f64);
    let s: T = tape.value(x).iter().copied().sum();
    tape.push_op(vec![1], vec![s / n], &[x], Reduce { x, factor: T::one() / n, name: "mean" })
}

struct Relu {
    x: Var,
}

impl<T: Real> Backward<T> for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(&self, _out: Var, g: &[T], sink: &mut GradSink<'_, T>) {
        let xv = sink.value(self.x);
        if let Some(gx) = sink.grad_mut(self.x) {
            for i in 0..g.len() {
                if xv[i] > T::zero() {
                    gx[i] += g[i];
                }
            }
        }
    }
}

/// `max(0, x)`; the gradient at exactly zero is zero.
pub fn relu<T: Real>(tape: &mut Tape<T>, x: Var) -> Var {
    let xv = tape.value(x);
    let out: Vec<T> = xv.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    let shape = tape.shape(x).to_vec();
    let v = tape.push_op(shape, out, &[x], Relu { x });
    let mask: Vec<bool> = tape.value(x).iter().map(|&v| v > T::zero()).collect();
    tape.note_kinks(mask.into_iter());
    v
}

struct Abs {
    x: Var,
}

impl<T: Real> Backward<T> for Abs {
    fn name(&self) -> &'static str {
        "abs"
    }

    fn backward(&self, _out: Var, g: &[T], sink: &mut GradSink<'_, T>) {
        let xv = sink.value(self.x);
        if let Some(gx) = sink.grad_mut(self.x) {
            for i in 0..g.len() {
                if xv[i] > T::zero() {
                    gx[i] += g[i];
                } else if xv[i] < T::zero() {
                    gx[i] -= g[i];
                }
            }
        }
    }
}

pub fn abs<T: Real>(tape: &mut Tape<T>, x: Var) -> Var {
    let out = tape.value(x).iter().map(|v| v.abs()).collect();
    let shape = tape.shape(x).to_vec();
    let v = tape.push_op(shape, out, &[x], Abs { x });
    let mask: Vec<bool> = tape.value(x).iter().map(|&v| v > T::zero()).collect();
    tape.note_kinks(mask.into_iter());
    v
}
