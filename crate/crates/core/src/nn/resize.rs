use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Backward, GradSink, Real, Tape, Var};

/// Interpolation taps along one axis: `(lower index, upper index, weight of upper)`.
///
/// Half-pixel centers: output `i` samples source coordinate `(i + 0.5) * in / out - 0.5`,
/// clamped to `[0, in - 1]`.
fn axis_taps<T: Real>(input: usize, output: usize) -> Vec<(usize, usize, T)> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, T::from_f64(src - lo as f64))
        })
        .collect()
}

fn resize_plane<T: Real>(
    src: &[T],
    w: usize,
    ty: &[(usize, usize, T)],
    tx: &[(usize, usize, T)],
    dst: &mut [T],
) {
    let ow = tx.len();
    for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
        let r0 = &src[y0 * w..(y0 + 1) * w];
        let r1 = &src[y1 * w..(y1 + 1) * w];
        let out = &mut dst[i * ow..(i + 1) * ow];
        for (o, &(x0, x1, fx)) in out.iter_mut().zip(tx) {
            // lerp form keeps constants exact
            let top = r0[x0] + fx * (r0[x1] - r0[x0]);
            let bot = r1[x0] + fx * (r1[x1] - r1[x0]);
            *o = top + fy * (bot - top);
        }
    }
}

/// Resizes `planes` contiguous `h×w` planes to `out_h×out_w`, off-tape.
pub fn resize_planes<T: Real>(data: &[T], planes: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<T> {
    assert_eq!(data.len(), planes * h * w, "resize_planes: data length");
    let ty = axis_taps::<T>(h, out_h);
    let tx = axis_taps::<T>(w, out_w);
    let mut out = vec![T::zero(); planes * out_h * out_w];
    for p in 0..planes {
        resize_plane(
            &data[p * h * w..(p + 1) * h * w],
            w,
            &ty,
            &tx,
            &mut out[p * out_h * out_w..(p + 1) * out_h * out_w],
        );
    }
    out
}

struct ResizeBackward<T> {
    x: Var,
    planes: usize,
    h: usize,
    w: usize,
    ty: Vec<(usize, usize, T)>,
    tx: Vec<(usize, usize, T)>,
}

impl<T: Real> Backward<T> for ResizeBackward<T> {
    fn name(&self) -> &'static str {
        "bilinear_resize"
    }

    fn backward(&self, _out: Var, g: &[T], sink: &mut GradSink<'_, T>) {
        let Some(gx) = sink.grad_mut(self.x) else { return };
        let (oh, ow) = (self.ty.len(), self.tx.len());
        for p in 0..self.planes {
            let gp = &g[p * oh * ow..(p + 1) * oh * ow];
            let dst = &mut gx[p * self.h * self.w..(p + 1) * self.h * self.w];
            for (i, &(y0, y1, fy)) in self.ty.iter().enumerate() {
                for (j, &(x0, x1, fx)) in self.tx.iter().enumerate() {
                    let v = gp[i * ow + j];
                    let top = v * (T::one() - fy);
                    let bot = v * fy;
                    dst[y0 * self.w + x0] += top * (T::one() - fx);
                    dst[y0 * self.w + x1] += top * fx;
                    dst[y1 * self.w + x0] += bot * (T::one() - fx);
                    dst[y1 * self.w + x1] += bot * fx;
                }
            }
        }
    }
}

/// Bilinear resize of `x [N, C, H, W]` to `[N, C, out_h, out_w]` (half-pixel centers).
pub fn bilinear_resize<T: Real>(tape: &mut Tape<T>, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
    let s = tape.shape(x);
    if s.len() != 4 {
        return Err(shape_err!("bilinear_resize expects [N, C, H, W], got {s:?}"));
    }
    if out_h == 0 || out_w == 0 {
        return Err(invalid!("bilinear_resize target size must be positive, got {out_h}x{out_w}"));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let ty = axis_taps::<T>(h, out_h);
    let tx = axis_taps::<T>(w, out_w);
    let xv = tape.value(x);
    let mut out = vec![T::zero(); n * c * out_h * out_w];
    for p in 0..n * c {
        resize_plane(
            &xv[p * h * w..(p + 1) * h * w],
            w,
            &ty,
            &tx,
            &mut out[p * out_h * out_w..(p + 1) * out_h * out_w],
        );
    }
    let op = ResizeBackward { x, planes: n * c, h, w, ty, tx };
    Ok(tape.push_op(vec![n, c, out_h, out_w], out, &[x], op))
}
