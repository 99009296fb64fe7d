use crate::error::{shape_err, Result};
use crate::nn::{param_seed, Ctx};
use crate::tensor::{gemm, Backward, Fill, GradSink, ParamId, ParamKind, ParamStore, Real, Tape, Tensor, Var};

/// Output length of a convolution along one axis.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || input + 2 * padding < kernel {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn in_sample(&self) -> usize {
        self.cin * self.h * self.w
    }

    /// 1×1 stride-1 unpadded convolutions read the input directly as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `[lo, hi)` whose input column `ox*stride + kx - pad` is in bounds.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let off = kx as isize - self.pad as isize;
        let s = self.stride as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let last = self.w as isize - 1 - off;
        let hi = if last < 0 { 0 } else { last / s + 1 };
        let wo = self.wo as isize;
        let lo = lo.min(wo);
        (lo as usize, hi.min(wo).max(lo) as usize)
    }
}

fn im2col<T: Real>(x: &[T], g: &Geom, cols: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.cin {
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * plane;
                let (lo, hi) = g.valid_cols(kx);
                for oy in 0..g.ho {
                    let dst = &mut cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    let ix0 = (lo * g.stride + kx) - g.pad;
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&src_row[ix0..ix0 + (hi - lo)]);
                    } else {
                        for (j, d) in dst[lo..hi].iter_mut().enumerate() {
                            *d = src_row[ix0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &Geom, dx: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.cin {
        let dst = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((ci * g.k + ky) * g.k + kx) * plane;
                let (lo, hi) = g.valid_cols(kx);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let ix0 = (lo * g.stride + kx) - g.pad;
                    for (j, &v) in src[lo..hi].iter().enumerate() {
                        dst_row[ix0 + j * g.stride] += v;
                    }
                }
            }
        }
    }
}

struct Conv2dBackward {
    x: Var,
    w: Var,
    b: Option<Var>,
    g: Geom,
}

impl<T: Real> Backward<T> for Conv2dBackward {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, _out: Var, dy: &[T], sink: &mut GradSink<'_, T>) {
        let g = self.g;
        let xv = sink.value(self.x);
        let wv = sink.value(self.w);
        let out_sample = g.cout * g.out_plane();
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.patch() * g.out_plane()] };

        if let Some(gw) = sink.grad_mut(self.w) {
            for n in 0..g.n {
                let xn = &xv[n * g.in_sample()..(n + 1) * g.in_sample()];
                let dyn_ = &dy[n * out_sample..(n + 1) * out_sample];
                let c: &[T] = if g.is_pointwise() {
                    xn
                } else {
                    im2col(xn, &g, &mut cols);
                    &cols
                };
                gemm(false, true, g.cout, g.patch(), g.out_plane(), dyn_, c, gw, true);
            }
        }
        if let Some(b) = self.b {
            if let Some(gb) = sink.grad_mut(b) {
                for n in 0..g.n {
                    for co in 0..g.cout {
                        let start = n * out_sample + co * g.out_plane();
                        gb[co] += dy[start..start + g.out_plane()].iter().copied().sum::<T>();
                    }
                }
            }
        }
        if let Some(gx) = sink.grad_mut(self.x) {
            for n in 0..g.n {
                let dyn_ = &dy[n * out_sample..(n + 1) * out_sample];
                let gxn = &mut gx[n * g.in_sample()..(n + 1) * g.in_sample()];
                if g.is_pointwise() {
                    gemm(true, false, g.patch(), g.out_plane(), g.cout, wv, dyn_, gxn, true);
                } else {
                    gemm(true, false, g.patch(), g.out_plane(), g.cout, wv, dyn_, &mut cols, false);
                    col2im(&cols, &g, gxn);
                }
            }
        }
    }
}

/// 2-D cross-correlation of `x [N, C_in, H, W]` with `w [C_out, C_in, k, k]`.
pub fn conv2d<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let xs = tape.shape(x);
    let ws = tape.shape(w);
    if xs.len() != 4 || ws.len() != 4 {
        return Err(shape_err!("conv2d expects rank-4 input and weight, got {xs:?} and {ws:?}"));
    }
    if ws[2] != ws[3] {
        return Err(shape_err!("conv2d kernel must be square, got {ws:?}"));
    }
    if xs[1] != ws[1] {
        return Err(shape_err!("conv2d channel mismatch: input has {} channels, weight expects {}", xs[1], ws[1]));
    }
    let k = ws[2];
    let (Some(ho), Some(wo)) =
        (conv_output_size(xs[2], k, stride, padding), conv_output_size(xs[3], k, stride, padding))
    else {
        return Err(shape_err!(
            "conv2d kernel {k} (stride {stride}, padding {padding}) does not fit input {}x{}",
            xs[2],
            xs[3]
        ));
    };
    let g = Geom { n: xs[0], cin: xs[1], h: xs[2], w: xs[3], cout: ws[0], k, stride, pad: padding, ho, wo };
    if let Some(b) = b {
        if tape.shape(b) != [g.cout] {
            return Err(shape_err!("conv2d bias shape {:?}, expected [{}]", tape.shape(b), g.cout));
        }
    }

    let xv = tape.value(x);
    let wv = tape.value(w);
    let out_sample = g.cout * g.out_plane();
    let mut out = vec![T::zero(); g.n * out_sample];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.patch() * g.out_plane()] };
    for n in 0..g.n {
        let xn = &xv[n * g.in_sample()..(n + 1) * g.in_sample()];
        let c: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, &g, &mut cols);
            &cols
        };
        let on = &mut out[n * out_sample..(n + 1) * out_sample];
        gemm(false, false, g.cout, g.out_plane(), g.patch(), wv, c, on, false);
        if let Some(b) = b {
            let bv = tape.value(b);
            for (co, row) in on.chunks_exact_mut(g.out_plane()).enumerate() {
                row.iter_mut().for_each(|v| *v += bv[co]);
            }
        }
    }
    let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
    Ok(tape.push_op(vec![g.n, g.cout, ho, wo], out, &inputs, Conv2dBackward { x, w, b, g }))
}

/// Convolution layer with He-normal initialized weights.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        seed: u64,
    ) -> Self {
        let wname = format!("{name}.weight");
        let std = (2.0 / (in_channels * kernel * kernel) as f64).sqrt();
        let w = Tensor::new(
            &[out_channels, in_channels, kernel, kernel],
            Fill::Normal { mean: 0.0, std },
            param_seed(seed, &wname),
        )
        .expect("conv weight shape");
        let weight = store.add(wname, ParamKind::Trainable, w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), ParamKind::Trainable, Tensor::zeros(&[out_channels])));
        Self { weight, bias, in_channels, out_channels, kernel, stride, padding }
    }

    /// Odd kernel with "same" padding at stride 1.
    pub fn same<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
        seed: u64,
    ) -> Self {
        Self::new(store, name, in_channels, out_channels, kernel, 1, kernel / 2, bias, seed)
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = self.bias.map(|b| cx.param(b));
        conv2d(cx.tape, x, w, b, self.stride, self.padding)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, ops, GradCheckOptions};
    use proptest::prelude::*;

    /// Direct 7-loop cross-correlation.
    fn conv_oracle(x: &[f64], xs: [usize; 4], w: &[f64], ws: [usize; 4], stride: usize, pad: usize) -> Vec<f64> {
        let [n, cin, h, wd] = xs;
        let [cout, _, k, _] = ws;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; n * cout * ho * wo];
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += x[((b * cin + ci) * h + iy as usize) * wd + ix as usize]
                                            * w[((co * cin + ci) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        out[((b * cout + co) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        out
    }

    fn run(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let wv = tape.constant(w);
        let y = conv2d(&mut tape, xv, wv, None, stride, pad)?;
        Ok(tape.tensor(y))
    }

    #[test]
    fn scalar_convolution() {
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 1, 1], vec![3.0]).unwrap();
        assert_eq!(run(&x, &w, 1, 0).unwrap().data(), &[6.0]);
    }

    #[test]
    fn ramp_with_ones_kernel_center_is_36() {
        let x = Tensor::from_vec(&[1, 1, 3, 3], (0..9).map(|v| v as f64).collect()).unwrap();
        let w = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let y = run(&x, &w, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[4], 36.0);
        let oracle = conv_oracle(x.data(), [1, 1, 3, 3], w.data(), [1, 1, 3, 3], 1, 1);
        assert_eq!(y.data(), &oracle[..]);
    }

    #[test]
    fn stem_shape_at_full_resolution() {
        let x = Tensor::<f32>::zeros(&[1, 3, 64, 64]);
        let mut store = ParamStore::new();
        let conv = Conv2d::same(&mut store, "stem", 3, 50, 3, false, 0);
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let y = conv.forward(&mut Ctx::eval(&mut tape, &store), xv).unwrap();
        assert_eq!(tape.shape(y), &[1, 50, 64, 64]);
    }

    #[test]
    fn channel_mismatch_and_oversized_kernel_error() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::<f64>::zeros(&[1, 3, 3, 3]);
        assert!(run(&x, &w, 1, 1).is_err());
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        let w = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        assert!(run(&x, &w, 1, 0).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1), (1, 0, 3)] {
            let x = Tensor::<f64>::new(&[2, 3, 7, 6], Fill::Uniform { lo: 0.1, hi: 1.0 }, 1).unwrap();
            let w = Tensor::<f64>::new(&[4, 3, k, k], Fill::Uniform { lo: -0.5, hi: 0.5 }, 2).unwrap();
            let b = Tensor::<f64>::new(&[4], Fill::Uniform { lo: -0.5, hi: 0.5 }, 3).unwrap();
            let proj = Tensor::<f64>::new(&[2 * 4 * 7 * 6], Fill::Uniform { lo: -1.0, hi: 1.0 }, 4).unwrap();
            let opts = GradCheckOptions::default();
            let loss = |t: &mut Tape<f64>, y: Var| -> Result<Var> {
                let n = t.value(y).len();
                let p = t.constant(&Tensor::from_vec(&[n], proj.data()[..n].to_vec()).unwrap().reshape(t.shape(y)).unwrap());
                let m = ops::mul(t, y, p)?;
                Ok(ops::sum(t, m))
            };
            let rx = grad_check(
                |t, xv| {
                    let wv = t.constant(&w);
                    let bv = t.constant(&b);
                    let y = conv2d(t, xv, wv, Some(bv), stride, pad)?;
                    loss(t, y)
                },
                &x,
                &opts,
            )
            .unwrap();
            let rw = grad_check(
                |t, wv| {
                    let xv = t.constant(&x);
                    let y = conv2d(t, xv, wv, None, stride, pad)?;
                    loss(t, y)
                },
                &w,
                &opts,
            )
            .unwrap();
            let rb = grad_check(
                |t, bv| {
                    let xv = t.constant(&x);
                    let wv = t.constant(&w);
                    let y = conv2d(t, xv, wv, Some(bv), stride, pad)?;
                    loss(t, y)
                },
                &b,
                &opts,
            )
            .unwrap();
            assert!(rx.passed && rw.passed && rb.passed, "stride {stride} pad {pad} k {k}: {rx:?} {rw:?} {rb:?}");
        }
    }

    #[test]
    fn conv_relu_sum_gradient_on_8x8() {
        let x = Tensor::<f64>::new(&[1, 3, 8, 8], Fill::Uniform { lo: 0.1, hi: 1.0 }, 9).unwrap();
        let w = Tensor::<f64>::new(&[4, 3, 3, 3], Fill::Normal { mean: 0.0, std: 0.5 }, 10).unwrap();
        let r = grad_check(
            |t, xv| {
                let wv = t.constant(&w);
                let y = conv2d(t, xv, wv, None, 1, 1)?;
                let a = ops::relu(t, y);
                Ok(ops::sum(t, a))
            },
            &x,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    proptest! {
        #[test]
        fn shape_law_and_oracle(h in 1usize..10, w in 1usize..10, k in prop::sample::select(vec![1usize, 3]),
                                stride in 1usize..4, pad in 0usize..3, cin in 1usize..3, cout in 1usize..3) {
            let x = Tensor::<f64>::new(&[1, cin, h, w], Fill::Uniform { lo: -1.0, hi: 1.0 }, 5).unwrap();
            let wt = Tensor::<f64>::new(&[cout, cin, k, k], Fill::Uniform { lo: -1.0, hi: 1.0 }, 6).unwrap();
            match (conv_output_size(h, k, stride, pad), conv_output_size(w, k, stride, pad)) {
                (Some(ho), Some(wo)) => {
                    let y = run(&x, &wt, stride, pad).unwrap();
                    prop_assert_eq!(y.shape(), &[1, cout, ho, wo]);
                    prop_assert_eq!(ho, (h + 2 * pad - k) / stride + 1);
                    let o = conv_oracle(x.data(), [1, cin, h, w], wt.data(), [cout, cin, k, k], stride, pad);
                    for (a, b) in y.data().iter().zip(&o) {
                        prop_assert!((a - b).abs() < 1e-12);
                    }
                }
                _ => prop_assert!(run(&x, &wt, stride, pad).is_err()),
            }
        }
    }
}
