use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};

use super::{ConvGeom, Layer, Scalar};

/// In-place numerically stable softmax over each row.
pub fn softmax_rows<T: Scalar>(x: &mut Array2<T>) {
    for mut row in x.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
}

/// In-place log-softmax over each row using max subtraction.
pub fn log_softmax_rows<T: Scalar>(x: &mut Array2<T>) {
    for mut row in x.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        for v in row.iter_mut() {
            *v = *v - lse;
        }
    }
}

fn dense_views<'a, T: Scalar>(
    weights: &'a [T],
    inputs: usize,
    outputs: usize,
    w_off: usize,
    b_off: usize,
) -> (ArrayView2<'a, T>, &'a [T]) {
    let w = ArrayView2::from_shape((inputs, outputs), &weights[w_off..w_off + inputs * outputs])
        .expect("dense weight block");
    (w, &weights[b_off..b_off + outputs])
}

/// Gathers the receptive fields of one example into a
/// `(in_c·k·k) × (out_h·out_w)` matrix.
fn im2col<T: Scalar>(input: &[T], g: &ConvGeom, cols: &mut Array2<T>) {
    let k = g.kernel;
    let pixels = g.out_pixels();
    let cols = cols.as_slice_mut().expect("contiguous");
    for c in 0..g.in_c {
        let plane = &input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * pixels..(row + 1) * pixels];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * g.out_w + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.in_h
                            && (ix as usize) < g.in_w
                        {
                            plane[iy as usize * g.in_w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back onto an example's input gradient.
fn col2im<T: Scalar>(cols: &Array2<T>, g: &ConvGeom, dinput: &mut [T]) {
    let k = g.kernel;
    let pixels = g.out_pixels();
    let cols = cols.as_slice().expect("contiguous");
    for c in 0..g.in_c {
        let plane = &mut dinput[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * pixels..(row + 1) * pixels];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.in_h {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.in_w {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * g.in_w + ix as usize];
                        *dst = *dst + src[oy * g.out_w + ox];
                    }
                }
            }
        }
    }
}

pub(super) fn forward<T: Scalar>(layer: &Layer, x: ArrayView2<T>, weights: &[T]) -> Array2<T> {
    match layer {
        Layer::Dense {
            inputs,
            outputs,
            w_off,
            b_off,
        } => {
            let (w, b) = dense_views(weights, *inputs, *outputs, *w_off, *b_off);
            let mut y = x.dot(&w);
            for mut row in y.axis_iter_mut(Axis(0)) {
                for (v, &bias) in row.iter_mut().zip(b) {
                    *v = *v + bias;
                }
            }
            y
        }
        Layer::Conv(g) => {
            let patch = g.patch_len();
            let pixels = g.out_pixels();
            let w = ArrayView2::from_shape(
                (g.out_c, patch),
                &weights[g.w_off..g.w_off + g.out_c * patch],
            )
            .expect("conv weight block");
            let b = &weights[g.b_off..g.b_off + g.out_c];
            let mut out = Array2::zeros((x.nrows(), g.out_c * pixels));
            let mut cols = Array2::zeros((patch, pixels));
            for (xrow, mut orow) in x.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
                let input = xrow.as_slice().map(|s| s.to_vec()).unwrap_or_else(|| xrow.to_vec());
                im2col(&input, g, &mut cols);
                let mut o = ArrayViewMut2::from_shape(
                    (g.out_c, pixels),
                    orow.as_slice_mut().expect("contiguous output row"),
                )
                .expect("conv output block");
                for (c, mut ch) in o.axis_iter_mut(Axis(0)).enumerate() {
                    ch.fill(b[c]);
                }
                general_mat_mul(T::one(), &w, &cols, T::one(), &mut o);
            }
            out
        }
        Layer::Relu => x.mapv(|v| v.max(T::zero())),
        Layer::Flatten => x.to_owned(),
    }
}

/// Accumulates parameter gradients of `layer` into `grad` and returns the
/// gradient with respect to the layer's input (empty when not requested).
pub(super) fn backward<T: Scalar>(
    layer: &Layer,
    x: ArrayView2<T>,
    dy: ArrayView2<T>,
    weights: &[T],
    grad: &mut [T],
    need_input_grad: bool,
) -> Array2<T> {
    match layer {
        Layer::Dense {
            inputs,
            outputs,
            w_off,
            b_off,
        } => {
            let (w, _) = dense_views(weights, *inputs, *outputs, *w_off, *b_off);
            {
                let mut gw = ArrayViewMut2::from_shape(
                    (*inputs, *outputs),
                    &mut grad[*w_off..*w_off + inputs * outputs],
                )
                .expect("dense grad block");
                general_mat_mul(T::one(), &x.t(), &dy, T::one(), &mut gw);
            }
            let gb = &mut grad[*b_off..*b_off + outputs];
            for row in dy.axis_iter(Axis(0)) {
                for (g, &d) in gb.iter_mut().zip(row.iter()) {
                    *g = *g + d;
                }
            }
            if need_input_grad {
                dy.dot(&w.t())
            } else {
                Array2::zeros((0, 0))
            }
        }
        Layer::Conv(g) => {
            let patch = g.patch_len();
            let pixels = g.out_pixels();
            let w = ArrayView2::from_shape(
                (g.out_c, patch),
                &weights[g.w_off..g.w_off + g.out_c * patch],
            )
            .expect("conv weight block");
            let mut gw = Array2::<T>::zeros((g.out_c, patch));
            let mut gb = vec![T::zero(); g.out_c];
            let mut dx = if need_input_grad {
                Array2::zeros(x.raw_dim())
            } else {
                Array2::zeros((0, 0))
            };
            let mut cols = Array2::zeros((patch, pixels));
            let mut dcols = Array2::zeros((patch, pixels));
            for (e, (xrow, dyrow)) in x.axis_iter(Axis(0)).zip(dy.axis_iter(Axis(0))).enumerate() {
                let input = xrow.to_vec();
                im2col(&input, g, &mut cols);
                let dyrow = dyrow.to_vec();
                let d = ArrayView2::from_shape((g.out_c, pixels), &dyrow[..]).expect("conv dy");
                general_mat_mul(T::one(), &d, &cols.t(), T::one(), &mut gw);
                for (c, ch) in d.axis_iter(Axis(0)).enumerate() {
                    gb[c] = gb[c] + ch.sum();
                }
                if need_input_grad {
                    general_mat_mul(T::one(), &w.t(), &d, T::zero(), &mut dcols);
                    let mut drow = dx.row_mut(e);
                    col2im(&dcols, g, drow.as_slice_mut().expect("contiguous"));
                }
            }
            for (dst, &v) in grad[g.w_off..g.w_off + g.out_c * patch]
                .iter_mut()
                .zip(gw.iter())
            {
                *dst = *dst + v;
            }
            for (dst, &v) in grad[g.b_off..g.b_off + g.out_c].iter_mut().zip(&gb) {
                *dst = *dst + v;
            }
            dx
        }
        Layer::Relu => {
            let mut dx = dy.to_owned();
            ndarray::Zip::from(&mut dx).and(&x).for_each(|d, &xv| {
                if xv <= T::zero() {
                    *d = T::zero();
                }
            });
            dx
        }
        Layer::Flatten => dy.to_owned(),
    }
}
