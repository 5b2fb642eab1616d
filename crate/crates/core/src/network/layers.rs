//! Convolution, dense and softmax kernels with their backward passes.

use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView2, Axis};

/// Output size of a "same"-padded convolution (`pad = kernel / 2`).
pub fn conv_output_size(input: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold `(n, h, w, c)` into patch rows `(n * ho * wo, k * k * c)`, column
/// order `(ky, kx, c)`. Out-of-image taps are zero.
pub fn im2col(input: &Array4<f64>, kernel: usize, stride: usize) -> Array2<f64> {
    let (n, h, w, c) = input.dim();
    let pad = kernel / 2;
    let (ho, wo) = (conv_output_size(h, kernel, stride), conv_output_size(w, kernel, stride));
    let width = kernel * kernel * c;
    let mut cols = Array2::zeros((n * ho * wo, width));
    let src = input.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let dst = cols.as_slice_mut().expect("fresh array");
    for t in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((t * ho + oy) * wo + ox) * width;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let s = ((t * h + iy as usize) * w + ix as usize) * c;
                        let d = row + (ky * kernel + kx) * c;
                        dst[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the image.
pub fn col2im(cols: &Array2<f64>, shape: (usize, usize, usize, usize), kernel: usize, stride: usize) -> Array4<f64> {
    let (n, h, w, c) = shape;
    let pad = kernel / 2;
    let (ho, wo) = (conv_output_size(h, kernel, stride), conv_output_size(w, kernel, stride));
    let width = kernel * kernel * c;
    let mut out = Array4::zeros(shape);
    let src = cols.as_standard_layout();
    let src = src.as_slice().expect("standard layout");
    let dst = out.as_slice_mut().expect("fresh array");
    for t in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((t * ho + oy) * wo + ox) * width;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let d = ((t * h + iy as usize) * w + ix as usize) * c;
                        let s = row + (ky * kernel + kx) * c;
                        for ch in 0..c {
                            dst[d + ch] += src[s + ch];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `x · wᵀ + b` for row-major inputs `x: (n, in)`, `w: (out, in)`.
pub fn affine(x: ArrayView2<'_, f64>, w: ArrayView2<'_, f64>, b: ArrayView1<'_, f64>) -> Array2<f64> {
    let mut y = x.dot(&w.t());
    y += &b;
    y
}

/// Gradients of [`affine`]: returns `(dx, dw, db)`.
pub fn affine_backward(
    dy: ArrayView2<'_, f64>,
    x: ArrayView2<'_, f64>,
    w: ArrayView2<'_, f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let dx = dy.dot(&w);
    let dw = dy.t().dot(&x);
    let db = dy.sum_axis(Axis(0));
    (dx, dw, db)
}

pub fn relu_in_place(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Zero the gradient wherever the forward pre-activation was not positive.
pub fn relu_backward_in_place(dy: &mut Array2<f64>, pre: &Array2<f64>) {
    ndarray::Zip::from(dy).and(pre).for_each(|d, &p| {
        if p <= 0.0 {
            *d = 0.0;
        }
    });
}

pub fn softmax(logits: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e = logits.mapv(|v| (v - max).exp());
    let total = e.sum();
    e / total
}

/// Backward through softmax: `dz = p ⊙ (dp - <dp, p>)`.
pub fn softmax_backward(p: ArrayView1<'_, f64>, dp: ArrayView1<'_, f64>) -> Array1<f64> {
    let dot = p.dot(&dp);
    ndarray::Zip::from(p).and(dp).map_collect(|&p, &d| p * (d - dot))
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}
