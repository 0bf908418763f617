//! Convolution kernels: im2col + GEMM forward, col2im input gradient, and
//! the weight gradient. Batched work is parallelised per sample; each sample
//! is computed sequentially, so results do not depend on thread scheduling.
//!
//! All tensors are standard-layout; inner loops run over contiguous slices.

use ndarray::parallel::prelude::*;
use ndarray::{Array2, ArrayD, Axis, IxDyn};

/// Output spatial extent of a convolution along one axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(
        input + 2 * pad >= kernel,
        "kernel {kernel} larger than padded input {input}+2*{pad}"
    );
    (input + 2 * pad - kernel) / stride + 1
}

/// Receptive field of a stack of conv layers given `(kernel, stride)` pairs,
/// ordered input-side first.
pub fn receptive_field(layers: &[(usize, usize)]) -> usize {
    let mut rf = 1usize;
    let mut jump = 1usize;
    for &(k, s) in layers {
        rf += (k - 1) * jump;
        jump *= s;
    }
    rf
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected a 4-D tensor, got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

/// Gather one sample (`x`: contiguous `[Cin, H, W]`) into column form
/// `[Cin*kh*kw, Ho*Wo]`.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let l = ho * wo;
    let mut cols = vec![0.0f64; cin * kh * kw * l];
    for ci in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let out_base = row * l;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let in_row = (ci * h + ii as usize) * w;
                    let out_row = out_base + oi * wo;
                    if stride == 1 {
                        // contiguous run; clip the window to the valid range
                        let jj0 = kj as isize - pad as isize;
                        let lo = (-jj0).max(0) as usize;
                        let hi = ((w as isize - jj0).min(wo as isize)).max(0) as usize;
                        if lo < hi {
                            let src = in_row as isize + jj0;
                            cols[out_row + lo..out_row + hi].copy_from_slice(
                                &x[(src + lo as isize) as usize..(src + hi as isize) as usize],
                            );
                        }
                    } else {
                        for oj in 0..wo {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj >= 0 && jj < w as isize {
                                cols[out_row + oj] = x[in_row + jj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((cin * kh * kw, l), cols).expect("col reshape")
}

/// Scatter-add column form back onto a contiguous `[Cin, H, W]` grid.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &Array2<f64>,
    out: &mut [f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let l = ho * wo;
    let c = cols.as_slice().expect("cols standard layout");
    for ci in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let col_base = row * l;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let out_row = (ci * h + ii as usize) * w;
                    let col_row = col_base + oi * wo;
                    if stride == 1 {
                        // contiguous accumulate over the valid window
                        let jj0 = kj as isize - pad as isize;
                        let lo = (-jj0).max(0) as usize;
                        let hi = ((w as isize - jj0).min(wo as isize)).max(0) as usize;
                        if lo < hi {
                            let dst = out_row as isize + jj0;
                            let src = &c[col_row + lo..col_row + hi];
                            let tgt = &mut out
                                [(dst + lo as isize) as usize..(dst + hi as isize) as usize];
                            for (t, &v) in tgt.iter_mut().zip(src) {
                                *t += v;
                            }
                        }
                    } else {
                        for oj in 0..wo {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj >= 0 && jj < w as isize {
                                out[out_row + jj as usize] += c[col_row + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn weight_matrix(w: &ArrayD<f64>) -> Array2<f64> {
    let (cout, cin, kh, kw) = dims4(w.shape());
    let flat: Vec<f64> = w.as_slice().expect("weights standard layout").to_vec();
    Array2::from_shape_vec((cout, cin * kh * kw), flat).expect("weight reshape")
}

/// `x: [B,Cin,H,W] (*) w: [Cout,Cin,kh,kw] -> [B,Cout,Ho,Wo]`.
pub(crate) fn conv2d_fwd(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    stride: usize,
    pad: usize,
) -> ArrayD<f64> {
    let (b, cin, h, wid) = dims4(x.shape());
    let (cout, wcin, kh, kw) = dims4(w.shape());
    assert_eq!(cin, wcin, "conv2d channel mismatch: input {cin}, weight {wcin}");
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(wid, kw, stride, pad);
    let wmat = weight_matrix(w);
    let xs = x.as_slice().expect("input standard layout");
    let sample = cin * h * wid;
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[b, cout, ho, wo]));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(bi, mut ob)| {
            let cols = im2col(
                &xs[bi * sample..(bi + 1) * sample],
                cin,
                h,
                wid,
                kh,
                kw,
                stride,
                pad,
                ho,
                wo,
            );
            let prod = wmat.dot(&cols); // [Cout, Ho*Wo]
            let os = ob.as_slice_mut().expect("output standard layout");
            os.copy_from_slice(prod.as_slice().expect("prod standard layout"));
        });
    out
}

/// Adjoint in the image argument: `g: [B,Cout,Ho,Wo] -> [B,Cin,in_h,in_w]`.
pub(crate) fn conv2d_igrad_fwd(
    g: &ArrayD<f64>,
    w: &ArrayD<f64>,
    stride: usize,
    pad: usize,
    in_h: usize,
    in_w: usize,
) -> ArrayD<f64> {
    let (b, cout, ho, wo) = dims4(g.shape());
    let (wcout, cin, kh, kw) = dims4(w.shape());
    assert_eq!(cout, wcout, "conv2d_igrad channel mismatch");
    assert_eq!(ho, conv_out_dim(in_h, kh, stride, pad), "conv2d_igrad height mismatch");
    assert_eq!(wo, conv_out_dim(in_w, kw, stride, pad), "conv2d_igrad width mismatch");
    let wmat_t = weight_matrix(w).reversed_axes().as_standard_layout().to_owned();
    let gs = g.as_slice().expect("grad standard layout");
    let gsample = cout * ho * wo;
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[b, cin, in_h, in_w]));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(bi, mut ob)| {
            let gmat = ndarray::ArrayView2::from_shape(
                (cout, ho * wo),
                &gs[bi * gsample..(bi + 1) * gsample],
            )
            .expect("grad view");
            let cols = wmat_t.dot(&gmat); // [Cin*kh*kw, Ho*Wo]
            let os = ob.as_slice_mut().expect("output standard layout");
            col2im(&cols, os, cin, in_h, in_w, kh, kw, stride, pad, ho, wo);
        });
    out
}

/// Adjoint in the weight argument: `(x, g) -> [Cout,Cin,kh,kw]`.
pub(crate) fn conv2d_wgrad_fwd(
    x: &ArrayD<f64>,
    g: &ArrayD<f64>,
    stride: usize,
    pad: usize,
    kh: usize,
    kw: usize,
) -> ArrayD<f64> {
    let (b, cin, h, wid) = dims4(x.shape());
    let (gb, cout, ho, wo) = dims4(g.shape());
    assert_eq!(b, gb, "conv2d_wgrad batch mismatch");
    assert_eq!(ho, conv_out_dim(h, kh, stride, pad), "conv2d_wgrad height mismatch");
    assert_eq!(wo, conv_out_dim(wid, kw, stride, pad), "conv2d_wgrad width mismatch");
    let xs = x.as_slice().expect("input standard layout");
    let gs = g.as_slice().expect("grad standard layout");
    let sample = cin * h * wid;
    let gsample = cout * ho * wo;
    // Per-sample partials collected in batch order and reduced sequentially,
    // so the floating-point sum order is fixed.
    let partials: Vec<Array2<f64>> = (0..b)
        .into_par_iter()
        .map(|bi| {
            let gmat = ndarray::ArrayView2::from_shape(
                (cout, ho * wo),
                &gs[bi * gsample..(bi + 1) * gsample],
            )
            .expect("grad view");
            let cols = im2col(
                &xs[bi * sample..(bi + 1) * sample],
                cin,
                h,
                wid,
                kh,
                kw,
                stride,
                pad,
                ho,
                wo,
            );
            gmat.dot(&cols.reversed_axes()) // [Cout, Cin*kh*kw]
        })
        .collect();
    let mut acc = Array2::<f64>::zeros((cout, cin * kh * kw));
    for p in partials {
        acc += &p;
    }
    let flat: Vec<f64> = acc.as_slice().expect("acc standard layout").to_vec();
    ArrayD::from_shape_vec(IxDyn(&[cout, cin, kh, kw]), flat).expect("wgrad reshape")
}
