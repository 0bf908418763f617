//! Spatial resampling kernels and their adjoints. Inner loops run over
//! contiguous rows of standard-layout tensors.

use ndarray::{ArrayD, IxDyn};

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected a 4-D tensor, got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

pub(crate) fn up_nearest2(x: &ArrayD<f64>) -> ArrayD<f64> {
    let (b, c, h, w) = dims4(x.shape());
    let xs = x.as_slice().expect("standard layout");
    let mut out = Vec::with_capacity(b * c * 4 * h * w);
    let mut row = vec![0.0f64; 2 * w];
    for img in 0..b * c {
        let src_base = img * h * w;
        for hi in 0..h {
            let src = &xs[src_base + hi * w..src_base + (hi + 1) * w];
            for (wi, &v) in src.iter().enumerate() {
                row[2 * wi] = v;
                row[2 * wi + 1] = v;
            }
            out.extend_from_slice(&row);
            out.extend_from_slice(&row);
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[b, c, 2 * h, 2 * w]), out).expect("shape")
}

pub(crate) fn down_sum2(x: &ArrayD<f64>) -> ArrayD<f64> {
    let (b, c, h, w) = dims4(x.shape());
    assert!(h % 2 == 0 && w % 2 == 0, "down_sum2 requires even spatial dims");
    let xs = x.as_slice().expect("standard layout");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for img in 0..b * c {
        let src_base = img * h * w;
        for hi in 0..oh {
            let r0 = src_base + 2 * hi * w;
            let r1 = r0 + w;
            out.extend((0..ow).map(|wi| {
                xs[r0 + 2 * wi] + xs[r0 + 2 * wi + 1] + xs[r1 + 2 * wi] + xs[r1 + 2 * wi + 1]
            }));
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[b, c, oh, ow]), out).expect("shape")
}

/// Interpolation taps for one axis: for each output index, the two source
/// indices and their weights. Half-pixel centres, clamped at the borders.
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i0 = i0.min(input - 1);
            let t = src - i0 as f64;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, 1.0 - t, t)
        })
        .collect()
}

pub(crate) fn resize_bilinear(x: &ArrayD<f64>, oh: usize, ow: usize) -> ArrayD<f64> {
    let (b, c, h, w) = dims4(x.shape());
    assert!(oh > 0 && ow > 0, "resize target must be non-empty");
    let rows = taps(h, oh);
    let cols = taps(w, ow);
    let xs = x.as_slice().expect("standard layout");
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for img in 0..b * c {
        let src_base = img * h * w;
        for &(r0, r1, wr0, wr1) in &rows {
            let row0 = src_base + r0 * w;
            let row1 = src_base + r1 * w;
            out.extend(cols.iter().map(|&(c0, c1, wc0, wc1)| {
                wr0 * wc0 * xs[row0 + c0]
                    + wr0 * wc1 * xs[row0 + c1]
                    + wr1 * wc0 * xs[row1 + c0]
                    + wr1 * wc1 * xs[row1 + c1]
            }));
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[b, c, oh, ow]), out).expect("shape")
}

/// Adjoint of [`resize_bilinear`]: scatter `g: [B,C,oh,ow]` back to `(ih, iw)`.
pub(crate) fn resize_bilinear_t(g: &ArrayD<f64>, ih: usize, iw: usize) -> ArrayD<f64> {
    let (b, c, oh, ow) = dims4(g.shape());
    let rows = taps(ih, oh);
    let cols = taps(iw, ow);
    let gs = g.as_slice().expect("standard layout");
    let mut out = vec![0.0f64; b * c * ih * iw];
    for img in 0..b * c {
        let src_base = img * oh * ow;
        let dst_base = img * ih * iw;
        for (oi, &(r0, r1, wr0, wr1)) in rows.iter().enumerate() {
            let row0 = dst_base + r0 * iw;
            let row1 = dst_base + r1 * iw;
            let src = src_base + oi * ow;
            for (oj, &(c0, c1, wc0, wc1)) in cols.iter().enumerate() {
                let gv = gs[src + oj];
                out[row0 + c0] += wr0 * wc0 * gv;
                out[row0 + c1] += wr0 * wc1 * gv;
                out[row1 + c0] += wr1 * wc0 * gv;
                out[row1 + c1] += wr1 * wc1 * gv;
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[b, c, ih, iw]), out).expect("shape")
}
