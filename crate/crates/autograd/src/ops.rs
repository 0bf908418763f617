//! Forward evaluation and vector-Jacobian products for every primitive.
//!
//! The rule that keeps second-order gradients exact: every vjp is expressed
//! through tape operations (or constant leaves, for piecewise-linear masks),
//! never through opaque array math.

use crate::{conv, resample, Op, Tape, Var};
use ndarray::{ArrayD, IxDyn};

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected a [B,C,H,W] tensor, got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

fn map_into(src: &ArrayD<f64>, f: impl Fn(f64) -> f64) -> ArrayD<f64> {
    let ss = src.as_slice().expect("standard layout");
    let out: Vec<f64> = ss.iter().map(|&v| f(v)).collect();
    ArrayD::from_shape_vec(src.raw_dim(), out).expect("shape")
}

fn zip_into(a: &ArrayD<f64>, b: &ArrayD<f64>, f: impl Fn(f64, f64) -> f64) -> ArrayD<f64> {
    let as_ = a.as_slice().expect("standard layout");
    let bs = b.as_slice().expect("standard layout");
    let out: Vec<f64> = as_.iter().zip(bs).map(|(&x, &y)| f(x, y)).collect();
    ArrayD::from_shape_vec(a.raw_dim(), out).expect("shape")
}

impl Tape {
    fn unary(&self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.with_value(x, |v| map_into(v, &f));
        let needs = self.needs(x.0);
        self.push(value, vec![x.0], op, needs)
    }

    fn binary_same_shape(&self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(
                va.shape(),
                vb.shape(),
                "shape mismatch in elementwise op: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            );
            zip_into(va, vb, &f)
        };
        let needs = self.any_needs(&[a.0, b.0]);
        self.push(value, vec![a.0, b.0], op, needs)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, Op::Mul, |x, y| x * y)
    }

    pub fn neg(&self, x: Var) -> Var {
        self.unary(x, Op::Neg, |v| -v)
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(c), |v| v * c)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar, |v| v + c)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, Op::Relu, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Var {
        self.unary(x, Op::LeakyRelu(slope), move |v| {
            if v > 0.0 {
                v
            } else {
                slope * v
            }
        })
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid, |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, Op::Tanh, f64::tanh)
    }

    pub fn abs(&self, x: Var) -> Var {
        self.unary(x, Op::Abs, f64::abs)
    }

    pub fn sqrt(&self, x: Var) -> Var {
        self.unary(x, Op::Sqrt, f64::sqrt)
    }

    pub fn recip(&self, x: Var) -> Var {
        self.unary(x, Op::Recip, f64::recip)
    }

    /// 2-D cross-correlation of `x: [B,Cin,H,W]` with `w: [Cout,Cin,kh,kw]`.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            conv::conv2d_fwd(&nodes[x.0].value, &nodes[w.0].value, stride, pad)
        };
        let needs = self.any_needs(&[x.0, w.0]);
        self.push(value, vec![x.0, w.0], Op::Conv2d { stride, pad }, needs)
    }

    /// Adjoint of [`Tape::conv2d`] in its image argument: maps an output-shaped
    /// tensor `g` back to an input of spatial size `(in_h, in_w)`.
    pub fn conv2d_igrad(
        &self,
        g: Var,
        w: Var,
        stride: usize,
        pad: usize,
        in_h: usize,
        in_w: usize,
    ) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            conv::conv2d_igrad_fwd(&nodes[g.0].value, &nodes[w.0].value, stride, pad, in_h, in_w)
        };
        let needs = self.any_needs(&[g.0, w.0]);
        self.push(
            value,
            vec![g.0, w.0],
            Op::ConvIGrad { stride, pad },
            needs,
        )
    }

    /// Adjoint of [`Tape::conv2d`] in its weight argument.
    pub fn conv2d_wgrad(
        &self,
        x: Var,
        g: Var,
        stride: usize,
        pad: usize,
        kh: usize,
        kw: usize,
    ) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            conv::conv2d_wgrad_fwd(&nodes[x.0].value, &nodes[g.0].value, stride, pad, kh, kw)
        };
        let needs = self.any_needs(&[x.0, g.0]);
        self.push(
            value,
            vec![x.0, g.0],
            Op::ConvWGrad { stride, pad },
            needs,
        )
    }

    /// `x: [B,C,H,W] + b: [C]`, broadcast over batch and space.
    pub fn add_bias(&self, x: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let bv = &nodes[b.0].value;
            let (bt, c, h, w) = dims4(xv.shape());
            assert_eq!(bv.shape(), [c], "bias length must match channel count");
            let xs = xv.as_slice().expect("standard layout");
            let bs = bv.as_slice().expect("standard layout");
            let plane = h * w;
            let mut out = Vec::with_capacity(xs.len());
            for bi in 0..bt {
                for (ci, &bias) in bs.iter().enumerate() {
                    let at = (bi * c + ci) * plane;
                    out.extend(xs[at..at + plane].iter().map(|&v| v + bias));
                }
            }
            ArrayD::from_shape_vec(xv.raw_dim(), out).expect("shape")
        };
        let needs = self.any_needs(&[x.0, b.0]);
        self.push(value, vec![x.0, b.0], Op::AddBias, needs)
    }

    /// `x: [B,C,H,W] * s: [C]`, broadcast over batch and space.
    pub fn mul_bias(&self, x: Var, s: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let sv = &nodes[s.0].value;
            let (bt, c, h, w) = dims4(xv.shape());
            assert_eq!(sv.shape(), [c], "scale length must match channel count");
            let xs = xv.as_slice().expect("standard layout");
            let ss = sv.as_slice().expect("standard layout");
            let plane = h * w;
            let mut out = Vec::with_capacity(xs.len());
            for bi in 0..bt {
                for (ci, &scale) in ss.iter().enumerate() {
                    let at = (bi * c + ci) * plane;
                    out.extend(xs[at..at + plane].iter().map(|&v| v * scale));
                }
            }
            ArrayD::from_shape_vec(xv.raw_dim(), out).expect("shape")
        };
        let needs = self.any_needs(&[x.0, s.0]);
        self.push(value, vec![x.0, s.0], Op::MulBias, needs)
    }

    /// Sum `[B,C,H,W]` over batch and space, yielding `[C]`.
    pub fn sum_bhw(&self, x: Var) -> Var {
        let value = self.with_value(x, |v| {
            let (b, c, h, w) = dims4(v.shape());
            let vs = v.as_slice().expect("standard layout");
            let plane = h * w;
            let mut out = vec![0.0f64; c];
            for bi in 0..b {
                for (ci, acc) in out.iter_mut().enumerate() {
                    let at = (bi * c + ci) * plane;
                    *acc += vs[at..at + plane].iter().sum::<f64>();
                }
            }
            ArrayD::from_shape_vec(IxDyn(&[c]), out).expect("shape")
        });
        let needs = self.needs(x.0);
        self.push(value, vec![x.0], Op::SumBhw, needs)
    }

    /// Broadcast `[C]` to `[B,C,H,W]`.
    pub fn broadcast_c(&self, v: Var, b: usize, h: usize, w: usize) -> Var {
        let value = self.with_value(v, |val| {
            let c = val.len();
            let vs = val.as_slice().expect("standard layout");
            let plane = h * w;
            let mut out = Vec::with_capacity(b * c * plane);
            for _ in 0..b {
                for &x in vs {
                    out.extend(std::iter::repeat(x).take(plane));
                }
            }
            ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), out).expect("shape")
        });
        let needs = self.needs(v.0);
        self.push(value, vec![v.0], Op::BroadcastC, needs)
    }

    /// Sum every element, yielding a `[1]` scalar.
    pub fn sum_all(&self, x: Var) -> Var {
        let value = self.with_value(x, |v| ArrayD::from_elem(IxDyn(&[1]), v.sum()));
        let needs = self.needs(x.0);
        self.push(value, vec![x.0], Op::SumAll, needs)
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let n = self.with_value(x, |v| v.len());
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Broadcast a `[1]` scalar to an arbitrary shape.
    pub fn broadcast_all(&self, v: Var, shape: &[usize]) -> Var {
        let value = self.with_value(v, |val| {
            assert_eq!(val.len(), 1);
            ArrayD::from_elem(IxDyn(shape), *val.iter().next().unwrap())
        });
        let needs = self.needs(v.0);
        self.push(value, vec![v.0], Op::BroadcastAll, needs)
    }

    /// Per-sample sum over channel and space: `[B,C,H,W] -> [B]`.
    pub fn sum_chw(&self, x: Var) -> Var {
        let value = self.with_value(x, |v| {
            let (b, c, h, w) = dims4(v.shape());
            let vs = v.as_slice().expect("standard layout");
            let sample = c * h * w;
            let out: Vec<f64> = (0..b)
                .map(|bi| vs[bi * sample..(bi + 1) * sample].iter().sum())
                .collect();
            ArrayD::from_shape_vec(IxDyn(&[b]), out).expect("shape")
        });
        let needs = self.needs(x.0);
        self.push(value, vec![x.0], Op::SumChw, needs)
    }

    pub fn mean_chw(&self, x: Var) -> Var {
        let shape = self.shape(x);
        let (_, c, h, w) = dims4(&shape);
        let s = self.sum_chw(x);
        self.scale(s, 1.0 / (c * h * w) as f64)
    }

    /// Broadcast `[B]` to `[B,C,H,W]`.
    pub fn broadcast_chw(&self, v: Var, c: usize, h: usize, w: usize) -> Var {
        let value = self.with_value(v, |val| {
            let b = val.len();
            let vs = val.as_slice().expect("standard layout");
            let sample = c * h * w;
            let mut out = Vec::with_capacity(b * sample);
            for &x in vs {
                out.extend(std::iter::repeat(x).take(sample));
            }
            ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), out).expect("shape")
        });
        let needs = self.needs(v.0);
        self.push(value, vec![v.0], Op::BroadcastChw, needs)
    }

    /// Per-sample, per-channel sum over space: `[B,C,H,W] -> [B,C]`.
    pub fn sum_hw(&self, x: Var) -> Var {
        let value = self.with_value(x, |v| {
            let (b, c, h, w) = dims4(v.shape());
            let vs = v.as_slice().expect("standard layout");
            let plane = h * w;
            let out: Vec<f64> = (0..b * c)
                .map(|i| vs[i * plane..(i + 1) * plane].iter().sum())
                .collect();
            ArrayD::from_shape_vec(IxDyn(&[b, c]), out).expect("shape")
        });
        let needs = self.needs(x.0);
        self.push(value, vec![x.0], Op::SumHw, needs)
    }

    pub fn mean_hw(&self, x: Var) -> Var {
        let shape = self.shape(x);
        let (_, _, h, w) = dims4(&shape);
        let s = self.sum_hw(x);
        self.scale(s, 1.0 / (h * w) as f64)
    }

    /// Broadcast `[B,C]` to `[B,C,H,W]`.
    pub fn broadcast_hw(&self, v: Var, h: usize, w: usize) -> Var {
        let value = self.with_value(v, |val| {
            assert_eq!(val.ndim(), 2);
            let (b, c) = (val.shape()[0], val.shape()[1]);
            let vs = val.as_slice().expect("standard layout");
            let plane = h * w;
            let mut out = Vec::with_capacity(b * c * plane);
            for &x in vs {
                out.extend(std::iter::repeat(x).take(plane));
            }
            ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), out).expect("shape")
        });
        let needs = self.needs(v.0);
        self.push(value, vec![v.0], Op::BroadcastHw, needs)
    }

    /// Sum over channels keeping a singleton channel axis: `[B,C,H,W] -> [B,1,H,W]`.
    pub fn sum_c(&self, x: Var) -> Var {
        let value = self.with_value(x, |v| {
            let (b, c, h, w) = dims4(v.shape());
            let vs = v.as_slice().expect("standard layout");
            let plane = h * w;
            let mut out = vec![0.0f64; b * plane];
            for bi in 0..b {
                let acc = &mut out[bi * plane..(bi + 1) * plane];
                for ci in 0..c {
                    let at = (bi * c + ci) * plane;
                    for (a, &x) in acc.iter_mut().zip(&vs[at..at + plane]) {
                        *a += x;
                    }
                }
            }
            ArrayD::from_shape_vec(IxDyn(&[b, 1, h, w]), out).expect("shape")
        });
        let needs = self.needs(x.0);
        self.push(value, vec![x.0], Op::SumC, needs)
    }

    /// Repeat a singleton channel over `c` channels: `[B,1,H,W] -> [B,C,H,W]`.
    pub fn repeat_c(&self, x: Var, c: usize) -> Var {
        let value = self.with_value(x, |v| {
            let (b, c1, h, w) = dims4(v.shape());
            assert_eq!(c1, 1, "repeat_c expects a singleton channel axis");
            let vs = v.as_slice().expect("standard layout");
            let plane = h * w;
            let mut out = Vec::with_capacity(b * c * plane);
            for bi in 0..b {
                let src = &vs[bi * plane..(bi + 1) * plane];
                for _ in 0..c {
                    out.extend_from_slice(src);
                }
            }
            ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), out).expect("shape")
        });
        let needs = self.needs(x.0);
        self.push(value, vec![x.0], Op::RepeatC, needs)
    }

    /// Broadcast-multiply a one-channel map over every channel of `x`:
    /// `a: [B,1,H,W] * x: [B,C,H,W]`.
    pub fn mul_c1(&self, a: Var, x: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let xv = &nodes[x.0].value;
            let (b, c1, h, w) = dims4(av.shape());
            let (bx, c, hx, wx) = dims4(xv.shape());
            assert!(
                c1 == 1 && b == bx && h == hx && w == wx,
                "mul_c1 shape mismatch: {:?} vs {:?}",
                av.shape(),
                xv.shape()
            );
            let xs = xv.as_slice().expect("standard layout");
            let as_ = av.as_slice().expect("standard layout");
            let plane = h * w;
            let mut out = Vec::with_capacity(xs.len());
            for bi in 0..b {
                let alpha = &as_[bi * plane..(bi + 1) * plane];
                for ci in 0..c {
                    let at = (bi * c + ci) * plane;
                    out.extend(xs[at..at + plane].iter().zip(alpha).map(|(&x, &a)| x * a));
                }
            }
            ArrayD::from_shape_vec(xv.raw_dim(), out).expect("shape")
        };
        let needs = self.any_needs(&[a.0, x.0]);
        self.push(value, vec![a.0, x.0], Op::MulC1, needs)
    }

    /// Concatenate along the channel axis.
    pub fn concat_c(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (value, sizes) = {
            let nodes = self.nodes.borrow();
            let views: Vec<&ArrayD<f64>> = parts.iter().map(|p| &nodes[p.0].value).collect();
            let (b, _, h, w) = dims4(views[0].shape());
            let sizes: Vec<usize> = views
                .iter()
                .map(|v| {
                    let (vb, vc, vh, vw) = dims4(v.shape());
                    assert!(
                        vb == b && vh == h && vw == w,
                        "concat_c parts disagree outside the channel axis"
                    );
                    vc
                })
                .collect();
            let total: usize = sizes.iter().sum();
            let plane = h * w;
            let mut out = Vec::with_capacity(b * total * plane);
            for bi in 0..b {
                for (v, &vc) in views.iter().zip(&sizes) {
                    let vs = v.as_slice().expect("standard layout");
                    let chunk = vc * plane;
                    out.extend_from_slice(&vs[bi * chunk..(bi + 1) * chunk]);
                }
            }
            let out = ArrayD::from_shape_vec(IxDyn(&[b, total, h, w]), out).expect("shape");
            (out, sizes)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let needs = self.any_needs(&ids);
        self.push(value, ids, Op::ConcatC { sizes }, needs)
    }

    /// Channel slice `[from, to)`.
    pub fn slice_c(&self, x: Var, from: usize, to: usize) -> Var {
        let value = self.with_value(x, |v| {
            let (b, c, h, w) = dims4(v.shape());
            assert!(from < to && to <= c, "slice_c range out of bounds");
            let vs = v.as_slice().expect("standard layout");
            let plane = h * w;
            let width = to - from;
            let mut out = Vec::with_capacity(b * width * plane);
            for bi in 0..b {
                let src = (bi * c + from) * plane;
                out.extend_from_slice(&vs[src..src + width * plane]);
            }
            ArrayD::from_shape_vec(IxDyn(&[b, width, h, w]), out).expect("shape")
        });
        let needs = self.needs(x.0);
        self.push(value, vec![x.0], Op::SliceC { from, to }, needs)
    }

    /// Zero-pad channels: `before` zero channels in front, `after` behind.
    pub fn pad_c(&self, x: Var, before: usize, after: usize) -> Var {
        let value = self.with_value(x, |v| {
            let (b, c, h, w) = dims4(v.shape());
            let vs = v.as_slice().expect("standard layout");
            let plane = h * w;
            let total = before + c + after;
            let mut out = vec![0.0f64; b * total * plane];
            for bi in 0..b {
                let src = bi * c * plane;
                let dst = (bi * total + before) * plane;
                out[dst..dst + c * plane].copy_from_slice(&vs[src..src + c * plane]);
            }
            ArrayD::from_shape_vec(IxDyn(&[b, total, h, w]), out).expect("shape")
        });
        let needs = self.needs(x.0);
        self.push(value, vec![x.0], Op::PadC { before, after }, needs)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn up_nearest2(&self, x: Var) -> Var {
        let value = self.with_value(x, resample::up_nearest2);
        let needs = self.needs(x.0);
        self.push(value, vec![x.0], Op::UpNearest2, needs)
    }

    /// Sum over non-overlapping 2x2 blocks (adjoint of `up_nearest2`).
    pub fn down_sum2(&self, x: Var) -> Var {
        let value = self.with_value(x, resample::down_sum2);
        let needs = self.needs(x.0);
        self.push(value, vec![x.0], Op::DownSum2, needs)
    }

    /// Bilinear resize to `(oh, ow)` (half-pixel centres, clamped edges).
    pub fn resize_bilinear(&self, x: Var, oh: usize, ow: usize) -> Var {
        let value = self.with_value(x, |v| resample::resize_bilinear(v, oh, ow));
        let needs = self.needs(x.0);
        self.push(value, vec![x.0], Op::ResizeBilinear, needs)
    }

    /// Adjoint of [`Tape::resize_bilinear`]: scatters an `(oh, ow)` map back
    /// onto an `(ih, iw)` grid with the same interpolation weights.
    pub fn resize_bilinear_t(&self, g: Var, ih: usize, iw: usize) -> Var {
        let value = self.with_value(g, |v| resample::resize_bilinear_t(v, ih, iw));
        let needs = self.needs(g.0);
        self.push(value, vec![g.0], Op::ResizeBilinearT, needs)
    }

    fn const_mask_of(&self, x: Var, f: impl Fn(f64) -> f64) -> Var {
        let mask = self.with_value(x, |v| map_into(v, &f));
        self.leaf_nograd(mask)
    }

    pub(crate) fn vjp(
        &self,
        op: &Op,
        node_id: usize,
        g: Var,
        inputs: &[usize],
        want: &[bool],
    ) -> Vec<Option<Var>> {
        let out = Var(node_id);
        let input = |k: usize| Var(inputs[k]);
        match op {
            Op::Leaf => vec![],
            Op::Add => vec![Some(g), Some(g)],
            Op::Sub => vec![Some(g), Some(self.neg(g))],
            Op::Mul => {
                let ga = want[0].then(|| self.mul(g, input(1)));
                let gb = want[1].then(|| self.mul(g, input(0)));
                vec![ga, gb]
            }
            Op::Neg => vec![Some(self.neg(g))],
            Op::Scale(c) => vec![Some(self.scale(g, *c))],
            Op::AddScalar => vec![Some(g)],
            Op::Relu => {
                let mask = self.const_mask_of(input(0), |v| if v > 0.0 { 1.0 } else { 0.0 });
                vec![Some(self.mul(g, mask))]
            }
            Op::LeakyRelu(slope) => {
                let s = *slope;
                let mask = self.const_mask_of(input(0), move |v| if v > 0.0 { 1.0 } else { s });
                vec![Some(self.mul(g, mask))]
            }
            Op::Sigmoid => {
                // y' = y (1 - y), written in tape ops so it stays differentiable
                let one_minus = self.add_scalar(self.neg(out), 1.0);
                vec![Some(self.mul(g, self.mul(out, one_minus)))]
            }
            Op::Tanh => {
                let one_minus_sq = self.add_scalar(self.neg(self.mul(out, out)), 1.0);
                vec![Some(self.mul(g, one_minus_sq))]
            }
            Op::Abs => {
                let mask = self.const_mask_of(input(0), |v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                vec![Some(self.mul(g, mask))]
            }
            Op::Sqrt => {
                // d sqrt(x) = g / (2 sqrt(x))
                let half_recip = self.scale(self.recip(out), 0.5);
                vec![Some(self.mul(g, half_recip))]
            }
            Op::Recip => {
                // d (1/x) = -g y^2
                let y2 = self.mul(out, out);
                vec![Some(self.neg(self.mul(g, y2)))]
            }
            Op::Conv2d { stride, pad } => {
                let (x, w) = (input(0), input(1));
                let xs = self.shape(x);
                let ws = self.shape(w);
                let gx = want[0].then(|| self.conv2d_igrad(g, w, *stride, *pad, xs[2], xs[3]));
                let gw = want[1].then(|| self.conv2d_wgrad(x, g, *stride, *pad, ws[2], ws[3]));
                vec![gx, gw]
            }
            Op::ConvIGrad { stride, pad } => {
                let (gin, w) = (input(0), input(1));
                let ws = self.shape(w);
                let gg = want[0].then(|| self.conv2d(g, w, *stride, *pad));
                let gw = want[1].then(|| self.conv2d_wgrad(g, gin, *stride, *pad, ws[2], ws[3]));
                vec![gg, gw]
            }
            Op::ConvWGrad { stride, pad } => {
                let (x, gin) = (input(0), input(1));
                let xs = self.shape(x);
                let gx = want[0].then(|| self.conv2d_igrad(gin, g, *stride, *pad, xs[2], xs[3]));
                let gg = want[1].then(|| self.conv2d(x, g, *stride, *pad));
                vec![gx, gg]
            }
            Op::AddBias => {
                let gb = want[1].then(|| self.sum_bhw(g));
                vec![Some(g), gb]
            }
            Op::MulBias => {
                let (x, s) = (input(0), input(1));
                let gx = want[0].then(|| self.mul_bias(g, s));
                let gs = want[1].then(|| self.sum_bhw(self.mul(g, x)));
                vec![gx, gs]
            }
            Op::SumBhw => {
                let xs = self.shape(input(0));
                vec![Some(self.broadcast_c(g, xs[0], xs[2], xs[3]))]
            }
            Op::BroadcastC => vec![Some(self.sum_bhw(g))],
            Op::SumAll => {
                let xs = self.shape(input(0));
                vec![Some(self.broadcast_all(g, &xs))]
            }
            Op::BroadcastAll => vec![Some(self.sum_all(g))],
            Op::SumChw => {
                let xs = self.shape(input(0));
                vec![Some(self.broadcast_chw(g, xs[1], xs[2], xs[3]))]
            }
            Op::BroadcastChw => vec![Some(self.sum_chw(g))],
            Op::SumHw => {
                let xs = self.shape(input(0));
                vec![Some(self.broadcast_hw(g, xs[2], xs[3]))]
            }
            Op::BroadcastHw => vec![Some(self.sum_hw(g))],
            Op::SumC => {
                let xs = self.shape(input(0));
                vec![Some(self.repeat_c(g, xs[1]))]
            }
            Op::RepeatC => vec![Some(self.sum_c(g))],
            Op::MulC1 => {
                let (a, x) = (input(0), input(1));
                let ga = want[0].then(|| self.sum_c(self.mul(g, x)));
                let gx = want[1].then(|| self.mul_c1(a, g));
                vec![ga, gx]
            }
            Op::ConcatC { sizes } => {
                let mut grads = Vec::with_capacity(sizes.len());
                let mut at = 0usize;
                for (k, &sz) in sizes.iter().enumerate() {
                    grads.push(want[k].then(|| self.slice_c(g, at, at + sz)));
                    at += sz;
                }
                grads
            }
            Op::SliceC { from, to } => {
                let xs = self.shape(input(0));
                vec![Some(self.pad_c(g, *from, xs[1] - to))]
            }
            Op::PadC { before, after } => {
                let gs = self.shape(out);
                vec![Some(self.slice_c(g, *before, gs[1] - after))]
            }
            Op::UpNearest2 => vec![Some(self.down_sum2(g))],
            Op::DownSum2 => vec![Some(self.up_nearest2(g))],
            Op::ResizeBilinear => {
                let xs = self.shape(input(0));
                vec![Some(self.resize_bilinear_t(g, xs[2], xs[3]))]
            }
            Op::ResizeBilinearT => {
                let in_shape = self.shape(input(0));
                vec![Some(self.resize_bilinear(g, in_shape[2], in_shape[3]))]
            }
        }
    }
}
