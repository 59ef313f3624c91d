//! Differentiable operations on [`Var`].

use std::ops::{Add, Mul, Neg, Sub};
use std::rc::Rc;

use crate::array::Array;
use crate::tape::{Gradients, Tape, Var};

/// Records an operation whose gradient is needed iff any parent needs one.
pub(crate) fn record<'t>(
    tape: &'t Tape,
    value: Array,
    parents: &[Var<'t>],
    backward: impl Fn(&Array, &mut Gradients) + 'static,
) -> Var<'t> {
    for p in parents {
        assert!(std::ptr::eq(p.tape, tape), "operands live on different tapes");
    }
    let requires = parents.iter().any(Var::requires_grad);
    let backward: Option<crate::tape::BackwardFn> = if requires {
        Some(Box::new(backward))
    } else {
        None
    };
    tape.push(Rc::new(value), requires, backward)
}

fn assert_same_shape(a: &Array, b: &Array, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
}

impl<'t> Var<'t> {
    fn unary(
        self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let (xc, yc) = (Rc::clone(&x), Rc::clone(&y));
        let id = self.id();
        record(self.tape, (*y).clone(), &[self], move |g, grads| {
            let slot = grads.slot(id, xc.shape());
            for (i, s) in slot.iter_mut().enumerate() {
                *s += g.data()[i] * df(xc.data()[i], yc.data()[i]);
            }
        })
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, |x, _| x.signum())
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'t> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.unary(
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    /// `max(x, floor)`; the gradient is blocked where the floor is active.
    pub fn clamp_min(self, floor: f64) -> Var<'t> {
        self.unary(
            move |x| x.max(floor),
            move |x, _| if x > floor { 1.0 } else { 0.0 },
        )
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(move |x| x * c, move |_, _| c)
    }

    /// Rounds half-to-even in the forward pass and passes the gradient through
    /// unchanged (straight-through estimator).
    pub fn round_ste(self) -> Var<'t> {
        self.unary(f64::round_ties_even, |_, _| 1.0)
    }

    /// A constant copy of this value; gradients stop here.
    pub fn detach(self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    fn binary(
        self,
        rhs: Var<'t>,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        dfa: impl Fn(f64, f64) -> f64 + 'static,
        dfb: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let a = self.value();
        let b = rhs.value();
        assert_same_shape(&a, &b, name);
        let y = a.zip_map(&b, f);
        let (ia, ib) = (self.id(), rhs.id());
        record(self.tape, y, &[self, rhs], move |g, grads| {
            if grads.wants(ia) {
                let slot = grads.slot(ia, a.shape());
                for (i, s) in slot.iter_mut().enumerate() {
                    *s += g.data()[i] * dfa(a.data()[i], b.data()[i]);
                }
            }
            if grads.wants(ib) {
                let slot = grads.slot(ib, b.shape());
                for (i, s) in slot.iter_mut().enumerate() {
                    *s += g.data()[i] * dfb(a.data()[i], b.data()[i]);
                }
            }
        })
    }

    pub fn div(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, "div", |a, b| a / b, |_, b| 1.0 / b, |a, b| -a / (b * b))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let id = self.id();
        record(self.tape, Array::scalar(x.sum()), &[self], move |g, grads| {
            let gv = g.item();
            for s in grads.slot(id, &shape) {
                *s += gv;
            }
        })
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Var<'t> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let y = (*x).clone().reshape(shape);
        let id = self.id();
        record(self.tape, y, &[self], move |g, grads| {
            for (s, gv) in grads.slot(id, &in_shape).iter_mut().zip(g.data()) {
                *s += gv;
            }
        })
    }

    /// Sums `[n, c, h, w]` over channels into `[n, 1, h, w]`.
    pub fn sum_channels(self) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let mut out = Array::zeros([n, 1, h, w]);
        for b in 0..n {
            for ch in 0..c {
                let src = &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                for (o, v) in out.data_mut()[b * hw..(b + 1) * hw].iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        let shape = x.shape().to_vec();
        let id = self.id();
        record(self.tape, out, &[self], move |g, grads| {
            let slot = grads.slot(id, &shape);
            for b in 0..n {
                for ch in 0..c {
                    let dst = &mut slot[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    for (d, gv) in dst.iter_mut().zip(&g.data()[b * hw..(b + 1) * hw]) {
                        *d += gv;
                    }
                }
            }
        })
    }

    /// Broadcasts a `[c]` vector to `[n, c, h, w]`.
    pub fn expand_channels(self, n: usize, h: usize, w: usize) -> Var<'t> {
        let v = self.value();
        assert_eq!(v.shape().len(), 1, "expand_channels: expected a vector");
        let c = v.len();
        let hw = h * w;
        let mut out = Array::zeros([n, c, h, w]);
        for (k, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            chunk.fill(v.data()[k % c]);
        }
        let id = self.id();
        record(self.tape, out, &[self], move |g, grads| {
            let slot = grads.slot(id, &[c]);
            for (k, chunk) in g.data().chunks(hw).enumerate() {
                slot[k % c] += chunk.iter().sum::<f64>();
            }
        })
    }

    /// Adds a `[n, 1, h, w]` field to every channel of `[n, c, h, w]`.
    pub fn add_channel_broadcast(self, field: Var<'t>) -> Var<'t> {
        let x = self.value();
        let p = field.value();
        let (n, c, h, w) = x.dims4();
        assert_eq!(p.shape(), [n, 1, h, w], "add_channel_broadcast: field shape");
        let hw = h * w;
        let mut out = (*x).clone();
        for b in 0..n {
            for ch in 0..c {
                let dst = &mut out.data_mut()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                for (d, v) in dst.iter_mut().zip(&p.data()[b * hw..(b + 1) * hw]) {
                    *d += v;
                }
            }
        }
        let (ix, ip) = (self.id(), field.id());
        let xs = x.shape().to_vec();
        let ps = p.shape().to_vec();
        record(self.tape, out, &[self, field], move |g, grads| {
            if grads.wants(ix) {
                for (s, gv) in grads.slot(ix, &xs).iter_mut().zip(g.data()) {
                    *s += gv;
                }
            }
            if grads.wants(ip) {
                let slot = grads.slot(ip, &ps);
                for b in 0..n {
                    for ch in 0..c {
                        let src = &g.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                        for (d, gv) in slot[b * hw..(b + 1) * hw].iter_mut().zip(src) {
                            *d += gv;
                        }
                    }
                }
            }
        })
    }

    /// Multiplies every channel of `[n, c, h, w]` by a `[n, 1, h, w]` field.
    pub fn mul_channel_broadcast(self, field: Var<'t>) -> Var<'t> {
        let x = self.value();
        let m = field.value();
        let (n, c, h, w) = x.dims4();
        assert_eq!(m.shape(), [n, 1, h, w], "mul_channel_broadcast: field shape");
        let hw = h * w;
        let mut out = (*x).clone();
        for b in 0..n {
            for ch in 0..c {
                let dst = &mut out.data_mut()[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                for (d, v) in dst.iter_mut().zip(&m.data()[b * hw..(b + 1) * hw]) {
                    *d *= v;
                }
            }
        }
        let (ix, im) = (self.id(), field.id());
        record(self.tape, out, &[self, field], move |g, grads| {
            if grads.wants(ix) {
                let slot = grads.slot(ix, x.shape());
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for k in 0..hw {
                            slot[base + k] += g.data()[base + k] * m.data()[b * hw + k];
                        }
                    }
                }
            }
            if grads.wants(im) {
                let slot = grads.slot(im, m.shape());
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for k in 0..hw {
                            slot[b * hw + k] += g.data()[base + k] * x.data()[base + k];
                        }
                    }
                }
            }
        })
    }

    /// Concatenates rank-4 values along the channel axis.
    pub fn concat_channels(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat_channels of nothing");
        let tape = parts[0].tape;
        let values: Vec<Rc<Array>> = parts.iter().map(Var::value).collect();
        let (n, _, h, w) = values[0].dims4();
        let hw = h * w;
        let channels: Vec<usize> = values
            .iter()
            .map(|v| {
                let (vn, vc, vh, vw) = v.dims4();
                assert_eq!((vn, vh, vw), (n, h, w), "concat_channels: shape mismatch");
                vc
            })
            .collect();
        let total: usize = channels.iter().sum();
        let mut out = Array::zeros([n, total, h, w]);
        for b in 0..n {
            let mut offset = 0;
            for (v, &c) in values.iter().zip(&channels) {
                let src = &v.data()[b * c * hw..(b + 1) * c * hw];
                let start = (b * total + offset) * hw;
                out.data_mut()[start..start + c * hw].copy_from_slice(src);
                offset += c;
            }
        }
        let ids: Vec<usize> = parts.iter().map(Var::id).collect();
        record(tape, out, parts, move |g, grads| {
            let mut offset = 0;
            for (&id, &c) in ids.iter().zip(&channels) {
                if grads.wants(id) {
                    let slot = grads.slot(id, &[n, c, h, w]);
                    for b in 0..n {
                        let start = (b * total + offset) * hw;
                        for (d, gv) in slot[b * c * hw..(b + 1) * c * hw]
                            .iter_mut()
                            .zip(&g.data()[start..start + c * hw])
                        {
                            *d += gv;
                        }
                    }
                }
                offset += c;
            }
        })
    }

    /// Channels `start..start + len` of a rank-4 value.
    pub fn slice_channels(self, start: usize, len: usize) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert!(start + len <= c, "slice_channels out of range");
        let hw = h * w;
        let mut out = Array::zeros([n, len, h, w]);
        for b in 0..n {
            let src = (b * c + start) * hw;
            out.data_mut()[b * len * hw..(b + 1) * len * hw]
                .copy_from_slice(&x.data()[src..src + len * hw]);
        }
        let id = self.id();
        let shape = x.shape().to_vec();
        record(self.tape, out, &[self], move |g, grads| {
            let slot = grads.slot(id, &shape);
            for b in 0..n {
                let dst = (b * c + start) * hw;
                for (d, gv) in slot[dst..dst + len * hw]
                    .iter_mut()
                    .zip(&g.data()[b * len * hw..(b + 1) * len * hw])
                {
                    *d += gv;
                }
            }
        })
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(self, factor: usize) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let (oh, ow) = (h * factor, w * factor);
        let mut out = Array::zeros([n, c, oh, ow]);
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out.data_mut()[p * oh * ow..(p + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    dst[oy * ow + ox] = src[(oy / factor) * w + ox / factor];
                }
            }
        }
        let id = self.id();
        let shape = x.shape().to_vec();
        record(self.tape, out, &[self], move |g, grads| {
            let slot = grads.slot(id, &shape);
            for p in 0..n * c {
                let gsrc = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                let dst = &mut slot[p * h * w..(p + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        dst[(oy / factor) * w + ox / factor] += gsrc[oy * ow + ox];
                    }
                }
            }
        })
    }

    /// Average pooling over non-overlapping `factor × factor` windows.
    pub fn avg_pool(self, factor: usize) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert!(
            h % factor == 0 && w % factor == 0,
            "avg_pool: {h}x{w} not divisible by {factor}"
        );
        let (oh, ow) = (h / factor, w / factor);
        let inv = 1.0 / (factor * factor) as f64;
        let mut out = Array::zeros([n, c, oh, ow]);
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out.data_mut()[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..h {
                for xx in 0..w {
                    dst[(y / factor) * ow + xx / factor] += src[y * w + xx] * inv;
                }
            }
        }
        let id = self.id();
        let shape = x.shape().to_vec();
        record(self.tape, out, &[self], move |g, grads| {
            let slot = grads.slot(id, &shape);
            for p in 0..n * c {
                let gsrc = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                let dst = &mut slot[p * h * w..(p + 1) * h * w];
                for y in 0..h {
                    for xx in 0..w {
                        dst[y * w + xx] += gsrc[(y / factor) * ow + xx / factor] * inv;
                    }
                }
            }
        })
    }

    /// Log-softmax over the channel axis of `[n, c, h, w]`.
    pub fn log_softmax_channels(self) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let mut out = Array::zeros([n, c, h, w]);
        for b in 0..n {
            for k in 0..hw {
                let at = |ch: usize| (b * c + ch) * hw + k;
                let max = (0..c).map(|ch| x.data()[at(ch)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max
                    + (0..c)
                        .map(|ch| (x.data()[at(ch)] - max).exp())
                        .sum::<f64>()
                        .ln();
                for ch in 0..c {
                    out.data_mut()[at(ch)] = x.data()[at(ch)] - lse;
                }
            }
        }
        let y = Rc::new(out);
        let yc = Rc::clone(&y);
        let id = self.id();
        let shape = x.shape().to_vec();
        record(self.tape, (*y).clone(), &[self], move |g, grads| {
            let slot = grads.slot(id, &shape);
            for b in 0..n {
                for k in 0..hw {
                    let at = |ch: usize| (b * c + ch) * hw + k;
                    let gsum: f64 = (0..c).map(|ch| g.data()[at(ch)]).sum();
                    for ch in 0..c {
                        slot[at(ch)] += g.data()[at(ch)] - yc.data()[at(ch)].exp() * gsum;
                    }
                }
            }
        })
    }

    /// Picks one channel per pixel: `out[b, 0, y, x] = in[b, index[b, y, x], y, x]`.
    pub fn gather_channels(self, index: &[usize]) -> Var<'t> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        assert_eq!(index.len(), n * hw, "gather_channels: index length");
        let index: Rc<Vec<usize>> = Rc::new(index.to_vec());
        let mut out = Array::zeros([n, 1, h, w]);
        for b in 0..n {
            for k in 0..hw {
                let ch = index[b * hw + k];
                assert!(ch < c, "gather_channels: channel {ch} out of range {c}");
                out.data_mut()[b * hw + k] = x.data()[(b * c + ch) * hw + k];
            }
        }
        let id = self.id();
        let shape = x.shape().to_vec();
        record(self.tape, out, &[self], move |g, grads| {
            let slot = grads.slot(id, &shape);
            for b in 0..n {
                for k in 0..hw {
                    let ch = index[b * hw + k];
                    slot[(b * c + ch) * hw + k] += g.data()[b * hw + k];
                }
            }
        })
    }

    /// Applies `left · X · right` to every trailing `h × w` plane.
    ///
    /// `left` is `[p, h]` and `right` is `[w, q]`; the result has trailing
    /// dimensions `[p, q]`. Both matrices are constants.
    pub fn planar_transform(self, left: &Array, right: &Array) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let r = shape.len();
        assert!(r >= 2, "planar_transform needs rank >= 2");
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let (p, lh) = (left.shape()[0], left.shape()[1]);
        let (rw, q) = (right.shape()[0], right.shape()[1]);
        assert_eq!((lh, rw), (h, w), "planar_transform: matrix shapes");
        let planes = x.len() / (h * w);
        let mut out_shape = shape.clone();
        out_shape[r - 2] = p;
        out_shape[r - 1] = q;
        let mut out = Array::zeros(out_shape);
        let mut tmp = vec![0.0; p * w];
        for k in 0..planes {
            let src = &x.data()[k * h * w..(k + 1) * h * w];
            crate::gemm::gemm(p, h, w, left.data(), (h, 1), src, (w, 1), &mut tmp, 0.0);
            let dst = &mut out.data_mut()[k * p * q..(k + 1) * p * q];
            crate::gemm::gemm(p, w, q, &tmp, (w, 1), right.data(), (q, 1), dst, 0.0);
        }
        let (left, right) = (left.clone(), right.clone());
        let id = self.id();
        record(self.tape, out, &[self], move |g, grads| {
            // dX = leftᵀ · dY · rightᵀ
            let slot = grads.slot(id, &shape);
            let mut tmp = vec![0.0; h * q];
            for k in 0..planes {
                let gsrc = &g.data()[k * p * q..(k + 1) * p * q];
                crate::gemm::gemm(h, p, q, left.data(), (1, h), gsrc, (q, 1), &mut tmp, 0.0);
                let dst = &mut slot[k * h * w..(k + 1) * h * w];
                crate::gemm::gemm(h, q, w, &tmp, (q, 1), right.data(), (1, q), dst, 1.0);
            }
        })
    }

    /// Weight-normalised kernel `g · v / ‖v‖`, with one norm per output
    /// channel (the leading axis of `v`).
    pub fn weight_norm(v: Var<'t>, g: Var<'t>) -> Var<'t> {
        let vv = v.value();
        let gv = g.value();
        let rows = vv.shape()[0];
        assert_eq!(gv.len(), rows, "weight_norm: gain length");
        let cols = vv.len() / rows;
        let norms: Vec<f64> = (0..rows)
            .map(|r| {
                vv.data()[r * cols..(r + 1) * cols]
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt()
                    .max(1e-12)
            })
            .collect();
        let mut out = (*vv).clone();
        for r in 0..rows {
            let scale = gv.data()[r] / norms[r];
            for x in &mut out.data_mut()[r * cols..(r + 1) * cols] {
                *x *= scale;
            }
        }
        let (iv, ig) = (v.id(), g.id());
        let gshape = gv.shape().to_vec();
        record(v.tape, out, &[v, g], move |grad, grads| {
            for r in 0..rows {
                let vr = &vv.data()[r * cols..(r + 1) * cols];
                let gr = &grad.data()[r * cols..(r + 1) * cols];
                let dot: f64 = vr.iter().zip(gr).map(|(a, b)| a * b).sum();
                let norm = norms[r];
                if grads.wants(ig) {
                    grads.slot(ig, &gshape)[r] += dot / norm;
                }
                if grads.wants(iv) {
                    let gain = gv.data()[r];
                    let slot = &mut grads.slot(iv, vv.shape())[r * cols..(r + 1) * cols];
                    for k in 0..cols {
                        slot[k] += gain / norm * (gr[k] - dot / (norm * norm) * vr[k]);
                    }
                }
            }
        })
    }

    /// Divides a kernel by its largest singular value, estimated by power
    /// iteration on the `[out, in·k·k]` matrix view.
    ///
    /// The singular vectors are treated as constants, so the gradient is that
    /// of `W / (uᵀ W v)` with `u` and `v` fixed.
    pub fn spectral_norm(w: Var<'t>, iterations: usize) -> Var<'t> {
        let wv = w.value();
        let rows = wv.shape()[0];
        let cols = wv.len() / rows;
        let (u, v, sigma) = power_iteration(wv.data(), rows, cols, iterations);
        let out = wv.map(|x| x / sigma);
        let id = w.id();
        record(w.tape, out, &[w], move |g, grads| {
            let inner: f64 = g.data().iter().zip(wv.data()).map(|(a, b)| a * b).sum();
            let slot = grads.slot(id, wv.shape());
            for r in 0..rows {
                for k in 0..cols {
                    let i = r * cols + k;
                    slot[i] += g.data()[i] / sigma - inner / (sigma * sigma) * u[r] * v[k];
                }
            }
        })
    }

    /// Probability mass of the unit-width bin centred on each `y` under a
    /// Gaussian `N(mu, sigma²)`, floored at `lower_bound`.
    ///
    /// Evaluated on the side of the mean with the larger tail so the
    /// difference of CDFs does not cancel catastrophically.
    pub fn gaussian_likelihood(
        y: Var<'t>,
        mu: Var<'t>,
        sigma: Var<'t>,
        lower_bound: f64,
    ) -> Var<'t> {
        let (yv, mv, sv) = (y.value(), mu.value(), sigma.value());
        assert_same_shape(&yv, &mv, "gaussian_likelihood(mu)");
        assert_same_shape(&yv, &sv, "gaussian_likelihood(sigma)");
        let len = yv.len();
        let mut out = Array::zeros(yv.shape());
        // Per element: d L / d(y - mu) and d L / d sigma.
        let mut d_delta = vec![0.0; len];
        let mut d_sigma = vec![0.0; len];
        for i in 0..len {
            let delta = yv.data()[i] - mv.data()[i];
            let s = sv.data()[i];
            let d = delta.abs();
            let a = (0.5 - d) / s;
            let b = (-0.5 - d) / s;
            let lik = normal_cdf(a) - normal_cdf(b);
            if lik > lower_bound {
                out.data_mut()[i] = lik;
                let (pa, pb) = (normal_pdf(a), normal_pdf(b));
                d_delta[i] = -(pa - pb) / s * delta.signum();
                d_sigma[i] = -(pa * a - pb * b) / s;
            } else {
                out.data_mut()[i] = lower_bound;
            }
        }
        let (iy, im, is) = (y.id(), mu.id(), sigma.id());
        let shape = yv.shape().to_vec();
        record(y.tape, out, &[y, mu, sigma], move |g, grads| {
            if grads.wants(iy) {
                for (i, s) in grads.slot(iy, &shape).iter_mut().enumerate() {
                    *s += g.data()[i] * d_delta[i];
                }
            }
            if grads.wants(im) {
                for (i, s) in grads.slot(im, &shape).iter_mut().enumerate() {
                    *s -= g.data()[i] * d_delta[i];
                }
            }
            if grads.wants(is) {
                for (i, s) in grads.slot(is, &shape).iter_mut().enumerate() {
                    *s += g.data()[i] * d_sigma[i];
                }
            }
        })
    }
}

pub(crate) fn power_iteration(
    w: &[f64],
    rows: usize,
    cols: usize,
    iterations: usize,
) -> (Vec<f64>, Vec<f64>, f64) {
    let normalize = |x: &mut Vec<f64>| {
        let n = x.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        x.iter_mut().for_each(|a| *a /= n);
    };
    let mut u = vec![1.0 / (rows as f64).sqrt(); rows];
    let mut v = vec![0.0; cols];
    for _ in 0..iterations.max(1) {
        for (k, vk) in v.iter_mut().enumerate() {
            *vk = (0..rows).map(|r| w[r * cols + k] * u[r]).sum();
        }
        normalize(&mut v);
        for (r, ur) in u.iter_mut().enumerate() {
            *ur = (0..cols).map(|k| w[r * cols + k] * v[k]).sum();
        }
        normalize(&mut u);
    }
    let sigma: f64 = (0..rows)
        .map(|r| u[r] * (0..cols).map(|k| w[r * cols + k] * v[k]).sum::<f64>())
        .sum();
    (u, v, sigma.max(1e-12))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.scale(rhs)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}
