//! 2-D convolution via im2col and GEMM.

use crate::array::Array;
use crate::gemm::gemm;
use crate::ops::record;
use crate::tape::Var;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// A pointwise stride-1 convolution reads the input plane directly.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(g: &Geometry, x: &[f64], cols: &mut [f64]) {
    let p = g.cols();
    for c in 0..g.ci {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &Geometry, cols: &[f64], dx: &mut [f64]) {
    let p = g.cols();
    for c in 0..g.ci {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    /// Zero-padded 2-D convolution of `[n, ci, h, w]` with a `[co, ci, kh, kw]`
    /// kernel and an optional `[co]` bias.
    pub fn conv2d(
        self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        pad: usize,
    ) -> Var<'t> {
        assert!(stride >= 1, "conv2d: stride must be positive");
        let x = self.value();
        let wt = weight.value();
        let (n, ci, h, w) = x.dims4();
        let (co, wci, kh, kw) = wt.dims4();
        assert_eq!(ci, wci, "conv2d: input has {ci} channels, kernel expects {wci}");
        assert!(
            h + 2 * pad >= kh && w + 2 * pad >= kw,
            "conv2d: kernel larger than padded input"
        );
        let g = Geometry {
            ci,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        };
        let (k, p) = (g.rows(), g.cols());
        let bias_value = bias.map(|b| {
            let b = b.value();
            assert_eq!(b.len(), co, "conv2d: bias length");
            b
        });

        let mut out = Array::zeros([n, co, g.oh, g.ow]);
        let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
        for b in 0..n {
            let xb = &x.data()[b * ci * h * w..(b + 1) * ci * h * w];
            let ob = &mut out.data_mut()[b * co * p..(b + 1) * co * p];
            if let Some(bv) = &bias_value {
                for (o, row) in ob.chunks_mut(p).enumerate() {
                    row.fill(bv.data()[o]);
                }
            }
            let beta = if bias_value.is_some() { 1.0 } else { 0.0 };
            let src: &[f64] = if g.is_pointwise() {
                xb
            } else {
                im2col(&g, xb, &mut cols);
                &cols
            };
            gemm(co, k, p, wt.data(), (k, 1), src, (p, 1), ob, beta);
        }

        let (ix, iw) = (self.id(), weight.id());
        let ib = bias.map(|b| b.id());
        let mut parents = vec![self, weight];
        parents.extend(bias);
        record(self.tape, out, &parents, move |grad, grads| {
            let want_x = grads.wants(ix);
            let want_w = grads.wants(iw);
            let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
            let mut dcols = vec![0.0; if want_x && !g.is_pointwise() { k * p } else { 0 }];
            for b in 0..n {
                let gb = &grad.data()[b * co * p..(b + 1) * co * p];
                if let Some(ib) = ib.filter(|&id| grads.wants(id)) {
                    let slot = grads.slot(ib, &[co]);
                    for (o, row) in gb.chunks(p).enumerate() {
                        slot[o] += row.iter().sum::<f64>();
                    }
                }
                if want_w {
                    let xb = &x.data()[b * ci * h * w..(b + 1) * ci * h * w];
                    let src: &[f64] = if g.is_pointwise() {
                        xb
                    } else {
                        im2col(&g, xb, &mut cols);
                        &cols
                    };
                    // dW += dY · colsᵀ
                    let slot = grads.slot(iw, wt.shape());
                    gemm(co, p, k, gb, (p, 1), src, (1, p), slot, 1.0);
                }
                if want_x {
                    let slot = grads.slot(ix, x.shape());
                    let dxb = &mut slot[b * ci * h * w..(b + 1) * ci * h * w];
                    if g.is_pointwise() {
                        gemm(k, co, p, wt.data(), (1, k), gb, (p, 1), dxb, 1.0);
                    } else {
                        // dcols = Wᵀ · dY, then scatter back.
                        gemm(k, co, p, wt.data(), (1, k), gb, (p, 1), &mut dcols, 0.0);
                        col2im(&g, &dcols, dxb);
                    }
                }
            }
        })
    }
}
