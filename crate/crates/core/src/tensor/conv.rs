//! 2-d convolution (im2col) and nearest-neighbour upsampling, NCHW layout.

use super::{Arr, GradCtx, Tape, Var};
use ndarray::{Array2, Array4, ArrayView3, Ix4};

pub(crate) fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold one image `[C, H, W]` into `[C*kh*kw, OH*OW]`.
fn im2col(
    x: &ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut cols = Array2::<f64>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        cols[[row, oi * ow + oj]] = x[[ci, ii as usize, jj as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Fold gradient columns back onto the input image (transpose of `im2col`).
fn col2im(
    cols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> ndarray::Array3<f64> {
    let mut img = ndarray::Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        img[[ci, ii as usize, jj as usize]] += cols[[row, oi * ow + oj]];
                    }
                }
            }
        }
    }
    img
}

fn conv_forward(
    x: &Arr,
    w: &Arr,
    stride: usize,
    pad: usize,
) -> (Array4<f64>, usize, usize) {
    let xv = x.view().into_dimensionality::<Ix4>().unwrap();
    let wv = w.view().into_dimensionality::<Ix4>().unwrap();
    let (b, cin, h, wdt) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    let (cout, kin, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
    assert_eq!(cin, kin, "conv2d: channel mismatch");
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(wdt, kw, stride, pad);
    let w2 = wv.into_shape_with_order((cout, kin * kh * kw)).unwrap();
    let mut out = Array4::<f64>::zeros((b, cout, oh, ow));
    for bi in 0..b {
        let cols = im2col(&xv.index_axis(ndarray::Axis(0), bi), kh, kw, stride, pad, oh, ow);
        let y = w2.dot(&cols); // [cout, oh*ow]
        out.index_axis_mut(ndarray::Axis(0), bi)
            .assign(&y.into_shape_with_order((cout, oh, ow)).unwrap());
    }
    (out, oh, ow)
}

impl Tape {
    /// 2-d convolution: input `[B, Cin, H, W]`, weight `[Cout, Cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, stride: usize, pad: usize) -> Var {
        let (out, _, _) = conv_forward(self.value(x), self.value(weight), stride, pad);
        self.push(
            out.into_dyn(),
            vec![x.0, weight.0],
            Some(Box::new(move |ctx: GradCtx| {
                let xv = ctx.parents[0].view().into_dimensionality::<Ix4>().unwrap();
                let wv = ctx.parents[1].view().into_dimensionality::<Ix4>().unwrap();
                let gv = ctx.grad.view().into_dimensionality::<Ix4>().unwrap();
                let (b, cin, h, wdt) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                let (cout, _, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
                let (oh, ow) = (gv.shape()[2], gv.shape()[3]);
                let w2 = wv.into_shape_with_order((cout, cin * kh * kw)).unwrap();
                let mut dx = Array4::<f64>::zeros((b, cin, h, wdt));
                let mut dw2 = Array2::<f64>::zeros((cout, cin * kh * kw));
                for bi in 0..b {
                    let cols =
                        im2col(&xv.index_axis(ndarray::Axis(0), bi), kh, kw, stride, pad, oh, ow);
                    let g2 = gv
                        .index_axis(ndarray::Axis(0), bi)
                        .into_shape_with_order((cout, oh * ow))
                        .unwrap()
                        .to_owned();
                    dw2 += &g2.dot(&cols.t());
                    let dcols = w2.t().dot(&g2);
                    dx.index_axis_mut(ndarray::Axis(0), bi)
                        .assign(&col2im(&dcols, cin, h, wdt, kh, kw, stride, pad, oh, ow));
                }
                let dw = dw2
                    .into_shape_with_order((cout, cin, kh, kw))
                    .unwrap()
                    .into_dyn();
                vec![dx.into_dyn(), dw]
            })),
        )
    }

    /// Nearest-neighbour 2x upsample of an NCHW tensor.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (b, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let mut out = Array4::<f64>::zeros((b, c, 2 * h, 2 * w));
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let v = xv[[bi, ci, i, j]];
                        out[[bi, ci, 2 * i, 2 * j]] = v;
                        out[[bi, ci, 2 * i, 2 * j + 1]] = v;
                        out[[bi, ci, 2 * i + 1, 2 * j]] = v;
                        out[[bi, ci, 2 * i + 1, 2 * j + 1]] = v;
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            vec![x.0],
            Some(Box::new(|ctx: GradCtx| {
                let gv = ctx.grad.view().into_dimensionality::<Ix4>().unwrap();
                let (b, c, h2, w2) = (gv.shape()[0], gv.shape()[1], gv.shape()[2], gv.shape()[3]);
                let (h, w) = (h2 / 2, w2 / 2);
                let mut dx = Array4::<f64>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                dx[[bi, ci, i, j]] = gv[[bi, ci, 2 * i, 2 * j]]
                                    + gv[[bi, ci, 2 * i, 2 * j + 1]]
                                    + gv[[bi, ci, 2 * i + 1, 2 * j]]
                                    + gv[[bi, ci, 2 * i + 1, 2 * j + 1]];
                            }
                        }
                    }
                }
                vec![dx.into_dyn()]
            })),
        )
    }
}
