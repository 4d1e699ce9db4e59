//! Normalization layers and softmax.

use super::{GradCtx, Tape, Var};
use ndarray::{ArrayD, IxDyn};

/// Shared core for group/layer norm: rows are independent normalization
/// groups of length `m`, already laid out contiguously.
fn norm_rows(x: &[f64], m: usize, eps: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / m;
    let mut xhat = vec![0.0; x.len()];
    let mut mean = vec![0.0; rows];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let seg = &x[r * m..(r + 1) * m];
        let mu = seg.iter().sum::<f64>() / m as f64;
        let var = seg.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / m as f64;
        let rs = 1.0 / (var + eps).sqrt();
        for i in 0..m {
            xhat[r * m + i] = (seg[i] - mu) * rs;
        }
        mean[r] = mu;
        rstd[r] = rs;
    }
    (xhat, mean, rstd)
}

fn norm_rows_backward(dxhat: &[f64], xhat: &[f64], rstd: &[f64], m: usize) -> Vec<f64> {
    let rows = dxhat.len() / m;
    let mut dx = vec![0.0; dxhat.len()];
    for r in 0..rows {
        let d = &dxhat[r * m..(r + 1) * m];
        let h = &xhat[r * m..(r + 1) * m];
        let s1 = d.iter().sum::<f64>() / m as f64;
        let s2 = d.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / m as f64;
        for i in 0..m {
            dx[r * m + i] = rstd[r] * (d[i] - s1 - h[i] * s2);
        }
    }
    dx
}

impl Tape {
    /// Group normalization over an NCHW tensor with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 4, "group_norm expects NCHW");
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        assert!(c % groups == 0, "group_norm: channels not divisible");
        assert_eq!(self.shape(gamma), [c]);
        assert_eq!(self.shape(beta), [c]);
        let m = (c / groups) * h * w;
        let xs = self.value(x).as_slice().unwrap();
        let (xhat, _, _) = norm_rows(xs, m, eps);
        let gm = self.value(gamma).as_slice().unwrap();
        let bt = self.value(beta).as_slice().unwrap();
        let mut y = vec![0.0; xs.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * h * w;
                for k in 0..h * w {
                    y[base + k] = gm[ci] * xhat[base + k] + bt[ci];
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&shape), y).unwrap();
        self.push(
            out,
            vec![x.0, gamma.0, beta.0],
            Some(Box::new(move |ctx: GradCtx| {
                let xs = ctx.parents[0].as_slice().unwrap();
                let gm = ctx.parents[1].as_slice().unwrap();
                let g = ctx.grad.as_slice().unwrap();
                let (xhat, _, rstd) = norm_rows(xs, m, eps);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dxhat = vec![0.0; xs.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * h * w;
                        for k in 0..h * w {
                            let gi = g[base + k];
                            dgamma[ci] += gi * xhat[base + k];
                            dbeta[ci] += gi;
                            dxhat[base + k] = gi * gm[ci];
                        }
                    }
                }
                let dx = norm_rows_backward(&dxhat, &xhat, &rstd, m);
                vec![
                    ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), dx).unwrap(),
                    ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).unwrap(),
                    ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).unwrap(),
                ]
            })),
        )
    }

    /// Layer normalization over the last axis with affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("layer_norm on 0-d");
        assert_eq!(self.shape(gamma), [d]);
        assert_eq!(self.shape(beta), [d]);
        let xs = self.value(x).as_slice().unwrap();
        let (xhat, _, _) = norm_rows(xs, d, eps);
        let gm = self.value(gamma).as_slice().unwrap();
        let bt = self.value(beta).as_slice().unwrap();
        let mut y = vec![0.0; xs.len()];
        for (i, v) in y.iter_mut().enumerate() {
            *v = gm[i % d] * xhat[i] + bt[i % d];
        }
        let out = ArrayD::from_shape_vec(IxDyn(&shape), y).unwrap();
        self.push(
            out,
            vec![x.0, gamma.0, beta.0],
            Some(Box::new(move |ctx: GradCtx| {
                let xs = ctx.parents[0].as_slice().unwrap();
                let gm = ctx.parents[1].as_slice().unwrap();
                let g = ctx.grad.as_slice().unwrap();
                let (xhat, _, rstd) = norm_rows(xs, d, eps);
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dxhat = vec![0.0; xs.len()];
                for i in 0..xs.len() {
                    dgamma[i % d] += g[i] * xhat[i];
                    dbeta[i % d] += g[i];
                    dxhat[i] = g[i] * gm[i % d];
                }
                let dx = norm_rows_backward(&dxhat, &xhat, &rstd, d);
                vec![
                    ArrayD::from_shape_vec(IxDyn(ctx.parents[0].shape()), dx).unwrap(),
                    ArrayD::from_shape_vec(IxDyn(&[d]), dgamma).unwrap(),
                    ArrayD::from_shape_vec(IxDyn(&[d]), dbeta).unwrap(),
                ]
            })),
        )
    }

    /// Row-wise softmax over the last axis (max-shifted for stability).
    /// Masking is done upstream by adding a large negative bias; a bias of
    /// -1e30 underflows to an exact zero weight.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("softmax on 0-d");
        let xs = self.value(x).as_slice().unwrap();
        let mut y = vec![0.0; xs.len()];
        for r in 0..xs.len() / d {
            let seg = &xs[r * d..(r + 1) * d];
            let mx = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in 0..d {
                let e = (seg[i] - mx).exp();
                y[r * d + i] = e;
                z += e;
            }
            for i in 0..d {
                y[r * d + i] /= z;
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&shape), y).unwrap();
        self.push(
            out,
            vec![x.0],
            Some(Box::new(move |ctx: GradCtx| {
                let y = ctx.value.as_slice().unwrap();
                let g = ctx.grad.as_slice().unwrap();
                let mut dx = vec![0.0; y.len()];
                for r in 0..y.len() / d {
                    let ys = &y[r * d..(r + 1) * d];
                    let gs = &g[r * d..(r + 1) * d];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for i in 0..d {
                        dx[r * d + i] = ys[i] * (gs[i] - dot);
                    }
                }
                vec![ArrayD::from_shape_vec(IxDyn(ctx.value.shape()), dx).unwrap()]
            })),
        )
    }
}
