//! Elementwise and bias ops.

use super::{Arr, GradCtx, Tape, Var};
use ndarray::{ArrayD, Axis, IxDyn};

fn same_shape(a: &Arr, b: &Arr, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "add");
        let v = self.value(a) + self.value(b);
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|ctx: GradCtx| {
                vec![ctx.grad.clone(), ctx.grad.clone()]
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "sub");
        let v = self.value(a) - self.value(b);
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|ctx: GradCtx| {
                vec![ctx.grad.clone(), ctx.grad.mapv(|x| -x)]
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "mul");
        let v = self.value(a) * self.value(b);
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|ctx: GradCtx| {
                vec![ctx.grad * ctx.parents[1], ctx.grad * ctx.parents[0]]
            })),
        )
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x * c);
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |ctx: GradCtx| vec![ctx.grad.mapv(|g| g * c)])),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x + c);
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|ctx: GradCtx| vec![ctx.grad.clone()])),
        )
    }

    /// Add a length-D bias over the last axis of `a`.
    pub fn add_bias_last(&mut self, a: Var, bias: Var) -> Var {
        let d = *self.shape(a).last().expect("add_bias_last on 0-d");
        assert_eq!(self.shape(bias), [d], "add_bias_last: bias dim mismatch");
        let v = self.value(a) + self.value(bias);
        self.push(
            v,
            vec![a.0, bias.0],
            Some(Box::new(move |ctx: GradCtx| {
                let g = ctx.grad;
                let flat = g.view().into_shape_with_order((g.len() / d, d)).unwrap();
                let db = flat.sum_axis(Axis(0)).into_dyn();
                vec![g.clone(), db]
            })),
        )
    }

    /// Add a per-channel bias to an NCHW tensor.
    pub fn add_bias_chan(&mut self, a: Var, bias: Var) -> Var {
        let shape = self.shape(a).to_vec();
        assert_eq!(shape.len(), 4, "add_bias_chan expects NCHW");
        let c = shape[1];
        assert_eq!(self.shape(bias), [c], "add_bias_chan: bias dim mismatch");
        let bcast = self
            .value(bias)
            .view()
            .into_shape_with_order((1, c, 1, 1))
            .unwrap()
            .into_dyn()
            .to_owned();
        let v = self.value(a) + &bcast;
        self.push(
            v,
            vec![a.0, bias.0],
            Some(Box::new(move |ctx: GradCtx| {
                let g4 = ctx
                    .grad
                    .view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap();
                let db = g4
                    .sum_axis(Axis(3))
                    .sum_axis(Axis(2))
                    .sum_axis(Axis(0))
                    .into_dyn();
                vec![ctx.grad.clone(), db]
            })),
        )
    }

    /// Broadcast a [B, C] tensor over the spatial dims of an NCHW tensor and
    /// add (used to inject timestep embeddings into conv features).
    pub fn add_chan_spatial(&mut self, a: Var, bc: Var) -> Var {
        let shape = self.shape(a).to_vec();
        assert_eq!(shape.len(), 4, "add_chan_spatial expects NCHW");
        let (b, c) = (shape[0], shape[1]);
        assert_eq!(self.shape(bc), [b, c], "add_chan_spatial: [B,C] mismatch");
        let bcast = self
            .value(bc)
            .view()
            .into_shape_with_order((b, c, 1, 1))
            .unwrap()
            .into_dyn()
            .to_owned();
        let v = self.value(a) + &bcast;
        self.push(
            v,
            vec![a.0, bc.0],
            Some(Box::new(move |ctx: GradCtx| {
                let g4 = ctx
                    .grad
                    .view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap();
                let db = g4.sum_axis(Axis(3)).sum_axis(Axis(2)).into_dyn();
                vec![ctx.grad.clone(), db]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid_f);
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|ctx: GradCtx| {
                let mut g = ctx.value.mapv(|y| y * (1.0 - y));
                g *= ctx.grad;
                vec![g]
            })),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|ctx: GradCtx| {
                let mut g = ctx.value.mapv(|y| 1.0 - y * y);
                g *= ctx.grad;
                vec![g]
            })),
        )
    }

    /// x * sigmoid(x).
    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * sigmoid_f(x));
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|ctx: GradCtx| {
                let mut g = ctx.parents[0].mapv(|x| {
                    let s = sigmoid_f(x);
                    s * (1.0 + x * (1.0 - s))
                });
                g *= ctx.grad;
                vec![g]
            })),
        )
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu_f);
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|ctx: GradCtx| {
                let mut g = ctx.parents[0].mapv(gelu_df);
                g *= ctx.grad;
                vec![g]
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|ctx: GradCtx| {
                let mut g = ctx.parents[0].mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                g *= ctx.grad;
                vec![g]
            })),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|ctx: GradCtx| vec![ctx.grad * ctx.value])),
        )
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|ctx: GradCtx| {
                let mut g = ctx.parents[0].mapv(|x| 1.0 / x);
                g *= ctx.grad;
                vec![g]
            })),
        )
    }

    /// Identity value whose gradient is cut.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.constant(v)
    }

    /// Binary cross-entropy with logits against constant {0,1} targets,
    /// mean-reduced over every element. Numerically stable softplus form.
    pub fn bce_with_logits_mean(&mut self, logits: Var, targets: &Arr) -> Var {
        same_shape(self.value(logits), targets, "bce_with_logits");
        let n = targets.len() as f64;
        let z = self.value(logits);
        let loss = z
            .iter()
            .zip(targets.iter())
            .map(|(&z, &y)| softplus(z) - z * y)
            .sum::<f64>()
            / n;
        let t = targets.clone();
        let v = ndarray::arr0(loss).into_dyn();
        self.push(
            v,
            vec![logits.0],
            Some(Box::new(move |ctx: GradCtx| {
                let g0 = ctx.grad.iter().next().copied().unwrap();
                let mut g = ctx.parents[0].clone();
                g.zip_mut_with(&t, |z, &y| *z = (sigmoid_f(*z) - y) / n * g0);
                vec![g]
            })),
        )
    }

    /// Sum-reduced variant of `bce_with_logits_mean`.
    pub fn bce_with_logits_sum(&mut self, logits: Var, targets: &Arr) -> Var {
        let n = targets.len() as f64;
        let mean = self.bce_with_logits_mean(logits, targets);
        self.scale(mean, n)
    }
}

pub(crate) fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_f(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_df(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Standard-normal array via a seeded RNG stream.
pub fn randn(shape: &[usize], rng: &mut impl rand::Rng) -> Arr {
    use rand_distr::{Distribution, StandardNormal};
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}
