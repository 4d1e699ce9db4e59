//! Layer primitives built on the tape: linear, conv, norms, attention,
//! residual blocks, sinusoidal embeddings, parameter init.

use crate::tensor::{randn, Arr, ParamId, ParamStore, Tape, Var};
use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha12Rng;

/// Largest group count <= 8 that divides the channel count.
pub fn gn_groups(channels: usize) -> usize {
    (1..=8.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

fn normal_init(rng: &mut ChaCha12Rng, shape: &[usize], std: f64) -> Arr {
    let mut a = randn(shape, rng);
    a.mapv_inplace(|x| x * std);
    a
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        let w = store.add(format!("{prefix}.w"), normal_init(rng, &[in_dim, out_dim], std));
        let b = bias.then(|| store.add(format!("{prefix}.b"), ArrayD::zeros(IxDyn(&[out_dim]))));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    /// Applies to the last axis of `x` (any leading shape).
    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Var {
        let shape = t.shape(x).to_vec();
        let d = *shape.last().unwrap();
        assert_eq!(d, self.in_dim, "Linear: input dim mismatch");
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = t.reshape(x, &[rows, d]);
        let w = t.param(s, self.w);
        let mut y = t.matmul(flat, w);
        if let Some(b) = self.b {
            let bv = t.param(s, b);
            y = t.add_bias_last(y, bv);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        t.reshape(y, &out_shape)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w = store.add(
            format!("{prefix}.w"),
            normal_init(rng, &[out_ch, in_ch, kernel, kernel], std),
        );
        let b = Some(store.add(format!("{prefix}.b"), ArrayD::zeros(IxDyn(&[out_ch]))));
        Self {
            w,
            b,
            stride,
            pad,
            in_ch,
            out_ch,
        }
    }

    /// Same as `new` but the kernel starts at zero (residual tails).
    pub fn new_zeroed(
        store: &mut ParamStore,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.add(
            format!("{prefix}.w"),
            ArrayD::zeros(IxDyn(&[out_ch, in_ch, kernel, kernel])),
        );
        let b = Some(store.add(format!("{prefix}.b"), ArrayD::zeros(IxDyn(&[out_ch]))));
        Self {
            w,
            b,
            stride,
            pad,
            in_ch,
            out_ch,
        }
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Var {
        assert_eq!(t.shape(x)[1], self.in_ch, "Conv2d: channel mismatch");
        let w = t.param(s, self.w);
        let mut y = t.conv2d(x, w, self.stride, self.pad);
        if let Some(b) = self.b {
            let bv = t.param(s, b);
            y = t.add_bias_chan(y, bv);
        }
        y
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.g"), ArrayD::ones(IxDyn(&[channels]))),
            beta: store.add(format!("{prefix}.b"), ArrayD::zeros(IxDyn(&[channels]))),
            groups: gn_groups(channels),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Var {
        let g = t.param(s, self.gamma);
        let b = t.param(s, self.beta);
        t.group_norm(x, g, b, self.groups, self.eps)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.g"), ArrayD::ones(IxDyn(&[dim]))),
            beta: store.add(format!("{prefix}.b"), ArrayD::zeros(IxDyn(&[dim]))),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Var {
        let g = t.param(s, self.gamma);
        let b = t.param(s, self.beta);
        t.layer_norm(x, g, b, self.eps)
    }
}

/// Multi-head attention; query and context may have different dims.
#[derive(Debug, Clone)]
pub struct Mha {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub model_dim: usize,
}

impl Mha {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        model_dim: usize,
        ctx_dim: usize,
        heads: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        assert!(model_dim % heads == 0, "model_dim not divisible by heads");
        Self {
            wq: Linear::new(store, &format!("{prefix}.wq"), model_dim, model_dim, false, rng),
            wk: Linear::new(store, &format!("{prefix}.wk"), ctx_dim, model_dim, false, rng),
            wv: Linear::new(store, &format!("{prefix}.wv"), ctx_dim, model_dim, false, rng),
            wo: Linear::new(store, &format!("{prefix}.wo"), model_dim, model_dim, true, rng),
            heads,
            model_dim,
        }
    }

    /// `x`: [B, Tq, dm]; `ctx`: [B, Tk, dc]; `key_valid`: per-key validity
    /// [B, Tk] (None = all valid). Invalid keys receive an additive -1e30
    /// logit, which underflows to an exactly-zero attention weight.
    pub fn forward(
        &self,
        t: &mut Tape,
        s: &ParamStore,
        x: Var,
        ctx: Var,
        key_valid: Option<&Array2<f64>>,
    ) -> Var {
        let (b, tq, _) = dims3(t.shape(x));
        let (bc, tk, _) = dims3(t.shape(ctx));
        assert_eq!(b, bc, "Mha: batch mismatch");
        let h = self.heads;
        let dk = self.model_dim / h;

        let q = self.wq.forward(t, s, x);
        let k = self.wk.forward(t, s, ctx);
        let v = self.wv.forward(t, s, ctx);

        let q = split_heads(t, q, b, tq, h, dk);
        let k = split_heads(t, k, b, tk, h, dk);
        let v = split_heads(t, v, b, tk, h, dk);

        let kt = t.permute(k, &[0, 2, 1]);
        let scores = t.bmm(q, kt);
        let mut scores = t.scale(scores, 1.0 / (dk as f64).sqrt());
        if let Some(valid) = key_valid {
            assert_eq!(valid.shape(), [b, tk]);
            let mut bias = ArrayD::zeros(IxDyn(&[b * h, tq, tk]));
            for bi in 0..b {
                for ki in 0..tk {
                    if valid[[bi, ki]] == 0.0 {
                        for hi in 0..h {
                            for qi in 0..tq {
                                bias[[bi * h + hi, qi, ki]] = -1e30;
                            }
                        }
                    }
                }
            }
            let bias = t.constant(bias);
            scores = t.add(scores, bias);
        }
        let attn = t.softmax_last(scores);
        let out = t.bmm(attn, v); // [B*h, Tq, dk]
        let out = merge_heads(t, out, b, tq, h, dk);
        self.wo.forward(t, s, out)
    }
}

fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "expected [B, T, D]");
    (shape[0], shape[1], shape[2])
}

fn split_heads(t: &mut Tape, x: Var, b: usize, tt: usize, h: usize, dk: usize) -> Var {
    let x = t.reshape(x, &[b, tt, h, dk]);
    let x = t.permute(x, &[0, 2, 1, 3]);
    t.reshape(x, &[b * h, tt, dk])
}

fn merge_heads(t: &mut Tape, x: Var, b: usize, tt: usize, h: usize, dk: usize) -> Var {
    let x = t.reshape(x, &[b, h, tt, dk]);
    let x = t.permute(x, &[0, 2, 1, 3]);
    t.reshape(x, &[b, tt, h * dk])
}

#[derive(Debug, Clone, Copy)]
pub enum Act {
    Silu,
    Gelu,
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
    pub act: Act,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        hidden: usize,
        act: Act,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        Self {
            lin1: Linear::new(store, &format!("{prefix}.fc1"), dim, hidden, true, rng),
            lin2: Linear::new(store, &format!("{prefix}.fc2"), hidden, dim, true, rng),
            act,
        }
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Var {
        let h = self.lin1.forward(t, s, x);
        let h = match self.act {
            Act::Silu => t.silu(h),
            Act::Gelu => t.gelu(h),
        };
        self.lin2.forward(t, s, h)
    }
}

/// Standard pre-norm residual conv block with optional timestep injection.
#[derive(Debug, Clone)]
pub struct ResBlock2d {
    pub gn1: GroupNorm,
    pub conv1: Conv2d,
    pub temb: Option<Linear>,
    pub gn2: GroupNorm,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

impl ResBlock2d {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        temb_dim: Option<usize>,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        Self {
            gn1: GroupNorm::new(store, &format!("{prefix}.gn1"), in_ch),
            conv1: Conv2d::new(store, &format!("{prefix}.conv1"), in_ch, out_ch, 3, 1, 1, rng),
            temb: temb_dim
                .map(|td| Linear::new(store, &format!("{prefix}.temb"), td, out_ch, true, rng)),
            gn2: GroupNorm::new(store, &format!("{prefix}.gn2"), out_ch),
            conv2: Conv2d::new_zeroed(store, &format!("{prefix}.conv2"), out_ch, out_ch, 3, 1, 1),
            skip: (in_ch != out_ch).then(|| {
                Conv2d::new(store, &format!("{prefix}.skip"), in_ch, out_ch, 1, 1, 0, rng)
            }),
        }
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var, temb: Option<Var>) -> Var {
        let h = self.gn1.forward(t, s, x);
        let h = t.silu(h);
        let mut h = self.conv1.forward(t, s, h);
        if let (Some(proj), Some(emb)) = (&self.temb, temb) {
            let e = proj.forward(t, s, emb);
            h = t.add_chan_spatial(h, e);
        }
        let h = self.gn2.forward(t, s, h);
        let h = t.silu(h);
        let h = self.conv2.forward(t, s, h);
        let sk = match &self.skip {
            Some(c) => c.forward(t, s, x),
            None => x,
        };
        t.add(h, sk)
    }
}

/// Sinusoidal embedding of arbitrary real positions (hours, timesteps).
pub fn sinusoid_embedding(positions: &[f64], dim: usize) -> Array2<f64> {
    assert!(dim % 2 == 0, "sinusoid dim must be even");
    let half = dim / 2;
    let mut out = Array2::<f64>::zeros((positions.len(), dim));
    for (i, &p) in positions.iter().enumerate() {
        for j in 0..half {
            let freq = (10_000f64).powf(-(j as f64) / half as f64);
            out[[i, j]] = (p * freq).sin();
            out[[i, half + j]] = (p * freq).cos();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::assert_gradcheck;
    use crate::seed::rng;

    #[test]
    fn mha_gradcheck_and_mask() {
        let mut r = rng(99);
        let mut s = ParamStore::new();
        let mha = Mha::new(&mut s, "mha", 8, 6, 2, &mut r);
        let x = s.add("x", randn(&[2, 3, 8], &mut r));
        let ctx = s.add("ctx", randn(&[2, 4, 6], &mut r));
        assert_gradcheck(
            &mut s,
            |t, s| {
                let xv = t.param(s, s.id_by_name("x").unwrap());
                let cv = t.param(s, s.id_by_name("ctx").unwrap());
                let y = mha.forward(t, s, xv, cv, None);
                t.mean_all(y)
            },
            80,
            100,
            1e-5,
        );
        let _ = (x, ctx);
    }

    #[test]
    fn masked_keys_do_not_contribute() {
        let mut r = rng(7);
        let mut s = ParamStore::new();
        let mha = Mha::new(&mut s, "mha", 8, 8, 2, &mut r);
        let x = randn(&[1, 2, 8], &mut r);
        let ctx_short = randn(&[1, 3, 8], &mut r);
        // Long context: same 3 keys plus 2 masked-out garbage keys.
        let mut ctx_long = ndarray::ArrayD::zeros(IxDyn(&[1, 5, 8]));
        ctx_long
            .slice_axis_mut(ndarray::Axis(1), ndarray::Slice::from(0..3))
            .assign(&ctx_short);
        ctx_long
            .slice_axis_mut(ndarray::Axis(1), ndarray::Slice::from(3..5))
            .assign(&randn(&[1, 2, 8], &mut r));
        let valid_long = ndarray::arr2(&[[1.0, 1.0, 1.0, 0.0, 0.0]]);

        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let cs = t.constant(ctx_short);
        let y_short = mha.forward(&mut t, &s, xv, cs, None);
        let xv2 = t.constant(x);
        let cl = t.constant(ctx_long);
        let y_long = mha.forward(&mut t, &s, xv2, cl, Some(&valid_long));
        let a = t.value(y_short);
        let b = t.value(y_long);
        let max_diff = a
            .iter()
            .zip(b.iter())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-12, "mask leakage: {max_diff}");
    }

    #[test]
    fn resblock_gradcheck() {
        let mut r = rng(11);
        let mut s = ParamStore::new();
        let block = ResBlock2d::new(&mut s, "rb", 4, 6, Some(5), &mut r);
        // conv2 is zero-initialized; randomize so its gradient path is probed.
        let id = s.id_by_name("rb.conv2.w").unwrap();
        *s.value_mut(id) = randn(&[6, 6, 3, 3], &mut r) * 0.2;
        s.add("x", randn(&[2, 4, 4, 4], &mut r));
        s.add("temb", randn(&[2, 5], &mut r));
        assert_gradcheck(
            &mut s,
            |t, s| {
                let x = t.param(s, s.id_by_name("x").unwrap());
                let e = t.param(s, s.id_by_name("temb").unwrap());
                let y = block.forward(t, s, x, Some(e));
                t.mean_all(y)
            },
            100,
            12,
            1e-5,
        );
    }

    #[test]
    fn sinusoid_embedding_shapes_and_range() {
        let e = sinusoid_embedding(&[0.0, 1.0, 47.0], 16);
        assert_eq!(e.shape(), [3, 16]);
        assert!((e[[0, 0]]).abs() < 1e-12); // sin(0)
        assert!((e[[0, 8]] - 1.0).abs() < 1e-12); // cos(0)
        assert!(e.iter().all(|v| v.abs() <= 1.0));
    }
}
