//! Latent diffusion core: variance schedule, forward diffusion, the
//! conditional UNet noise predictor, the contrastive training objective, and
//! the deterministic DDIM sampler producing the up-to-date latent.
//!
//! Conditioning: the reference latent is channel-concatenated with the noisy
//! latent at the UNet input; the encoded series enters every spatial
//! transformer block through cross-attention (padded tokens excluded). A
//! learned null token stands in when no conditioning tokens are valid.

use crate::ckpt;
use crate::dataset::{EhrSeries, LdmSample, Standardizer};
use crate::ehr_encoder::{EhrEncoder, EhrEncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{sinusoid_embedding, Act, Conv2d, FeedForward, GroupNorm, LayerNorm, Linear, Mha, ResBlock2d};
use crate::opt::{AdamConfig, AdamW};
use crate::parallel::map_shards;
use crate::seed::{child_seed, child_seed2, rng};
use crate::tensor::{accumulate_grads, randn, scale_grads, Arr, ParamGrads, ParamId, ParamStore, Tape, Var};
use crate::vae::Vae;
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Per-step noise tables; index n runs 1..=N, with alpha_bars[0] = 1 by
/// convention.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub kind: ScheduleKind,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    /// Length N+1; alpha_bars[n] = prod_{s<=n} (1 - beta_s), alpha_bars[0]=1.
    pub alpha_bars: Vec<f64>,
    /// Length N+1; posterior_vars[n] = (1-a_{n-1})/(1-a_n) * beta_n.
    pub posterior_vars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn n_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, n: usize) -> f64 {
        self.betas[n - 1]
    }

    pub fn alpha(&self, n: usize) -> f64 {
        self.alphas[n - 1]
    }
}

/// Build the variance schedule from per-step betas.
pub fn schedule_from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Result<DiffusionSchedule> {
    if betas.is_empty() {
        return Err(Error::config("schedule needs at least one step"));
    }
    if betas.iter().any(|&b| !(0.0..1.0).contains(&b) || b <= 0.0) {
        return Err(Error::config("betas must lie in (0, 1)"));
    }
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
    alpha_bars.push(1.0);
    for &a in &alphas {
        alpha_bars.push(alpha_bars.last().unwrap() * a);
    }
    let mut posterior_vars = vec![0.0];
    for n in 1..=betas.len() {
        posterior_vars.push((1.0 - alpha_bars[n - 1]) / (1.0 - alpha_bars[n]) * betas[n - 1]);
    }
    Ok(DiffusionSchedule {
        kind,
        betas,
        alphas,
        alpha_bars,
        posterior_vars,
    })
}

/// Linear (1e-4 to 2e-2) or squared-cosine beta spacing over N steps.
pub fn make_schedule(kind: ScheduleKind, n: usize) -> Result<DiffusionSchedule> {
    if n == 0 {
        return Err(Error::config("schedule needs at least one step"));
    }
    let betas = match kind {
        ScheduleKind::Linear => {
            let (lo, hi) = (1e-4, 2e-2);
            (0..n)
                .map(|i| {
                    if n == 1 {
                        lo
                    } else {
                        lo + (hi - lo) * i as f64 / (n - 1) as f64
                    }
                })
                .collect()
        }
        ScheduleKind::Cosine => {
            let f = |t: f64| ((t / n as f64 + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2)
                .cos()
                .powi(2);
            (1..=n)
                .map(|i| (1.0 - f(i as f64) / f(i as f64 - 1.0)).clamp(1e-8, 0.999))
                .collect()
        }
    };
    schedule_from_betas(kind, betas)
}

/// Closed-form forward diffusion: z_n = sqrt(a_n) z0 + sqrt(1-a_n) eps.
/// n = 0 returns z0 unchanged.
pub fn forward_diffuse(schedule: &DiffusionSchedule, z0: &Arr, n: usize, eps: &Arr) -> Result<Arr> {
    if n > schedule.n_steps() {
        return Err(Error::config(format!(
            "step {n} outside schedule of {} steps",
            schedule.n_steps()
        )));
    }
    if z0.shape() != eps.shape() {
        return Err(Error::shape("noise shape does not match latent"));
    }
    let ab = schedule.alpha_bars[n];
    Ok(z0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

/// Linear contrastive-weight ramp, clamped to [0, 1].
pub fn lambda_ramp(step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return 1.0;
    }
    (step as f64 / total_steps as f64).clamp(0.0, 1.0)
}

/// Mixing rule for the contrastive branch: (1-beta) E + beta delta.
pub fn perturb_with(tokens: &Arr, delta: &Arr, beta_pert: f64) -> Result<Arr> {
    if tokens.shape() != delta.shape() {
        return Err(Error::shape("delta shape does not match tokens"));
    }
    if !(0.0..=1.0).contains(&beta_pert) {
        return Err(Error::config("beta_pert must lie in [0,1]"));
    }
    Ok(tokens * (1.0 - beta_pert) + delta * beta_pert)
}

/// Context perturbation with seeded standard-normal delta, applied to the
/// full token sequence.
pub fn perturb_context(tokens: &Arr, beta_pert: f64, seed: u64) -> Arr {
    let mut r = rng(seed);
    let delta = randn(tokens.shape(), &mut r);
    perturb_with(tokens, &delta, beta_pert).expect("matching shapes by construction")
}

/// Scalar hinge of the contrastive objective:
/// max(clean_mse - perturbed_mse + margin, 0).
pub fn contrastive_hinge(clean_mse: f64, perturbed_mse: f64, margin: f64) -> f64 {
    (clean_mse - perturbed_mse + margin).max(0.0)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct UnetConfig {
    /// Latent channels C; the UNet maps 2C (noisy || reference) to C.
    pub latent_channels: usize,
    /// Channels per resolution level, finest first.
    pub widths: Vec<usize>,
    /// Cross-attention context width (the series encoder model dim).
    pub ctx_dim: usize,
    pub heads: usize,
    /// Feed-forward multiple inside spatial transformer blocks.
    pub ff_mult: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            widths: vec![224, 448, 672],
            ctx_dim: 128,
            heads: 8,
            ff_mult: 2,
        }
    }
}

impl UnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::config("unet needs at least one level"));
        }
        for &w in &self.widths {
            if w % self.heads != 0 {
                return Err(Error::config(format!(
                    "width {w} not divisible by {} heads",
                    self.heads
                )));
            }
        }
        Ok(())
    }

    fn time_dim(&self) -> usize {
        self.widths[0] * 4
    }
}

struct SpatialTransformer {
    norm: GroupNorm,
    proj_in: Conv2d,
    ln_sa: LayerNorm,
    self_attn: Mha,
    ln_ca: LayerNorm,
    cross_attn: Mha,
    ln_ff: LayerNorm,
    ff: FeedForward,
    proj_out: Conv2d,
}

impl SpatialTransformer {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        ch: usize,
        ctx_dim: usize,
        heads: usize,
        ff_mult: usize,
        r: &mut rand_chacha::ChaCha12Rng,
    ) -> Self {
        Self {
            norm: GroupNorm::new(store, &format!("{prefix}.gn"), ch),
            proj_in: Conv2d::new(store, &format!("{prefix}.pin"), ch, ch, 1, 1, 0, r),
            ln_sa: LayerNorm::new(store, &format!("{prefix}.ln_sa"), ch),
            self_attn: Mha::new(store, &format!("{prefix}.sa"), ch, ch, heads, r),
            ln_ca: LayerNorm::new(store, &format!("{prefix}.ln_ca"), ch),
            cross_attn: Mha::new(store, &format!("{prefix}.ca"), ch, ctx_dim, heads, r),
            ln_ff: LayerNorm::new(store, &format!("{prefix}.ln_ff"), ch),
            ff: FeedForward::new(store, &format!("{prefix}.ff"), ch, ff_mult * ch, Act::Gelu, r),
            proj_out: Conv2d::new_zeroed(store, &format!("{prefix}.pout"), ch, ch, 1, 1, 0),
        }
    }

    fn forward(
        &self,
        t: &mut Tape,
        s: &ParamStore,
        x: Var,
        ctx: Var,
        ctx_valid: &Array2<f64>,
    ) -> Var {
        let shape = t.shape(x).to_vec();
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hn = self.norm.forward(t, s, x);
        let hn = self.proj_in.forward(t, s, hn);
        let seq = t.permute(hn, &[0, 2, 3, 1]);
        let mut seq = t.reshape(seq, &[b, h * w, c]);

        let n1 = self.ln_sa.forward(t, s, seq);
        let sa = self.self_attn.forward(t, s, n1, n1, None);
        seq = t.add(seq, sa);
        let n2 = self.ln_ca.forward(t, s, seq);
        let ca = self.cross_attn.forward(t, s, n2, ctx, Some(ctx_valid));
        seq = t.add(seq, ca);
        let n3 = self.ln_ff.forward(t, s, seq);
        let ff = self.ff.forward(t, s, n3);
        seq = t.add(seq, ff);

        let back = t.reshape(seq, &[b, h, w, c]);
        let back = t.permute(back, &[0, 3, 1, 2]);
        let back = self.proj_out.forward(t, s, back);
        t.add(back, x)
    }
}

/// Conditional noise predictor: residual blocks with timestep injection and
/// spatial transformers with cross-attention, mirrored encoder/decoder.
pub struct Unet {
    pub config: UnetConfig,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    enc_res: Vec<ResBlock2d>,
    enc_attn: Vec<SpatialTransformer>,
    downs: Vec<Conv2d>,
    mid_res1: ResBlock2d,
    mid_attn: SpatialTransformer,
    mid_res2: ResBlock2d,
    ups: Vec<Conv2d>,
    dec_res: Vec<ResBlock2d>,
    dec_attn: Vec<SpatialTransformer>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
    /// Stand-in context token used when no conditioning token is valid.
    null_token: ParamId,
}

impl Unet {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: UnetConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut r = rng(child_seed(seed, "unet-init", 0));
        let w = &config.widths;
        let levels = w.len();
        let td = config.time_dim();

        let time1 = Linear::new(store, &format!("{prefix}.t1"), w[0], td, true, &mut r);
        let time2 = Linear::new(store, &format!("{prefix}.t2"), td, td, true, &mut r);
        let conv_in = Conv2d::new(
            store,
            &format!("{prefix}.in"),
            2 * config.latent_channels,
            w[0],
            3,
            1,
            1,
            &mut r,
        );
        let mut enc_res = Vec::new();
        let mut enc_attn = Vec::new();
        let mut downs = Vec::new();
        for i in 0..levels {
            enc_res.push(ResBlock2d::new(
                store,
                &format!("{prefix}.e{i}.res"),
                w[i],
                w[i],
                Some(td),
                &mut r,
            ));
            enc_attn.push(SpatialTransformer::new(
                store,
                &format!("{prefix}.e{i}.st"),
                w[i],
                config.ctx_dim,
                config.heads,
                config.ff_mult,
                &mut r,
            ));
            if i + 1 < levels {
                downs.push(Conv2d::new(
                    store,
                    &format!("{prefix}.down{i}"),
                    w[i],
                    w[i + 1],
                    3,
                    2,
                    1,
                    &mut r,
                ));
            }
        }
        let wl = w[levels - 1];
        let mid_res1 = ResBlock2d::new(store, &format!("{prefix}.m.res1"), wl, wl, Some(td), &mut r);
        let mid_attn = SpatialTransformer::new(
            store,
            &format!("{prefix}.m.st"),
            wl,
            config.ctx_dim,
            config.heads,
            config.ff_mult,
            &mut r,
        );
        let mid_res2 = ResBlock2d::new(store, &format!("{prefix}.m.res2"), wl, wl, Some(td), &mut r);

        let mut ups = Vec::new();
        let mut dec_res = Vec::new();
        let mut dec_attn = Vec::new();
        for i in (0..levels).rev() {
            if i + 1 < levels {
                ups.push(Conv2d::new(
                    store,
                    &format!("{prefix}.up{i}"),
                    w[i + 1],
                    w[i],
                    3,
                    1,
                    1,
                    &mut r,
                ));
            }
            dec_res.push(ResBlock2d::new(
                store,
                &format!("{prefix}.d{i}.res"),
                2 * w[i],
                w[i],
                Some(td),
                &mut r,
            ));
            dec_attn.push(SpatialTransformer::new(
                store,
                &format!("{prefix}.d{i}.st"),
                w[i],
                config.ctx_dim,
                config.heads,
                config.ff_mult,
                &mut r,
            ));
        }
        let out_norm = GroupNorm::new(store, &format!("{prefix}.on"), w[0]);
        let out_conv = Conv2d::new_zeroed(
            store,
            &format!("{prefix}.out"),
            w[0],
            config.latent_channels,
            3,
            1,
            1,
        );
        let null0 = randn(&[config.ctx_dim], &mut r) * 0.02;
        let null_token = store.add(format!("{prefix}.null_ctx"), null0);
        Ok(Self {
            config,
            time1,
            time2,
            conv_in,
            enc_res,
            enc_attn,
            downs,
            mid_res1,
            mid_attn,
            mid_res2,
            ups,
            dec_res,
            dec_attn,
            out_norm,
            out_conv,
            null_token,
        })
    }

    /// Prepend the learned null token to the context; it is valid only for
    /// samples with no valid token, so an all-padding context behaves
    /// exactly like an explicit null-token context.
    fn effective_context(
        &self,
        t: &mut Tape,
        s: &ParamStore,
        ctx: Var,
        ctx_valid: &Array2<f64>,
    ) -> (Var, Array2<f64>) {
        let shape = t.shape(ctx).to_vec();
        let (b, d) = (shape[0], shape[2]);
        let zeros = t.constant(ArrayD::zeros(IxDyn(&[b, 1, d])));
        let null = t.param(s, self.null_token);
        let null_tok = t.add_bias_last(zeros, null);
        let full = t.concat(1, &[null_tok, ctx]);
        let mut valid = Array2::zeros((b, 1 + ctx_valid.ncols()));
        for bi in 0..b {
            let any = ctx_valid.row(bi).iter().any(|&v| v != 0.0);
            valid[[bi, 0]] = if any { 0.0 } else { 1.0 };
            for k in 0..ctx_valid.ncols() {
                valid[[bi, 1 + k]] = ctx_valid[[bi, k]];
            }
        }
        (full, valid)
    }

    /// Noise prediction graph. `z_n`, `z_ref`: [B,C,h,w]; `ctx`: [B,T,d]
    /// with per-token validity; `steps`: per-sample diffusion step indices.
    pub fn predict_noise_graph(
        &self,
        t: &mut Tape,
        s: &ParamStore,
        z_n: Var,
        z_ref: Var,
        ctx: Var,
        ctx_valid: &Array2<f64>,
        steps: &[usize],
    ) -> Var {
        let (ctx, valid) = self.effective_context(t, s, ctx, ctx_valid);
        let positions: Vec<f64> = steps.iter().map(|&n| n as f64).collect();
        let temb0 = t.constant(
            sinusoid_embedding(&positions, self.config.widths[0]).into_dyn(),
        );
        let temb = self.time1.forward(t, s, temb0);
        let temb = t.silu(temb);
        let temb = self.time2.forward(t, s, temb);

        let x = t.concat(1, &[z_n, z_ref]);
        let mut h = self.conv_in.forward(t, s, x);
        let mut skips = Vec::new();
        let levels = self.config.widths.len();
        for i in 0..levels {
            h = self.enc_res[i].forward(t, s, h, Some(temb));
            h = self.enc_attn[i].forward(t, s, h, ctx, &valid);
            skips.push(h);
            if i + 1 < levels {
                h = self.downs[i].forward(t, s, h);
            }
        }
        h = self.mid_res1.forward(t, s, h, Some(temb));
        h = self.mid_attn.forward(t, s, h, ctx, &valid);
        h = self.mid_res2.forward(t, s, h, Some(temb));

        for (di, i) in (0..levels).rev().enumerate() {
            if i + 1 < levels {
                h = t.upsample2x(h);
                h = self.ups[skip_up_offset(levels, i)].forward(t, s, h);
            }
            let skip = skips[i];
            let cat = t.concat(1, &[h, skip]);
            h = self.dec_res[di].forward(t, s, cat, Some(temb));
            h = self.dec_attn[di].forward(t, s, h, ctx, &valid);
        }
        let h = self.out_norm.forward(t, s, h);
        let h = t.silu(h);
        self.out_conv.forward(t, s, h)
    }
}

// ups are created in reverse level order, one per non-coarsest level; map
// decoder iteration index to the ups index.
fn skip_up_offset(levels: usize, i: usize) -> usize {
    // dec iteration order i = levels-1, ..., 0; ups exist for i < levels-1
    // and were pushed in that same order, so ups index = (levels-1) - 1 - i.
    levels - 2 - i
}

/// Array-level noise prediction (single batch, no gradients).
#[allow(clippy::too_many_arguments)]
pub fn predict_noise(
    unet: &Unet,
    store: &ParamStore,
    z_n: &Arr,
    z_ref: &Arr,
    ctx_tokens: &Arr,
    ctx_valid: &Array2<f64>,
    steps: &[usize],
) -> Result<Arr> {
    let c = unet.config.latent_channels;
    if z_n.shape() != z_ref.shape() || z_n.ndim() != 4 || z_n.shape()[1] != c {
        return Err(Error::shape(format!(
            "latents must be [B,{c},h,w] with matching shapes, got {:?} and {:?}",
            z_n.shape(),
            z_ref.shape()
        )));
    }
    if ctx_tokens.ndim() != 3 || ctx_tokens.shape()[2] != unet.config.ctx_dim {
        return Err(Error::shape(format!(
            "context must be [B,T,{}], got {:?}",
            unet.config.ctx_dim,
            ctx_tokens.shape()
        )));
    }
    if ctx_tokens.shape()[0] != z_n.shape()[0] || steps.len() != z_n.shape()[0] {
        return Err(Error::shape("batch size mismatch across inputs"));
    }
    let mut t = Tape::new();
    let zn = t.constant(z_n.clone());
    let zr = t.constant(z_ref.clone());
    let cx = t.constant(ctx_tokens.clone());
    let out = unet.predict_noise_graph(&mut t, store, zn, zr, cx, ctx_valid, steps);
    Ok(t.value(out).clone())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LdmHyper {
    /// Contrastive hinge margin alpha.
    pub margin: f64,
    /// Perturbation mixing strength for the contrastive branch.
    pub beta_pert: f64,
    /// Diffusion chain length N.
    pub n_steps: usize,
    /// DDIM sub-sampling steps at generation time.
    pub ddim_steps: usize,
    /// Weight of the auxiliary abnormality loss in the composite.
    pub w_aux: f64,
    /// Stop-gradient through the clean term inside the hinge (the base term
    /// keeps its gradient either way).
    pub stop_grad_clean_in_hinge: bool,
    pub schedule: ScheduleKind,
}

impl Default for LdmHyper {
    fn default() -> Self {
        Self {
            margin: 0.2,
            beta_pert: 0.5,
            n_steps: 1000,
            ddim_steps: 200,
            w_aux: 1.0,
            stop_grad_clean_in_hinge: false,
            schedule: ScheduleKind::Linear,
        }
    }
}

impl LdmHyper {
    pub fn validate(&self) -> Result<()> {
        if self.margin < 0.0 {
            return Err(Error::config("margin must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.beta_pert) {
            return Err(Error::config("beta_pert must lie in [0,1]"));
        }
        if self.ddim_steps == 0 || self.ddim_steps > self.n_steps {
            return Err(Error::config("ddim_steps must lie in 1..=n_steps"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LdmLossComponents {
    pub total: f64,
    pub base_mse: f64,
    pub contrastive: f64,
    pub aux: f64,
}

/// A training pair after VAE encoding: scaled latents plus the standardized
/// series and target labels.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub z_target: Array3<f64>,
    pub z_ref: Array3<f64>,
    pub series: EhrSeries,
    pub labels: Vec<bool>,
}

/// Per-sample seeded draws for one loss evaluation: timestep, noise, and
/// the perturbation direction. Reused across the clean and perturbed passes.
#[derive(Debug, Clone, Copy)]
pub struct DrawSeed(pub u64);

pub struct LdmModel {
    pub unet: Unet,
    pub encoder: EhrEncoder,
    pub params: ParamStore,
    pub schedule: DiffusionSchedule,
    pub hyper: LdmHyper,
    /// Scalar latent std estimated from the first training batch; latents
    /// are divided by it before diffusion.
    pub latent_scale: f64,
}

impl LdmModel {
    pub fn new(
        unet_config: UnetConfig,
        enc_config: EhrEncoderConfig,
        hyper: LdmHyper,
        seed: u64,
    ) -> Result<Self> {
        hyper.validate()?;
        if unet_config.ctx_dim != enc_config.model_dim {
            return Err(Error::config(
                "unet ctx_dim must equal encoder model_dim",
            ));
        }
        let mut params = ParamStore::new();
        let mut r = rng(child_seed(seed, "ldm-init", 1));
        let encoder = EhrEncoder::new(&mut params, "cond_ehr", enc_config, &mut r)?;
        let unet = Unet::new(&mut params, "unet", unet_config, seed)?;
        let schedule = make_schedule(hyper.schedule, hyper.n_steps)?;
        Ok(Self {
            unet,
            encoder,
            params,
            schedule,
            hyper,
            latent_scale: 1.0,
        })
    }

    /// Composite loss on a prepared batch; the same seeded (n, eps, delta)
    /// draws are shared between the clean and perturbed passes.
    pub fn ldm_loss_graph(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        batch: &[&PreparedPair],
        lambda1: f64,
        draw: DrawSeed,
    ) -> Result<(Var, LdmLossComponents)> {
        let b = batch.len();
        let c = self.unet.config.latent_channels;
        let (h, w) = {
            let sh = batch[0].z_target.shape();
            (sh[1], sh[2])
        };

        // Per-sample draws, independent of batch composition order upstream.
        let mut z_n = ArrayD::zeros(IxDyn(&[b, c, h, w]));
        let mut eps_all = ArrayD::zeros(IxDyn(&[b, c, h, w]));
        let mut z_ref = ArrayD::zeros(IxDyn(&[b, c, h, w]));
        let mut steps = Vec::with_capacity(b);
        for (bi, pair) in batch.iter().enumerate() {
            let mut r = rng(child_seed(draw.0, "ldm-draw", bi as u64));
            let n = r.gen_range(1..=self.schedule.n_steps());
            steps.push(n);
            let eps = randn(&[c, h, w], &mut r);
            let zt = pair.z_target.clone().into_dyn();
            let noisy = forward_diffuse(&self.schedule, &zt, n, &eps)?;
            for ci in 0..c {
                for yi in 0..h {
                    for xi in 0..w {
                        z_n[[bi, ci, yi, xi]] = noisy[[ci, yi, xi]];
                        eps_all[[bi, ci, yi, xi]] = eps[[ci, yi, xi]];
                        z_ref[[bi, ci, yi, xi]] = pair.z_ref[[ci, yi, xi]];
                    }
                }
            }
        }

        let series: Vec<&EhrSeries> = batch.iter().map(|p| &p.series).collect();
        let enc = self.encoder.forward_batch(t, store, &series, None)?;

        let zn = t.constant(z_n);
        let zr = t.constant(z_ref);
        let eps_var = t.constant(eps_all);

        let eps_hat_clean = self.unet.predict_noise_graph(
            t,
            store,
            zn,
            zr,
            enc.tokens,
            &enc.valid,
            &steps,
        );
        let mse_clean = t.mse_per_sample(eps_hat_clean, eps_var);

        // Perturbed branch: same (n, eps), perturbed token sequence.
        let tok_shape = t.shape(enc.tokens).to_vec();
        let mut delta = ArrayD::zeros(IxDyn(&tok_shape));
        for bi in 0..b {
            let mut r = rng(child_seed2(draw.0, "ldm-delta", bi as u64, 1));
            let d = randn(&[tok_shape[1], tok_shape[2]], &mut r);
            for ti in 0..tok_shape[1] {
                for di in 0..tok_shape[2] {
                    delta[[bi, ti, di]] = d[[ti, di]];
                }
            }
        }
        let beta = self.hyper.beta_pert;
        let scaled = t.scale(enc.tokens, 1.0 - beta);
        let delta_c = t.constant(delta * beta);
        let perturbed = t.add(scaled, delta_c);
        let eps_hat_pert = self.unet.predict_noise_graph(
            t,
            store,
            zn,
            zr,
            perturbed,
            &enc.valid,
            &steps,
        );
        let mse_pert = t.mse_per_sample(eps_hat_pert, eps_var);

        let clean_in_hinge = if self.hyper.stop_grad_clean_in_hinge {
            t.detach(mse_clean)
        } else {
            mse_clean
        };
        let gap = t.sub(clean_in_hinge, mse_pert);
        let gap = t.add_scalar(gap, self.hyper.margin);
        let hinge = t.relu(gap);
        let contrastive = t.mean_all(hinge);

        let aux_logits = self.encoder.aux_logits(t, store, &enc);
        let mut labels = Array2::zeros((b, self.encoder.config.label_dim));
        for (bi, p) in batch.iter().enumerate() {
            for (li, &y) in p.labels.iter().enumerate() {
                labels[[bi, li]] = y as u8 as f64;
            }
        }
        let aux = t.bce_with_logits_mean(aux_logits, &labels.into_dyn());

        let base = t.mean_all(mse_clean);
        let contr_w = t.scale(contrastive, lambda1);
        let aux_w = t.scale(aux, self.hyper.w_aux);
        let total = t.add(base, contr_w);
        let total = t.add(total, aux_w);

        let comps = LdmLossComponents {
            total: t.scalar_value(total),
            base_mse: t.scalar_value(base),
            contrastive: t.scalar_value(contrastive),
            aux: t.scalar_value(aux),
        };
        Ok((total, comps))
    }

    /// Loss components without gradients.
    pub fn ldm_loss(
        &self,
        batch: &[&PreparedPair],
        lambda1: f64,
        draw: DrawSeed,
    ) -> Result<LdmLossComponents> {
        let mut t = Tape::new();
        let (_, comps) = self.ldm_loss_graph(&mut t, &self.params, batch, lambda1, draw)?;
        Ok(comps)
    }
}

/// Generation-time conditioning variants (Table-style ablations).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenCondition {
    Full,
    /// Replace the series context with the learned null token.
    NoEhrCond,
    /// Zero out the reference latent.
    NoRef,
}

/// DDIM update on the sub-sampled grid; eta = 0 is fully deterministic.
/// `predict` maps (current latent batch, step index) to predicted noise.
pub fn ddim_core(
    schedule: &DiffusionSchedule,
    steps: usize,
    eta: f64,
    x_init: Arr,
    noise_seed: u64,
    mut predict: impl FnMut(&Arr, usize) -> Result<Arr>,
) -> Result<Arr> {
    let n_train = schedule.n_steps();
    if steps == 0 || steps > n_train {
        return Err(Error::config("ddim steps must lie in 1..=N"));
    }
    // Grid tau_1 < ... < tau_steps = N (integer spacing).
    let taus: Vec<usize> = (1..=steps).map(|i| i * n_train / steps).collect();
    let mut x = x_init;
    let mut noise_rng = rng(noise_seed);
    for k in (0..steps).rev() {
        let n = taus[k];
        let prev = if k == 0 { 0 } else { taus[k - 1] };
        let eps_hat = predict(&x, n)?;
        let ab_n = schedule.alpha_bars[n];
        let ab_prev = schedule.alpha_bars[prev];
        let x0 = (&x - &(eps_hat.clone() * (1.0 - ab_n).sqrt())) / ab_n.sqrt();
        let sigma = if eta > 0.0 {
            eta * ((1.0 - ab_prev) / (1.0 - ab_n)).sqrt() * (1.0 - ab_n / ab_prev).sqrt()
        } else {
            0.0
        };
        let dir_coeff = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        let mut next = x0 * ab_prev.sqrt() + eps_hat * dir_coeff;
        if sigma > 0.0 {
            let z = randn(next.shape(), &mut noise_rng);
            next = next + z * sigma;
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!(
                "non-finite latent during sampling at step {n}"
            )));
        }
        x = next;
    }
    Ok(x)
}

impl LdmModel {
    /// Generate latents for a batch of (reference latent, series) inputs.
    /// Output latents are rescaled back to the VAE latent space.
    pub fn ddim_sample_batch(
        &self,
        inputs: &[(&Array3<f64>, &EhrSeries)],
        condition: GenCondition,
        steps: usize,
        seed: u64,
        eta: f64,
    ) -> Result<Vec<Array3<f64>>> {
        if inputs.is_empty() {
            return Ok(vec![]);
        }
        let b = inputs.len();
        let c = self.unet.config.latent_channels;
        let (h, w) = {
            let sh = inputs[0].0.shape();
            (sh[1], sh[2])
        };
        let mut z_ref = ArrayD::zeros(IxDyn(&[b, c, h, w]));
        for (bi, (zr, _)) in inputs.iter().enumerate() {
            if zr.shape() != [c, h, w] {
                return Err(Error::shape("inconsistent reference latent shapes"));
            }
            if condition != GenCondition::NoRef {
                for ci in 0..c {
                    for yi in 0..h {
                        for xi in 0..w {
                            z_ref[[bi, ci, yi, xi]] = zr[[ci, yi, xi]] / self.latent_scale;
                        }
                    }
                }
            }
        }

        // Encode contexts once (frozen during sampling).
        let (ctx_tokens, ctx_valid) = {
            let series: Vec<&EhrSeries> = inputs.iter().map(|(_, s)| *s).collect();
            let mut t = Tape::new();
            let enc = self.encoder.forward_batch(&mut t, &self.params, &series, None)?;
            let tokens = t.value(enc.tokens).clone();
            let mut valid = enc.valid.clone();
            if condition == GenCondition::NoEhrCond {
                valid.fill(0.0); // the null token takes over
            }
            (tokens, valid)
        };

        let mut init_rng = rng(child_seed(seed, "ddim-init", 0));
        let x_init = randn(&[b, c, h, w], &mut init_rng);
        let out = ddim_core(
            &self.schedule,
            steps,
            eta,
            x_init,
            child_seed(seed, "ddim-noise", 0),
            |x, n| {
                predict_noise(
                    &self.unet,
                    &self.params,
                    x,
                    &z_ref,
                    &ctx_tokens,
                    &ctx_valid,
                    &vec![n; b],
                )
            },
        )?;
        let mut results = Vec::with_capacity(b);
        for bi in 0..b {
            let mut z = Array3::zeros((c, h, w));
            for ci in 0..c {
                for yi in 0..h {
                    for xi in 0..w {
                        z[[ci, yi, xi]] = out[[bi, ci, yi, xi]] * self.latent_scale;
                    }
                }
            }
            results.push(z);
        }
        Ok(results)
    }

    /// Single-sample convenience wrapper.
    pub fn ddim_sample(
        &self,
        z_ref: &Array3<f64>,
        series: &EhrSeries,
        condition: GenCondition,
        steps: usize,
        seed: u64,
        eta: f64,
    ) -> Result<Array3<f64>> {
        Ok(self
            .ddim_sample_batch(&[(z_ref, series)], condition, steps, seed, eta)?
            .remove(0))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LdmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub shard_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for LdmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            shard_size: 8,
            adam: AdamConfig {
                lr: 1e-3,
                ..Default::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LdmEpochLog {
    pub epoch: usize,
    pub lambda1: f64,
    pub train: LdmLossComponents,
    pub val: LdmLossComponents,
}

/// Config echo embedded in LDM checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LdmCheckpointMeta {
    pub unet: UnetConfig,
    pub encoder: EhrEncoderConfig,
    pub hyper: LdmHyper,
    pub latent_scale: f64,
    pub standardizer: Standardizer,
}

pub struct LdmTrainOutcome {
    pub model: LdmModel,
    pub log: Vec<LdmEpochLog>,
    pub best_val_total: f64,
    pub best_epoch: usize,
}

/// Encode pairs through the frozen VAE (posterior means) and package them
/// for the trainer; `standardizer` must already have been applied upstream.
pub fn prepare_pairs(vae: &Vae, pairs: &[LdmSample], latent_scale: Option<f64>) -> Result<(Vec<PreparedPair>, f64)> {
    let mut prepared = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (z_t, _) = vae.encode(&p.target.pixels)?;
        let (z_r, _) = vae.encode(&p.reference.pixels)?;
        prepared.push(PreparedPair {
            z_target: z_t,
            z_ref: z_r,
            series: p.ehr.clone(),
            labels: p.target_labels.clone(),
        });
    }
    let scale = match latent_scale {
        Some(s) => s,
        None => {
            // Scalar std over the first batch-sized chunk of target latents.
            let take = prepared.len().min(32).max(1);
            let mut acc = 0.0;
            let mut n = 0usize;
            for p in prepared.iter().take(take) {
                acc += p.z_target.iter().map(|v| v * v).sum::<f64>();
                n += p.z_target.len();
            }
            (acc / n.max(1) as f64).sqrt().max(1e-6)
        }
    };
    for p in prepared.iter_mut() {
        p.z_target.mapv_inplace(|v| v / scale);
        p.z_ref.mapv_inplace(|v| v / scale);
    }
    Ok((prepared, scale))
}

/// Joint training of the noise predictor, the conditioning series encoder,
/// and the auxiliary head; checkpoint selection by best validation
/// composite loss with the lambda ramp applied.
pub fn train_ldm(
    train_pairs: &[PreparedPair],
    val_pairs: &[PreparedPair],
    unet_config: UnetConfig,
    enc_config: EhrEncoderConfig,
    hyper: LdmHyper,
    latent_scale: f64,
    tc: &LdmTrainConfig,
    mut progress: impl FnMut(&LdmEpochLog),
) -> Result<LdmTrainOutcome> {
    if train_pairs.is_empty() || val_pairs.is_empty() {
        return Err(Error::data("train and validation pair sets must be non-empty"));
    }
    let mut model = LdmModel::new(unet_config, enc_config, hyper, tc.seed)?;
    model.latent_scale = latent_scale;
    let mut opt = AdamW::new(&model.params, tc.adam.clone());
    let steps_per_epoch = train_pairs.len().div_ceil(tc.batch_size);
    let total_steps = (steps_per_epoch * tc.epochs).max(1);

    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    let mut step = 0usize;

    for epoch in 0..tc.epochs {
        let mut shuffle_rng = rng(child_seed2(tc.seed, "ldm-epoch", epoch as u64, 0));
        order.shuffle(&mut shuffle_rng);
        let mut acc = LdmLossComponents::default();
        let mut n_batches = 0usize;
        for batch_ids in order.chunks(tc.batch_size) {
            let lambda1 = lambda_ramp(step, total_steps);
            let batch: Vec<&PreparedPair> = batch_ids.iter().map(|&i| &train_pairs[i]).collect();
            let draw = DrawSeed(child_seed2(tc.seed, "ldm-step", epoch as u64, step as u64));
            let (comps, grads) = sharded_ldm_pass(&model, &batch, lambda1, draw, tc.shard_size)?;
            if !comps.total.is_finite() {
                return Err(Error::numerical(format!(
                    "ldm training diverged at epoch {epoch} step {step}"
                )));
            }
            opt.step(&mut model.params, &grads)?;
            acc.total += comps.total;
            acc.base_mse += comps.base_mse;
            acc.contrastive += comps.contrastive;
            acc.aux += comps.aux;
            n_batches += 1;
            step += 1;
        }
        let scale = 1.0 / n_batches.max(1) as f64;
        let train_mean = LdmLossComponents {
            total: acc.total * scale,
            base_mse: acc.base_mse * scale,
            contrastive: acc.contrastive * scale,
            aux: acc.aux * scale,
        };

        // Validation always uses the end-state weight so composite losses
        // are comparable across epochs.
        let val_mean = eval_ldm_loss(&model, val_pairs, 1.0, tc.seed)?;
        let entry = LdmEpochLog {
            epoch,
            lambda1: lambda_ramp(step, total_steps),
            train: train_mean,
            val: val_mean,
        };
        progress(&entry);
        log.push(entry);
        if best
            .as_ref()
            .map_or(true, |(b, _, _)| val_mean.total < *b)
        {
            best = Some((val_mean.total, epoch, model.params.clone()));
        }
    }
    let (best_val_total, best_epoch, best_params) = best.unwrap();
    model.params = best_params;
    Ok(LdmTrainOutcome {
        model,
        log,
        best_val_total,
        best_epoch,
    })
}

/// Validation composite loss with epoch-independent per-sample draws.
pub fn eval_ldm_loss(
    model: &LdmModel,
    pairs: &[PreparedPair],
    lambda1: f64,
    seed: u64,
) -> Result<LdmLossComponents> {
    let chunks: Vec<&[PreparedPair]> = pairs.chunks(8).collect();
    let outs: Vec<Result<(LdmLossComponents, usize)>> = map_shards(&chunks, 1, |ci, chunk| {
        let chunk = chunk[0];
        let refs: Vec<&PreparedPair> = chunk.iter().collect();
        let comps = model.ldm_loss(
            &refs,
            lambda1,
            DrawSeed(child_seed(seed, "ldm-val-draw", ci as u64)),
        )?;
        Ok((comps, chunk.len()))
    });
    let mut acc = LdmLossComponents::default();
    let mut n = 0usize;
    for out in outs {
        let (c, k) = out?;
        acc.total += c.total * k as f64;
        acc.base_mse += c.base_mse * k as f64;
        acc.contrastive += c.contrastive * k as f64;
        acc.aux += c.aux * k as f64;
        n += k;
    }
    let inv = 1.0 / n.max(1) as f64;
    Ok(LdmLossComponents {
        total: acc.total * inv,
        base_mse: acc.base_mse * inv,
        contrastive: acc.contrastive * inv,
        aux: acc.aux * inv,
    })
}

fn sharded_ldm_pass(
    model: &LdmModel,
    batch: &[&PreparedPair],
    lambda1: f64,
    draw: DrawSeed,
    shard_size: usize,
) -> Result<(LdmLossComponents, ParamGrads)> {
    let shard = shard_size.min(batch.len()).max(1);
    let outs: Vec<Result<(LdmLossComponents, ParamGrads, usize)>> =
        map_shards(batch, shard, |si, items| {
            let mut t = Tape::new();
            let (total, comps) = model.ldm_loss_graph(
                &mut t,
                &model.params,
                items,
                lambda1,
                DrawSeed(child_seed(draw.0, "shard", si as u64)),
            )?;
            let ng = t.backward(total);
            let grads = t.param_grads(&ng, model.params.len());
            Ok((comps, grads, items.len()))
        });
    let mut comps = LdmLossComponents::default();
    let mut grads: ParamGrads = (0..model.params.len()).map(|_| None).collect();
    let mut n = 0usize;
    for out in outs {
        let (c, mut g, k) = out?;
        let w = k as f64;
        comps.total += c.total * w;
        comps.base_mse += c.base_mse * w;
        comps.contrastive += c.contrastive * w;
        comps.aux += c.aux * w;
        scale_grads(&mut g, w);
        accumulate_grads(&mut grads, g);
        n += k;
    }
    let inv = 1.0 / n.max(1) as f64;
    comps.total *= inv;
    comps.base_mse *= inv;
    comps.contrastive *= inv;
    comps.aux *= inv;
    scale_grads(&mut grads, inv);
    Ok((comps, grads))
}

impl LdmModel {
    pub fn save_checkpoint(&self, path: &Path, standardizer: &Standardizer) -> Result<()> {
        let meta = LdmCheckpointMeta {
            unet: self.unet.config.clone(),
            encoder: self.encoder.config.clone(),
            hyper: self.hyper.clone(),
            latent_scale: self.latent_scale,
            standardizer: standardizer.clone(),
        };
        ckpt::save(
            path,
            "ldm",
            &serde_json::to_string(&meta).unwrap(),
            &self.params,
        )
    }

    pub fn from_checkpoint(path: &Path) -> Result<(Self, Standardizer)> {
        let ck = ckpt::load_expecting(path, "ldm")?;
        let meta: LdmCheckpointMeta = serde_json::from_str(&ck.config_json)
            .map_err(|e| Error::data(format!("ldm checkpoint config: {e}")))?;
        let mut model = LdmModel::new(meta.unet, meta.encoder, meta.hyper, 0)?;
        if model.params.len() != ck.params.len() {
            return Err(Error::data("ldm checkpoint parameter layout mismatch"));
        }
        model.params.copy_from(&ck.params);
        model.latent_scale = meta.latent_scale;
        Ok((model, meta.standardizer))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    pub(crate) fn micro_model(seed: u64) -> LdmModel {
        let unet_config = UnetConfig {
            latent_channels: 2,
            widths: vec![8, 16],
            ctx_dim: 8,
            heads: 2,
            ff_mult: 2,
        };
        let enc_config = EhrEncoderConfig {
            input_dim: 6,
            model_dim: 8,
            heads: 2,
            ff_dim: 16,
            max_len: 70,
            label_dim: 1,
            aux_hidden: 8,
        };
        let hyper = LdmHyper {
            n_steps: 8,
            ddim_steps: 4,
            ..Default::default()
        };
        LdmModel::new(unet_config, enc_config, hyper, seed).unwrap()
    }

    pub(crate) fn micro_pair(seed: u64, hw: usize) -> PreparedPair {
        let mut r = rng(seed);
        use rand::Rng as _;
        let t = 3usize;
        let k = 2usize;
        let series = EhrSeries {
            values: Array2::from_shape_fn((t, k), |_| r.gen_range(-1.0..1.0)),
            mask: Array2::from_shape_fn((t, k), |_| r.gen_bool(0.8)),
            hours: vec![1, 4, 7],
            static_vars: vec![0.2],
        };
        PreparedPair {
            z_target: Array3::from_shape_fn((2, hw, hw), |_| r.gen_range(-1.0..1.0)),
            z_ref: Array3::from_shape_fn((2, hw, hw), |_| r.gen_range(-1.0..1.0)),
            series,
            labels: vec![r.gen_bool(0.5)],
        }
    }

    #[test]
    fn schedule_products_match_direct_oracle() {
        let s = schedule_from_betas(ScheduleKind::Linear, vec![0.1, 0.2]).unwrap();
        assert!((s.alpha_bars[0] - 1.0).abs() < 1e-15);
        assert!((s.alpha_bars[1] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars[2] - 0.72).abs() < 1e-15);

        let s1 = schedule_from_betas(ScheduleKind::Linear, vec![0.3]).unwrap();
        assert_eq!(s1.posterior_vars[1], 0.0); // (1 - abar_0) = 0

        let lin = make_schedule(ScheduleKind::Linear, 1000).unwrap();
        assert!(lin
            .alpha_bars
            .windows(2)
            .all(|w| w[1] < w[0] && w[1] > 0.0 && w[1] <= 1.0));
        let cos = make_schedule(ScheduleKind::Cosine, 100).unwrap();
        assert!(cos.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!(cos.betas.iter().all(|&b| b > 0.0 && b < 1.0));

        assert!(make_schedule(ScheduleKind::Linear, 0).is_err());
        assert!(schedule_from_betas(ScheduleKind::Linear, vec![1.2]).is_err());
    }

    #[test]
    fn forward_diffuse_closed_form() {
        let s = schedule_from_betas(ScheduleKind::Linear, vec![0.75]).unwrap();
        let z0 = arr1(&[1.0, -2.0]).into_dyn();
        let eps = arr1(&[0.5, 0.5]).into_dyn();
        // n=0 convention: no noise.
        let z = forward_diffuse(&s, &z0, 0, &eps).unwrap();
        assert_eq!(z, z0);
        // abar_1 = 0.25: z = 0.5*z0 + sqrt(0.75)*eps.
        let z = forward_diffuse(&s, &z0, 1, &eps).unwrap();
        let c = 0.75f64.sqrt();
        assert!((z[[0]] - (0.5 + c * 0.5)).abs() < 1e-15);
        // zero signal: coefficient on eps is 0.8660...
        let zero = arr1(&[0.0, 0.0]).into_dyn();
        let z = forward_diffuse(&s, &zero, 1, &eps).unwrap();
        assert!((z[[0]] / 0.5 - 0.866_025_403_784_438_6).abs() < 1e-12);

        let bad = arr1(&[0.0]).into_dyn();
        assert!(forward_diffuse(&s, &z0, 1, &bad).is_err());
        assert!(forward_diffuse(&s, &z0, 2, &eps).is_err());
    }

    #[test]
    fn lambda_ramp_endpoints() {
        assert_eq!(lambda_ramp(0, 100), 0.0);
        assert_eq!(lambda_ramp(100, 100), 1.0);
        assert_eq!(lambda_ramp(50, 100), 0.5);
        assert_eq!(lambda_ramp(150, 100), 1.0);
    }

    #[test]
    fn perturbation_mixing_rule() {
        let e = arr1(&[2.0, 2.0]).into_dyn();
        let zero = arr1(&[0.0, 0.0]).into_dyn();
        let mixed = perturb_with(&e, &zero, 0.5).unwrap();
        assert_eq!(mixed, arr1(&[1.0, 1.0]).into_dyn());

        let same = perturb_context(&e, 0.0, 7);
        assert_eq!(same, e);
        let mut r = rng(7);
        let delta = randn(&[2], &mut r);
        let pure = perturb_context(&e, 1.0, 7);
        assert_eq!(pure, delta);
    }

    #[test]
    fn hinge_arithmetic() {
        assert!((contrastive_hinge(1.0, 0.5, 0.2) - 0.7).abs() < 1e-15);
        assert_eq!(contrastive_hinge(0.3, 0.6, 0.2), 0.0);
        assert!(contrastive_hinge(-1.0, 5.0, 0.0) >= 0.0);
    }

    #[test]
    fn loss_components_and_lambda_identity() {
        let model = micro_model(1);
        let pairs: Vec<PreparedPair> = (0..3).map(|i| micro_pair(10 + i, 4)).collect();
        let refs: Vec<&PreparedPair> = pairs.iter().collect();
        let c0 = model.ldm_loss(&refs, 0.0, DrawSeed(5)).unwrap();
        // lambda = 0: contrastive computed but unweighted.
        let expect = c0.base_mse + model.hyper.w_aux * c0.aux;
        assert!((c0.total - expect).abs() < 1e-12);
        assert!(c0.contrastive >= 0.0);

        let c1 = model.ldm_loss(&refs, 0.7, DrawSeed(5)).unwrap();
        assert!((c1.total - (c1.base_mse + 0.7 * c1.contrastive + c1.aux)).abs() < 1e-12);
        // Same draws: base and contrastive identical across lambda values.
        assert_eq!(c0.base_mse, c1.base_mse);
        assert_eq!(c0.contrastive, c1.contrastive);
    }

    #[test]
    fn predict_noise_shape_and_empty_context() {
        let model = micro_model(2);
        let b = 2;
        let mut r = rng(3);
        let z_n = randn(&[b, 2, 4, 4], &mut r);
        let z_ref = randn(&[b, 2, 4, 4], &mut r);
        // Zero-length contexts: all-padding tokens vs explicit null.
        let ctx = ArrayD::zeros(IxDyn(&[b, 3, 8]));
        let valid = Array2::zeros((b, 3));
        let out = predict_noise(&model.unet, &model.params, &z_n, &z_ref, &ctx, &valid, &[1, 2])
            .unwrap();
        assert_eq!(out.shape(), &[b, 2, 4, 4]);
        assert!(out.iter().all(|v| v.is_finite()));

        // Garbage values in fully masked tokens must not leak.
        let mut ctx2 = ctx.clone();
        ctx2.fill(123.0);
        let out2 =
            predict_noise(&model.unet, &model.params, &z_n, &z_ref, &ctx2, &valid, &[1, 2])
                .unwrap();
        let diff = out
            .iter()
            .zip(out2.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(diff < 1e-12, "masked context leaked: {diff}");

        let bad_ctx = ArrayD::zeros(IxDyn(&[b, 3, 5]));
        assert!(predict_noise(
            &model.unet,
            &model.params,
            &z_n,
            &z_ref,
            &bad_ctx,
            &valid,
            &[1, 2]
        )
        .is_err());
    }

    #[test]
    fn ddim_zero_network_closed_form() {
        let schedule = schedule_from_betas(ScheduleKind::Linear, vec![0.1, 0.2]).unwrap();
        let mut r = rng(11);
        let x_init = randn(&[1, 2, 4, 4], &mut r);
        let out = ddim_core(&schedule, 2, 0.0, x_init.clone(), 0, |_, _| {
            Ok(ArrayD::zeros(IxDyn(&[1, 2, 4, 4])))
        })
        .unwrap();
        // eps == 0 collapses the recursion to x / sqrt(abar_N).
        let expect = &x_init / schedule.alpha_bars[2].sqrt();
        let diff = out
            .iter()
            .zip(expect.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(diff < 1e-12, "zero-network recursion mismatch {diff}");
    }

    #[test]
    fn ddim_determinism_and_divergence_detection() {
        let model = micro_model(4);
        let pair = micro_pair(40, 4);
        let a = model
            .ddim_sample(&pair.z_ref, &pair.series, GenCondition::Full, 4, 9, 0.0)
            .unwrap();
        let b = model
            .ddim_sample(&pair.z_ref, &pair.series, GenCondition::Full, 4, 9, 0.0)
            .unwrap();
        let diff = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(diff < 1e-6, "eta=0 sampling not deterministic: {diff}");

        let schedule = make_schedule(ScheduleKind::Linear, 4).unwrap();
        let err = ddim_core(
            &schedule,
            4,
            0.0,
            ArrayD::zeros(IxDyn(&[1, 1, 2, 2])),
            0,
            |_, n| {
                if n == 2 {
                    Ok(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), f64::NAN))
                } else {
                    Ok(ArrayD::zeros(IxDyn(&[1, 1, 2, 2])))
                }
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("step 2"), "got: {err}");
    }

    #[test]
    fn checkpoint_roundtrip_preserves_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ldm.ckpt");
        let mut model = micro_model(6);
        model.latent_scale = 1.7;
        let st = Standardizer {
            mean: vec![0.1, 0.2],
            std: vec![1.0, 2.0],
            static_mean: vec![0.0],
            static_std: vec![1.0],
        };
        model.save_checkpoint(&path, &st).unwrap();
        let (loaded, st2) = LdmModel::from_checkpoint(&path).unwrap();
        assert_eq!(st, st2);
        assert_eq!(loaded.latent_scale, 1.7);
        assert_eq!(loaded.hyper, model.hyper);
        assert_eq!(loaded.unet.config, model.unet.config);
        // Same forward behaviour after reload.
        let pair = micro_pair(60, 4);
        let refs = [&pair];
        let a = model.ldm_loss(&refs, 0.5, DrawSeed(1)).unwrap();
        let b = loaded.ldm_loss(&refs, 0.5, DrawSeed(1)).unwrap();
        assert_eq!(a.total, b.total);
    }
}
