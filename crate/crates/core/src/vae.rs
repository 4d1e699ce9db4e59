//! Image autoencoder defining the predictive latent space: encoder E,
//! decoder D, an abnormality classifier on the latent mean, a patch
//! discriminator with hinge loss (warm-up gated), and an optional fixed
//! random-feature perceptual loss. The VAE is pretrained, then frozen for
//! the rest of the pipeline.

use crate::ckpt;
use crate::error::{Error, Result};
use crate::metrics::ImageEmbedder;
use crate::nn::{Conv2d, GroupNorm, Linear, ResBlock2d};
use crate::opt::{AdamConfig, AdamW};
use crate::parallel::map_shards;
use crate::seed::{child_seed, child_seed2, rng};
use crate::tensor::{accumulate_grads, randn, Arr, ParamGrads, ParamStore, Tape, Var};
use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub image_size: usize,
    /// Compression ratio r (power of two); latent is C x (S/r) x (S/r).
    pub compression: usize,
    /// Latent channels C.
    pub latent_channels: usize,
    /// Channel widths after each downsample; length must be log2(r).
    pub widths: Vec<usize>,
    /// Residual blocks are placed at the coarsest `res_levels` levels.
    pub res_levels: usize,
    pub kl_weight: f64,
    pub cls_weight: f64,
    pub adv_weight: f64,
    pub perceptual_weight: f64,
    /// Abnormality label count L for the classifier head.
    pub label_dim: usize,
    pub cls_hidden: usize,
    pub disc_width: usize,
    /// Generator adversarial term activates after this many steps.
    pub adv_warmup_steps: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            compression: 8,
            latent_channels: 4,
            widths: vec![16, 32, 48],
            res_levels: 2,
            kl_weight: 1e-6,
            cls_weight: 1.0,
            adv_weight: 0.0,
            perceptual_weight: 0.0,
            label_dim: 1,
            cls_hidden: 64,
            disc_width: 16,
            adv_warmup_steps: 200,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.compression.is_power_of_two() || self.compression < 2 {
            return Err(Error::config("compression must be a power of two >= 2"));
        }
        let levels = self.compression.trailing_zeros() as usize;
        if self.widths.len() != levels {
            return Err(Error::config(format!(
                "widths must have log2(compression) = {levels} entries"
            )));
        }
        if self.image_size % self.compression != 0 {
            return Err(Error::config("image_size must be divisible by compression"));
        }
        if self.kl_weight <= 0.0 {
            return Err(Error::config("kl_weight must be positive"));
        }
        Ok(())
    }

    pub fn latent_hw(&self) -> usize {
        self.image_size / self.compression
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_channels * self.latent_hw() * self.latent_hw()
    }
}

struct Encoder {
    conv_in: Conv2d,
    downs: Vec<Conv2d>,
    res: Vec<Option<ResBlock2d>>,
    head_norm: GroupNorm,
    head: Conv2d,
}

struct Decoder {
    conv_in: Conv2d,
    res_in: ResBlock2d,
    ups: Vec<Conv2d>,
    res: Vec<Option<ResBlock2d>>,
    head_norm: GroupNorm,
    head: Conv2d,
}

struct Classifier {
    fc1: Linear,
    fc2: Linear,
}

struct Discriminator {
    convs: Vec<Conv2d>,
    norms: Vec<Option<GroupNorm>>,
    head: Conv2d,
}

/// The full first-stage model; layer layout is a pure function of the
/// config, so checkpoints reload by parameter name.
pub struct Vae {
    pub config: VaeConfig,
    pub params: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    classifier: Classifier,
    disc: Discriminator,
    perceptual: Vec<Conv2d>,
}

impl Vae {
    pub fn new(config: VaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng(child_seed(seed, "vae-init", 0));
        let w = &config.widths;
        let levels = w.len();
        let stem = w[0].min(16).max(8);

        let conv_in = Conv2d::new(&mut store, "enc.in", 1, stem, 3, 1, 1, &mut r);
        let mut downs = Vec::new();
        let mut res = Vec::new();
        let mut ch = stem;
        for (i, &wi) in w.iter().enumerate() {
            downs.push(Conv2d::new(
                &mut store,
                &format!("enc.down{i}"),
                ch,
                wi,
                3,
                2,
                1,
                &mut r,
            ));
            ch = wi;
            res.push(if i + config.res_levels >= levels {
                Some(ResBlock2d::new(
                    &mut store,
                    &format!("enc.res{i}"),
                    ch,
                    ch,
                    None,
                    &mut r,
                ))
            } else {
                None
            });
        }
        let head_norm = GroupNorm::new(&mut store, "enc.hn", ch);
        let head = Conv2d::new(
            &mut store,
            "enc.head",
            ch,
            2 * config.latent_channels,
            3,
            1,
            1,
            &mut r,
        );
        let encoder = Encoder {
            conv_in,
            downs,
            res,
            head_norm,
            head,
        };

        let conv_in = Conv2d::new(
            &mut store,
            "dec.in",
            config.latent_channels,
            ch,
            3,
            1,
            1,
            &mut r,
        );
        let res_in = ResBlock2d::new(&mut store, "dec.res_in", ch, ch, None, &mut r);
        let mut ups = Vec::new();
        let mut res_d = Vec::new();
        let mut ch_d = ch;
        for i in (0..levels).rev() {
            let out = if i == 0 { stem } else { w[i - 1] };
            ups.push(Conv2d::new(
                &mut store,
                &format!("dec.up{i}"),
                ch_d,
                out,
                3,
                1,
                1,
                &mut r,
            ));
            ch_d = out;
            res_d.push(if i + config.res_levels >= levels && i > 0 {
                Some(ResBlock2d::new(
                    &mut store,
                    &format!("dec.res{i}"),
                    ch_d,
                    ch_d,
                    None,
                    &mut r,
                ))
            } else {
                None
            });
        }
        let head_norm_d = GroupNorm::new(&mut store, "dec.hn", ch_d);
        let head_d = Conv2d::new(&mut store, "dec.head", ch_d, 1, 3, 1, 1, &mut r);
        let decoder = Decoder {
            conv_in,
            res_in,
            ups,
            res: res_d,
            head_norm: head_norm_d,
            head: head_d,
        };

        let classifier = Classifier {
            fc1: Linear::new(
                &mut store,
                "cls.fc1",
                config.latent_dim(),
                config.cls_hidden,
                true,
                &mut r,
            ),
            fc2: Linear::new(
                &mut store,
                "cls.fc2",
                config.cls_hidden,
                config.label_dim,
                true,
                &mut r,
            ),
        };

        let dw = config.disc_width;
        let disc = Discriminator {
            convs: vec![
                Conv2d::new(&mut store, "disc.c0", 1, dw, 3, 2, 1, &mut r),
                Conv2d::new(&mut store, "disc.c1", dw, 2 * dw, 3, 2, 1, &mut r),
            ],
            norms: vec![None, Some(GroupNorm::new(&mut store, "disc.n1", 2 * dw))],
            head: Conv2d::new(&mut store, "disc.head", 2 * dw, 1, 1, 1, 0, &mut r),
        };

        // Fixed random conv features for the perceptual term.
        let mut pr = rng(child_seed(seed, "vae-perceptual", 0));
        let mut perceptual = Vec::new();
        for (i, (cin, cout)) in [(1usize, 8usize), (8, 16)].iter().enumerate() {
            let wname = format!("per.c{i}.w");
            let std = (2.0 / (*cin as f64 * 9.0)).sqrt();
            let mut wv = randn(&[*cout, *cin, 3, 3], &mut pr);
            wv.mapv_inplace(|x| x * std);
            let wid = store.add_frozen(wname, wv);
            let bid = store.add_frozen(format!("per.c{i}.b"), ArrayD::zeros(IxDyn(&[*cout])));
            perceptual.push(Conv2d {
                w: wid,
                b: Some(bid),
                stride: 2,
                pad: 1,
                in_ch: *cin,
                out_ch: *cout,
            });
        }

        Ok(Self {
            config,
            params: store,
            encoder,
            decoder,
            classifier,
            disc,
            perceptual,
        })
    }

    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let ck = ckpt::load_expecting(path, "vae")?;
        let config: VaeConfig = serde_json::from_str(&ck.config_json)
            .map_err(|e| Error::data(format!("vae checkpoint config: {e}")))?;
        let mut vae = Vae::new(config, 0)?;
        if vae.params.len() != ck.params.len() {
            return Err(Error::data("vae checkpoint parameter layout mismatch"));
        }
        vae.params.copy_from(&ck.params);
        Ok(vae)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let config_json = serde_json::to_string(&self.config).unwrap();
        ckpt::save(path, "vae", &config_json, &self.params)
    }

    fn check_image_shape(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.image_size;
        if shape.len() != 2 || shape[0] != s || shape[1] != s {
            return Err(Error::shape(format!(
                "expected {s}x{s} image, got {shape:?} \
                 (dims must match the configured size and be divisible by {})",
                self.config.compression
            )));
        }
        Ok(())
    }

    /// Graph-building encoder: `[B,1,S,S] -> (mean, logvar)` each
    /// `[B,C,S/r,S/r]`.
    pub fn encode_graph(&self, t: &mut Tape, s: &ParamStore, x: Var) -> (Var, Var) {
        let mut h = self.encoder.conv_in.forward(t, s, x);
        for (down, res) in self.encoder.downs.iter().zip(&self.encoder.res) {
            h = t.silu(h);
            h = down.forward(t, s, h);
            if let Some(r) = res {
                h = r.forward(t, s, h, None);
            }
        }
        let h = self.encoder.head_norm.forward(t, s, h);
        let h = t.silu(h);
        let h = self.encoder.head.forward(t, s, h);
        let c = self.config.latent_channels;
        let mean = t.slice_axis(h, 1, 0, c);
        let logvar = t.slice_axis(h, 1, c, 2 * c);
        // Soft-clamp the log-variance for sampling stability.
        let logvar = t.tanh(logvar);
        let logvar = t.scale(logvar, 8.0);
        (mean, logvar)
    }

    /// Graph-building decoder: `[B,C,S/r,S/r] -> [B,1,S,S]` in [0,1].
    pub fn decode_graph(&self, t: &mut Tape, s: &ParamStore, z: Var) -> Var {
        let mut h = self.decoder.conv_in.forward(t, s, z);
        h = self.decoder.res_in.forward(t, s, h, None);
        for (up, res) in self.decoder.ups.iter().zip(&self.decoder.res) {
            h = t.upsample2x(h);
            h = up.forward(t, s, h);
            if let Some(r) = res {
                h = r.forward(t, s, h, None);
            } else {
                h = t.silu(h);
            }
        }
        let h = self.decoder.head_norm.forward(t, s, h);
        let h = t.silu(h);
        let h = self.decoder.head.forward(t, s, h);
        t.sigmoid(h)
    }

    fn classifier_logits(&self, t: &mut Tape, s: &ParamStore, mean: Var) -> Var {
        let shape = t.shape(mean).to_vec();
        let b = shape[0];
        let flat = t.reshape(mean, &[b, shape[1] * shape[2] * shape[3]]);
        let h = self.classifier.fc1.forward(t, s, flat);
        let h = t.gelu(h);
        self.classifier.fc2.forward(t, s, h)
    }

    fn disc_logits(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for (conv, norm) in self.disc.convs.iter().zip(&self.disc.norms) {
            h = conv.forward(t, s, h);
            if let Some(n) = norm {
                h = n.forward(t, s, h);
            }
            h = t.silu(h);
        }
        self.disc.head.forward(t, s, h)
    }

    fn perceptual_features(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for conv in &self.perceptual {
            h = conv.forward(t, s, h);
            h = t.silu(h);
        }
        h
    }

    /// Deterministic single-image encode.
    pub fn encode(&self, pixels: &Array2<f64>) -> Result<(Array3<f64>, Array3<f64>)> {
        self.check_image_shape(&[pixels.nrows(), pixels.ncols()])?;
        let mut t = Tape::new();
        let x = t.constant(image_batch(std::slice::from_ref(pixels)));
        let (mean, logvar) = self.encode_graph(&mut t, &self.params, x);
        Ok((to_latent(t.value(mean)), to_latent(t.value(logvar))))
    }

    /// Batch encode without gradients; returns `[B,C,h,w]` mean and logvar.
    pub fn encode_batch_values(&self, pixels: &[Array2<f64>]) -> Result<(Arr, Arr)> {
        for p in pixels {
            self.check_image_shape(&[p.nrows(), p.ncols()])?;
        }
        let mut t = Tape::new();
        let x = t.constant(image_batch(pixels));
        let (mean, logvar) = self.encode_graph(&mut t, &self.params, x);
        Ok((t.value(mean).clone(), t.value(logvar).clone()))
    }

    pub fn decode(&self, latent: &Array3<f64>) -> Result<Array2<f64>> {
        let hw = self.config.latent_hw();
        let c = self.config.latent_channels;
        let sh = latent.shape();
        if sh != [c, hw, hw] {
            return Err(Error::shape(format!(
                "expected latent [{c},{hw},{hw}], got {sh:?}"
            )));
        }
        if latent.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("non-finite latent"));
        }
        let mut t = Tape::new();
        let z = t.constant(
            latent
                .clone()
                .into_shape_with_order((1, c, hw, hw))
                .unwrap()
                .into_dyn(),
        );
        let y = self.decode_graph(&mut t, &self.params, z);
        let v = t.value(y);
        let s = self.config.image_size;
        let mut out = Array2::zeros((s, s));
        for i in 0..s {
            for j in 0..s {
                out[[i, j]] = v[[0, 0, i, j]];
            }
        }
        Ok(out)
    }
}

/// Reparameterized sample: mean + exp(logvar/2) * eps with seeded noise.
pub fn sample_latent(
    mean: &Array3<f64>,
    logvar: &Array3<f64>,
    seed: u64,
) -> Result<Array3<f64>> {
    if mean.shape() != logvar.shape() {
        return Err(Error::shape("mean/logvar shape mismatch"));
    }
    if mean.iter().chain(logvar.iter()).any(|v| !v.is_finite()) {
        return Err(Error::numerical("non-finite inputs to sample_latent"));
    }
    let mut r = rng(seed);
    let eps = randn(mean.shape(), &mut r);
    let eps3 = eps.into_dimensionality::<ndarray::Ix3>().unwrap();
    Ok(mean + &(logvar.mapv(|lv| (0.5 * lv).exp()) * &eps3))
}

/// Closed form KL(N(mu, sigma^2) || N(0, I)) summed over dims.
pub fn kl_diag_gaussian(mean: &[f64], logvar: &[f64]) -> f64 {
    mean.iter()
        .zip(logvar)
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq)]
pub struct VaeLossComponents {
    pub total: f64,
    pub rec: f64,
    pub kl: f64,
    pub adv: f64,
    pub cls: f64,
    pub perceptual: f64,
}

impl VaeLossComponents {
    fn add_scaled(&mut self, other: &Self, w: f64) {
        self.total += w * other.total;
        self.rec += w * other.rec;
        self.kl += w * other.kl;
        self.adv += w * other.adv;
        self.cls += w * other.cls;
        self.perceptual += w * other.perceptual;
    }
}

/// One composite-loss forward pass: the scalar root, its components, and
/// the decoded reconstructions (reused by the discriminator step).
pub struct LossGraph {
    pub total: Var,
    pub components: VaeLossComponents,
    pub recon_values: Arr,
}

impl Vae {
    /// Composite generator-side loss on one batch; `adv_active` gates the
    /// adversarial term (warm-up). Noise for the reparameterized sample is
    /// drawn from `noise_seed`.
    pub fn vae_loss_graph(
        &self,
        t: &mut Tape,
        s: &ParamStore,
        pixels: &[Array2<f64>],
        labels: &Array2<f64>,
        noise_seed: u64,
        adv_active: bool,
    ) -> LossGraph {
        let cfg = &self.config;
        let x = t.constant(image_batch(pixels));
        let (mean, logvar) = self.encode_graph(t, s, x);

        // KL summed over latent dims, averaged over the batch.
        let mu2 = t.mul(mean, mean);
        let elv = t.exp(logvar);
        let inner = t.add(mu2, elv);
        let inner = t.sub(inner, logvar);
        let inner = t.add_scalar(inner, -1.0);
        let kl_per = t.sum_axes(inner, &[1, 2, 3]);
        let kl_per = t.scale(kl_per, 0.5);
        let kl = t.mean_all(kl_per);

        // Reparameterized sample.
        let mut nrng = rng(noise_seed);
        let eps = t.constant(randn(t.shape(mean), &mut nrng));
        let half_lv = t.scale(logvar, 0.5);
        let std = t.exp(half_lv);
        let noise = t.mul(std, eps);
        let z = t.add(mean, noise);

        let recon = self.decode_graph(t, s, z);
        let recon_values = t.value(recon).clone();
        let diff = t.sub(recon, x);
        let sq = t.mul(diff, diff);
        let rec = t.mean_all(sq);

        let logits = self.classifier_logits(t, s, mean);
        let cls = t.bce_with_logits_mean(logits, &labels.clone().into_dyn());

        let per = if cfg.perceptual_weight != 0.0 {
            let fa = self.perceptual_features(t, s, recon);
            let fb = self.perceptual_features(t, s, x);
            let d = t.sub(fa, fb);
            let d2 = t.mul(d, d);
            t.mean_all(d2)
        } else {
            t.scalar(0.0)
        };

        let adv = if adv_active && cfg.adv_weight != 0.0 {
            let d_fake = self.disc_logits(t, s, recon);
            let m = t.mean_all(d_fake);
            t.neg(m)
        } else {
            t.scalar(0.0)
        };

        let kl_w = t.scale(kl, cfg.kl_weight);
        let cls_w = t.scale(cls, cfg.cls_weight);
        let per_w = t.scale(per, cfg.perceptual_weight);
        let adv_w = t.scale(adv, cfg.adv_weight);
        let mut total = t.add(rec, kl_w);
        total = t.add(total, cls_w);
        total = t.add(total, per_w);
        total = t.add(total, adv_w);

        let components = VaeLossComponents {
            total: t.scalar_value(total),
            rec: t.scalar_value(rec),
            kl: t.scalar_value(kl),
            adv: t.scalar_value(adv),
            cls: t.scalar_value(cls),
            perceptual: t.scalar_value(per),
        };
        LossGraph {
            total,
            components,
            recon_values,
        }
    }

    /// Public loss evaluation (no parameter update).
    pub fn vae_loss(
        &self,
        pixels: &[Array2<f64>],
        labels: &Array2<f64>,
        noise_seed: u64,
    ) -> Result<VaeLossComponents> {
        if pixels.is_empty() || labels.nrows() != pixels.len() {
            return Err(Error::shape("batch/labels mismatch"));
        }
        for p in pixels {
            self.check_image_shape(&[p.nrows(), p.ncols()])?;
        }
        let mut t = Tape::new();
        let g = self.vae_loss_graph(&mut t, &self.params, pixels, labels, noise_seed, true);
        Ok(g.components)
    }

    /// Discriminator hinge loss on (real, generated) images.
    fn disc_loss_graph(&self, t: &mut Tape, s: &ParamStore, real: &[Array2<f64>], fake: &Arr) -> Var {
        let xr = t.constant(image_batch(real));
        let xf = t.constant(fake.clone());
        let dr = self.disc_logits(t, s, xr);
        let df = self.disc_logits(t, s, xf);
        let one_minus = t.neg(dr);
        let one_minus = t.add_scalar(one_minus, 1.0);
        let l_real = t.relu(one_minus);
        let one_plus = t.add_scalar(df, 1.0);
        let l_fake = t.relu(one_plus);
        let lr = t.mean_all(l_real);
        let lf = t.mean_all(l_fake);
        t.add(lr, lf)
    }
}

fn image_batch(pixels: &[Array2<f64>]) -> Arr {
    let b = pixels.len();
    let (h, w) = pixels[0].dim();
    let mut out = ArrayD::zeros(IxDyn(&[b, 1, h, w]));
    for (i, p) in pixels.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                out[[i, 0, y, x]] = p[[y, x]];
            }
        }
    }
    out
}

fn to_latent(v: &Arr) -> Array3<f64> {
    let sh = v.shape();
    let mut out = Array3::zeros((sh[1], sh[2], sh[3]));
    for c in 0..sh[1] {
        for i in 0..sh[2] {
            for j in 0..sh[3] {
                out[[c, i, j]] = v[[0, c, i, j]];
            }
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Fixed microbatch size for deterministic data parallelism.
    pub shard_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 16,
            batch_size: 16,
            shard_size: 8,
            adam: AdamConfig {
                lr: 2e-3,
                ..Default::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: VaeLossComponents,
    pub val: VaeLossComponents,
}

pub struct VaeTrainOutcome {
    pub vae: Vae,
    pub log: Vec<EpochLog>,
    pub best_val_total: f64,
    pub best_epoch: usize,
}

/// Images plus abnormality labels, the VAE training unit.
pub struct LabeledImage {
    pub pixels: Array2<f64>,
    pub labels: Vec<bool>,
}

/// Pretrain the autoencoder; returns the checkpoint with the best
/// validation total loss. Deterministic for a fixed config and seed.
pub fn train_vae(
    train: &[LabeledImage],
    val: &[LabeledImage],
    config: VaeConfig,
    tc: &VaeTrainConfig,
    mut progress: impl FnMut(&EpochLog),
) -> Result<VaeTrainOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::data("train and validation image sets must be non-empty"));
    }
    let mut vae = Vae::new(config, tc.seed)?;
    let mut opt_gen = AdamW::new(&vae.params, tc.adam.clone());
    let mut opt_disc = AdamW::new(
        &vae.params,
        AdamConfig {
            lr: tc.adam.lr * 0.5,
            ..tc.adam.clone()
        },
    );
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut log = Vec::new();
    let mut indices: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;

    for epoch in 0..tc.epochs {
        let mut shuffle_rng = rng(child_seed2(tc.seed, "vae-epoch", epoch as u64, 0));
        indices.shuffle(&mut shuffle_rng);
        let mut train_acc = VaeLossComponents::default();
        let mut n_batches = 0usize;

        for batch_ids in indices.chunks(tc.batch_size) {
            let adv_active = step >= vae.config.adv_warmup_steps && vae.config.adv_weight != 0.0;
            let batch: Vec<&LabeledImage> = batch_ids.iter().map(|&i| &train[i]).collect();
            let noise_base = child_seed2(tc.seed, "vae-noise", epoch as u64, step as u64);
            let (comps, grads, recons) =
                batched_gen_pass(&vae, &batch, tc.shard_size, noise_base, adv_active)?;
            if !comps.total.is_finite() {
                return Err(Error::numerical(format!(
                    "vae training diverged at epoch {epoch} (total {})",
                    comps.total
                )));
            }
            opt_gen.step_filtered(&mut vae.params, &grads, &mut |name| {
                !name.starts_with("disc.")
            })?;

            if adv_active {
                let mut t = Tape::new();
                let reals: Vec<Array2<f64>> =
                    batch.iter().map(|li| li.pixels.clone()).collect();
                let dl = vae.disc_loss_graph(&mut t, &vae.params, &reals, &recons);
                let ng = t.backward(dl);
                let dg = t.param_grads(&ng, vae.params.len());
                opt_disc.step_filtered(&mut vae.params, &dg, &mut |name| {
                    name.starts_with("disc.")
                })?;
            }

            train_acc.add_scaled(&comps, 1.0);
            n_batches += 1;
            step += 1;
        }
        let train_mean = {
            let mut m = VaeLossComponents::default();
            m.add_scaled(&train_acc, 1.0 / n_batches.max(1) as f64);
            m
        };

        let val_mean = eval_vae_loss(&vae, val, tc.seed)?;
        if !val_mean.total.is_finite() {
            return Err(Error::numerical("non-finite validation loss"));
        }
        let entry = EpochLog {
            epoch,
            train: train_mean,
            val: val_mean,
        };
        progress(&entry);
        log.push(entry);
        if best.as_ref().map_or(true, |(b, _, _)| val_mean.total < *b) {
            best = Some((val_mean.total, epoch, vae.params.clone()));
        }
    }

    let (best_val_total, best_epoch, best_params) = best.unwrap();
    vae.params = best_params;
    Ok(VaeTrainOutcome {
        vae,
        log,
        best_val_total,
        best_epoch,
    })
}

/// Validation loss with per-sample fixed noise, comparable across epochs.
pub fn eval_vae_loss(vae: &Vae, val: &[LabeledImage], seed: u64) -> Result<VaeLossComponents> {
    let mut acc = VaeLossComponents::default();
    let chunks: Vec<&[LabeledImage]> = val.chunks(8).collect();
    let outs: Vec<Result<(VaeLossComponents, usize)>> =
        map_shards(&chunks, 1, |ci, chunk| {
            let chunk = chunk[0];
            let refs: Vec<&LabeledImage> = chunk.iter().collect();
            let pixels: Vec<Array2<f64>> = refs.iter().map(|li| li.pixels.clone()).collect();
            let labels = labels_matrix(&refs, vae.config.label_dim);
            let comps = vae.vae_loss(
                &pixels,
                &labels,
                child_seed(seed, "vae-val-noise", ci as u64),
            )?;
            Ok((comps, chunk.len()))
        });
    let mut total_n = 0usize;
    for out in outs {
        let (comps, n) = out?;
        acc.add_scaled(&comps, n as f64);
        total_n += n;
    }
    let mut mean = VaeLossComponents::default();
    mean.add_scaled(&acc, 1.0 / total_n.max(1) as f64);
    Ok(mean)
}

fn labels_matrix(batch: &[&LabeledImage], label_dim: usize) -> Array2<f64> {
    let mut labels = Array2::zeros((batch.len(), label_dim));
    for (i, li) in batch.iter().enumerate() {
        for (j, &b) in li.labels.iter().enumerate() {
            labels[[i, j]] = b as u8 as f64;
        }
    }
    labels
}

/// Forward+backward over one batch, sharded deterministically. Returns the
/// batch-mean components, gradients of the mean loss, and the decoded
/// reconstructions (for the discriminator step).
fn batched_gen_pass(
    vae: &Vae,
    batch: &[&LabeledImage],
    shard_size: usize,
    noise_base: u64,
    adv_active: bool,
) -> Result<(VaeLossComponents, ParamGrads, Arr)> {
    struct ShardOut {
        comps: VaeLossComponents,
        grads: ParamGrads,
        recon: Arr,
        n: usize,
    }
    let tc_shard = shard_size.min(batch.len()).max(1);
    let outs: Vec<Result<ShardOut>> = map_shards(batch, tc_shard, |si, shard| {
        let pixels: Vec<Array2<f64>> = shard.iter().map(|li| li.pixels.clone()).collect();
        let labels = labels_matrix(shard, vae.config.label_dim);
        let mut t = Tape::new();
        let g = vae.vae_loss_graph(
            &mut t,
            &vae.params,
            &pixels,
            &labels,
            child_seed(noise_base, "shard", si as u64),
            adv_active,
        );
        let ng = t.backward(g.total);
        let grads = t.param_grads(&ng, vae.params.len());
        Ok(ShardOut {
            comps: g.components,
            grads,
            recon: g.recon_values,
            n: shard.len(),
        })
    });

    let mut comps = VaeLossComponents::default();
    let mut grads: ParamGrads = (0..vae.params.len()).map(|_| None).collect();
    let mut recons: Vec<Arr> = Vec::new();
    let mut total_n = 0usize;
    for out in outs {
        let o = out?;
        let w = o.n as f64;
        comps.add_scaled(&o.comps, w);
        let mut g = o.grads;
        crate::tensor::scale_grads(&mut g, w);
        accumulate_grads(&mut grads, g);
        recons.push(o.recon);
        total_n += o.n;
    }
    let inv = 1.0 / total_n.max(1) as f64;
    let mut mean = VaeLossComponents::default();
    mean.add_scaled(&comps, inv);
    crate::tensor::scale_grads(&mut grads, inv);
    let views: Vec<_> = recons.iter().map(|a| a.view()).collect();
    let recon_all = ndarray::concatenate(Axis(0), &views).unwrap();
    Ok((mean, grads, recon_all))
}

/// Frozen-VAE embedding for generation metrics: flattened posterior mean.
pub struct VaeEmbedder<'a>(pub &'a Vae);

impl ImageEmbedder for VaeEmbedder<'_> {
    fn embed(&self, pixels: &Array2<f64>) -> Vec<f64> {
        let (mean, _) = self
            .0
            .encode(pixels)
            .expect("embedder image shape mismatch");
        mean.iter().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    pub(crate) fn micro_config() -> VaeConfig {
        VaeConfig {
            image_size: 16,
            compression: 4,
            latent_channels: 2,
            widths: vec![8, 8],
            res_levels: 1,
            adv_weight: 0.1,
            perceptual_weight: 0.1,
            adv_warmup_steps: 0,
            cls_hidden: 8,
            ..Default::default()
        }
    }

    fn random_images(n: usize, size: usize, seed: u64) -> Vec<LabeledImage> {
        let mut r = rng(seed);
        use rand::Rng as _;
        (0..n)
            .map(|_| LabeledImage {
                pixels: Array2::from_shape_fn((size, size), |_| r.gen_range(0.0..1.0)),
                labels: vec![r.gen_bool(0.5)],
            })
            .collect()
    }

    #[test]
    fn encode_shapes_follow_compression() {
        // Full-scale shape contract: 224x224 at r=8, C=4 -> 4x28x28.
        let cfg = VaeConfig {
            image_size: 224,
            widths: vec![8, 8, 8],
            ..Default::default()
        };
        let vae = Vae::new(cfg, 0).unwrap();
        let img = Array2::zeros((224, 224));
        let (mean, logvar) = vae.encode(&img).unwrap();
        assert_eq!(mean.shape(), &[4, 28, 28]);
        assert_eq!(logvar.shape(), &[4, 28, 28]);

        // Desk scale: 64x64 -> 4x8x8.
        let vae = Vae::new(VaeConfig::default(), 0).unwrap();
        let (mean, _) = vae.encode(&Array2::zeros((64, 64))).unwrap();
        assert_eq!(mean.shape(), &[4, 8, 8]);

        // Non-divisible input is rejected.
        assert!(vae.encode(&Array2::zeros((63, 63))).is_err());

        // Determinism: encode is a pure function.
        let img = Array2::from_shape_fn((64, 64), |(i, j)| ((i * 7 + j) % 13) as f64 / 13.0);
        let a = vae.encode(&img).unwrap();
        let b = vae.encode(&img).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn sample_latent_degenerate_and_seeded() {
        let mean = Array3::from_elem((2, 3, 3), 0.7);
        // Variance-zero limit: exp(0.5 * -1e9) underflows to exactly 0.
        let logvar = Array3::from_elem((2, 3, 3), -1e9);
        let z = sample_latent(&mean, &logvar, 42).unwrap();
        assert_eq!(z, mean);

        let logvar = Array3::from_elem((2, 3, 3), 0.0);
        let a = sample_latent(&mean, &logvar, 42).unwrap();
        let b = sample_latent(&mean, &logvar, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_latent(&mean, &logvar, 43).unwrap();
        assert_ne!(a, c);

        let bad = Array3::from_elem((2, 3, 3), f64::NAN);
        assert!(sample_latent(&bad, &logvar, 0).is_err());
        assert!(sample_latent(&mean, &Array3::zeros((1, 3, 3)), 0).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_diag_gaussian(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        // 1-d N(1, 1) vs N(0, 1): 0.5 * (mu^2 + sigma^2 - 1 - ln sigma^2).
        assert!((kl_diag_gaussian(&[1.0], &[0.0]) - 0.5).abs() < 1e-15);
        // Always non-negative on random inputs.
        let mut r = rng(5);
        use rand::Rng as _;
        for _ in 0..50 {
            let m: Vec<f64> = (0..4).map(|_| r.gen_range(-2.0..2.0)).collect();
            let lv: Vec<f64> = (0..4).map(|_| r.gen_range(-2.0..2.0)).collect();
            assert!(kl_diag_gaussian(&m, &lv) >= -1e-12);
        }
    }

    #[test]
    fn loss_components_compose_exactly() {
        let vae = Vae::new(micro_config(), 3).unwrap();
        let imgs = random_images(3, 16, 4);
        let pixels: Vec<Array2<f64>> = imgs.iter().map(|i| i.pixels.clone()).collect();
        let labels = arr2(&[[1.0], [0.0], [1.0]]);
        let c = vae.vae_loss(&pixels, &labels, 7).unwrap();
        let cfg = &vae.config;
        let expect = c.rec
            + cfg.kl_weight * c.kl
            + cfg.adv_weight * c.adv
            + cfg.cls_weight * c.cls
            + cfg.perceptual_weight * c.perceptual;
        assert!((c.total - expect).abs() < 1e-12);
        assert!(c.rec >= 0.0 && c.kl >= 0.0 && c.cls >= 0.0 && c.perceptual >= 0.0);

        // With zero extra weights the loss is the plain beta-VAE with
        // classifier: total = rec + w_kl*kl + cls.
        let mut plain_cfg = micro_config();
        plain_cfg.adv_weight = 0.0;
        plain_cfg.perceptual_weight = 0.0;
        let vae2 = Vae::new(plain_cfg, 3).unwrap();
        let c2 = vae2.vae_loss(&pixels, &labels, 7).unwrap();
        assert!((c2.total - (c2.rec + vae2.config.kl_weight * c2.kl + c2.cls)).abs() < 1e-12);
        assert_eq!(c2.adv, 0.0);
        assert_eq!(c2.perceptual, 0.0);
    }

    #[test]
    fn train_vae_smoke_and_determinism() {
        let imgs = random_images(10, 16, 8);
        let val = random_images(4, 16, 9);
        let tc = VaeTrainConfig {
            epochs: 2,
            batch_size: 4,
            shard_size: 2,
            seed: 11,
            ..Default::default()
        };
        let mut cfg = micro_config();
        cfg.adv_weight = 0.05; // exercise the discriminator path
        let out1 = train_vae(&imgs, &val, cfg.clone(), &tc, |_| {}).unwrap();
        assert_eq!(out1.log.len(), 2);
        let out2 = train_vae(&imgs, &val, cfg, &tc, |_| {}).unwrap();
        let d = (out1.log[1].val.total - out2.log[1].val.total).abs();
        assert!(d < 1e-5, "seeded reruns disagree: {d}");

        // Checkpoint roundtrip.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vae.ckpt");
        out1.vae.save_checkpoint(&path).unwrap();
        let loaded = Vae::from_checkpoint(&path).unwrap();
        let img = &imgs[0].pixels;
        assert_eq!(out1.vae.encode(img).unwrap().0, loaded.encode(img).unwrap().0);
    }

    #[test]
    fn decode_range_and_shape_errors() {
        let vae = Vae::new(micro_config(), 5).unwrap();
        let z = Array3::from_elem((2, 4, 4), 0.3);
        let img = vae.decode(&z).unwrap();
        assert_eq!(img.dim(), (16, 16));
        assert!(img.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(vae.decode(&Array3::zeros((2, 5, 4))).is_err());
        assert!(vae
            .decode(&Array3::from_elem((2, 4, 4), f64::INFINITY))
            .is_err());
    }
}
