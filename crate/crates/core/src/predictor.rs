//! Prediction-stage fusion: a narrow residual conv net over the last image,
//! a series encoder over the 48-hour window, a Transformer over generated
//! latent tokens, and a self-attention fusion head. Branches can be dropped
//! at forward time, which is exactly equivalent to a model built without
//! that branch (the ablation baselines).

use crate::ckpt;
use crate::dataset::{EhrSeries, PredictionSample};
use crate::ehr_encoder::{EhrEncoder, EhrEncoderConfig};
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::{Act, Conv2d, FeedForward, GroupNorm, LayerNorm, Linear, Mha, ResBlock2d};
use crate::opt::{AdamConfig, AdamW};
use crate::parallel::map_shards;
use crate::seed::{child_seed, child_seed2, rng};
use crate::tensor::{accumulate_grads, scale_grads, Arr, ParamGrads, ParamId, ParamStore, Tape, Var};
use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    pub image_size: usize,
    /// Stage widths of the image branch (narrow residual net).
    pub image_widths: Vec<usize>,
    /// Residual blocks per stage (depth class of the 34-layer family).
    pub image_blocks: Vec<usize>,
    pub latent_channels: usize,
    pub latent_hw: usize,
    /// Latent-branch Transformer width and feed-forward size.
    pub lat_dim: usize,
    pub lat_ff: usize,
    pub lat_heads: usize,
    pub ehr: EhrEncoderConfig,
    pub fusion_dim: usize,
    pub fusion_heads: usize,
    /// Task width L' (1 for mortality, 25 for phenotypes at full scale).
    pub label_dim: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            image_widths: vec![8, 12, 16, 24],
            image_blocks: vec![3, 4, 6, 3],
            latent_channels: 4,
            latent_hw: 8,
            lat_dim: 128,
            lat_ff: 512,
            lat_heads: 8,
            ehr: EhrEncoderConfig::default(),
            fusion_dim: 128,
            fusion_heads: 8,
            label_dim: 1,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_widths.len() != self.image_blocks.len() {
            return Err(Error::config("image_widths/image_blocks length mismatch"));
        }
        if self.lat_dim % self.lat_heads != 0 || self.fusion_dim % self.fusion_heads != 0 {
            return Err(Error::config("dims must be divisible by head counts"));
        }
        self.ehr.validate()
    }
}

/// Which modality tokens enter the fusion attention. Excluding a branch is
/// identical to a model constructed without it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchMask {
    pub image: bool,
    pub ehr: bool,
    pub latent: bool,
}

impl BranchMask {
    pub const FULL: BranchMask = BranchMask {
        image: true,
        ehr: true,
        latent: true,
    };
    /// Carry-forward baseline: drop the generated latent.
    pub const LAST_IMAGE: BranchMask = BranchMask {
        image: true,
        ehr: true,
        latent: false,
    };
    /// Image-only variants.
    pub const LAST_IMAGE_NO_EHR: BranchMask = BranchMask {
        image: true,
        ehr: false,
        latent: false,
    };
    pub const GEN_NO_EHR: BranchMask = BranchMask {
        image: true,
        ehr: false,
        latent: true,
    };
}

struct ImageBranch {
    stem1: Conv2d,
    stem2: Conv2d,
    stem_norm: GroupNorm,
    stages: Vec<Vec<ResBlock2d>>,
    downs: Vec<Conv2d>,
    out_norm: GroupNorm,
    proj: Linear,
}

struct LatentBranch {
    proj: Linear,
    cls: ParamId,
    ln1: LayerNorm,
    attn: Mha,
    ln2: LayerNorm,
    ff: FeedForward,
    out: Linear,
}

struct FusionHead {
    modality_emb: ParamId,
    ln: LayerNorm,
    attn: Mha,
    head: Linear,
}

pub struct Predictor {
    pub config: PredictorConfig,
    pub params: ParamStore,
    image: ImageBranch,
    latent: LatentBranch,
    pub ehr_encoder: EhrEncoder,
    ehr_proj: Linear,
    fusion: FusionHead,
}

impl Predictor {
    pub fn new(config: PredictorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng(child_seed(seed, "pred-init", 0));
        let fd = config.fusion_dim;

        let w0 = config.image_widths[0];
        let stem1 = Conv2d::new(&mut store, "img.stem1", 1, w0, 3, 2, 1, &mut r);
        let stem2 = Conv2d::new(&mut store, "img.stem2", w0, w0, 3, 2, 1, &mut r);
        let stem_norm = GroupNorm::new(&mut store, "img.stemn", w0);
        let mut stages = Vec::new();
        let mut downs = Vec::new();
        let mut ch = w0;
        for (si, (&w, &nblocks)) in config
            .image_widths
            .iter()
            .zip(&config.image_blocks)
            .enumerate()
        {
            if si > 0 {
                downs.push(Conv2d::new(
                    &mut store,
                    &format!("img.down{si}"),
                    ch,
                    w,
                    3,
                    2,
                    1,
                    &mut r,
                ));
                ch = w;
            }
            let mut blocks = Vec::new();
            for bi in 0..nblocks {
                blocks.push(ResBlock2d::new(
                    &mut store,
                    &format!("img.s{si}.b{bi}"),
                    ch,
                    ch,
                    None,
                    &mut r,
                ));
            }
            stages.push(blocks);
        }
        let out_norm = GroupNorm::new(&mut store, "img.outn", ch);
        let proj = Linear::new(&mut store, "img.proj", ch, fd, true, &mut r);
        let image = ImageBranch {
            stem1,
            stem2,
            stem_norm,
            stages,
            downs,
            out_norm,
            proj,
        };

        let ld = config.lat_dim;
        let cls0 = crate::tensor::randn(&[ld], &mut r) * 0.02;
        let latent = LatentBranch {
            proj: Linear::new(&mut store, "lat.proj", config.latent_channels, ld, true, &mut r),
            cls: store.add("lat.cls", cls0),
            ln1: LayerNorm::new(&mut store, "lat.ln1", ld),
            attn: Mha::new(&mut store, "lat.attn", ld, ld, config.lat_heads, &mut r),
            ln2: LayerNorm::new(&mut store, "lat.ln2", ld),
            ff: FeedForward::new(&mut store, "lat.ff", ld, config.lat_ff, Act::Gelu, &mut r),
            out: Linear::new(&mut store, "lat.out", ld, fd, true, &mut r),
        };

        let ehr_encoder = EhrEncoder::new(&mut store, "pred_ehr", config.ehr.clone(), &mut r)?;
        let ehr_proj = Linear::new(
            &mut store,
            "ehr.proj",
            config.ehr.model_dim,
            fd,
            true,
            &mut r,
        );

        let emb0 = crate::tensor::randn(&[3 * fd], &mut r) * 0.02;
        let fusion = FusionHead {
            modality_emb: store.add("fusion.modality", emb0),
            ln: LayerNorm::new(&mut store, "fusion.ln", fd),
            attn: Mha::new(&mut store, "fusion.attn", fd, fd, config.fusion_heads, &mut r),
            head: Linear::new(&mut store, "fusion.head", fd, config.label_dim, true, &mut r),
        };

        Ok(Self {
            config,
            params: store,
            image,
            latent,
            ehr_encoder,
            ehr_proj,
            fusion,
        })
    }

    fn image_embedding(&self, t: &mut Tape, s: &ParamStore, pixels: Var) -> Var {
        let mut h = self.image.stem1.forward(t, s, pixels);
        h = t.silu(h);
        h = self.image.stem2.forward(t, s, h);
        h = self.image.stem_norm.forward(t, s, h);
        h = t.silu(h);
        for (si, blocks) in self.image.stages.iter().enumerate() {
            if si > 0 {
                h = self.image.downs[si - 1].forward(t, s, h);
            }
            for b in blocks {
                h = b.forward(t, s, h, None);
            }
        }
        let h = self.image.out_norm.forward(t, s, h);
        let h = t.silu(h);
        let pooled = t.mean_axes(h, &[2, 3]);
        self.image.proj.forward(t, s, pooled)
    }

    fn latent_embedding(&self, t: &mut Tape, s: &ParamStore, z: Var) -> Var {
        let shape = t.shape(z).to_vec();
        let (b, c, hh, ww) = (shape[0], shape[1], shape[2], shape[3]);
        let seq = t.permute(z, &[0, 2, 3, 1]);
        let seq = t.reshape(seq, &[b, hh * ww, c]);
        let tokens = self.latent.proj.forward(t, s, seq);
        let ld = self.config.lat_dim;
        let zeros = t.constant(ArrayD::zeros(IxDyn(&[b, 1, ld])));
        let cls = t.param(s, self.latent.cls);
        let cls_tok = t.add_bias_last(zeros, cls);
        let mut x = t.concat(1, &[cls_tok, tokens]);
        let n1 = self.latent.ln1.forward(t, s, x);
        let sa = self.latent.attn.forward(t, s, n1, n1, None);
        x = t.add(x, sa);
        let n2 = self.latent.ln2.forward(t, s, x);
        let ff = self.latent.ff.forward(t, s, n2);
        x = t.add(x, ff);
        let cls_out = t.slice_axis(x, 1, 0, 1);
        let cls_out = t.reshape(cls_out, &[b, ld]);
        self.latent.out.forward(t, s, cls_out)
    }

    fn ehr_embedding(&self, t: &mut Tape, s: &ParamStore, series: &[&EhrSeries]) -> Result<Var> {
        let enc = self.ehr_encoder.forward_batch(t, s, series, None)?;
        let cls = self.ehr_encoder.cls_of(t, &enc);
        Ok(self.ehr_proj.forward(t, s, cls))
    }

    /// Fusion logits over the included modality tokens.
    pub fn logits_graph(
        &self,
        t: &mut Tape,
        s: &ParamStore,
        pixels: &Arr,
        series: &[&EhrSeries],
        latents: &Arr,
        mask: BranchMask,
    ) -> Result<Var> {
        if !(mask.image || mask.ehr || mask.latent) {
            return Err(Error::config("at least one branch must be enabled"));
        }
        let b = pixels.shape()[0];
        let fd = self.config.fusion_dim;
        let emb = t.param(s, self.fusion.modality_emb);
        let emb = t.reshape(emb, &[3, fd]);

        let mut tokens: Vec<Var> = Vec::new();
        if mask.image {
            let px = t.constant(pixels.clone());
            let e = self.image_embedding(t, s, px);
            let m = t.slice_axis(emb, 0, 0, 1);
            let m = t.reshape(m, &[fd]);
            let e = t.add_bias_last(e, m);
            tokens.push(t.reshape(e, &[b, 1, fd]));
        }
        if mask.ehr {
            let e = self.ehr_embedding(t, s, series)?;
            let m = t.slice_axis(emb, 0, 1, 2);
            let m = t.reshape(m, &[fd]);
            let e = t.add_bias_last(e, m);
            tokens.push(t.reshape(e, &[b, 1, fd]));
        }
        if mask.latent {
            let z = t.constant(latents.clone());
            let e = self.latent_embedding(t, s, z);
            let m = t.slice_axis(emb, 0, 2, 3);
            let m = t.reshape(m, &[fd]);
            let e = t.add_bias_last(e, m);
            tokens.push(t.reshape(e, &[b, 1, fd]));
        }
        let x = if tokens.len() == 1 {
            tokens[0]
        } else {
            t.concat(1, &tokens)
        };
        let n = self.fusion.ln.forward(t, s, x);
        let a = self.fusion.attn.forward(t, s, n, n, None);
        let x = t.add(x, a);
        let pooled = t.mean_axes(x, &[1]);
        Ok(self.fusion.head.forward(t, s, pooled))
    }

    /// Probabilities for one sample given its generated latent.
    pub fn predict(
        &self,
        sample: &PredictionSample,
        gen_latent: &Array3<f64>,
        mask: BranchMask,
    ) -> Result<Array1<f64>> {
        let cfg = &self.config;
        let (h, w) = sample.last_image.pixels.dim();
        if h != cfg.image_size || w != cfg.image_size {
            return Err(Error::shape(format!(
                "expected {0}x{0} image, got {h}x{w}",
                cfg.image_size
            )));
        }
        if gen_latent.shape() != [cfg.latent_channels, cfg.latent_hw, cfg.latent_hw] {
            return Err(Error::shape(format!(
                "expected latent [{},{},{}], got {:?}",
                cfg.latent_channels,
                cfg.latent_hw,
                cfg.latent_hw,
                gen_latent.shape()
            )));
        }
        let mut t = Tape::new();
        let pixels = image_batch(&[&sample.last_image.pixels]);
        let latents = latent_batch(&[gen_latent]);
        let logits = self.logits_graph(&mut t, &self.params, &pixels, &[&sample.ehr_48h], &latents, mask)?;
        let probs = t.sigmoid(logits);
        Ok(Array1::from_iter(t.value(probs).iter().copied()))
    }
}

/// Pack images as an NCHW batch (shared with the gradient suites).
pub fn image_batch(pixels: &[&Array2<f64>]) -> Arr {
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

/// Pack latents as an NCHW batch.
pub fn latent_batch(latents: &[&Array3<f64>]) -> Arr {
    let b = latents.len();
    let sh = latents[0].shape();
    let mut out = ArrayD::zeros(IxDyn(&[b, sh[0], sh[1], sh[2]]));
    for (i, z) in latents.iter().enumerate() {
        for c in 0..sh[0] {
            for y in 0..sh[1] {
                for x in 0..sh[2] {
                    out[[i, c, y, x]] = z[[c, y, x]];
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    Mean,
}

/// Cross-entropy over probabilities; sum reduction matches the printed
/// convention, mean is the config toggle.
pub fn task_loss(probs: &Array2<f64>, labels: &Array2<bool>, reduction: Reduction) -> Result<f64> {
    if probs.dim() != labels.dim() {
        return Err(Error::shape("probs/labels shape mismatch"));
    }
    let mut total = 0.0;
    for (p, &y) in probs.iter().zip(labels.iter()) {
        let p = p.clamp(1e-12, 1.0 - 1e-12);
        total -= if y { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => total / probs.len() as f64,
    })
}

/// One training record: the sample plus its generated latent.
pub struct PreparedPrediction {
    pub sample: PredictionSample,
    pub gen_latent: Array3<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub shard_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Training-objective reduction (the report-side default stays Sum).
    pub reduction: Reduction,
}

impl Default for PredictorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            shard_size: 8,
            adam: AdamConfig {
                lr: 1e-3,
                weight_decay: 1e-4,
                ..Default::default()
            },
            seed: 0,
            reduction: Reduction::Mean,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictorEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auprc: f64,
    pub val_auroc: f64,
}

pub struct PredictorTrainOutcome {
    pub predictor: Predictor,
    pub log: Vec<PredictorEpochLog>,
    pub best_val_auprc: f64,
    pub best_epoch: usize,
}

/// Per-epoch latent regeneration hook for the fresh-latent mode: returns
/// one latent per training sample, in sample order.
pub type LatentRefresh<'a> = &'a (dyn Fn(usize) -> Result<Vec<Array3<f64>>> + Sync);

/// Train the fusion classifier on prepared samples; checkpoint selection by
/// best validation AUPRC (macro over labels). With `refresh` set, training
/// latents are regenerated at every epoch (per-(sample, epoch) seeds);
/// otherwise the prepared latents are reused across epochs (cached mode).
pub fn train_predictor(
    train: &[PreparedPrediction],
    val: &[PreparedPrediction],
    config: PredictorConfig,
    mask: BranchMask,
    tc: &PredictorTrainConfig,
    refresh: Option<LatentRefresh>,
    warm_ehr_from: Option<(&ParamStore, &str)>,
    mut progress: impl FnMut(&PredictorEpochLog),
) -> Result<PredictorTrainOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::data("train and validation sets must be non-empty"));
    }
    let mut model = Predictor::new(config, tc.seed)?;
    if let Some((src, prefix)) = warm_ehr_from {
        model.warm_start_ehr_from(src, prefix)?;
    }
    let mut opt = AdamW::new(&model.params, tc.adam.clone());
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut fresh_latents: Option<Vec<Array3<f64>>> = None;

    for epoch in 0..tc.epochs {
        if let Some(f) = refresh {
            let lat = f(epoch)?;
            if lat.len() != train.len() {
                return Err(Error::data("latent refresh returned wrong sample count"));
            }
            fresh_latents = Some(lat);
        }
        let mut shuffle_rng = rng(child_seed2(tc.seed, "pred-epoch", epoch as u64, 0));
        order.shuffle(&mut shuffle_rng);
        let mut loss_acc = 0.0;
        let mut n_batches = 0usize;
        let epoch_samples: Vec<PreparedPrediction>;
        let train_view: &[PreparedPrediction] = match &fresh_latents {
            None => train,
            Some(lat) => {
                epoch_samples = train
                    .iter()
                    .zip(lat)
                    .map(|(p, z)| PreparedPrediction {
                        sample: p.sample.clone(),
                        gen_latent: z.clone(),
                    })
                    .collect();
                &epoch_samples
            }
        };
        for batch_ids in order.chunks(tc.batch_size) {
            let batch: Vec<&PreparedPrediction> =
                batch_ids.iter().map(|&i| &train_view[i]).collect();
            let (loss, grads) = sharded_pred_pass(&model, &batch, mask, tc)?;
            if !loss.is_finite() {
                return Err(Error::numerical(format!(
                    "predictor training diverged at epoch {epoch}"
                )));
            }
            opt.step(&mut model.params, &grads)?;
            loss_acc += loss;
            n_batches += 1;
        }

        let (val_auroc, val_auprc) = eval_predictor(&model, val, mask)?;
        let entry = PredictorEpochLog {
            epoch,
            train_loss: loss_acc / n_batches.max(1) as f64,
            val_auprc,
            val_auroc,
        };
        progress(&entry);
        log.push(entry);
        if best.as_ref().map_or(true, |(b, _, _)| val_auprc > *b) {
            best = Some((val_auprc, epoch, model.params.clone()));
        }
    }
    let (best_val_auprc, best_epoch, best_params) = best.unwrap();
    model.params = best_params;
    Ok(PredictorTrainOutcome {
        predictor: model,
        log,
        best_val_auprc,
        best_epoch,
    })
}

/// Macro AUROC/AUPRC of a model over a sample set.
pub fn eval_predictor(
    model: &Predictor,
    samples: &[PreparedPrediction],
    mask: BranchMask,
) -> Result<(f64, f64)> {
    let scores = predict_all(model, samples, mask)?;
    let labels = labels_of(samples);
    let auroc = metrics::macro_metric(&scores.view(), &labels.view(), metrics::auroc)?;
    let auprc = metrics::macro_metric(&scores.view(), &labels.view(), metrics::auprc)?;
    Ok((auroc, auprc))
}

/// Probabilities for every sample (parallel, deterministic order).
pub fn predict_all(
    model: &Predictor,
    samples: &[PreparedPrediction],
    mask: BranchMask,
) -> Result<Array2<f64>> {
    let l = model.config.label_dim;
    let chunks: Vec<&[PreparedPrediction]> = samples.chunks(8).collect();
    let outs: Vec<Result<Vec<Vec<f64>>>> = map_shards(&chunks, 1, |_, chunk| {
        let chunk = chunk[0];
        let pixels: Vec<&Array2<f64>> =
            chunk.iter().map(|p| &p.sample.last_image.pixels).collect();
        let series: Vec<&EhrSeries> = chunk.iter().map(|p| &p.sample.ehr_48h).collect();
        let latents: Vec<&Array3<f64>> = chunk.iter().map(|p| &p.gen_latent).collect();
        let mut t = Tape::new();
        let logits = model.logits_graph(
            &mut t,
            &model.params,
            &image_batch(&pixels),
            &series,
            &latent_batch(&latents),
            mask,
        )?;
        let probs = t.sigmoid(logits);
        let v = t.value(probs);
        Ok((0..chunk.len())
            .map(|i| (0..l).map(|c| v[[i, c]]).collect())
            .collect())
    });
    let mut scores = Array2::zeros((samples.len(), l));
    let mut row = 0usize;
    for out in outs {
        for sample_scores in out? {
            for (c, v) in sample_scores.into_iter().enumerate() {
                scores[[row, c]] = v;
            }
            row += 1;
        }
    }
    Ok(scores)
}

pub fn labels_of(samples: &[PreparedPrediction]) -> Array2<bool> {
    let l = samples
        .first()
        .map(|p| p.sample.task_labels.len())
        .unwrap_or(0);
    Array2::from_shape_fn((samples.len(), l), |(i, c)| samples[i].sample.task_labels[c])
}

fn sharded_pred_pass(
    model: &Predictor,
    batch: &[&PreparedPrediction],
    mask: BranchMask,
    tc: &PredictorTrainConfig,
) -> Result<(f64, ParamGrads)> {
    let shard = tc.shard_size.min(batch.len()).max(1);
    let outs: Vec<Result<(f64, ParamGrads, usize)>> = map_shards(batch, shard, |_, items| {
        let pixels: Vec<&Array2<f64>> =
            items.iter().map(|p| &p.sample.last_image.pixels).collect();
        let series: Vec<&EhrSeries> = items.iter().map(|p| &p.sample.ehr_48h).collect();
        let latents: Vec<&Array3<f64>> = items.iter().map(|p| &p.gen_latent).collect();
        let l = model.config.label_dim;
        let mut labels = Array2::zeros((items.len(), l));
        for (i, p) in items.iter().enumerate() {
            for (c, &y) in p.sample.task_labels.iter().enumerate() {
                labels[[i, c]] = y as u8 as f64;
            }
        }
        let mut t = Tape::new();
        let logits = model.logits_graph(
            &mut t,
            &model.params,
            &image_batch(&pixels),
            &series,
            &latent_batch(&latents),
            mask,
        )?;
        let loss = match tc.reduction {
            Reduction::Mean => t.bce_with_logits_mean(logits, &labels.into_dyn()),
            Reduction::Sum => t.bce_with_logits_sum(logits, &labels.into_dyn()),
        };
        let ng = t.backward(loss);
        let grads = t.param_grads(&ng, model.params.len());
        Ok((t.scalar_value(loss), grads, items.len()))
    });
    let mut grads: ParamGrads = (0..model.params.len()).map(|_| None).collect();
    let mut loss = 0.0;
    let mut n = 0usize;
    for out in outs {
        let (l, mut g, k) = out?;
        match tc.reduction {
            Reduction::Mean => {
                loss += l * k as f64;
                scale_grads(&mut g, k as f64);
            }
            Reduction::Sum => loss += l,
        }
        accumulate_grads(&mut grads, g);
        n += k;
    }
    if tc.reduction == Reduction::Mean {
        loss /= n.max(1) as f64;
        scale_grads(&mut grads, 1.0 / n.max(1) as f64);
    }
    Ok((loss, grads))
}

impl Predictor {
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        ckpt::save(
            path,
            "predictor",
            &serde_json::to_string(&self.config).unwrap(),
            &self.params,
        )
    }

    pub fn from_checkpoint(path: &Path) -> Result<Self> {
        let ck = ckpt::load_expecting(path, "predictor")?;
        let config: PredictorConfig = serde_json::from_str(&ck.config_json)
            .map_err(|e| Error::data(format!("predictor checkpoint config: {e}")))?;
        let mut model = Predictor::new(config, 0)?;
        if model.params.len() != ck.params.len() {
            return Err(Error::data("predictor checkpoint parameter layout mismatch"));
        }
        model.params.copy_from(&ck.params);
        Ok(model)
    }

    /// Copy the conditioning encoder's weights into the prediction-stage
    /// series encoder (the warm-start option).
    pub fn warm_start_ehr_from(&mut self, src: &ParamStore, src_prefix: &str) -> Result<()> {
        let names: Vec<String> = self
            .params
            .iter()
            .map(|(_, n, _)| n.to_string())
            .filter(|n| n.starts_with("pred_ehr."))
            .collect();
        for name in names {
            let suffix = name.strip_prefix("pred_ehr.").unwrap();
            let src_id = src
                .id_by_name(&format!("{src_prefix}.{suffix}"))
                .ok_or_else(|| Error::data(format!("warm start: missing source {suffix}")))?;
            let dst_id = self.params.id_by_name(&name).unwrap();
            if self.params.value(dst_id).shape() != src.value(src_id).shape() {
                return Err(Error::shape(format!(
                    "warm start: shape mismatch for {suffix}"
                )));
            }
            *self.params.value_mut(dst_id) = src.value(src_id).clone();
        }
        Ok(())
    }
}
