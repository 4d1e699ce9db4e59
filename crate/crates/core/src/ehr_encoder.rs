//! Masked-attention Transformer over irregular series: per-step tokens plus
//! a class token, with the auxiliary abnormality head g. Positional encoding
//! is sinusoidal in the absolute hour, so irregular gaps are visible to
//! attention. Two instances with this architecture exist in the pipeline:
//! one conditioning the generator, one inside the predictor.

use crate::dataset::EhrSeries;
use crate::error::{Error, Result};
use crate::nn::{sinusoid_embedding, Act, FeedForward, LayerNorm, Linear, Mha};
use crate::tensor::{ParamId, ParamStore, Tape, Var};
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EhrEncoderConfig {
    /// Token input width: 2*(K dynamic + S static broadcast) channels.
    pub input_dim: usize,
    /// Model dimension d.
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Maximum accepted series length (callers truncate/rebin beyond it).
    pub max_len: usize,
    /// Auxiliary head output width L.
    pub label_dim: usize,
    pub aux_hidden: usize,
}

impl Default for EhrEncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            model_dim: 128,
            heads: 8,
            ff_dim: 256,
            max_len: 70,
            label_dim: 1,
            aux_hidden: 64,
        }
    }
}

impl EhrEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim % self.heads != 0 {
            return Err(Error::config("model_dim must be divisible by heads"));
        }
        if self.model_dim % 2 != 0 {
            return Err(Error::config("model_dim must be even (sinusoid table)"));
        }
        Ok(())
    }
}

/// One pre-norm Transformer layer over [CLS, phi(x_t0), ..., phi(x_t1)].
pub struct EhrEncoder {
    pub config: EhrEncoderConfig,
    phi: Linear,
    cls_token: ParamId,
    ln1: LayerNorm,
    attn: Mha,
    ln2: LayerNorm,
    ff: FeedForward,
    aux1: Linear,
    aux2: Linear,
}

/// Graph-side batch encoding: tokens `[B, 1+T, d]` (class token first) and
/// per-token validity (1 = real token, 0 = padding).
pub struct BatchEncoding {
    pub tokens: Var,
    pub valid: Array2<f64>,
}

/// Value-side encoding of a single series.
#[derive(Debug, Clone)]
pub struct EhrEncoding {
    /// (1+T) x d; row 0 is the class token.
    pub tokens: Array2<f64>,
    /// d; equals tokens row 0.
    pub cls: Array1<f64>,
    /// Per-row validity; padded rows are marked invalid.
    pub valid: Vec<bool>,
}

impl EhrEncoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: EhrEncoderConfig,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let cls0 = crate::tensor::randn(&[d], rng) * 0.02;
        Ok(Self {
            phi: Linear::new(store, &format!("{prefix}.phi"), config.input_dim, d, true, rng),
            cls_token: store.add(format!("{prefix}.cls"), cls0),
            ln1: LayerNorm::new(store, &format!("{prefix}.ln1"), d),
            attn: Mha::new(store, &format!("{prefix}.attn"), d, d, config.heads, rng),
            ln2: LayerNorm::new(store, &format!("{prefix}.ln2"), d),
            ff: FeedForward::new(
                store,
                &format!("{prefix}.ff"),
                d,
                config.ff_dim,
                Act::Gelu,
                rng,
            ),
            aux1: Linear::new(
                store,
                &format!("{prefix}.aux1"),
                d,
                config.aux_hidden,
                true,
                rng,
            ),
            aux2: Linear::new(
                store,
                &format!("{prefix}.aux2"),
                config.aux_hidden,
                config.label_dim,
                true,
                rng,
            ),
            config,
        })
    }

    /// Encode a batch of series, padded to `pad_to` value tokens (defaults
    /// to the longest series in the batch). Attention ignores padding
    /// exactly; padded token rows are marked invalid in the output.
    pub fn forward_batch(
        &self,
        t: &mut Tape,
        s: &ParamStore,
        series: &[&EhrSeries],
        pad_to: Option<usize>,
    ) -> Result<BatchEncoding> {
        let b = series.len();
        assert!(b > 0, "empty batch");
        let longest = series.iter().map(|sr| sr.len()).max().unwrap();
        let t_max = pad_to.unwrap_or(longest);
        if longest > self.config.max_len || t_max > self.config.max_len {
            return Err(Error::data(format!(
                "series length {} exceeds encoder max {} (truncate or rebin first)",
                longest.max(t_max),
                self.config.max_len
            )));
        }
        if t_max < longest {
            return Err(Error::data("pad_to shorter than longest series"));
        }
        let din = self.config.input_dim;
        let d = self.config.model_dim;

        let mut x = ArrayD::zeros(IxDyn(&[b, t_max.max(1), din]));
        let mut pe = ArrayD::zeros(IxDyn(&[b, t_max.max(1), d]));
        let mut valid = Array2::<f64>::zeros((b, 1 + t_max.max(1)));
        for (bi, sr) in series.iter().enumerate() {
            if sr.len() > 0 && sr.model_rows().ncols() != din {
                return Err(Error::shape(format!(
                    "series input width {} does not match encoder input_dim {din}",
                    sr.model_rows().ncols()
                )));
            }
            valid[[bi, 0]] = 1.0; // class token
            let rows = sr.model_rows();
            let hours: Vec<f64> = sr.hours.iter().map(|&h| h as f64).collect();
            let pe_rows = sinusoid_embedding(&hours, d);
            for r in 0..sr.len() {
                valid[[bi, 1 + r]] = 1.0;
                for c in 0..din {
                    x[[bi, r, c]] = rows[[r, c]];
                }
                for c in 0..d {
                    pe[[bi, r, c]] = pe_rows[[r, c]];
                }
            }
        }

        let xv = t.constant(x);
        let tokens_val = self.phi.forward(t, s, xv);
        let pev = t.constant(pe);
        let tokens_val = t.add(tokens_val, pev);

        // Class token broadcast across the batch.
        let zeros = t.constant(ArrayD::zeros(IxDyn(&[b, 1, d])));
        let cls = t.param(s, self.cls_token);
        let cls_tok = t.add_bias_last(zeros, cls);

        let x = t.concat(1, &[cls_tok, tokens_val]);
        let normed = self.ln1.forward(t, s, x);
        let attn_out = self.attn.forward(t, s, normed, normed, Some(&valid));
        let x = t.add(x, attn_out);
        let normed2 = self.ln2.forward(t, s, x);
        let ff_out = self.ff.forward(t, s, normed2);
        let tokens = t.add(x, ff_out);

        Ok(BatchEncoding { tokens, valid })
    }

    /// Class-token slice of a batch encoding: `[B, d]`.
    pub fn cls_of(&self, t: &mut Tape, enc: &BatchEncoding) -> Var {
        let shape = t.shape(enc.tokens).to_vec();
        let cls = t.slice_axis(enc.tokens, 1, 0, 1);
        t.reshape(cls, &[shape[0], shape[2]])
    }

    /// Auxiliary head logits from the class token: `[B, L]`.
    pub fn aux_logits(&self, t: &mut Tape, s: &ParamStore, enc: &BatchEncoding) -> Var {
        let cls = self.cls_of(t, enc);
        let h = self.aux1.forward(t, s, cls);
        let h = t.gelu(h);
        self.aux2.forward(t, s, h)
    }
}

/// Encode one series (optionally padded) and return plain arrays.
pub fn encode_ehr(
    encoder: &EhrEncoder,
    params: &ParamStore,
    series: &EhrSeries,
    pad_to: Option<usize>,
) -> Result<EhrEncoding> {
    let mut t = Tape::new();
    let enc = encoder.forward_batch(&mut t, params, &[series], pad_to)?;
    let tok = t.value(enc.tokens);
    let rows = tok.shape()[1];
    let d = tok.shape()[2];
    let mut tokens = Array2::zeros((rows, d));
    for r in 0..rows {
        for c in 0..d {
            tokens[[r, c]] = tok[[0, r, c]];
        }
    }
    let cls = tokens.row(0).to_owned();
    let valid = (0..rows).map(|r| enc.valid[[0, r]] != 0.0).collect();
    Ok(EhrEncoding { tokens, cls, valid })
}

/// Auxiliary abnormality probabilities for one series encoding.
pub fn aux_predict(
    encoder: &EhrEncoder,
    params: &ParamStore,
    series: &EhrSeries,
) -> Result<Array1<f64>> {
    let mut t = Tape::new();
    let enc = encoder.forward_batch(&mut t, params, &[series], None)?;
    let logits = encoder.aux_logits(&mut t, params, &enc);
    let probs = t.sigmoid(logits);
    let v = t.value(probs);
    Ok(Array1::from_iter(v.iter().copied()))
}

/// Mean binary cross-entropy over samples and labels, from probabilities.
pub fn aux_loss(probs: &Array2<f64>, target_labels: &Array2<bool>) -> Result<f64> {
    if probs.dim() != target_labels.dim() {
        return Err(Error::shape("probs/labels shape mismatch"));
    }
    if probs.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::numerical(
            "probabilities must lie strictly inside (0, 1)",
        ));
    }
    let mut total = 0.0;
    for (p, &y) in probs.iter().zip(target_labels.iter()) {
        total -= if y { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(total / probs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::assert_gradcheck;
    use crate::seed::rng;
    use ndarray::arr2;

    fn tiny_config() -> EhrEncoderConfig {
        EhrEncoderConfig {
            input_dim: 6,
            model_dim: 8,
            heads: 2,
            ff_dim: 16,
            max_len: 70,
            label_dim: 2,
            aux_hidden: 8,
        }
    }

    fn series(hours: &[i64], k: usize, seed: u64) -> EhrSeries {
        let mut r = rng(seed);
        use rand::Rng;
        let t = hours.len();
        EhrSeries {
            values: Array2::from_shape_fn((t, k), |_| r.gen_range(-1.0..1.0)),
            mask: Array2::from_shape_fn((t, k), |_| r.gen_bool(0.7)),
            hours: hours.to_vec(),
            static_vars: vec![0.3],
        }
    }

    fn build(seed: u64) -> (EhrEncoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        let enc = EhrEncoder::new(&mut store, "ehr", tiny_config(), &mut r).unwrap();
        (enc, store)
    }

    #[test]
    fn empty_series_still_has_class_token() {
        let (enc, store) = build(1);
        let s = series(&[], 2, 2);
        let e = encode_ehr(&enc, &store, &s, None).unwrap();
        assert_eq!(e.valid[0], true);
        assert!(e.cls.iter().all(|v| v.is_finite()));
        assert_eq!(e.cls.to_vec(), e.tokens.row(0).to_vec());
    }

    #[test]
    fn padding_leaves_cls_unchanged() {
        let (enc, store) = build(3);
        let s = series(&[1, 4, 9], 2, 4);
        let plain = encode_ehr(&enc, &store, &s, None).unwrap();
        let padded = encode_ehr(&enc, &store, &s, Some(8)).unwrap();
        let max_diff = plain
            .cls
            .iter()
            .zip(padded.cls.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-6, "cls changed under padding: {max_diff}");
        assert_eq!(&padded.valid[1..4], &[true, true, true]);
        assert_eq!(&padded.valid[4..], &[false; 5]);
    }

    #[test]
    fn mask_invariance_over_many_series() {
        let (enc, store) = build(5);
        let mut worst = 0.0f64;
        for i in 0..50 {
            let len = 1 + (i % 6);
            let hours: Vec<i64> = (0..len as i64).map(|h| h * 2 + 1).collect();
            let s = series(&hours, 2, 100 + i as u64);
            let a = encode_ehr(&enc, &store, &s, None).unwrap();
            let b = encode_ehr(&enc, &store, &s, Some(len + 5)).unwrap();
            let d = a
                .cls
                .iter()
                .zip(b.cls.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            worst = worst.max(d);
        }
        assert!(worst < 1e-5, "max cls padding deviation {worst}");
    }

    #[test]
    fn positional_shift_changes_cls() {
        let (enc, store) = build(7);
        let s = series(&[1, 4, 9], 2, 8);
        let mut shifted = s.clone();
        shifted.hours = s.hours.iter().map(|h| h + 1).collect();
        let a = encode_ehr(&enc, &store, &s, None).unwrap();
        let b = encode_ehr(&enc, &store, &shifted, None).unwrap();
        let d = a
            .cls
            .iter()
            .zip(b.cls.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(d > 0.0, "encoder ignores absolute hours");
    }

    #[test]
    fn channel_permutation_reparameterization() {
        // Swapping two value channels (and their mask channels) while
        // applying the matched row permutation to phi's weight leaves the
        // encoding unchanged.
        let (enc, mut store) = build(9);
        let k = 2usize; // dynamic channels; input layout [v0 v1 s | m0 m1 1]
        let s0 = series(&[2, 5, 11, 20], k, 10);
        let before = encode_ehr(&enc, &store, &s0, None).unwrap();

        let mut swapped = s0.clone();
        for r in 0..swapped.len() {
            swapped.values.swap((r, 0), (r, 1));
            let tmp = swapped.mask[[r, 0]];
            swapped.mask[[r, 0]] = swapped.mask[[r, 1]];
            swapped.mask[[r, 1]] = tmp;
        }
        let wid = store.id_by_name("ehr.phi.w").unwrap();
        {
            let w = store.value_mut(wid);
            let d = w.shape()[1];
            for c in 0..d {
                // value channels 0 <-> 1
                let a = w[[0, c]];
                w[[0, c]] = w[[1, c]];
                w[[1, c]] = a;
                // mask channels at offset k + s = 3
                let a = w[[3, c]];
                w[[3, c]] = w[[4, c]];
                w[[4, c]] = a;
            }
        }
        let after = encode_ehr(&enc, &store, &swapped, None).unwrap();
        let d = before
            .cls
            .iter()
            .zip(after.cls.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(d < 1e-12, "reparameterization broke: {d}");
    }

    #[test]
    fn aux_predict_shapes_and_zero_head() {
        let (enc, mut store) = build(11);
        let s = series(&[0, 3], 2, 12);
        // Zero the head: logits 0 -> probabilities 0.5.
        for name in ["ehr.aux2.w", "ehr.aux2.b"] {
            let id = store.id_by_name(name).unwrap();
            store.value_mut(id).fill(0.0);
        }
        let p = aux_predict(&enc, &store, &s).unwrap();
        assert_eq!(p.len(), 2);
        assert!(p.iter().all(|&x| (x - 0.5).abs() < 1e-12));

        // Wide head: L=25 shape check.
        let mut store25 = ParamStore::new();
        let mut r = rng(13);
        let cfg = EhrEncoderConfig {
            label_dim: 25,
            ..tiny_config()
        };
        let enc25 = EhrEncoder::new(&mut store25, "ehr", cfg, &mut r).unwrap();
        let p = aux_predict(&enc25, &store25, &s).unwrap();
        assert_eq!(p.len(), 25);
    }

    #[test]
    fn aux_loss_closed_forms() {
        // logistic(0.847) ~= 0.7
        let p = 1.0 / (1.0 + (-0.847f64).exp());
        assert!((p - 0.699939).abs() < 1e-5);

        let probs = arr2(&[[0.5, 0.5]]);
        let y = arr2(&[[true, false]]);
        let l = aux_loss(&probs, &y).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);

        let probs = arr2(&[[0.9, 0.1]]);
        let y = arr2(&[[true, false]]);
        let l = aux_loss(&probs, &y).unwrap();
        assert!((l - 0.105360516).abs() < 1e-8);

        let eps = 1e-9;
        let probs = arr2(&[[1.0 - eps, eps]]);
        let l = aux_loss(&probs, &y).unwrap();
        assert!(l < 1e-6);

        assert!(aux_loss(&arr2(&[[1.2]]), &arr2(&[[true]])).is_err());
    }

    #[test]
    fn too_long_series_is_rejected() {
        let (enc, store) = build(15);
        let hours: Vec<i64> = (0..71).collect();
        let s = series(&hours, 2, 16);
        assert!(encode_ehr(&enc, &store, &s, None).is_err());
    }

    #[test]
    fn aux_path_gradcheck() {
        let mut store = ParamStore::new();
        let mut r = rng(17);
        let enc = EhrEncoder::new(&mut store, "ehr", tiny_config(), &mut r).unwrap();
        let s = series(&[1, 5, 8], 2, 18);
        let targets = arr2(&[[1.0, 0.0]]).into_dyn();
        assert_gradcheck(
            &mut store,
            |t, st| {
                let enc_b = enc.forward_batch(t, st, &[&s], Some(5)).unwrap();
                let logits = enc.aux_logits(t, st, &enc_b);
                t.bce_with_logits_mean(logits, &targets)
            },
            120,
            19,
            1e-4,
        );
    }
}
