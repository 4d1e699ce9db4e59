//! Acceptance suite. Each criterion prints one PASS line (failures panic).
//! Criteria 1-6 are oracle/property checks; 7-9 train the full pipeline on
//! the bundled synthetic world at desk scale. Run with `--nocapture` to see
//! the per-criterion lines.

use cxrgen_core::config::RunConfig;
use cxrgen_core::dataset::{split_patients, EhrSeries, Task};
use cxrgen_core::diffusion::{
    contrastive_hinge, ddim_core, forward_diffuse, prepare_pairs, schedule_from_betas,
    train_ldm, DrawSeed, GenCondition, LdmHyper, LdmModel, PreparedPair, ScheduleKind,
    UnetConfig,
};
use cxrgen_core::ehr_encoder::{encode_ehr, EhrEncoder, EhrEncoderConfig};
use cxrgen_core::gradcheck::gradcheck;
use cxrgen_core::metrics::{auprc, auroc, frechet_distance, sliced_wasserstein};
use cxrgen_core::pipeline::{
    self, evaluate_generation, fit_and_standardize, ldm_pairs_for, prediction_samples_for,
    EvalReport, PredictionReport,
};
use cxrgen_core::predictor::BranchMask;
use cxrgen_core::seed::{child_seed, rng};
use cxrgen_core::synthworld::{measure_opacity, read_truth, write_world};
use cxrgen_core::tensor::{randn, ParamStore};
use cxrgen_core::vae::{train_vae, LabeledImage, Vae, VaeConfig};
use ndarray::{Array2, Array3};
use rand::Rng;
use std::time::Instant;

fn pass(n: u32, name: &str, detail: String) {
    println!("ACCEPTANCE {n} [{name}]: PASS  ({detail})");
}

// ---------------------------------------------------------------- criterion 1

#[test]
fn criterion_1_schedule_and_forward_diffusion_identities() {
    let t0 = Instant::now();
    // Direct-product oracle, exact equality.
    let mut r = rng(11);
    for _ in 0..25 {
        let n = r.gen_range(1..=64);
        let betas: Vec<f64> = (0..n).map(|_| r.gen_range(1e-5..0.6)).collect();
        let s = schedule_from_betas(ScheduleKind::Linear, betas.clone()).unwrap();
        for k in 0..=n {
            let mut prod = 1.0;
            for &b in betas.iter().take(k) {
                prod *= 1.0 - b;
            }
            assert_eq!(s.alpha_bars[k], prod);
        }
        assert_eq!(s.posterior_vars[1], 0.0);
    }

    // Monte-Carlo: chained single-step transitions vs the closed form.
    let schedule = cxrgen_core::diffusion::make_schedule(ScheduleKind::Linear, 12).unwrap();
    let (n_target, draws, z0) = (6usize, 10_000usize, -0.6f64);
    let mut samples = Vec::with_capacity(draws);
    let mut r = rng(12);
    for _ in 0..draws {
        let mut z = z0;
        for n in 1..=n_target {
            let beta = schedule.beta(n);
            let eps: f64 =
                rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut r);
            z = (1.0 - beta).sqrt() * z + beta.sqrt() * eps;
        }
        samples.push(z);
    }
    let ab = schedule.alpha_bars[n_target];
    let mean = samples.iter().sum::<f64>() / draws as f64;
    let var =
        samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (draws - 1) as f64;
    let se_mean = ((1.0 - ab) / draws as f64).sqrt();
    let se_var = (1.0 - ab) * (2.0 / (draws as f64 - 1.0)).sqrt();
    assert!((mean - ab.sqrt() * z0).abs() < 3.0 * se_mean);
    assert!((var - (1.0 - ab)).abs() < 3.0 * se_var);

    // Exactness of the closed form itself.
    let z0a = ndarray::arr1(&[1.0, -2.0]).into_dyn();
    let eps = ndarray::arr1(&[0.25, 0.5]).into_dyn();
    let z = forward_diffuse(&schedule, &z0a, n_target, &eps).unwrap();
    assert_eq!(z[[0]], ab.sqrt() * 1.0 + (1.0 - ab).sqrt() * 0.25);

    pass(
        1,
        "schedule/diffusion identities",
        format!("{} draws, {:.1}s", draws, t0.elapsed().as_secs_f64()),
    );
}

// ---------------------------------------------------------------- helpers

fn micro_ehr_config() -> EhrEncoderConfig {
    EhrEncoderConfig {
        input_dim: 6,
        model_dim: 8,
        heads: 2,
        ff_dim: 16,
        max_len: 70,
        label_dim: 1,
        aux_hidden: 8,
    }
}

fn micro_ldm(w_aux: f64, seed: u64) -> LdmModel {
    LdmModel::new(
        UnetConfig {
            latent_channels: 2,
            widths: vec![8, 16],
            ctx_dim: 8,
            heads: 2,
            ff_mult: 2,
        },
        micro_ehr_config(),
        LdmHyper {
            n_steps: 8,
            ddim_steps: 4,
            w_aux,
            ..Default::default()
        },
        seed,
    )
    .unwrap()
}

fn micro_series(r: &mut rand_chacha::ChaCha12Rng, t: usize) -> EhrSeries {
    EhrSeries {
        values: Array2::from_shape_fn((t, 2), |_| r.gen_range(-1.0..1.0)),
        mask: Array2::from_shape_fn((t, 2), |_| r.gen_bool(0.8)),
        hours: (0..t as i64).map(|h| 2 * h + 1).collect(),
        static_vars: vec![0.2],
    }
}

fn micro_pair(seed: u64) -> PreparedPair {
    let mut r = rng(seed);
    PreparedPair {
        z_target: Array3::from_shape_fn((2, 8, 8), |_| r.gen_range(-1.0..1.0)),
        z_ref: Array3::from_shape_fn((2, 8, 8), |_| r.gen_range(-1.0..1.0)),
        series: micro_series(&mut r, 3),
        labels: vec![r.gen_bool(0.5)],
    }
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn criterion_2_loss_reductions() {
    let t0 = Instant::now();
    let model = micro_ldm(0.0, 21);
    let pairs: Vec<PreparedPair> = (0..4).map(|i| micro_pair(300 + i)).collect();
    let refs: Vec<&PreparedPair> = pairs.iter().collect();
    let draw = DrawSeed(4242);
    let comps = model.ldm_loss(&refs, 0.0, draw).unwrap();

    // Independent plain noise-prediction loss on shared seeds.
    let (c, h, w) = (2usize, 8usize, 8usize);
    let b = refs.len();
    let mut z_n = ndarray::ArrayD::zeros(ndarray::IxDyn(&[b, c, h, w]));
    let mut z_ref = ndarray::ArrayD::zeros(ndarray::IxDyn(&[b, c, h, w]));
    let mut eps_all = vec![];
    let mut steps = vec![];
    for (bi, p) in refs.iter().enumerate() {
        let mut r = rng(child_seed(draw.0, "ldm-draw", bi as u64));
        let n = r.gen_range(1..=model.schedule.n_steps());
        steps.push(n);
        let eps = randn(&[c, h, w], &mut r);
        let ab = model.schedule.alpha_bars[n];
        for ci in 0..c {
            for yi in 0..h {
                for xi in 0..w {
                    z_n[[bi, ci, yi, xi]] = ab.sqrt() * p.z_target[[ci, yi, xi]]
                        + (1.0 - ab).sqrt() * eps[[ci, yi, xi]];
                    z_ref[[bi, ci, yi, xi]] = p.z_ref[[ci, yi, xi]];
                }
            }
        }
        eps_all.push(eps);
    }
    let series: Vec<&EhrSeries> = refs.iter().map(|p| &p.series).collect();
    let mut t = cxrgen_core::tensor::Tape::new();
    let enc = model
        .encoder
        .forward_batch(&mut t, &model.params, &series, None)
        .unwrap();
    let tokens = t.value(enc.tokens).clone();
    let eps_hat = cxrgen_core::diffusion::predict_noise(
        &model.unet,
        &model.params,
        &z_n,
        &z_ref,
        &tokens,
        &enc.valid,
        &steps,
    )
    .unwrap();
    let mut plain = 0.0;
    for bi in 0..b {
        let mut acc = 0.0;
        for ci in 0..c {
            for yi in 0..h {
                for xi in 0..w {
                    let d = eps_all[bi][[ci, yi, xi]] - eps_hat[[bi, ci, yi, xi]];
                    acc += d * d;
                }
            }
        }
        plain += acc / (c * h * w) as f64;
    }
    plain /= b as f64;
    let delta = (comps.total - plain).abs();
    assert!(delta < 1e-7, "composite vs plain mse differ by {delta:.3e}");

    // Hinge hand oracles.
    assert!((contrastive_hinge(1.0, 0.5, 0.2) - 0.7).abs() < 1e-15);
    assert_eq!(contrastive_hinge(0.3, 0.6, 0.2), 0.0);

    pass(
        2,
        "loss reductions",
        format!("|delta| = {delta:.2e}, {:.1}s", t0.elapsed().as_secs_f64()),
    );
}

// ---------------------------------------------------------------- criterion 3

#[test]
fn criterion_3_gradient_suite() {
    let t0 = Instant::now();
    const PROBES: usize = 120;
    const TOL: f64 = 1e-3;
    let mut worst: Vec<(String, f64)> = Vec::new();

    // vae_loss with every component active.
    {
        let config = VaeConfig {
            image_size: 16,
            compression: 4,
            latent_channels: 2,
            widths: vec![6, 8],
            res_levels: 1,
            kl_weight: 1e-3,
            cls_weight: 1.0,
            adv_weight: 0.1,
            perceptual_weight: 0.1,
            label_dim: 2,
            cls_hidden: 8,
            disc_width: 6,
            adv_warmup_steps: 0,
        };
        let vae = Vae::new(config, 7).unwrap();
        let mut r = rng(8);
        let pixels: Vec<Array2<f64>> = (0..2)
            .map(|_| Array2::from_shape_fn((16, 16), |_| r.gen_range(0.0..1.0)))
            .collect();
        let labels = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let mut store = vae.params.clone();
        let rep = gradcheck(
            &mut store,
            |t, s| vae.vae_loss_graph(t, s, &pixels, &labels, 33, true).total,
            PROBES,
            9,
            1e-5,
        );
        worst.push(("vae_loss".into(), rep.max_rel_err));
    }

    // Auxiliary path through the series encoder.
    {
        let mut store = ParamStore::new();
        let mut r = rng(31);
        let enc = EhrEncoder::new(&mut store, "ehr", micro_ehr_config(), &mut r).unwrap();
        let series = micro_series(&mut r, 4);
        let targets = ndarray::arr2(&[[1.0]]).into_dyn();
        let rep = gradcheck(
            &mut store,
            |t, s| {
                let b = enc.forward_batch(t, s, &[&series], Some(6)).unwrap();
                let logits = enc.aux_logits(t, s, &b);
                t.bce_with_logits_mean(logits, &targets)
            },
            PROBES,
            32,
            1e-5,
        );
        worst.push(("aux_path".into(), rep.max_rel_err));
    }

    // Composite generator loss on the micro UNet (8x8 latents, widths 8/16).
    {
        let model = micro_ldm(1.0, 11);
        let pairs: Vec<PreparedPair> = (0..2).map(|i| micro_pair(500 + i)).collect();
        let refs: Vec<&PreparedPair> = pairs.iter().collect();
        let mut store = model.params.clone();
        let rep = gradcheck(
            &mut store,
            |t, s| model.ldm_loss_graph(t, s, &refs, 0.7, DrawSeed(5)).unwrap().0,
            PROBES,
            13,
            1e-5,
        );
        worst.push(("ldm_loss".into(), rep.max_rel_err));
    }

    // Fusion head (full predictor forward).
    {
        use cxrgen_core::predictor::{image_batch, latent_batch, Predictor, PredictorConfig};
        let config = PredictorConfig {
            image_size: 16,
            image_widths: vec![4, 6],
            image_blocks: vec![1, 1],
            latent_channels: 2,
            latent_hw: 4,
            lat_dim: 8,
            lat_ff: 16,
            lat_heads: 2,
            ehr: micro_ehr_config(),
            fusion_dim: 8,
            fusion_heads: 2,
            label_dim: 2,
        };
        let model = Predictor::new(config, 21).unwrap();
        let mut r = rng(22);
        let series: Vec<EhrSeries> = (0..2).map(|_| micro_series(&mut r, 4)).collect();
        let images: Vec<Array2<f64>> = (0..2)
            .map(|_| Array2::from_shape_fn((16, 16), |_| r.gen_range(0.0..1.0)))
            .collect();
        let latents: Vec<Array3<f64>> = (0..2)
            .map(|_| Array3::from_shape_fn((2, 4, 4), |_| r.gen_range(-1.0..1.0)))
            .collect();
        let labels = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]).into_dyn();
        let image_refs: Vec<&Array2<f64>> = images.iter().collect();
        let pixels = image_batch(&image_refs);
        let latent_refs: Vec<&Array3<f64>> = latents.iter().collect();
        let lat = latent_batch(&latent_refs);
        let mut store = model.params.clone();
        let rep = gradcheck(
            &mut store,
            |t, s| {
                let sr: Vec<&EhrSeries> = series.iter().collect();
                let logits = model
                    .logits_graph(t, s, &pixels, &sr, &lat, BranchMask::FULL)
                    .unwrap();
                t.bce_with_logits_mean(logits, &labels)
            },
            PROBES,
            23,
            1e-5,
        );
        worst.push(("fusion_head".into(), rep.max_rel_err));
    }

    for (name, err) in &worst {
        assert!(*err < TOL, "{name}: relative error {err:.3e} >= {TOL:.0e}");
    }
    let detail = worst
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    pass(
        3,
        "gradient suite",
        format!("{detail}; {PROBES} probes each, {:.1}s", t0.elapsed().as_secs_f64()),
    );
}

// ---------------------------------------------------------------- criterion 4

#[test]
fn criterion_4_sampler_oracles() {
    let t0 = Instant::now();
    let toy = |x: &cxrgen_core::tensor::Arr, n: usize| x * 0.3 + 0.1 * n as f64;

    // Determinism at eta = 0.
    let schedule =
        schedule_from_betas(ScheduleKind::Linear, vec![0.02, 0.04, 0.08, 0.16]).unwrap();
    let mut r = rng(1);
    let x_init = randn(&[1, 2, 4, 4], &mut r);
    let a = ddim_core(&schedule, 4, 0.0, x_init.clone(), 5, |x, n| Ok(toy(x, n))).unwrap();
    let b = ddim_core(&schedule, 4, 0.0, x_init, 5, |x, n| Ok(toy(x, n))).unwrap();
    let det = a
        .iter()
        .zip(b.iter())
        .map(|(p, q)| (p - q).abs())
        .fold(0.0f64, f64::max);
    assert!(det < 1e-6);

    // Sigma = 0 ancestral (x0-decomposition, straight-line) on 2 steps.
    let schedule2 = schedule_from_betas(ScheduleKind::Linear, vec![0.05, 0.1]).unwrap();
    let mut r = rng(2);
    let x0 = randn(&[1, 3, 4, 4], &mut r);
    let ddim = ddim_core(&schedule2, 2, 0.0, x0.clone(), 9, |x, n| Ok(toy(x, n))).unwrap();
    let mut x = x0.clone();
    for n in (1..=2usize).rev() {
        let eps_hat = toy(&x, n);
        let ab_n = schedule2.alpha_bars[n];
        let ab_prev = schedule2.alpha_bars[n - 1];
        let xhat0 = (&x - &(eps_hat.clone() * (1.0 - ab_n).sqrt())) / ab_n.sqrt();
        x = xhat0 * ab_prev.sqrt() + eps_hat * (1.0 - ab_prev).sqrt();
    }
    let anc = ddim
        .iter()
        .zip(x.iter())
        .map(|(p, q)| (p - q).abs())
        .fold(0.0f64, f64::max);
    assert!(anc < 1e-4, "ddim vs sigma=0 ancestral: {anc:.3e}");

    // Zero-network closed-form recursion.
    let mut r = rng(3);
    let xz = randn(&[1, 1, 4, 4], &mut r);
    let out = ddim_core(&schedule2, 2, 0.0, xz.clone(), 0, |x, _| {
        Ok(ndarray::ArrayD::zeros(ndarray::IxDyn(x.shape())))
    })
    .unwrap();
    let closed = &xz / schedule2.alpha_bars[2].sqrt();
    let zn = out
        .iter()
        .zip(closed.iter())
        .map(|(p, q)| (p - q).abs())
        .fold(0.0f64, f64::max);
    assert!(zn < 1e-12);

    pass(
        4,
        "sampler oracles",
        format!(
            "determinism {det:.1e}, ancestral {anc:.1e}, closed-form {zn:.1e}, {:.1}s",
            t0.elapsed().as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn criterion_5_encoder_invariances() {
    let t0 = Instant::now();
    let mut store = ParamStore::new();
    let mut r = rng(51);
    let enc = EhrEncoder::new(&mut store, "ehr", micro_ehr_config(), &mut r).unwrap();

    // Padding/mask invariance over 50 random series.
    let mut worst = 0.0f64;
    for i in 0..50 {
        let len = 1 + (i % 6);
        let mut rr = rng(600 + i as u64);
        let s = micro_series(&mut rr, len);
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
    assert!(worst < 1e-5, "padding invariance violated: {worst:.3e}");

    // Positional sensitivity.
    let mut rr = rng(700);
    let s = micro_series(&mut rr, 4);
    let mut shifted = s.clone();
    shifted.hours = s.hours.iter().map(|h| h + 1).collect();
    let a = encode_ehr(&enc, &store, &s, None).unwrap();
    let b = encode_ehr(&enc, &store, &shifted, None).unwrap();
    let shift_diff = a
        .cls
        .iter()
        .zip(b.cls.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    assert!(shift_diff > 0.0, "encoder ignores absolute hours");

    // Channel-permutation reparameterization.
    let mut swapped = s.clone();
    for row in 0..swapped.len() {
        swapped.values.swap((row, 0), (row, 1));
        let tmp = swapped.mask[[row, 0]];
        swapped.mask[[row, 0]] = swapped.mask[[row, 1]];
        swapped.mask[[row, 1]] = tmp;
    }
    let before = encode_ehr(&enc, &store, &s, None).unwrap();
    let wid = store.id_by_name("ehr.phi.w").unwrap();
    {
        let w = store.value_mut(wid);
        let d = w.shape()[1];
        for c in 0..d {
            let a = w[[0, c]];
            w[[0, c]] = w[[1, c]];
            w[[1, c]] = a;
            let a = w[[3, c]];
            w[[3, c]] = w[[4, c]];
            w[[4, c]] = a;
        }
    }
    let after = encode_ehr(&enc, &store, &swapped, None).unwrap();
    let perm_diff = before
        .cls
        .iter()
        .zip(after.cls.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    assert!(perm_diff < 1e-12, "reparameterization broke: {perm_diff:.3e}");

    pass(
        5,
        "encoder invariances",
        format!(
            "padding {worst:.1e}, shift {shift_diff:.1e}, permutation {perm_diff:.1e}, {:.1}s",
            t0.elapsed().as_secs_f64()
        ),
    );
}

// ---------------------------------------------------------------- criterion 6

fn brute_force_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            den += 1.0;
            if scores[i] > scores[j] {
                num += 1.0;
            } else if scores[i] == scores[j] {
                num += 0.5;
            }
        }
    }
    num / den
}

fn brute_force_auprc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let (mut area, mut prev_recall) = (0.0, 0.0);
    for &t in &thresholds {
        let tp = scores
            .iter()
            .zip(labels)
            .filter(|(s, l)| **s >= t && **l)
            .count() as f64;
        let fp = scores
            .iter()
            .zip(labels)
            .filter(|(s, l)| **s >= t && !**l)
            .count() as f64;
        area += (tp / n_pos - prev_recall) * (tp / (tp + fp));
        prev_recall = tp / n_pos;
    }
    area
}

#[test]
fn criterion_6_metric_oracles() {
    let t0 = Instant::now();
    let mut r = rng(61);
    let mut cases = 0usize;
    while cases < 1000 {
        let n = r.gen_range(2..=10);
        let scores: Vec<f64> = (0..n).map(|_| (r.gen_range(0..8) as f64) / 7.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| r.gen::<bool>()).collect();
        let n_pos = labels.iter().filter(|&&l| l).count();
        if n_pos == 0 || n_pos == n {
            continue;
        }
        assert_eq!(auroc(&scores, &labels).unwrap(), brute_force_auroc(&scores, &labels));
        assert_eq!(auprc(&scores, &labels).unwrap(), brute_force_auprc(&scores, &labels));
        cases += 1;
    }

    // Frechet properties.
    let x = ndarray::arr2(&[[-1.0], [0.0], [1.0]]);
    let y = ndarray::arr2(&[[0.0], [1.0], [2.0]]);
    let d = frechet_distance(&x.view(), &y.view()).unwrap();
    assert!((d - 1.0).abs() < 1e-10, "1-d closed form: {d}");
    assert!(frechet_distance(&x.view(), &x.view()).unwrap() < 1e-8);
    let a = Array2::from_shape_fn((15, 3), |_| r.gen_range(-1.0..1.0));
    let b = Array2::from_shape_fn((12, 3), |_| r.gen_range(-0.5..1.5));
    let ab = frechet_distance(&a.view(), &b.view()).unwrap();
    let ba = frechet_distance(&b.view(), &a.view()).unwrap();
    assert!(ab >= 0.0 && (ab - ba).abs() < 1e-8);

    // Sliced Wasserstein properties.
    assert!(
        (sliced_wasserstein(
            &ndarray::arr2(&[[0.0]]).view(),
            &ndarray::arr2(&[[3.0]]).view(),
            1,
            0
        )
        .unwrap()
            - 3.0)
            .abs()
            < 1e-12
    );
    let xs = ndarray::arr2(&[[0.0], [1.0], [2.0]]);
    assert_eq!(
        sliced_wasserstein(&xs.view(), &xs.view(), 8, 0).unwrap(),
        0.0
    );
    let shifted = ndarray::arr2(&[[0.7], [1.7], [2.7]]);
    assert!(
        (sliced_wasserstein(&xs.view(), &shifted.view(), 4, 1).unwrap() - 0.7).abs() < 1e-12
    );

    pass(
        6,
        "metric oracles",
        format!("{cases} brute-force cases, {:.1}s", t0.elapsed().as_secs_f64()),
    );
}

// ------------------------------------------------------- criteria 7, 8 and 9

#[test]
fn criteria_7_8_9_end_to_end_synthetic() {
    let total_t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cohort_root = dir.path().join("cohort");
    let cfg = RunConfig::default();
    cfg.validate().unwrap();

    // World + splits + standardization.
    write_world(&cfg.world, &cohort_root).unwrap();
    let cohort_raw = cxrgen_core::dataset::load_cohort(&cohort_root, &cfg.data).unwrap();
    let split = split_patients(
        &cohort_raw.patient_ids(),
        cfg.split_ratio,
        child_seed(cfg.seed, "split", 0),
    )
    .unwrap();
    let (standardizer, cohort) = fit_and_standardize(&cohort_raw, &split).unwrap();
    let _ = standardizer;

    // Stage 1: autoencoder (budget: 30 minutes).
    let t_vae = Instant::now();
    let to_labeled = |ids: &[String]| -> Vec<LabeledImage> {
        cohort
            .patients
            .iter()
            .filter(|p| ids.contains(&p.id))
            .flat_map(|p| {
                p.images.iter().map(|img| LabeledImage {
                    pixels: img.pixels.clone(),
                    labels: img.abnormality.clone(),
                })
            })
            .collect()
    };
    let train_imgs = to_labeled(&split.train);
    let val_imgs = to_labeled(&split.validation);
    let mut vae_tc = cfg.vae_train.clone();
    vae_tc.seed = child_seed(cfg.seed, "vae-train", 0);
    let vae_out = train_vae(&train_imgs, &val_imgs, cfg.vae.clone(), &vae_tc, |_| {}).unwrap();
    let vae = vae_out.vae;
    let vae_secs = t_vae.elapsed().as_secs_f64();
    assert!(vae_secs < 1800.0, "vae training exceeded 30 minutes");

    // Stage 2: conditional generator (budget: 60 minutes).
    let t_ldm = Instant::now();
    let train_pairs: Vec<_> = ldm_pairs_for(&cohort, &split.train, cfg.min_gap_hours)
        .into_iter()
        .map(|p| p.sample)
        .collect();
    let val_pairs: Vec<_> = ldm_pairs_for(&cohort, &split.validation, cfg.min_gap_hours)
        .into_iter()
        .map(|p| p.sample)
        .collect();
    let (train_prep, scale) = prepare_pairs(&vae, &train_pairs, None).unwrap();
    let (val_prep, _) = prepare_pairs(&vae, &val_pairs, Some(scale)).unwrap();
    let mut ldm_tc = cfg.ldm_train.clone();
    ldm_tc.seed = child_seed(cfg.seed, "ldm-train", 0);
    let ldm_out = train_ldm(
        &train_prep,
        &val_prep,
        cfg.unet.clone(),
        cfg.cond_encoder.clone(),
        cfg.hyper.clone(),
        scale,
        &ldm_tc,
        |_| {},
    )
    .unwrap();
    let ldm = ldm_out.model;
    let ldm_secs = t_ldm.elapsed().as_secs_f64();
    assert!(ldm_secs < 3600.0, "ldm training exceeded 60 minutes");
    // Training moved the validation objective in the right direction.
    assert!(
        ldm_out.log.last().unwrap().val.base_mse < ldm_out.log[0].val.base_mse,
        "validation noise-prediction error did not improve"
    );

    // Criterion 7: generation fidelity on held-out patients.
    let test_pairs = ldm_pairs_for(&cohort, &split.test, cfg.min_gap_hours);
    let gen_report = evaluate_generation(
        &vae,
        &ldm,
        &test_pairs,
        cfg.hyper.ddim_steps,
        child_seed(cfg.seed, "eval-gen", 0),
        Some(cohort_root.as_path()),
    )
    .unwrap();
    let corr = gen_report.opacity_corr.unwrap();
    assert!(
        corr > 0.5,
        "opacity correlation {corr:.3} below 0.5 on held-out patients"
    );
    assert!(
        gen_report.fd < gen_report.fd_no_ehr,
        "series conditioning did not lower the latent Frechet distance \
         ({:.3} vs ablated {:.3})",
        gen_report.fd,
        gen_report.fd_no_ehr
    );

    // Conditioning sensitivity: swapping contexts between opposite-trend
    // patients moves measured opacity in the matching direction.
    let truth_of = |pid: &str, t1: i64| -> f64 {
        read_truth(&cohort_root, pid)
            .unwrap()
            .iter()
            .find(|(h, _)| *h == t1)
            .map(|(_, s)| *s)
            .unwrap()
    };
    let mut by_state: Vec<(usize, f64)> = test_pairs
        .iter()
        .enumerate()
        .map(|(i, p)| (i, truth_of(&p.patient_id, p.t1)))
        .collect();
    by_state.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    let k = 15.min(by_state.len() / 2);
    let lows: Vec<(usize, f64)> = by_state[..k].to_vec();
    let highs: Vec<(usize, f64)> = by_state[by_state.len() - k..].to_vec();
    let mut agree = 0usize;
    let mut total = 0usize;
    for (&(li, s_low), &(hi, s_high)) in lows.iter().zip(highs.iter()) {
        if (s_high - s_low).abs() < 0.2 {
            continue;
        }
        let low = &test_pairs[li];
        let high = &test_pairs[hi];
        // Swap contexts in both directions; opacity must follow the context.
        for (pair, own_series, other_series, expect_up) in [
            (low, &low.sample.ehr, &high.sample.ehr, true),
            (high, &high.sample.ehr, &low.sample.ehr, false),
        ] {
            let (z_ref, _) = vae.encode(&pair.sample.reference.pixels).unwrap();
            let own = ldm
                .ddim_sample(&z_ref, own_series, GenCondition::Full, 50, 777, 0.0)
                .unwrap();
            let swapped = ldm
                .ddim_sample(&z_ref, other_series, GenCondition::Full, 50, 777, 0.0)
                .unwrap();
            let o_own = measure_opacity(&vae.decode(&own).unwrap());
            let o_swap = measure_opacity(&vae.decode(&swapped).unwrap());
            total += 1;
            if (o_swap > o_own) == expect_up {
                agree += 1;
            }
        }
    }
    assert!(total >= 20, "too few opposite-trend pairs ({total})");
    let agreement = agree as f64 / total as f64;
    assert!(
        agreement >= 0.8,
        "conditioning sign test: {agree}/{total} agreement"
    );

    pass(
        7,
        "synthetic generation fidelity",
        format!(
            "opacity corr {corr:.3}, fd {:.3} < ablated {:.3}, sign test {agree}/{total}; \
             vae {vae_secs:.0}s, ldm {ldm_secs:.0}s",
            gen_report.fd, gen_report.fd_no_ehr
        ),
    );

    // Criterion 8: prediction with generated latents vs carry-forward.
    let t_pred = Instant::now();
    let task = Task::Mortality;
    let (train_refs, _) = prediction_samples_for(&cohort, &split.train, cfg.window_hours, task);
    let (val_refs, _) =
        prediction_samples_for(&cohort, &split.validation, cfg.window_hours, task);
    let (test_refs, excluded) =
        prediction_samples_for(&cohort, &split.test, cfg.window_hours, task);
    let variants = vec![
        ("full".to_string(), BranchMask::FULL, GenCondition::Full),
        (
            "last-image".to_string(),
            BranchMask::LAST_IMAGE,
            GenCondition::Full,
        ),
    ];
    let run_suite = || {
        pipeline::prediction_suite(
            &vae,
            &ldm,
            &cfg,
            &train_refs,
            &val_refs,
            &test_refs,
            &variants,
            |_, _, _| {},
        )
        .unwrap()
    };
    let outcomes = run_suite();
    let full = &outcomes[0];
    let last = &outcomes[1];
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let full_val = mean(&full.per_seed_val_auroc);
    let last_val = mean(&last.per_seed_val_auroc);
    assert!(
        full_val >= last_val,
        "generated-latent model underperforms carry-forward: {full_val:.4} < {last_val:.4}"
    );
    // Gap pattern across staleness strata (test split, mean over seeds):
    // the advantage must be largest where the image is most stale.
    let gap_by_stratum: Vec<(String, Option<f64>)> = full
        .stratified
        .strata
        .iter()
        .zip(&last.stratified.strata)
        .skip(1) // strata only; index 0 is overall
        .map(|(f, l)| {
            let gap = match (f.auroc_mean, l.auroc_mean) {
                (Some(a), Some(b)) => Some(a - b),
                _ => None,
            };
            (f.stratum.clone(), gap)
        })
        .collect();
    let stale_gap = gap_by_stratum
        .iter()
        .find(|(name, _)| name == "delta>=36")
        .and_then(|(_, g)| *g)
        .expect("stale stratum must be populated");
    for (name, gap) in &gap_by_stratum {
        if let Some(g) = gap {
            assert!(
                stale_gap >= *g - 1e-12,
                "gap in delta>=36 ({stale_gap:.4}) is not the largest: {name} has {g:.4}"
            );
        }
    }
    let pred_secs = t_pred.elapsed().as_secs_f64();
    assert!(pred_secs < 1800.0, "prediction suite exceeded 30 minutes");
    pass(
        8,
        "synthetic prediction ordering",
        format!(
            "val auroc {full_val:.4} >= {last_val:.4}, stale-stratum gap {stale_gap:+.4}, \
             {pred_secs:.0}s over {} seeds",
            cfg.eval_seeds.len()
        ),
    );

    // Criterion 9: byte-identical evaluation report across two runs.
    let build_report = |outcomes: &[pipeline::VariantOutcome]| -> String {
        let gen = evaluate_generation(
            &vae,
            &ldm,
            &test_pairs,
            cfg.hyper.ddim_steps,
            child_seed(cfg.seed, "eval-gen", 0),
            Some(cohort_root.as_path()),
        )
        .unwrap();
        EvalReport {
            task,
            config_echo: cfg.clone(),
            prediction: Some(PredictionReport {
                n_samples: test_refs.len(),
                excluded,
                full: outcomes[0].stratified.clone(),
                last_image: outcomes[1].stratified.clone(),
                ablations: vec![],
            }),
            generation: Some(gen),
        }
        .to_json()
    };
    let report_a = build_report(&outcomes);
    let outcomes_b = run_suite();
    let report_b = build_report(&outcomes_b);
    assert_eq!(
        report_a.as_bytes(),
        report_b.as_bytes(),
        "evaluation reports differ between identically-seeded runs"
    );
    std::fs::write(dir.path().join("report.json"), &report_a).unwrap();
    pass(
        9,
        "pipeline reproducibility",
        format!(
            "{} byte report identical across runs; total e2e {:.0}s",
            report_a.len(),
            total_t.elapsed().as_secs_f64()
        ),
    );
}
