//! Stage orchestration shared by the command-line driver and the end-to-end
//! test suites: sample extraction over splits, latent generation for the
//! prediction stage, generation-quality evaluation, and the report format.

use crate::config::RunConfig;
use crate::dataset::{
    extract_ldm_pairs, extract_prediction_sample, Cohort, CohortSplit, LdmSample,
    PredictionSample, Standardizer, Task,
};
use crate::diffusion::{GenCondition, LdmModel};
use crate::error::{Error, Result};
use crate::metrics::{
    self, sliced_wasserstein, ImageEmbedder, SeedRun, StratifiedReport,
};
use crate::parallel::map_shards;
use crate::predictor::PreparedPrediction;
use crate::seed::{child_seed, child_seed2};
use crate::synthworld;
use crate::vae::{Vae, VaeEmbedder};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// A generator-training pair with provenance (patient id, target hour).
#[derive(Debug, Clone)]
pub struct PairRef {
    pub patient_id: String,
    pub t1: i64,
    pub sample: LdmSample,
}

/// All qualifying pairs for the given patients, ordered by id then time.
pub fn ldm_pairs_for(cohort: &Cohort, ids: &[String], min_gap_hours: i64) -> Vec<PairRef> {
    let mut out = Vec::new();
    for p in &cohort.patients {
        if !ids.contains(&p.id) {
            continue;
        }
        for sample in extract_ldm_pairs(p, min_gap_hours) {
            out.push(PairRef {
                patient_id: p.id.clone(),
                t1: sample.target.taken_at,
                sample,
            });
        }
    }
    out
}

/// A prediction sample with provenance.
#[derive(Debug, Clone)]
pub struct SampleRef {
    pub patient_id: String,
    pub sample: PredictionSample,
}

/// Prediction triplets for the given patients; stays shorter than the
/// window and patients without a qualifying image are excluded (counted).
pub fn prediction_samples_for(
    cohort: &Cohort,
    ids: &[String],
    window_hours: i64,
    task: Task,
) -> (Vec<SampleRef>, usize) {
    let mut excluded = 0usize;
    let mut out = Vec::new();
    for p in &cohort.patients {
        if !ids.contains(&p.id) {
            continue;
        }
        if p.stay_hours < window_hours {
            excluded += 1;
            continue;
        }
        match extract_prediction_sample(p, window_hours, task) {
            Ok(Some(sample)) => out.push(SampleRef {
                patient_id: p.id.clone(),
                sample,
            }),
            Ok(None) => excluded += 1,
            Err(_) => excluded += 1,
        }
    }
    (out, excluded)
}

/// Generate the up-to-date latent for one prediction sample: reference is
/// the last image, conditioning series is the (t0, window] slice.
pub fn generate_latent_for(
    vae: &Vae,
    ldm: &LdmModel,
    sample: &PredictionSample,
    window_hours: i64,
    condition: GenCondition,
    ddim_steps: usize,
    seed: u64,
) -> Result<Array3<f64>> {
    let (z_ref, _) = vae.encode(&sample.last_image.pixels)?;
    let slice = sample
        .ehr_48h
        .slice_window(sample.last_image.taken_at, window_hours);
    ldm.ddim_sample(&z_ref, &slice, condition, ddim_steps, seed, 0.0)
}

/// Prepare prediction records with generated latents. `run_seed`
/// distinguishes repeated experiments; in cached mode the latent for a
/// sample depends only on (run_seed, sample index).
#[allow(clippy::too_many_arguments)]
pub fn prepare_predictions(
    vae: &Vae,
    ldm: &LdmModel,
    samples: &[SampleRef],
    window_hours: i64,
    condition: GenCondition,
    ddim_steps: usize,
    run_seed: u64,
    epoch: Option<usize>,
) -> Result<Vec<PreparedPrediction>> {
    let outs: Vec<Result<PreparedPrediction>> = map_shards(samples, 4, |si, chunk| {
        let mut shard_out = Vec::with_capacity(chunk.len());
        for (i, sref) in chunk.iter().enumerate() {
            let idx = (si * 4 + i) as u64;
            let seed = match epoch {
                None => child_seed(run_seed, "gen-latent", idx),
                Some(e) => child_seed2(run_seed, "gen-latent-fresh", idx, e as u64),
            };
            let gen_latent = generate_latent_for(
                vae,
                ldm,
                &sref.sample,
                window_hours,
                condition,
                ddim_steps,
                seed,
            )?;
            shard_out.push(PreparedPrediction {
                sample: sref.sample.clone(),
                gen_latent,
            });
        }
        Ok(shard_out)
    })
    .into_iter()
    .flat_map(|r| match r {
        Ok(v) => v.into_iter().map(Ok).collect::<Vec<_>>(),
        Err(e) => vec![Err(e)],
    })
    .collect();
    outs.into_iter().collect()
}

/// Generation-quality numbers over a set of generator pairs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GenerationReport {
    pub n_pairs: usize,
    /// Frechet distance in VAE latent space, generated vs target.
    pub fd: f64,
    /// Same with the series conditioning ablated at generation time.
    pub fd_no_ehr: f64,
    /// Reference-vs-target lower bound (no generation involved).
    pub fd_last_image: f64,
    /// Sliced Wasserstein distances, raw and per-dimension normalized.
    pub wd: f64,
    pub wd_per_dim: f64,
    /// Frechet distance over the pluggable image embedding (frozen VAE).
    pub fid: f64,
    pub fid_last_image: f64,
    /// Correlation of measured opacity in decoded generations against the
    /// world's ground-truth state (oracle data; synthetic cohorts only).
    pub opacity_corr: Option<f64>,
    /// Same for the carry-forward baseline (reference image opacity).
    pub opacity_corr_last_image: Option<f64>,
}

/// Evaluate generation quality on pairs: full conditioning, series-ablated
/// conditioning, and the carry-forward lower bound.
pub fn evaluate_generation(
    vae: &Vae,
    ldm: &LdmModel,
    pairs: &[PairRef],
    ddim_steps: usize,
    seed: u64,
    truth_root: Option<&Path>,
) -> Result<GenerationReport> {
    if pairs.len() < 2 {
        return Err(Error::data("need at least 2 pairs for generation metrics"));
    }
    let gen_full = generate_for_pairs(vae, ldm, pairs, GenCondition::Full, ddim_steps, seed)?;
    let gen_no_ehr =
        generate_for_pairs(vae, ldm, pairs, GenCondition::NoEhrCond, ddim_steps, seed)?;

    let flatten = |latents: &[Array3<f64>]| -> Array2<f64> {
        let d = latents[0].len();
        let mut m = Array2::zeros((latents.len(), d));
        for (i, z) in latents.iter().enumerate() {
            for (j, v) in z.iter().enumerate() {
                m[[i, j]] = *v;
            }
        }
        m
    };
    let target_lat: Vec<Array3<f64>> = pairs
        .iter()
        .map(|p| vae.encode(&p.sample.target.pixels).map(|(m, _)| m))
        .collect::<Result<_>>()?;
    let ref_lat: Vec<Array3<f64>> = pairs
        .iter()
        .map(|p| vae.encode(&p.sample.reference.pixels).map(|(m, _)| m))
        .collect::<Result<_>>()?;

    let tm = flatten(&target_lat);
    let gm = flatten(&gen_full);
    let am = flatten(&gen_no_ehr);
    let rm = flatten(&ref_lat);
    let fd = metrics::frechet_distance(&gm.view(), &tm.view())?;
    let fd_no_ehr = metrics::frechet_distance(&am.view(), &tm.view())?;
    let fd_last_image = metrics::frechet_distance(&rm.view(), &tm.view())?;
    let wd = sliced_wasserstein(&gm.view(), &tm.view(), 128, child_seed(seed, "wd", 0))?;
    let wd_per_dim = wd / (tm.ncols() as f64).sqrt();

    // Decoded-image quality through the pluggable embedder.
    let decode_all = |lats: &[Array3<f64>]| -> Result<Vec<Array2<f64>>> {
        lats.iter().map(|z| vae.decode(z)).collect()
    };
    let gen_imgs = decode_all(&gen_full)?;
    let target_imgs: Vec<Array2<f64>> =
        pairs.iter().map(|p| p.sample.target.pixels.clone()).collect();
    let ref_imgs: Vec<Array2<f64>> = pairs
        .iter()
        .map(|p| p.sample.reference.pixels.clone())
        .collect();
    let embedder = VaeEmbedder(vae);
    let fid = metrics::fid(&gen_imgs, &target_imgs, &embedder)?;
    let fid_last_image = metrics::fid(&ref_imgs, &target_imgs, &embedder)?;

    // Oracle opacity correlation (synthetic truth only).
    let (opacity_corr, opacity_corr_last_image) = match truth_root {
        None => (None, None),
        Some(root) => {
            let mut measured = Vec::new();
            let mut measured_ref = Vec::new();
            let mut truth = Vec::new();
            for (p, img) in pairs.iter().zip(&gen_imgs) {
                let states = synthworld::read_truth(root, &p.patient_id)?;
                let s_t1 = states
                    .iter()
                    .find(|(h, _)| *h == p.t1)
                    .map(|(_, s)| *s)
                    .ok_or_else(|| {
                        Error::data(format!("truth for {} lacks hour {}", p.patient_id, p.t1))
                    })?;
                truth.push(s_t1);
                measured.push(synthworld::measure_opacity(img));
                measured_ref.push(synthworld::measure_opacity(&p.sample.reference.pixels));
            }
            (
                Some(metrics::pearson(&measured, &truth)?),
                Some(metrics::pearson(&measured_ref, &truth)?),
            )
        }
    };

    Ok(GenerationReport {
        n_pairs: pairs.len(),
        fd,
        fd_no_ehr,
        fd_last_image,
        wd,
        wd_per_dim,
        fid,
        fid_last_image,
        opacity_corr,
        opacity_corr_last_image,
    })
}

/// Batched DDIM over pairs with per-sample seeds (deterministic, parallel).
pub fn generate_for_pairs(
    vae: &Vae,
    ldm: &LdmModel,
    pairs: &[PairRef],
    condition: GenCondition,
    ddim_steps: usize,
    seed: u64,
) -> Result<Vec<Array3<f64>>> {
    let outs: Vec<Result<Vec<Array3<f64>>>> = map_shards(pairs, 4, |si, chunk| {
        let mut shard = Vec::with_capacity(chunk.len());
        for (i, p) in chunk.iter().enumerate() {
            let idx = (si * 4 + i) as u64;
            let (z_ref, _) = vae.encode(&p.sample.reference.pixels)?;
            let z = ldm.ddim_sample(
                &z_ref,
                &p.sample.ehr,
                condition,
                ddim_steps,
                child_seed(seed, "gen-pair", idx),
                0.0,
            )?;
            shard.push(z);
        }
        Ok(shard)
    });
    let mut all = Vec::with_capacity(pairs.len());
    for o in outs {
        all.extend(o?);
    }
    Ok(all)
}

/// The evaluation report: config echo, stratified prediction metrics per
/// variant, and generation quality. Serialized deterministically.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub task: Task,
    pub config_echo: RunConfig,
    pub prediction: Option<PredictionReport>,
    pub generation: Option<GenerationReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PredictionReport {
    pub n_samples: usize,
    pub excluded: usize,
    /// Full model (image + series + generated latent).
    pub full: StratifiedReport,
    /// Carry-forward ablation (generated latent dropped).
    pub last_image: StratifiedReport,
    /// Optional extra ablations keyed by name.
    pub ablations: Vec<(String, StratifiedReport)>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Standardize a cohort with statistics fit on its training split.
pub fn fit_and_standardize(
    cohort: &Cohort,
    split: &CohortSplit,
) -> Result<(Standardizer, Cohort)> {
    let train_series: Vec<&crate::dataset::EhrSeries> = cohort
        .patients
        .iter()
        .filter(|p| split.train.contains(&p.id))
        .map(|p| &p.series)
        .collect();
    let st = Standardizer::fit(&train_series)?;
    Ok((st.clone(), st.apply_cohort(cohort)))
}

/// Stratified evaluation of a set of per-seed score matrices.
pub fn stratified_from_runs(
    runs: Vec<SeedRun>,
    labels: &Array2<bool>,
    gaps: &[i64],
) -> Result<StratifiedReport> {
    metrics::stratified_eval(&runs, &labels.view(), gaps)
}

/// Deterministic VAE-space embedder reused by reports.
pub fn vae_embedder(vae: &Vae) -> impl ImageEmbedder + '_ {
    VaeEmbedder(vae)
}

/// One prediction-stage experiment variant (Table-style row).
#[derive(Debug, Clone)]
pub struct VariantOutcome {
    pub name: String,
    pub stratified: StratifiedReport,
    pub per_seed_val_auroc: Vec<f64>,
    pub per_seed_val_auprc: Vec<f64>,
    /// Per-seed score matrices on the evaluation split (for curve plots).
    pub runs: Vec<SeedRun>,
}

/// Run the repeated-seed prediction protocol for several branch variants:
/// per seed, train a fresh predictor, score the evaluation split, then
/// stratify by staleness gap over all seeds. Variants without the latent
/// branch skip generation entirely (the branch is excluded from fusion).
#[allow(clippy::too_many_arguments)]
pub fn prediction_suite(
    vae: &Vae,
    ldm: &LdmModel,
    cfg: &RunConfig,
    train: &[SampleRef],
    val: &[SampleRef],
    eval_on: &[SampleRef],
    variants: &[(String, crate::predictor::BranchMask, GenCondition)],
    mut progress: impl FnMut(&str, u64, &crate::predictor::PredictorEpochLog),
) -> Result<Vec<VariantOutcome>> {
    use crate::predictor::{
        eval_predictor, predict_all, train_predictor, PreparedPrediction,
    };
    let window = cfg.window_hours;
    let ddim_steps = cfg.pred_ddim_steps;
    let zero_latent = || {
        Array3::<f64>::zeros((
            cfg.predictor.latent_channels,
            cfg.predictor.latent_hw,
            cfg.predictor.latent_hw,
        ))
    };
    let eval_labels = {
        let l = cfg.predictor.label_dim;
        let mut m = Array2::from_elem((eval_on.len(), l), false);
        for (i, s) in eval_on.iter().enumerate() {
            for (c, &y) in s.sample.task_labels.iter().enumerate() {
                m[[i, c]] = y;
            }
        }
        m
    };
    let gaps: Vec<i64> = eval_on.iter().map(|s| s.sample.gap_delta).collect();

    let mut outcomes = Vec::new();
    for (name, mask, condition) in variants {
        let mut runs = Vec::new();
        let mut val_aurocs = Vec::new();
        let mut val_auprcs = Vec::new();
        for &seed in &cfg.eval_seeds {
            let run_seed = child_seed2(cfg.seed, "pred-run", seed, 0);
            let prep = |samples: &[SampleRef], tag: u64| -> Result<Vec<PreparedPrediction>> {
                if mask.latent {
                    prepare_predictions(
                        vae,
                        ldm,
                        samples,
                        window,
                        *condition,
                        ddim_steps,
                        child_seed(run_seed, "latents", tag),
                        None,
                    )
                } else {
                    Ok(samples
                        .iter()
                        .map(|s| PreparedPrediction {
                            sample: s.sample.clone(),
                            gen_latent: zero_latent(),
                        })
                        .collect())
                }
            };
            let train_prep = prep(train, 0)?;
            let val_prep = prep(val, 1)?;
            let eval_prep = prep(eval_on, 2)?;

            let tc = crate::predictor::PredictorTrainConfig {
                seed: child_seed2(cfg.seed, "pred-train", seed, 1),
                ..cfg.predictor_train.clone()
            };
            let fresh_needed =
                mask.latent && matches!(cfg.latent_mode, crate::config::LatentMode::Fresh);
            let refresh_fn = |epoch: usize| -> Result<Vec<Array3<f64>>> {
                Ok(prepare_predictions(
                    vae,
                    ldm,
                    train,
                    window,
                    *condition,
                    ddim_steps,
                    child_seed(run_seed, "latents", 0),
                    Some(epoch),
                )?
                .into_iter()
                .map(|p| p.gen_latent)
                .collect())
            };
            let refresh: Option<crate::predictor::LatentRefresh> =
                if fresh_needed { Some(&refresh_fn) } else { None };
            let warm = if cfg.warm_start_ehr && mask.ehr {
                Some((&ldm.params, "cond_ehr"))
            } else {
                None
            };
            let outcome = train_predictor(
                &train_prep,
                &val_prep,
                cfg.predictor.clone(),
                *mask,
                &tc,
                refresh,
                warm,
                |log| progress(name, seed, log),
            )?;
            let (va, vp) = eval_predictor(&outcome.predictor, &val_prep, *mask)?;
            val_aurocs.push(va);
            val_auprcs.push(vp);
            let scores = predict_all(&outcome.predictor, &eval_prep, *mask)?;
            runs.push(SeedRun { seed, scores });
        }
        let stratified = metrics::stratified_eval(&runs, &eval_labels.view(), &gaps)?;
        outcomes.push(VariantOutcome {
            name: name.clone(),
            stratified,
            per_seed_val_auroc: val_aurocs,
            per_seed_val_auprc: val_auprcs,
            runs,
        });
    }
    Ok(outcomes)
}
