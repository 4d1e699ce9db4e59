//! Subcommand implementations over the core pipeline.

use crate::plots;
use crate::Common;
use cxrgen_core::config::RunConfig;
use cxrgen_core::dataset::{load_cohort, split_patients, Cohort, CohortSplit, Task};
use cxrgen_core::diffusion::{
    prepare_pairs, train_ldm as core_train_ldm, GenCondition, LdmModel,
};
use cxrgen_core::error::{Error, Result};
use cxrgen_core::pipeline::{
    self, evaluate_generation, fit_and_standardize, ldm_pairs_for, prediction_samples_for,
    EvalReport, PredictionReport,
};
use cxrgen_core::predictor::{
    eval_predictor, train_predictor as core_train_predictor, BranchMask, Predictor,
};
use cxrgen_core::seed::child_seed;
use cxrgen_core::synthworld::write_world;
use cxrgen_core::vae::{train_vae as core_train_vae, LabeledImage, Vae};
use ndarray::Array2;
use std::path::{Path, PathBuf};

struct Env {
    cfg: RunConfig,
    cohort_root: PathBuf,
    ckpt_dir: PathBuf,
    report_dir: PathBuf,
}

impl Env {
    fn vae_ckpt(&self, flag: Option<PathBuf>) -> PathBuf {
        flag.unwrap_or_else(|| self.ckpt_dir.join("vae.ckpt"))
    }
    fn ldm_ckpt(&self, flag: Option<PathBuf>) -> PathBuf {
        flag.unwrap_or_else(|| self.ckpt_dir.join("ldm.ckpt"))
    }
    fn predictor_ckpt(&self, flag: Option<PathBuf>) -> PathBuf {
        flag.unwrap_or_else(|| self.ckpt_dir.join("predictor.ckpt"))
    }
}

fn setup(common: &Common) -> Result<Env> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.world.seed = seed;
    } else {
        cfg.world.seed = cfg.seed;
    }
    cfg.validate()?;
    let ckpt_dir = common
        .ckpt_dir
        .clone()
        .or_else(|| std::env::var_os("CXRGEN_CKPT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("checkpoints"));
    let report_dir = common
        .report_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("reports"));
    Ok(Env {
        cfg,
        cohort_root: common
            .cohort
            .clone()
            .unwrap_or_else(|| PathBuf::from("cohort")),
        ckpt_dir,
        report_dir,
    })
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn load_split(env: &Env, root: &Path) -> Result<(Cohort, CohortSplit)> {
    let cohort = load_cohort(root, &env.cfg.data)?;
    if cohort.is_empty() {
        return Err(Error::data(format!(
            "cohort at {} is empty",
            root.display()
        )));
    }
    let split = split_patients(
        &cohort.patient_ids(),
        env.cfg.split_ratio,
        child_seed(env.cfg.seed, "split", 0),
    )?;
    Ok((cohort, split))
}

fn parse_task(flag: Option<String>, default: Task) -> Task {
    match flag.as_deref() {
        Some("phenotype") => Task::Phenotype,
        Some("mortality") => Task::Mortality,
        _ => default,
    }
}

fn task_label_dim(cohort: &Cohort, task: Task) -> usize {
    cohort
        .patients
        .first()
        .map(|p| p.task_labels(task).len())
        .unwrap_or(1)
}

pub fn synth_data(common: Common, out: Option<PathBuf>, n_patients: Option<usize>) -> Result<()> {
    let mut env = setup(&common)?;
    if let Some(n) = n_patients {
        env.cfg.world.n_patients = n;
    }
    let root = out.unwrap_or_else(|| env.cohort_root.clone());
    ensure_dir(&root)?;
    write_world(&env.cfg.world, &root)?;
    println!(
        "wrote {} synthetic patients to {}",
        env.cfg.world.n_patients,
        root.display()
    );
    Ok(())
}

fn split_images(cohort: &Cohort, ids: &[String]) -> Vec<LabeledImage> {
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
}

pub fn train_vae(common: Common, epochs: Option<usize>) -> Result<()> {
    let mut env = setup(&common)?;
    if let Some(e) = epochs {
        env.cfg.vae_train.epochs = e;
    }
    env.cfg.vae_train.seed = child_seed(env.cfg.seed, "vae-train", 0);
    let (cohort, split) = load_split(&env, &env.cohort_root.clone())?;
    let train = split_images(&cohort, &split.train);
    let val = split_images(&cohort, &split.validation);
    println!(
        "training autoencoder on {} images ({} validation)",
        train.len(),
        val.len()
    );
    let outcome = core_train_vae(&train, &val, env.cfg.vae.clone(), &env.cfg.vae_train, |log| {
        println!(
            "epoch {:>3}  train total {:.5} rec {:.5}  val total {:.5} rec {:.5}",
            log.epoch, log.train.total, log.train.rec, log.val.total, log.val.rec
        );
    })?;
    println!(
        "best validation total {:.5} at epoch {}",
        outcome.best_val_total, outcome.best_epoch
    );
    ensure_dir(&env.ckpt_dir)?;
    let path = env.vae_ckpt(None);
    outcome.vae.save_checkpoint(&path)?;
    println!("saved {}", path.display());
    Ok(())
}

pub fn train_ldm(
    common: Common,
    vae_ckpt: Option<PathBuf>,
    epochs: Option<usize>,
    alpha: Option<f64>,
    beta_pert: Option<f64>,
    ddim_steps: Option<usize>,
) -> Result<()> {
    let mut env = setup(&common)?;
    if let Some(e) = epochs {
        env.cfg.ldm_train.epochs = e;
    }
    if let Some(a) = alpha {
        env.cfg.hyper.margin = a;
    }
    if let Some(b) = beta_pert {
        env.cfg.hyper.beta_pert = b;
    }
    if let Some(d) = ddim_steps {
        env.cfg.hyper.ddim_steps = d;
    }
    env.cfg.hyper.validate()?;
    env.cfg.ldm_train.seed = child_seed(env.cfg.seed, "ldm-train", 0);

    let vae = Vae::from_checkpoint(&env.vae_ckpt(vae_ckpt))?;
    let (cohort, split) = load_split(&env, &env.cohort_root.clone())?;
    let (standardizer, cohort) = fit_and_standardize(&cohort, &split)?;

    let train_pairs: Vec<_> = ldm_pairs_for(&cohort, &split.train, env.cfg.min_gap_hours)
        .into_iter()
        .map(|p| p.sample)
        .collect();
    let val_pairs: Vec<_> = ldm_pairs_for(&cohort, &split.validation, env.cfg.min_gap_hours)
        .into_iter()
        .map(|p| p.sample)
        .collect();
    println!(
        "generator pairs: {} train / {} validation",
        train_pairs.len(),
        val_pairs.len()
    );
    let (train_prep, scale) = prepare_pairs(&vae, &train_pairs, None)?;
    let (val_prep, _) = prepare_pairs(&vae, &val_pairs, Some(scale))?;
    println!("latent scale {scale:.5}");

    let outcome = core_train_ldm(
        &train_prep,
        &val_prep,
        env.cfg.unet.clone(),
        env.cfg.cond_encoder.clone(),
        env.cfg.hyper.clone(),
        scale,
        &env.cfg.ldm_train,
        |log| {
            println!(
                "epoch {:>3}  lambda1 {:.3}  train total {:.5} mse {:.5} contr {:.5} aux {:.5}  val total {:.5} mse {:.5} contr {:.5} aux {:.5}",
                log.epoch,
                log.lambda1,
                log.train.total,
                log.train.base_mse,
                log.train.contrastive,
                log.train.aux,
                log.val.total,
                log.val.base_mse,
                log.val.contrastive,
                log.val.aux,
            );
        },
    )?;
    println!(
        "best validation composite {:.5} at epoch {}",
        outcome.best_val_total, outcome.best_epoch
    );
    ensure_dir(&env.ckpt_dir)?;
    let path = env.ldm_ckpt(None);
    outcome.model.save_checkpoint(&path, &standardizer)?;
    println!("saved {}", path.display());
    Ok(())
}

fn load_frozen_stages(
    env: &Env,
    vae_ckpt: Option<PathBuf>,
    ldm_ckpt: Option<PathBuf>,
) -> Result<(Vae, LdmModel, cxrgen_core::dataset::Standardizer)> {
    let vae = Vae::from_checkpoint(&env.vae_ckpt(vae_ckpt))?;
    let (ldm, standardizer) = LdmModel::from_checkpoint(&env.ldm_ckpt(ldm_ckpt))?;
    Ok((vae, ldm, standardizer))
}

pub fn train_predictor(
    common: Common,
    task: Option<String>,
    vae_ckpt: Option<PathBuf>,
    ldm_ckpt: Option<PathBuf>,
    epochs: Option<usize>,
    warm_start_ehr: bool,
) -> Result<()> {
    let mut env = setup(&common)?;
    if let Some(e) = epochs {
        env.cfg.predictor_train.epochs = e;
    }
    let task = parse_task(task, env.cfg.task);
    env.cfg.task = task;
    env.cfg.predictor_train.seed = child_seed(env.cfg.seed, "predictor-train", 0);

    let (vae, ldm, standardizer) = load_frozen_stages(&env, vae_ckpt, ldm_ckpt)?;
    let (cohort, split) = load_split(&env, &env.cohort_root.clone())?;
    let cohort = standardizer.apply_cohort(&cohort);
    env.cfg.predictor.label_dim = task_label_dim(&cohort, task);

    let (train_refs, excl_t) =
        prediction_samples_for(&cohort, &split.train, env.cfg.window_hours, task);
    let (val_refs, excl_v) =
        prediction_samples_for(&cohort, &split.validation, env.cfg.window_hours, task);
    println!(
        "prediction samples: {} train / {} validation ({} excluded)",
        train_refs.len(),
        val_refs.len(),
        excl_t + excl_v
    );

    let run_seed = child_seed(env.cfg.seed, "predictor-latents", 0);
    let prep = |samples, tag| {
        pipeline::prepare_predictions(
            &vae,
            &ldm,
            samples,
            env.cfg.window_hours,
            GenCondition::Full,
            env.cfg.pred_ddim_steps,
            child_seed(run_seed, "latents", tag),
            None,
        )
    };
    let train_prep = prep(&train_refs, 0)?;
    let val_prep = prep(&val_refs, 1)?;

    let refresh_fn = |epoch: usize| -> Result<Vec<ndarray::Array3<f64>>> {
        Ok(pipeline::prepare_predictions(
            &vae,
            &ldm,
            &train_refs,
            env.cfg.window_hours,
            GenCondition::Full,
            env.cfg.pred_ddim_steps,
            child_seed(run_seed, "latents", 0),
            Some(epoch),
        )?
        .into_iter()
        .map(|p| p.gen_latent)
        .collect())
    };
    let fresh = matches!(env.cfg.latent_mode, cxrgen_core::config::LatentMode::Fresh);
    let refresh: Option<cxrgen_core::predictor::LatentRefresh> =
        if fresh { Some(&refresh_fn) } else { None };

    let warm = (warm_start_ehr || env.cfg.warm_start_ehr).then_some((&ldm.params, "cond_ehr"));
    let outcome = core_train_predictor(
        &train_prep,
        &val_prep,
        env.cfg.predictor.clone(),
        BranchMask::FULL,
        &env.cfg.predictor_train,
        refresh,
        warm,
        |log| {
            println!(
                "epoch {:>3}  train loss {:.5}  val auroc {:.4} auprc {:.4}",
                log.epoch, log.train_loss, log.val_auroc, log.val_auprc
            );
        },
    )?;
    println!(
        "best validation auprc {:.4} at epoch {}",
        outcome.best_val_auprc, outcome.best_epoch
    );
    ensure_dir(&env.ckpt_dir)?;
    let path = env.predictor_ckpt(None);
    outcome.predictor.save_checkpoint(&path)?;
    println!("saved {}", path.display());
    Ok(())
}

pub fn generate(
    common: Common,
    vae_ckpt: Option<PathBuf>,
    ldm_ckpt: Option<PathBuf>,
    out: Option<PathBuf>,
    count: usize,
    ablate: Option<String>,
) -> Result<()> {
    let env = setup(&common)?;
    let (vae, ldm, standardizer) = load_frozen_stages(&env, vae_ckpt, ldm_ckpt)?;
    let (cohort, split) = load_split(&env, &env.cohort_root.clone())?;
    let cohort = standardizer.apply_cohort(&cohort);
    let condition = match ablate.as_deref() {
        None => GenCondition::Full,
        Some("no-ehr-cond") => GenCondition::NoEhrCond,
        Some("no-ref") => GenCondition::NoRef,
        Some(other) => {
            return Err(Error::config(format!(
                "unknown ablation '{other}' (expected no-ehr-cond or no-ref)"
            )))
        }
    };
    let pairs = ldm_pairs_for(&cohort, &split.test, env.cfg.min_gap_hours);
    let take: Vec<_> = pairs.into_iter().take(count).collect();
    if take.is_empty() {
        return Err(Error::data("no qualifying test pairs to render"));
    }
    let latents = pipeline::generate_for_pairs(
        &vae,
        &ldm,
        &take,
        condition,
        env.cfg.hyper.ddim_steps,
        child_seed(env.cfg.seed, "generate-cli", 0),
    )?;
    let out_dir = out.unwrap_or_else(|| env.report_dir.join("generated"));
    ensure_dir(&out_dir)?;
    for (pair, latent) in take.iter().zip(&latents) {
        let gen_img = vae.decode(latent)?;
        let s = env.cfg.world.image_size;
        let mut grid = Array2::zeros((s, 3 * s + 8));
        grid.slice_mut(ndarray::s![.., 0..s])
            .assign(&pair.sample.reference.pixels);
        grid.slice_mut(ndarray::s![.., s + 4..2 * s + 4])
            .assign(&pair.sample.target.pixels);
        grid.slice_mut(ndarray::s![.., 2 * s + 8..])
            .assign(&gen_img);
        let name = format!(
            "{}_{}to{}.png",
            pair.patient_id, pair.sample.reference.taken_at, pair.t1
        );
        cxrgen_core::dataset::write_gray_png(&out_dir.join(name), &grid)?;
    }
    println!(
        "wrote {} grids (reference | target | generated) to {}",
        take.len(),
        out_dir.display()
    );
    Ok(())
}

pub fn predict(
    common: Common,
    input: Option<PathBuf>,
    out: Option<PathBuf>,
    predictor_ckpt: Option<PathBuf>,
    vae_ckpt: Option<PathBuf>,
    ldm_ckpt: Option<PathBuf>,
    task: Option<String>,
) -> Result<()> {
    let env = setup(&common)?;
    let task = parse_task(task, env.cfg.task);
    let (vae, ldm, standardizer) = load_frozen_stages(&env, vae_ckpt, ldm_ckpt)?;
    let predictor = Predictor::from_checkpoint(&env.predictor_ckpt(predictor_ckpt))?;
    let root = input.unwrap_or_else(|| env.cohort_root.clone());
    let (cohort, split) = load_split(&env, &root)?;
    let cohort = standardizer.apply_cohort(&cohort);
    let (samples, excluded) =
        prediction_samples_for(&cohort, &split.test, env.cfg.window_hours, task);
    if samples.is_empty() {
        return Err(Error::data("no prediction samples in the test split"));
    }
    let prepared = pipeline::prepare_predictions(
        &vae,
        &ldm,
        &samples,
        env.cfg.window_hours,
        GenCondition::Full,
        env.cfg.pred_ddim_steps,
        child_seed(env.cfg.seed, "predict-cli", 0),
        None,
    )?;
    let (auroc, auprc) = eval_predictor(&predictor, &prepared, BranchMask::FULL)?;
    let scores = cxrgen_core::predictor::predict_all(&predictor, &prepared, BranchMask::FULL)?;
    let per_patient: Vec<serde_json::Value> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            serde_json::json!({
                "patient_id": s.patient_id,
                "gap_delta": s.sample.gap_delta,
                "labels": s.sample.task_labels,
                "scores": (0..scores.ncols()).map(|c| scores[[i, c]]).collect::<Vec<f64>>(),
            })
        })
        .collect();
    let report = serde_json::json!({
        "task": task.to_string(),
        "n_samples": samples.len(),
        "excluded": excluded,
        "auroc": auroc,
        "auprc": auprc,
        "per_patient": per_patient,
    });
    let out_path = out.unwrap_or_else(|| env.report_dir.join("metrics.json"));
    if let Some(parent) = out_path.parent() {
        ensure_dir(parent)?;
    }
    std::fs::write(&out_path, serde_json::to_string_pretty(&report).unwrap())
        .map_err(|e| Error::io(out_path.display().to_string(), e))?;
    println!(
        "auroc {auroc:.4} auprc {auprc:.4} over {} samples -> {}",
        samples.len(),
        out_path.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    common: Common,
    input: Option<PathBuf>,
    out: Option<PathBuf>,
    vae_ckpt: Option<PathBuf>,
    ldm_ckpt: Option<PathBuf>,
    task: Option<String>,
    ablate: Vec<String>,
    oracle_opacity: bool,
    skip_prediction: bool,
    skip_generation: bool,
) -> Result<()> {
    let mut env = setup(&common)?;
    let task = parse_task(task, env.cfg.task);
    env.cfg.task = task;
    let root = input.unwrap_or_else(|| env.cohort_root.clone());
    let (vae, ldm, standardizer) = load_frozen_stages(&env, vae_ckpt, ldm_ckpt)?;
    let (cohort_raw, split) = load_split(&env, &root)?;
    let cohort = standardizer.apply_cohort(&cohort_raw);
    env.cfg.predictor.label_dim = task_label_dim(&cohort, task);
    ensure_dir(&env.report_dir)?;

    let generation = if skip_generation {
        None
    } else {
        let pairs = ldm_pairs_for(&cohort, &split.test, env.cfg.min_gap_hours);
        println!("evaluating generation on {} test pairs", pairs.len());
        let truth_root = oracle_opacity.then_some(root.as_path());
        Some(evaluate_generation(
            &vae,
            &ldm,
            &pairs,
            env.cfg.hyper.ddim_steps,
            child_seed(env.cfg.seed, "eval-gen", 0),
            truth_root,
        )?)
    };

    let prediction = if skip_prediction {
        None
    } else {
        let (train_refs, e1) =
            prediction_samples_for(&cohort, &split.train, env.cfg.window_hours, task);
        let (val_refs, e2) =
            prediction_samples_for(&cohort, &split.validation, env.cfg.window_hours, task);
        let (test_refs, e3) =
            prediction_samples_for(&cohort, &split.test, env.cfg.window_hours, task);
        let excluded = e1 + e2 + e3;
        println!(
            "prediction suite: {} train / {} val / {} test samples over {} seeds",
            train_refs.len(),
            val_refs.len(),
            test_refs.len(),
            env.cfg.eval_seeds.len()
        );
        let mut variants = vec![
            ("full".to_string(), BranchMask::FULL, GenCondition::Full),
            (
                "last-image".to_string(),
                BranchMask::LAST_IMAGE,
                GenCondition::Full,
            ),
        ];
        for a in &ablate {
            match a.as_str() {
                "no-ehr-cond" => variants.push((
                    "full[gen w/o series]".into(),
                    BranchMask::FULL,
                    GenCondition::NoEhrCond,
                )),
                "no-ref" => variants.push((
                    "full[gen w/o reference]".into(),
                    BranchMask::FULL,
                    GenCondition::NoRef,
                )),
                "no-ehr-pred" => {
                    variants.push((
                        "generated w/o series branch".into(),
                        BranchMask::GEN_NO_EHR,
                        GenCondition::Full,
                    ));
                    variants.push((
                        "last-image w/o series branch".into(),
                        BranchMask::LAST_IMAGE_NO_EHR,
                        GenCondition::Full,
                    ));
                }
                other => {
                    return Err(Error::config(format!(
                        "unknown ablation '{other}' \
                         (expected no-ehr-cond, no-ref or no-ehr-pred)"
                    )))
                }
            }
        }
        let outcomes = pipeline::prediction_suite(
            &vae,
            &ldm,
            &env.cfg,
            &train_refs,
            &val_refs,
            &test_refs,
            &variants,
            |name, seed, log| {
                if log.epoch == 0 {
                    println!("  [{name}] seed {seed}");
                }
            },
        )?;

        write_plots(&env, &test_refs, &outcomes)?;

        let mut ablations = Vec::new();
        let mut full_rep = None;
        let mut last_rep = None;
        for o in &outcomes {
            match o.name.as_str() {
                "full" => full_rep = Some(o.stratified.clone()),
                "last-image" => last_rep = Some(o.stratified.clone()),
                _ => ablations.push((o.name.clone(), o.stratified.clone())),
            }
        }
        Some(PredictionReport {
            n_samples: test_refs.len(),
            excluded,
            full: full_rep.ok_or_else(|| Error::data("missing full variant"))?,
            last_image: last_rep.ok_or_else(|| Error::data("missing last-image variant"))?,
            ablations,
        })
    };

    let report = EvalReport {
        task,
        config_echo: env.cfg.clone(),
        prediction,
        generation,
    };
    let out_path = out.unwrap_or_else(|| env.report_dir.join("report.json"));
    if let Some(parent) = out_path.parent() {
        ensure_dir(parent)?;
    }
    report.write(&out_path)?;
    println!("report written to {}", out_path.display());
    if let Some(g) = &report.generation {
        println!(
            "generation: fd {:.3} (no-series {:.3}, lower bound {:.3}), wd {:.3}, fid {:.4}",
            g.fd, g.fd_no_ehr, g.fd_last_image, g.wd, g.fid
        );
        if let Some(c) = g.opacity_corr {
            println!("opacity correlation vs ground truth: {c:.3}");
        }
    }
    if let Some(p) = &report.prediction {
        for (name, rep) in [("full", &p.full), ("last-image", &p.last_image)] {
            let overall = &rep.strata[0];
            println!(
                "{name}: auroc {:.4} (std {:.4}), auprc {:.4}",
                overall.auroc_mean.unwrap_or(f64::NAN),
                overall.auroc_std.unwrap_or(f64::NAN),
                overall.auprc_mean.unwrap_or(f64::NAN),
            );
        }
    }
    Ok(())
}

fn write_plots(
    env: &Env,
    test_refs: &[pipeline::SampleRef],
    outcomes: &[pipeline::VariantOutcome],
) -> Result<()> {
    let Some(full) = outcomes.iter().find(|o| o.name == "full") else {
        return Ok(());
    };
    // ROC/PR curves from the first seed's test scores, first label column.
    if let Some(run) = full.runs.first() {
        let scores: Vec<f64> = (0..run.scores.nrows()).map(|i| run.scores[[i, 0]]).collect();
        let labels: Vec<bool> = test_refs.iter().map(|s| s.sample.task_labels[0]).collect();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            let roc = plots::roc_points(&scores, &labels);
            plots::save_curves(&env.report_dir.join("roc.png"), &[("full", roc)], true)?;
            let pr = plots::pr_points(&scores, &labels);
            plots::save_curves(&env.report_dir.join("pr.png"), &[("full", pr)], false)?;
        }
    }
    let strata: Vec<String> = full
        .stratified
        .strata
        .iter()
        .map(|s| s.stratum.clone())
        .collect();
    let groups: Vec<(&str, Vec<Option<f64>>)> = outcomes
        .iter()
        .map(|o| {
            (
                o.name.as_str(),
                o.stratified
                    .strata
                    .iter()
                    .map(|s| s.auroc_mean)
                    .collect::<Vec<_>>(),
            )
        })
        .collect();
    plots::save_stratum_bars(&env.report_dir.join("auroc_by_stratum.png"), &strata, &groups)?;
    Ok(())
}
