//! Pipeline driver. Stages run one at a time; every piece of randomness
//! derives from the single root seed in the run configuration.
//!
//! Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical failure.

mod commands;
mod plots;

use clap::{Args, Parser, Subcommand};
use cxrgen_core::error::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "cxrgen", version, about = "Conditional latent generation for asynchronous clinical prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cohort root directory.
    #[arg(long, global = true)]
    cohort: Option<PathBuf>,
    /// Checkpoint directory (falls back to $CXRGEN_CKPT_DIR, then ./checkpoints).
    #[arg(long, global = true)]
    ckpt_dir: Option<PathBuf>,
    /// Report/artifact directory (default ./reports).
    #[arg(long, global = true)]
    report_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic asynchronous-patient cohort.
    SynthData {
        #[command(flatten)]
        common: Common,
        /// Output cohort root (defaults to --cohort).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        n_patients: Option<usize>,
    },
    /// Pretrain the image autoencoder on the training split.
    TrainVae {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the conditional latent generator against a frozen autoencoder.
    TrainLdm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        vae_ckpt: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Contrastive hinge margin.
        #[arg(long)]
        alpha: Option<f64>,
        /// Context perturbation strength.
        #[arg(long)]
        beta_pert: Option<f64>,
        #[arg(long)]
        ddim_steps: Option<usize>,
    },
    /// Train the fusion classifier on prediction triplets.
    TrainPredictor {
        #[command(flatten)]
        common: Common,
        /// Prediction task.
        #[arg(long, value_parser = ["mortality", "phenotype"])]
        task: Option<String>,
        #[arg(long)]
        vae_ckpt: Option<PathBuf>,
        #[arg(long)]
        ldm_ckpt: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Initialize the prediction series encoder from the generator's.
        #[arg(long)]
        warm_start_ehr: bool,
    },
    /// Decode generated latents into qualitative image grids.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        vae_ckpt: Option<PathBuf>,
        #[arg(long)]
        ldm_ckpt: Option<PathBuf>,
        /// Output directory for image grids (defaults to report dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of test pairs to render.
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Generation-time ablation: no-ehr-cond or no-ref.
        #[arg(long)]
        ablate: Option<String>,
    },
    /// Score a cohort with a trained predictor and emit a metrics report.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Cohort root to score (defaults to --cohort).
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        predictor_ckpt: Option<PathBuf>,
        #[arg(long)]
        vae_ckpt: Option<PathBuf>,
        #[arg(long)]
        ldm_ckpt: Option<PathBuf>,
        #[arg(long, value_parser = ["mortality", "phenotype"])]
        task: Option<String>,
    },
    /// Full evaluation: generation quality, seeded prediction suite,
    /// stratified report, ablation rows, and plots.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Cohort root to evaluate (defaults to --cohort).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Report path (defaults to <report-dir>/report.json).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        vae_ckpt: Option<PathBuf>,
        #[arg(long)]
        ldm_ckpt: Option<PathBuf>,
        #[arg(long, value_parser = ["mortality", "phenotype"])]
        task: Option<String>,
        /// Extra ablation rows: no-ehr-cond, no-ref, no-ehr-pred (repeatable).
        #[arg(long)]
        ablate: Vec<String>,
        /// Read the synthetic ground-truth state for opacity correlation.
        #[arg(long)]
        oracle_opacity: bool,
        #[arg(long)]
        skip_prediction: bool,
        #[arg(long)]
        skip_generation: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SynthData {
            common,
            out,
            n_patients,
        } => commands::synth_data(common, out, n_patients),
        Command::TrainVae { common, epochs } => commands::train_vae(common, epochs),
        Command::TrainLdm {
            common,
            vae_ckpt,
            epochs,
            alpha,
            beta_pert,
            ddim_steps,
        } => commands::train_ldm(common, vae_ckpt, epochs, alpha, beta_pert, ddim_steps),
        Command::TrainPredictor {
            common,
            task,
            vae_ckpt,
            ldm_ckpt,
            epochs,
            warm_start_ehr,
        } => commands::train_predictor(common, task, vae_ckpt, ldm_ckpt, epochs, warm_start_ehr),
        Command::Generate {
            common,
            vae_ckpt,
            ldm_ckpt,
            out,
            count,
            ablate,
        } => commands::generate(common, vae_ckpt, ldm_ckpt, out, count, ablate),
        Command::Predict {
            common,
            input,
            out,
            predictor_ckpt,
            vae_ckpt,
            ldm_ckpt,
            task,
        } => commands::predict(common, input, out, predictor_ckpt, vae_ckpt, ldm_ckpt, task),
        Command::Evaluate {
            common,
            input,
            out,
            vae_ckpt,
            ldm_ckpt,
            task,
            ablate,
            oracle_opacity,
            skip_prediction,
            skip_generation,
        } => commands::evaluate(
            common,
            input,
            out,
            vae_ckpt,
            ldm_ckpt,
            task,
            ablate,
            oracle_opacity,
            skip_prediction,
            skip_generation,
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(Error::exit_code(&e) as u8)
        }
    }
}
