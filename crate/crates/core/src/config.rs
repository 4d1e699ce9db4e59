//! Whole-run configuration: one root seed, every stage's hyperparameters,
//! echoed verbatim into checkpoints and reports. Unknown keys are rejected.

use crate::dataset::{DataConfig, Task};
use crate::diffusion::{LdmHyper, LdmTrainConfig, UnetConfig};
use crate::ehr_encoder::EhrEncoderConfig;
use crate::error::{Error, Result};
use crate::predictor::{PredictorConfig, PredictorTrainConfig};
use crate::synthworld::WorldConfig;
use crate::vae::{VaeConfig, VaeTrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentMode {
    /// Generate once per sample per training run (deterministic cache).
    Cached,
    /// Regenerate with a fresh per-(sample, epoch) seed every epoch.
    Fresh,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every stage derives child seeds from it.
    pub seed: u64,
    pub task: Task,
    /// Observation window for the prediction stage, hours.
    pub window_hours: i64,
    /// Minimum image gap for generator training pairs, hours.
    pub min_gap_hours: i64,
    pub split_ratio: (u32, u32, u32),
    pub latent_mode: LatentMode,
    /// Prediction experiments are repeated once per entry.
    pub eval_seeds: Vec<u64>,
    /// DDIM steps for prediction-stage latents (generation-quality reports
    /// keep the full `hyper.ddim_steps`).
    pub pred_ddim_steps: usize,
    /// Initialize the prediction-stage series encoder from the generator's.
    pub warm_start_ehr: bool,
    pub world: WorldConfig,
    pub data: DataConfig,
    pub vae: VaeConfig,
    pub vae_train: VaeTrainConfig,
    pub unet: UnetConfig,
    pub cond_encoder: EhrEncoderConfig,
    pub hyper: LdmHyper,
    pub ldm_train: LdmTrainConfig,
    pub predictor: PredictorConfig,
    pub predictor_train: PredictorTrainConfig,
}

impl Default for RunConfig {
    /// Sized for the bundled synthetic world on a CPU. The published-scale
    /// architecture (28x28 latents, UNet widths 224/448/672) stays available
    /// through the individual config fields.
    fn default() -> Self {
        let world = WorldConfig::default();
        let data = DataConfig {
            compression: 8,
            abnormality_len: 1,
            max_ehr_len: 70,
        };
        // 6 dynamic channels + 2 statics, values plus masks.
        let input_dim = 2 * (world.ehr_channels + 2);
        let cond_encoder = EhrEncoderConfig {
            input_dim,
            model_dim: 128,
            heads: 8,
            ff_dim: 256,
            max_len: 70,
            label_dim: 1,
            aux_hidden: 64,
        };
        let unet = UnetConfig {
            latent_channels: 4,
            widths: vec![32, 64],
            ctx_dim: 128,
            heads: 8,
            ff_mult: 2,
        };
        let predictor = PredictorConfig {
            image_size: world.image_size,
            image_widths: vec![8, 12, 16, 24],
            image_blocks: vec![3, 4, 6, 3],
            latent_channels: 4,
            latent_hw: world.image_size / 8,
            lat_dim: 128,
            lat_ff: 512,
            lat_heads: 8,
            ehr: EhrEncoderConfig {
                label_dim: 1,
                ..cond_encoder.clone()
            },
            fusion_dim: 128,
            fusion_heads: 8,
            label_dim: 1,
        };
        Self {
            seed: 0,
            task: Task::Mortality,
            window_hours: 48,
            min_gap_hours: 12,
            split_ratio: (24, 4, 7),
            latent_mode: LatentMode::Cached,
            eval_seeds: vec![0, 1, 2, 3, 4],
            pred_ddim_steps: 50,
            warm_start_ehr: false,
            world,
            data,
            vae: VaeConfig::default(),
            vae_train: VaeTrainConfig::default(),
            unet,
            cond_encoder,
            hyper: LdmHyper::default(),
            ldm_train: LdmTrainConfig {
                epochs: 60,
                ..Default::default()
            },
            predictor,
            predictor_train: PredictorTrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.vae.validate()?;
        self.unet.validate()?;
        self.cond_encoder.validate()?;
        self.hyper.validate()?;
        self.predictor.validate()?;
        if self.unet.ctx_dim != self.cond_encoder.model_dim {
            return Err(Error::config(
                "unet.ctx_dim must equal cond_encoder.model_dim",
            ));
        }
        if self.eval_seeds.is_empty() {
            return Err(Error::config("need at least one evaluation seed"));
        }
        if self.window_hours <= 0 || self.min_gap_hours < 0 {
            return Err(Error::config("window/gap hours out of range"));
        }
        if self.pred_ddim_steps == 0 || self.pred_ddim_steps > self.hyper.n_steps {
            return Err(Error::config("pred_ddim_steps must lie in 1..=n_steps"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("config file: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
