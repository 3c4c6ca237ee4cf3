//! Flat experiment configuration. Every field has an explicit default, and
//! `--print-config` dumps the effective values.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use pjdm_core::bridge::SamplerMode;
use pjdm_core::metrics::{MetricsConfig, PsnrConvention};
use pjdm_core::nn::{Architecture, LossWeight, TimeDist, TrainConfig};
use pjdm_core::refiner::{DegradeParams, RefineMode};
use pjdm_core::rng::{stable_hash64, subseed};
use pjdm_core::schedules::RefineParams;
use pjdm_core::{BridgeSchedule, Geometry, RefineSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerModeName {
    Hybrid,
    HybridNoiseless,
    OdeOnly,
}

impl From<SamplerModeName> for SamplerMode {
    fn from(m: SamplerModeName) -> Self {
        match m {
            SamplerModeName::Hybrid => SamplerMode::Hybrid,
            SamplerModeName::HybridNoiseless => SamplerMode::HybridNoiseless,
            SamplerModeName::OdeOnly => SamplerMode::OdeOnly,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecondName {
    /// Coefficients fitted to the second moments of the paired data.
    Bridge,
    Identity,
}

/// Seed streams derived from the master seed.
pub mod streams {
    pub const DATA: u64 = 0xC11_0001;
    pub const TEST: u64 = 0xC11_0002;
    pub const BRIDGE_INIT: u64 = 0xC11_0003;
    pub const BRIDGE_TRAIN: u64 = 0xC11_0004;
    pub const REFINER_INIT: u64 = 0xC11_0005;
    pub const REFINER_TRAIN: u64 = 0xC11_0006;
    pub const CONVERT_BRIDGE: u64 = 0xC11_0007;
    pub const CONVERT_REFINE: u64 = 0xC11_0008;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_angles: usize,
    pub n_bins: usize,
    pub image_size: usize,
    pub n_paired: usize,
    pub n_unpaired: usize,
    /// Held-out paired items drawn from the shifted phantom family.
    pub n_test: usize,
    /// Master seed; every other seed is derived from it.
    pub seed: u64,

    pub bridge_t_max: f64,
    pub bridge_g: f64,
    pub bridge_w: f64,
    pub bridge_m: f64,
    pub bridge_n_steps: usize,
    pub bridge_rho: f64,
    pub bridge_t_min: f64,
    pub sampler_mode: SamplerModeName,

    pub refine_t_refine: usize,
    pub refine_beta_min: f64,
    pub refine_beta_max: f64,
    pub refine_t_prior: usize,
    /// DDIM sub-grid size; 0 selects the full ancestral path.
    pub refine_ddim_steps: usize,

    pub bridge_widths: Vec<usize>,
    pub bridge_time_dim: usize,
    pub bridge_time_scale: f64,
    pub bridge_preconditioning: PrecondName,
    pub refiner_widths: Vec<usize>,
    pub refiner_time_dim: usize,
    pub refiner_time_scale: f64,

    pub bridge_lr: f64,
    pub bridge_weight_decay: f64,
    pub bridge_batch_size: usize,
    pub bridge_steps: usize,
    pub bridge_loss_weight: LossWeight,
    pub bridge_time_dist: TimeDist,
    pub refiner_lr: f64,
    pub refiner_weight_decay: f64,
    pub refiner_batch_size: usize,
    pub refiner_steps: usize,
    pub refiner_time_dist: TimeDist,
    /// Checkpoint (and loss trace) write interval during training.
    pub checkpoint_every: usize,

    pub degrade_sigma_min: f64,
    pub degrade_sigma_max: f64,
    pub degrade_radius: usize,
    pub degrade_contrast_min: f64,
    pub degrade_contrast_max: f64,
    pub degrade_brightness_min: f64,
    pub degrade_brightness_max: f64,

    pub psnr_convention: PsnrConvention,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
    /// SSIM dynamic range; null uses each reference's range.
    pub ssim_dynamic_range: Option<f64>,
    /// Also evaluate FBP reconstructions.
    pub eval_image_domain: bool,
    /// Samples per profile line.
    pub profile_samples: usize,
    /// Items that get per-item plots.
    pub plot_items: usize,

    pub out_dir: PathBuf,
    /// Write every sampler iterate during conversion.
    pub debug_dumps: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let geo = Geometry::default();
        let bs = BridgeSchedule::default();
        let rp = RefineParams::default();
        let ba = Architecture::bridge_default();
        let ra = Architecture::refiner_default();
        let bt = TrainConfig::bridge_default();
        let rt = TrainConfig::refiner_default();
        let dp = DegradeParams::default();
        let mc = MetricsConfig::default();
        Self {
            n_angles: geo.n_angles,
            n_bins: geo.n_bins,
            image_size: geo.image_size,
            n_paired: 64,
            n_unpaired: 128,
            n_test: 16,
            seed: 0,
            bridge_t_max: bs.t_max,
            bridge_g: bs.g,
            bridge_w: bs.w,
            bridge_m: bs.m,
            bridge_n_steps: bs.n_steps,
            bridge_rho: bs.rho,
            bridge_t_min: bs.t_min,
            sampler_mode: SamplerModeName::Hybrid,
            refine_t_refine: rp.t_refine,
            refine_beta_min: rp.beta_min,
            refine_beta_max: rp.beta_max,
            refine_t_prior: rp.t_prior,
            refine_ddim_steps: 50,
            bridge_widths: ba.widths,
            bridge_time_dim: ba.time_dim,
            bridge_time_scale: ba.time_scale,
            bridge_preconditioning: PrecondName::Bridge,
            refiner_widths: ra.widths,
            refiner_time_dim: ra.time_dim,
            refiner_time_scale: ra.time_scale,
            bridge_lr: bt.lr,
            bridge_weight_decay: bt.weight_decay,
            bridge_batch_size: bt.batch_size,
            bridge_steps: bt.steps,
            bridge_loss_weight: bt.loss_weight,
            bridge_time_dist: bt.time_dist,
            refiner_lr: rt.lr,
            refiner_weight_decay: rt.weight_decay,
            refiner_batch_size: rt.batch_size,
            refiner_steps: rt.steps,
            refiner_time_dist: rt.time_dist,
            checkpoint_every: 250,
            degrade_sigma_min: dp.sigma.0,
            degrade_sigma_max: dp.sigma.1,
            degrade_radius: dp.radius,
            degrade_contrast_min: dp.contrast.0,
            degrade_contrast_max: dp.contrast.1,
            degrade_brightness_min: dp.brightness.0,
            degrade_brightness_max: dp.brightness.1,
            psnr_convention: mc.psnr_convention,
            ssim_k1: mc.k1,
            ssim_k2: mc.k2,
            ssim_dynamic_range: mc.dynamic_range,
            eval_image_domain: true,
            profile_samples: 64,
            plot_items: 2,
            out_dir: PathBuf::from("runs/default"),
            debug_dumps: false,
        }
    }
}

impl ExperimentConfig {
    /// Reads a config file. A run manifest is also accepted: its embedded
    /// `config` object is used, so a manifest re-executes its own run.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut value: serde_json::Value = serde_json::from_str(text)?;
        if let Some(inner) = value.get_mut("config").filter(|v| v.is_object()) {
            value = inner.take();
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_angles == 0 || self.n_bins == 0 || self.image_size == 0 {
            bail!("geometry sizes must be positive");
        }
        if self.n_test == 0 {
            bail!("n_test must be >= 1");
        }
        self.bridge_schedule().validate()?;
        self.refine_schedule()?;
        self.degrade_params().validate()?;
        self.bridge_train().validate()?;
        self.refiner_train().validate()?;
        if self.bridge_time_dist != TimeDist::Uniform {
            bail!("bridge_time_dist must be uniform");
        }
        if self.checkpoint_every == 0 {
            bail!("checkpoint_every must be >= 1");
        }
        if self.profile_samples < 2 {
            bail!("profile_samples must be >= 2");
        }
        for arch in [self.bridge_arch(), self.refiner_arch()] {
            let m = arch.size_multiple();
            if !self.n_angles.is_multiple_of(m) || !self.n_bins.is_multiple_of(m) {
                bail!(
                    "sinogram shape {}x{} must be divisible by {m} for widths {:?}",
                    self.n_angles,
                    self.n_bins,
                    arch.widths
                );
            }
        }
        Ok(())
    }

    /// Fingerprint of everything that affects artifacts.
    pub fn hash(&self) -> u64 {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.debug_dumps = false;
        stable_hash64(
            serde_json::to_string(&c)
                .expect("config serializes")
                .as_bytes(),
        )
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            n_angles: self.n_angles,
            n_bins: self.n_bins,
            image_size: self.image_size,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_angles, self.n_bins)
    }

    pub fn bridge_schedule(&self) -> BridgeSchedule {
        BridgeSchedule {
            t_max: self.bridge_t_max,
            g: self.bridge_g,
            w: self.bridge_w,
            m: self.bridge_m,
            n_steps: self.bridge_n_steps,
            rho: self.bridge_rho,
            t_min: self.bridge_t_min,
        }
    }

    pub fn refine_params(&self) -> RefineParams {
        RefineParams {
            t_refine: self.refine_t_refine,
            beta_min: self.refine_beta_min,
            beta_max: self.refine_beta_max,
            t_prior: self.refine_t_prior,
        }
    }

    pub fn refine_schedule(&self) -> Result<RefineSchedule> {
        Ok(self.refine_params().build()?)
    }

    pub fn refine_mode(&self) -> RefineMode {
        match self.refine_ddim_steps {
            0 => RefineMode::Ancestral,
            k => RefineMode::Ddim(k),
        }
    }

    pub fn bridge_arch(&self) -> Architecture {
        Architecture {
            in_channels: 1,
            widths: self.bridge_widths.clone(),
            time_dim: self.bridge_time_dim,
            time_scale: self.bridge_time_scale,
        }
    }

    pub fn refiner_arch(&self) -> Architecture {
        Architecture {
            in_channels: 2,
            widths: self.refiner_widths.clone(),
            time_dim: self.refiner_time_dim,
            time_scale: self.refiner_time_scale,
        }
    }

    pub fn bridge_train(&self) -> TrainConfig {
        TrainConfig {
            lr: self.bridge_lr,
            weight_decay: self.bridge_weight_decay,
            batch_size: self.bridge_batch_size,
            steps: self.bridge_steps,
            seed: self.derived_seed(streams::BRIDGE_TRAIN),
            loss_weight: self.bridge_loss_weight,
            time_dist: self.bridge_time_dist,
        }
    }

    pub fn refiner_train(&self) -> TrainConfig {
        TrainConfig {
            lr: self.refiner_lr,
            weight_decay: self.refiner_weight_decay,
            batch_size: self.refiner_batch_size,
            steps: self.refiner_steps,
            seed: self.derived_seed(streams::REFINER_TRAIN),
            loss_weight: LossWeight::Unit,
            time_dist: self.refiner_time_dist,
        }
    }

    pub fn degrade_params(&self) -> DegradeParams {
        DegradeParams {
            sigma: (self.degrade_sigma_min, self.degrade_sigma_max),
            radius: self.degrade_radius,
            contrast: (self.degrade_contrast_min, self.degrade_contrast_max),
            brightness: (self.degrade_brightness_min, self.degrade_brightness_max),
        }
    }

    pub fn metrics(&self) -> MetricsConfig {
        MetricsConfig {
            psnr_convention: self.psnr_convention,
            k1: self.ssim_k1,
            k2: self.ssim_k2,
            dynamic_range: self.ssim_dynamic_range,
        }
    }

    pub fn derived_seed(&self, stream: u64) -> u64 {
        subseed(self.seed, stream, 0)
    }

    /// Per-item sampler seeds for the two stages.
    pub fn item_seeds(&self, item: usize) -> (u64, u64) {
        (
            subseed(self.seed, streams::CONVERT_BRIDGE, item as u64),
            subseed(self.seed, streams::CONVERT_REFINE, item as u64),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(c.bridge_n_steps, 40);
        assert_eq!(c.refine_t_prior, 185);
        assert_eq!((c.bridge_lr, c.refiner_lr), (1e-4, 5e-5));
    }

    #[test]
    fn partial_files_fill_defaults_and_unknown_keys_fail() {
        let c = ExperimentConfig::from_json(r#"{"seed": 7, "n_test": 3}"#).unwrap();
        assert_eq!((c.seed, c.n_test, c.n_paired), (7, 3, 64));
        assert!(ExperimentConfig::from_json(r#"{"sede": 7}"#).is_err());
        let wrapped = format!(r#"{{"format": 1, "config": {}}}"#, c.to_json());
        assert_eq!(ExperimentConfig::from_json(&wrapped).unwrap(), c);
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            out_dir: "elsewhere".into(),
            debug_dumps: true,
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(
            a.hash(),
            ExperimentConfig {
                seed: 1,
                ..a.clone()
            }
            .hash()
        );
    }

    #[test]
    fn rejects_indivisible_shapes() {
        let c = ExperimentConfig {
            n_angles: 61,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ExperimentConfig {
            refine_t_prior: 2000,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
