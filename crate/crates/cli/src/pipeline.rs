//! Two-stage conversion of one sinogram, independent of where the
//! denoisers come from. Tests inject analytic oracles through
//! [`Denoisers`].

use std::path::Path;

use anyhow::Result;

use pjdm_core::bridge::{hybrid_sample, Observer, X0Predictor};
use pjdm_core::nn::DenoiserModel;
use pjdm_core::refiner::{refine_sample, NoisePredictor, RefineObserver};
use pjdm_core::sino_io::encode_state;
use pjdm_core::Sinogram;

use crate::config::ExperimentConfig;
use crate::store::write_atomic;

/// Supplies the stage denoisers for item `i`.
pub trait Denoisers {
    fn bridge(&self, item: usize) -> &dyn X0Predictor;
    fn refiner(&self, item: usize) -> &dyn NoisePredictor;
}

pub struct Trained {
    pub bridge: DenoiserModel,
    pub refiner: DenoiserModel,
}

impl Denoisers for Trained {
    fn bridge(&self, _: usize) -> &dyn X0Predictor {
        &self.bridge
    }

    fn refiner(&self, _: usize) -> &dyn NoisePredictor {
        &self.refiner
    }
}

pub struct Converted {
    pub coarse: Sinogram,
    pub refined: Sinogram,
}

/// Stage I from `input`, then stage II from the coarse estimate. With
/// `dump_dir`, every raw iterate of both stages is written there as a
/// `.state` file (sinogram layout, values may be negative).
pub fn convert_one(
    den: &dyn Denoisers,
    item: usize,
    input: &Sinogram,
    cfg: &ExperimentConfig,
    dump_dir: Option<&Path>,
) -> Result<Converted> {
    let coarse = coarse_one(den, item, input, cfg, dump_dir)?;
    let refined = refine_one(den, item, &coarse, cfg, dump_dir)?;
    Ok(Converted { coarse, refined })
}

pub fn coarse_one(
    den: &dyn Denoisers,
    item: usize,
    input: &Sinogram,
    cfg: &ExperimentConfig,
    dump_dir: Option<&Path>,
) -> Result<Sinogram> {
    let (bridge_seed, _) = cfg.item_seeds(item);
    let sched = cfg.bridge_schedule();
    let shape = input.shape();
    let mut dumps: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut observer = |i: usize, _: f64, x: &[f64]| dumps.push((i, x.to_vec()));
    let obs: Option<Observer<'_>> = if dump_dir.is_some() {
        Some(&mut observer)
    } else {
        None
    };
    let coarse = hybrid_sample(
        den.bridge(item),
        input,
        &sched,
        bridge_seed,
        cfg.sampler_mode.into(),
        obs,
    )?;
    if let Some(dir) = dump_dir {
        for (i, x) in dumps {
            write_atomic(
                &dir.join(format!("bridge_{i:03}.state")),
                &encode_state(shape, &x),
            )?;
        }
    }
    Ok(coarse)
}

pub fn refine_one(
    den: &dyn Denoisers,
    item: usize,
    coarse: &Sinogram,
    cfg: &ExperimentConfig,
    dump_dir: Option<&Path>,
) -> Result<Sinogram> {
    let (_, refine_seed) = cfg.item_seeds(item);
    let sched = cfg.refine_schedule()?;
    let shape = coarse.shape();
    let mut dumps: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut observer = |t: usize, x: &[f64], _: &[f64]| dumps.push((t, x.to_vec()));
    let obs: Option<RefineObserver<'_>> = if dump_dir.is_some() {
        Some(&mut observer)
    } else {
        None
    };
    let refined = refine_sample(
        den.refiner(item),
        coarse,
        &sched,
        &cfg.degrade_params(),
        refine_seed,
        cfg.refine_mode(),
        obs,
    )?;
    if let Some(dir) = dump_dir {
        for (t, x) in dumps {
            write_atomic(
                &dir.join(format!("refine_{t:04}.state")),
                &encode_state(shape, &x),
            )?;
        }
    }
    Ok(refined)
}
