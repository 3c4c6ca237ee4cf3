//! Stage two: prior-guided refinement. The coarse estimate is re-noised to
//! step `t_prior` and denoised by a noise predictor conditioned on a
//! degraded copy of itself.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamW, DenoiserModel, TimeDist, TrainConfig};
use crate::phantom::Sinogram;
use crate::rng::{rng_from_seed, standard_normal, subseed, SimRng};
use crate::schedules::RefineSchedule;

const STREAM_TRAIN: u64 = 0x8EF1_0000;
const STREAM_DEGRADE: u64 = 0x8EF1_0001;
const STREAM_INIT: u64 = 0x8EF1_0002;
const STREAM_STEP: u64 = 0x8EF1_0003;

/// Ranges for the random blur / contrast / brightness degradation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradeParams {
    /// Gaussian blur standard deviation range in pixels.
    pub sigma: (f64, f64),
    /// Blur kernel half-width in pixels.
    pub radius: usize,
    /// Contrast factor range about the image mean.
    pub contrast: (f64, f64),
    /// Brightness offset range as a fraction of the image's dynamic range.
    pub brightness: (f64, f64),
}

impl Default for DegradeParams {
    fn default() -> Self {
        Self {
            sigma: (0.8, 1.6),
            radius: 5,
            contrast: (0.8, 1.2),
            brightness: (-0.05, 0.05),
        }
    }
}

impl DegradeParams {
    pub fn identity() -> Self {
        Self {
            sigma: (0.0, 0.0),
            radius: 0,
            contrast: (1.0, 1.0),
            brightness: (0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        let ok = ordered(self.sigma)
            && self.sigma.0 >= 0.0
            && (self.radius as f64) >= 3.0 * self.sigma.1
            && ordered(self.contrast)
            && self.contrast.0 > 0.0
            && ordered(self.brightness);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "invalid degradation parameters {self:?}"
            )))
        }
    }
}

fn draw(rng: &mut SimRng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Normalised discrete Gaussian on `-radius..=radius`; a delta when `sigma = 0`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    if sigma == 0.0 {
        let mut k = vec![0.0; 2 * radius + 1];
        k[radius] = 1.0;
        return k;
    }
    let r = radius as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|j| (-((j * j) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / z).collect()
}

/// Mirror index without repeating the edge sample (`d c b | a b c d | c b a`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

fn blur(x: &[f64], (rows, cols): (usize, usize), kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; x.len()];
    for i in 0..rows {
        for j in 0..cols {
            tmp[i * cols + j] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * x[i * cols + reflect(j as isize + k as isize - r, cols)])
                .sum();
        }
    }
    let mut out = vec![0.0; x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[reflect(i as isize + k as isize - r, rows) * cols + j])
                .sum();
        }
    }
    out
}

/// `R(x)`: separable Gaussian blur (reflect padding), then contrast about
/// the mean and a brightness offset scaled by the dynamic range, clamped to
/// be nonnegative. `sigma`, contrast and brightness are drawn in that order
/// from `seed`.
pub fn degrade_state(
    x: &[f64],
    shape: (usize, usize),
    params: &DegradeParams,
    seed: u64,
) -> Result<Vec<f64>> {
    params.validate()?;
    if shape.0 * shape.1 != x.len() || x.is_empty() {
        return Err(Error::shape(format!("{}x{}", shape.0, shape.1), x.len()));
    }
    let mut rng = rng_from_seed(seed);
    let sigma = draw(&mut rng, params.sigma);
    let gamma = draw(&mut rng, params.contrast);
    let beta = draw(&mut rng, params.brightness);
    let blurred = blur(x, shape, &gaussian_kernel(sigma, params.radius));
    let mean = blurred.iter().sum::<f64>() / blurred.len() as f64;
    let (lo, hi) = blurred
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| {
            (l.min(*v), h.max(*v))
        });
    let offset = beta * (hi - lo);
    // Arranged so that gamma = 1, beta = 0 leaves values bit-identical.
    Ok(blurred
        .iter()
        .map(|v| (v + (gamma - 1.0) * (v - mean) + offset).max(0.0))
        .collect())
}

pub fn degrade(x: &Sinogram, params: &DegradeParams, seed: u64) -> Result<Sinogram> {
    let (a, b) = x.shape();
    Sinogram::new(a, b, degrade_state(x.values(), (a, b), params, seed)?)
}

/// `sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps`, with `abar_0 = 1`.
pub fn forward_noise(
    x0: &[f64],
    t: usize,
    sched: &RefineSchedule,
    eps: &[f64],
) -> Result<Vec<f64>> {
    if t > sched.t_refine() {
        return Err(Error::invalid(format!(
            "t = {t} outside [0, {}]",
            sched.t_refine()
        )));
    }
    if x0.len() != eps.len() {
        return Err(Error::shape(x0.len(), eps.len()));
    }
    let ab = sched.alpha_bar(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| s * x + n * e).collect())
}

/// Predicts the injected noise from `(x_t, x_d, t)`.
pub trait NoisePredictor {
    fn predict_eps(
        &self,
        x_t: &[f64],
        x_d: &[f64],
        t: usize,
        shape: (usize, usize),
    ) -> Result<Vec<f64>>;
}

impl NoisePredictor for DenoiserModel {
    fn predict_eps(
        &self,
        x_t: &[f64],
        x_d: &[f64],
        t: usize,
        shape: (usize, usize),
    ) -> Result<Vec<f64>> {
        self.forward(x_t, Some(x_d), t as f64, shape)
    }
}

/// Oracle that knows the clean signal and returns exactly the noise that
/// separates it from `x_t`.
#[derive(Clone, Debug)]
pub struct KnownSignal<'a> {
    pub x0: Vec<f64>,
    pub sched: &'a RefineSchedule,
}

impl NoisePredictor for KnownSignal<'_> {
    fn predict_eps(&self, x_t: &[f64], _: &[f64], t: usize, _: (usize, usize)) -> Result<Vec<f64>> {
        if x_t.len() != self.x0.len() {
            return Err(Error::shape(self.x0.len(), x_t.len()));
        }
        let ab = self.sched.alpha_bar(t);
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x_t
            .iter()
            .zip(&self.x0)
            .map(|(x, x0)| (x - s * x0) / n)
            .collect())
    }
}

/// Posterior-mean oracle for per-pixel Gaussian data `x_0 ~ N(mean, var)`:
/// predicts the noise implied by `E[x_0 | x_t]`. Unlike [`KnownSignal`] its
/// output depends on where the reverse process starts.
#[derive(Clone, Debug)]
pub struct GaussianPrior<'a> {
    pub mean: Vec<f64>,
    pub var: f64,
    pub sched: &'a RefineSchedule,
}

impl NoisePredictor for GaussianPrior<'_> {
    fn predict_eps(&self, x_t: &[f64], _: &[f64], t: usize, _: (usize, usize)) -> Result<Vec<f64>> {
        if x_t.len() != self.mean.len() {
            return Err(Error::shape(self.mean.len(), x_t.len()));
        }
        let ab = self.sched.alpha_bar(t);
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        let denom = ab * self.var + 1.0 - ab;
        Ok(x_t
            .iter()
            .zip(&self.mean)
            .map(|(x, m)| {
                let x0 = (s * self.var * x + (1.0 - ab) * m) / denom;
                (x - s * x0) / n
            })
            .collect())
    }
}

/// Starting state `x_{t_prior}` drawn from `q(x_{t_prior} | coarse)`.
pub fn refine_init(coarse: &[f64], sched: &RefineSchedule, seed: u64) -> Result<Vec<f64>> {
    let eps = standard_normal(
        &mut rng_from_seed(subseed(seed, STREAM_INIT, 0)),
        coarse.len(),
    );
    forward_noise(coarse, sched.t_prior(), sched, &eps)
}

/// Seed for the inference-time degradation of a run seeded with `seed`.
pub fn inference_degrade_seed(seed: u64) -> u64 {
    subseed(seed, STREAM_DEGRADE, u64::MAX)
}

/// Ancestral steps `t_prior, ..., 1` or, with `fast_steps = Some(k)`, the
/// deterministic DDIM update on a uniform `k`-interval sub-grid of
/// `[0, t_prior]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefineMode {
    Ancestral,
    Ddim(usize),
}

/// Observer for refiner iterates: `(t, x_t, x0_hat)` after each step, where
/// `x0_hat` is the clean-signal estimate implied by that step's noise
/// prediction.
pub type RefineObserver<'a> = &'a mut dyn FnMut(usize, &[f64], &[f64]);

fn ensure_finite(x: &[f64], step: usize) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        let max = x
            .iter()
            .filter(|v| v.is_finite())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        return Err(Error::NonFinite {
            step,
            detail: format!("refiner iterate not finite (max finite |x| = {max:e})"),
        });
    }
    Ok(())
}

fn x0_from_eps(x: &[f64], eps: &[f64], ab: f64) -> Vec<f64> {
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    x.iter().zip(eps).map(|(x, e)| (x - n * e) / s).collect()
}

/// The uniform DDIM grid `t_prior = tau_k > ... > tau_0 = 0`, deduplicated.
pub fn ddim_grid(t_prior: usize, k: usize) -> Vec<usize> {
    let k = k.max(1);
    let mut grid: Vec<usize> = (0..=k).rev().map(|i| (i * t_prior + k / 2) / k).collect();
    grid.dedup();
    grid
}

/// Runs the reverse process from `x_{t_prior}` with condition `x_d` and
/// returns the raw final state (no clamp).
pub fn refine_from<P: NoisePredictor + ?Sized>(
    model: &P,
    init: Vec<f64>,
    x_d: &[f64],
    shape: (usize, usize),
    sched: &RefineSchedule,
    mode: RefineMode,
    seed: u64,
    mut observer: Option<RefineObserver<'_>>,
) -> Result<Vec<f64>> {
    if init.len() != shape.0 * shape.1 || x_d.len() != init.len() {
        return Err(Error::shape(shape.0 * shape.1, init.len().max(x_d.len())));
    }
    let mut x = init;
    match mode {
        RefineMode::Ancestral => {
            for t in (1..=sched.t_prior()).rev() {
                let eps = model.predict_eps(&x, x_d, t, shape)?;
                let (a, ab) = (sched.alpha(t), sched.alpha_bar(t));
                let k = (1.0 - a) / (1.0 - ab).sqrt();
                let inv = 1.0 / a.sqrt();
                let x0_hat = observer.as_ref().map(|_| x0_from_eps(&x, &eps, ab));
                let mut next: Vec<f64> =
                    x.iter().zip(&eps).map(|(x, e)| inv * (x - k * e)).collect();
                if t > 1 {
                    let mut rng = rng_from_seed(subseed(seed, STREAM_STEP, t as u64));
                    let z = standard_normal(&mut rng, next.len());
                    let sigma = sched.beta(t).sqrt();
                    next.iter_mut().zip(&z).for_each(|(x, z)| *x += sigma * z);
                }
                ensure_finite(&next, t)?;
                x = next;
                if let (Some(obs), Some(x0_hat)) = (observer.as_mut(), x0_hat) {
                    obs(t - 1, &x, &x0_hat);
                }
            }
        }
        RefineMode::Ddim(k) => {
            let grid = ddim_grid(sched.t_prior(), k);
            for pair in grid.windows(2) {
                let (t, tn) = (pair[0], pair[1]);
                let eps = model.predict_eps(&x, x_d, t, shape)?;
                let x0_hat = x0_from_eps(&x, &eps, sched.alpha_bar(t));
                let abn = sched.alpha_bar(tn);
                let (s, n) = (abn.sqrt(), (1.0 - abn).sqrt());
                let next: Vec<f64> = x0_hat
                    .iter()
                    .zip(&eps)
                    .map(|(x0, e)| s * x0 + n * e)
                    .collect();
                ensure_finite(&next, t)?;
                x = next;
                if let Some(obs) = observer.as_mut() {
                    obs(tn, &x, &x0_hat);
                }
            }
        }
    }
    Ok(x)
}

/// Refines a coarse estimate: degrade it into the condition, re-noise it to
/// `t_prior`, run the reverse process, clamp to nonnegative.
pub fn refine_sample<P: NoisePredictor + ?Sized>(
    model: &P,
    coarse: &Sinogram,
    sched: &RefineSchedule,
    degrade_params: &DegradeParams,
    seed: u64,
    mode: RefineMode,
    observer: Option<RefineObserver<'_>>,
) -> Result<Sinogram> {
    let shape = coarse.shape();
    let x_d = degrade_state(
        coarse.values(),
        shape,
        degrade_params,
        inference_degrade_seed(seed),
    )?;
    let init = refine_init(coarse.values(), sched, seed)?;
    let x = refine_from(model, init, &x_d, shape, sched, mode, seed, observer)?;
    Sinogram::from_state_clamped(shape.0, shape.1, &x)
}

fn sample_step(rng: &mut SimRng, dist: TimeDist, sched: &RefineSchedule) -> usize {
    match dist {
        TimeDist::Uniform => rng.random_range(1..=sched.t_refine()),
        TimeDist::UpToPrior => rng.random_range(1..=sched.t_prior()),
    }
}

/// Squared noise-prediction error `mean((eps_hat - eps)^2)` for one sample
/// and its parameter gradient.
pub fn refiner_loss_and_grad(
    model: &DenoiserModel,
    x0: &[f64],
    x_d: &[f64],
    t: usize,
    eps: &[f64],
    shape: (usize, usize),
    sched: &RefineSchedule,
) -> Result<(f64, Vec<f64>)> {
    let x_t = forward_noise(x0, t, sched, eps)?;
    let (pred, tape) = model.forward_tape(&x_t, Some(x_d), t as f64, shape)?;
    let n = x0.len() as f64;
    let loss = pred
        .iter()
        .zip(eps)
        .map(|(p, e)| (p - e).powi(2))
        .sum::<f64>()
        / n;
    let grad_out: Vec<f64> = pred
        .iter()
        .zip(eps)
        .map(|(p, e)| 2.0 * (p - e) / n)
        .collect();
    Ok((loss, model.backward(&tape, &grad_out)?))
}

/// Trains on unpaired clean samples for steps `start_step..cfg.steps`; each
/// sample gets a freshly seeded degradation. Returns per-step batch losses.
pub fn train_refiner(
    model: &mut DenoiserModel,
    opt: &mut AdamW,
    data: &[&[f64]],
    shape: (usize, usize),
    degrade_params: &DegradeParams,
    cfg: &TrainConfig,
    sched: &RefineSchedule,
    start_step: usize,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    degrade_params.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("refiner training needs at least one sample"));
    }
    let npx = shape.0 * shape.1;
    if let Some(bad) = data.iter().find(|d| d.len() != npx) {
        return Err(Error::shape(npx, bad.len()));
    }
    let mut trace = Vec::with_capacity(cfg.steps.saturating_sub(start_step));
    for step in start_step..cfg.steps {
        let mut rng = rng_from_seed(subseed(cfg.seed, STREAM_TRAIN, step as u64));
        let mut grads = vec![0.0; model.params().len()];
        let mut loss = 0.0;
        let inv_b = 1.0 / cfg.batch_size as f64;
        for _ in 0..cfg.batch_size {
            let x0 = data[rng.random_range(0..data.len())];
            let x_d = degrade_state(x0, shape, degrade_params, rng.random::<u64>())?;
            let t = sample_step(&mut rng, cfg.time_dist, sched);
            let eps = standard_normal(&mut rng, npx);
            let (l, g) = refiner_loss_and_grad(model, x0, &x_d, t, &eps, shape, sched)?;
            loss += l * inv_b;
            grads.iter_mut().zip(&g).for_each(|(a, g)| *a += g * inv_b);
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("refiner loss {loss}"),
            });
        }
        model.apply_update(opt, &grads).map_err(|e| match e {
            Error::NonFinite { detail, .. } => Error::NonFinite { step, detail },
            other => other,
        })?;
        trace.push(loss);
    }
    Ok(trace)
}

/// Mean noise-prediction loss over a fixed probe set.
pub fn refiner_probe_loss(
    model: &DenoiserModel,
    data: &[&[f64]],
    shape: (usize, usize),
    degrade_params: &DegradeParams,
    sched: &RefineSchedule,
    dist: TimeDist,
    n_probes: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = rng_from_seed(seed);
    let mut total = 0.0;
    for _ in 0..n_probes {
        let x0 = data[rng.random_range(0..data.len())];
        let x_d = degrade_state(x0, shape, degrade_params, rng.random::<u64>())?;
        let t = sample_step(&mut rng, dist, sched);
        let eps = standard_normal(&mut rng, x0.len());
        let x_t = forward_noise(x0, t, sched, &eps)?;
        let pred = model.forward(&x_t, Some(&x_d), t as f64, shape)?;
        total += pred
            .iter()
            .zip(&eps)
            .map(|(p, e)| (p - e).powi(2))
            .sum::<f64>()
            / x0.len() as f64;
    }
    Ok(total / n_probes as f64)
}
