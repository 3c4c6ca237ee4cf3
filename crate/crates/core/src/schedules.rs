//! Time parameterisations for both stages.
//!
//! The bridge uses zero forward drift and a constant diffusion coefficient
//! `g`, so the marginal is the Brownian bridge between `x_0` and `x_T`:
//! `x_t = a_t x_T + b_t x_0 + sqrt(c_t) eps` with `a_t = t/T`,
//! `b_t = 1 - t/T` and `c_t = g^2 t (T - t) / T`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stable_hash64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeSchedule {
    /// Terminal time `T`.
    pub t_max: f64,
    /// Constant diffusion coefficient.
    pub g: f64,
    /// Guidance strength on the h-transform term of the ODE drift.
    pub w: f64,
    /// Fraction of each step spent on the Euler–Maruyama sub-step.
    pub m: f64,
    /// Number of sampler steps.
    pub n_steps: usize,
    /// Grid warping exponent.
    pub rho: f64,
    pub t_min: f64,
}

impl Default for BridgeSchedule {
    fn default() -> Self {
        Self {
            t_max: 1.0,
            g: 0.5,
            w: 1.0,
            m: 0.3,
            n_steps: 40,
            rho: 7.0,
            t_min: 1e-4,
        }
    }
}

impl BridgeSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.t_max.is_finite()
            && self.t_min > 0.0
            && self.t_min < self.t_max
            && self.g > 0.0
            && self.g.is_finite()
            && self.w.is_finite()
            && self.m > 0.0
            && self.m < 1.0
            && self.n_steps >= 1
            && self.rho >= 1.0
            && self.rho.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid bridge schedule {self:?}")))
        }
    }

    /// `(a_t, b_t, c_t)`.
    pub fn coeffs(&self, t: f64) -> Result<(f64, f64, f64)> {
        if !(0.0..=self.t_max).contains(&t) {
            return Err(Error::invalid(format!(
                "t = {t} outside [0, {}]",
                self.t_max
            )));
        }
        let a = t / self.t_max;
        let b = 1.0 - a;
        let c = self.g * self.g * t * (self.t_max - t) / self.t_max;
        Ok((a, b, c))
    }

    pub fn snr(&self, t: f64) -> Result<f64> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::invalid(format!("snr undefined at t = {t}")));
        }
        Ok(1.0 / (self.g * self.g * t))
    }

    /// `t_0 < t_1 < ... < t_N` with `t_0 = t_min`, `t_N = T`; intervals
    /// shrink toward `t_min` when `rho > 1`.
    pub fn time_grid(&self) -> Vec<f64> {
        let n = self.n_steps;
        let lo = self.t_min.powf(1.0 / self.rho);
        let hi = self.t_max.powf(1.0 / self.rho);
        let mut grid: Vec<f64> = (0..=n)
            .map(|i| (lo + (i as f64 / n as f64) * (hi - lo)).powf(self.rho))
            .collect();
        grid[0] = self.t_min;
        grid[n] = self.t_max;
        grid
    }

    pub fn fingerprint(&self) -> u64 {
        stable_hash64(format!("bridge:{self:?}").as_bytes())
    }
}

pub fn bridge_coeffs(t: f64, sched: &BridgeSchedule) -> Result<(f64, f64, f64)> {
    sched.coeffs(t)
}

pub fn snr(t: f64, sched: &BridgeSchedule) -> Result<f64> {
    sched.snr(t)
}

pub fn time_grid(sched: &BridgeSchedule) -> Vec<f64> {
    sched.time_grid()
}

/// Serializable parameters of the discrete refinement schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineParams {
    pub t_refine: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub t_prior: usize,
}

impl Default for RefineParams {
    fn default() -> Self {
        Self {
            t_refine: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
            t_prior: 185,
        }
    }
}

impl RefineParams {
    pub fn build(&self) -> Result<RefineSchedule> {
        make_refine_schedule(self.t_refine, self.beta_min, self.beta_max, self.t_prior)
    }
}

/// Linear-beta DDPM schedule. Vectors are indexed by the step `t` in
/// `0..=t_refine`; index 0 holds `beta = 0`, `alpha = alpha_bar = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineSchedule {
    params: RefineParams,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_refine_schedule(
    t_refine: usize,
    beta_min: f64,
    beta_max: f64,
    t_prior: usize,
) -> Result<RefineSchedule> {
    if t_refine == 0 {
        return Err(Error::invalid("t_refine must be >= 1"));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
        )));
    }
    if t_prior == 0 || t_prior > t_refine {
        return Err(Error::invalid(format!(
            "t_prior = {t_prior} outside [1, {t_refine}]"
        )));
    }
    let mut betas = vec![0.0];
    for t in 1..=t_refine {
        let frac = if t_refine == 1 {
            0.0
        } else {
            (t - 1) as f64 / (t_refine - 1) as f64
        };
        betas.push(beta_min + frac * (beta_max - beta_min));
    }
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_refine + 1);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(RefineSchedule {
        params: RefineParams {
            t_refine,
            beta_min,
            beta_max,
            t_prior,
        },
        betas,
        alphas,
        alpha_bars,
    })
}

impl RefineSchedule {
    pub fn params(&self) -> &RefineParams {
        &self.params
    }

    pub fn t_refine(&self) -> usize {
        self.params.t_refine
    }

    pub fn t_prior(&self) -> usize {
        self.params.t_prior
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn with_t_prior(&self, t_prior: usize) -> Result<RefineSchedule> {
        make_refine_schedule(
            self.params.t_refine,
            self.params.beta_min,
            self.params.beta_max,
            t_prior,
        )
    }

    /// Ignores `t_prior`, which only affects sampling.
    pub fn fingerprint(&self) -> u64 {
        let p = &self.params;
        stable_hash64(format!("refine:{}:{:?}:{:?}", p.t_refine, p.beta_min, p.beta_max).as_bytes())
    }
}
