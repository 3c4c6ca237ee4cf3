//! Stage one: a Brownian diffusion bridge from the tracer-A sinogram `x_T`
//! to the tracer-B sinogram `x_0`, with an x0-predicting denoiser.
//!
//! The reverse dynamics are written in forward time: an iterate moves from
//! `t` to `t_next < t` as `x + drift * (t_next - t)`, where
//! `drift_sde = -g^2 (s - h)` and `drift_ode = -g^2 (s/2 - w h)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{AdamW, DenoiserModel, LossWeight, TimeDist, TrainConfig};
use crate::phantom::Sinogram;
use crate::rng::{rng_from_seed, standard_normal, subseed};
use crate::schedules::BridgeSchedule;

const STREAM_TRAIN: u64 = 0xB41D_6E00;
const STREAM_SAMPLE: u64 = 0xB41D_6E01;

/// Anything that predicts `x_0` from `(x_t, t)`. `x_end` is the bridge's
/// fixed endpoint; learned models ignore it, analytic oracles may use it.
pub trait X0Predictor {
    fn predict_x0(
        &self,
        x_t: &[f64],
        t: f64,
        x_end: &[f64],
        shape: (usize, usize),
        sched: &BridgeSchedule,
    ) -> Result<Vec<f64>>;
}

impl X0Predictor for DenoiserModel {
    fn predict_x0(
        &self,
        x_t: &[f64],
        t: f64,
        _x_end: &[f64],
        shape: (usize, usize),
        sched: &BridgeSchedule,
    ) -> Result<Vec<f64>> {
        self.precondition(x_t, t, sched, shape)
    }
}

/// Oracle that always returns a known `x_0`.
#[derive(Clone, Debug)]
pub struct FixedX0(pub Vec<f64>);

impl X0Predictor for FixedX0 {
    fn predict_x0(
        &self,
        x_t: &[f64],
        _: f64,
        _: &[f64],
        _: (usize, usize),
        _: &BridgeSchedule,
    ) -> Result<Vec<f64>> {
        check_len(self.0.len(), x_t.len())?;
        Ok(self.0.clone())
    }
}

/// Posterior-mean oracle for per-pixel Gaussian data `x_0 ~ N(mean, var)`
/// bridged to a fixed `x_T`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianPosterior {
    pub mean: f64,
    pub var: f64,
}

impl X0Predictor for GaussianPosterior {
    fn predict_x0(
        &self,
        x_t: &[f64],
        t: f64,
        x_end: &[f64],
        _: (usize, usize),
        sched: &BridgeSchedule,
    ) -> Result<Vec<f64>> {
        check_len(x_end.len(), x_t.len())?;
        let (a, b, c) = sched.coeffs(t)?;
        let denom = b * b * self.var + c;
        Ok(x_t
            .iter()
            .zip(x_end)
            .map(|(x, xe)| self.mean + self.var * b * (x - a * xe - b * self.mean) / denom)
            .collect())
    }
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::shape(expected, actual));
    }
    Ok(())
}

/// `a_t x_T + b_t x_0 + sqrt(c_t) eps`.
pub fn forward_bridge_sample(
    x0: &[f64],
    x_end: &[f64],
    t: f64,
    eps: &[f64],
    sched: &BridgeSchedule,
) -> Result<Vec<f64>> {
    check_len(x0.len(), x_end.len())?;
    check_len(x0.len(), eps.len())?;
    let (a, b, c) = sched.coeffs(t)?;
    let sc = c.sqrt();
    Ok(x0
        .iter()
        .zip(x_end)
        .zip(eps)
        .map(|((x0, xe), e)| a * xe + b * x0 + sc * e)
        .collect())
}

/// `h = grad log p(x_T | x_t) = (x_T - x_t) / (g^2 (T - t))`.
pub fn h_fn(x_t: &[f64], t: f64, x_end: &[f64], sched: &BridgeSchedule) -> Result<Vec<f64>> {
    check_len(x_t.len(), x_end.len())?;
    // Inclusive at the band edge so the sampler may start at T (1 - 1e-6).
    let guard = 1e-6 * sched.t_max * (1.0 - 1e-9);
    if !(sched.t_max - t >= guard) || !t.is_finite() {
        return Err(Error::invalid(format!(
            "h undefined at t = {t}: within {guard} of T"
        )));
    }
    let k = 1.0 / (sched.g * sched.g * (sched.t_max - t));
    Ok(x_t.iter().zip(x_end).map(|(x, xe)| (xe - x) * k).collect())
}

/// Score of the bridge marginal given an x0-prediction:
/// `-(x_t - a_t x_T - b_t x0_hat) / c_t`.
pub fn bridge_score(
    x_t: &[f64],
    t: f64,
    x_end: &[f64],
    x0_hat: &[f64],
    sched: &BridgeSchedule,
) -> Result<Vec<f64>> {
    check_len(x_t.len(), x_end.len())?;
    check_len(x_t.len(), x0_hat.len())?;
    let (a, _, c) = sched.coeffs(t)?;
    if !(c >= 1e-12) {
        return Err(Error::invalid(format!(
            "score undefined at t = {t}: c_t = {c}"
        )));
    }
    // Written relative to x0_hat so that an all-equal state scores exactly 0.
    Ok(x_t
        .iter()
        .zip(x_end)
        .zip(x0_hat)
        .map(|((x, xe), x0)| -((x - x0) - a * (xe - x0)) / c)
        .collect())
}

/// `-g^2 (s - h)` from precomputed score and h.
pub fn sde_drift_from(score: &[f64], h: &[f64], sched: &BridgeSchedule) -> Vec<f64> {
    let g2 = sched.g * sched.g;
    score.iter().zip(h).map(|(s, h)| -g2 * (s - h)).collect()
}

/// `-g^2 (s/2 - w h)` from precomputed score and h.
pub fn ode_drift_from(score: &[f64], h: &[f64], sched: &BridgeSchedule) -> Vec<f64> {
    let g2 = sched.g * sched.g;
    score
        .iter()
        .zip(h)
        .map(|(s, h)| -g2 * (0.5 * s - sched.w * h))
        .collect()
}

fn score_and_h<P: X0Predictor + ?Sized>(
    model: &P,
    x_t: &[f64],
    t: f64,
    x_end: &[f64],
    shape: (usize, usize),
    sched: &BridgeSchedule,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let x0_hat = model.predict_x0(x_t, t, x_end, shape, sched)?;
    Ok((
        bridge_score(x_t, t, x_end, &x0_hat, sched)?,
        h_fn(x_t, t, x_end, sched)?,
    ))
}

pub fn drift_sde<P: X0Predictor + ?Sized>(
    x_t: &[f64],
    t: f64,
    x_end: &[f64],
    model: &P,
    shape: (usize, usize),
    sched: &BridgeSchedule,
) -> Result<Vec<f64>> {
    let (s, h) = score_and_h(model, x_t, t, x_end, shape, sched)?;
    Ok(sde_drift_from(&s, &h, sched))
}

pub fn drift_ode<P: X0Predictor + ?Sized>(
    x_t: &[f64],
    t: f64,
    x_end: &[f64],
    model: &P,
    shape: (usize, usize),
    sched: &BridgeSchedule,
) -> Result<Vec<f64>> {
    let (s, h) = score_and_h(model, x_t, t, x_end, shape, sched)?;
    Ok(ode_drift_from(&s, &h, sched))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerMode {
    /// Euler–Maruyama sub-step then Heun, as in the reference algorithm.
    Hybrid,
    /// Hybrid with the Euler–Maruyama noise set to zero.
    HybridNoiseless,
    /// Plain Heun on the ODE drift (no stochastic sub-step).
    OdeOnly,
}

/// Observer for sampler iterates: `(i, t_{i-1}, x_{i-1})` after each step,
/// starting from `(N + 1, t_N, x_N)` for the initial state.
pub type Observer<'a> = &'a mut dyn FnMut(usize, f64, &[f64]);

fn ensure_finite(x: &[f64], step: usize) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        let max = x
            .iter()
            .filter(|v| v.is_finite())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        return Err(Error::NonFinite {
            step,
            detail: format!("sampler iterate not finite (max finite |x| = {max:e})"),
        });
    }
    Ok(())
}

/// Runs the reverse bridge from `x_T` (at `t_N = T (1 - 1e-6)`) to `t_0 = t_min`
/// and returns the raw final state (no clamp).
pub fn hybrid_sample_state<P: X0Predictor + ?Sized>(
    model: &P,
    x_end: &[f64],
    shape: (usize, usize),
    sched: &BridgeSchedule,
    seed: u64,
    mode: SamplerMode,
    mut observer: Option<Observer<'_>>,
) -> Result<Vec<f64>> {
    sched.validate()?;
    check_len(shape.0 * shape.1, x_end.len())?;
    let mut grid = sched.time_grid();
    let n = sched.n_steps;
    grid[n] = sched.t_max * (1.0 - 1e-6);
    let mut x = x_end.to_vec();
    if let Some(obs) = observer.as_mut() {
        obs(n + 1, grid[n], &x);
    }
    let g = sched.g;
    for i in (1..=n).rev() {
        let (ti, tn) = (grid[i], grid[i - 1]);
        let (t_hat, x_hat) = if mode == SamplerMode::OdeOnly {
            (ti, x.clone())
        } else {
            let t_hat = ti + sched.m * (tn - ti);
            let d = drift_sde(&x, ti, x_end, model, shape, sched)?;
            let dt = t_hat - ti;
            let mut x_hat: Vec<f64> = x.iter().zip(&d).map(|(x, d)| x + d * dt).collect();
            if mode == SamplerMode::Hybrid {
                let mut rng = rng_from_seed(subseed(seed, STREAM_SAMPLE, i as u64));
                let z = standard_normal(&mut rng, x.len());
                let k = g * dt.abs().sqrt();
                x_hat.iter_mut().zip(&z).for_each(|(x, z)| *x += k * z);
            }
            (t_hat, x_hat)
        };
        let dt = tn - t_hat;
        let d_hat = drift_ode(&x_hat, t_hat, x_end, model, shape, sched)?;
        let mut next: Vec<f64> = x_hat.iter().zip(&d_hat).map(|(x, d)| x + d * dt).collect();
        if i != 1 {
            let d_next = drift_ode(&next, tn, x_end, model, shape, sched)?;
            next = x_hat
                .iter()
                .zip(&d_hat)
                .zip(&d_next)
                .map(|((x, d1), d2)| x + (0.5 * d1 + 0.5 * d2) * dt)
                .collect();
        }
        ensure_finite(&next, i)?;
        x = next;
        if let Some(obs) = observer.as_mut() {
            obs(i, tn, &x);
        }
    }
    Ok(x)
}

/// Converts a tracer-A sinogram to a coarse tracer-B estimate.
pub fn hybrid_sample<P: X0Predictor + ?Sized>(
    model: &P,
    x_end: &Sinogram,
    sched: &BridgeSchedule,
    seed: u64,
    mode: SamplerMode,
    observer: Option<Observer<'_>>,
) -> Result<Sinogram> {
    let shape = x_end.shape();
    let x = hybrid_sample_state(model, x_end.values(), shape, sched, seed, mode, observer)?;
    Sinogram::from_state_clamped(shape.0, shape.1, &x)
}

fn loss_weight(kind: LossWeight, c_out: f64, c_t: f64, sched: &BridgeSchedule) -> f64 {
    match kind {
        LossWeight::Unit => 1.0,
        LossWeight::InvCout2 => 1.0 / (c_out * c_out).max(1e-12),
        LossWeight::InvCt => {
            let floor = sched
                .coeffs(sched.t_min)
                .map(|(_, _, c)| c)
                .unwrap_or(1e-12);
            1.0 / c_t.max(floor)
        }
    }
}

/// Draws one training time.
fn sample_time(rng: &mut impl Rng, dist: TimeDist, sched: &BridgeSchedule) -> Result<f64> {
    match dist {
        TimeDist::Uniform => Ok(rng.random_range(sched.t_min..sched.t_max)),
        TimeDist::UpToPrior => Err(Error::invalid("up_to_prior applies to the refiner only")),
    }
}

/// `w mean((pred - x0)^2)`.
pub fn x0_loss(pred: &[f64], x0: &[f64], w: f64) -> f64 {
    w * pred
        .iter()
        .zip(x0)
        .map(|(d, x)| (d - x).powi(2))
        .sum::<f64>()
        / x0.len() as f64
}

/// Weighted x0-regression loss `w(t) mean((D(x_t, t) - x_0)^2)` for one
/// sample and its gradient with respect to the parameters.
pub fn bridge_loss_and_grad(
    model: &DenoiserModel,
    x0: &[f64],
    x_end: &[f64],
    t: f64,
    eps: &[f64],
    shape: (usize, usize),
    sched: &BridgeSchedule,
    weight: LossWeight,
) -> Result<(f64, Vec<f64>)> {
    let x_t = forward_bridge_sample(x0, x_end, t, eps, sched)?;
    let (d, tape, k) = model.precondition_tape(&x_t, t, sched, shape)?;
    let (_, _, c_t) = sched.coeffs(t)?;
    let w = loss_weight(weight, k.c_out, c_t, sched);
    let n = x0.len() as f64;
    let loss = x0_loss(&d, x0, w);
    let grad_out: Vec<f64> = d
        .iter()
        .zip(x0)
        .map(|(d, x)| w * 2.0 * (d - x) * k.c_out / n)
        .collect();
    Ok((loss, model.backward(&tape, &grad_out)?))
}

/// One `(x_0, x_T)` training pair.
pub type Pair<'a> = (&'a [f64], &'a [f64]);

/// Trains for steps `start_step..cfg.steps` and returns the per-step batch
/// losses. Step `k` draws its batch from `subseed(cfg.seed, .., k)`, so a
/// resumed run reproduces an uninterrupted one.
pub fn train_bridge(
    model: &mut DenoiserModel,
    opt: &mut AdamW,
    pairs: &[Pair<'_>],
    shape: (usize, usize),
    cfg: &TrainConfig,
    sched: &BridgeSchedule,
    start_step: usize,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    sched.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("bridge training needs at least one pair"));
    }
    let npx = shape.0 * shape.1;
    for (x0, xe) in pairs {
        check_len(npx, x0.len())?;
        check_len(npx, xe.len())?;
    }
    let mut trace = Vec::with_capacity(cfg.steps.saturating_sub(start_step));
    for step in start_step..cfg.steps {
        let mut rng = rng_from_seed(subseed(cfg.seed, STREAM_TRAIN, step as u64));
        let mut grads = vec![0.0; model.params().len()];
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let (x0, xe) = pairs[rng.random_range(0..pairs.len())];
            let t = sample_time(&mut rng, cfg.time_dist, sched)?;
            let eps = standard_normal(&mut rng, npx);
            let (l, g) =
                bridge_loss_and_grad(model, x0, xe, t, &eps, shape, sched, cfg.loss_weight)?;
            loss += l / cfg.batch_size as f64;
            grads
                .iter_mut()
                .zip(&g)
                .for_each(|(a, g)| *a += g / cfg.batch_size as f64);
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("bridge loss {loss}"),
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

/// Mean weighted loss over a fixed probe set of `(pair, t, eps)` draws.
pub fn bridge_probe_loss(
    model: &DenoiserModel,
    pairs: &[Pair<'_>],
    shape: (usize, usize),
    sched: &BridgeSchedule,
    weight: LossWeight,
    n_probes: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = rng_from_seed(seed);
    let mut total = 0.0;
    for _ in 0..n_probes {
        let (x0, xe) = pairs[rng.random_range(0..pairs.len())];
        let t = rng.random_range(sched.t_min..sched.t_max);
        let eps = standard_normal(&mut rng, x0.len());
        let x_t = forward_bridge_sample(x0, xe, t, &eps, sched)?;
        let (d, _, k) = model.precondition_tape(&x_t, t, sched, shape)?;
        let (_, _, c_t) = sched.coeffs(t)?;
        let w = loss_weight(weight, k.c_out, c_t, sched);
        total += x0_loss(&d, x0, w);
    }
    Ok(total / n_probes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Architecture, Preconditioning};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn sched(g: f64) -> BridgeSchedule {
        BridgeSchedule {
            g,
            ..BridgeSchedule::default()
        }
    }

    #[test]
    fn forward_sample_endpoints_are_exact() {
        let s = sched(0.7);
        let x0 = [0.25, 1.5, 0.0];
        let xe = [0.75, -0.1, 2.0];
        let eps = [3.0, -1.0, 0.4];
        assert_eq!(forward_bridge_sample(&x0, &xe, 0.0, &eps, &s).unwrap(), x0);
        assert_eq!(forward_bridge_sample(&x0, &xe, 1.0, &eps, &s).unwrap(), xe);
        assert!(forward_bridge_sample(&x0, &xe, 1.5, &eps, &s).is_err());
        assert!(forward_bridge_sample(&x0, &xe[..2], 0.5, &eps, &s).is_err());
    }

    #[test]
    fn h_worked_case_and_guard() {
        let s = sched(1.0);
        assert_eq!(h_fn(&[0.0], 0.5, &[1.0], &s).unwrap(), vec![2.0]);
        assert_eq!(h_fn(&[0.3], 0.2, &[0.3], &s).unwrap(), vec![0.0]);
        assert!(h_fn(&[0.0], 1.0 - 1e-7, &[1.0], &s).is_err());
        assert!(h_fn(&[0.0], 1.0 - 1e-5, &[1.0], &s).is_ok());
        let h1 = h_fn(&[0.1, -0.4], 0.3, &[0.9, 0.2], &sched(0.5)).unwrap();
        let h2 = h_fn(&[0.1, -0.4], 0.3, &[0.9, 0.2], &sched(1.0)).unwrap();
        for (a, b) in h1.iter().zip(&h2) {
            assert!((a / b - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn score_worked_cases() {
        let s = sched(1.0);
        assert_eq!(
            bridge_score(&[0.5], 0.5, &[0.0], &[0.0], &s).unwrap(),
            vec![-2.0]
        );
        // At the marginal mean.
        let (a, b, _) = s.coeffs(0.3).unwrap();
        let x = a * 0.8 + b * 0.2;
        assert!(bridge_score(&[x], 0.3, &[0.8], &[0.2], &s).unwrap()[0].abs() < 1e-14);
        assert!(bridge_score(&[x], 0.0, &[0.8], &[0.2], &s).is_err());
        assert!(bridge_score(&[x], 1.0, &[0.8], &[0.2], &s).is_err());
    }

    #[test]
    fn score_matches_gaussian_log_density_gradient() {
        // log N(x; m, c) differentiated numerically.
        let s = sched(0.6);
        for &t in &[0.05, 0.3, 0.5, 0.9] {
            let (x0, xe) = (0.4, 1.3);
            let (a, b, c) = s.coeffs(t).unwrap();
            let m = a * xe + b * x0;
            let logp = |x: f64| -0.5 * (x - m).powi(2) / c;
            for &x in &[m - 0.3, m, m + 0.17] {
                let hstep = 1e-5;
                let fd = (logp(x + hstep) - logp(x - hstep)) / (2.0 * hstep);
                let analytic = bridge_score(&[x], t, &[xe], &[x0], &s).unwrap()[0];
                assert!(
                    (fd - analytic).abs() < 1e-6 * (1.0 + fd.abs()),
                    "t {t}: {fd} vs {analytic}"
                );
                assert!((analytic + (x - m) / c).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn drift_worked_cases() {
        // s = -2, h = 2, g = 1, w = 1 -> ode drift -(-1 - 2) = 3; sde drift -(-2 - 2) = 4.
        let s = sched(1.0);
        assert_eq!(ode_drift_from(&[-2.0], &[2.0], &s), vec![3.0]);
        assert_eq!(sde_drift_from(&[-2.0], &[2.0], &s), vec![4.0]);
        let w0 = BridgeSchedule {
            w: 0.0,
            ..s.clone()
        };
        assert_eq!(ode_drift_from(&[-2.0], &[2.0], &w0), vec![1.0]);
        // All-equal state: zero drift for any w.
        for w in [0.0, 0.5, 1.0, 2.0] {
            let sw = BridgeSchedule { w, ..sched(0.5) };
            let x = vec![0.37; 4];
            let oracle = FixedX0(x.clone());
            for t in [0.01, 0.5, 0.99] {
                assert!(drift_ode(&x, t, &x, &oracle, (2, 2), &sw)
                    .unwrap()
                    .iter()
                    .all(|d| *d == 0.0));
                assert!(drift_sde(&x, t, &x, &oracle, (2, 2), &sw)
                    .unwrap()
                    .iter()
                    .all(|d| *d == 0.0));
            }
        }
    }

    #[test]
    fn reverse_sde_reproduces_bridge_mean() {
        // Many small Euler–Maruyama steps with the exact score from x_T back
        // toward 0; the ensemble mean follows a_t x_T + b_t x_0.
        let s = sched(0.8);
        let (x0, xe) = (0.3, 1.2);
        let oracle = FixedX0(vec![x0]);
        let n_paths = 4000;
        let n_steps = 400;
        let mut rng = rng_from_seed(17);
        let mut xs = vec![xe; n_paths];
        let dt = -1.0 / n_steps as f64;
        for k in 0..n_steps - 1 {
            let t = 1.0 - (k as f64) / n_steps as f64 - 1e-6;
            for x in xs.iter_mut() {
                let d = drift_sde(&[*x], t, &[xe], &oracle, (1, 1), &s).unwrap()[0];
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                *x += d * dt + s.g * dt.abs().sqrt() * z;
            }
            let t_next = t + dt;
            if (k + 1) % 100 == 0 {
                let mean = xs.iter().sum::<f64>() / n_paths as f64;
                let (a, b, _) = s.coeffs(t_next).unwrap();
                let expected = a * xe + b * x0;
                assert!(
                    (mean - expected).abs() < 0.02 * expected.abs(),
                    "t {t_next}: {mean} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn fixed_point_holds_for_every_iterate() {
        let s = sched(0.5);
        let x: Vec<f64> = (0..12).map(|i| 0.1 * i as f64).collect();
        let oracle = FixedX0(x.clone());
        let mut count = 0;
        let mut obs = |_: usize, _: f64, state: &[f64]| {
            assert_eq!(state, &x[..]);
            count += 1;
        };
        let out = hybrid_sample_state(
            &oracle,
            &x,
            (3, 4),
            &s,
            1,
            SamplerMode::HybridNoiseless,
            Some(&mut obs),
        )
        .unwrap();
        assert_eq!(out, x);
        assert_eq!(count, s.n_steps + 1);
    }

    #[test]
    fn oracle_recovers_x0_at_forty_steps() {
        let x0 = vec![0.2, 0.5, 0.0, 1.0];
        let xe = vec![0.6, 0.1, 0.3, 0.4];
        for g in [0.5, 1.0] {
            let s = sched(g);
            let oracle = FixedX0(x0.clone());
            let out = hybrid_sample_state(
                &oracle,
                &xe,
                (2, 2),
                &s,
                0,
                SamplerMode::HybridNoiseless,
                None,
            )
            .unwrap();
            let err = out
                .iter()
                .zip(&x0)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-2, "g {g}: {err}");
        }
    }

    #[test]
    fn sampler_is_deterministic_per_seed() {
        let s = sched(0.5);
        let oracle = GaussianPosterior {
            mean: 0.4,
            var: 0.04,
        };
        let xe = vec![0.6, 0.1, 0.3, 0.4];
        let a =
            hybrid_sample_state(&oracle, &xe, (2, 2), &s, 5, SamplerMode::Hybrid, None).unwrap();
        let b =
            hybrid_sample_state(&oracle, &xe, (2, 2), &s, 5, SamplerMode::Hybrid, None).unwrap();
        let c =
            hybrid_sample_state(&oracle, &xe, (2, 2), &s, 6, SamplerMode::Hybrid, None).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let sino = Sinogram::new(2, 2, xe.clone()).unwrap();
        let out = hybrid_sample(&oracle, &sino, &s, 5, SamplerMode::Hybrid, None).unwrap();
        assert!(out.values().iter().zip(&a).all(|(o, a)| *o == a.max(0.0)));
    }

    #[test]
    fn non_finite_iterate_aborts() {
        struct Nan;
        impl X0Predictor for Nan {
            fn predict_x0(
                &self,
                x: &[f64],
                _: f64,
                _: &[f64],
                _: (usize, usize),
                _: &BridgeSchedule,
            ) -> Result<Vec<f64>> {
                Ok(vec![f64::NAN; x.len()])
            }
        }
        let err = hybrid_sample_state(
            &Nan,
            &[0.5],
            (1, 1),
            &sched(0.5),
            0,
            SamplerMode::Hybrid,
            None,
        )
        .unwrap_err();
        assert!(err.is_numerical());
        assert!(matches!(err, Error::NonFinite { step: 40, .. }));
    }

    fn tiny_model(precond: Preconditioning, width: usize) -> DenoiserModel {
        let arch = Architecture {
            in_channels: 1,
            widths: vec![width, width],
            time_dim: 8,
            time_scale: 10.0,
        };
        DenoiserModel::new(arch, precond, 3).unwrap()
    }

    /// Four smooth 8x8 images; each endpoint is a pointwise affine map of
    /// its `x_0`, so the pairs are learnable by a small convolutional net.
    fn tiny_pairs() -> Vec<(Vec<f64>, Vec<f64>)> {
        let mut rng = rng_from_seed(99);
        (0..4)
            .map(|_| {
                let (fx, fy, ph): (f64, f64, f64) = (
                    rng.random_range(0.3..1.0),
                    rng.random_range(0.3..1.0),
                    rng.random_range(0.0..6.0),
                );
                let x0: Vec<f64> = (0..64)
                    .map(|i| 0.5 + 0.4 * ((i % 8) as f64 * fx + (i / 8) as f64 * fy + ph).sin())
                    .collect();
                let xe = x0.iter().map(|v| 0.5 * v + 0.2).collect();
                (x0, xe)
            })
            .collect()
    }

    #[test]
    fn oracle_prediction_has_zero_loss() {
        let pairs = tiny_pairs();
        let s = sched(0.5);
        let oracle = FixedX0(pairs[0].0.clone());
        let mut rng = rng_from_seed(3);
        for _ in 0..10 {
            let t = rng.random_range(s.t_min..s.t_max);
            let eps = standard_normal(&mut rng, 64);
            let x_t = forward_bridge_sample(&pairs[0].0, &pairs[0].1, t, &eps, &s).unwrap();
            let d = oracle.predict_x0(&x_t, t, &pairs[0].1, (8, 8), &s).unwrap();
            assert_eq!(x0_loss(&d, &pairs[0].0, 3.5), 0.0);
        }
        assert!((x0_loss(&[1.0, 0.0], &[0.0, 0.0], 2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn memorizes_four_pairs() {
        let pairs = tiny_pairs();
        let refs: Vec<Pair<'_>> = pairs
            .iter()
            .map(|(a, b)| (a.as_slice(), b.as_slice()))
            .collect();
        let s = sched(0.5);
        let precond = Preconditioning::from_pairs(refs.iter().copied()).unwrap();
        let mut model = tiny_model(precond, 16);
        let cfg = TrainConfig {
            lr: 2e-3,
            steps: 4000,
            batch_size: 8,
            seed: 1,
            ..TrainConfig::bridge_default()
        };
        let mut opt = AdamW::new(cfg.adamw(), model.params().len());
        let before = bridge_probe_loss(&model, &refs, (8, 8), &s, LossWeight::Unit, 64, 7).unwrap();
        let trace = train_bridge(&mut model, &mut opt, &refs, (8, 8), &cfg, &s, 0).unwrap();
        let after = bridge_probe_loss(&model, &refs, (8, 8), &s, LossWeight::Unit, 64, 7).unwrap();
        assert_eq!(trace.len(), 4000);
        assert!(after < 0.01 * before, "probe loss {before} -> {after}");
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let pairs = tiny_pairs();
        let refs: Vec<Pair<'_>> = pairs
            .iter()
            .map(|(a, b)| (a.as_slice(), b.as_slice()))
            .collect();
        let s = sched(0.5);
        let cfg = TrainConfig {
            lr: 1e-3,
            steps: 12,
            batch_size: 2,
            seed: 4,
            ..TrainConfig::bridge_default()
        };
        let run = |stop: Option<usize>| {
            let mut model = tiny_model(Preconditioning::Identity, 4);
            let mut opt = AdamW::new(cfg.adamw(), model.params().len());
            let mut trace = vec![];
            if let Some(k) = stop {
                let first = TrainConfig {
                    steps: k,
                    ..cfg.clone()
                };
                trace = train_bridge(&mut model, &mut opt, &refs, (8, 8), &first, &s, 0).unwrap();
                trace.extend(
                    train_bridge(&mut model, &mut opt, &refs, (8, 8), &cfg, &s, k).unwrap(),
                );
            } else {
                trace = train_bridge(&mut model, &mut opt, &refs, (8, 8), &cfg, &s, 0).unwrap();
            }
            (trace, model)
        };
        let (t1, m1) = run(None);
        let (t2, m2) = run(None);
        let (t3, m3) = run(Some(5));
        assert_eq!(t1, t2);
        assert_eq!(m1, m2);
        assert_eq!(t1, t3);
        assert_eq!(m1, m3);
        assert!(train_bridge(
            &mut m3.clone(),
            &mut AdamW::new(cfg.adamw(), 1),
            &refs,
            (8, 8),
            &cfg,
            &s,
            0
        )
        .is_err());
        assert!(train_bridge(
            &mut m3.clone(),
            &mut AdamW::new(cfg.adamw(), m3.params().len()),
            &[],
            (8, 8),
            &cfg,
            &s,
            0
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn endpoint_pinning_for_any_eps(x0 in -5.0f64..5.0, xe in -5.0f64..5.0, eps in -10.0f64..10.0, g in 0.1f64..2.0) {
            let s = sched(g);
            prop_assert_eq!(forward_bridge_sample(&[x0], &[xe], s.t_max, &[eps], &s).unwrap(), vec![xe]);
            prop_assert_eq!(forward_bridge_sample(&[x0], &[xe], 0.0, &[eps], &s).unwrap(), vec![x0]);
        }

        #[test]
        fn score_is_exact_gaussian_score(x in -3.0f64..3.0, x0 in -2.0f64..2.0, xe in -2.0f64..2.0, t in 0.01f64..0.99) {
            let s = sched(0.5);
            let (a, b, c) = s.coeffs(t).unwrap();
            let analytic = -(x - a * xe - b * x0) / c;
            let got = bridge_score(&[x], t, &[xe], &[x0], &s).unwrap()[0];
            prop_assert!((got - analytic).abs() <= 1e-10 * (1.0 + analytic.abs()));
        }
    }
}
