//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

mod common;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use pjdm_cli::ExperimentConfig;
use pjdm_core::bridge::{
    forward_bridge_sample, hybrid_sample_state, FixedX0, GaussianPosterior, SamplerMode,
};
use pjdm_core::metrics::{nrmse, psnr, ssim, MetricsConfig, PsnrConvention};
use pjdm_core::nn::{Architecture, DenoiserModel, Preconditioning, TimeDist};
use pjdm_core::phantom::{make_phantom, radon, Ellipse};
use pjdm_core::refiner::{forward_noise, refine_from, KnownSignal, RefineMode};
use pjdm_core::rng::{rng_from_seed, standard_normal};
use pjdm_core::schedules::make_refine_schedule;
use pjdm_core::{BridgeSchedule, ImageGrid, PhantomSpec, Variant};

type Outcome = Result<String, String>;

/// Name, optional time limit in seconds, check.
type Criterion = (&'static str, Option<u64>, fn() -> Outcome);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let res = f();
    let el = start.elapsed();
    let tag = format!("{:.2}s", el.as_secs_f64());
    match (res, limit) {
        (Ok(d), Some(l)) if el > l => Err(format!("{d}; took {tag} > {:.0}s", l.as_secs_f64())),
        (Ok(d), _) => Ok(format!("{d}; {tag}")),
        (Err(d), _) => Err(format!("{d}; {tag}")),
    }
}

fn bridge_moments() -> Outcome {
    let sched = BridgeSchedule {
        g: 0.8,
        ..BridgeSchedule::default()
    };
    let (x0, xe) = (0.2, 1.0);
    let t = sched.t_max / 2.0;
    let n = 10_000;
    let eps = standard_normal(&mut rng_from_seed(2024), n);
    let draws: Vec<f64> = eps
        .iter()
        .map(|e| forward_bridge_sample(&[x0], &[xe], t, &[*e], &sched).map(|v| v[0]))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let c = sched.g * sched.g * t * (sched.t_max - t) / sched.t_max;
    let target = (x0 + xe) / 2.0;
    let tol = 3.0 * c.sqrt() / (n as f64).sqrt();
    check(
        (mean - target).abs() <= tol && (var / c - 1.0).abs() <= 0.05,
        format!("mean {mean:.5} (target {target}, tol {tol:.5}), var {var:.5} (c_t {c:.5})"),
    )
}

fn endpoint_pinning() -> Outcome {
    let sched = BridgeSchedule::default();
    let mut rng = rng_from_seed(7);
    let x0 = standard_normal(&mut rng, 64);
    let xe = standard_normal(&mut rng, 64);
    let eps = standard_normal(&mut rng, 64);
    let at0 = forward_bridge_sample(&x0, &xe, 0.0, &eps, &sched).map_err(|e| e.to_string())?;
    let at_t =
        forward_bridge_sample(&x0, &xe, sched.t_max, &eps, &sched).map_err(|e| e.to_string())?;
    let bitwise = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
    check(
        bitwise(&at0, &x0) && bitwise(&at_t, &xe),
        "64 pixels, t = 0 and t = T".into(),
    )
}

fn sampler_fixed_point() -> Outcome {
    let sched = BridgeSchedule::default();
    let x: Vec<f64> = standard_normal(&mut rng_from_seed(11), 60 * 64)
        .iter()
        .map(|v| 0.5 + 0.1 * v)
        .collect();
    let oracle = FixedX0(x.clone());
    let (mut count, mut worst) = (0usize, 0.0f64);
    let mut obs = |_: usize, _: f64, s: &[f64]| {
        count += 1;
        worst = s
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b).abs())
            .fold(worst, f64::max);
    };
    let out = hybrid_sample_state(
        &oracle,
        &x,
        (60, 64),
        &sched,
        3,
        SamplerMode::HybridNoiseless,
        Some(&mut obs),
    )
    .map_err(|e| e.to_string())?;
    let final_err = out
        .iter()
        .zip(&x)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    check(
        worst == 0.0 && final_err == 0.0 && count == sched.n_steps + 1,
        format!("{count} iterates, max deviation {worst:e}"),
    )
}

/// Independent reference for the linear-Gaussian ODE: RK4 on the analytic
/// drift with many uniform steps.
fn gaussian_ode_reference(sched: &BridgeSchedule, mu: f64, v: f64, y: f64, t_start: f64) -> f64 {
    let (tt, g2) = (sched.t_max, sched.g * sched.g);
    let f = |t: f64, x: f64| {
        let (a, b) = (t / tt, 1.0 - t / tt);
        let c = g2 * t * (tt - t) / tt;
        let m = a * y + b * mu;
        let s = -(x - m) / (b * b * v + c);
        let h = (y - x) / (g2 * (tt - t));
        -g2 * (0.5 * s - sched.w * h)
    };
    let n = 200_000;
    let dt = (sched.t_min - t_start) / n as f64;
    let mut x = y;
    for k in 0..n {
        let t = t_start + k as f64 * dt;
        let k1 = f(t, x);
        let k2 = f(t + 0.5 * dt, x + 0.5 * dt * k1);
        let k3 = f(t + 0.5 * dt, x + 0.5 * dt * k2);
        let k4 = f(t + dt, x + dt * k3);
        x += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    x
}

fn convergence_order() -> Outcome {
    let (mu, v, y) = (0.3, 0.05, 1.0);
    let base = BridgeSchedule {
        g: 0.5,
        w: 0.5,
        ..BridgeSchedule::default()
    };
    let reference = gaussian_ode_reference(&base, mu, v, y, base.t_max * (1.0 - 1e-6));
    let oracle = GaussianPosterior { mean: mu, var: v };
    let mut errs = Vec::new();
    for n in [10, 20, 40] {
        let sched = BridgeSchedule {
            n_steps: n,
            ..base.clone()
        };
        let out = hybrid_sample_state(&oracle, &[y], (1, 1), &sched, 0, SamplerMode::OdeOnly, None)
            .map_err(|e| e.to_string())?;
        errs.push((out[0] - reference).abs());
    }
    let ratios = [errs[0] / errs[1], errs[1] / errs[2]];
    check(
        ratios.iter().all(|r| *r >= 3.0),
        format!(
            "errors {:.3e} {:.3e} {:.3e}, ratios {:.2} {:.2}",
            errs[0], errs[1], errs[2], ratios[0], ratios[1]
        ),
    )
}

fn refiner_inversion() -> Outcome {
    let shape = (6, 8);
    let x0: Vec<f64> = standard_normal(&mut rng_from_seed(5), 48)
        .iter()
        .map(|v| 0.5 + 0.2 * v)
        .collect();
    let x_d = vec![0.0; 48];
    let max_err = |x: &[f64]| {
        x.iter()
            .zip(&x0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    };
    let err = |e: pjdm_core::Error| e.to_string();

    let one = make_refine_schedule(1000, 1e-4, 0.02, 1).map_err(err)?;
    let oracle = KnownSignal {
        x0: x0.clone(),
        sched: &one,
    };
    let eps = standard_normal(&mut rng_from_seed(6), 48);
    let x1 = forward_noise(&x0, 1, &one, &eps).map_err(err)?;
    let single = refine_from(
        &oracle,
        x1,
        &x_d,
        shape,
        &one,
        RefineMode::Ancestral,
        0,
        None,
    )
    .map_err(err)?;

    let full = make_refine_schedule(1000, 1e-4, 0.02, 185).map_err(err)?;
    let oracle = KnownSignal {
        x0: x0.clone(),
        sched: &full,
    };
    let xp = forward_noise(&x0, 185, &full, &eps).map_err(err)?;
    let ddim_full = refine_from(
        &oracle,
        xp.clone(),
        &x_d,
        shape,
        &full,
        RefineMode::Ddim(185),
        0,
        None,
    )
    .map_err(err)?;
    let ddim_50 = refine_from(
        &oracle,
        xp,
        &x_d,
        shape,
        &full,
        RefineMode::Ddim(50),
        0,
        None,
    )
    .map_err(err)?;

    let (e1, e2, e3) = (max_err(&single), max_err(&ddim_full), max_err(&ddim_50));
    check(
        e1 <= 1e-5 && e2 <= 1e-5 && e3 <= 1e-5,
        format!("t = 1 step {e1:.2e}, DDIM 185 steps {e2:.2e}, DDIM 50 steps {e3:.2e}"),
    )
}

fn gradient_check() -> Outcome {
    let arch = Architecture {
        in_channels: 2,
        widths: vec![2, 3, 2],
        time_dim: 4,
        time_scale: 3.0,
    };
    let hw = (8, 4);
    let n_px = hw.0 * hw.1;
    let (mut worst, mut checked) = (0.0f64, 0usize);
    let err = |e: pjdm_core::Error| e.to_string();
    for seed in 0..5u64 {
        let n_params = DenoiserModel::new(arch.clone(), Preconditioning::Identity, seed)
            .map_err(err)?
            .params()
            .len();
        let params: Vec<f64> = standard_normal(&mut rng_from_seed(1000 + seed), n_params)
            .iter()
            .map(|v| 0.3 * v)
            .collect();
        let model =
            DenoiserModel::from_params(arch.clone(), Preconditioning::Identity, params.clone())
                .map_err(err)?;
        let mut rng = rng_from_seed(2000 + seed);
        let x = standard_normal(&mut rng, n_px);
        let c = standard_normal(&mut rng, n_px);
        let y = standard_normal(&mut rng, n_px);
        let tau = 0.1 + 0.2 * seed as f64;
        let loss = |m: &DenoiserModel| -> Result<f64, String> {
            let out = m.forward(&x, Some(&c), tau, hw).map_err(err)?;
            Ok(0.5
                * out
                    .iter()
                    .zip(&y)
                    .map(|(o, y)| (o - y).powi(2))
                    .sum::<f64>())
        };
        let (out, tape) = model.forward_tape(&x, Some(&c), tau, hw).map_err(err)?;
        let g_out: Vec<f64> = out.iter().zip(&y).map(|(o, y)| o - y).collect();
        let grads = model.backward(&tape, &g_out).map_err(err)?;
        for i in 0..n_params {
            let h = 1e-5;
            let mut p = params.clone();
            p[i] += h;
            let lp = loss(
                &DenoiserModel::from_params(arch.clone(), Preconditioning::Identity, p.clone())
                    .map_err(err)?,
            )?;
            p[i] -= 2.0 * h;
            let lm = loss(
                &DenoiserModel::from_params(arch.clone(), Preconditioning::Identity, p)
                    .map_err(err)?,
            )?;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - grads[i]).abs() / fd.abs().max(grads[i].abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    check(
        worst < 1e-4,
        format!("{checked} parameters over 5 seeds, max relative error {worst:.2e}"),
    )
}

fn metric_oracles() -> Outcome {
    let (i, r) = ([1.0, 0.0, 0.0, 1.0], [1.0, 0.0, 0.0, 0.0]);
    let err = |e: pjdm_core::Error| e.to_string();
    let std_db = psnr(&i, &r, PsnrConvention::StandardRmse).map_err(err)?;
    let lit_db = psnr(&i, &r, PsnrConvention::LiteralEq14).map_err(err)?;
    let img: Vec<f64> = standard_normal(&mut rng_from_seed(9), 256)
        .iter()
        .map(|v| v.abs())
        .collect();
    let self_ssim = ssim(&img, &img, &MetricsConfig::default()).map_err(err)?;
    let other: Vec<f64> = standard_normal(&mut rng_from_seed(10), 256);
    let base = nrmse(&other, &img).map_err(err)?;
    let (alpha, beta) = (3.7, -1.25);
    let scale = |v: &[f64]| v.iter().map(|x| alpha * x + beta).collect::<Vec<_>>();
    let affine = nrmse(&scale(&other), &scale(&img)).map_err(err)?;
    check(
        (std_db - 6.0206).abs() < 1e-4
            && lit_db.abs() < 1e-4
            && self_ssim == 1.0
            && (affine - base).abs() < 1e-10,
        format!(
            "psnr {std_db:.4} / {lit_db:.4} dB, ssim(I,I) {self_ssim}, nrmse shift {:.1e}",
            (affine - base).abs()
        ),
    )
}

fn radon_properties() -> Outcome {
    let err = |e: pjdm_core::Error| e.to_string();
    let size = 64;
    let spec = |seed: u64| {
        let mut rng = rng_from_seed(seed);
        let u = standard_normal(&mut rng, 12);
        PhantomSpec {
            ellipses: (0..3)
                .map(|k| Ellipse {
                    center: [0.5 + 0.08 * u[4 * k], 0.5 + 0.08 * u[4 * k + 1]],
                    semi_axes: [
                        0.12 + 0.03 * u[4 * k + 2].abs(),
                        0.1 + 0.03 * u[4 * k + 3].abs(),
                    ],
                    rotation: u[4 * k],
                    intensity: 1.0 + k as f64,
                })
                .collect(),
            tracer_b_regions: vec![0],
            tracer_b_gain: 2.0,
            background_damp: 0.5,
        }
    };

    // Linearity.
    let a = make_phantom(&spec(1), Variant::A, size, size).map_err(err)?;
    let b = make_phantom(&spec(2), Variant::B, size, size).map_err(err)?;
    let (alpha, beta) = (1.7, 0.4);
    let mix: Vec<f64> = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| alpha * x + beta * y)
        .collect();
    let mix = ImageGrid::new(size, size, mix).map_err(err)?;
    let (ra, rb, rm) = (
        radon(&a, 30, 64).map_err(err)?,
        radon(&b, 30, 64).map_err(err)?,
        radon(&mix, 30, 64).map_err(err)?,
    );
    let combo: Vec<f64> = ra
        .values()
        .iter()
        .zip(rb.values())
        .map(|(x, y)| alpha * x + beta * y)
        .collect();
    let peak = combo.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let lin = rm
        .values()
        .iter()
        .zip(&combo)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / peak;

    // Per-angle mass.
    let mut mass_err = 0.0f64;
    for (seed, n_bins) in [(3u64, 64usize), (4, 48), (5, 96)] {
        let img = make_phantom(&spec(seed), Variant::A, size, size).map_err(err)?;
        let s = radon(&img, 24, n_bins).map_err(err)?;
        let bin_width = size as f64 / n_bins as f64;
        for k in 0..24 {
            let row_mass = s.row(k).iter().sum::<f64>() * bin_width;
            mass_err = mass_err.max((row_mass / img.mass() - 1.0).abs());
        }
    }

    // Smooth radially symmetric disk: every angle sees the same profile.
    let (big, sigma) = (128, 12.0);
    let c = big as f64 / 2.0;
    let disk: Vec<f64> = (0..big * big)
        .map(|p| {
            let (x, y) = ((p % big) as f64 + 0.5 - c, (p / big) as f64 + 0.5 - c);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let disk = ImageGrid::new(big, big, disk).map_err(err)?;
    let s = radon(&disk, 30, big).map_err(err)?;
    let peak = s.values().iter().fold(0.0f64, |m, v| m.max(*v));
    let mut sym = 0.0f64;
    for k in 1..30 {
        for j in 0..big {
            sym = sym.max((s.row(k)[j] - s.row(0)[j]).abs() / peak);
        }
    }
    check(
        lin < 1e-6 && mass_err < 0.01 && sym < 1e-3,
        format!(
            "linearity {lin:.1e}, mass {:.3}%, disk rows {sym:.1e}",
            100.0 * mass_err
        ),
    )
}

fn run_pjdm(config: &Path, args: &[&str], epoch: Option<&str>) -> Result<(), String> {
    let mut cmd: Command = bin();
    cmd.args(args).arg("--config").arg(config);
    match epoch {
        Some(e) => cmd.env("SOURCE_DATE_EPOCH", e),
        None => cmd.env_remove("SOURCE_DATE_EPOCH"),
    };
    let out = cmd.output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "pjdm {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

const PIPELINE: [&[&str]; 6] = [
    &["gen-data"],
    &["train-bridge"],
    &["train-refiner"],
    &["convert"],
    &["evaluate"],
    &["ablate"],
];

fn ablation_means(path: &Path) -> Result<Vec<(String, f64, f64)>, String> {
    let text = fs::read_to_string(path).map_err(|e| e.to_string())?;
    let mut rows = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let num = |i: usize| f[i].parse::<f64>().map_err(|e| format!("{line}: {e}"));
        rows.push((f[0].to_string(), num(1)?, num(2)?));
    }
    Ok(rows)
}

fn desk_run() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = ExperimentConfig {
        bridge_lr: 1e-3,
        bridge_steps: 1500,
        refiner_lr: 1e-3,
        refiner_steps: 4000,
        refiner_time_dist: TimeDist::UpToPrior,
        out_dir: dir.path().join("run"),
        ..ExperimentConfig::default()
    };
    let config = write_config(dir.path(), "desk.json", &cfg);
    let mut stages = Vec::new();
    for args in PIPELINE {
        let start = Instant::now();
        run_pjdm(&config, args, None)?;
        stages.push(format!("{} {:.0}s", args[0], start.elapsed().as_secs_f64()));
    }
    let rows = ablation_means(&cfg.out_dir.join("ablate/ablation.csv"))?;
    let get = |name: &str| {
        rows.iter()
            .find(|r| r.0 == name)
            .cloned()
            .ok_or(format!("missing {name} row"))
    };
    let (ce, cepr) = (get("ce_only")?, get("ce_pr")?);
    let items = fs::read_to_string(cfg.out_dir.join("ablate/ablation_items.csv"))
        .map_err(|e| e.to_string())?;
    // One per-item sinogram row per variant, besides headers, comments and means.
    let item_rows = items
        .lines()
        .filter(|l| l.ends_with(",sinogram") && !l.starts_with("mean,"))
        .count();
    check(
        cepr.1 >= ce.1 && cepr.2 >= ce.2 && rows.len() == 3 && item_rows == 3 * cfg.n_test,
        format!(
            "CE {:.3} dB / {:.4}, CE+PR {:.3} dB / {:.4} over {} items, {} per-item rows [{}]",
            ce.1,
            ce.2,
            cepr.1,
            cepr.2,
            cfg.n_test,
            item_rows,
            stages.join(", ")
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run_dir = dir.path().join("run");
    let cfg = ExperimentConfig {
        debug_dumps: true,
        ..tiny_config(&run_dir)
    };
    let config = write_config(dir.path(), "tiny.json", &cfg);
    let mut snaps = Vec::new();
    for _ in 0..2 {
        if run_dir.exists() {
            fs::remove_dir_all(&run_dir).map_err(|e| e.to_string())?;
        }
        for args in PIPELINE {
            run_pjdm(&config, args, Some("1700000000"))?;
        }
        snaps.push(snapshot(&run_dir));
    }
    let differing: Vec<&String> = snaps[0]
        .iter()
        .filter(|(k, v)| snaps[1].get(*k) != Some(v))
        .map(|(k, _)| k)
        .collect();
    check(
        differing.is_empty() && snaps[0].len() == snaps[1].len() && !snaps[0].is_empty(),
        format!(
            "{} files compared, {} differ {:?}",
            snaps[0].len(),
            differing.len(),
            differing
        ),
    )
}

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("1 bridge marginal moments", Some(5), bridge_moments),
        ("2 endpoint pinning", None, endpoint_pinning),
        ("3 sampler fixed point", None, sampler_fixed_point),
        ("4 sampler convergence order", Some(10), convergence_order),
        ("5 refiner exact inversion", None, refiner_inversion),
        ("6 gradient correctness", Some(60), gradient_check),
        ("7 metric oracles", None, metric_oracles),
        ("8 radon properties", None, radon_properties),
        ("9 desk-scale run", Some(30 * 60), desk_run),
        ("10 determinism", None, determinism),
    ];
    // Optional arguments select criteria by number, e.g. `-- 1 4 8`.
    let wanted: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    let mut ran = 0;
    for (name, limit, f) in criteria {
        let number = name.split(' ').next().unwrap_or_default();
        if !wanted.is_empty() && !wanted.iter().any(|w| w == number) {
            continue;
        }
        ran += 1;
        match timed(limit.map(Duration::from_secs), f) {
            Ok(d) => println!("PASS  {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL  {name}: {d}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
