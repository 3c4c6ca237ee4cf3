//! The six experiment commands. Each returns the artifacts it wrote,
//! relative to the run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

use pjdm_core::bridge::{train_bridge, Pair};
use pjdm_core::metrics::{
    evaluate, profile_line, Domain, MetricsConfig, MetricsReport, ProfileLine,
};
use pjdm_core::nn::{
    load_checkpoint, load_optimizer, save_checkpoint, save_optimizer, AdamW, DenoiserModel,
    Preconditioning,
};
use pjdm_core::phantom::{fbp, gen_dataset, gen_test_split, PairedItem};
use pjdm_core::refiner::train_refiner;
use pjdm_core::{Error as CoreError, PhantomSpec, Sinogram};

use crate::config::{streams, ExperimentConfig, PrecondName};
use crate::manifest::{now_unix, CommandRecord, RunManifest};
use crate::pipeline::{coarse_one, convert_one, refine_one, Denoisers, Trained};
use crate::plot::{heat_map, line_plot};
use crate::store::{
    load_data, load_manifest, read_sino_file, store_sino, write_atomic, write_sino_file, DataEntry,
    DataManifest, Layout, LoadedData, DATA_FORMAT,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    TrainBridge,
    TrainRefiner,
    Convert,
    Evaluate,
    Ablate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainBridge => "train-bridge",
            Command::TrainRefiner => "train-refiner",
            Command::Convert => "convert",
            Command::Evaluate => "evaluate",
            Command::Ablate => "ablate",
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue training from the saved checkpoint and optimizer state.
    pub resume: bool,
    /// Convert these files instead of the held-out split.
    pub inputs: Vec<std::path::PathBuf>,
}

/// Runs one command and records it in the run manifest.
pub fn run(command: Command, cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<String>> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out_dir);
    let started = now_unix();
    let artifacts = match command {
        Command::GenData => gen_data(cfg, &layout)?,
        Command::TrainBridge => train_bridge_cmd(cfg, &layout, opts.resume)?,
        Command::TrainRefiner => train_refiner_cmd(cfg, &layout, opts.resume)?,
        Command::Convert => {
            let den = load_trained(cfg, &layout)?;
            if opts.inputs.is_empty() {
                convert_test_split(cfg, &layout, &den)?
            } else {
                convert_files(cfg, &layout, &den, &opts.inputs)?
            }
        }
        Command::Evaluate => evaluate_cmd(cfg, &layout)?,
        Command::Ablate => {
            let den = load_trained(cfg, &layout)?;
            ablate_with(cfg, &layout, &den)?
        }
    };
    let record = CommandRecord {
        started_unix: started,
        finished_unix: now_unix(),
        artifacts: artifacts.clone(),
    };
    RunManifest::record(&layout, cfg, command.name(), record)?;
    Ok(artifacts)
}

// ---------------------------------------------------------------- data

pub fn gen_data(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<String>> {
    let geometry = cfg.geometry();
    let data = gen_dataset(
        cfg.n_paired,
        cfg.n_unpaired,
        geometry,
        cfg.derived_seed(streams::DATA),
    )?;
    let test = gen_test_split(cfg.n_test, geometry, cfg.derived_seed(streams::TEST))?;
    let raw_scale = data.global_scale();
    let scale = if raw_scale > 0.0 { raw_scale } else { 1.0 };
    let factor = 1.0 / scale;

    // Stale files from an earlier run must not survive.
    let dir = layout.path(Layout::DATA_DIR);
    if dir.exists() {
        fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    let paired_entries = |prefix: &str, items: &[PairedItem]| -> Result<Vec<DataEntry>> {
        items
            .iter()
            .enumerate()
            .map(|(i, p)| {
                Ok(DataEntry {
                    spec: p.spec.clone(),
                    a: Some(store_sino(
                        layout,
                        format!("data/{prefix}/{i:04}_a.sino"),
                        &p.sino_a.scaled(factor),
                    )?),
                    b: store_sino(
                        layout,
                        format!("data/{prefix}/{i:04}_b.sino"),
                        &p.sino_b.scaled(factor),
                    )?,
                })
            })
            .collect()
    };
    let paired = paired_entries("paired", &data.paired)?;
    let test = paired_entries("test", &test)?;
    let unpaired = data
        .unpaired_b
        .iter()
        .enumerate()
        .map(|(i, u)| {
            Ok(DataEntry {
                spec: u.spec.clone(),
                a: None,
                b: store_sino(
                    layout,
                    format!("data/unpaired/{i:04}_b.sino"),
                    &u.sino_b.scaled(factor),
                )?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DataManifest {
        format: DATA_FORMAT,
        geometry,
        seed: cfg.seed,
        global_scale: scale,
        n_paired: cfg.n_paired,
        n_unpaired: cfg.n_unpaired,
        n_test: cfg.n_test,
        paired,
        unpaired,
        test,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_atomic(&layout.path(Layout::DATA_MANIFEST), text.as_bytes())?;
    let mut artifacts = vec![Layout::DATA_MANIFEST.to_string()];
    artifacts.extend(manifest.files().map(|f| f.path.clone()));
    Ok(artifacts)
}

// ---------------------------------------------------------------- training

enum Stage {
    Bridge,
    Refiner,
}

struct StagePaths {
    ckpt: &'static str,
    opt: &'static str,
    loss: &'static str,
}

impl Stage {
    fn paths(&self) -> StagePaths {
        match self {
            Stage::Bridge => StagePaths {
                ckpt: Layout::BRIDGE_CKPT,
                opt: Layout::BRIDGE_OPT,
                loss: Layout::BRIDGE_LOSS,
            },
            Stage::Refiner => StagePaths {
                ckpt: Layout::REFINER_CKPT,
                opt: Layout::REFINER_OPT,
                loss: Layout::REFINER_LOSS,
            },
        }
    }
}

fn schedule_hash(stage: &Stage, cfg: &ExperimentConfig) -> Result<u64> {
    Ok(match stage {
        Stage::Bridge => cfg.bridge_schedule().fingerprint(),
        Stage::Refiner => cfg.refine_schedule()?.fingerprint(),
    })
}

fn loss_csv(trace: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        let _ = writeln!(s, "{},{l:e}", i + 1);
    }
    s
}

fn read_loss_csv(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .skip(1)
        .map(|line| {
            let v = line.split(',').nth(1).context("malformed loss trace")?;
            Ok(v.parse::<f64>()?)
        })
        .collect()
}

/// Loads a checkpoint and checks it against the config.
fn load_stage_model(
    stage: &Stage,
    cfg: &ExperimentConfig,
    layout: &Layout,
) -> Result<DenoiserModel> {
    let path = layout.path(stage.paths().ckpt);
    let ckpt =
        load_checkpoint(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let expected_arch = match stage {
        Stage::Bridge => cfg.bridge_arch(),
        Stage::Refiner => cfg.refiner_arch(),
    };
    if ckpt.model.architecture() != &expected_arch {
        bail!(
            "checkpoint {} has architecture `{}`, config expects `{}`",
            path.display(),
            ckpt.model.architecture(),
            expected_arch
        );
    }
    if ckpt.schedule_hash != schedule_hash(stage, cfg)? {
        bail!(
            "checkpoint {} was trained for a different schedule",
            path.display()
        );
    }
    Ok(ckpt.model)
}

struct Progress {
    model: DenoiserModel,
    opt: AdamW,
    trace: Vec<f64>,
}

fn resume_or_init(
    stage: &Stage,
    cfg: &ExperimentConfig,
    layout: &Layout,
    resume: bool,
    fresh: impl FnOnce() -> Result<DenoiserModel>,
    lr_cfg: pjdm_core::nn::AdamWConfig,
) -> Result<Progress> {
    let p = stage.paths();
    if resume && layout.path(p.ckpt).exists() && layout.path(p.opt).exists() {
        let model = load_stage_model(stage, cfg, layout)?;
        let mut opt = load_optimizer(&layout.path(p.opt))?;
        if opt.m.len() != model.params().len() {
            bail!("optimizer state does not match the checkpoint");
        }
        opt.config = lr_cfg;
        let mut trace = read_loss_csv(&layout.path(p.loss))?;
        let done = opt.step as usize;
        if trace.len() < done {
            bail!(
                "loss trace has {} rows but the optimizer is at step {done}",
                trace.len()
            );
        }
        trace.truncate(done);
        return Ok(Progress { model, opt, trace });
    }
    let model = fresh()?;
    let opt = AdamW::new(lr_cfg, model.params().len());
    Ok(Progress {
        model,
        opt,
        trace: Vec::new(),
    })
}

fn save_progress(
    stage: &Stage,
    cfg: &ExperimentConfig,
    layout: &Layout,
    p: &Progress,
) -> Result<()> {
    let paths = stage.paths();
    let hash = schedule_hash(stage, cfg)?;
    let ckpt = layout.path(paths.ckpt);
    if let Some(dir) = ckpt.parent() {
        fs::create_dir_all(dir)?;
    }
    // Write to temporaries, then rename, so an interrupted save keeps the
    // previous consistent triple.
    let tmp_ckpt = layout.path(&format!("{}.tmp", paths.ckpt));
    let tmp_opt = layout.path(&format!("{}.tmp", paths.opt));
    save_checkpoint(&tmp_ckpt, &p.model, hash)?;
    save_optimizer(&tmp_opt, &p.opt)?;
    write_atomic(&layout.path(paths.loss), loss_csv(&p.trace).as_bytes())?;
    fs::rename(&tmp_ckpt, &ckpt)?;
    fs::rename(&tmp_opt, layout.path(paths.opt))?;
    Ok(())
}

fn train_stage(
    stage: Stage,
    cfg: &ExperimentConfig,
    layout: &Layout,
    mut progress: Progress,
    total_steps: usize,
    mut chunk: impl FnMut(&mut DenoiserModel, &mut AdamW, usize, usize) -> pjdm_core::Result<Vec<f64>>,
) -> Result<Vec<String>> {
    let mut step = progress.trace.len();
    if step == 0 {
        save_progress(&stage, cfg, layout, &progress)?;
    }
    while step < total_steps {
        let end = (step + cfg.checkpoint_every).min(total_steps);
        match chunk(&mut progress.model, &mut progress.opt, step, end) {
            Ok(losses) => progress.trace.extend(losses),
            Err(e) => {
                // The last saved checkpoint stays in place.
                return Err(anyhow::Error::new(e).context(format!(
                    "training aborted; last good checkpoint is {} at step {step}",
                    layout.path(stage.paths().ckpt).display()
                )));
            }
        }
        step = end;
        save_progress(&stage, cfg, layout, &progress)?;
    }
    let p = stage.paths();
    let plot_path = match stage {
        Stage::Bridge => "models/bridge_loss.svg",
        Stage::Refiner => "models/refiner_loss.svg",
    };
    let title = match stage {
        Stage::Bridge => "bridge training loss",
        Stage::Refiner => "refiner training loss",
    };
    let smoothed = moving_average(&progress.trace, 25);
    let svg = line_plot(
        title,
        "step",
        "loss",
        &[
            ("batch loss", &progress.trace),
            ("moving average", &smoothed),
        ],
    );
    write_atomic(&layout.path(plot_path), svg.as_bytes())?;
    Ok(vec![
        p.ckpt.into(),
        p.opt.into(),
        p.loss.into(),
        plot_path.into(),
    ])
}

fn moving_average(v: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(v.len());
    let mut acc = 0.0;
    for i in 0..v.len() {
        acc += v[i];
        if i >= window {
            acc -= v[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

fn train_bridge_cmd(cfg: &ExperimentConfig, layout: &Layout, resume: bool) -> Result<Vec<String>> {
    let data = load_data(layout, cfg.geometry())?;
    if data.paired.is_empty() {
        bail!("bridge training needs paired data (n_paired = 0)");
    }
    // Each pair is (x_0, x_T) = (tracer B, tracer A).
    let pairs: Vec<Pair<'_>> = data
        .paired
        .iter()
        .map(|(a, b)| (b.values(), a.values()))
        .collect();
    let tc = cfg.bridge_train();
    let sched = cfg.bridge_schedule();
    let shape = cfg.shape();
    let fresh = || {
        let precond = match cfg.bridge_preconditioning {
            PrecondName::Bridge => Preconditioning::from_pairs(pairs.iter().copied())?,
            PrecondName::Identity => Preconditioning::Identity,
        };
        Ok(DenoiserModel::new(
            cfg.bridge_arch(),
            precond,
            cfg.derived_seed(streams::BRIDGE_INIT),
        )?)
    };
    let progress = resume_or_init(&Stage::Bridge, cfg, layout, resume, fresh, tc.adamw())?;
    train_stage(
        Stage::Bridge,
        cfg,
        layout,
        progress,
        tc.steps,
        |model, opt, start, end| {
            let chunk_cfg = pjdm_core::nn::TrainConfig {
                steps: end,
                ..tc.clone()
            };
            train_bridge(model, opt, &pairs, shape, &chunk_cfg, &sched, start)
        },
    )
}

fn train_refiner_cmd(cfg: &ExperimentConfig, layout: &Layout, resume: bool) -> Result<Vec<String>> {
    let data = load_data(layout, cfg.geometry())?;
    if data.unpaired_b.is_empty() {
        bail!("refiner training needs unpaired tracer-B data (n_unpaired = 0)");
    }
    let samples: Vec<&[f64]> = data.unpaired_b.iter().map(|s| s.values()).collect();
    let tc = cfg.refiner_train();
    let sched = cfg.refine_schedule()?;
    let dp = cfg.degrade_params();
    let shape = cfg.shape();
    let fresh = || {
        Ok(DenoiserModel::new(
            cfg.refiner_arch(),
            Preconditioning::Identity,
            cfg.derived_seed(streams::REFINER_INIT),
        )?)
    };
    let progress = resume_or_init(&Stage::Refiner, cfg, layout, resume, fresh, tc.adamw())?;
    train_stage(
        Stage::Refiner,
        cfg,
        layout,
        progress,
        tc.steps,
        |model, opt, start, end| {
            let chunk_cfg = pjdm_core::nn::TrainConfig {
                steps: end,
                ..tc.clone()
            };
            train_refiner(model, opt, &samples, shape, &dp, &chunk_cfg, &sched, start)
        },
    )
}

// ---------------------------------------------------------------- conversion

pub fn load_trained(cfg: &ExperimentConfig, layout: &Layout) -> Result<Trained> {
    Ok(Trained {
        bridge: load_stage_model(&Stage::Bridge, cfg, layout)?,
        refiner: load_stage_model(&Stage::Refiner, cfg, layout)?,
    })
}

fn test_name(i: usize) -> String {
    format!("test_{i:04}")
}

fn check_shape(cfg: &ExperimentConfig, s: &Sinogram, what: &str) -> Result<()> {
    if s.shape() != cfg.shape() {
        bail!(
            "{what} has shape {:?}, the config geometry is {:?}",
            s.shape(),
            cfg.shape()
        );
    }
    Ok(())
}

fn convert_items(
    cfg: &ExperimentConfig,
    layout: &Layout,
    den: &dyn Denoisers,
    items: &[(String, Sinogram)],
) -> Result<Vec<String>> {
    let mut artifacts = Vec::new();
    for (i, (name, input)) in items.iter().enumerate() {
        check_shape(cfg, input, name)?;
        let dump = cfg
            .debug_dumps
            .then(|| layout.path(&format!("{}/debug/{name}", Layout::CONVERT_DIR)));
        let out = convert_one(den, i, input, cfg, dump.as_deref())?;
        for (kind, sino) in [("coarse", &out.coarse), ("refined", &out.refined)] {
            let rel = format!("{}/{kind}/{name}.sino", Layout::CONVERT_DIR);
            write_sino_file(&layout.path(&rel), sino)?;
            artifacts.push(rel);
        }
    }
    Ok(artifacts)
}

/// Converts the held-out split with the given denoisers.
pub fn convert_test_split(
    cfg: &ExperimentConfig,
    layout: &Layout,
    den: &dyn Denoisers,
) -> Result<Vec<String>> {
    let data = load_data(layout, cfg.geometry())?;
    let items: Vec<(String, Sinogram)> = data
        .test
        .into_iter()
        .enumerate()
        .map(|(i, (a, _))| (test_name(i), a))
        .collect();
    convert_items(cfg, layout, den, &items)
}

fn convert_files(
    cfg: &ExperimentConfig,
    layout: &Layout,
    den: &dyn Denoisers,
    inputs: &[std::path::PathBuf],
) -> Result<Vec<String>> {
    let items = inputs
        .iter()
        .map(|p| {
            let name = p
                .file_stem()
                .and_then(|s| s.to_str())
                .context("input file needs a name")?
                .to_string();
            Ok((name, read_sino_file(p)?))
        })
        .collect::<Result<Vec<_>>>()?;
    convert_items(cfg, layout, den, &items)
}

// ---------------------------------------------------------------- evaluation

/// Metrics of `outputs` against `refs`, both sinogram and (optionally) FBP.
pub fn report(
    cfg: &ExperimentConfig,
    outputs: &[Sinogram],
    refs: &[Sinogram],
    names: &[String],
) -> Result<MetricsReport> {
    let metrics: MetricsConfig = cfg.metrics();
    let image = cfg.eval_image_domain.then_some(cfg.image_size);
    Ok(evaluate(outputs, refs, names, &metrics, image)?)
}

/// Segment through the centres of the tracer-B regions, extended by half
/// their separation on both sides, in pixel coordinates.
pub fn striatum_line(spec: &PhantomSpec, size: usize, samples: usize) -> Result<ProfileLine> {
    let centers: Vec<[f64; 2]> = spec
        .tracer_b_regions
        .iter()
        .map(|&r| spec.ellipses[r].center)
        .collect();
    let (p, q) = match centers.as_slice() {
        [] => bail!("phantom has no tracer-B regions"),
        [c] => ([c[0] - 0.15, c[1]], [c[0] + 0.15, c[1]]),
        [c0, .., c1] => (*c0, *c1),
    };
    let (dx, dy) = (q[0] - p[0], q[1] - p[1]);
    let to_px = |u: f64| (u * size as f64 - 0.5).clamp(0.0, (size - 1) as f64);
    Ok(ProfileLine {
        start: (to_px(p[0] - 0.5 * dx), to_px(p[1] - 0.5 * dy)),
        end: (to_px(q[0] + 0.5 * dx), to_px(q[1] + 0.5 * dy)),
        samples,
    })
}

fn evaluate_cmd(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<String>> {
    let data = load_data(layout, cfg.geometry())?;
    let names: Vec<String> = (0..data.test.len()).map(test_name).collect();
    let refs: Vec<Sinogram> = data.test.iter().map(|(_, b)| b.clone()).collect();
    let load_variant = |kind: &str| -> Result<Vec<Sinogram>> {
        names
            .iter()
            .map(|n| {
                let path = layout.path(&format!("{}/{kind}/{n}.sino", Layout::CONVERT_DIR));
                let s =
                    read_sino_file(&path).context("missing converted output; run convert first")?;
                check_shape(cfg, &s, n)?;
                Ok(s)
            })
            .collect()
    };
    let coarse = load_variant("coarse")?;
    let refined = load_variant("refined")?;
    let mut artifacts = Vec::new();
    let mut summary = format!(
        "# psnr_convention={}\nvariant,domain,psnr_db,ssim,nrmse\n",
        cfg.psnr_convention.name()
    );
    for (kind, outs) in [("coarse", &coarse), ("refined", &refined)] {
        let rep = report(cfg, outs, &refs, &names)?;
        let rel = format!("{}/metrics_{kind}.csv", Layout::EVAL_DIR);
        write_atomic(&layout.path(&rel), rep.to_csv().as_bytes())?;
        artifacts.push(rel);
        for m in &rep.means {
            let _ = writeln!(
                summary,
                "{kind},{},{:.6},{:.6},{:.6}",
                m.domain.name(),
                m.psnr_db,
                m.ssim,
                m.nrmse
            );
        }
    }
    let rel = format!("{}/summary.csv", Layout::EVAL_DIR);
    write_atomic(&layout.path(&rel), summary.as_bytes())?;
    artifacts.push(rel);

    artifacts.extend(write_profiles(
        cfg, layout, &data, &names, &coarse, &refined,
    )?);
    artifacts.extend(write_heat_maps(
        cfg, layout, &names, &refs, &coarse, &refined,
    )?);
    Ok(artifacts)
}

fn write_profiles(
    cfg: &ExperimentConfig,
    layout: &Layout,
    data: &LoadedData,
    names: &[String],
    coarse: &[Sinogram],
    refined: &[Sinogram],
) -> Result<Vec<String>> {
    let size = cfg.image_size;
    let mut csv = String::from("item,variant,sample,value\n");
    let mut artifacts = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let line = striatum_line(&data.manifest.test[i].spec, size, cfg.profile_samples)?;
        let (a, b) = &data.test[i];
        let variants = [
            ("tracer_a", a),
            ("reference", b),
            ("coarse", &coarse[i]),
            ("refined", &refined[i]),
        ];
        let mut profiles = Vec::new();
        for (variant, sino) in variants {
            let p = profile_line(&fbp(sino, size)?, &line)?;
            for (k, v) in p.iter().enumerate() {
                let _ = writeln!(csv, "{name},{variant},{k},{v:.6}");
            }
            profiles.push((variant, p));
        }
        if i < cfg.plot_items {
            let series: Vec<(&str, &[f64])> =
                profiles.iter().map(|(n, p)| (*n, p.as_slice())).collect();
            let svg = line_plot(
                &format!("striatum profile, {name}"),
                "sample",
                "FBP intensity",
                &series,
            );
            let rel = format!("{}/plots/profile_{name}.svg", Layout::EVAL_DIR);
            write_atomic(&layout.path(&rel), svg.as_bytes())?;
            artifacts.push(rel);
        }
    }
    let rel = format!("{}/profiles.csv", Layout::EVAL_DIR);
    write_atomic(&layout.path(&rel), csv.as_bytes())?;
    artifacts.insert(0, rel);
    Ok(artifacts)
}

fn write_heat_maps(
    cfg: &ExperimentConfig,
    layout: &Layout,
    names: &[String],
    refs: &[Sinogram],
    coarse: &[Sinogram],
    refined: &[Sinogram],
) -> Result<Vec<String>> {
    let mut artifacts = Vec::new();
    for (i, name) in names.iter().enumerate().take(cfg.plot_items) {
        let (r, c) = cfg.shape();
        let panels = [
            ("reference", r, c, refs[i].values()),
            ("coarse", r, c, coarse[i].values()),
            ("refined", r, c, refined[i].values()),
        ];
        let svg = heat_map(&format!("sinograms, {name}"), &panels);
        let rel = format!("{}/plots/sinogram_{name}.svg", Layout::EVAL_DIR);
        write_atomic(&layout.path(&rel), svg.as_bytes())?;
        artifacts.push(rel);
    }
    Ok(artifacts)
}

// ---------------------------------------------------------------- ablation

pub const ABLATION_VARIANTS: [&str; 3] = ["ce_only", "pr_only", "ce_pr"];

/// Means per ablation variant, in [`ABLATION_VARIANTS`] order.
pub struct Ablation {
    pub reports: Vec<MetricsReport>,
}

impl Ablation {
    pub fn mean(&self, variant: usize, domain: Domain) -> &pjdm_core::metrics::MetricsRow {
        self.reports[variant]
            .mean(domain)
            .expect("domain evaluated")
    }

    pub fn to_csv(&self, cfg: &ExperimentConfig) -> String {
        let mut s = format!(
            "# psnr_convention={}\nvariant,psnr_db,ssim,nrmse",
            cfg.psnr_convention.name()
        );
        if cfg.eval_image_domain {
            s.push_str(",image_psnr_db,image_ssim,image_nrmse");
        }
        s.push('\n');
        for (k, name) in ABLATION_VARIANTS.iter().enumerate() {
            let m = self.mean(k, Domain::Sinogram);
            let _ = write!(s, "{name},{:.6},{:.6},{:.6}", m.psnr_db, m.ssim, m.nrmse);
            if cfg.eval_image_domain {
                let m = self.mean(k, Domain::Image);
                let _ = write!(s, ",{:.6},{:.6},{:.6}", m.psnr_db, m.ssim, m.nrmse);
            }
            s.push('\n');
        }
        s
    }
}

/// Evaluates CE-only, PR-only (tracer A fed straight to the refiner) and
/// CE+PR on the held-out split.
pub fn ablation(cfg: &ExperimentConfig, layout: &Layout, den: &dyn Denoisers) -> Result<Ablation> {
    let data = load_data(layout, cfg.geometry())?;
    let names: Vec<String> = (0..data.test.len()).map(test_name).collect();
    let refs: Vec<Sinogram> = data.test.iter().map(|(_, b)| b.clone()).collect();
    let (mut ce, mut pr, mut cepr) = (Vec::new(), Vec::new(), Vec::new());
    for (i, (a, _)) in data.test.iter().enumerate() {
        let coarse = coarse_one(den, i, a, cfg, None)?;
        pr.push(refine_one(den, i, a, cfg, None)?);
        cepr.push(refine_one(den, i, &coarse, cfg, None)?);
        ce.push(coarse);
    }
    let reports = [ce, pr, cepr]
        .iter()
        .map(|outs| report(cfg, outs, &refs, &names))
        .collect::<Result<_>>()?;
    Ok(Ablation { reports })
}

pub fn ablate_with(
    cfg: &ExperimentConfig,
    layout: &Layout,
    den: &dyn Denoisers,
) -> Result<Vec<String>> {
    let ab = ablation(cfg, layout, den)?;
    let rel = format!("{}/ablation.csv", Layout::ABLATE_DIR);
    write_atomic(&layout.path(&rel), ab.to_csv(cfg).as_bytes())?;
    let mut items = String::new();
    for (k, name) in ABLATION_VARIANTS.iter().enumerate() {
        let _ = writeln!(items, "# variant={name}");
        items.push_str(&ab.reports[k].to_csv());
    }
    let rel_items = format!("{}/ablation_items.csv", Layout::ABLATE_DIR);
    write_atomic(&layout.path(&rel_items), items.as_bytes())?;
    Ok(vec![rel, rel_items])
}

/// True if `err` (or anything it wraps) is a numerical failure.
pub fn is_numerical(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<CoreError>()
            .is_some_and(CoreError::is_numerical)
    })
}

/// Data manifest summary for callers that only need the counts.
pub fn data_counts(layout: &Layout) -> Result<(usize, usize, usize)> {
    let m = load_manifest(layout)?;
    Ok((m.paired.len(), m.unpaired.len(), m.test.len()))
}
