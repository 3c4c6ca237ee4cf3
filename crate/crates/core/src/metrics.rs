//! Image-quality metrics on sinograms and reconstructions: PSNR, global
//! SSIM, range-normalised RMSE and bilinear profile lines.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{fbp, ImageGrid, Sinogram};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsnrConvention {
    /// `20 log10(max(I_ref) / RMSE)`.
    StandardRmse,
    /// `20 log10(max(I) / ||I - I_ref||_2)`, without the `1/sqrt(n)`.
    LiteralEq14,
}

impl PsnrConvention {
    pub fn name(self) -> &'static str {
        match self {
            PsnrConvention::StandardRmse => "standard_rmse",
            PsnrConvention::LiteralEq14 => "literal_eq14",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub psnr_convention: PsnrConvention,
    pub k1: f64,
    pub k2: f64,
    /// SSIM dynamic range `L`; `None` uses each reference's `max - min`.
    pub dynamic_range: Option<f64>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            psnr_convention: PsnrConvention::StandardRmse,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: None,
        }
    }
}

fn check_pair(i: &[f64], r: &[f64]) -> Result<()> {
    if i.len() != r.len() {
        return Err(Error::shape(r.len(), i.len()));
    }
    if i.is_empty() {
        return Err(Error::invalid("metrics need at least one value"));
    }
    Ok(())
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn min(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

/// PSNR in dB; `+inf` when the inputs are identical.
pub fn psnr(i: &[f64], r: &[f64], convention: PsnrConvention) -> Result<f64> {
    check_pair(i, r)?;
    let sq: f64 = i.iter().zip(r).map(|(a, b)| (a - b).powi(2)).sum();
    let (peak, err) = match convention {
        PsnrConvention::StandardRmse => (max(r), (sq / i.len() as f64).sqrt()),
        PsnrConvention::LiteralEq14 => (max(i), sq.sqrt()),
    };
    if !(peak > 0.0) {
        return Err(Error::invalid(format!(
            "PSNR peak must be positive, got {peak}"
        )));
    }
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (peak / err).log10())
}

/// Single-window SSIM over global statistics (population moments).
pub fn ssim(i: &[f64], r: &[f64], cfg: &MetricsConfig) -> Result<f64> {
    check_pair(i, r)?;
    if i.len() < 2 {
        return Err(Error::invalid("SSIM needs at least two values"));
    }
    let n = i.len() as f64;
    let l = cfg.dynamic_range.unwrap_or_else(|| max(r) - min(r));
    let l = if l > 0.0 { l } else { 1.0 };
    let (c1, c2) = ((cfg.k1 * l).powi(2), (cfg.k2 * l).powi(2));
    let (mi, mr) = (i.iter().sum::<f64>() / n, r.iter().sum::<f64>() / n);
    let (mut vi, mut vr, mut cov) = (0.0, 0.0, 0.0);
    for (a, b) in i.iter().zip(r) {
        let (da, db) = (a - mi, b - mr);
        vi += da * da;
        vr += db * db;
        cov += da * db;
    }
    let (vi, vr, cov) = (vi / n, vr / n, cov / n);
    Ok((2.0 * mi * mr + c1) * (2.0 * cov + c2) / ((mi * mi + mr * mr + c1) * (vi + vr + c2)))
}

/// RMSE divided by the reference's range.
pub fn nrmse(i: &[f64], r: &[f64]) -> Result<f64> {
    check_pair(i, r)?;
    let range = max(r) - min(r);
    if !(range > 0.0) {
        return Err(Error::invalid("NRMSE undefined for a constant reference"));
    }
    let mse = i.iter().zip(r).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / i.len() as f64;
    Ok(mse.sqrt() / range)
}

/// Segment in pixel coordinates (`x` = column, `y` = row, pixel centres at
/// integers) sampled at `samples` equispaced points including both ends.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileLine {
    pub start: (f64, f64),
    pub end: (f64, f64),
    pub samples: usize,
}

pub fn profile_line(image: &ImageGrid, line: &ProfileLine) -> Result<Vec<f64>> {
    if line.samples < 2 {
        return Err(Error::invalid("a profile line needs at least two samples"));
    }
    let (w, h) = ((image.width() - 1) as f64, (image.height() - 1) as f64);
    for (x, y) in [line.start, line.end] {
        if !(0.0..=w).contains(&x) || !(0.0..=h).contains(&y) {
            return Err(Error::invalid(format!(
                "profile endpoint ({x}, {y}) outside the grid"
            )));
        }
    }
    let last = (line.samples - 1) as f64;
    Ok((0..line.samples)
        .map(|k| {
            let f = k as f64 / last;
            let x = line.start.0 + f * (line.end.0 - line.start.0);
            let y = line.start.1 + f * (line.end.1 - line.start.1);
            image.bilinear(x, y)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Sinogram,
    Image,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Sinogram => "sinogram",
            Domain::Image => "image",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub item: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub nrmse: f64,
    pub domain: Domain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub convention: PsnrConvention,
    /// Per-item rows, sinogram domain first.
    pub rows: Vec<MetricsRow>,
    /// One `mean` row per evaluated domain.
    pub means: Vec<MetricsRow>,
}

fn fmt_value(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:.6}")
    }
}

impl MetricsReport {
    pub fn mean(&self, domain: Domain) -> Option<&MetricsRow> {
        self.means.iter().find(|m| m.domain == domain)
    }

    pub fn infinite_psnr_count(&self, domain: Domain) -> usize {
        self.rows
            .iter()
            .filter(|r| r.domain == domain && r.psnr_db == f64::INFINITY)
            .count()
    }

    /// `# psnr_convention=...` line, then `item,psnr_db,ssim,nrmse,domain`
    /// rows, then the `mean` rows.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# psnr_convention={}\nitem,psnr_db,ssim,nrmse,domain\n",
            self.convention.name()
        );
        for r in self.rows.iter().chain(&self.means) {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.item,
                fmt_value(r.psnr_db),
                fmt_value(r.ssim),
                fmt_value(r.nrmse),
                r.domain.name()
            );
        }
        out
    }
}

fn row(
    item: String,
    out: &[f64],
    reference: &[f64],
    cfg: &MetricsConfig,
    domain: Domain,
) -> Result<MetricsRow> {
    Ok(MetricsRow {
        item,
        psnr_db: psnr(out, reference, cfg.psnr_convention)?,
        ssim: ssim(out, reference, cfg)?,
        nrmse: nrmse(out, reference)?,
        domain,
    })
}

fn mean_row(rows: &[MetricsRow], domain: Domain) -> MetricsRow {
    let sel: Vec<&MetricsRow> = rows.iter().filter(|r| r.domain == domain).collect();
    let n = sel.len() as f64;
    MetricsRow {
        item: "mean".into(),
        psnr_db: sel.iter().map(|r| r.psnr_db).sum::<f64>() / n,
        ssim: sel.iter().map(|r| r.ssim).sum::<f64>() / n,
        nrmse: sel.iter().map(|r| r.nrmse).sum::<f64>() / n,
        domain,
    }
}

/// Per-item and mean metrics of `outputs` against `refs`. With
/// `image_size`, FBP reconstructions of both are also compared.
pub fn evaluate(
    outputs: &[Sinogram],
    refs: &[Sinogram],
    names: &[String],
    cfg: &MetricsConfig,
    image_size: Option<usize>,
) -> Result<MetricsReport> {
    if outputs.len() != refs.len() || names.len() != refs.len() {
        return Err(Error::shape(refs.len(), outputs.len()));
    }
    if outputs.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let mut rows = Vec::new();
    for ((o, r), name) in outputs.iter().zip(refs).zip(names) {
        if o.shape() != r.shape() {
            return Err(Error::shape(
                format!("{:?}", r.shape()),
                format!("{:?}", o.shape()),
            ));
        }
        rows.push(row(
            name.clone(),
            o.values(),
            r.values(),
            cfg,
            Domain::Sinogram,
        )?);
    }
    let mut means = vec![mean_row(&rows, Domain::Sinogram)];
    if let Some(size) = image_size {
        for ((o, r), name) in outputs.iter().zip(refs).zip(names) {
            let (io, ir) = (fbp(o, size)?, fbp(r, size)?);
            rows.push(row(
                name.clone(),
                io.values(),
                ir.values(),
                cfg,
                Domain::Image,
            )?);
        }
        means.push(mean_row(&rows, Domain::Image));
    }
    Ok(MetricsReport {
        convention: cfg.psnr_convention,
        rows,
        means,
    })
}
