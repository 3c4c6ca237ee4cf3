//! Synthetic paired phantoms and their parallel-beam sinograms.
//!
//! Tracer A sees every ellipse at its base intensity. Tracer B multiplies the
//! designated "striatum" ellipses by a gain and damps everything else, which
//! gives a region-dependent uptake change that is not a pointwise function of
//! tracer-A intensity.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, subseed, SimRng};

/// Ray sampling step along each projection line, in pixels.
const RAY_STEP: f64 = 0.5;

const STREAM_PAIRED: u64 = 0x5041_4952;
const STREAM_UNPAIRED: u64 = 0x554e_5041;
const STREAM_HELD_OUT: u64 = 0x4845_4c44;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl ImageGrid {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width * height != values.len() {
            return Err(Error::shape(
                format!("{width}x{height} = {} values", width * height),
                values.len(),
            ));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!(
                "image value {v} is not finite and nonnegative"
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Bilinear sample with pixel centres at integer `(col, row)`
    /// coordinates. Pixels outside the grid count as zero.
    pub fn bilinear(&self, x: f64, y: f64) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (c0, r0) = (x0 as i64, y0 as i64);
        let px = |c: i64, r: i64| -> f64 {
            if c < 0 || r < 0 || c >= self.width as i64 || r >= self.height as i64 {
                0.0
            } else {
                self.values[r as usize * self.width + c as usize]
            }
        };
        (1.0 - fy) * ((1.0 - fx) * px(c0, r0) + fx * px(c0 + 1, r0))
            + fy * ((1.0 - fx) * px(c0, r0 + 1) + fx * px(c0 + 1, r0 + 1))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    n_angles: usize,
    n_bins: usize,
    values: Vec<f64>,
}

impl Sinogram {
    pub fn new(n_angles: usize, n_bins: usize, values: Vec<f64>) -> Result<Self> {
        if n_angles * n_bins != values.len() {
            return Err(Error::shape(
                format!("{n_angles}x{n_bins} = {} values", n_angles * n_bins),
                values.len(),
            ));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!(
                "sinogram value {v} is not finite and nonnegative"
            )));
        }
        Ok(Self {
            n_angles,
            n_bins,
            values,
        })
    }

    pub fn zeros(n_angles: usize, n_bins: usize) -> Self {
        Self {
            n_angles,
            n_bins,
            values: vec![0.0; n_angles * n_bins],
        }
    }

    /// Builds a sinogram from a diffusion state, clamping negatives to zero.
    pub fn from_state_clamped(n_angles: usize, n_bins: usize, state: &[f64]) -> Result<Self> {
        if let Some(step) = state.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                step: 0,
                detail: format!("state entry {step} is not finite"),
            });
        }
        Self::new(n_angles, n_bins, state.iter().map(|v| v.max(0.0)).collect())
    }

    pub fn n_angles(&self) -> usize {
        self.n_angles
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_angles, self.n_bins)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn row(&self, angle: usize) -> &[f64] {
        &self.values[angle * self.n_bins..(angle + 1) * self.n_bins]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            n_angles: self.n_angles,
            n_bins: self.n_bins,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    /// View as an image for the metrics (angles are rows).
    pub fn as_image(&self) -> ImageGrid {
        ImageGrid {
            width: self.n_bins,
            height: self.n_angles,
            values: self.values.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    /// Centre in the unit square, `(x, y)` with `y` pointing down the rows.
    pub center: [f64; 2],
    pub semi_axes: [f64; 2],
    pub rotation: f64,
    pub intensity: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.rotation.sin_cos();
        let dx = x - self.center[0];
        let dy = y - self.center[1];
        let u = dx * c + dy * s;
        let w = -dx * s + dy * c;
        (u / self.semi_axes[0]).powi(2) + (w / self.semi_axes[1]).powi(2) <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub ellipses: Vec<Ellipse>,
    pub tracer_b_regions: Vec<usize>,
    pub tracer_b_gain: f64,
    pub background_damp: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.ellipses.iter().enumerate() {
            let finite = e.center.iter().chain(&e.semi_axes).all(|v| v.is_finite())
                && e.rotation.is_finite()
                && e.intensity.is_finite();
            if !finite {
                return Err(Error::invalid(format!(
                    "ellipse {i} has non-finite parameters"
                )));
            }
            if e.semi_axes.iter().any(|a| *a <= 0.0) {
                return Err(Error::invalid(format!(
                    "ellipse {i} is degenerate (semi-axis <= 0)"
                )));
            }
            if e.intensity < 0.0 {
                return Err(Error::invalid(format!(
                    "ellipse {i} has negative intensity"
                )));
            }
        }
        if !(self.tracer_b_gain > 0.0) {
            return Err(Error::invalid("tracer_b_gain must be > 0"));
        }
        if !(self.background_damp > 0.0 && self.background_damp <= 1.0) {
            return Err(Error::invalid("background_damp must be in (0, 1]"));
        }
        if let Some(r) = self
            .tracer_b_regions
            .iter()
            .find(|r| **r >= self.ellipses.len())
        {
            return Err(Error::invalid(format!(
                "tracer-B region index {r} out of range"
            )));
        }
        Ok(())
    }

    fn multiplier(&self, index: usize, variant: Variant) -> f64 {
        match variant {
            Variant::A => 1.0,
            Variant::B if self.tracer_b_regions.contains(&index) => self.tracer_b_gain,
            Variant::B => self.background_damp,
        }
    }

    /// Shared normalisation: an upper bound on any pixel in either variant.
    pub fn shared_scale(&self) -> f64 {
        self.ellipses
            .iter()
            .enumerate()
            .map(|(i, e)| {
                e.intensity
                    * self
                        .multiplier(i, Variant::A)
                        .max(self.multiplier(i, Variant::B))
            })
            .sum()
    }
}

/// Renders a phantom by point-sampling pixel centres. Both variants are
/// divided by [`PhantomSpec::shared_scale`], so they stay comparable and
/// land in `[0, 1]`.
pub fn make_phantom(
    spec: &PhantomSpec,
    variant: Variant,
    width: usize,
    height: usize,
) -> Result<ImageGrid> {
    spec.validate()?;
    if width == 0 || height == 0 {
        return Err(Error::invalid("phantom grid must be non-empty"));
    }
    let scale = spec.shared_scale();
    let mut values = vec![0.0; width * height];
    if scale > 0.0 {
        for row in 0..height {
            let y = (row as f64 + 0.5) / height as f64;
            for col in 0..width {
                let x = (col as f64 + 0.5) / width as f64;
                let v: f64 = spec
                    .ellipses
                    .iter()
                    .enumerate()
                    .filter(|(_, e)| e.contains(x, y))
                    .map(|(i, e)| e.intensity * spec.multiplier(i, variant))
                    .sum();
                values[row * width + col] = v / scale;
            }
        }
    }
    ImageGrid::new(width, height, values)
}

/// Parallel-beam geometry over the inscribed circle of an image.
#[derive(Clone, Copy, Debug)]
struct BeamGeometry {
    cx: f64,
    cy: f64,
    radius: f64,
    bin_width: f64,
}

impl BeamGeometry {
    fn new(width: usize, height: usize, n_bins: usize) -> Self {
        let radius = width.min(height) as f64 / 2.0;
        Self {
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            radius,
            bin_width: 2.0 * radius / n_bins as f64,
        }
    }

    fn bin_offset(&self, bin: usize) -> f64 {
        -self.radius + (bin as f64 + 0.5) * self.bin_width
    }
}

pub fn projection_angle(k: usize, n_angles: usize) -> f64 {
    k as f64 * PI / n_angles as f64
}

/// Parallel-beam forward projection. Row `k` holds the line integrals at
/// angle `k * pi / n_angles`; the detector offset for a point `(x, y)`
/// relative to the image centre is `x cos(theta) + y sin(theta)`, in pixels.
pub fn radon(image: &ImageGrid, n_angles: usize, n_bins: usize) -> Result<Sinogram> {
    if n_angles == 0 || n_bins == 0 {
        return Err(Error::invalid("radon needs n_angles >= 1 and n_bins >= 1"));
    }
    let geo = BeamGeometry::new(image.width, image.height, n_bins);
    let n_steps = ((2.0 * geo.radius) / RAY_STEP).ceil().max(1.0) as usize;
    let du = 2.0 * geo.radius / n_steps as f64;
    let mut values = vec![0.0; n_angles * n_bins];
    for k in 0..n_angles {
        let (sin_t, cos_t) = projection_angle(k, n_angles).sin_cos();
        for j in 0..n_bins {
            let s = geo.bin_offset(j);
            let mut acc = 0.0;
            for step in 0..n_steps {
                let u = -geo.radius + (step as f64 + 0.5) * du;
                let x = geo.cx + s * cos_t - u * sin_t;
                let y = geo.cy + s * sin_t + u * cos_t;
                acc += image.bilinear(x - 0.5, y - 0.5);
            }
            values[k * n_bins + j] = acc * du;
        }
    }
    Sinogram::new(n_angles, n_bins, values)
}

/// Ram-Lak filtered back-projection onto an `image_size` square grid with
/// the geometry [`radon`] uses. Negative values are clamped.
pub fn fbp(sino: &Sinogram, image_size: usize) -> Result<ImageGrid> {
    if image_size == 0 {
        return Err(Error::invalid("fbp image size must be > 0"));
    }
    let (n_angles, n_bins) = sino.shape();
    let geo = BeamGeometry::new(image_size, image_size, n_bins);
    let tau = geo.bin_width;

    // Spatial-domain ramp kernel, indexed by offset + (n_bins - 1).
    let kernel: Vec<f64> = (0..2 * n_bins - 1)
        .map(|i| {
            let n = i as i64 - (n_bins as i64 - 1);
            if n == 0 {
                1.0 / (4.0 * tau * tau)
            } else if n % 2 == 0 {
                0.0
            } else {
                -1.0 / ((n * n) as f64 * PI * PI * tau * tau)
            }
        })
        .collect();

    let mut filtered = vec![0.0; n_angles * n_bins];
    for k in 0..n_angles {
        let row = sino.row(k);
        for j in 0..n_bins {
            let mut acc = 0.0;
            for (m, p) in row.iter().enumerate() {
                acc += kernel[j + n_bins - 1 - m] * p;
            }
            filtered[k * n_bins + j] = acc * tau;
        }
    }

    let trig: Vec<(f64, f64)> = (0..n_angles)
        .map(|k| projection_angle(k, n_angles).sin_cos())
        .collect();
    let dtheta = PI / n_angles as f64;
    let mut values = vec![0.0; image_size * image_size];
    for row in 0..image_size {
        let y = row as f64 + 0.5 - geo.cy;
        for col in 0..image_size {
            let x = col as f64 + 0.5 - geo.cx;
            let mut acc = 0.0;
            for (k, (sin_t, cos_t)) in trig.iter().enumerate() {
                let s = x * cos_t + y * sin_t;
                let b = (s + geo.radius) / tau - 0.5;
                let b0 = b.floor();
                let f = b - b0;
                let b0 = b0 as i64;
                let q = &filtered[k * n_bins..(k + 1) * n_bins];
                let at = |i: i64| {
                    if i < 0 || i >= n_bins as i64 {
                        0.0
                    } else {
                        q[i as usize]
                    }
                };
                acc += (1.0 - f) * at(b0) + f * at(b0 + 1);
            }
            values[row * image_size + col] = (acc * dtheta).max(0.0);
        }
    }
    ImageGrid::new(image_size, image_size, values)
}

/// Poisson counting noise at a given expected total count.
pub fn add_counting_noise(sino: &Sinogram, dose: f64, seed: u64) -> Result<Sinogram> {
    if !(dose > 0.0) || !dose.is_finite() {
        return Err(Error::invalid("dose must be a positive finite count"));
    }
    let total: f64 = sino.values.iter().sum();
    if total == 0.0 {
        return Ok(sino.clone());
    }
    let scale = dose / total;
    let mut rng = rng_from_seed(seed);
    let mut values = Vec::with_capacity(sino.values.len());
    for &v in &sino.values {
        let lambda = v * scale;
        let counts = if lambda > 0.0 {
            Poisson::new(lambda)
                .map_err(|e| Error::invalid(format!("poisson rate {lambda}: {e}")))?
                .sample(&mut rng)
        } else {
            0.0
        };
        values.push(counts / scale);
    }
    Sinogram::new(sino.n_angles, sino.n_bins, values)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub n_angles: usize,
    pub n_bins: usize,
    pub image_size: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            n_angles: 60,
            n_bins: 64,
            image_size: 64,
        }
    }
}

/// Which random phantom distribution to draw from. The held-out family is
/// a mild distribution shift used for the test split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhantomFamily {
    Train,
    HeldOut,
}

fn uniform(rng: &mut SimRng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Draws a head-like phantom: a brain ellipse, a few cortical hot spots and
/// two "striatum" ellipses that become the tracer-B regions.
pub fn random_phantom_spec(rng: &mut SimRng, family: PhantomFamily) -> PhantomSpec {
    let shift = match family {
        PhantomFamily::Train => 0.0,
        PhantomFamily::HeldOut => 1.0,
    };
    let mut ellipses = Vec::new();
    let cx = 0.5 + uniform(rng, -0.02, 0.02);
    let cy = 0.5 + uniform(rng, -0.02, 0.02);
    ellipses.push(Ellipse {
        center: [cx, cy],
        semi_axes: [
            uniform(rng, 0.30, 0.35) + 0.01 * shift,
            uniform(rng, 0.36, 0.41),
        ],
        rotation: uniform(rng, -0.15, 0.15),
        intensity: uniform(rng, 0.8, 1.0),
    });

    let n_spots = 2 + rng.random_range(0..2usize) + shift as usize;
    for _ in 0..n_spots {
        let angle = uniform(rng, 0.0, 2.0 * PI);
        let r = uniform(rng, 0.18, 0.26);
        ellipses.push(Ellipse {
            center: [cx + r * angle.cos() * 0.85, cy + r * angle.sin()],
            semi_axes: [uniform(rng, 0.035, 0.08), uniform(rng, 0.035, 0.08)],
            rotation: uniform(rng, 0.0, PI),
            intensity: uniform(rng, 0.3, 0.6),
        });
    }

    let sep = uniform(rng, 0.07, 0.10) + 0.01 * shift;
    let dy = uniform(rng, -0.03, 0.03);
    let first = ellipses.len();
    for side in [-1.0, 1.0] {
        ellipses.push(Ellipse {
            center: [cx + side * sep, cy + dy],
            semi_axes: [uniform(rng, 0.035, 0.05), uniform(rng, 0.06, 0.085)],
            rotation: side * uniform(rng, 0.2, 0.4),
            intensity: uniform(rng, 0.3, 0.6),
        });
    }

    PhantomSpec {
        ellipses,
        tracer_b_regions: vec![first, first + 1],
        tracer_b_gain: uniform(rng, 2.8, 3.2),
        background_damp: uniform(rng, 0.38, 0.45),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedItem {
    pub spec: PhantomSpec,
    pub sino_a: Sinogram,
    pub sino_b: Sinogram,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnpairedItem {
    pub spec: PhantomSpec,
    pub sino_b: Sinogram,
}

/// Raw (unnormalised) dataset; see [`Dataset::global_scale`].
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub paired: Vec<PairedItem>,
    pub unpaired_b: Vec<UnpairedItem>,
    pub geometry: Geometry,
    pub master_seed: u64,
}

impl Dataset {
    /// Largest sinogram value over every item; dividing by it puts the
    /// whole dataset in `[0, 1]` with one shared factor.
    pub fn global_scale(&self) -> f64 {
        let paired = self
            .paired
            .iter()
            .flat_map(|p| p.sino_a.values.iter().chain(&p.sino_b.values));
        let unpaired = self.unpaired_b.iter().flat_map(|u| u.sino_b.values.iter());
        paired.chain(unpaired).fold(0.0, |m, v| m.max(*v))
    }

    pub fn scaled(&self, factor: f64) -> Dataset {
        Dataset {
            paired: self
                .paired
                .iter()
                .map(|p| PairedItem {
                    spec: p.spec.clone(),
                    sino_a: p.sino_a.scaled(factor),
                    sino_b: p.sino_b.scaled(factor),
                })
                .collect(),
            unpaired_b: self
                .unpaired_b
                .iter()
                .map(|u| UnpairedItem {
                    spec: u.spec.clone(),
                    sino_b: u.sino_b.scaled(factor),
                })
                .collect(),
            geometry: self.geometry,
            master_seed: self.master_seed,
        }
    }
}

fn paired_item(spec: PhantomSpec, geometry: Geometry) -> Result<PairedItem> {
    let size = geometry.image_size;
    let a = make_phantom(&spec, Variant::A, size, size)?;
    let b = make_phantom(&spec, Variant::B, size, size)?;
    Ok(PairedItem {
        sino_a: radon(&a, geometry.n_angles, geometry.n_bins)?,
        sino_b: radon(&b, geometry.n_angles, geometry.n_bins)?,
        spec,
    })
}

/// Item `i` of each list draws its phantom from `subseed(master_seed, list, i)`,
/// so items do not depend on the list sizes.
pub fn gen_dataset(
    n_paired: usize,
    n_unpaired: usize,
    geometry: Geometry,
    master_seed: u64,
) -> Result<Dataset> {
    let paired = (0..n_paired)
        .map(|i| {
            let mut rng = rng_from_seed(subseed(master_seed, STREAM_PAIRED, i as u64));
            paired_item(
                random_phantom_spec(&mut rng, PhantomFamily::Train),
                geometry,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let unpaired_b = (0..n_unpaired)
        .map(|i| {
            let mut rng = rng_from_seed(subseed(master_seed, STREAM_UNPAIRED, i as u64));
            let spec = random_phantom_spec(&mut rng, PhantomFamily::Train);
            let image = make_phantom(&spec, Variant::B, geometry.image_size, geometry.image_size)?;
            Ok(UnpairedItem {
                sino_b: radon(&image, geometry.n_angles, geometry.n_bins)?,
                spec,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        paired,
        unpaired_b,
        geometry,
        master_seed,
    })
}

/// Held-out paired split drawn from the shifted phantom family.
pub fn gen_test_split(n: usize, geometry: Geometry, master_seed: u64) -> Result<Vec<PairedItem>> {
    (0..n)
        .map(|i| {
            let mut rng = rng_from_seed(subseed(master_seed, STREAM_HELD_OUT, i as u64));
            paired_item(
                random_phantom_spec(&mut rng, PhantomFamily::HeldOut),
                geometry,
            )
        })
        .collect()
}
