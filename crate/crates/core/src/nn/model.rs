use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::adamw::AdamW;
use super::layers::{
    avg_pool2, avg_pool2_backward, conv3x3_backward, conv3x3_forward, silu_backward, silu_forward,
    sinusoidal_embedding, upsample2, upsample2_backward,
};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::schedules::BridgeSchedule;

/// Encoder–decoder shape. `widths` lists the channel count per resolution
/// level; an empty list is a single 3x3 convolution to one output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    /// Sinusoidal time-embedding size (even; 0 disables the time input).
    pub time_dim: usize,
    /// Multiplier on the scalar time input before embedding.
    pub time_scale: f64,
}

impl Architecture {
    /// Three-level network for the bridge (one input channel).
    pub fn bridge_default() -> Self {
        Self {
            in_channels: 1,
            widths: vec![8, 16, 32],
            time_dim: 16,
            time_scale: 100.0,
        }
    }

    /// Three-level network for the refiner (noisy state plus condition).
    pub fn refiner_default() -> Self {
        Self {
            in_channels: 2,
            widths: vec![8, 16, 32],
            time_dim: 16,
            time_scale: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.widths.contains(&0) || !self.time_dim.is_multiple_of(2) {
            return Err(Error::invalid(format!("invalid architecture {self}")));
        }
        if !self.time_scale.is_finite() {
            return Err(Error::invalid("time_scale must be finite"));
        }
        Ok(())
    }

    fn levels(&self) -> usize {
        self.widths.len()
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.levels().saturating_sub(1)
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let widths = if self.widths.is_empty() {
            "-".to_string()
        } else {
            self.widths
                .iter()
                .map(|w| w.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        write!(
            f,
            "unet in={} widths={} tdim={} tscale={:?}",
            self.in_channels, widths, self.time_dim, self.time_scale
        )
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad architecture descriptor {s:?}"));
        let mut parts = s.split_whitespace();
        if parts.next() != Some("unet") {
            return Err(bad());
        }
        let mut field = |name: &str| -> Result<String> {
            let p = parts.next().ok_or_else(bad)?;
            p.strip_prefix(name)
                .and_then(|r| r.strip_prefix('='))
                .map(str::to_string)
                .ok_or_else(bad)
        };
        let in_channels = field("in")?.parse().map_err(|_| bad())?;
        let widths_text = field("widths")?;
        let widths = if widths_text == "-" {
            vec![]
        } else {
            widths_text
                .split(',')
                .map(|w| w.parse().map_err(|_| bad()))
                .collect::<Result<_>>()?
        };
        let time_dim = field("tdim")?.parse().map_err(|_| bad())?;
        let time_scale = field("tscale")?.parse().map_err(|_| bad())?;
        if parts.next().is_some() {
            return Err(bad());
        }
        let arch = Architecture {
            in_channels,
            widths,
            time_dim,
            time_scale,
        };
        arch.validate()?;
        Ok(arch)
    }
}

/// How the bridge x0-predictor wraps the raw network:
/// `D(x, t) = c_skip x + c_out F(c_in x, c_noise)`.
#[derive(Clone, Debug, PartialEq)]
pub enum Preconditioning {
    /// `c_skip = 0`, `c_out = c_in = 1`.
    Identity,
    /// Variance-matching coefficients from the second moments of the data
    /// endpoints: `E[x0^2]`, `E[xT^2]` and `E[x0 xT]`.
    Bridge {
        sigma_data: f64,
        sigma_end: f64,
        cov: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrecondCoeffs {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

impl Preconditioning {
    pub fn coeffs(&self, t: f64, sched: &BridgeSchedule) -> Result<PrecondCoeffs> {
        let (a, b, c) = sched.coeffs(t)?;
        if t <= 0.0 {
            return Err(Error::invalid("preconditioning needs t > 0"));
        }
        let c_noise = t.ln() / 4.0;
        Ok(match *self {
            Preconditioning::Identity => PrecondCoeffs {
                c_skip: 0.0,
                c_out: 1.0,
                c_in: 1.0,
                c_noise,
            },
            Preconditioning::Bridge {
                sigma_data,
                sigma_end,
                cov,
            } => {
                let (s0, st) = (sigma_data * sigma_data, sigma_end * sigma_end);
                let denom = a * a * st + b * b * s0 + 2.0 * a * b * cov + c;
                let c_in = 1.0 / denom.sqrt();
                let c_skip = (b * s0 + a * cov) / denom;
                let c_out = (a * a * (s0 * st - cov * cov) + s0 * c).max(0.0).sqrt() * c_in;
                PrecondCoeffs {
                    c_skip,
                    c_out,
                    c_in,
                    c_noise,
                }
            }
        })
    }

    /// Estimates the bridge coefficients from paired `(x0, xT)` samples.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a [f64], &'a [f64])>) -> Result<Self> {
        let (mut s00, mut stt, mut s0t, mut n) = (0.0, 0.0, 0.0, 0usize);
        for (x0, xt) in pairs {
            for (a, b) in x0.iter().zip(xt) {
                s00 += a * a;
                stt += b * b;
                s0t += a * b;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::invalid(
                "cannot estimate preconditioning from no data",
            ));
        }
        let n = n as f64;
        Ok(Preconditioning::Bridge {
            sigma_data: (s00 / n).sqrt(),
            sigma_end: (stt / n).sqrt(),
            cov: s0t / n,
        })
    }
}

impl fmt::Display for Preconditioning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Preconditioning::Identity => write!(f, "identity"),
            Preconditioning::Bridge {
                sigma_data,
                sigma_end,
                cov,
            } => {
                write!(f, "bridge:{sigma_data:?},{sigma_end:?},{cov:?}")
            }
        }
    }
}

impl FromStr for Preconditioning {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "identity" {
            return Ok(Preconditioning::Identity);
        }
        let bad = || Error::Format(format!("bad preconditioning {s:?}"));
        let nums: Vec<f64> = s
            .strip_prefix("bridge:")
            .ok_or_else(bad)?
            .split(',')
            .map(|v| v.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        match nums[..] {
            [sigma_data, sigma_end, cov] => Ok(Preconditioning::Bridge {
                sigma_data,
                sigma_end,
                cov,
            }),
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvSlot {
    cin: usize,
    cout: usize,
    offset: usize,
}

impl ConvSlot {
    fn weights<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.offset..self.offset + self.cout * self.cin * 9]
    }

    fn bias_range(&self) -> std::ops::Range<usize> {
        let b = self.offset + self.cout * self.cin * 9;
        b..b + self.cout
    }

    fn len(&self) -> usize {
        self.cout * self.cin * 9 + self.cout
    }
}

/// Canonical parameter order: time projection `[c][time_dim]`, stem conv,
/// encoder convs by level, bottleneck conv, decoder convs from the deepest
/// level up, output conv. Each conv stores `[cout][cin][3][3]` weights then
/// `[cout]` biases.
#[derive(Clone, Debug)]
struct Layout {
    time_proj: usize,
    stem: ConvSlot,
    enc: Vec<ConvSlot>,
    mid: Option<ConvSlot>,
    /// Indexed by level (`dec[l]` maps level `l + 1` back to level `l`).
    dec: Vec<ConvSlot>,
    head: Option<ConvSlot>,
    total: usize,
}

impl Layout {
    fn new(arch: &Architecture) -> Self {
        let widths = &arch.widths;
        let first = widths.first().copied().unwrap_or(1);
        let mut offset = first * arch.time_dim;
        let mut slot = |cin: usize, cout: usize| {
            let s = ConvSlot { cin, cout, offset };
            offset += s.len();
            s
        };
        let stem = slot(arch.in_channels, first);
        let (mut enc, mut mid, mut dec, mut head) = (vec![], None, vec![], None);
        if let Some(&deepest) = widths.last() {
            let levels = widths.len();
            for l in 0..levels {
                enc.push(slot(widths[l.saturating_sub(1)], widths[l]));
            }
            mid = Some(slot(deepest, deepest));
            for l in (0..levels - 1).rev() {
                dec.push(slot(widths[l + 1] + widths[l], widths[l]));
            }
            dec.reverse();
            head = Some(slot(widths[0], 1));
        }
        Layout {
            time_proj: 0,
            stem,
            enc,
            mid,
            dec,
            head,
            total: offset,
        }
    }
}

/// Activations recorded by a forward pass, tied to the parameter version
/// they were computed with.
#[derive(Clone, Debug)]
pub struct Tape {
    version: u64,
    hw: (usize, usize),
    emb: Vec<f64>,
    stem_cols: Vec<f64>,
    stem_pre: Vec<f64>,
    enc: Vec<(Vec<f64>, Vec<f64>)>,
    mid: Option<(Vec<f64>, Vec<f64>)>,
    dec: Vec<(Vec<f64>, Vec<f64>)>,
    head_cols: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct DenoiserModel {
    arch: Architecture,
    precond: Preconditioning,
    layout: Layout,
    params: Vec<f64>,
    version: u64,
}

impl PartialEq for DenoiserModel {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.precond == other.precond && self.params == other.params
    }
}

impl DenoiserModel {
    /// Fan-in scaled uniform init with the output conv zeroed, so a fresh
    /// bridge model predicts `c_skip x_t`. Parameters are kept at `f32`
    /// precision so that checkpoints round-trip exactly.
    pub fn new(arch: Architecture, precond: Preconditioning, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let mut rng = rng_from_seed(seed);
        let mut params = vec![0.0; layout.total];
        let first = arch.widths.first().copied().unwrap_or(1);
        if arch.time_dim > 0 {
            let bound = 1.0 / (arch.time_dim as f64).sqrt();
            for p in &mut params[layout.time_proj..layout.time_proj + first * arch.time_dim] {
                *p = rng.random_range(-bound..bound);
            }
        }
        let mut convs = vec![layout.stem];
        convs.extend(&layout.enc);
        convs.extend(layout.mid);
        convs.extend(layout.dec.iter().rev());
        for slot in convs {
            let bound = 1.0 / ((slot.cin * 9) as f64).sqrt();
            for p in &mut params[slot.offset..slot.offset + slot.len()] {
                *p = rng.random_range(-bound..bound);
            }
        }
        for p in &mut params {
            *p = *p as f32 as f64;
        }
        Ok(Self {
            arch,
            precond,
            layout,
            params,
            version: 0,
        })
    }

    pub fn from_params(
        arch: Architecture,
        precond: Preconditioning,
        params: Vec<f64>,
    ) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        if params.len() != layout.total {
            return Err(Error::shape(
                format!("{} parameters", layout.total),
                params.len(),
            ));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("non-finite parameter"));
        }
        Ok(Self {
            arch,
            precond,
            layout,
            params,
            version: 0,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn preconditioning(&self) -> &Preconditioning {
        &self.precond
    }

    pub fn set_preconditioning(&mut self, precond: Preconditioning) {
        self.precond = precond;
        self.version += 1;
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Replaces every parameter; invalidates outstanding tapes.
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::shape(self.params.len(), params.len()));
        }
        self.params = params;
        self.version += 1;
        Ok(())
    }

    /// One optimizer update, rounded back to `f32` precision.
    pub fn apply_update(&mut self, opt: &mut AdamW, grads: &[f64]) -> Result<()> {
        let mut next = self.params.clone();
        opt.step(&mut next, grads)?;
        for p in &mut next {
            *p = *p as f32 as f64;
        }
        if next.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                step: opt.step as usize,
                detail: "parameter overflow".into(),
            });
        }
        self.params = next;
        self.version += 1;
        Ok(())
    }

    fn check_input(&self, x: &[f64], cond: Option<&[f64]>, (h, w): (usize, usize)) -> Result<()> {
        let expected_cond = self.arch.in_channels == 2;
        if self.arch.in_channels > 2 {
            return Err(Error::invalid("only 1- or 2-channel models are supported"));
        }
        if cond.is_some() != expected_cond {
            return Err(Error::shape(
                format!("{} input channel(s)", self.arch.in_channels),
                if cond.is_some() {
                    "2 channels"
                } else {
                    "1 channel"
                },
            ));
        }
        let m = self.arch.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::shape(
                format!("spatial size divisible by {m}"),
                format!("{h}x{w}"),
            ));
        }
        if x.len() != h * w || cond.is_some_and(|c| c.len() != h * w) {
            return Err(Error::shape(format!("{h}x{w} = {} values", h * w), x.len()));
        }
        Ok(())
    }

    /// Raw network output `F(x, tau)` with `cond` concatenated as the second
    /// channel when the model has two inputs.
    pub fn forward(
        &self,
        x: &[f64],
        cond: Option<&[f64]>,
        tau: f64,
        hw: (usize, usize),
    ) -> Result<Vec<f64>> {
        Ok(self.forward_tape(x, cond, tau, hw)?.0)
    }

    pub fn forward_tape(
        &self,
        x: &[f64],
        cond: Option<&[f64]>,
        tau: f64,
        hw: (usize, usize),
    ) -> Result<(Vec<f64>, Tape)> {
        self.check_input(x, cond, hw)?;
        let p = &self.params;
        let lay = &self.layout;
        let mut input = x.to_vec();
        if let Some(c) = cond {
            input.extend_from_slice(c);
        }

        let emb = sinusoidal_embedding(tau * self.arch.time_scale, self.arch.time_dim);
        let first = lay.stem.cout;
        let (mut stem_pre, stem_cols) = conv3x3_forward(
            lay.stem.weights(p),
            &p[lay.stem.bias_range()],
            lay.stem.cin,
            lay.stem.cout,
            hw,
            &input,
        );
        let n = hw.0 * hw.1;
        for c in 0..first {
            let row = &p[lay.time_proj + c * emb.len()..][..emb.len()];
            let bias: f64 = row.iter().zip(&emb).map(|(a, b)| a * b).sum();
            stem_pre[c * n..(c + 1) * n]
                .iter_mut()
                .for_each(|v| *v += bias);
        }

        let mut tape = Tape {
            version: self.version,
            hw,
            emb,
            stem_cols,
            stem_pre,
            enc: vec![],
            mid: None,
            dec: vec![],
            head_cols: vec![],
        };
        if self.arch.widths.is_empty() {
            let out = tape.stem_pre.clone();
            return Ok((out, tape));
        }

        let conv = |slot: &ConvSlot, input: &[f64], hw| {
            conv3x3_forward(
                slot.weights(p),
                &p[slot.bias_range()],
                slot.cin,
                slot.cout,
                hw,
                input,
            )
        };
        let levels = self.arch.widths.len();
        let dims: Vec<(usize, usize)> = (0..levels).map(|l| (hw.0 >> l, hw.1 >> l)).collect();

        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(levels);
        let mut cur = silu_forward(&tape.stem_pre);
        for l in 0..levels {
            let x_in = if l == 0 {
                cur
            } else {
                avg_pool2(&cur, self.arch.widths[l - 1], dims[l - 1])
            };
            let (pre, cols) = conv(&lay.enc[l], &x_in, dims[l]);
            cur = silu_forward(&pre);
            acts.push(cur.clone());
            tape.enc.push((cols, pre));
        }
        let mid = lay.mid.expect("mid conv exists when widths is non-empty");
        let (pre, cols) = conv(&mid, &cur, dims[levels - 1]);
        cur = silu_forward(&pre);
        tape.mid = Some((cols, pre));

        let mut dec_tape = vec![(vec![], vec![]); levels - 1];
        for l in (0..levels - 1).rev() {
            let mut cat = upsample2(&cur, self.arch.widths[l + 1], dims[l + 1]);
            cat.extend_from_slice(&acts[l]);
            let (pre, cols) = conv(&lay.dec[l], &cat, dims[l]);
            cur = silu_forward(&pre);
            dec_tape[l] = (cols, pre);
        }
        tape.dec = dec_tape;

        let head = lay.head.expect("head conv exists when widths is non-empty");
        let (out, cols) = conv(&head, &cur, hw);
        tape.head_cols = cols;
        Ok((out, tape))
    }

    /// Reverse-mode gradient of `<grad_out, F>` with respect to every
    /// parameter, in canonical layout order.
    pub fn backward(&self, tape: &Tape, grad_out: &[f64]) -> Result<Vec<f64>> {
        if tape.version != self.version {
            return Err(Error::StaleActivations {
                recorded: tape.version,
                current: self.version,
            });
        }
        let hw = tape.hw;
        if grad_out.len() != hw.0 * hw.1 {
            return Err(Error::shape(hw.0 * hw.1, grad_out.len()));
        }
        let p = &self.params;
        let lay = &self.layout;
        let mut grads = vec![0.0; p.len()];

        let conv_back = |slot: &ConvSlot, cols: &[f64], dout: &[f64], hw, grads: &mut [f64]| {
            let (dw_part, rest) = grads[slot.offset..].split_at_mut(slot.cout * slot.cin * 9);
            conv3x3_backward(
                slot.weights(p),
                slot.cin,
                slot.cout,
                hw,
                cols,
                dout,
                dw_part,
                &mut rest[..slot.cout],
            )
        };

        let d_stem_pre = if self.arch.widths.is_empty() {
            grad_out.to_vec()
        } else {
            let widths = &self.arch.widths;
            let levels = widths.len();
            let dims: Vec<(usize, usize)> = (0..levels).map(|l| (hw.0 >> l, hw.1 >> l)).collect();

            let head = lay.head.expect("head conv");
            let mut dcur = conv_back(&head, &tape.head_cols, grad_out, hw, &mut grads);

            let mut dacts: Vec<Vec<f64>> = (0..levels)
                .map(|l| vec![0.0; widths[l] * dims[l].0 * dims[l].1])
                .collect();
            for l in 0..levels - 1 {
                let (cols, pre) = &tape.dec[l];
                let dpre = silu_backward(pre, &dcur);
                let dcat = conv_back(&lay.dec[l], cols, &dpre, dims[l], &mut grads);
                let split = widths[l + 1] * dims[l].0 * dims[l].1;
                dacts[l]
                    .iter_mut()
                    .zip(&dcat[split..])
                    .for_each(|(a, b)| *a += b);
                dcur = upsample2_backward(&dcat[..split], widths[l + 1], dims[l + 1]);
            }

            let (cols, pre) = tape.mid.as_ref().expect("mid activations");
            let dpre = silu_backward(pre, &dcur);
            let dmid_in = conv_back(
                &lay.mid.expect("mid conv"),
                cols,
                &dpre,
                dims[levels - 1],
                &mut grads,
            );
            dacts[levels - 1]
                .iter_mut()
                .zip(&dmid_in)
                .for_each(|(a, b)| *a += b);

            let mut dstem_act = Vec::new();
            for l in (0..levels).rev() {
                let (cols, pre) = &tape.enc[l];
                let dpre = silu_backward(pre, &dacts[l]);
                let din = conv_back(&lay.enc[l], cols, &dpre, dims[l], &mut grads);
                if l == 0 {
                    dstem_act = din;
                } else {
                    let dprev = avg_pool2_backward(&din, widths[l - 1], dims[l - 1]);
                    dacts[l - 1]
                        .iter_mut()
                        .zip(&dprev)
                        .for_each(|(a, b)| *a += b);
                }
            }
            silu_backward(&tape.stem_pre, &dstem_act)
        };

        let n = hw.0 * hw.1;
        let e = tape.emb.len();
        for c in 0..lay.stem.cout {
            let dbias: f64 = d_stem_pre[c * n..(c + 1) * n].iter().sum();
            for (k, emb) in tape.emb.iter().enumerate() {
                grads[lay.time_proj + c * e + k] += dbias * emb;
            }
        }
        conv_back(&lay.stem, &tape.stem_cols, &d_stem_pre, hw, &mut grads);
        Ok(grads)
    }

    /// Bridge x0-prediction `c_skip x + c_out F(c_in x, c_noise)`.
    pub fn precondition(
        &self,
        x_t: &[f64],
        t: f64,
        sched: &BridgeSchedule,
        hw: (usize, usize),
    ) -> Result<Vec<f64>> {
        Ok(self.precondition_tape(x_t, t, sched, hw)?.0)
    }

    /// Like [`precondition`](Self::precondition) but also returns the tape
    /// and the coefficients; `dD/dF = c_out`.
    pub fn precondition_tape(
        &self,
        x_t: &[f64],
        t: f64,
        sched: &BridgeSchedule,
        hw: (usize, usize),
    ) -> Result<(Vec<f64>, Tape, PrecondCoeffs)> {
        let k = self.precond.coeffs(t, sched)?;
        let scaled: Vec<f64> = x_t.iter().map(|v| k.c_in * v).collect();
        let (f, tape) = self.forward_tape(&scaled, None, k.c_noise, hw)?;
        let d = x_t
            .iter()
            .zip(&f)
            .map(|(x, f)| k.c_skip * x + k.c_out * f)
            .collect();
        Ok((d, tape, k))
    }
}
