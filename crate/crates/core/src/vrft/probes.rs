//! Seeded open-loop excitation signals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::plants::{Discretization, LtiTransferFunction};
use crate::signals::Signal;

/// Excitation family; `generate` returns one signal per batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProbeSpec {
    FilteredStep(FilteredStep),
    TimeVaryingSine(TimeVaryingSine),
    StepLadder(StepLadder),
    Multisine(Multisine),
    SetpointMultisine(SetpointMultisine),
}

/// `amplitude (1 - exp(-t / tc))`: a unit step through `1 / (tc s + 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilteredStep {
    pub len: usize,
    pub amplitude: f64,
    pub tc: f64,
}

impl Default for FilteredStep {
    fn default() -> Self {
        Self { len: 200, amplitude: 1.0, tc: 0.2 }
    }
}

impl FilteredStep {
    pub fn filter(&self) -> Result<LtiTransferFunction> {
        LtiTransferFunction::first_order_lag(self.tc)
    }
}

/// `A_f(t) sin(w_f(t) ts t)` where `A` and `w` are random levels held for
/// random durations and smoothed by a first-order lag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeVaryingSine {
    pub len: usize,
    pub batches: usize,
    pub omega: [f64; 2],
    pub amplitude: [f64; 2],
    /// Hold duration range in seconds.
    pub hold: [f64; 2],
    pub filter_tc: f64,
}

impl Default for TimeVaryingSine {
    fn default() -> Self {
        Self { len: 2001, batches: 5, omega: [1.0, 10.0], amplitude: [1.85, 2.15], hold: [2.5, 5.0], filter_tc: 0.2 }
    }
}

/// Constant levels switched on at sample `delay` from `baseline`; one batch per level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepLadder {
    pub len: usize,
    pub levels: Vec<f64>,
    pub baseline: f64,
    pub delay: usize,
}

impl Default for StepLadder {
    fn default() -> Self {
        Self { len: 50, levels: linspace(6.0, 109.0, 10), baseline: 0.0, delay: 0 }
    }
}

/// `offset + sum_i amplitude sin(w_i t ts + phi_i)` with `w_i` evenly spaced
/// over the band and uniform random phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Multisine {
    pub len: usize,
    pub batches: usize,
    pub n_sines: usize,
    pub band: [f64; 2],
    pub amplitude: f64,
    pub offset: f64,
}

impl Default for Multisine {
    fn default() -> Self {
        Self { len: 600, batches: 1, n_sines: 10, band: [0.5, 10.0], amplitude: 1.0, offset: 0.0 }
    }
}

/// One batch per setpoint: the constant setpoint input, plus a multisine
/// added from sample `settle` onwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SetpointMultisine {
    pub len: usize,
    pub setpoints: Vec<f64>,
    pub settle: usize,
    pub n_sines: usize,
    pub band: [f64; 2],
    pub amplitude: f64,
}

impl Default for SetpointMultisine {
    fn default() -> Self {
        Self {
            len: 2000,
            setpoints: vec![0.0, 8.75, 30.0],
            settle: 400,
            n_sines: 10,
            band: [0.5, 5.0],
            amplitude: 0.3,
        }
    }
}

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![a],
        _ => (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect(),
    }
}

fn batch_rng(seed: u64, batch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(batch as u64);
    rng
}

fn check_range(name: &str, r: [f64; 2], positive: bool) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) || (positive && r[0] <= 0.0) {
        return param(format!("{name} range must be ordered{}", if positive { " and positive" } else { "" }));
    }
    Ok(())
}

fn sines(rng: &mut ChaCha8Rng, n: usize, band: [f64; 2]) -> Vec<(f64, f64)> {
    linspace(band[0], band[1], n)
        .into_iter()
        .map(|w| (w, rng.random_range(0.0..std::f64::consts::TAU)))
        .collect()
}

impl ProbeSpec {
    pub fn len(&self) -> usize {
        match self {
            Self::FilteredStep(p) => p.len,
            Self::TimeVaryingSine(p) => p.len,
            Self::StepLadder(p) => p.len,
            Self::Multisine(p) => p.len,
            Self::SetpointMultisine(p) => p.len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batches(&self) -> usize {
        match self {
            Self::FilteredStep(_) => 1,
            Self::TimeVaryingSine(p) => p.batches,
            Self::StepLadder(p) => p.levels.len(),
            Self::Multisine(p) => p.batches,
            Self::SetpointMultisine(p) => p.setpoints.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.len() == 0 || self.batches() == 0 {
            return param("probe needs at least one batch of at least one sample");
        }
        match self {
            Self::FilteredStep(p) if !(p.tc > 0.0) => param("filtered step needs tc > 0"),
            Self::TimeVaryingSine(p) => {
                check_range("omega", p.omega, false)?;
                check_range("amplitude", p.amplitude, false)?;
                check_range("hold", p.hold, true)?;
                if !(p.filter_tc > 0.0) {
                    return param("time-varying sine needs filter_tc > 0");
                }
                Ok(())
            }
            Self::StepLadder(p) if p.delay >= p.len => param("step delay must fall inside the batch"),
            Self::Multisine(p) => check_range("band", p.band, false),
            Self::SetpointMultisine(p) => check_range("band", p.band, false),
            _ => Ok(()),
        }
    }

    /// Batch `i` depends only on `seed` and `i`.
    pub fn generate(&self, ts: f64, seed: u64) -> Result<Vec<Signal>> {
        self.validate()?;
        (0..self.batches()).map(|b| self.batch(b, ts, seed)).collect()
    }

    fn batch(&self, b: usize, ts: f64, seed: u64) -> Result<Signal> {
        let mut rng = batch_rng(seed, b);
        match self {
            Self::FilteredStep(p) => {
                Signal::from_fn(p.len, ts, |t| p.amplitude * -(-(t as f64) * ts / p.tc).exp_m1())
            }
            Self::TimeVaryingSine(p) => {
                let mut amp = Vec::with_capacity(p.len);
                let mut omega = Vec::with_capacity(p.len);
                while amp.len() < p.len {
                    let a = rng.random_range(p.amplitude[0]..=p.amplitude[1]);
                    let w = rng.random_range(p.omega[0]..=p.omega[1]);
                    let hold = rng.random_range(p.hold[0]..=p.hold[1]);
                    let n = ((hold / ts).round() as usize).max(1).min(p.len - amp.len());
                    amp.extend(std::iter::repeat_n(a, n));
                    omega.extend(std::iter::repeat_n(w, n));
                }
                let lag = LtiTransferFunction::first_order_lag(p.filter_tc)?.discretize(ts, Discretization::Zoh)?;
                let smooth = |levels: &[f64]| -> Vec<f64> {
                    // Start the lag at the first level so the signal has no ramp-in.
                    let shifted: Vec<f64> = levels.iter().map(|v| v - levels[0]).collect();
                    lag.simulate(&shifted).into_iter().map(|v| v + levels[0]).collect()
                };
                let (af, wf) = (smooth(&amp), smooth(&omega));
                Signal::from_fn(p.len, ts, |t| af[t] * (wf[t] * ts * t as f64).sin())
            }
            Self::StepLadder(p) => {
                let level = p.levels[b];
                Signal::from_fn(p.len, ts, |t| if t < p.delay { p.baseline } else { level })
            }
            Self::Multisine(p) => {
                let s = sines(&mut rng, p.n_sines, p.band);
                Signal::from_fn(p.len, ts, |t| {
                    let tt = t as f64 * ts;
                    p.offset + s.iter().map(|(w, ph)| p.amplitude * (w * tt + ph).sin()).sum::<f64>()
                })
            }
            Self::SetpointMultisine(p) => {
                let s = sines(&mut rng, p.n_sines, p.band);
                let level = p.setpoints[b];
                Signal::from_fn(p.len, ts, |t| {
                    if t < p.settle {
                        return level;
                    }
                    let tt = (t - p.settle) as f64 * ts;
                    level + s.iter().map(|(w, ph)| p.amplitude * (w * tt + ph).sin()).sum::<f64>()
                })
            }
        }
    }
}
