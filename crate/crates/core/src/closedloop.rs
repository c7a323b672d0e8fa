//! Sampled feedback loop of a plant and an NFIR controller, plus tracking
//! metrics against a reference model.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::operators::NfirOperator;
use crate::plants::Plant;
use crate::signals::{same_ts, Signal, SignalTable};
use crate::vrft::ReferenceModel;

/// Reference signal families for tracking runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceSignal {
    Step { amplitude: f64 },
    /// `amplitude` while `sin(omega t) >= 0`, `-amplitude` otherwise.
    Square { omega: f64, amplitude: f64 },
    Sine { omega: f64, amplitude: f64 },
    /// Piecewise-constant levels, each held for `hold` samples.
    Staircase { levels: Vec<f64>, hold: usize },
}

impl ReferenceSignal {
    pub fn generate(&self, len: usize, ts: f64) -> Result<Signal> {
        match self {
            Self::Step { amplitude } => Signal::new(vec![*amplitude; len], ts),
            Self::Square { omega, amplitude } => Signal::from_fn(len, ts, |t| {
                let phase = (omega * t as f64 * ts).rem_euclid(std::f64::consts::TAU);
                if phase < std::f64::consts::PI { *amplitude } else { -amplitude }
            }),
            Self::Sine { omega, amplitude } => Signal::from_fn(len, ts, |t| amplitude * (omega * t as f64 * ts).sin()),
            Self::Staircase { levels, hold } => {
                if levels.is_empty() || *hold == 0 {
                    return param("staircase needs levels and a positive hold");
                }
                Signal::from_fn(len, ts, |t| levels[(t / hold).min(levels.len() - 1)])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopOptions {
    /// Standard deviation of additive Gaussian noise on the measured output.
    pub noise_std: f64,
    pub noise_seed: u64,
}

impl Default for LoopOptions {
    fn default() -> Self {
        Self { noise_std: 0.0, noise_seed: 0 }
    }
}

/// Signals of one closed-loop run; `e = r - y` sample by sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopTrace {
    pub r: Signal,
    pub e: Signal,
    pub u: Signal,
    /// Measured output fed back to the controller.
    pub y: Signal,
    /// External scheduling signal, when the controller uses one.
    pub q: Option<Signal>,
    /// Sample at which the loop left the finite range; the trace stops there.
    pub diverged_at: Option<usize>,
}

impl LoopTrace {
    /// Largest magnitude of `e`, `u` and `y`; infinite for a diverged run.
    pub fn max_abs(&self) -> f64 {
        if self.diverged_at.is_some() {
            return f64::INFINITY;
        }
        [&self.e, &self.u, &self.y].iter().map(|s| s.max_abs()).fold(0.0, f64::max)
    }

    /// All signals finite and below `limit` in magnitude.
    pub fn is_bounded(&self, limit: f64) -> bool {
        self.diverged_at.is_none() && self.max_abs() <= limit
    }

    /// Columns `t, r, e, u, y[, q][, y_target]`.
    pub fn table(&self, target: Option<&Signal>) -> SignalTable {
        let mut t = SignalTable::new(self.r.ts())
            .with("r", &self.r)
            .with("e", &self.e)
            .with("u", &self.u)
            .with("y", &self.y);
        if let Some(q) = &self.q {
            t = t.with("q", q);
        }
        if let Some(target) = target {
            t = t.with("y_target", target);
        }
        t
    }

    pub fn save(&self, path: impl AsRef<Path>, target: Option<&Signal>) -> Result<()> {
        self.table(target).save(path)
    }
}

/// Magnitude at which a run is stopped and reported as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e100;

/// Runs the loop: read `y(t)`, form `e(t) = r(t) - y(t)`, evaluate the
/// controller incrementally (with `q = y` when it is externally driven) and
/// hold `u(t)` on the plant for one interval.
///
/// No computation delay is inserted; plants with direct feedthrough would
/// form an algebraic loop and are rejected.
pub fn run_closed_loop(
    plant: &mut dyn Plant,
    controller: &NfirOperator,
    r: &Signal,
    opts: &LoopOptions,
) -> Result<LoopTrace> {
    if plant.has_feedthrough() {
        return Err(Error::Parameter("plant has direct feedthrough; the feedback loop is algebraic".into()));
    }
    if !same_ts(plant.ts(), r.ts()) || !same_ts(controller.ts(), r.ts()) {
        return Err(Error::InvalidSignal(format!(
            "reference at {} s, plant at {} s, controller at {} s",
            r.ts(),
            plant.ts(),
            controller.ts()
        )));
    }
    if !(opts.noise_std >= 0.0 && opts.noise_std.is_finite()) {
        return param("noise standard deviation must be nonnegative");
    }
    let noise = Normal::new(0.0, opts.noise_std).map_err(|e| Error::Parameter(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.noise_seed);
    let external = controller.needs_external();
    let n = r.len();
    let (mut e, mut u, mut y) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    plant.reset();
    let mut stepper = controller.stepper();
    let mut diverged_at = None;
    for (t, &rt) in r.samples().iter().enumerate() {
        let mut yt = plant.output(0.0);
        if opts.noise_std > 0.0 {
            yt += noise.sample(&mut rng);
        }
        let et = rt - yt;
        let ut = stepper.step(et, external.then_some(yt));
        if !(yt.abs() <= DIVERGENCE_LIMIT && ut.abs() <= DIVERGENCE_LIMIT) {
            diverged_at = Some(t);
            break;
        }
        plant.advance(ut);
        e.push(et);
        u.push(ut);
        y.push(yt);
    }
    let ts = r.ts();
    let y = Signal::new(y, ts)?;
    Ok(LoopTrace {
        r: r.head(y.len()),
        e: Signal::new(e, ts)?,
        u: Signal::new(u, ts)?,
        q: external.then(|| y.clone()),
        y,
        diverged_at,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingOptions {
    /// Leading samples left out of every metric.
    pub exclude: usize,
    /// Band split frequency in rad/s.
    pub crossover: f64,
}

impl Default for TrackingOptions {
    fn default() -> Self {
        Self { exclude: 0, crossover: 5.0 }
    }
}

impl TrackingOptions {
    /// Excludes the controller's memory as the initial transient.
    pub fn for_controller(op: &NfirOperator, crossover: f64) -> Self {
        Self { exclude: op.memory(), crossover }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingMetrics {
    pub rmse: f64,
    pub max_abs: f64,
    /// RMS of the error content at or below the crossover; `low^2 + high^2 = rmse^2`.
    pub rmse_low: f64,
    pub rmse_high: f64,
    /// Largest error over the final tenth of the evaluated window.
    pub tail_max_abs: f64,
    pub samples: usize,
}

/// Compares `y` with the reference model applied to `r`.
pub fn track_reference_model(
    trace: &LoopTrace,
    mr: &ReferenceModel,
    opts: &TrackingOptions,
) -> Result<(TrackingMetrics, Signal)> {
    let target = mr.apply(&trace.r)?;
    Ok((tracking_metrics(&trace.y, &target, opts)?, target))
}

pub fn tracking_metrics(y: &Signal, target: &Signal, opts: &TrackingOptions) -> Result<TrackingMetrics> {
    y.check_compatible(target)?;
    if opts.exclude >= y.len() {
        return param(format!("cannot exclude {} of {} samples", opts.exclude, y.len()));
    }
    let err: Vec<f64> = y.samples()[opts.exclude..]
        .iter()
        .zip(&target.samples()[opts.exclude..])
        .map(|(a, b)| a - b)
        .collect();
    let n = err.len();
    let rmse = (err.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let max_abs = err.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tail = n - (n / 10).max(1);
    let tail_max_abs = err[tail..].iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let mut spec: Vec<Complex<f64>> = err.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut spec);
    let bin = std::f64::consts::TAU / (n as f64 * y.ts());
    let (mut low, mut high) = (0.0, 0.0);
    for (k, c) in spec.iter().enumerate() {
        let omega = k.min(n - k) as f64 * bin;
        if omega <= opts.crossover {
            low += c.norm_sqr();
        } else {
            high += c.norm_sqr();
        }
    }
    let scale = (n * n) as f64;
    Ok(TrackingMetrics {
        rmse,
        max_abs,
        rmse_low: (low / scale).sqrt(),
        rmse_high: (high / scale).sqrt(),
        tail_max_abs,
        samples: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{ImpulseResponse, LiftingFunction};
    use crate::operators::Branch;
    use crate::plants::DiscreteSystem;
    use crate::vrft::ReferenceSpec;

    fn integrator(ts: f64) -> DiscreteSystem {
        DiscreteSystem::from_tf(&[0.0, ts], &[1.0, -1.0], ts).unwrap()
    }

    #[test]
    fn zero_reference_stays_zero() {
        let op = NfirOperator::fir(ImpulseResponse::new(vec![1.0, 0.5, 0.2]).unwrap(), 0.1).unwrap();
        let mut p = integrator(0.1);
        let r = Signal::zeros(100, 0.1).unwrap();
        let tr = run_closed_loop(&mut p, &op, &r, &LoopOptions::default()).unwrap();
        assert_eq!(tr.max_abs(), 0.0);
    }

    #[test]
    fn integrator_with_unit_gain_converges_monotonically() {
        for ts in [0.1, 0.5, 0.9] {
            let op = NfirOperator::fir(ImpulseResponse::new(vec![1.0]).unwrap(), ts).unwrap();
            let mut p = integrator(ts);
            let r = Signal::new(vec![1.0; 200], ts).unwrap();
            let tr = run_closed_loop(&mut p, &op, &r, &LoopOptions::default()).unwrap();
            let y = tr.y.samples();
            for t in 0..199 {
                let expected = y[t] + ts * (1.0 - y[t]);
                assert!((y[t + 1] - expected).abs() < 1e-14);
                assert!(y[t + 1] >= y[t]);
            }
            assert!((y[199] - 1.0).abs() < 1e-6);
            for ((e, r), y) in tr.e.samples().iter().zip(tr.r.samples()).zip(y) {
                assert_eq!(*e, r - y);
            }
        }
    }

    #[test]
    fn feedthrough_plant_rejected() {
        let op = NfirOperator::fir(ImpulseResponse::new(vec![1.0]).unwrap(), 0.1).unwrap();
        let mut p = DiscreteSystem::from_tf(&[1.0], &[1.0], 0.1).unwrap();
        let r = Signal::zeros(5, 0.1).unwrap();
        assert!(matches!(run_closed_loop(&mut p, &op, &r, &LoopOptions::default()), Err(Error::Parameter(_))));
    }

    #[test]
    fn incremental_matches_batch_evaluation() {
        let lift = LiftingFunction::volcano(0.5, 0.3).unwrap();
        let branches = vec![
            Branch { impulse: ImpulseResponse::new(vec![0.8, 0.3, 0.1, 0.05]).unwrap(), lifting: LiftingFunction::identity() },
            Branch { impulse: ImpulseResponse::new(vec![0.4, 0.2, 0.0, 0.0]).unwrap(), lifting: lift },
        ];
        let op = NfirOperator::new(branches, Some(0.5), 0.05).unwrap();
        let mut p = DiscreteSystem::from_tf(&[0.0, 0.05], &[1.0, -0.9], 0.05).unwrap();
        let r = ReferenceSignal::Square { omega: 2.0, amplitude: 1.0 }.generate(300, 0.05).unwrap();
        let tr = run_closed_loop(&mut p, &op, &r, &LoopOptions::default()).unwrap();
        let batch = op.apply(&tr.e).unwrap();
        for (a, b) in batch.samples().iter().zip(tr.u.samples()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn external_controller_is_fed_the_output() {
        let lift = LiftingFunction::external_gaussian(1.0, 0.5, 1).unwrap();
        let branches = vec![Branch { impulse: ImpulseResponse::new(vec![1.0, 0.2]).unwrap(), lifting: lift }];
        let op = NfirOperator::new(branches, None, 0.05).unwrap();
        let mut p = DiscreteSystem::from_tf(&[0.0, 0.05], &[1.0, -0.95], 0.05).unwrap();
        let r = Signal::new(vec![1.0; 100], 0.05).unwrap();
        let tr = run_closed_loop(&mut p, &op, &r, &LoopOptions::default()).unwrap();
        assert_eq!(tr.q.as_ref(), Some(&tr.y));
        let batch = op.apply_external(&tr.e, tr.q.as_ref().unwrap()).unwrap();
        for (a, b) in batch.samples().iter().zip(tr.u.samples()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn noise_is_seeded() {
        let op = NfirOperator::fir(ImpulseResponse::new(vec![1.0]).unwrap(), 0.1).unwrap();
        let r = Signal::new(vec![1.0; 50], 0.1).unwrap();
        let opts = LoopOptions { noise_std: 0.1, noise_seed: 3 };
        let a = run_closed_loop(&mut integrator(0.1), &op, &r, &opts).unwrap();
        let b = run_closed_loop(&mut integrator(0.1), &op, &r, &opts).unwrap();
        assert_eq!(a, b);
        let clean = run_closed_loop(&mut integrator(0.1), &op, &r, &LoopOptions::default()).unwrap();
        assert_ne!(a, clean);
    }

    #[test]
    fn metrics_examples() {
        let target = Signal::from_fn(256, 0.05, |t| (0.1 * t as f64).sin()).unwrap();
        let opts = TrackingOptions::default();
        let m = tracking_metrics(&target, &target, &opts).unwrap();
        assert_eq!((m.rmse, m.max_abs), (0.0, 0.0));
        let off = target.map(|v| v + 0.3).unwrap();
        let m = tracking_metrics(&off, &target, &opts).unwrap();
        assert!((m.rmse - 0.3).abs() < 1e-12);
        assert!((m.rmse_low - 0.3).abs() < 1e-12 && m.rmse_high < 1e-12);
        let wiggle = Signal::from_fn(256, 0.05, |t| if t % 2 == 0 { 0.2 } else { -0.2 }).unwrap();
        let y = target.zip_with(&wiggle, |a, b| a + b).unwrap();
        let m = tracking_metrics(&y, &target, &opts).unwrap();
        assert!(m.rmse_low < 1e-12 && (m.rmse_high - 0.2).abs() < 1e-12);
    }

    #[test]
    fn tracking_against_model() {
        let mr = ReferenceModel::new(ReferenceSpec::second_order(1.0, 1.0, 0.1), 0.05).unwrap();
        let r = ReferenceSignal::Square { omega: 1.0, amplitude: 1.0 }.generate(200, 0.05).unwrap();
        let y = mr.apply(&r).unwrap();
        let trace = LoopTrace { e: r.zip_with(&y, |a, b| a - b).unwrap(), u: y.clone(), r, y, q: None, diverged_at: None };
        let (m, _) = track_reference_model(&trace, &mr, &TrackingOptions { exclude: 10, crossover: 3.0 }).unwrap();
        assert_eq!(m.rmse, 0.0);
        assert_eq!(m.samples, 190);
    }

    #[test]
    fn square_wave_shape() {
        let s = ReferenceSignal::Square { omega: 2.0, amplitude: 1.0 }.generate(100, 0.05).unwrap();
        assert_eq!(s.samples()[0], 1.0);
        assert_eq!(s.samples()[31], 1.0);
        assert_eq!(s.samples()[32], -1.0);
    }
}
