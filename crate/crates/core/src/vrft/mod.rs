//! Virtual reference feedback tuning: probe a plant open loop, invert the
//! reference model and emit input/output samples of the ideal controller.

mod probes;

pub use probes::{linspace, FilteredStep, Multisine, ProbeSpec, SetpointMultisine, StepLadder, TimeVaryingSine};

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim, param, Error, Result};
use crate::plants::{poly_mul, DiscreteSystem, Discretization, LtiTransferFunction, Plant, PlantSpec};
use crate::signals::{Signal, SignalTable};
use crate::trainer::{TrainingPair, TrainingSet};

/// Leading impulse-response coefficients below this are treated as zero.
pub const INVERSION_ZERO_TOL: f64 = 1e-10;
/// Virtual references larger than this multiple of the data are flagged.
pub const INVERSION_GROWTH_LIMIT: f64 = 1e6;

/// Reference model description as it appears in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceSpec {
    /// Continuous transfer function (ascending powers of `s`), discretized at the run's ts.
    Continuous {
        num: Vec<f64>,
        den: Vec<f64>,
        #[serde(default = "tustin")]
        method: Discretization,
    },
    /// Discrete transfer function in ascending powers of `z^-1`.
    Discrete { num: Vec<f64>, den: Vec<f64> },
    /// `PC / (1 + PC)` for a discrete plant `P` (powers of `z^-1`) and FIR controller `C`.
    ClosedLoop { plant_num: Vec<f64>, plant_den: Vec<f64>, controller: Vec<f64> },
}

fn tustin() -> Discretization {
    Discretization::Tustin
}

impl ReferenceSpec {
    /// `(1 + zero_tc s) / (1 + 2 zeta T s + T^2 s^2)` under the bilinear transform.
    pub fn second_order(zeta: f64, t: f64, zero_tc: f64) -> Self {
        Self::Continuous { num: vec![1.0, zero_tc], den: vec![1.0, 2.0 * zeta * t, t * t], method: Discretization::Tustin }
    }

    pub fn identity() -> Self {
        Self::Continuous { num: vec![1.0], den: vec![1.0], method: Discretization::Tustin }
    }

    pub fn discretize(&self, ts: f64) -> Result<DiscreteSystem> {
        match self {
            Self::Continuous { num, den, method } => LtiTransferFunction::new(num.clone(), den.clone())?.discretize(ts, *method),
            Self::Discrete { num, den } => DiscreteSystem::from_tf(num, den, ts),
            Self::ClosedLoop { plant_num, plant_den, controller } => {
                if controller.is_empty() {
                    return param("closed-loop reference needs controller coefficients");
                }
                let num = poly_mul(plant_num, controller);
                let n = num.len().max(plant_den.len());
                let den: Vec<f64> = (0..n)
                    .map(|i| plant_den.get(i).copied().unwrap_or(0.0) + num.get(i).copied().unwrap_or(0.0))
                    .collect();
                DiscreteSystem::from_tf(&num, &den, ts)
            }
        }
    }
}

/// A reference model discretized at a fixed sampling interval.
#[derive(Debug, Clone)]
pub struct ReferenceModel {
    spec: ReferenceSpec,
    sys: DiscreteSystem,
    max_shift: usize,
}

impl ReferenceModel {
    pub fn new(spec: ReferenceSpec, ts: f64) -> Result<Self> {
        Ok(Self { sys: spec.discretize(ts)?, spec, max_shift: 3 })
    }

    /// Largest number of leading zero impulse-response samples tolerated by inversion.
    pub fn with_max_shift(mut self, k: usize) -> Self {
        self.max_shift = k;
        self
    }

    pub fn spec(&self) -> &ReferenceSpec {
        &self.spec
    }

    pub fn ts(&self) -> f64 {
        self.sys.ts()
    }

    pub fn system(&self) -> &DiscreteSystem {
        &self.sys
    }

    pub fn impulse_response(&self, n: usize) -> Vec<f64> {
        self.sys.impulse_response(n)
    }

    /// Target output for reference `r`.
    pub fn apply(&self, r: &Signal) -> Result<Signal> {
        if !r.same_ts(&Signal::zeros(1, self.ts())?) {
            return Err(Error::InvalidSignal(format!("reference sampled at {} s, model at {} s", r.ts(), self.ts())));
        }
        Signal::new(self.sys.simulate(r.samples()), r.ts())
    }
}

/// Output of [`invert_reference`].
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualReference {
    /// Valid samples only: `len = y.len() - trimmed`.
    pub r: Signal,
    /// Leading zero coefficients skipped in the impulse response.
    pub shift: usize,
    /// Samples dropped from the end of the data.
    pub trimmed: usize,
    pub warning: Option<String>,
}

/// Solves `h * r = y` by forward substitution, where `h` is the impulse
/// response of the reference model. With `k0` leading zeros in `h`, the
/// last `k0` samples of `r` are undetermined and dropped.
pub fn invert_reference(y: &Signal, mr: &ReferenceModel) -> Result<VirtualReference> {
    if !crate::signals::same_ts(y.ts(), mr.ts()) {
        return Err(Error::InvalidSignal(format!("data sampled at {} s, reference model at {} s", y.ts(), mr.ts())));
    }
    let n = y.len();
    let h = mr.impulse_response(n);
    let k0 = h
        .iter()
        .take(mr.max_shift + 1)
        .position(|v| v.abs() >= INVERSION_ZERO_TOL)
        .ok_or_else(|| {
            Error::NotInvertible(format!("first {} impulse-response samples vanish", (mr.max_shift + 1).min(n)))
        })?;
    if k0 >= n {
        return Err(Error::NotInvertible(format!("data shorter than the model delay {k0}")));
    }
    let ys = y.samples();
    let mut r = vec![0.0; n - k0];
    for t in 0..n - k0 {
        let mut acc = ys[t + k0];
        for k in 1..=t {
            acc -= h[k0 + k] * r[t - k];
        }
        r[t] = acc / h[k0];
    }
    let r = Signal::new(r, y.ts())?;
    let bound = INVERSION_GROWTH_LIMIT * y.max_abs().max(f64::MIN_POSITIVE);
    let warning = (r.max_abs() > bound).then(|| {
        format!(
            "virtual reference grows to {:.3e} (data peak {:.3e}); the reference model may be non-minimum-phase",
            r.max_abs(),
            y.max_abs()
        )
    });
    Ok(VirtualReference { r, shift: k0, trimmed: k0, warning })
}

/// Ideal controller sample `(u_c = r - y*, y_c = u*)`, trimmed to the valid range.
pub fn build_controller_dataset(
    u_star: &Signal,
    y_star: &Signal,
    vr: &VirtualReference,
    q: Option<&Signal>,
) -> Result<TrainingPair> {
    let n = vr.r.len();
    let full = n + vr.trimmed;
    if u_star.len() != full || y_star.len() != full || q.is_some_and(|q| q.len() != full) {
        return dim(format!(
            "probe data has {} / {} samples but the virtual reference covers {full}",
            u_star.len(),
            y_star.len()
        ));
    }
    let e = vr.r.zip_with(&y_star.head(n), |r, y| r - y)?;
    TrainingPair::new(e, u_star.head(n), q.map(|q| q.head(n)))
}

/// Forward-backward first-order lag; removes high-frequency content without phase shift.
pub fn zero_phase_lowpass(y: &Signal, tc: f64) -> Result<Signal> {
    let lag = LtiTransferFunction::first_order_lag(tc)?.discretize(y.ts(), Discretization::Zoh)?;
    let pass = |v: &[f64]| -> Vec<f64> {
        let v0 = v.first().copied().unwrap_or(0.0);
        let shifted: Vec<f64> = v.iter().map(|x| x - v0).collect();
        lag.simulate(&shifted).into_iter().map(|x| x + v0).collect()
    };
    let mut fwd = pass(y.samples());
    fwd.reverse();
    let mut back = pass(&fwd);
    back.reverse();
    Signal::new(back, y.ts())
}

/// Open-loop response of a plant to one excitation.
pub fn probe_plant(plant: &mut dyn Plant, excitation: &Signal) -> Result<(Signal, Signal)> {
    let y = plant.simulate(excitation)?;
    Ok((excitation.clone(), y))
}

/// Filtered step into an LTI plant, sampled from the exact continuous
/// cascade (plant and filter driven by a held step).
pub fn filtered_step_response(plant: &LtiTransferFunction, probe: &FilteredStep, ts: f64) -> Result<(Signal, Signal)> {
    let u = ProbeSpec::FilteredStep(*probe).generate(ts, 0)?.remove(0);
    let cascade = plant.series(&probe.filter()?)?.discretize(ts, Discretization::Zoh)?;
    let y = cascade.simulate(&vec![probe.amplitude; probe.len]);
    Ok((u, Signal::new(y, ts)?))
}

/// Runs every probe batch through the plant, in parallel.
pub fn probe_batches(plant: &PlantSpec, probe: &ProbeSpec, ts: f64, seed: u64) -> Result<Vec<(Signal, Signal)>> {
    if let (PlantSpec::Lti(lti), ProbeSpec::FilteredStep(step)) = (plant, probe) {
        if lti.method == Discretization::Zoh {
            let tf = LtiTransferFunction::new(lti.num.clone(), lti.den.clone())?;
            return Ok(vec![filtered_step_response(&tf, step, ts)?]);
        }
    }
    probe
        .generate(ts, seed)?
        .par_iter()
        .map(|u| probe_plant(plant.build(ts)?.as_mut(), u))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VrftOptions {
    pub max_shift: usize,
    /// Time constant of an optional zero-phase low-pass applied to `y*` before inversion.
    pub prefilter_tc: Option<f64>,
    /// Attach `q = y*` to every controller sample.
    pub external: bool,
    /// Leading samples of every batch dropped as the settling transient.
    pub discard: usize,
    /// Subtract each batch's mean input and output so the data describe
    /// deviations around its operating point; `q` keeps the measured values.
    pub detrend: bool,
}

impl Default for VrftOptions {
    fn default() -> Self {
        Self { max_shift: 3, prefilter_tc: None, external: false, discard: 0, detrend: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Simulated { plant: PlantSpec, probe: ProbeSpec },
    Imported { files: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub source: DataSource,
    pub reference: ReferenceSpec,
    pub ts: f64,
    pub seed: u64,
    pub options: VrftOptions,
    pub pairs: usize,
    /// Samples trimmed from the end of each batch by the inversion.
    pub trimmed: usize,
    pub warnings: Vec<String>,
}

/// Input/output samples of the ideal controller plus how they were produced.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerDataset {
    pub pairs: Vec<TrainingPair>,
    pub provenance: Provenance,
}

const PROVENANCE_FILE: &str = "controller.provenance.json";

fn pair_file(i: usize) -> String {
    format!("controller_{i:03}.csv")
}

/// Steps 2 and 3 on already collected `(u*, y*)` batches.
pub fn vrft_from_data(
    data: &[(Signal, Signal)],
    reference: &ReferenceSpec,
    options: &VrftOptions,
    source: DataSource,
    seed: u64,
) -> Result<ControllerDataset> {
    let ts = data.first().ok_or_else(|| Error::InvalidSignal("no probe batches".into()))?.0.ts();
    let mr = ReferenceModel::new(reference.clone(), ts)?.with_max_shift(options.max_shift);
    let results: Vec<(TrainingPair, VirtualReference)> = data
        .par_iter()
        .map(|(u, y)| {
            let (u, y) = (u.skip(options.discard)?, y.skip(options.discard)?);
            let (u_dev, y_dev) = if options.detrend {
                let (mu, my) = (u.mean(), y.mean());
                (u.map(|v| v - mu)?, y.map(|v| v - my)?)
            } else {
                (u.clone(), y.clone())
            };
            let y_in = match options.prefilter_tc {
                Some(tc) => zero_phase_lowpass(&y_dev, tc)?,
                None => y_dev,
            };
            let vr = invert_reference(&y_in, &mr)?;
            let q = options.external.then_some(&y);
            Ok((build_controller_dataset(&u_dev, &y_in, &vr, q)?, vr))
        })
        .collect::<Result<_>>()?;
    let trimmed = results.iter().map(|(_, vr)| vr.trimmed).max().unwrap_or(0);
    let warnings = results.iter().filter_map(|(_, vr)| vr.warning.clone()).collect();
    let pairs: Vec<TrainingPair> = results.into_iter().map(|(p, _)| p).collect();
    Ok(ControllerDataset {
        provenance: Provenance {
            source,
            reference: reference.clone(),
            ts,
            seed,
            options: options.clone(),
            pairs: pairs.len(),
            trimmed,
            warnings,
        },
        pairs,
    })
}

/// Full pipeline on a simulated plant.
pub fn run_vrft(
    plant: &PlantSpec,
    probe: &ProbeSpec,
    reference: &ReferenceSpec,
    ts: f64,
    seed: u64,
    options: &VrftOptions,
) -> Result<ControllerDataset> {
    let data = probe_batches(plant, probe, ts, seed)?;
    let source = DataSource::Simulated { plant: plant.clone(), probe: probe.clone() };
    vrft_from_data(&data, reference, options, source, seed)
}

impl ControllerDataset {
    pub fn training_set(&self) -> Result<TrainingSet> {
        TrainingSet::new(self.pairs.clone())
    }

    /// Re-runs a simulated pipeline from its provenance record.
    pub fn regenerate(p: &Provenance) -> Result<Self> {
        match &p.source {
            DataSource::Simulated { plant, probe } => run_vrft(plant, probe, &p.reference, p.ts, p.seed, &p.options),
            DataSource::Imported { .. } => Err(Error::Format("imported datasets cannot be regenerated".into())),
        }
    }

    /// Writes `controller_NNN.csv` (t, u_c, y_c[, q]) and the provenance sidecar.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for (i, p) in self.pairs.iter().enumerate() {
            let mut t = SignalTable::new(p.u.ts()).with("u_c", &p.u).with("y_c", &p.y);
            if let Some(q) = &p.q {
                t = t.with("q", q);
            }
            t.save(dir.join(pair_file(i)))?;
        }
        fs::write(dir.join(PROVENANCE_FILE), serde_json::to_string_pretty(&self.provenance)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let provenance: Provenance = serde_json::from_str(&fs::read_to_string(dir.join(PROVENANCE_FILE))?)?;
        let pairs = (0..provenance.pairs)
            .map(|i| {
                let t = SignalTable::load(dir.join(pair_file(i)))?;
                let ts = provenance.ts;
                let at = |s: Signal| Signal::new(s.into_samples(), ts);
                let q = t.column("q").map(at).transpose()?;
                TrainingPair::new(at(t.require("u_c")?)?, at(t.require("y_c")?)?, q)
            })
            .collect::<Result<_>>()?;
        Ok(Self { pairs, provenance })
    }
}

/// Reads open-loop data with columns `t, u, y`.
pub fn load_plant_data(path: impl AsRef<Path>) -> Result<(Signal, Signal)> {
    let t = SignalTable::load(path)?;
    Ok((t.require("u")?, t.require("y")?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plants::simulate_lti;
    use crate::signals::rmse;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_signal(n: usize, ts: f64, seed: u64) -> Signal {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Signal::from_fn(n, ts, |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn identity_and_gain_models() {
        let y = random_signal(50, 0.1, 1);
        let id = ReferenceModel::new(ReferenceSpec::identity(), 0.1).unwrap();
        assert_eq!(invert_reference(&y, &id).unwrap().r, y);
        let half = ReferenceSpec::Continuous { num: vec![0.5], den: vec![1.0], method: Discretization::Tustin };
        let vr = invert_reference(&y, &ReferenceModel::new(half, 0.1).unwrap()).unwrap();
        for (a, b) in vr.r.samples().iter().zip(y.samples()) {
            assert!((a - 2.0 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn round_trip_through_reference_models() {
        for (t, seed) in [(1.0, 3), (0.25, 4)] {
            let spec = ReferenceSpec::second_order(1.0, t, 0.1);
            let mr = ReferenceModel::new(spec.clone(), 0.05).unwrap();
            let w = random_signal(600, 0.05, seed);
            let y = simulate_lti(&LtiTransferFunction::second_order(1.0, t, 0.1).unwrap(), &w, Discretization::Tustin).unwrap();
            let vr = invert_reference(&y, &mr).unwrap();
            assert_eq!((vr.shift, vr.trimmed), (0, 0));
            assert!(vr.warning.is_none());
            let err = vr.r.samples().iter().zip(w.samples()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-6 * w.max_abs(), "T = {t}: {err}");
        }
    }

    #[test]
    fn delayed_model_trims_tail() {
        let spec = ReferenceSpec::Discrete { num: vec![0.0, 0.0, 0.5], den: vec![1.0, -0.5] };
        let mr = ReferenceModel::new(spec, 1.0).unwrap();
        let w = random_signal(30, 1.0, 5);
        let y = mr.apply(&w).unwrap();
        let vr = invert_reference(&y, &mr).unwrap();
        assert_eq!((vr.shift, vr.trimmed, vr.r.len()), (2, 2, 28));
        for (a, b) in vr.r.samples().iter().zip(w.samples()) {
            assert!((a - b).abs() < 1e-12);
        }
        let too_late = ReferenceSpec::Discrete { num: vec![0.0, 0.0, 0.0, 0.0, 1.0], den: vec![1.0] };
        assert!(matches!(
            invert_reference(&y, &ReferenceModel::new(too_late, 1.0).unwrap()),
            Err(Error::NotInvertible(_))
        ));
    }

    #[test]
    fn non_minimum_phase_flagged() {
        let spec = ReferenceSpec::Discrete { num: vec![1.0, -3.0], den: vec![1.0] };
        let mr = ReferenceModel::new(spec, 1.0).unwrap();
        let y = random_signal(40, 1.0, 6);
        let vr = invert_reference(&y, &mr).unwrap();
        assert!(vr.warning.is_some());
    }

    #[test]
    fn identity_model_gives_zero_error() {
        let u = random_signal(20, 0.1, 7);
        let y = random_signal(20, 0.1, 8);
        let vr = invert_reference(&y, &ReferenceModel::new(ReferenceSpec::identity(), 0.1).unwrap()).unwrap();
        let pair = build_controller_dataset(&u, &y, &vr, None).unwrap();
        assert!(pair.u.samples().iter().all(|v| *v == 0.0));
        assert_eq!(pair.y, u);
        assert!(build_controller_dataset(&u.head(19), &y, &vr, None).is_err());
    }

    #[test]
    fn virtual_error_consistency() {
        let spec = ReferenceSpec::second_order(1.0, 1.0, 0.1);
        let mr = ReferenceModel::new(spec, 0.05).unwrap();
        let r = random_signal(200, 0.05, 9);
        let y = mr.apply(&r).unwrap();
        let vr = invert_reference(&y, &mr).unwrap();
        let pair = build_controller_dataset(&r, &y, &vr, Some(&y)).unwrap();
        let direct = r.zip_with(&y, |a, b| a - b).unwrap();
        assert!(rmse(&pair.u, &direct).unwrap() < 1e-9);
        assert_eq!(pair.q.as_ref(), Some(&y));
    }

    #[test]
    fn lag_filtered_step_closed_form() {
        let tf = LtiTransferFunction::first_order_lag(0.5).unwrap();
        let (_, y) = filtered_step_response(&tf, &FilteredStep::default(), 0.05).unwrap();
        for (i, v) in y.samples().iter().enumerate() {
            let t = i as f64 * 0.05;
            let exact = 1.0 - (0.5 * (-2.0 * t).exp() - 0.2 * (-5.0 * t).exp()) / 0.3;
            assert!((v - exact).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_phase_filter_preserves_constants_and_symmetry() {
        let c = Signal::new(vec![2.0; 30], 0.1).unwrap();
        let f = zero_phase_lowpass(&c, 0.3).unwrap();
        assert!(f.samples().iter().all(|v| (v - 2.0).abs() < 1e-12));
        let bump = Signal::from_fn(61, 0.1, |t| if t == 30 { 1.0 } else { 0.0 }).unwrap();
        let f = zero_phase_lowpass(&bump, 0.3).unwrap();
        let s = f.samples();
        for k in 1..20 {
            assert!((s[30 - k] - s[30 + k]).abs() < 1e-3 * s[30]);
        }
    }

    #[test]
    fn dataset_round_trips_and_regenerates() {
        let plant = PlantSpec::SaturatedLag(Default::default());
        let probe = ProbeSpec::TimeVaryingSine(TimeVaryingSine { len: 300, batches: 2, ..Default::default() });
        let opts = VrftOptions { external: true, ..Default::default() };
        let ds = run_vrft(&plant, &probe, &ReferenceSpec::second_order(1.0, 1.0, 0.1), 0.01, 42, &opts).unwrap();
        assert_eq!(ds.pairs.len(), 2);
        let again = ControllerDataset::regenerate(&ds.provenance).unwrap();
        for (a, b) in ds.pairs.iter().zip(&again.pairs) {
            assert!(a.u.samples().iter().zip(b.u.samples()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = ControllerDataset::load(dir.path()).unwrap();
        assert_eq!(back.provenance, ds.provenance);
        assert_eq!(back.pairs, ds.pairs);
    }
}
