//! FIR, NFIR, externally driven NFIR and integrator-augmented operators.
//!
//! An NFIR operator is a parallel bank of branches. Branch `j` gates its
//! input with a lifting weight `phi_j(t) = f_j(window(u, t))`, convolves the
//! gated input with the impulse response `g_j`, and gates the result again:
//!
//! ```text
//! y(t) = sum_j phi_j(t) * sum_k g_j(k) * phi_j(t - k) * u(t - k)
//! ```
//!
//! An optional integrator branch adds `alpha * ts * sum_{s <= t} u(s)`.

mod lifting;
mod serialize;

use serde::{Deserialize, Serialize};

pub use lifting::{Extrapolation, LiftingFunction, LiftingKind};
pub use serialize::{OperatorDocument, OPERATOR_FORMAT, OPERATOR_VERSION};

use crate::error::{dim, param, Error, Result};
use crate::signals::{same_ts, Signal};

/// Coefficients `g(0..m)` of one FIR branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImpulseResponse(Vec<f64>);

impl ImpulseResponse {
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.is_empty() {
            return param("impulse response needs at least one coefficient");
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return param("impulse response coefficients must be finite");
        }
        Ok(Self(coeffs))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.0
    }
}

/// Linear convolution with zero-padded past; output has the input's length.
pub fn fir_apply(g: &ImpulseResponse, u: &Signal) -> Signal {
    let y = convolve(g.coeffs(), u.samples());
    Signal::new(y, u.ts()).expect("convolution of finite data is finite")
}

fn convolve(g: &[f64], u: &[f64]) -> Vec<f64> {
    (0..u.len())
        .map(|t| {
            let mut acc = 0.0;
            for (k, gk) in g.iter().enumerate().take(t + 1) {
                acc += gk * u[t - k];
            }
            acc
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub impulse: ImpulseResponse,
    pub lifting: LiftingFunction,
}

/// A trained (or hand-built) NFIR operator.
#[derive(Debug, Clone, PartialEq)]
pub struct NfirOperator {
    branches: Vec<Branch>,
    integrator_gain: Option<f64>,
    ts: f64,
}

impl NfirOperator {
    pub fn new(branches: Vec<Branch>, integrator_gain: Option<f64>, ts: f64) -> Result<Self> {
        if branches.is_empty() {
            return param("an NFIR operator needs at least one branch");
        }
        let m = branches[0].impulse.len();
        for (j, b) in branches.iter().enumerate() {
            if b.impulse.len() != m {
                return param(format!("branch {j} has {} coefficients, expected {m}", b.impulse.len()));
            }
            b.lifting.validate()?;
        }
        if let Some(alpha) = integrator_gain {
            if !(alpha >= 0.0 && alpha.is_finite()) {
                return param(format!("integrator gain must be finite and >= 0, got {alpha}"));
            }
        }
        if !(ts > 0.0 && ts.is_finite()) {
            return param("operator sampling interval must be positive");
        }
        Ok(Self { branches, integrator_gain, ts })
    }

    /// Single-branch linear FIR operator.
    pub fn fir(g: ImpulseResponse, ts: f64) -> Result<Self> {
        Self::new(vec![Branch { impulse: g, lifting: LiftingFunction::identity() }], None, ts)
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    /// Filter order `m`.
    pub fn order(&self) -> usize {
        self.branches[0].impulse.len()
    }

    /// Largest input window length over all liftings.
    pub fn window_len(&self) -> usize {
        self.branches.iter().map(|b| b.lifting.r1).max().unwrap_or(1)
    }

    pub fn external_window_len(&self) -> usize {
        self.branches.iter().map(|b| b.lifting.r2).max().unwrap_or(0)
    }

    pub fn integrator_gain(&self) -> Option<f64> {
        self.integrator_gain
    }

    pub fn ts(&self) -> f64 {
        self.ts
    }

    pub fn needs_external(&self) -> bool {
        self.branches.iter().any(|b| b.lifting.is_external())
    }

    /// Samples of input history that one output depends on (NFIR part).
    pub fn memory(&self) -> usize {
        self.order() + self.window_len() - 1
    }

    pub fn apply(&self, u: &Signal) -> Result<Signal> {
        if self.needs_external() {
            return dim("operator has externally driven liftings; use apply_external");
        }
        self.evaluate(u, None)
    }

    pub fn apply_external(&self, u: &Signal, q: &Signal) -> Result<Signal> {
        u.check_compatible(q)?;
        self.evaluate(u, Some(q))
    }

    fn evaluate(&self, u: &Signal, q: Option<&Signal>) -> Result<Signal> {
        if !same_ts(u.ts(), self.ts) {
            return dim(format!("operator ts {} does not match signal ts {}", self.ts, u.ts()));
        }
        let n = u.len();
        let us = u.samples();
        let mut y = vec![0.0; n];
        let mut gated = vec![0.0; n];
        for b in &self.branches {
            let phi = b.lifting.weights(u, q);
            for t in 0..n {
                gated[t] = phi[t] * us[t];
            }
            let g = b.impulse.coeffs();
            for t in 0..n {
                let mut acc = 0.0;
                for (k, gk) in g.iter().enumerate().take(t + 1) {
                    acc += gk * gated[t - k];
                }
                y[t] += phi[t] * acc;
            }
        }
        if let Some(alpha) = self.integrator_gain {
            let mut sum = 0.0;
            for t in 0..n {
                sum += us[t];
                y[t] += alpha * (self.ts * sum);
            }
        }
        Signal::new(y, u.ts()).map_err(|e| Error::InvalidSignal(format!("operator output: {e}")))
    }

    /// Sample-by-sample evaluator that reproduces [`NfirOperator::apply`].
    pub fn stepper(&self) -> OperatorStepper<'_> {
        OperatorStepper::new(self)
    }

    /// Operator with every branch coefficient and the integrator gain replaced.
    ///
    /// `theta` follows the decision-variable order `(g_0, ..., g_{n_b-1}, alpha)`.
    pub fn with_parameters(&self, theta: &[f64]) -> Result<Self> {
        let m = self.order();
        let nb = self.n_branches();
        let expected = nb * m + usize::from(self.integrator_gain.is_some());
        if theta.len() != expected {
            return dim(format!("expected {expected} parameters, got {}", theta.len()));
        }
        let branches = self
            .branches
            .iter()
            .enumerate()
            .map(|(j, b)| {
                Ok(Branch { impulse: ImpulseResponse::new(theta[j * m..(j + 1) * m].to_vec())?, lifting: b.lifting.clone() })
            })
            .collect::<Result<Vec<_>>>()?;
        let alpha = self.integrator_gain.map(|_| theta[nb * m]);
        Self::new(branches, alpha, self.ts)
    }

    /// Decision-variable vector `(g_0, ..., g_{n_b-1}, alpha)`.
    pub fn parameters(&self) -> Vec<f64> {
        let mut theta: Vec<f64> = self.branches.iter().flat_map(|b| b.impulse.coeffs().iter().copied()).collect();
        if let Some(alpha) = self.integrator_gain {
            theta.push(alpha);
        }
        theta
    }
}

/// Incremental evaluator holding the last `m + R - 1` inputs, the last `m`
/// lifting weights per branch and the integrator accumulator.
#[derive(Debug, Clone)]
pub struct OperatorStepper<'a> {
    op: &'a NfirOperator,
    t: usize,
    /// Ring buffer of recent inputs, newest at `head`.
    inputs: Vec<f64>,
    externals: Vec<f64>,
    /// Per-branch ring of `phi_j(s) * u(s)` for the last `m` samples.
    gated: Vec<Vec<f64>>,
    window: Vec<f64>,
    ext_window: Vec<f64>,
    integral: f64,
}

impl<'a> OperatorStepper<'a> {
    fn new(op: &'a NfirOperator) -> Self {
        let m = op.order();
        let r = op.window_len();
        let r2 = op.external_window_len();
        Self {
            op,
            t: 0,
            inputs: vec![0.0; r],
            externals: vec![0.0; r2.max(1)],
            gated: vec![vec![0.0; m]; op.n_branches()],
            window: Vec::with_capacity(r),
            ext_window: Vec::with_capacity(r2),
            integral: 0.0,
        }
    }

    pub fn reset(&mut self) {
        *self = Self::new(self.op);
    }

    /// Pushes `u(t)` (and `q(t)` for externally driven liftings) and returns `y(t)`.
    pub fn step(&mut self, u: f64, q: Option<f64>) -> f64 {
        let r = self.inputs.len();
        let r2 = self.externals.len();
        let slot = self.t % r;
        self.inputs[slot] = u;
        self.externals[self.t % r2] = q.unwrap_or(0.0);
        let m = self.op.order();
        let head = self.t % m;
        let mut y = 0.0;
        for (j, b) in self.op.branches.iter().enumerate() {
            let f = &b.lifting;
            self.window.clear();
            for i in 0..f.r1 {
                // oldest first: u(t - r1 + 1 + i)
                let back = f.r1 - 1 - i;
                self.window.push(if back <= self.t { self.inputs[(self.t - back) % r] } else { 0.0 });
            }
            self.ext_window.clear();
            for i in 0..f.r2 {
                let back = f.r2 - 1 - i;
                self.ext_window.push(if back <= self.t { self.externals[(self.t - back) % r2] } else { 0.0 });
            }
            let phi = f.eval_unchecked(&self.window, &self.ext_window);
            let ring = &mut self.gated[j];
            ring[head] = phi * u;
            let g = b.impulse.coeffs();
            let mut acc = 0.0;
            for (k, gk) in g.iter().enumerate().take(self.t + 1) {
                acc += gk * ring[(head + m - k) % m];
            }
            y += phi * acc;
        }
        if let Some(alpha) = self.op.integrator_gain {
            self.integral += u;
            y += alpha * (self.op.ts * self.integral);
        }
        self.t += 1;
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TS: f64 = 0.1;

    fn sig(v: &[f64]) -> Signal {
        Signal::new(v.to_vec(), TS).unwrap()
    }

    fn ir(v: &[f64]) -> ImpulseResponse {
        ImpulseResponse::new(v.to_vec()).unwrap()
    }

    fn linear_lifting() -> LiftingFunction {
        LiftingFunction::tabulated(vec![0.0, 1.0], vec![0.0, 1.0], Extrapolation::Linear).unwrap()
    }

    #[test]
    fn fir_examples() {
        assert_eq!(fir_apply(&ir(&[1., 2.]), &sig(&[1., 0., 0.])).samples(), &[1., 2., 0.]);
        assert_eq!(fir_apply(&ir(&[1.]), &sig(&[3., -1., 2.])).samples(), &[3., -1., 2.]);
        assert_eq!(fir_apply(&ir(&[1., 1.]), &sig(&[1., 2., 3.])).samples(), &[1., 3., 5.]);
    }

    #[test]
    fn identity_branch_equals_fir() {
        let g = ir(&[0.5, -0.2, 0.1]);
        let u = sig(&[1.0, -2.0, 0.5, 3.0, 0.0, 1.5]);
        let op = NfirOperator::fir(g.clone(), TS).unwrap();
        assert_eq!(op.apply(&u).unwrap(), fir_apply(&g, &u));
    }

    #[test]
    fn hand_evaluated_nfir() {
        let b = Branch { impulse: ir(&[1., 1.]), lifting: linear_lifting() };
        let op = NfirOperator::new(vec![b], None, TS).unwrap();
        assert_eq!(op.apply(&sig(&[1., 2., 0.])).unwrap().samples(), &[1., 10., 0.]);
    }

    #[test]
    fn zero_input_zero_output() {
        let op = NfirOperator::new(
            vec![
                Branch { impulse: ir(&[1., -0.3, 0.2]), lifting: LiftingFunction::volcano(0.5, 0.3).unwrap() },
                Branch { impulse: ir(&[0.2, 0.1, 0.0]), lifting: LiftingFunction::gaussian_window(vec![1.0, 2.0], 3.0).unwrap() },
            ],
            Some(0.7),
            TS,
        )
        .unwrap();
        let y = op.apply(&Signal::zeros(8, TS).unwrap()).unwrap();
        assert!(y.samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn integrator_branch() {
        let op = NfirOperator::new(
            vec![Branch { impulse: ir(&[0.0]), lifting: LiftingFunction::identity() }],
            Some(2.0),
            TS,
        )
        .unwrap();
        let y = op.apply(&sig(&[1., 2., 3.])).unwrap();
        let expected = [0.2, 0.6, 1.2];
        for (a, b) in y.samples().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(NfirOperator::new(op.branches().to_vec(), Some(-1.0), TS).is_err());
    }

    #[test]
    fn external_liftings() {
        let g = ir(&[0.4, 0.2]);
        let u = sig(&[1.0, -1.0, 2.0, 0.5]);
        let q = sig(&[3.0, 3.0, 3.0, 3.0]);
        let plain = NfirOperator::fir(g.clone(), TS).unwrap();
        assert_eq!(plain.apply_external(&u, &q).unwrap(), plain.apply(&u).unwrap());

        let at_setpoint = NfirOperator::new(
            vec![Branch { impulse: g.clone(), lifting: LiftingFunction::external_gaussian(3.0, 1.0, 1).unwrap() }],
            None,
            TS,
        )
        .unwrap();
        assert_eq!(at_setpoint.apply_external(&u, &q).unwrap(), fir_apply(&g, &u));
        assert!(at_setpoint.apply(&u).is_err());

        let far = NfirOperator::new(
            vec![Branch { impulse: g.clone(), lifting: LiftingFunction::external_gaussian(5.0, 100.0, 1).unwrap() }],
            None,
            TS,
        )
        .unwrap();
        let w = (-25.0f64 / 200.0).exp();
        let y = far.apply_external(&u, &Signal::zeros(4, TS).unwrap()).unwrap();
        let expected = fir_apply(&g, &u);
        for (a, b) in y.samples().iter().zip(expected.samples()) {
            assert!((a - w * w * b).abs() < 1e-14);
        }
        assert!(far.apply_external(&u, &Signal::zeros(3, TS).unwrap()).is_err());
    }

    fn random_operator(rng: &mut ChaCha8Rng, integrator: bool) -> NfirOperator {
        let m = rng.random_range(1..6);
        let nb = rng.random_range(1..4);
        let branches = (0..nb)
            .map(|j| {
                let lifting = match j % 3 {
                    0 => LiftingFunction::identity(),
                    1 => LiftingFunction::volcano(rng.random_range(-1.0..1.0), rng.random_range(0.1..2.0)).unwrap(),
                    _ => {
                        let r = rng.random_range(1..4);
                        LiftingFunction::gaussian_window((0..r).map(|_| rng.random_range(-1.0..1.0)).collect(), 2.0)
                            .unwrap()
                    }
                };
                Branch { impulse: ImpulseResponse::new((0..m).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(), lifting }
            })
            .collect();
        NfirOperator::new(branches, integrator.then(|| rng.random_range(0.0..2.0)), TS).unwrap()
    }

    #[test]
    fn stepper_matches_batch_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let op = random_operator(&mut rng, true);
            let u = Signal::from_fn(40, TS, |_| rng.random_range(-2.0..2.0)).unwrap();
            let batch = op.apply(&u).unwrap();
            let mut st = op.stepper();
            for t in 0..u.len() {
                assert_eq!(st.step(u.samples()[t], None), batch.samples()[t]);
            }
        }
    }

    proptest! {
        #[test]
        fn causality(seed in 0u64..1000, cut in 0usize..30, bump in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let op = random_operator(&mut rng, true);
            let u = Signal::from_fn(30, TS, |_| rng.random_range(-2.0..2.0)).unwrap();
            let mut v = u.samples().to_vec();
            for x in v.iter_mut().skip(cut + 1) { *x += bump; }
            let y1 = op.apply(&u).unwrap();
            let y2 = op.apply(&sig(&v)).unwrap();
            prop_assert_eq!(&y1.samples()[..=cut], &y2.samples()[..=cut]);
        }

        #[test]
        fn finite_memory(seed in 0u64..1000, t in 10usize..30, bump in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let op = random_operator(&mut rng, false);
            let u = Signal::from_fn(30, TS, |_| rng.random_range(-2.0..2.0)).unwrap();
            let depth = op.memory() - 1;
            prop_assume!(t > depth);
            let mut v = u.samples().to_vec();
            for x in v.iter_mut().take(t - depth) { *x += bump; }
            let y1 = op.apply(&u).unwrap();
            let y2 = op.apply(&sig(&v)).unwrap();
            prop_assert_eq!(y1.samples()[t], y2.samples()[t]);
        }

        #[test]
        fn linear_in_coefficients(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let op = random_operator(&mut rng, true);
            let n = op.parameters().len();
            let t1: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let t2: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let (a, b) = (a.abs(), b.abs()); // integrator gain must stay nonnegative
            let mix: Vec<f64> = t1.iter().zip(&t2).map(|(x, y)| a * x + b * y).collect();
            let u = Signal::from_fn(25, TS, |_| rng.random_range(-2.0..2.0)).unwrap();
            let y1 = op.with_parameters(&t1).unwrap().apply(&u).unwrap();
            let y2 = op.with_parameters(&t2).unwrap().apply(&u).unwrap();
            let ym = op.with_parameters(&mix).unwrap().apply(&u).unwrap();
            for i in 0..u.len() {
                let lin = a * y1.samples()[i] + b * y2.samples()[i];
                prop_assert!((ym.samples()[i] - lin).abs() <= 1e-10 * (1.0 + lin.abs()));
            }
        }
    }
}
