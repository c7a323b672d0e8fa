//! Linear passivity constraints for FIR coefficient vectors and the checks
//! used to certify trained operators.
//!
//! A branch with impulse response `g` is passive when the symmetrised
//! convolution `Gamma(g) + Gamma(g)^T` is positive semidefinite, which for FIR
//! filters is equivalent to `Re G(e^{iw}) >= 0` on `[0, pi]`. Synthesis
//! enforces `sum_k 2 cos(h pi k / H) g(k) >= eps` at `H + 1` frequencies
//! together with the decay bounds `|g(k)| <= rho rho_j^k`; `eps` absorbs the
//! worst variation between neighbouring samples.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::operators::{ImpulseResponse, NfirOperator};
use crate::signals::Signal;

/// Largest Toeplitz truncation the eigenvalue oracle accepts.
pub const TOEPLITZ_MAX_N: usize = 512;
/// Absolute tolerance used when asserting nonnegative margins.
pub const MARGIN_TOL: f64 = 1e-8;
/// Relative tolerance (times the largest squared input norm) for supply rates.
pub const SUPPLY_RATE_REL_TOL: f64 = 1e-9;

/// Hyperparameters of the passivity-constrained synthesis problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PassivityConfig {
    /// Frequency sampling horizon `H`.
    pub h_samples: usize,
    /// Coefficient bound `rho`.
    pub rho: f64,
    /// Per-branch decay rates; a single entry is broadcast to every branch.
    pub rho_decay: Vec<f64>,
    /// Per-branch margins replacing the analytic bound; a single entry is broadcast.
    #[serde(default)]
    pub epsilon_override: Option<Vec<f64>>,
}

impl PassivityConfig {
    pub fn new(h_samples: usize, rho: f64, rho_decay: f64) -> Self {
        Self { h_samples, rho, rho_decay: vec![rho_decay], epsilon_override: None }
    }

    pub fn with_epsilon(mut self, eps: f64) -> Self {
        self.epsilon_override = Some(vec![eps]);
        self
    }

    pub fn validate(&self, n_branches: usize) -> Result<()> {
        if self.h_samples == 0 {
            return param("frequency horizon H must be at least 1");
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return param(format!("rho must be positive, got {}", self.rho));
        }
        let decay = broadcast(&self.rho_decay, n_branches, "rho_decay")?;
        if let Some(bad) = decay.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return param(format!("rho_j must lie in (0, 1], got {bad}"));
        }
        if let Some(eps) = &self.epsilon_override {
            let eps = broadcast(eps, n_branches, "epsilon_override")?;
            if let Some(bad) = eps.iter().find(|e| !(**e >= 0.0 && e.is_finite())) {
                return param(format!("epsilon overrides must be finite and >= 0, got {bad}"));
            }
        }
        Ok(())
    }

    pub fn decay_rates(&self, n_branches: usize) -> Result<Vec<f64>> {
        broadcast(&self.rho_decay, n_branches, "rho_decay")
    }

    /// Margins `eps_j`: the override when given, the analytic bound otherwise.
    pub fn epsilons(&self, m: usize, n_branches: usize) -> Result<Vec<f64>> {
        self.validate(n_branches)?;
        match &self.epsilon_override {
            Some(eps) => broadcast(eps, n_branches, "epsilon_override"),
            None => self
                .decay_rates(n_branches)?
                .iter()
                .map(|&rj| epsilon_bound(self.rho, rj, m, self.h_samples))
                .collect(),
        }
    }
}

fn broadcast(values: &[f64], n: usize, what: &str) -> Result<Vec<f64>> {
    match values.len() {
        1 => Ok(vec![values[0]; n]),
        len if len == n => Ok(values.to_vec()),
        len => param(format!("{what} has {len} entries; expected 1 or {n}")),
    }
}

/// Analytic margin `pi rho S (m - 1) / (2H)` with `S = sum_{k<m} rho_j^k`.
pub fn epsilon_bound(rho: f64, rho_j: f64, m: usize, h: usize) -> Result<f64> {
    if !(rho > 0.0 && rho.is_finite()) {
        return param(format!("rho must be positive, got {rho}"));
    }
    if !(rho_j > 0.0 && rho_j <= 1.0) {
        return param(format!("rho_j must lie in (0, 1], got {rho_j}"));
    }
    if m == 0 || h == 0 {
        return param("m and H must be at least 1");
    }
    let s = if rho_j == 1.0 { m as f64 } else { (1.0 - rho_j.powi(m as i32)) / (1.0 - rho_j) };
    Ok(PI * rho * s * (m as f64 - 1.0) / (2.0 * h as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    /// `coeffs . x >= bound`
    Ge,
    /// `coeffs . x <= bound`
    Le,
}

/// Where a constraint row comes from; used to explain infeasibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConstraintClass {
    Frequency { branch: usize, h: usize },
    Decay { branch: usize, k: usize },
    Integrator,
    Other,
}

impl ConstraintClass {
    /// Coarse label for reporting (`frequency[j]`, `decay[j]`, ...).
    pub fn family(&self) -> String {
        match self {
            Self::Frequency { branch, .. } => format!("frequency[{branch}]"),
            Self::Decay { branch, .. } => format!("decay[{branch}]"),
            Self::Integrator => "integrator".into(),
            Self::Other => "other".into(),
        }
    }
}

/// One row `sum_i coeffs[i] x[start + i]  (>= | <=)  bound`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintRow {
    pub start: usize,
    pub coeffs: Vec<f64>,
    pub sense: Sense,
    pub bound: f64,
    pub class: ConstraintClass,
}

impl ConstraintRow {
    pub fn end(&self) -> usize {
        self.start + self.coeffs.len()
    }

    pub fn lhs(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().zip(&x[self.start..self.end()]).map(|(c, v)| c * v).sum()
    }

    /// Amount by which `x` violates the row (zero when satisfied).
    pub fn violation(&self, x: &[f64]) -> f64 {
        let lhs = self.lhs(x);
        match self.sense {
            Sense::Ge => (self.bound - lhs).max(0.0),
            Sense::Le => (lhs - self.bound).max(0.0),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinearConstraintSet {
    pub rows: Vec<ConstraintRow>,
}

impl LinearConstraintSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, row: ConstraintRow) {
        self.rows.push(row);
    }

    pub fn extend(&mut self, other: LinearConstraintSet) {
        self.rows.extend(other.rows);
    }

    /// Checks indices against `n_vars` and that all data are finite.
    pub fn validate(&self, n_vars: usize) -> Result<()> {
        for (i, r) in self.rows.iter().enumerate() {
            if r.end() > n_vars {
                return param(format!("constraint row {i} references variable {} of {n_vars}", r.end() - 1));
            }
            if !r.bound.is_finite() || r.coeffs.iter().any(|c| !c.is_finite()) {
                return param(format!("constraint row {i} has non-finite data"));
            }
        }
        Ok(())
    }

    pub fn max_violation(&self, x: &[f64]) -> f64 {
        self.rows.iter().map(|r| r.violation(x)).fold(0.0, f64::max)
    }
}

/// `cos(h pi k / H)` with the angle reduced exactly in integers first.
fn grid_cos(h: usize, k: usize, big_h: usize) -> f64 {
    let r = (h * k) % (2 * big_h);
    (PI * r as f64 / big_h as f64).cos()
}

/// `(H + 1) n_b` rows `sum_k 2 cos(h pi k / H) g_j(k) >= eps_j`, branch `j`
/// occupying variables `offsets[j]..offsets[j] + m`.
pub fn frequency_constraints(m: usize, h: usize, eps: &[f64], offsets: &[usize]) -> LinearConstraintSet {
    assert_eq!(eps.len(), offsets.len(), "one margin per branch");
    let table: Vec<Vec<f64>> = (0..=h).map(|hh| (0..m).map(|k| 2.0 * grid_cos(hh, k, h)).collect()).collect();
    let mut set = LinearConstraintSet::new();
    for (j, (&e, &off)) in eps.iter().zip(offsets).enumerate() {
        for (hh, coeffs) in table.iter().enumerate() {
            set.push(ConstraintRow {
                start: off,
                coeffs: coeffs.clone(),
                sense: Sense::Ge,
                bound: e,
                class: ConstraintClass::Frequency { branch: j, h: hh },
            });
        }
    }
    set
}

/// `2 m n_b` rows `-rho rho_j^k <= g_j(k) <= rho rho_j^k`.
pub fn decay_bounds(m: usize, rho: f64, rho_j: &[f64], offsets: &[usize]) -> LinearConstraintSet {
    assert_eq!(rho_j.len(), offsets.len(), "one decay rate per branch");
    let mut set = LinearConstraintSet::new();
    for (j, (&rj, &off)) in rho_j.iter().zip(offsets).enumerate() {
        for k in 0..m {
            let b = rho * rj.powi(k as i32);
            let class = ConstraintClass::Decay { branch: j, k };
            set.push(ConstraintRow { start: off + k, coeffs: vec![1.0], sense: Sense::Le, bound: b, class });
            set.push(ConstraintRow { start: off + k, coeffs: vec![1.0], sense: Sense::Ge, bound: -b, class });
        }
    }
    set
}

/// All passivity rows for `n_branches` branches of order `m` laid out contiguously from 0.
pub fn passivity_constraints(cfg: &PassivityConfig, m: usize, n_branches: usize) -> Result<LinearConstraintSet> {
    let offsets: Vec<usize> = (0..n_branches).map(|j| j * m).collect();
    let eps = cfg.epsilons(m, n_branches)?;
    let mut set = frequency_constraints(m, cfg.h_samples, &eps, &offsets);
    set.extend(decay_bounds(m, cfg.rho, &cfg.decay_rates(n_branches)?, &offsets));
    Ok(set)
}

/// `G(e^{iw}) = sum_k g(k) e^{-iwk}`.
pub fn frequency_response(g: &[f64], omega: f64) -> Complex64 {
    g.iter().enumerate().fold(Complex64::new(0.0, 0.0), |acc, (k, &c)| {
        let a = omega * k as f64;
        acc + Complex64::new(c * a.cos(), -c * a.sin())
    })
}

/// Uniform grid of `n` points on `[0, pi]` including both ends.
pub fn omega_grid(n: usize) -> Vec<f64> {
    assert!(n >= 2, "frequency grid needs at least two points");
    (0..n).map(|i| PI * i as f64 / (n - 1) as f64).collect()
}

/// Nyquist samples `(w, Re G, Im G)` on a uniform `[0, pi]` grid.
pub fn nyquist(g: &ImpulseResponse, grid: usize) -> Vec<(f64, f64, f64)> {
    omega_grid(grid)
        .into_par_iter()
        .map(|w| {
            let z = frequency_response(g.coeffs(), w);
            (w, z.re, z.im)
        })
        .collect()
}

/// `min_w sum_k 2 g(k) cos(w k)` over a uniform grid of `grid` points on `[0, pi]`.
pub fn verify_frequency_margin(g: &ImpulseResponse, grid: usize) -> f64 {
    let c = g.coeffs();
    omega_grid(grid)
        .into_par_iter()
        .map(|w| c.iter().enumerate().map(|(k, &gk)| 2.0 * gk * (w * k as f64).cos()).sum::<f64>())
        .reduce(|| f64::INFINITY, f64::min)
}

/// Default dense verification grid for horizon `H`.
pub fn default_verification_grid(h: usize) -> usize {
    (20 * h).max(2)
}

/// Smallest eigenvalue of `Gamma_n(g) + Gamma_n(g)^T` for the `n x n` lower
/// triangular Toeplitz convolution matrix.
pub fn toeplitz_min_eig(g: &ImpulseResponse, n: usize) -> Result<f64> {
    if !(2..=TOEPLITZ_MAX_N).contains(&n) {
        return param(format!("Toeplitz size must be in 2..={TOEPLITZ_MAX_N}, got {n}"));
    }
    let c = g.coeffs();
    let sym = DMatrix::from_fn(n, n, |i, j| {
        let d = i.abs_diff(j);
        let v = c.get(d).copied().unwrap_or(0.0);
        if d == 0 {
            2.0 * v
        } else {
            v
        }
    });
    Ok(sym.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min))
}

/// `min_{u, tau} sum_{t <= tau} u(t) y(t)` with `y = apply(u)`.
pub fn empirical_supply_rate<F>(apply: F, inputs: &[Signal]) -> Result<f64>
where
    F: Fn(&Signal) -> Result<Signal>,
{
    if inputs.is_empty() {
        return param("supply rate needs at least one input");
    }
    let mut worst = f64::INFINITY;
    for u in inputs {
        let y = apply(u)?;
        u.check_compatible(&y)?;
        let mut acc = 0.0;
        for (a, b) in u.samples().iter().zip(y.samples()) {
            acc += a * b;
            worst = worst.min(acc);
        }
    }
    Ok(worst)
}

/// Largest `||u||^2` over a set of inputs; scales supply-rate tolerances.
pub fn max_norm_sq(inputs: &[Signal]) -> f64 {
    inputs.iter().map(|u| u.norm().powi(2)).fold(0.0, f64::max)
}

/// Per-branch verification of an operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchVerification {
    pub branch: usize,
    pub freq_margin: f64,
    pub toeplitz_min_eig: f64,
    pub n_used: usize,
}

impl BranchVerification {
    pub fn passes(&self) -> bool {
        self.freq_margin >= -MARGIN_TOL && self.toeplitz_min_eig >= -MARGIN_TOL
    }
}

/// Frequency margin on `grid` points and the Toeplitz oracle at size `n`
/// (clamped to the oracle range) for every branch.
pub fn verify_operator(op: &NfirOperator, grid: usize, n: usize) -> Result<Vec<BranchVerification>> {
    let n_used = n.clamp(2, TOEPLITZ_MAX_N);
    op.branches()
        .par_iter()
        .enumerate()
        .map(|(j, b)| {
            Ok(BranchVerification {
                branch: j,
                freq_margin: verify_frequency_margin(&b.impulse, grid),
                toeplitz_min_eig: toeplitz_min_eig(&b.impulse, n_used)?,
                n_used,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{Branch, LiftingFunction};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ir(v: &[f64]) -> ImpulseResponse {
        ImpulseResponse::new(v.to_vec()).unwrap()
    }

    #[test]
    fn epsilon_examples() {
        assert!((epsilon_bound(1.0, 1.0, 3, 4).unwrap() - 3.0 * PI / 4.0).abs() < 1e-12);
        assert!((epsilon_bound(100.0, 0.975, 100, 200).unwrap() - 2862.8).abs() < 0.1);
        assert_eq!(epsilon_bound(7.0, 0.3, 1, 10).unwrap(), 0.0);
        assert!(epsilon_bound(0.0, 0.5, 3, 4).is_err());
        assert!(epsilon_bound(1.0, 1.5, 3, 4).is_err());
        assert!(epsilon_bound(1.0, 0.5, 3, 0).is_err());
    }

    #[test]
    fn frequency_rows() {
        let set = frequency_constraints(1, 5, &[0.1], &[0]);
        assert_eq!(set.len(), 6);
        assert!(set.rows.iter().all(|r| r.coeffs == vec![2.0]));
        let set = frequency_constraints(3, 4, &[0.5, 0.5], &[0, 3]);
        assert_eq!(set.len(), 10);
        let identity = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        assert_eq!(set.max_violation(&identity), 0.0);
        let delay = frequency_constraints(2, 4, &[0.0], &[0]);
        let last = delay.rows.last().unwrap();
        assert_eq!(last.lhs(&[0.0, 1.0]), -2.0);
        assert!(delay.max_violation(&[0.0, 1.0]) > 0.0);
    }

    #[test]
    fn decay_rows() {
        let set = decay_bounds(3, 2.0, &[0.5], &[0]);
        assert_eq!(set.len(), 6);
        let k2: Vec<_> = set.rows.iter().filter(|r| r.start == 2).collect();
        assert_eq!(k2.len(), 2);
        assert!(k2.iter().all(|r| r.bound.abs() == 0.5));
        let set = decay_bounds(4, 200.0, &[0.99, 0.99], &[0, 4]);
        assert_eq!(set.len(), 16);
        assert_eq!(set.rows[0].bound, 200.0);
        let unit = decay_bounds(5, 1.0, &[1.0], &[0]);
        assert!(unit.rows.iter().all(|r| r.bound.abs() == 1.0));
    }

    #[test]
    fn margin_examples() {
        assert!((verify_frequency_margin(&ir(&[1.0, 0.5]), 1000) - 1.0).abs() < 1e-12);
        assert_eq!(verify_frequency_margin(&ir(&[1.0]), 50), 2.0);
        assert!((verify_frequency_margin(&ir(&[0.0, 1.0]), 50) + 2.0).abs() < 1e-12);
    }

    #[test]
    fn toeplitz_examples() {
        let e = toeplitz_min_eig(&ir(&[1.0, 0.5]), 8).unwrap();
        assert!((e - (2.0 + (PI * 8.0 / 9.0).cos())).abs() < 1e-12);
        assert!(e >= 1.0);
        assert!((toeplitz_min_eig(&ir(&[1.0]), 17).unwrap() - 2.0).abs() < 1e-12);
        assert!((toeplitz_min_eig(&ir(&[0.0, 1.0]), 2).unwrap() + 1.0).abs() < 1e-12);
        assert!(toeplitz_min_eig(&ir(&[1.0]), 1).is_err());
        assert!(toeplitz_min_eig(&ir(&[1.0]), 513).is_err());
    }

    #[test]
    fn supply_rate_examples() {
        let u = Signal::new(vec![1.0, -1.0], 1.0).unwrap();
        let delay = NfirOperator::fir(ir(&[0.0, 1.0]), 1.0).unwrap();
        assert_eq!(empirical_supply_rate(|s| delay.apply(s), &[u.clone()]).unwrap(), -1.0);
        let v = Signal::new(vec![1.0, 2.0, -3.0], 1.0).unwrap();
        assert_eq!(empirical_supply_rate(|s| Ok(s.clone()), &[v.clone()]).unwrap(), 1.0);
        assert_eq!(empirical_supply_rate(|s| s.map(|x| 2.0 * x), &[v]).unwrap(), 2.0);
        assert!(empirical_supply_rate(|s| Ok(s.clone()), &[]).is_err());
    }

    #[test]
    fn config_broadcast_and_validation() {
        let cfg = PassivityConfig::new(200, 100.0, 0.975);
        let eps = cfg.epsilons(100, 2).unwrap();
        assert_eq!(eps.len(), 2);
        assert!((eps[0] - 2862.8).abs() < 0.1);
        assert_eq!(cfg.clone().with_epsilon(1e-3).epsilons(100, 3).unwrap(), vec![1e-3; 3]);
        let mut bad = cfg.clone();
        bad.rho_decay = vec![0.9, 0.9];
        assert!(bad.epsilons(10, 3).is_err());
        bad.rho_decay = vec![1.2];
        assert!(bad.validate(1).is_err());
        let set = passivity_constraints(&cfg.with_epsilon(0.0), 4, 2).unwrap();
        assert_eq!(set.len(), 2 * 201 + 2 * 4 * 2);
        set.validate(8).unwrap();
        assert!(set.validate(7).is_err());
    }

    fn random_passive_fir(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
        // Shift a random filter by its worst dense-grid margin so it becomes positive real.
        let mut g: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let margin = verify_frequency_margin(&ImpulseResponse::new(g.clone()).unwrap(), 4000);
        if margin < 0.0 {
            g[0] += -margin / 2.0 + 0.05;
        }
        g
    }

    #[test]
    fn frequency_and_toeplitz_oracles_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        for _ in 0..300 {
            let m = rng.random_range(1..=8);
            let g = ImpulseResponse::new((0..m).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let freq = (0..10_000)
                .map(|i| frequency_response(g.coeffs(), PI * i as f64 / 9_999.0).re)
                .fold(f64::INFINITY, f64::min);
            let eig = toeplitz_min_eig(&g, 256).unwrap();
            if freq.abs() > 1e-3 && eig.abs() > 1e-3 {
                assert_eq!(freq > 0.0, eig > 0.0, "g = {:?}", g.coeffs());
                checked += 1;
            }
        }
        assert!(checked > 200);
    }

    #[test]
    fn soundness_chain() {
        // Any filter satisfying the sampled rows with the analytic margin is passive.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (rho, rj, h): (f64, f64, usize) = (1.0, 0.6, 40);
        for _ in 0..200 {
            let m = rng.random_range(2..=10);
            let g: Vec<f64> = (0..m).map(|k| rng.random_range(-1.0..1.0) * rho * rj.powi(k as i32)).collect();
            let eps = epsilon_bound(rho, rj, m, h).unwrap();
            let rows = frequency_constraints(m, h, &[eps], &[0]);
            if rows.max_violation(&g) > 0.0 {
                continue;
            }
            let g = ImpulseResponse::new(g).unwrap();
            assert!(verify_frequency_margin(&g, default_verification_grid(h)) >= 0.0);
            assert!(toeplitz_min_eig(&g, 256).unwrap() >= -1e-8);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn passive_branches_give_nonnegative_supply(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let nb = rng.random_range(1..=3);
            let m = rng.random_range(1..=8);
            let branches = (0..nb).map(|j| Branch {
                impulse: ImpulseResponse::new(random_passive_fir(&mut rng, m)).unwrap(),
                lifting: match j {
                    0 => LiftingFunction::volcano(rng.random_range(-1.0..1.0), rng.random_range(0.1..2.0)).unwrap(),
                    1 => LiftingFunction::gaussian_window(vec![0.3, -0.2], 0.5).unwrap(),
                    _ => LiftingFunction::external_gaussian(1.0, 0.3, 2).unwrap(),
                },
            }).collect();
            let op = NfirOperator::new(branches, Some(rng.random_range(0.0..1.0)), 0.1).unwrap();
            for b in op.branches() {
                prop_assume!(verify_frequency_margin(&b.impulse, 4000) >= 0.0);
            }
            let inputs: Vec<Signal> = (0..20)
                .map(|_| Signal::from_fn(rng.random_range(5..120), 0.1, |_| rng.random_range(-3.0..3.0)).unwrap())
                .collect();
            let tol = SUPPLY_RATE_REL_TOL * max_norm_sq(&inputs);
            let q_seed = rng.random::<u64>();
            let rate = empirical_supply_rate(|u| {
                let mut qr = ChaCha8Rng::seed_from_u64(q_seed);
                let q = Signal::from_fn(u.len(), 0.1, |_| qr.random_range(-2.0..2.0))?;
                op.apply_external(u, &q)
            }, &inputs).unwrap();
            prop_assert!(rate >= -tol, "rate {rate}");
        }
    }
}
