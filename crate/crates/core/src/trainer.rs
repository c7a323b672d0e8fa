//! Assembly and solution of the FIR, NFIR, iNFIR and externally driven NFIR
//! synthesis problems.
//!
//! Decision variables are ordered `(g_0(0..m), ..., g_{n_b-1}(0..m), alpha)`,
//! with `alpha` present only when the integrator branch is enabled.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim, param, Error, Result};
use crate::operators::{Branch, ImpulseResponse, LiftingFunction, NfirOperator};
use crate::passivity::{
    passivity_constraints, ConstraintClass, ConstraintRow, LinearConstraintSet, PassivityConfig, Sense,
};
use crate::qp::{solve, QuadraticProgram, SolveStatus, SolverReport, SolverSettings};
use crate::signals::{same_ts, Signal};

/// One input/output record, optionally with the external scheduling signal.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub u: Signal,
    pub y: Signal,
    pub q: Option<Signal>,
}

impl TrainingPair {
    pub fn new(u: Signal, y: Signal, q: Option<Signal>) -> Result<Self> {
        u.check_compatible(&y)?;
        if let Some(q) = &q {
            u.check_compatible(q)?;
        }
        Ok(Self { u, y, q })
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pairs: Vec<TrainingPair>,
}

impl TrainingSet {
    pub fn new(pairs: Vec<TrainingPair>) -> Result<Self> {
        let Some(first) = pairs.first() else {
            return param("training set needs at least one pair");
        };
        let ts = first.u.ts();
        let external = first.q.is_some();
        for (i, p) in pairs.iter().enumerate() {
            if !same_ts(p.u.ts(), ts) {
                return dim(format!("pair {i} has ts {} but pair 0 has {ts}", p.u.ts()));
            }
            if p.q.is_some() != external {
                return dim("either every pair carries an external signal or none does");
            }
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[TrainingPair] {
        &self.pairs
    }

    pub fn ts(&self) -> f64 {
        self.pairs[0].u.ts()
    }

    pub fn has_external(&self) -> bool {
        self.pairs[0].q.is_some()
    }

    pub fn min_len(&self) -> usize {
        self.pairs.iter().map(TrainingPair::len).min().unwrap_or(0)
    }
}

/// Model class and hyperparameters of one synthesis problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisSpec {
    pub liftings: Vec<LiftingFunction>,
    /// Filter order `m`.
    pub m: usize,
    /// Ridge weight on filter coefficients.
    pub gamma: f64,
    /// Passivity constraints; `None` gives an unconstrained fit.
    #[serde(default)]
    pub passivity: Option<PassivityConfig>,
    #[serde(default)]
    pub integrator: bool,
    /// Drop the first `m + R - 2` output samples of every pair.
    #[serde(default)]
    pub burn_in: bool,
}

impl SynthesisSpec {
    pub fn fir(m: usize, gamma: f64, passivity: Option<PassivityConfig>) -> Self {
        Self { liftings: vec![LiftingFunction::identity()], m, gamma, passivity, integrator: false, burn_in: false }
    }

    pub fn n_branches(&self) -> usize {
        self.liftings.len()
    }

    pub fn n_vars(&self) -> usize {
        self.n_branches() * self.m + usize::from(self.integrator)
    }

    fn window(&self) -> usize {
        self.liftings.iter().map(|f| f.r1.max(f.r2)).max().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.liftings.is_empty() {
            return param("synthesis needs at least one lifting function");
        }
        if self.m == 0 {
            return param("filter order m must be at least 1");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return param(format!("gamma must be finite and >= 0, got {}", self.gamma));
        }
        for f in &self.liftings {
            f.validate()?;
        }
        if let Some(p) = &self.passivity {
            p.validate(self.n_branches())?;
        }
        Ok(())
    }

    /// Operator skeleton with zero coefficients, used to map parameters back.
    fn skeleton(&self, ts: f64) -> Result<NfirOperator> {
        let branches = self
            .liftings
            .iter()
            .map(|f| Ok(Branch { impulse: ImpulseResponse::new(vec![0.0; self.m])?, lifting: f.clone() }))
            .collect::<Result<Vec<_>>>()?;
        NfirOperator::new(branches, self.integrator.then_some(0.0), ts)
    }
}

/// Regressor block of a single pair: one row per retained output sample.
fn pair_block(pair: &TrainingPair, spec: &SynthesisSpec, skip: usize) -> (DMatrix<f64>, Vec<f64>) {
    let n = pair.len();
    let m = spec.m;
    let rows = n.saturating_sub(skip);
    let us = pair.u.samples();
    let mut a = DMatrix::zeros(rows, spec.n_vars());
    for (j, f) in spec.liftings.iter().enumerate() {
        let phi = f.weights(&pair.u, pair.q.as_ref());
        let gated: Vec<f64> = phi.iter().zip(us).map(|(p, u)| p * u).collect();
        for t in skip..n {
            for k in 0..m.min(t + 1) {
                a[(t - skip, j * m + k)] = phi[t] * gated[t - k];
            }
        }
    }
    if spec.integrator {
        let col = spec.n_branches() * m;
        let ts = pair.u.ts();
        let mut sum = 0.0;
        for (t, u) in us.iter().enumerate() {
            sum += u;
            if t >= skip {
                a[(t - skip, col)] = ts * sum;
            }
        }
    }
    (a, pair.y.samples()[skip.min(n)..].to_vec())
}

/// Stacked regressor `A` and target `b` over all pairs.
pub fn regressor(set: &TrainingSet, spec: &SynthesisSpec) -> Result<(DMatrix<f64>, DVector<f64>)> {
    spec.validate()?;
    if spec.m > set.min_len() {
        return param(format!("filter order m = {} exceeds the shortest pair length {}", spec.m, set.min_len()));
    }
    let needs_q = spec.liftings.iter().any(LiftingFunction::is_external);
    if needs_q && !set.has_external() {
        return dim("externally driven liftings need an external signal in every pair");
    }
    let skip = if spec.burn_in { spec.m + spec.window() - 2 } else { 0 };
    let blocks: Vec<(DMatrix<f64>, Vec<f64>)> = set.pairs.par_iter().map(|p| pair_block(p, spec, skip)).collect();
    let total: usize = blocks.iter().map(|(a, _)| a.nrows()).sum();
    if total == 0 {
        return param("burn-in discards every sample");
    }
    let mut a = DMatrix::zeros(total, spec.n_vars());
    let mut b = DVector::zeros(total);
    let mut row = 0;
    for (blk, y) in blocks {
        a.view_mut((row, 0), blk.shape()).copy_from(&blk);
        b.rows_mut(row, y.len()).copy_from_slice(&y);
        row += y.len();
    }
    Ok((a, b))
}

/// Constraint rows of the synthesis problem (passivity rows plus `alpha >= 0`).
///
/// The external signal never appears here: externally driven problems share
/// the constraint set of the plain problem.
pub fn constraints(spec: &SynthesisSpec) -> Result<LinearConstraintSet> {
    let mut set = match &spec.passivity {
        Some(cfg) => passivity_constraints(cfg, spec.m, spec.n_branches())?,
        None => LinearConstraintSet::new(),
    };
    if spec.integrator {
        set.push(ConstraintRow {
            start: spec.n_branches() * spec.m,
            coeffs: vec![1.0],
            sense: Sense::Ge,
            bound: 0.0,
            class: ConstraintClass::Integrator,
        });
    }
    Ok(set)
}

pub fn assemble_regressor(set: &TrainingSet, spec: &SynthesisSpec) -> Result<QuadraticProgram> {
    let (a, b) = regressor(set, spec)?;
    let mut ridge = vec![spec.gamma; spec.n_vars()];
    if spec.integrator {
        ridge[spec.n_branches() * spec.m] = 0.0;
    }
    QuadraticProgram::new(a, b, ridge, constraints(spec)?)
}

/// Trains an operator. Infeasible problems return [`Error::Infeasible`]
/// naming the constraint families in the certificate.
pub fn train(set: &TrainingSet, spec: &SynthesisSpec, settings: &SolverSettings) -> Result<(NfirOperator, SolverReport)> {
    let qp = assemble_regressor(set, spec)?;
    let report = solve(&qp, settings)?;
    if report.status == SolveStatus::Infeasible {
        let families: BTreeSet<String> =
            report.infeasible_rows.iter().map(|&i| qp.constraints.rows[i].class.family()).collect();
        let list: Vec<String> = families.into_iter().collect();
        return Err(Error::Infeasible(format!("conflicting constraint classes: {}", list.join(", "))));
    }
    let mut theta = report.solution.clone();
    if spec.integrator {
        // Remove round-off below the alpha >= 0 bound.
        let i = spec.n_branches() * spec.m;
        theta[i] = theta[i].max(0.0);
    }
    let op = spec.skeleton(set.ts())?.with_parameters(&theta)?;
    Ok((op, report))
}

/// RMSE of `op` over every pair of a set.
pub fn evaluate_rmse(op: &NfirOperator, set: &TrainingSet) -> Result<f64> {
    let mut se = 0.0;
    let mut count = 0usize;
    for p in set.pairs() {
        let y = match &p.q {
            Some(q) => op.apply_external(&p.u, q)?,
            None => op.apply(&p.u)?,
        };
        se += y.samples().iter().zip(p.y.samples()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        count += p.len();
    }
    Ok((se / count as f64).sqrt())
}
