//! Dense convex QP solver for regularised least squares under linear
//! inequality constraints:
//!
//! ```text
//! minimize ||b - A x||^2 + sum_i ridge_i x_i^2   subject to   rows of C x >= / <= bound
//! ```
//!
//! The iteration is an operator-splitting ADMM on `l <= C x <= u` with
//! over-relaxation, Ruiz equilibration, adaptive step size and a cached
//! Cholesky factor. An active-set polish step solves the KKT system of the
//! identified active rows to reach tight residuals; when the identified set
//! is wrong, a dual active-set solve supplies the correct one.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{dim, param, Result};
use crate::passivity::{LinearConstraintSet, Sense};

mod dual_active_set;

/// Least-squares QP with per-variable ridge weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProgram {
    pub regressor: DMatrix<f64>,
    pub target: DVector<f64>,
    pub ridge: Vec<f64>,
    pub constraints: LinearConstraintSet,
}

impl QuadraticProgram {
    pub fn new(
        regressor: DMatrix<f64>,
        target: DVector<f64>,
        ridge: Vec<f64>,
        constraints: LinearConstraintSet,
    ) -> Result<Self> {
        let qp = Self { regressor, target, ridge, constraints };
        qp.validate()?;
        Ok(qp)
    }

    pub fn n_vars(&self) -> usize {
        self.regressor.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (rows, n) = self.regressor.shape();
        if n == 0 {
            return dim("problem has no decision variables");
        }
        if self.target.len() != rows {
            return dim(format!("regressor has {rows} rows but target has {}", self.target.len()));
        }
        if self.ridge.len() != n {
            return dim(format!("ridge has {} weights for {n} variables", self.ridge.len()));
        }
        if self.ridge.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return param("ridge weights must be finite and nonnegative");
        }
        if self.regressor.iter().chain(self.target.iter()).any(|v| !v.is_finite()) {
            return param("regressor and target must be finite");
        }
        self.constraints.validate(n)
    }

    /// `||b - A x||^2 + sum ridge_i x_i^2`.
    pub fn objective(&self, x: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        let r = &self.target - &self.regressor * &xv;
        r.norm_squared() + self.ridge.iter().zip(x).map(|(w, v)| w * v * v).sum::<f64>()
    }

    /// Plain-text dump for cross-checking against other solvers.
    pub fn dump(&self) -> String {
        let (rows, n) = self.regressor.shape();
        let mut s = String::new();
        let _ = writeln!(s, "# pnfir quadratic program v1");
        let _ = writeln!(s, "# minimize ||b - A x||^2 + sum ridge_i x_i^2");
        let _ = writeln!(s, "vars {n}");
        let _ = writeln!(s, "regressor {rows}");
        for i in 0..rows {
            let line: Vec<String> = self.regressor.row(i).iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        let join = |v: &mut dyn Iterator<Item = &f64>| v.map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "target\n{}", join(&mut self.target.iter()));
        let _ = writeln!(s, "ridge\n{}", join(&mut self.ridge.iter()));
        let _ = writeln!(s, "constraints {}", self.constraints.len());
        for r in &self.constraints.rows {
            let sense = match r.sense {
                Sense::Ge => ">=",
                Sense::Le => "<=",
            };
            let _ = writeln!(s, "{} {} {} {}", r.start, sense, r.bound, join(&mut r.coeffs.iter()));
        }
        s
    }

    pub fn save_dump(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.dump())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    /// Tolerance on normalised primal, dual and complementarity residuals.
    pub tol: f64,
    pub max_iter: usize,
    pub polish: bool,
    /// Proximal weight on `x`.
    pub sigma: f64,
    /// Over-relaxation factor in `(0, 2)`.
    pub alpha: f64,
    /// Initial ADMM step size.
    pub rho: f64,
    pub adaptive_rho: bool,
    pub scaling_iters: usize,
    /// Residuals, step size and certificates are evaluated every this many iterations.
    pub check_every: usize,
    /// Threshold of the primal infeasibility certificate.
    pub infeasibility_tol: f64,
    /// Iterations before an infeasibility certificate may be accepted.
    pub infeasibility_min_iter: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200_000,
            polish: true,
            sigma: 1e-6,
            alpha: 1.6,
            rho: 0.1,
            adaptive_rho: true,
            scaling_iters: 15,
            check_every: 25,
            infeasibility_tol: 1e-6,
            infeasibility_min_iter: 200,
        }
    }
}

impl SolverSettings {
    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return param("solver tolerance must be positive");
        }
        if self.max_iter == 0 {
            return param("max_iter must be at least 1");
        }
        if !(self.alpha > 0.0 && self.alpha < 2.0) {
            return param("relaxation alpha must lie in (0, 2)");
        }
        if !(self.sigma > 0.0 && self.rho > 0.0 && self.infeasibility_tol > 0.0) || self.check_every == 0 {
            return param("sigma, rho, infeasibility_tol and check_every must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub solution: Vec<f64>,
    pub status: SolveStatus,
    /// `||C x - z||_inf / max(1, ||C x||_inf, ||z||_inf)`.
    pub primal_residual: f64,
    /// `||P x + q + C^T y||_inf / max(1, ||P x||_inf, ||C^T y||_inf, ||q||_inf)`.
    pub dual_residual: f64,
    /// Largest `|y_i| * slack_i` to the bound matching the sign of `y_i`, over `max(1, ||y||_inf)`.
    pub complementarity: f64,
    pub iterations: usize,
    pub wall_time: f64,
    pub objective: f64,
    pub polished: bool,
    /// Unconstrained path only: the augmented regressor lost rank.
    pub rank_deficient: bool,
    pub threads: usize,
    /// Original constraint rows implicated by an infeasibility certificate,
    /// strongest first.
    pub infeasible_rows: Vec<usize>,
}

impl SolverReport {
    /// Report equality ignoring wall time.
    pub fn same_result(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.wall_time = other.wall_time;
        a == *other
    }
}

/// Solves the QP; problems without constraints use [`solve_unconstrained`].
pub fn solve(qp: &QuadraticProgram, settings: &SolverSettings) -> Result<SolverReport> {
    qp.validate()?;
    settings.validate()?;
    if qp.constraints.is_empty() {
        return solve_unconstrained(qp);
    }
    let start = Instant::now();
    let mut report = Admm::new(qp, settings).run();
    report.objective = qp.objective(&report.solution);
    report.wall_time = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Minimum-norm ridge least squares through the SVD of `[A; diag(sqrt(ridge))]`.
pub fn solve_unconstrained(qp: &QuadraticProgram) -> Result<SolverReport> {
    qp.validate()?;
    if !qp.constraints.is_empty() {
        return param("solve_unconstrained called on a constrained problem");
    }
    let start = Instant::now();
    let (rows, n) = qp.regressor.shape();
    let mut aug = DMatrix::zeros(rows + n, n);
    aug.view_mut((0, 0), (rows, n)).copy_from(&qp.regressor);
    for (i, w) in qp.ridge.iter().enumerate() {
        aug[(rows + i, i)] = w.sqrt();
    }
    let mut rhs = DVector::zeros(rows + n);
    rhs.rows_mut(0, rows).copy_from(&qp.target);
    let svd = aug.svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = smax * f64::EPSILON * (rows + n) as f64;
    let rank = svd.singular_values.iter().filter(|s| **s > cutoff).count();
    let x = if smax > 0.0 { svd.solve(&rhs, cutoff).expect("SVD has both factors") } else { DVector::zeros(n) };
    let (p, q) = normal_equations(qp);
    let px = &p * &x;
    let dual = (&px + &q).amax() / 1f64.max(px.amax()).max(q.amax());
    let solution: Vec<f64> = x.iter().copied().collect();
    Ok(SolverReport {
        objective: qp.objective(&solution),
        solution,
        status: SolveStatus::Optimal,
        primal_residual: 0.0,
        dual_residual: dual,
        complementarity: 0.0,
        iterations: 1,
        wall_time: start.elapsed().as_secs_f64(),
        polished: false,
        rank_deficient: rank < n,
        threads: 1,
        infeasible_rows: Vec::new(),
    })
}

/// `P = 2 (A^T A + diag(ridge))`, `q = -2 A^T b`, so the objective is `x^T P x / 2 + q^T x + const`.
fn normal_equations(qp: &QuadraticProgram) -> (DMatrix<f64>, DVector<f64>) {
    let mut p = qp.regressor.tr_mul(&qp.regressor);
    for (i, w) in qp.ridge.iter().enumerate() {
        p[(i, i)] += w;
    }
    p *= 2.0;
    let q = qp.regressor.tr_mul(&qp.target) * -2.0;
    (p, q)
}

/// Rows sharing a support `(start, len)`, stored densely and contiguously.
struct Block {
    start: usize,
    offset: usize,
    mat: DMatrix<f64>,
}

/// Two-sided rows `l <= C x <= u` after merging rows with identical coefficients.
struct Rows {
    n: usize,
    blocks: Vec<Block>,
    l: Vec<f64>,
    u: Vec<f64>,
    /// Original row indices folded into each merged row.
    members: Vec<Vec<usize>>,
    /// `(block, local row)` of each merged row.
    locate: Vec<(usize, usize)>,
}

impl Rows {
    fn new(set: &LinearConstraintSet, n: usize) -> Self {
        let mut merged: HashMap<(usize, Vec<u64>), usize> = HashMap::new();
        let mut coeffs: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut bounds: Vec<(f64, f64)> = Vec::new();
        let mut members: Vec<Vec<usize>> = Vec::new();
        for (i, r) in set.rows.iter().enumerate() {
            let key = (r.start, r.coeffs.iter().map(|c| c.to_bits()).collect());
            let idx = *merged.entry(key).or_insert_with(|| {
                coeffs.push((r.start, r.coeffs.clone()));
                bounds.push((f64::NEG_INFINITY, f64::INFINITY));
                members.push(Vec::new());
                coeffs.len() - 1
            });
            members[idx].push(i);
            match r.sense {
                Sense::Ge => bounds[idx].0 = bounds[idx].0.max(r.bound),
                Sense::Le => bounds[idx].1 = bounds[idx].1.min(r.bound),
            }
        }
        let mut groups: Vec<((usize, usize), Vec<usize>)> = Vec::new();
        let mut group_of: HashMap<(usize, usize), usize> = HashMap::new();
        for (i, (start, c)) in coeffs.iter().enumerate() {
            let key = (*start, c.len());
            let g = *group_of.entry(key).or_insert_with(|| {
                groups.push((key, Vec::new()));
                groups.len() - 1
            });
            groups[g].1.push(i);
        }
        let total = coeffs.len();
        let mut rows =
            Rows { n, blocks: Vec::new(), l: vec![0.0; total], u: vec![0.0; total], members: vec![], locate: vec![] };
        let mut order_members = Vec::with_capacity(total);
        let mut offset = 0;
        for (b, ((start, len), idx)) in groups.into_iter().enumerate() {
            let mat = DMatrix::from_fn(idx.len(), len, |r, c| coeffs[idx[r]].1[c]);
            for (local, &i) in idx.iter().enumerate() {
                rows.l[offset + local] = bounds[i].0;
                rows.u[offset + local] = bounds[i].1;
                order_members.push(std::mem::take(&mut members[i]));
                rows.locate.push((b, local));
            }
            rows.blocks.push(Block { start, offset, mat });
            offset += idx.len();
        }
        rows.members = order_members;
        rows
    }

    fn len(&self) -> usize {
        self.l.len()
    }

    fn mul(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut z = DVector::zeros(self.len());
        for b in &self.blocks {
            let seg = &b.mat * x.rows(b.start, b.mat.ncols());
            z.rows_mut(b.offset, b.mat.nrows()).copy_from(&seg);
        }
        z
    }

    fn tr_mul(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut x = DVector::zeros(self.n);
        for b in &self.blocks {
            let seg = b.mat.tr_mul(&y.rows(b.offset, b.mat.nrows()));
            let mut dst = x.rows_mut(b.start, b.mat.ncols());
            dst += seg;
        }
        x
    }

    /// `C^T diag(w) C`.
    fn gram(&self, w: &[f64]) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.n, self.n);
        for b in &self.blocks {
            let (nr, len) = b.mat.shape();
            let mut weighted = b.mat.clone();
            for r in 0..nr {
                let wr = w[b.offset + r];
                weighted.row_mut(r).scale_mut(wr);
            }
            let block = b.mat.tr_mul(&weighted);
            let mut dst = g.view_mut((b.start, b.start), (len, len));
            dst += block;
        }
        g
    }

    fn scale(&mut self, row: &[f64], col: &[f64]) {
        for b in &mut self.blocks {
            let (nr, len) = b.mat.shape();
            for r in 0..nr {
                for c in 0..len {
                    b.mat[(r, c)] *= row[b.offset + r] * col[b.start + c];
                }
            }
        }
        for i in 0..self.len() {
            self.l[i] *= row[i];
            self.u[i] *= row[i];
        }
    }

    fn row_norms(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for b in &self.blocks {
            for r in 0..b.mat.nrows() {
                out[b.offset + r] = b.mat.row(r).amax();
            }
        }
        out
    }

    fn col_norms(&self) -> Vec<f64> {
        let mut out = vec![0.0f64; self.n];
        for b in &self.blocks {
            for c in 0..b.mat.ncols() {
                out[b.start + c] = out[b.start + c].max(b.mat.column(c).amax());
            }
        }
        out
    }

    fn dense_rows(&self, idx: &[usize]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(idx.len(), self.n);
        for (r, &i) in idx.iter().enumerate() {
            let (b, local) = self.locate[i];
            let blk = &self.blocks[b];
            for c in 0..blk.mat.ncols() {
                m[(r, blk.start + c)] = blk.mat[(local, c)];
            }
        }
        m
    }
}

/// Iterative refinement steps of the polish solve.
const POLISH_REFINE: usize = 25;
/// Relative norm below which a row counts as dependent on earlier active rows.
const INDEPENDENCE_TOL: f64 = 1e-6;

fn clamp_norm(v: f64) -> f64 {
    if v < 1e-4 {
        1.0
    } else {
        v.min(1e4)
    }
}

struct Admm<'a> {
    qp: &'a QuadraticProgram,
    s: &'a SolverSettings,
    /// Scaled data.
    p: DMatrix<f64>,
    q: DVector<f64>,
    c: Rows,
    /// Variable scaling `D`, row scaling `E` and cost scaling.
    d: Vec<f64>,
    e: Vec<f64>,
    cost: f64,
    /// `C^T W C` with `W` the per-row step multipliers.
    gram: DMatrix<f64>,
    row_weight: Vec<f64>,
}

struct Iterate {
    x: DVector<f64>,
    z: DVector<f64>,
    y: DVector<f64>,
}

struct Residuals {
    prim: f64,
    dual: f64,
    comp: f64,
    /// Unnormalised norms used by the step-size rule.
    prim_ratio: f64,
    dual_ratio: f64,
}

impl Residuals {
    fn worst(&self) -> f64 {
        self.prim.max(self.dual).max(self.comp)
    }
}

impl<'a> Admm<'a> {
    fn new(qp: &'a QuadraticProgram, s: &'a SolverSettings) -> Self {
        let n = qp.n_vars();
        let (mut p, mut q) = normal_equations(qp);
        let mut c = Rows::new(&qp.constraints, n);
        let mr = c.len();
        let mut d = vec![1.0; n];
        let mut e = vec![1.0; mr];
        for _ in 0..s.scaling_iters {
            let cn = c.col_norms();
            let dx: Vec<f64> =
                (0..n).map(|j| 1.0 / clamp_norm(p.column(j).amax().max(cn[j])).sqrt()).collect();
            let dc: Vec<f64> = c.row_norms().iter().map(|v| 1.0 / clamp_norm(*v).sqrt()).collect();
            for j in 0..n {
                for i in 0..n {
                    p[(i, j)] *= dx[i] * dx[j];
                }
                q[j] *= dx[j];
                d[j] *= dx[j];
            }
            c.scale(&dc, &dx);
            for i in 0..mr {
                e[i] *= dc[i];
            }
        }
        let mean_col = (0..n).map(|j| p.column(j).amax()).sum::<f64>() / n as f64;
        let cost = 1.0 / clamp_norm(mean_col.max(q.amax()));
        p *= cost;
        q *= cost;
        let row_weight: Vec<f64> = (0..mr)
            .map(|i| {
                if c.l[i] == c.u[i] {
                    1e3
                } else if c.l[i].is_infinite() && c.u[i].is_infinite() {
                    1e-6
                } else {
                    1.0
                }
            })
            .collect();
        let gram = c.gram(&row_weight);
        Self { qp, s, p, q, c, d, e, cost, gram, row_weight }
    }

    fn factor(&self, rho: f64) -> Cholesky<f64, Dyn> {
        let n = self.p.nrows();
        let mut k = &self.p + &self.gram * rho;
        for i in 0..n {
            k[(i, i)] += self.s.sigma;
        }
        k.cholesky().expect("P + sigma I + rho C^T W C is positive definite")
    }

    fn unscale_x(&self, x: &DVector<f64>) -> Vec<f64> {
        x.iter().zip(&self.d).map(|(v, d)| v * d).collect()
    }

    /// Normalised residuals of a scaled iterate, measured in unscaled units.
    fn residuals(&self, it: &Iterate) -> Residuals {
        let cx = self.c.mul(&it.x);
        let einv = |v: &DVector<f64>| v.iter().zip(&self.e).map(|(a, e)| (a / e).abs()).fold(0.0, f64::max);
        let r_prim = einv(&(&cx - &it.z));
        let cx_n = einv(&cx);
        let z_n = einv(&it.z);
        let dinv = |v: &DVector<f64>| {
            v.iter().zip(&self.d).map(|(a, d)| (a / d).abs()).fold(0.0, f64::max) / self.cost
        };
        let px = &self.p * &it.x;
        let cty = self.c.tr_mul(&it.y);
        let r_dual = dinv(&(&px + &self.q + &cty));
        let (px_n, cty_n, q_n) = (dinv(&px), dinv(&cty), dinv(&self.q));
        let mut comp = 0.0f64;
        let mut y_n = 0.0f64;
        for i in 0..self.c.len() {
            let yi = it.y[i] * self.e[i] / self.cost;
            let ci = cx[i] / self.e[i];
            y_n = y_n.max(yi.abs());
            let (li, ui) = (self.c.l[i] / self.e[i], self.c.u[i] / self.e[i]);
            // A multiplier against an infinite bound counts in full.
            if yi > 0.0 {
                comp = comp.max(if ui.is_finite() { yi * (ui - ci).abs() } else { yi });
            } else if yi < 0.0 {
                comp = comp.max(if li.is_finite() { -yi * (ci - li).abs() } else { -yi });
            }
        }
        Residuals {
            prim: r_prim / 1f64.max(cx_n).max(z_n),
            dual: r_dual / 1f64.max(px_n).max(cty_n).max(q_n),
            comp: comp / 1f64.max(y_n),
            prim_ratio: r_prim / 1e-12f64.max(cx_n).max(z_n),
            dual_ratio: r_dual / 1e-12f64.max(px_n).max(cty_n).max(q_n),
        }
    }

    /// Primal infeasibility certificate on the change of the dual iterate.
    fn certificate(&self, dy: &DVector<f64>) -> bool {
        let dy_n = dy.iter().zip(&self.e).map(|(v, e)| (v * e).abs()).fold(0.0, f64::max);
        if dy_n < 1e-30 {
            return false;
        }
        let eps = self.s.infeasibility_tol * dy_n;
        let ct = self.c.tr_mul(dy);
        let ct_n = ct.iter().zip(&self.d).map(|(v, d)| (v / d).abs()).fold(0.0, f64::max);
        if ct_n > eps {
            return false;
        }
        let mut support = 0.0;
        for i in 0..self.c.len() {
            let v = dy[i];
            if v > 0.0 {
                support += self.c.u[i] * v;
            } else if v < 0.0 {
                support += self.c.l[i] * v;
            }
        }
        support < -eps
    }

    fn implicated_rows(&self, dy: &DVector<f64>) -> Vec<usize> {
        let scale = dy.iter().zip(&self.e).map(|(v, e)| (v * e).abs()).fold(0.0, f64::max);
        let mut hits: Vec<(f64, usize)> = Vec::new();
        for i in 0..self.c.len() {
            let w = dy[i] * self.e[i];
            if w.abs() <= 1e-6 * scale {
                continue;
            }
            for &orig in &self.c.members[i] {
                let sense = self.qp.constraints.rows[orig].sense;
                if (w > 0.0 && sense == Sense::Le) || (w < 0.0 && sense == Sense::Ge) {
                    hits.push((w.abs(), orig));
                }
            }
        }
        hits.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        hits.into_iter().map(|(_, i)| i).collect()
    }

    fn run(&self) -> SolverReport {
        let n = self.p.nrows();
        let mr = self.c.len();
        let s = self.s;
        let mut rho = s.rho;
        let mut rho_vec: DVector<f64> = DVector::from_iterator(mr, self.row_weight.iter().map(|w| w * rho));
        let mut chol = self.factor(rho);
        let mut it = Iterate { x: DVector::zeros(n), z: DVector::zeros(mr), y: DVector::zeros(mr) };
        let polish_trigger = 1e-3f64.max(s.tol);
        let mut last_active: Option<Vec<i8>> = None;
        // The dual active-set solve does not depend on the iterate, so it runs once.
        let mut exact_tried = false;
        let mut best: Option<(Iterate, Residuals)> = None;
        let mut iterations = 0;
        while iterations < s.max_iter {
            iterations += 1;
            let y_prev = it.y.clone();
            let mut rhs = &it.x * s.sigma - &self.q;
            rhs += self.c.tr_mul(&(rho_vec.component_mul(&it.z) - &it.y));
            chol.solve_mut(&mut rhs);
            let xt = rhs;
            let zt = self.c.mul(&xt);
            it.x = &xt * s.alpha + &it.x * (1.0 - s.alpha);
            let zr = &zt * s.alpha + &it.z * (1.0 - s.alpha);
            for i in 0..mr {
                let w = zr[i] + it.y[i] / rho_vec[i];
                let zi = w.clamp(self.c.l[i], self.c.u[i]);
                it.y[i] = rho_vec[i] * (w - zi);
                it.z[i] = zi;
            }

            if iterations % s.check_every != 0 && iterations != s.max_iter {
                continue;
            }
            let res = self.residuals(&it);
            if iterations >= s.infeasibility_min_iter {
                let dy = &it.y - &y_prev;
                if self.certificate(&dy) {
                    return self.report(&it, &res, SolveStatus::Infeasible, iterations, false, self.implicated_rows(&dy));
                }
            }
            let converged = res.worst() <= s.tol;
            if s.polish && (converged || res.worst() <= polish_trigger) {
                let active = self.active_set(&it);
                if last_active.as_ref() != Some(&active) || converged {
                    let exact = !exact_tried;
                    if let Some((pit, pres)) = self.polish(&active, &it, exact) {
                        if pres.worst() <= s.tol {
                            return self.report(&pit, &pres, SolveStatus::Optimal, iterations, true, vec![]);
                        }
                    }
                    exact_tried |= exact;
                    last_active = Some(active);
                }
            }
            if converged {
                return self.report(&it, &res, SolveStatus::Optimal, iterations, false, vec![]);
            }
            let (prim_ratio, dual_ratio) = (res.prim_ratio, res.dual_ratio);
            if best.as_ref().is_none_or(|(_, b)| res.worst() < b.worst()) {
                best = Some((Iterate { x: it.x.clone(), z: it.z.clone(), y: it.y.clone() }, res));
            }
            if s.adaptive_rho {
                let ratio = (prim_ratio / dual_ratio.max(1e-30)).sqrt();
                let candidate = (rho * ratio).clamp(1e-6, 1e6);
                if candidate > 5.0 * rho || candidate < 0.2 * rho {
                    rho = candidate;
                    rho_vec = DVector::from_iterator(mr, self.row_weight.iter().map(|w| w * rho));
                    chol = self.factor(rho);
                }
            }
        }
        let (it, res) = best.expect("at least one residual check ran");
        self.report(&it, &res, SolveStatus::MaxIter, iterations, false, vec![])
    }

    /// `-1` lower active, `+1` upper active, `0` inactive; equality rows count as lower.
    fn active_set(&self, it: &Iterate) -> Vec<i8> {
        (0..self.c.len())
            .map(|i| {
                let (l, u, z, y) = (self.c.l[i], self.c.u[i], it.z[i], it.y[i]);
                if l == u || z - l < -y {
                    -1
                } else if u - z < y {
                    1
                } else {
                    0
                }
            })
            .collect()
    }

    /// Keeps a linearly independent subset of the guessed active rows,
    /// preferring equality rows and then large multipliers. A face needs at
    /// most `n` independent rows; an overdetermined guess makes the polish
    /// multipliers blow up.
    fn independent_subset(&self, active: &mut [i8], y: &DVector<f64>) {
        let mut idx: Vec<usize> = (0..active.len()).filter(|&i| active[i] != 0).collect();
        let key = |i: usize| (self.c.l[i] != self.c.u[i], -(y[i] * self.e[i]).abs());
        idx.sort_by(|&a, &b| key(a).partial_cmp(&key(b)).unwrap_or(std::cmp::Ordering::Equal));
        let rows = self.c.dense_rows(&idx);
        let mut basis: Vec<DVector<f64>> = Vec::new();
        for (r, &i) in idx.iter().enumerate() {
            let row = rows.row(r).transpose();
            let norm = row.norm();
            let mut v = row.clone();
            for _ in 0..2 {
                for q in &basis {
                    let d = q.dot(&v);
                    v.axpy(-d, q, 1.0);
                }
            }
            let rest = v.norm();
            if basis.len() < self.p.nrows() && rest > INDEPENDENCE_TOL * norm {
                basis.push(v / rest);
            } else {
                active[i] = 0;
            }
        }
    }

    /// Polishes on an independent subset of the guessed active set. When that
    /// guess is wrong and `exact` is set, the active set is instead found by a
    /// dual active-set solve and polished in turn.
    fn polish(&self, active: &[i8], start: &Iterate, exact: bool) -> Option<(Iterate, Residuals)> {
        let mut active = active.to_vec();
        self.independent_subset(&mut active, &start.y);
        let guessed = self.polish_once(&active, start);
        if !exact || guessed.as_ref().is_some_and(|(_, r)| r.worst() <= self.s.tol) {
            return guessed;
        }
        let n = self.p.nrows();
        let all: Vec<usize> = (0..self.c.len()).collect();
        let c = self.c.dense_rows(&all);
        let mut g = self.p.clone();
        if g.clone().cholesky().is_none() {
            let delta = 1e-10 * (1.0 + self.p.amax());
            for i in 0..n {
                g[(i, i)] += delta;
            }
        }
        let max_steps = 20 * (n + self.c.len());
        let sol = dual_active_set::solve(&g, &self.q, &c, &self.c.l, &self.c.u, 1e-3 * self.s.tol, max_steps)?;
        let from = Iterate { x: sol.x, z: DVector::zeros(self.c.len()), y: sol.y };
        let exact = self.polish_once(&sol.side, &from);
        match (guessed, exact) {
            (Some(g), Some(e)) => Some(if e.1.worst() <= g.1.worst() { e } else { g }),
            (g, e) => e.or(g),
        }
    }

    fn polish_once(&self, active: &[i8], start: &Iterate) -> Option<(Iterate, Residuals)> {
        let n = self.p.nrows();
        let idx: Vec<usize> = (0..active.len()).filter(|&i| active[i] != 0).collect();
        let bnd = DVector::from_iterator(
            idx.len(),
            idx.iter().map(|&i| if active[i] < 0 { self.c.l[i] } else { self.c.u[i] }),
        );
        let ca = self.c.dense_rows(&idx);
        // Regularised KKT [P + dI, Ca^T; Ca, -dI] reduced to the primal space,
        // so the cost does not grow with the number of active rows.
        let delta = 1e-7 * (1.0 + self.p.amax());
        let mut m = &self.p + ca.tr_mul(&ca) / delta;
        for i in 0..n {
            m[(i, i)] += delta;
        }
        let mchol = m.cholesky()?;
        let solve = |r1: &DVector<f64>, r2: &DVector<f64>| -> (DVector<f64>, DVector<f64>) {
            let x = mchol.solve(&(r1 + ca.tr_mul(r2) / delta));
            let ya = (&ca * &x - r2) / delta;
            (x, ya)
        };
        // Refinement from the ADMM iterate is a proximal iteration, so among
        // non-unique multipliers of a degenerate active set it stays near the
        // sign-consistent ADMM duals.
        let mut x = start.x.clone();
        let mut ya = DVector::from_iterator(idx.len(), idx.iter().map(|&i| start.y[i]));
        for _ in 0..POLISH_REFINE {
            let r1 = -&self.q - &self.p * &x - ca.tr_mul(&ya);
            let r2 = &bnd - &ca * &x;
            if r1.amax() < 1e-15 && r2.amax() < 1e-15 {
                break;
            }
            let (dx, dyv) = solve(&r1, &r2);
            x += dx;
            ya += dyv;
        }
        let mut y = DVector::zeros(self.c.len());
        for (k, &i) in idx.iter().enumerate() {
            y[i] = ya[k];
        }
        let cx = self.c.mul(&x);
        let z = DVector::from_iterator(self.c.len(), (0..self.c.len()).map(|i| cx[i].clamp(self.c.l[i], self.c.u[i])));
        let pit = Iterate { x, z, y };
        let mut res = self.residuals(&pit);
        // A multiplier pushing the wrong way means the guessed set is not optimal.
        let y_n = (0..self.c.len()).map(|i| (pit.y[i] * self.e[i] / self.cost).abs()).fold(0.0, f64::max);
        let mut wrong_sign = 0.0f64;
        for (k, &i) in idx.iter().enumerate() {
            if self.c.l[i] == self.c.u[i] {
                continue;
            }
            let yi = ya[k] * self.e[i] / self.cost;
            if (active[i] < 0 && yi > 0.0) || (active[i] > 0 && yi < 0.0) {
                wrong_sign = wrong_sign.max(yi.abs());
            }
        }
        res.comp = res.comp.max(wrong_sign / 1f64.max(y_n));
        Some((pit, res))
    }

    fn report(
        &self,
        it: &Iterate,
        res: &Residuals,
        status: SolveStatus,
        iterations: usize,
        polished: bool,
        infeasible_rows: Vec<usize>,
    ) -> SolverReport {
        SolverReport {
            solution: self.unscale_x(&it.x),
            status,
            primal_residual: res.prim,
            dual_residual: res.dual,
            complementarity: res.comp,
            iterations,
            wall_time: 0.0,
            objective: 0.0,
            polished,
            rank_deficient: false,
            threads: 1,
            infeasible_rows,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::passivity::{ConstraintClass, ConstraintRow};

    fn row(start: usize, coeffs: Vec<f64>, sense: Sense, bound: f64) -> ConstraintRow {
        ConstraintRow { start, coeffs, sense, bound, class: ConstraintClass::Other }
    }

    fn qp(a: DMatrix<f64>, b: Vec<f64>, ridge: Vec<f64>, rows: Vec<ConstraintRow>) -> QuadraticProgram {
        QuadraticProgram::new(a, DVector::from_vec(b), ridge, LinearConstraintSet { rows }).unwrap()
    }

    #[test]
    fn active_lower_bound() {
        let p = qp(DMatrix::from_element(1, 1, 1.0), vec![1.0], vec![0.0], vec![row(0, vec![1.0], Sense::Ge, 2.0)]);
        let r = solve(&p, &SolverSettings::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!((r.solution[0] - 2.0).abs() < 1e-9);
        assert!((r.objective - 1.0).abs() < 1e-9);
    }

    #[test]
    fn one_active_one_inactive() {
        let p = qp(
            DMatrix::identity(2, 2),
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![row(0, vec![1.0], Sense::Ge, 1.0), row(1, vec![1.0], Sense::Ge, -1.0)],
        );
        let r = solve(&p, &SolverSettings::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!((r.solution[0] - 1.0).abs() < 1e-9 && r.solution[1].abs() < 1e-9);
        assert!(r.primal_residual <= 1e-8 && r.dual_residual <= 1e-8 && r.complementarity <= 1e-8);
    }

    #[test]
    fn unconstrained_examples() {
        let r = solve_unconstrained(&qp(DMatrix::identity(2, 2), vec![3.0, 4.0], vec![0.0; 2], vec![])).unwrap();
        assert!((r.solution[0] - 3.0).abs() < 1e-12 && (r.solution[1] - 4.0).abs() < 1e-12);
        let r = solve_unconstrained(&qp(DMatrix::identity(2, 2), vec![3.0, 4.0], vec![1.0; 2], vec![])).unwrap();
        assert!((r.solution[0] - 1.5).abs() < 1e-12 && (r.solution[1] - 2.0).abs() < 1e-12);
        let r = solve_unconstrained(&qp(DMatrix::from_element(2, 1, 1.0), vec![1.0, 3.0], vec![0.0], vec![])).unwrap();
        assert!((r.solution[0] - 2.0).abs() < 1e-12);
        assert!(!r.rank_deficient);
    }

    #[test]
    fn rank_deficient_gives_minimum_norm() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let r = solve_unconstrained(&qp(a, vec![2.0, 2.0], vec![0.0; 2], vec![])).unwrap();
        assert!(r.rank_deficient);
        assert!((r.solution[0] - 1.0).abs() < 1e-12 && (r.solution[1] - 1.0).abs() < 1e-12);
        let z = solve_unconstrained(&qp(DMatrix::zeros(3, 2), vec![1.0, 0.0, 0.0], vec![0.0; 2], vec![])).unwrap();
        assert!(z.rank_deficient);
        assert_eq!(z.solution, vec![0.0, 0.0]);
    }

    #[test]
    fn infeasible_box_is_reported() {
        let p = qp(
            DMatrix::from_element(1, 1, 1.0),
            vec![0.0],
            vec![0.0],
            vec![row(0, vec![2.0], Sense::Ge, 10.0), row(0, vec![1.0], Sense::Le, 1.0), row(0, vec![1.0], Sense::Ge, -1.0)],
        );
        let r = solve(&p, &SolverSettings::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Infeasible);
        assert!(r.infeasible_rows.contains(&0) && r.infeasible_rows.contains(&1));
        assert!(!r.infeasible_rows.contains(&2));
    }

    #[test]
    fn dimension_errors_before_iterating() {
        let bad = QuadraticProgram {
            regressor: DMatrix::identity(2, 2),
            target: DVector::zeros(3),
            ridge: vec![0.0; 2],
            constraints: LinearConstraintSet::new(),
        };
        assert!(solve(&bad, &SolverSettings::default()).is_err());
        let bad = QuadraticProgram {
            regressor: DMatrix::identity(2, 2),
            target: DVector::zeros(2),
            ridge: vec![0.0; 2],
            constraints: LinearConstraintSet { rows: vec![row(1, vec![1.0, 1.0], Sense::Ge, 0.0)] },
        };
        assert!(solve(&bad, &SolverSettings::default()).is_err());
    }

    #[test]
    fn dump_lists_everything() {
        let p = qp(DMatrix::identity(2, 2), vec![3.0, 4.0], vec![0.5, 0.0], vec![row(1, vec![1.0], Sense::Le, 2.0)]);
        let text = p.dump();
        assert!(text.contains("vars 2"));
        assert!(text.contains("constraints 1"));
        assert!(text.contains("1 <= 2 1"));
    }
}
