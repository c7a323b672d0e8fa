use nalgebra::{DMatrix, DVector};
use pnfir::passivity::{ConstraintClass, ConstraintRow, LinearConstraintSet, Sense};
use pnfir::qp::{solve, solve_unconstrained, QuadraticProgram, SolveStatus, SolverSettings};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn row(start: usize, coeffs: Vec<f64>, sense: Sense, bound: f64) -> ConstraintRow {
    ConstraintRow { start, coeffs, sense, bound, class: ConstraintClass::Other }
}

/// Random 6x3 least squares with a box and, optionally, one general row that
/// is satisfied strictly at the box centre.
fn random_problem(rng: &mut ChaCha8Rng, general_row: bool) -> (QuadraticProgram, Vec<(f64, f64)>) {
    let a = DMatrix::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
    let b = DVector::from_fn(6, |_, _| rng.random_range(-3.0..3.0));
    let mut rows = Vec::new();
    let mut bx = Vec::new();
    for i in 0..3 {
        let lo = rng.random_range(-1.0..0.0);
        let hi = lo + rng.random_range(0.2..1.0);
        rows.push(row(i, vec![1.0], Sense::Ge, lo));
        rows.push(row(i, vec![1.0], Sense::Le, hi));
        bx.push((lo, hi));
    }
    if general_row {
        let c: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let centre: f64 = c.iter().zip(&bx).map(|(ci, (l, h))| ci * 0.5 * (l + h)).sum();
        rows.push(row(0, c, Sense::Le, centre + rng.random_range(0.0..0.3)));
    }
    let qp = QuadraticProgram::new(a, b, vec![0.0; 3], LinearConstraintSet { rows }).unwrap();
    (qp, bx)
}

/// Exhaustive search over the box: a 0.02 grid, then a 1e-3 grid on the
/// neighbourhood of the coarse winner.
fn grid_oracle(qp: &QuadraticProgram, bx: &[(f64, f64)]) -> Vec<f64> {
    let h = qp.regressor.tr_mul(&qp.regressor);
    let g = qp.regressor.tr_mul(&qp.target);
    let f = |x: &[f64; 3]| -> f64 {
        let mut v = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                v += x[i] * h[(i, j)] * x[j];
            }
            v -= 2.0 * g[i] * x[i];
        }
        v
    };
    let feasible = |x: &[f64; 3]| qp.constraints.max_violation(x) <= 0.0;
    let search = |lo: [f64; 3], hi: [f64; 3], step: f64| -> Option<[f64; 3]> {
        let counts: Vec<usize> = (0..3).map(|i| ((hi[i] - lo[i]) / step).floor() as usize + 1).collect();
        let mut best: Option<([f64; 3], f64)> = None;
        for i in 0..=counts[0] {
            for j in 0..=counts[1] {
                for k in 0..=counts[2] {
                    let x = [
                        (lo[0] + i as f64 * step).min(hi[0]),
                        (lo[1] + j as f64 * step).min(hi[1]),
                        (lo[2] + k as f64 * step).min(hi[2]),
                    ];
                    if !feasible(&x) {
                        continue;
                    }
                    let v = f(&x);
                    if best.is_none_or(|(_, bv)| v < bv) {
                        best = Some((x, v));
                    }
                }
            }
        }
        best.map(|(x, _)| x)
    };
    let lo = [bx[0].0, bx[1].0, bx[2].0];
    let hi = [bx[0].1, bx[1].1, bx[2].1];
    let coarse = search(lo, hi, 0.02).expect("box centre is feasible");
    let rlo: [f64; 3] = std::array::from_fn(|i| (coarse[i] - 0.04).max(lo[i]));
    let rhi: [f64; 3] = std::array::from_fn(|i| (coarse[i] + 0.04).min(hi[i]));
    search(rlo, rhi, 1e-3).unwrap().to_vec()
}

#[test]
fn matches_grid_search_on_random_boxes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let settings = SolverSettings::default();
    for case in 0..60 {
        let (qp, bx) = random_problem(&mut rng, false);
        let r = solve(&qp, &settings).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal, "case {case}");
        assert!(r.primal_residual <= 1e-8 && r.dual_residual <= 1e-8 && r.complementarity <= 1e-8, "case {case}: {r:?}");
        assert!(qp.constraints.max_violation(&r.solution) <= 1e-8, "case {case}");
        let oracle = grid_oracle(&qp, &bx);
        for i in 0..3 {
            assert!((r.solution[i] - oracle[i]).abs() <= 5e-3, "case {case}: {:?} vs {oracle:?}", r.solution);
        }
    }
}

/// Exact optimum by enumerating every subset of rows held at equality.
fn active_set_oracle(qp: &QuadraticProgram) -> Vec<f64> {
    let n = qp.n_vars();
    let rows = &qp.constraints.rows;
    let h = qp.regressor.tr_mul(&qp.regressor);
    let g = qp.regressor.tr_mul(&qp.target);
    let mut best: Option<(Vec<f64>, f64)> = None;
    for mask in 0u32..(1 << rows.len()) {
        let act: Vec<usize> = (0..rows.len()).filter(|i| mask & (1 << i) != 0).collect();
        let k = n + act.len();
        let mut kkt = DMatrix::zeros(k, k);
        let mut rhs = DVector::zeros(k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&h);
        rhs.rows_mut(0, n).copy_from(&g);
        for (a, &i) in act.iter().enumerate() {
            for (c, v) in rows[i].coeffs.iter().enumerate() {
                kkt[(n + a, rows[i].start + c)] = *v;
                kkt[(rows[i].start + c, n + a)] = *v;
            }
            rhs[n + a] = rows[i].bound;
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let x: Vec<f64> = sol.iter().take(n).copied().collect();
        if x.iter().any(|v| !v.is_finite()) || qp.constraints.max_violation(&x) > 1e-10 {
            continue;
        }
        let v = qp.objective(&x);
        if best.as_ref().is_none_or(|(_, bv)| v < *bv) {
            best = Some((x, v));
        }
    }
    best.expect("box centre is feasible").0
}

#[test]
fn matches_active_set_enumeration_with_general_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(4048);
    for case in 0..100 {
        let (qp, _) = random_problem(&mut rng, true);
        let r = solve(&qp, &SolverSettings::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal, "case {case}: {r:?}");
        assert!(r.primal_residual <= 1e-8 && r.dual_residual <= 1e-8 && r.complementarity <= 1e-8);
        let oracle = active_set_oracle(&qp);
        for i in 0..3 {
            assert!((r.solution[i] - oracle[i]).abs() <= 1e-6, "case {case}: {:?} vs {oracle:?}", r.solution);
        }
    }
}

#[test]
fn objective_beats_random_feasible_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..20 {
        let (qp, bx) = random_problem(&mut rng, true);
        let r = solve(&qp, &SolverSettings::default()).unwrap();
        let mut tried = 0;
        while tried < 1000 {
            let x: Vec<f64> = bx.iter().map(|(l, h)| rng.random_range(*l..=*h)).collect();
            if qp.constraints.max_violation(&x) > 0.0 {
                continue;
            }
            tried += 1;
            assert!(r.objective <= qp.objective(&x) + 1e-9);
        }
    }
}

#[test]
fn larger_ridge_never_grows_the_solution() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let rows = rng.random_range(3..12);
        let n = rng.random_range(1..8);
        let a = DMatrix::from_fn(rows, n, |_, _| rng.random_range(-1.0..1.0));
        let b = DVector::from_fn(rows, |_, _| rng.random_range(-1.0..1.0));
        let mut prev = f64::INFINITY;
        for gamma in [0.0, 1e-3, 0.1, 1.0, 10.0, 1e3] {
            let qp = QuadraticProgram::new(a.clone(), b.clone(), vec![gamma; n], LinearConstraintSet::new()).unwrap();
            let norm = DVector::from_vec(solve_unconstrained(&qp).unwrap().solution).norm();
            assert!(norm <= prev * (1.0 + 1e-12) + 1e-15);
            prev = norm;
        }
    }
}

#[test]
fn identical_inputs_give_identical_reports() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..5 {
        let (qp, _) = random_problem(&mut rng, true);
        let a = solve(&qp, &SolverSettings::default()).unwrap();
        let b = solve(&qp, &SolverSettings::default()).unwrap();
        assert!(a.same_result(&b));
        for (x, y) in a.solution.iter().zip(&b.solution) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

#[test]
fn unpolished_admm_still_converges() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let settings = SolverSettings { polish: false, tol: 1e-6, ..SolverSettings::default() };
    for _ in 0..10 {
        let (qp, bx) = random_problem(&mut rng, false);
        let r = solve(&qp, &settings).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!(!r.polished);
        let oracle = grid_oracle(&qp, &bx);
        for i in 0..3 {
            assert!((r.solution[i] - oracle[i]).abs() <= 5e-3);
        }
    }
}
