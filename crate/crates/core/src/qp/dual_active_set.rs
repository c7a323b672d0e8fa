//! Dual active-set method of Goldfarb and Idnani for strictly convex QPs.
//!
//! Starts from the unconstrained minimiser and adds violated constraints one
//! at a time, dropping those whose multipliers would turn negative. The
//! factorisation `J' N = [R; 0]` with `J J' = G^-1` is updated with Givens
//! rotations, so each step costs `O(n^2)` plus one pass over the rows.

use nalgebra::{DMatrix, DVector};

pub(super) struct ActiveSetSolution {
    pub x: DVector<f64>,
    /// `-1` lower bound, `1` upper bound, `0` inactive.
    pub side: Vec<i8>,
    /// Multipliers with `Gx + a + C'y = 0`.
    pub y: DVector<f64>,
}

/// Constraint `k` is row `k / 2` of `C`: even `k` is `c'x >= l`, odd `k` is
/// `-c'x >= -u`. Rows with `l == u` only use the even id, as an equality.
struct Problem<'a> {
    c: &'a DMatrix<f64>,
    l: &'a [f64],
    u: &'a [f64],
}

impl Problem<'_> {
    fn is_eq(&self, k: usize) -> bool {
        self.l[k / 2] == self.u[k / 2]
    }

    fn normal(&self, k: usize) -> DVector<f64> {
        let row = self.c.row(k / 2).transpose();
        if k % 2 == 0 {
            row
        } else {
            -row
        }
    }

    fn bound(&self, k: usize) -> f64 {
        if k % 2 == 0 {
            self.l[k / 2]
        } else {
            -self.u[k / 2]
        }
    }
}

fn rotation(a: f64, b: f64) -> (f64, f64, f64) {
    let h = a.hypot(b);
    (a / h, b / h, h)
}

fn rotate_columns(j: &mut DMatrix<f64>, i: usize, k: usize, c: f64, s: f64) {
    for r in 0..j.nrows() {
        let (a, b) = (j[(r, i)], j[(r, k)]);
        j[(r, i)] = c * a + s * b;
        j[(r, k)] = -s * a + c * b;
    }
}

/// Minimises `x'Gx/2 + a'x` subject to `l <= Cx <= u`. `viol_tol` is the
/// absolute violation below which a constraint counts as satisfied. Returns
/// `None` when `G` is not positive definite, the constraints are inconsistent
/// or `max_iter` steps do not suffice.
pub(super) fn solve(
    g: &DMatrix<f64>,
    a: &DVector<f64>,
    c: &DMatrix<f64>,
    l: &[f64],
    u: &[f64],
    viol_tol: f64,
    max_iter: usize,
) -> Option<ActiveSetSolution> {
    let n = g.nrows();
    let prob = Problem { c, l, u };
    let chol = g.clone().cholesky()?;
    let mut j = chol.l().solve_lower_triangular(&DMatrix::identity(n, n))?.transpose();
    let mut x = -(&j * j.tr_mul(a));
    let mut r = DMatrix::<f64>::zeros(n, n);
    let mut act: Vec<usize> = Vec::new();
    let mut lam: Vec<f64> = Vec::new();
    let mut is_active = vec![false; 2 * l.len()];
    let eq_rows: Vec<usize> = (0..l.len()).filter(|&i| l[i] == u[i]).collect();
    // Equalities enter with the normal pointing against their residual.
    let mut eq_sign = vec![1.0; l.len()];
    let mut eq_next = 0;
    let mut steps = 0;

    loop {
        // Equalities first, then the most violated inequality.
        let (p, np, bp) = if eq_next < eq_rows.len() {
            let k = 2 * eq_rows[eq_next];
            eq_next += 1;
            let (np, bp) = (prob.normal(k), prob.bound(k));
            if np.dot(&x) - bp > 0.0 {
                eq_sign[k / 2] = -1.0;
                (k, -np, -bp)
            } else {
                (k, np, bp)
            }
        } else {
            let cx = c * &x;
            let mut worst: Option<(f64, usize)> = None;
            for i in 0..l.len() {
                if l[i] == u[i] {
                    continue;
                }
                for (k, v) in [(2 * i, l[i] - cx[i]), (2 * i + 1, cx[i] - u[i])] {
                    if !is_active[k] && v > viol_tol * (1.0 + prob.bound(k).abs()) && worst.is_none_or(|(w, _)| v > w) {
                        worst = Some((v, k));
                    }
                }
            }
            match worst {
                Some((_, k)) => (k, prob.normal(k), prob.bound(k)),
                None => break,
            }
        };
        let mut lam_p = 0.0;
        loop {
            steps += 1;
            if steps > max_iter {
                return None;
            }
            let q = act.len();
            let mut d = j.tr_mul(&np);
            let z = j.columns(q, n - q) * d.rows(q, n - q);
            let rv = if q > 0 {
                r.view((0, 0), (q, q)).into_owned().solve_upper_triangular(&d.rows(0, q).into_owned())?
            } else {
                DVector::zeros(0)
            };
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (i, &k) in act.iter().enumerate() {
                if !prob.is_eq(k) && rv[i] > 0.0 && lam[i] / rv[i] < t1 {
                    t1 = lam[i] / rv[i];
                    drop = Some(i);
                }
            }
            let zn = z.dot(&np);
            let s = np.dot(&x) - bp;
            let t2 = if zn > 1e-14 * np.norm_squared() { -s / zn } else { f64::INFINITY };
            if t1.is_infinite() && t2.is_infinite() {
                return None;
            }
            let t = t1.min(t2);
            if t2.is_finite() {
                x.axpy(t, &z, 1.0);
            }
            for (i, li) in lam.iter_mut().enumerate() {
                *li -= t * rv[i];
            }
            lam_p += t;
            if t2 <= t1 {
                for k in (q + 1..n).rev() {
                    if d[k] != 0.0 {
                        let (cs, sn, h) = rotation(d[k - 1], d[k]);
                        d[k - 1] = h;
                        d[k] = 0.0;
                        rotate_columns(&mut j, k - 1, k, cs, sn);
                    }
                }
                for i in 0..=q {
                    r[(i, q)] = d[i];
                }
                act.push(p);
                lam.push(lam_p);
                is_active[p] = true;
                break;
            }
            // Partial step: the blocking constraint leaves and R is
            // retriangularised.
            let i = drop?;
            is_active[act[i]] = false;
            act.remove(i);
            lam.remove(i);
            for col in i..q - 1 {
                for row in 0..=col + 1 {
                    r[(row, col)] = r[(row, col + 1)];
                }
            }
            for row in 0..q {
                r[(row, q - 1)] = 0.0;
            }
            for k in i..q - 1 {
                let (cs, sn, h) = rotation(r[(k, k)], r[(k + 1, k)]);
                r[(k, k)] = h;
                r[(k + 1, k)] = 0.0;
                for col in k + 1..q - 1 {
                    let (ra, rb) = (r[(k, col)], r[(k + 1, col)]);
                    r[(k, col)] = cs * ra + sn * rb;
                    r[(k + 1, col)] = -sn * ra + cs * rb;
                }
                rotate_columns(&mut j, k, k + 1, cs, sn);
            }
        }
    }

    let mut side = vec![0i8; l.len()];
    let mut y = DVector::zeros(l.len());
    for (&k, &lk) in act.iter().zip(&lam) {
        let i = k / 2;
        if k % 2 == 0 {
            side[i] = -1;
            y[i] = -lk * eq_sign[i];
        } else {
            side[i] = 1;
            y[i] = lk;
        }
    }
    Some(ActiveSetSolution { x, side, y })
}
