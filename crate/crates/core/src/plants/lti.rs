//! Continuous transfer functions, their discretisations and discrete
//! state-space simulation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::signals::Signal;

/// `num(s) / den(s)` with coefficients in ascending powers of `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LtiTransferFunction {
    pub num: Vec<f64>,
    pub den: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discretization {
    #[default]
    Zoh,
    Tustin,
}

fn trim(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    while out.len() > 1 && *out.last().unwrap() == 0.0 {
        out.pop();
    }
    out
}

impl LtiTransferFunction {
    pub fn new(num: Vec<f64>, den: Vec<f64>) -> Result<Self> {
        let tf = Self { num, den };
        tf.validate()?;
        Ok(tf)
    }

    /// `1 / (tc s + 1)`.
    pub fn first_order_lag(tc: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![1.0, tc])
    }

    /// `(1 + zero_tc s) / (1 + 2 zeta T s + T^2 s^2)`.
    pub fn second_order(zeta: f64, t: f64, zero_tc: f64) -> Result<Self> {
        Self::new(vec![1.0, zero_tc], vec![1.0, 2.0 * zeta * t, t * t])
    }

    pub fn gain(k: f64) -> Result<Self> {
        Self::new(vec![k], vec![1.0])
    }

    pub fn validate(&self) -> Result<()> {
        if self.num.is_empty() || self.den.is_empty() {
            return param("transfer function needs numerator and denominator coefficients");
        }
        if self.num.iter().chain(&self.den).any(|c| !c.is_finite()) {
            return param("transfer function coefficients must be finite");
        }
        let den = trim(&self.den);
        if den.len() == 1 && den[0] == 0.0 {
            return param("denominator is identically zero");
        }
        if trim(&self.num).len() > den.len() {
            return param("transfer function is improper (numerator degree exceeds denominator degree)");
        }
        Ok(())
    }

    pub fn order(&self) -> usize {
        trim(&self.den).len() - 1
    }

    /// Product `self * other`.
    pub fn series(&self, other: &Self) -> Result<Self> {
        Self::new(poly_mul(&self.num, &other.num), poly_mul(&self.den, &other.den))
    }

    /// Controllable canonical realisation `(A, B, C, D)`.
    pub fn state_space(&self) -> Result<(DMatrix<f64>, DVector<f64>, DVector<f64>, f64)> {
        self.validate()?;
        let den = trim(&self.den);
        let n = den.len() - 1;
        let lead = den[n];
        let a: Vec<f64> = den.iter().map(|c| c / lead).collect();
        let mut b: Vec<f64> = trim(&self.num).iter().map(|c| c / lead).collect();
        b.resize(n + 1, 0.0);
        let d = b[n];
        let mut am = DMatrix::zeros(n, n);
        for i in 0..n.saturating_sub(1) {
            am[(i, i + 1)] = 1.0;
        }
        if n > 0 {
            for j in 0..n {
                am[(n - 1, j)] = -a[j];
            }
        }
        let mut bm = DVector::zeros(n);
        if n > 0 {
            bm[n - 1] = 1.0;
        }
        let cm = DVector::from_fn(n, |i, _| b[i] - d * a[i]);
        Ok((am, bm, cm, d))
    }

    pub fn discretize(&self, ts: f64, method: Discretization) -> Result<DiscreteSystem> {
        if !(ts > 0.0 && ts.is_finite()) {
            return param("sampling interval must be positive");
        }
        let (a, b, c, d) = self.state_space()?;
        let n = a.nrows();
        if n == 0 {
            return DiscreteSystem::new(a, b, c, d, ts);
        }
        match method {
            Discretization::Zoh => {
                let mut aug = DMatrix::zeros(n + 1, n + 1);
                aug.view_mut((0, 0), (n, n)).copy_from(&(&a * ts));
                aug.view_mut((0, n), (n, 1)).copy_from(&(&b * ts));
                let e = aug.exp();
                DiscreteSystem::new(
                    e.view((0, 0), (n, n)).into_owned(),
                    e.view((0, n), (n, 1)).column(0).into_owned(),
                    c,
                    d,
                    ts,
                )
            }
            Discretization::Tustin => {
                let half = ts / 2.0;
                let ima = DMatrix::identity(n, n) - &a * half;
                let lu = ima.clone().lu();
                let inv = lu.try_inverse().ok_or_else(|| {
                    crate::Error::Parameter("bilinear transform is singular at this sampling interval".into())
                })?;
                let ad = &inv * (DMatrix::identity(n, n) + &a * half);
                let bd = &inv * &b * ts;
                let cd = inv.tr_mul(&c);
                let dd = d + half * c.dot(&(&inv * &b));
                DiscreteSystem::new(ad, bd, cd, dd, ts)
            }
        }
    }
}

pub(crate) fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// `x(t+1) = A x(t) + B u(t)`, `y(t) = C^T x(t) + D u(t)`, starting at rest.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSystem {
    a: DMatrix<f64>,
    b: DVector<f64>,
    c: DVector<f64>,
    d: f64,
    ts: f64,
    x: DVector<f64>,
}

impl DiscreteSystem {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, c: DVector<f64>, d: f64, ts: f64) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.len() != n || c.len() != n {
            return param("state-space matrices have inconsistent sizes");
        }
        Ok(Self { a, b, c, d, ts, x: DVector::zeros(n) })
    }

    /// `B(z^-1) / A(z^-1)` with coefficients of `z^0, z^-1, ...`.
    pub fn from_tf(num: &[f64], den: &[f64], ts: f64) -> Result<Self> {
        if den.is_empty() || den[0] == 0.0 || num.is_empty() {
            return param("discrete transfer function needs a nonzero leading denominator coefficient");
        }
        let n = num.len().max(den.len()) - 1;
        let a0 = den[0];
        let a: Vec<f64> = (0..=n).map(|i| den.get(i).copied().unwrap_or(0.0) / a0).collect();
        let b: Vec<f64> = (0..=n).map(|i| num.get(i).copied().unwrap_or(0.0) / a0).collect();
        let mut am = DMatrix::zeros(n, n);
        for j in 0..n {
            am[(0, j)] = -a[j + 1];
        }
        for i in 1..n {
            am[(i, i - 1)] = 1.0;
        }
        let mut bm = DVector::zeros(n);
        if n > 0 {
            bm[0] = 1.0;
        }
        let cm = DVector::from_fn(n, |i, _| b[i + 1] - b[0] * a[i + 1]);
        Self::new(am, bm, cm, b[0], ts)
    }

    pub fn ts(&self) -> f64 {
        self.ts
    }

    pub fn order(&self) -> usize {
        self.a.nrows()
    }

    pub fn feedthrough(&self) -> f64 {
        self.d
    }

    pub fn reset(&mut self) {
        self.x.fill(0.0);
    }

    pub fn output(&self, u: f64) -> f64 {
        self.c.dot(&self.x) + self.d * u
    }

    pub fn advance(&mut self, u: f64) {
        self.x = &self.a * &self.x + &self.b * u;
    }

    /// Response from rest; does not disturb the internal state.
    pub fn simulate(&self, u: &[f64]) -> Vec<f64> {
        let mut sys = self.clone();
        sys.reset();
        u.iter()
            .map(|&v| {
                let y = sys.output(v);
                sys.advance(v);
                y
            })
            .collect()
    }

    pub fn impulse_response(&self, n: usize) -> Vec<f64> {
        let mut u = vec![0.0; n];
        if n > 0 {
            u[0] = 1.0;
        }
        self.simulate(&u)
    }

    /// Cascade: `self` first, then `next`.
    pub fn series(&self, next: &DiscreteSystem) -> Result<Self> {
        let (n1, n2) = (self.order(), next.order());
        let n = n1 + n2;
        let mut a = DMatrix::zeros(n, n);
        a.view_mut((0, 0), (n1, n1)).copy_from(&self.a);
        a.view_mut((n1, n1), (n2, n2)).copy_from(&next.a);
        a.view_mut((n1, 0), (n2, n1)).copy_from(&(&next.b * self.c.transpose()));
        let mut b = DVector::zeros(n);
        b.rows_mut(0, n1).copy_from(&self.b);
        b.rows_mut(n1, n2).copy_from(&(&next.b * self.d));
        let mut c = DVector::zeros(n);
        c.rows_mut(0, n1).copy_from(&(&self.c * next.d));
        c.rows_mut(n1, n2).copy_from(&next.c);
        Self::new(a, b, c, self.d * next.d, self.ts)
    }
}

/// Response of the continuous system to the zero-order-held input, sampled at `u.ts()`.
pub fn simulate_lti(tf: &LtiTransferFunction, u: &Signal, method: Discretization) -> Result<Signal> {
    let sys = tf.discretize(u.ts(), method)?;
    Signal::new(sys.simulate(u.samples()), u.ts())
}
