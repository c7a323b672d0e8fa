//! LuGre friction and the two-cart spring-damper chain.

use serde::{Deserialize, Serialize};

use super::Plant;
use crate::error::{param, Result};
use crate::signals::Signal;

/// LuGre friction with velocity-dependent micro-damping
/// `sigma1(v) = c1 exp(-(v / c0)^2)`.
///
/// Defaults are the standard unit-mass parameter set with `c0 = 0.0074`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LuGreParams {
    pub sigma0: f64,
    pub sigma2: f64,
    pub c0: f64,
    pub c1: f64,
    pub f_c: f64,
    pub f_s: f64,
    pub v_s: f64,
    /// Force multiplier per kilogram of cart mass.
    pub mass_scale: f64,
}

impl Default for LuGreParams {
    fn default() -> Self {
        Self {
            sigma0: 1e5,
            sigma2: 0.4,
            c0: 0.0074,
            c1: 1e5f64.sqrt(),
            f_c: 1.0,
            f_s: 1.5,
            v_s: 0.001,
            mass_scale: 1.5,
        }
    }
}

impl LuGreParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma0 > 0.0
            && self.f_c > 0.0
            && self.f_s >= self.f_c
            && self.v_s > 0.0
            && self.c0 > 0.0
            && self.c1 >= 0.0
            && self.sigma2 >= 0.0
            && self.mass_scale > 0.0;
        if !ok {
            return param("LuGre parameters need sigma0 > 0, F_s >= F_c > 0, v_s > 0, c0 > 0, c1 >= 0");
        }
        Ok(())
    }

    /// `g(v) = (F_c + (F_s - F_c) exp(-(v / v_s)^2)) / sigma0`.
    pub fn g(&self, v: f64) -> f64 {
        (self.f_c + (self.f_s - self.f_c) * (-(v / self.v_s).powi(2)).exp()) / self.sigma0
    }

    pub fn sigma1(&self, v: f64) -> f64 {
        self.c1 * (-(v / self.c0).powi(2)).exp()
    }

    /// Bristle dynamics `z' = v - |v| z / g(v)`.
    pub fn z_dot(&self, z: f64, v: f64) -> f64 {
        v - v.abs() * z / self.g(v)
    }

    /// Friction force for a cart of mass `mass`.
    pub fn force(&self, z: f64, v: f64, mass: f64) -> f64 {
        self.mass_scale * mass * (self.sigma0 * z + self.sigma1(v) * self.z_dot(z, v) + self.sigma2 * v)
    }
}

/// One RK4 step of the bristle state at fixed velocity; returns the new
/// state and the friction force there (unit mass).
pub fn lugre_step(z: f64, v: f64, dt: f64, p: &LuGreParams) -> (f64, f64) {
    let k1 = p.z_dot(z, v);
    let k2 = p.z_dot(z + 0.5 * dt * k1, v);
    let k3 = p.z_dot(z + 0.5 * dt * k2, v);
    let k4 = p.z_dot(z + dt * k3, v);
    let zn = z + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    (zn, p.force(zn, v, 1.0))
}

/// Checks `c1 exp(-(v/c0)^2) <= 4 F_c / |v|` on a log-spaced grid of
/// `(1e-9 v_max, v_max]`; returns the verdict and the smallest slack.
pub fn check_lugre_passivity(p: &LuGreParams, v_max: f64, grid: usize) -> Result<(bool, f64)> {
    if !(v_max > 0.0) || grid < 2 {
        return param("LuGre check needs v_max > 0 and at least two grid points");
    }
    let lo = (v_max * 1e-9).ln();
    let hi = v_max.ln();
    let worst = (0..grid)
        .map(|i| {
            let v = (lo + (hi - lo) * i as f64 / (grid - 1) as f64).exp();
            4.0 * p.f_c / v - p.sigma1(v)
        })
        .fold(f64::INFINITY, f64::min);
    Ok((worst >= 0.0, worst))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Friction {
    Lugre(LuGreParams),
    /// `F = a v |v| + b v`.
    QuadraticDrag(DragParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DragParams {
    pub a: f64,
    pub b: f64,
}

impl Default for DragParams {
    fn default() -> Self {
        Self { a: 0.5, b: 0.5 }
    }
}

impl Default for Friction {
    fn default() -> Self {
        Self::Lugre(LuGreParams::default())
    }
}

/// Which signal of the second cart is reported as the plant output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CartOutput {
    /// `v2` sampled at the start of each hold interval (no feedthrough).
    #[default]
    Velocity,
    /// Mean of `v2` over the hold interval, `(x2(t+1) - x2(t)) / ts`.
    IntervalMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoCartParams {
    pub m1: f64,
    pub m2: f64,
    pub k12: f64,
    pub c12: f64,
    pub friction: Friction,
    /// RK4 substeps per sample; `None` picks a friction-dependent default.
    pub substeps: Option<usize>,
    pub output: CartOutput,
}

impl Default for TwoCartParams {
    fn default() -> Self {
        Self {
            m1: 1.0,
            m2: 1.0,
            k12: 10.0,
            c12: 1.0,
            friction: Friction::default(),
            substeps: None,
            output: CartOutput::Velocity,
        }
    }
}

impl TwoCartParams {
    pub fn drag() -> Self {
        Self { friction: Friction::QuadraticDrag(DragParams::default()), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.m1 > 0.0 && self.m2 > 0.0 && self.k12 > 0.0 && self.c12 > 0.0) {
            return param("two-cart masses, stiffness and damping must be positive");
        }
        if self.substeps == Some(0) {
            return param("substeps must be at least 1");
        }
        match self.friction {
            Friction::Lugre(p) => p.validate(),
            Friction::QuadraticDrag(d) if d.a >= 0.0 && d.b >= 0.0 => Ok(()),
            Friction::QuadraticDrag(_) => param("drag coefficients must be nonnegative"),
        }
    }

    /// Substeps giving a step of about 5 us for LuGre (bristle stiffness
    /// `|v| sigma0 / F_c`) and 2.5 ms for drag.
    pub fn substeps_for(&self, ts: f64) -> usize {
        self.substeps.unwrap_or_else(|| {
            let dt = match self.friction {
                Friction::Lugre(_) => 5e-6,
                Friction::QuadraticDrag(_) => 2.5e-3,
            };
            ((ts / dt).ceil() as usize).max(1)
        })
    }
}

/// Upper bound on the velocity-driven refinement of the default step.
const MAX_REFINEMENT: usize = 64;

/// State `[v1, v2, delta = x2 - x1, z1, z2, x2]`.
type CartState = [f64; 6];

#[derive(Debug, Clone)]
pub struct TwoCart {
    p: TwoCartParams,
    ts: f64,
    substeps: usize,
    s: CartState,
}

impl TwoCart {
    pub fn new(p: TwoCartParams, ts: f64) -> Result<Self> {
        p.validate()?;
        if !(ts > 0.0 && ts.is_finite()) {
            return param("sampling interval must be positive");
        }
        Ok(Self { substeps: p.substeps_for(ts), p, ts, s: [0.0; 6] })
    }

    pub fn state(&self) -> [f64; 6] {
        self.s
    }

    pub fn velocities(&self) -> (f64, f64) {
        (self.s[0], self.s[1])
    }

    fn friction(&self, v: f64, z: f64, mass: f64) -> (f64, f64) {
        match self.p.friction {
            Friction::Lugre(l) => (l.force(z, v, mass), l.z_dot(z, v)),
            Friction::QuadraticDrag(d) => (d.a * v * v.abs() + d.b * v, 0.0),
        }
    }

    fn deriv(&self, s: &CartState, u: f64) -> CartState {
        let [v1, v2, delta, z1, z2, _] = *s;
        let spring = self.p.k12 * delta + self.p.c12 * (v2 - v1);
        let (f1, zd1) = self.friction(v1, z1, self.p.m1);
        let (f2, zd2) = self.friction(v2, z2, self.p.m2);
        [(spring - f1) / self.p.m1, (u - spring - f2) / self.p.m2, v2 - v1, zd1, zd2, v2]
    }

    /// Substeps for one interval. With the default step, fast sliding refines
    /// it so that the bristle stiffness times the step stays below one.
    fn substeps_at(&self, s: &CartState) -> usize {
        match (self.p.friction, self.p.substeps) {
            (Friction::Lugre(l), None) => {
                let stiffness = l.sigma0 * s[0].abs().max(s[1].abs()) / l.f_c;
                let needed = (self.ts * stiffness).ceil();
                if needed.is_finite() {
                    self.substeps.max(needed as usize).min(MAX_REFINEMENT * self.substeps)
                } else {
                    self.substeps
                }
            }
            _ => self.substeps,
        }
    }

    fn integrate(&self, mut s: CartState, u: f64) -> CartState {
        let substeps = self.substeps_at(&s);
        let dt = self.ts / substeps as f64;
        let axpy = |s: &CartState, k: &CartState, h: f64| -> CartState { std::array::from_fn(|i| s[i] + h * k[i]) };
        for _ in 0..substeps {
            let k1 = self.deriv(&s, u);
            let k2 = self.deriv(&axpy(&s, &k1, 0.5 * dt), u);
            let k3 = self.deriv(&axpy(&s, &k2, 0.5 * dt), u);
            let k4 = self.deriv(&axpy(&s, &k3, dt), u);
            s = std::array::from_fn(|i| s[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
        }
        s
    }
}

impl Plant for TwoCart {
    fn ts(&self) -> f64 {
        self.ts
    }

    fn reset(&mut self) {
        self.s = [0.0; 6];
    }

    fn has_feedthrough(&self) -> bool {
        self.p.output == CartOutput::IntervalMean
    }

    fn output(&self, u: f64) -> f64 {
        match self.p.output {
            CartOutput::Velocity => self.s[1],
            CartOutput::IntervalMean => (self.integrate(self.s, u)[5] - self.s[5]) / self.ts,
        }
    }

    fn advance(&mut self, u: f64) {
        self.s = self.integrate(self.s, u);
    }

    fn simulate(&mut self, u: &Signal) -> Result<Signal> {
        super::check_ts(self, u)?;
        self.reset();
        let mut y = Vec::with_capacity(u.len());
        for &v in u.samples() {
            let before = self.s;
            self.advance(v);
            y.push(match self.p.output {
                CartOutput::Velocity => before[1],
                CartOutput::IntervalMean => (self.s[5] - before[5]) / self.ts,
            });
        }
        Signal::new(y, u.ts())
    }
}

/// Response of the two-cart chain from rest; `substeps` overrides the parameter set.
pub fn simulate_two_cart(u: &Signal, p: &TwoCartParams, substeps: usize) -> Result<Signal> {
    let params = TwoCartParams { substeps: Some(substeps), ..*p };
    TwoCart::new(params, u.ts())?.simulate(u)
}
