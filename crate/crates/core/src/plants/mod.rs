//! Benchmark plants: sampled LTI systems, a saturated lag, the potassium
//! channel gate and the two-cart chain.

mod cart;
mod lti;

pub use cart::{
    check_lugre_passivity, lugre_step, simulate_two_cart, CartOutput, DragParams, Friction, LuGreParams, TwoCart,
    TwoCartParams,
};
pub use lti::{simulate_lti, DiscreteSystem, Discretization, LtiTransferFunction};
pub(crate) use lti::poly_mul;

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::signals::{same_ts, Signal};

/// A sampled single-input single-output plant driven by a zero-order hold.
///
/// `output` reads the current sample given the input applied over the next
/// interval; plants without feedthrough ignore it.
pub trait Plant: Send {
    fn ts(&self) -> f64;
    fn reset(&mut self);
    fn has_feedthrough(&self) -> bool;
    fn output(&self, u: f64) -> f64;
    fn advance(&mut self, u: f64);

    /// Response from rest.
    fn simulate(&mut self, u: &Signal) -> Result<Signal> {
        check_ts(self, u)?;
        self.reset();
        let y = u
            .samples()
            .iter()
            .map(|&v| {
                let y = self.output(v);
                self.advance(v);
                y
            })
            .collect();
        Signal::new(y, u.ts())
    }
}

pub(crate) fn check_ts<P: Plant + ?Sized>(p: &P, u: &Signal) -> Result<()> {
    if !same_ts(p.ts(), u.ts()) {
        return Err(Error::InvalidSignal(format!(
            "input sampled at {} s but plant runs at {} s",
            u.ts(),
            p.ts()
        )));
    }
    Ok(())
}

impl Plant for DiscreteSystem {
    fn ts(&self) -> f64 {
        DiscreteSystem::ts(self)
    }

    fn reset(&mut self) {
        DiscreteSystem::reset(self)
    }

    fn has_feedthrough(&self) -> bool {
        self.feedthrough() != 0.0
    }

    fn output(&self, u: f64) -> f64 {
        DiscreteSystem::output(self, u)
    }

    fn advance(&mut self, u: f64) {
        DiscreteSystem::advance(self, u)
    }
}

/// First-order lag followed by a symmetric saturation of its output.
#[derive(Debug, Clone)]
pub struct SaturatedLag {
    lag: DiscreteSystem,
    limit: f64,
}

impl SaturatedLag {
    pub fn new(tc: f64, limit: f64, ts: f64) -> Result<Self> {
        if !(limit > 0.0) {
            return param("saturation limit must be positive");
        }
        let lag = LtiTransferFunction::first_order_lag(tc)?.discretize(ts, Discretization::Zoh)?;
        Ok(Self { lag, limit })
    }
}

impl Plant for SaturatedLag {
    fn ts(&self) -> f64 {
        self.lag.ts()
    }

    fn reset(&mut self) {
        self.lag.reset()
    }

    fn has_feedthrough(&self) -> bool {
        false
    }

    fn output(&self, u: f64) -> f64 {
        self.lag.output(u).clamp(-self.limit, self.limit)
    }

    fn advance(&mut self, u: f64) {
        self.lag.advance(u)
    }
}

pub fn simulate_saturated_lag(u: &Signal, tc: f64, limit: f64) -> Result<Signal> {
    SaturatedLag::new(tc, limit, u.ts())?.simulate(u)
}

/// Opening rate of the potassium gate at membrane voltage `z` (mV), per ms.
pub fn potassium_alpha(z: f64) -> f64 {
    let a = (z + 10.0) / 10.0;
    if a.abs() < 1e-12 {
        0.1
    } else {
        0.1 * a / a.exp_m1()
    }
}

/// Closing rate of the potassium gate, per ms.
pub fn potassium_beta(z: f64) -> f64 {
    0.125 * (z / 80.0).exp()
}

/// Voltage-clamped potassium conductance: gate `x` follows
/// `x' = alpha(u)(1 - x) - beta(u) x` and the current is `36 x^4 (u - 12)`.
///
/// The sampling interval is in seconds; the gate rates are per millisecond.
#[derive(Debug, Clone)]
pub struct Potassium {
    ts: f64,
    x0: f64,
    x: f64,
}

impl Potassium {
    pub fn new(ts: f64, x0: f64) -> Result<Self> {
        if !(ts > 0.0 && ts.is_finite()) || !(0.0..=1.0).contains(&x0) {
            return param("potassium model needs ts > 0 and a gate state in [0, 1]");
        }
        Ok(Self { ts, x0, x: x0 })
    }

    pub fn gate(&self) -> f64 {
        self.x
    }
}

impl Plant for Potassium {
    fn ts(&self) -> f64 {
        self.ts
    }

    fn reset(&mut self) {
        self.x = self.x0;
    }

    fn has_feedthrough(&self) -> bool {
        true
    }

    fn output(&self, u: f64) -> f64 {
        36.0 * self.x.powi(4) * (u - 12.0)
    }

    /// Exact solution of the gate equation under a held voltage.
    fn advance(&mut self, u: f64) {
        let (a, b) = (potassium_alpha(u), potassium_beta(u));
        let x_inf = a / (a + b);
        self.x = x_inf + (self.x - x_inf) * (-(a + b) * self.ts * 1e3).exp();
    }
}

pub fn simulate_potassium(u: &Signal, x0: f64) -> Result<Signal> {
    Potassium::new(u.ts(), x0)?.simulate(u)
}

/// Plant description as it appears in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlantSpec {
    Lti(LtiSpec),
    DiscreteTf(DiscreteTfSpec),
    SaturatedLag(SaturatedLagSpec),
    Potassium(PotassiumSpec),
    TwoCart(TwoCartParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LtiSpec {
    pub num: Vec<f64>,
    pub den: Vec<f64>,
    #[serde(default)]
    pub method: Discretization,
}

/// Transfer function in ascending powers of `z^-1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscreteTfSpec {
    pub num: Vec<f64>,
    pub den: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaturatedLagSpec {
    pub tc: f64,
    pub limit: f64,
}

impl Default for SaturatedLagSpec {
    fn default() -> Self {
        Self { tc: 0.5, limit: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PotassiumSpec {
    pub x0: f64,
}

impl PlantSpec {
    pub fn build(&self, ts: f64) -> Result<Box<dyn Plant>> {
        Ok(match self {
            Self::Lti(s) => Box::new(LtiTransferFunction::new(s.num.clone(), s.den.clone())?.discretize(ts, s.method)?),
            Self::DiscreteTf(s) => Box::new(DiscreteSystem::from_tf(&s.num, &s.den, ts)?),
            Self::SaturatedLag(s) => Box::new(SaturatedLag::new(s.tc, s.limit, ts)?),
            Self::Potassium(s) => Box::new(Potassium::new(ts, s.x0)?),
            Self::TwoCart(p) => Box::new(TwoCart::new(*p, ts)?),
        })
    }
}
