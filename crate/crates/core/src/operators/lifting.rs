//! Lifting functions: bounded window nonlinearities that gate each branch.

use serde::{Deserialize, Serialize};

use crate::error::{dim, param, Result};
use crate::signals::Signal;

/// How a tabulated lifting behaves outside its breakpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extrapolation {
    /// Hold the end values. The map stays bounded.
    Clamp,
    /// Continue the end segments. Unbounded, so passivity of the trained
    /// operator still holds but the finite-gain argument no longer does.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LiftingKind {
    /// `f = 1`: the branch is a plain FIR filter.
    Identity,
    /// `1` within `radius` of `center`, `radius / |z - center|` beyond it.
    Volcano { center: f64, radius: f64 },
    /// `exp(-||z - reference||^2 / (2 sigma))` on the input window.
    GaussianWindow { reference: Vec<f64>, sigma: f64 },
    /// `exp(-||q - setpoint||^2 / (2 sigma))` on the external window.
    ExternalGaussian { setpoint: f64, sigma: f64 },
    /// Piecewise-linear map of the most recent input sample.
    Tabulated { xs: Vec<f64>, ys: Vec<f64>, extrapolation: Extrapolation },
}

/// A lifting function together with the window lengths it reads.
///
/// Serialized as one flat table: `kind`, the kind's parameters, `r1`, `r2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LiftingRepr", into = "LiftingRepr")]
pub struct LiftingFunction {
    pub kind: LiftingKind,
    /// Input window length `R`.
    pub r1: usize,
    /// External window length; zero when the lifting ignores `q`.
    pub r2: usize,
}

fn one() -> usize {
    1
}

/// Strict on-disk form of [`LiftingFunction`] with per-kind window defaults.
#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum LiftingRepr {
    Identity {
        #[serde(default = "one")]
        r1: usize,
        #[serde(default)]
        r2: usize,
    },
    Volcano {
        center: f64,
        radius: f64,
        #[serde(default = "one")]
        r1: usize,
        #[serde(default)]
        r2: usize,
    },
    GaussianWindow {
        reference: Vec<f64>,
        sigma: f64,
        #[serde(default)]
        r1: Option<usize>,
        #[serde(default)]
        r2: usize,
    },
    ExternalGaussian {
        setpoint: f64,
        sigma: f64,
        #[serde(default = "one")]
        r1: usize,
        #[serde(default = "one")]
        r2: usize,
    },
    Tabulated {
        xs: Vec<f64>,
        ys: Vec<f64>,
        extrapolation: Extrapolation,
        #[serde(default = "one")]
        r1: usize,
        #[serde(default)]
        r2: usize,
    },
}

impl TryFrom<LiftingRepr> for LiftingFunction {
    type Error = crate::Error;

    fn try_from(r: LiftingRepr) -> Result<Self> {
        let (kind, r1, r2) = match r {
            LiftingRepr::Identity { r1, r2 } => (LiftingKind::Identity, r1, r2),
            LiftingRepr::Volcano { center, radius, r1, r2 } => (LiftingKind::Volcano { center, radius }, r1, r2),
            LiftingRepr::GaussianWindow { reference, sigma, r1, r2 } => {
                let r1 = r1.unwrap_or(reference.len());
                (LiftingKind::GaussianWindow { reference, sigma }, r1, r2)
            }
            LiftingRepr::ExternalGaussian { setpoint, sigma, r1, r2 } => {
                (LiftingKind::ExternalGaussian { setpoint, sigma }, r1, r2)
            }
            LiftingRepr::Tabulated { xs, ys, extrapolation, r1, r2 } => {
                (LiftingKind::Tabulated { xs, ys, extrapolation }, r1, r2)
            }
        };
        let f = Self { kind, r1, r2 };
        f.validate()?;
        Ok(f)
    }
}

impl From<LiftingFunction> for LiftingRepr {
    fn from(f: LiftingFunction) -> Self {
        let LiftingFunction { kind, r1, r2 } = f;
        match kind {
            LiftingKind::Identity => Self::Identity { r1, r2 },
            LiftingKind::Volcano { center, radius } => Self::Volcano { center, radius, r1, r2 },
            LiftingKind::GaussianWindow { reference, sigma } => Self::GaussianWindow { reference, sigma, r1: Some(r1), r2 },
            LiftingKind::ExternalGaussian { setpoint, sigma } => Self::ExternalGaussian { setpoint, sigma, r1, r2 },
            LiftingKind::Tabulated { xs, ys, extrapolation } => Self::Tabulated { xs, ys, extrapolation, r1, r2 },
        }
    }
}

impl LiftingFunction {
    pub fn identity() -> Self {
        Self { kind: LiftingKind::Identity, r1: 1, r2: 0 }
    }

    pub fn volcano(center: f64, radius: f64) -> Result<Self> {
        let f = Self { kind: LiftingKind::Volcano { center, radius }, r1: 1, r2: 0 };
        f.validate()?;
        Ok(f)
    }

    pub fn gaussian_window(reference: Vec<f64>, sigma: f64) -> Result<Self> {
        let r1 = reference.len();
        let f = Self { kind: LiftingKind::GaussianWindow { reference, sigma }, r1, r2: 0 };
        f.validate()?;
        Ok(f)
    }

    pub fn external_gaussian(setpoint: f64, sigma: f64, r2: usize) -> Result<Self> {
        let f = Self { kind: LiftingKind::ExternalGaussian { setpoint, sigma }, r1: 1, r2 };
        f.validate()?;
        Ok(f)
    }

    pub fn tabulated(xs: Vec<f64>, ys: Vec<f64>, extrapolation: Extrapolation) -> Result<Self> {
        let f = Self { kind: LiftingKind::Tabulated { xs, ys, extrapolation }, r1: 1, r2: 0 };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.r1 == 0 {
            return param("input window length must be at least 1");
        }
        if self.r2 > 0 && !matches!(self.kind, LiftingKind::ExternalGaussian { .. }) {
            return param("only external liftings read an external window");
        }
        match &self.kind {
            LiftingKind::Identity => {
                if self.r1 != 1 {
                    return param("identity lifting requires R = 1");
                }
            }
            LiftingKind::Volcano { center, radius } => {
                if self.r1 != 1 {
                    return param("volcano lifting requires R = 1");
                }
                if !(center.is_finite() && *radius > 0.0 && radius.is_finite()) {
                    return param(format!("volcano needs a finite center and radius > 0, got ({center}, {radius})"));
                }
            }
            LiftingKind::GaussianWindow { reference, sigma } => {
                if reference.len() != self.r1 {
                    return param("gaussian reference window length must equal R");
                }
                if reference.iter().any(|v| !v.is_finite()) || !(*sigma > 0.0 && sigma.is_finite()) {
                    return param("gaussian lifting needs a finite reference and sigma > 0");
                }
            }
            LiftingKind::ExternalGaussian { setpoint, sigma } => {
                if self.r2 == 0 {
                    return param("external gaussian lifting needs an external window length >= 1");
                }
                if !(setpoint.is_finite() && *sigma > 0.0 && sigma.is_finite()) {
                    return param("external gaussian lifting needs a finite setpoint and sigma > 0");
                }
            }
            LiftingKind::Tabulated { xs, ys, .. } => {
                if self.r1 != 1 {
                    return param("tabulated lifting requires R = 1");
                }
                if xs.len() < 2 || xs.len() != ys.len() {
                    return param("tabulated lifting needs at least two (x, y) breakpoints");
                }
                if xs.windows(2).any(|w| !(w[1] > w[0])) {
                    return param("tabulated breakpoints must be strictly increasing");
                }
                if xs.iter().chain(ys).any(|v| !v.is_finite()) {
                    return param("tabulated breakpoints must be finite");
                }
            }
        }
        Ok(())
    }

    pub fn is_external(&self) -> bool {
        self.r2 > 0
    }

    /// Evaluates the lifting on explicit windows.
    pub fn eval(&self, window: &[f64], external: Option<&[f64]>) -> Result<f64> {
        if window.len() != self.r1 {
            return dim(format!("lifting expects an input window of {} samples, got {}", self.r1, window.len()));
        }
        if self.is_external() {
            match external {
                Some(q) if q.len() == self.r2 => {}
                Some(q) => {
                    return dim(format!("lifting expects an external window of {} samples, got {}", self.r2, q.len()))
                }
                None => return dim("lifting requires an external window"),
            }
        }
        Ok(self.eval_unchecked(window, external.unwrap_or(&[])))
    }

    pub(crate) fn eval_unchecked(&self, window: &[f64], external: &[f64]) -> f64 {
        match &self.kind {
            LiftingKind::Identity => 1.0,
            LiftingKind::Volcano { center, radius } => {
                let d = (window[window.len() - 1] - center).abs();
                if d < *radius {
                    1.0
                } else {
                    radius / d
                }
            }
            LiftingKind::GaussianWindow { reference, sigma } => {
                let d2: f64 = window.iter().zip(reference).map(|(a, b)| (a - b).powi(2)).sum();
                (-d2 / (2.0 * sigma)).exp()
            }
            LiftingKind::ExternalGaussian { setpoint, sigma } => {
                let d2: f64 = external.iter().map(|q| (q - setpoint).powi(2)).sum();
                (-d2 / (2.0 * sigma)).exp()
            }
            LiftingKind::Tabulated { xs, ys, extrapolation } => {
                interpolate(xs, ys, *extrapolation, window[window.len() - 1])
            }
        }
    }

    /// Lifting values `f(window(u, t), window(q, t))` for every `t` in the support of `u`.
    pub fn weights(&self, u: &Signal, q: Option<&Signal>) -> Vec<f64> {
        let mut window = vec![0.0; self.r1];
        let mut ext = vec![0.0; self.r2];
        (0..u.len() as isize)
            .map(|t| {
                fill_window(u, t, &mut window);
                if let Some(q) = q {
                    fill_window(q, t, &mut ext);
                }
                self.eval_unchecked(&window, &ext)
            })
            .collect()
    }
}

pub(crate) fn fill_window(u: &Signal, tau: isize, out: &mut [f64]) {
    let start = tau - out.len() as isize + 1;
    for (i, w) in out.iter_mut().enumerate() {
        *w = u.at(start + i as isize);
    }
}

fn interpolate(xs: &[f64], ys: &[f64], extrapolation: Extrapolation, x: f64) -> f64 {
    let n = xs.len();
    let seg = if x <= xs[0] {
        if extrapolation == Extrapolation::Clamp {
            return ys[0];
        }
        0
    } else if x >= xs[n - 1] {
        if extrapolation == Extrapolation::Clamp {
            return ys[n - 1];
        }
        n - 2
    } else {
        xs.partition_point(|&v| v <= x) - 1
    };
    let (x0, x1, y0, y1) = (xs[seg], xs[seg + 1], ys[seg], ys[seg + 1]);
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}
