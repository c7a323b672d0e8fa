//! Finite-support discrete-time signals.
//!
//! A [`Signal`] stands for an element of `l2` that is zero outside the sample
//! range `0..N`. Every index read outside that range returns exactly zero, so
//! projections, windows and convolutions never need boundary flags.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{dim, Error, Result};

/// Relative tolerance used when comparing sampling intervals.
pub const TS_REL_TOL: f64 = 1e-9;

/// Window length for [`Signal::project`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    /// Keep the `r` most recent samples up to and including `tau`.
    Finite(usize),
    /// Keep every sample up to and including `tau`.
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    samples: Vec<f64>,
    ts: f64,
}

impl Signal {
    pub fn new(samples: Vec<f64>, ts: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidSignal("signal must hold at least one sample".into()));
        }
        if !(ts.is_finite() && ts > 0.0) {
            return Err(Error::InvalidSignal(format!("sampling interval must be positive, got {ts}")));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidSignal(format!("sample {i} is not finite")));
        }
        Ok(Self { samples, ts })
    }

    pub fn zeros(len: usize, ts: f64) -> Result<Self> {
        Self::new(vec![0.0; len], ts)
    }

    pub fn from_fn(len: usize, ts: f64, f: impl FnMut(usize) -> f64) -> Result<Self> {
        Self::new((0..len).map(f).collect(), ts)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ts(&self) -> f64 {
        self.ts
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    /// Sample at `t`, zero outside the support.
    #[inline]
    pub fn at(&self, t: isize) -> f64 {
        if t < 0 {
            0.0
        } else {
            self.samples.get(t as usize).copied().unwrap_or(0.0)
        }
    }

    /// Keeps samples on `[tau - r + 1, tau]` and zeroes the rest.
    pub fn project(&self, tau: isize, r: Window) -> Signal {
        let lo = match r {
            Window::Finite(r) => tau - r as isize + 1,
            Window::Unbounded => isize::MIN,
        };
        let samples = (0..self.len() as isize)
            .map(|t| if t >= lo && t <= tau { self.samples[t as usize] } else { 0.0 })
            .collect();
        Signal { samples, ts: self.ts }
    }

    /// Returns the length-`r` window `w(i) = u(tau - r + 1 + i)`.
    pub fn truncate_window(&self, tau: isize, r: usize) -> Vec<f64> {
        let start = tau - r as isize + 1;
        (0..r as isize).map(|i| self.at(start + i)).collect()
    }

    pub fn inner_product(&self, other: &Signal) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self.samples.iter().zip(&other.samples).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn rms(&self) -> f64 {
        self.norm() / (self.len() as f64).sqrt()
    }

    /// First `n` samples (or the whole signal when shorter).
    pub fn head(&self, n: usize) -> Signal {
        let n = n.clamp(1, self.len());
        Signal { samples: self.samples[..n].to_vec(), ts: self.ts }
    }

    /// Samples from index `n` on; an error when nothing would remain.
    pub fn skip(&self, n: usize) -> Result<Signal> {
        if n >= self.len() {
            return Err(Error::InvalidSignal(format!("cannot skip {n} of {} samples", self.len())));
        }
        Ok(Signal { samples: self.samples[n..].to_vec(), ts: self.ts })
    }

    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Signal> {
        Signal::new(self.samples.iter().map(|&v| f(v)).collect(), self.ts)
    }

    pub fn zip_with(&self, other: &Signal, f: impl Fn(f64, f64) -> f64) -> Result<Signal> {
        self.check_compatible(other)?;
        Signal::new(self.samples.iter().zip(&other.samples).map(|(&a, &b)| f(a, b)).collect(), self.ts)
    }

    pub fn same_ts(&self, other: &Signal) -> bool {
        same_ts(self.ts, other.ts)
    }

    pub fn check_compatible(&self, other: &Signal) -> Result<()> {
        if self.len() != other.len() {
            return dim(format!("signal lengths differ: {} vs {}", self.len(), other.len()));
        }
        if !self.same_ts(other) {
            return dim(format!("sampling intervals differ: {} vs {}", self.ts, other.ts));
        }
        Ok(())
    }
}

pub fn same_ts(a: f64, b: f64) -> bool {
    (a - b).abs() <= TS_REL_TOL * a.abs().max(b.abs())
}

/// Root-mean-square difference between two equal-length signals.
pub fn rmse(a: &Signal, b: &Signal) -> Result<f64> {
    a.check_compatible(b)?;
    let sum: f64 = a.samples().iter().zip(b.samples()).map(|(x, y)| (x - y).powi(2)).sum();
    Ok((sum / a.len() as f64).sqrt())
}

/// A set of named, equally sampled columns sharing a uniform time grid.
///
/// On disk the first column is `t` in seconds; the remaining columns carry
/// the named signals (`u`, `y`, `q`, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct SignalTable {
    pub ts: f64,
    pub columns: Vec<(String, Vec<f64>)>,
}

impl SignalTable {
    pub fn new(ts: f64) -> Self {
        Self { ts, columns: Vec::new() }
    }

    pub fn with(mut self, name: &str, signal: &Signal) -> Self {
        self.columns.push((name.to_string(), signal.samples().to_vec()));
        self
    }

    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, |(_, c)| c.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn column(&self, name: &str) -> Option<Signal> {
        self.columns
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, c)| Signal::new(c.clone(), self.ts).ok())
    }

    pub fn require(&self, name: &str) -> Result<Signal> {
        self.column(name)
            .ok_or_else(|| Error::Format(format!("missing column `{name}`")))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let n = self.len();
        if self.columns.iter().any(|(_, c)| c.len() != n) {
            return dim("all columns of a signal table must have equal length");
        }
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string()];
        header.extend(self.columns.iter().map(|(name, _)| name.clone()));
        w.write_record(&header)?;
        for i in 0..n {
            let mut rec = vec![format!("{}", i as f64 * self.ts)];
            rec.extend(self.columns.iter().map(|(_, c)| format!("{}", c[i])));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(File::create(path)?)
    }

    /// Parses a table, rejecting non-uniform time grids.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header: Vec<String> = r.headers()?.iter().map(|h| h.trim().to_string()).collect();
        if header.first().map(String::as_str) != Some("t") {
            return Err(Error::Format("first column must be `t`".into()));
        }
        let mut t = Vec::new();
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); header.len() - 1];
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(Error::Format(format!("row {} has {} fields", line + 1, rec.len())));
            }
            let parse = |s: &str| -> Result<f64> {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("row {}: cannot parse `{s}`", line + 1)))
            };
            t.push(parse(&rec[0])?);
            for (c, field) in cols.iter_mut().zip(rec.iter().skip(1)) {
                c.push(parse(field)?);
            }
        }
        if t.len() < 2 {
            return Err(Error::Format("at least two samples are needed to define the grid".into()));
        }
        let ts = (t[t.len() - 1] - t[0]) / (t.len() - 1) as f64;
        if !(ts > 0.0) {
            return Err(Error::Format("time column must be strictly increasing".into()));
        }
        for (k, &tk) in t.iter().enumerate() {
            if (tk - t[0] - k as f64 * ts).abs() > TS_REL_TOL * ts {
                return Err(Error::Format(format!("non-uniform time grid at row {}", k + 1)));
            }
        }
        let columns = header.into_iter().skip(1).zip(cols).collect();
        Ok(Self { ts, columns })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sig(v: &[f64]) -> Signal {
        Signal::new(v.to_vec(), 0.1).unwrap()
    }

    #[test]
    fn project_examples() {
        assert_eq!(sig(&[1., 2., 3.]).project(1, Window::Finite(1)).samples(), &[0., 2., 0.]);
        assert_eq!(sig(&[1., 2., 3.]).project(2, Window::Unbounded).samples(), &[1., 2., 3.]);
        assert_eq!(sig(&[1., 2., 3., 4.]).project(2, Window::Finite(2)).samples(), &[0., 2., 3., 0.]);
    }

    #[test]
    fn window_examples() {
        assert_eq!(sig(&[5., 6., 7.]).truncate_window(2, 2), vec![6., 7.]);
        assert_eq!(sig(&[5., 6., 7.]).truncate_window(0, 3), vec![0., 0., 5.]);
        assert_eq!(sig(&[5.]).truncate_window(0, 1), vec![5.]);
    }

    #[test]
    fn inner_product_examples() {
        assert_eq!(sig(&[1., 2.]).inner_product(&sig(&[3., 4.])).unwrap(), 11.0);
        assert_eq!(sig(&[1., 0.]).inner_product(&sig(&[0., 1.])).unwrap(), 0.0);
        let u = sig(&[2., 2., 2.]);
        assert_eq!(u.inner_product(&u).unwrap(), 12.0);
        assert_eq!(u.norm(), 12f64.sqrt());
    }

    #[test]
    fn mismatches_are_errors() {
        assert!(sig(&[1., 2.]).inner_product(&sig(&[1.])).is_err());
        let other = Signal::new(vec![1., 2.], 0.2).unwrap();
        assert!(sig(&[1., 2.]).inner_product(&other).is_err());
    }

    #[test]
    fn invalid_signals_rejected() {
        assert!(Signal::new(vec![], 0.1).is_err());
        assert!(Signal::new(vec![f64::NAN], 0.1).is_err());
        assert!(Signal::new(vec![1.0], 0.0).is_err());
    }

    #[test]
    fn csv_round_trip_and_grid_check() {
        let u = Signal::new(vec![0.1, -2.5, 1e-17, 3.0], 0.05).unwrap();
        let table = SignalTable::new(0.05).with("u", &u);
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let back = SignalTable::read_csv(&buf[..]).unwrap();
        assert_eq!(back.require("u").unwrap().samples(), u.samples());
        assert!((back.ts - 0.05).abs() < 1e-15);

        let bad = "t,u\n0,1\n0.05,2\n0.11,3\n";
        assert!(SignalTable::read_csv(bad.as_bytes()).is_err());
    }

    fn signal_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, 1..30)
    }

    proptest! {
        #[test]
        fn projection_idempotent(v in signal_strategy(), tau in -3isize..35, r in 1usize..10) {
            let u = sig(&v);
            let p = u.project(tau, Window::Finite(r));
            prop_assert_eq!(p.project(tau, Window::Finite(r)), p);
        }

        #[test]
        fn projection_nesting(v in signal_strategy(), tau in -3isize..35, r1 in 1usize..10, extra in 0usize..10) {
            let u = sig(&v);
            let r2 = r1 + extra;
            prop_assert_eq!(
                u.project(tau, Window::Finite(r1)),
                u.project(tau, Window::Finite(r2)).project(tau, Window::Finite(r1))
            );
        }

        #[test]
        fn window_matches_projection(v in signal_strategy(), tau in -3isize..35, r in 1usize..10) {
            let u = sig(&v);
            let p = u.project(tau, Window::Finite(r));
            let w = u.truncate_window(tau, r);
            for (i, wi) in w.iter().enumerate() {
                let t = tau - r as isize + 1 + i as isize;
                prop_assert_eq!(*wi, p.at(t));
            }
            let inside: f64 = p.samples().iter().map(|x| x.abs()).sum();
            let win: f64 = w.iter().map(|x| x.abs()).sum();
            prop_assert_eq!(inside, win);
        }

        #[test]
        fn cauchy_schwarz(a in prop::collection::vec(-10.0f64..10.0, 12), b in prop::collection::vec(-10.0f64..10.0, 12)) {
            let (u, y) = (sig(&a), sig(&b));
            prop_assert!(u.inner_product(&y).unwrap().abs() <= u.norm() * y.norm() * (1.0 + 1e-12));
        }
    }
}
