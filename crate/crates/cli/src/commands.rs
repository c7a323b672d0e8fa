//! The six subcommands. Each writes its artifacts and a resolved-config copy
//! under the output directory and returns a one-line summary.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pnfir::closedloop::{run_closed_loop, track_reference_model, tracking_metrics, TrackingMetrics, TrackingOptions};
use pnfir::operators::NfirOperator;
use pnfir::passivity::{default_verification_grid, nyquist, verify_operator, BranchVerification};
use pnfir::qp::SolveStatus;
use pnfir::signals::SignalTable;
use pnfir::trainer::{train, SynthesisSpec};
use pnfir::vrft::ReferenceModel;
use serde::Serialize;

use crate::config::{RunConfig, RESOLVED_CONFIG};
use crate::pipeline::{case_data, effective_plant, fit_quality, load_operator, open_loop, operator_path, Batch};
use crate::CliError;

/// Grid used to verify operators trained without frequency constraints.
pub const UNCONSTRAINED_VERIFY_GRID: usize = 4000;

#[derive(Debug, Clone)]
pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub seed: u64,
}

impl Context {
    /// Applies the command-line overrides and prepares the output directory.
    pub fn new(mut cfg: RunConfig, out: Option<PathBuf>, seed: Option<u64>) -> Result<Self, CliError> {
        if let Some(s) = seed {
            cfg.seed = s;
        }
        let out = out.unwrap_or_else(|| PathBuf::from("out").join(&cfg.name));
        fs::create_dir_all(&out)?;
        fs::write(out.join(RESOLVED_CONFIG), cfg.resolved()?)?;
        Ok(Self { seed: cfg.seed, cfg, out })
    }

    fn case_names(&self) -> Vec<String> {
        self.cfg.cases.iter().map(|c| c.name.clone()).collect()
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn write_batches(dir: &Path, prefix: &str, batches: &[Batch]) -> Result<(), CliError> {
    for (i, (u, y)) in batches.iter().enumerate() {
        SignalTable::new(u.ts()).with("u", u).with("y", y).save(dir.join(format!("{prefix}_{i:03}.csv")))?;
    }
    Ok(())
}

/// Labels and plants of the data units: one per case, or a single unit without cases.
fn units(ctx: &Context) -> Vec<(String, Option<&crate::config::CaseConfig>)> {
    if ctx.cfg.cases.is_empty() {
        vec![("data".to_string(), None)]
    } else {
        ctx.cfg.cases.iter().map(|c| (c.name.clone(), Some(c))).collect()
    }
}

pub fn cmd_plant(ctx: &Context) -> Result<String, CliError> {
    let mut total = 0;
    for (label, case) in units(ctx) {
        let plant = effective_plant(&ctx.cfg, case);
        let (train, validation) = open_loop(&ctx.cfg, plant, ctx.seed)?;
        let dir = ctx.out.join("plant").join(&label);
        fs::create_dir_all(&dir)?;
        write_batches(&dir, "train", &train)?;
        write_batches(&dir, "validation", &validation)?;
        write_json(
            &dir.join("plant.provenance.json"),
            &serde_json::json!({
                "plant": plant,
                "probe": ctx.cfg.probe,
                "validation": ctx.cfg.validation,
                "files": ctx.cfg.data.files,
                "ts": ctx.cfg.ts,
                "seed": ctx.seed,
                "train_batches": train.len(),
                "validation_batches": validation.len(),
            }),
        )?;
        total += train.len() + validation.len();
    }
    Ok(format!("wrote {total} open-loop batches under {}", ctx.out.join("plant").display()))
}

pub fn cmd_vrft(ctx: &Context) -> Result<String, CliError> {
    if ctx.cfg.reference.is_none() {
        return Err(CliError::Config("vrft needs a [reference] model".into()));
    }
    let mut total = 0;
    for (label, case) in units(ctx) {
        let data = case_data(&ctx.cfg, case, ctx.seed)?;
        let dir = ctx.out.join("vrft").join(&label);
        if let Some(d) = &data.controller {
            d.save(&dir)?;
            total += d.pairs.len();
            for w in &d.provenance.warnings {
                eprintln!("warning ({label}): {w}");
            }
        }
        if let Some(d) = &data.controller_validation {
            d.save(dir.join("validation"))?;
        }
    }
    Ok(format!("wrote {total} controller batches under {}", ctx.out.join("vrft").display()))
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub case: String,
    pub status: SolveStatus,
    pub iterations: usize,
    pub wall_time: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub train_rmse: f64,
    pub train_target_rms: f64,
    pub validation_rmse: Option<f64>,
    pub validation_target_rms: Option<f64>,
    pub integrator_gain: Option<f64>,
}

pub fn cmd_train(ctx: &Context) -> Result<String, CliError> {
    if ctx.cfg.cases.is_empty() {
        return Err(CliError::Config("train needs at least one [[case]]".into()));
    }
    let mut rows = Vec::new();
    let mut infeasible = Vec::new();
    for case in &ctx.cfg.cases {
        let data = case_data(&ctx.cfg, Some(case), ctx.seed)?;
        let (op, report) = match train(&data.train, &case.synthesis, &ctx.cfg.solver) {
            Ok(r) => r,
            Err(pnfir::Error::Infeasible(msg)) => {
                infeasible.push(format!("case `{}`: {msg}", case.name));
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        op.save(operator_path(&ctx.out, &case.name))?;
        write_json(&ctx.out.join(format!("report_{}.json", case.name)), &report)?;
        let (train_rmse, train_target_rms) = fit_quality(&op, &data.train)?;
        let val = data.validation.as_ref().map(|v| fit_quality(&op, v)).transpose()?;
        rows.push(TrainSummary {
            case: case.name.clone(),
            status: report.status,
            iterations: report.iterations,
            wall_time: report.wall_time,
            primal_residual: report.primal_residual,
            dual_residual: report.dual_residual,
            train_rmse,
            train_target_rms,
            validation_rmse: val.map(|v| v.0),
            validation_target_rms: val.map(|v| v.1),
            integrator_gain: op.integrator_gain(),
        });
    }
    write_rows(&ctx.out.join("train_summary.csv"), &rows)?;
    if !infeasible.is_empty() {
        return Err(CliError::Infeasible(infeasible.join("; ")));
    }
    let fits: Vec<String> = rows.iter().map(|r| format!("{} rmse {:.4e}", r.case, r.train_rmse)).collect();
    Ok(format!("trained {} case(s): {}", rows.len(), fits.join(", ")))
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct VerifyRow {
    operator: String,
    branch: usize,
    freq_margin: f64,
    toeplitz_min_eig: f64,
    toeplitz_n: usize,
    grid_points: usize,
    passes: bool,
}

fn verify_grid(ctx: &Context, spec: Option<&SynthesisSpec>) -> usize {
    ctx.cfg.verify.grid_points.unwrap_or_else(|| {
        spec.and_then(|s| s.passivity.as_ref())
            .map_or(UNCONSTRAINED_VERIFY_GRID, |p| default_verification_grid(p.h_samples))
    })
}

/// Checks one operator, writing its Nyquist samples; returns the per-branch rows.
pub fn verify_one(
    label: &str,
    op: &NfirOperator,
    grid: usize,
    toeplitz_n: usize,
    out: &Path,
) -> Result<Vec<BranchVerification>, CliError> {
    let checks = verify_operator(op, grid, toeplitz_n)?;
    let mut w = csv::Writer::from_path(out.join(format!("nyquist_{label}.csv")))?;
    w.write_record(["branch", "omega", "re", "im"])?;
    for (j, b) in op.branches().iter().enumerate() {
        for (om, re, im) in nyquist(&b.impulse, grid) {
            w.write_record([j.to_string(), om.to_string(), re.to_string(), im.to_string()])?;
        }
    }
    w.flush()?;
    Ok(checks)
}

pub fn cmd_verify(ctx: &Context) -> Result<String, CliError> {
    let mut targets: Vec<(String, NfirOperator, usize)> = Vec::new();
    let names = if ctx.cfg.verify.cases.is_empty() { ctx.case_names() } else { ctx.cfg.verify.cases.clone() };
    for name in names {
        let op = load_operator(&ctx.out, &name)?;
        targets.push((name.clone(), op, verify_grid(ctx, ctx.cfg.case(&name).map(|c| &c.synthesis))));
    }
    for path in &ctx.cfg.verify.operators {
        let op = NfirOperator::load(path)?;
        let label = path.file_stem().map_or("operator".into(), |s| s.to_string_lossy().into_owned());
        targets.push((label, op, verify_grid(ctx, None)));
    }
    if targets.is_empty() {
        return Err(CliError::Config("nothing to verify: no cases and no verify.operators".into()));
    }
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (label, op, grid) in &targets {
        for c in verify_one(label, op, *grid, ctx.cfg.verify.toeplitz_n, &ctx.out)? {
            if !c.passes() {
                failures.push(format!("{label} branch {} margin {:.3e} eig {:.3e}", c.branch, c.freq_margin, c.toeplitz_min_eig));
            }
            rows.push(VerifyRow {
                operator: label.clone(),
                branch: c.branch,
                freq_margin: c.freq_margin,
                toeplitz_min_eig: c.toeplitz_min_eig,
                toeplitz_n: c.n_used,
                grid_points: *grid,
                passes: c.passes(),
            });
        }
        if op.integrator_gain().is_some_and(|a| a < 0.0) {
            failures.push(format!("{label} has a negative integrator gain"));
        }
    }
    write_rows(&ctx.out.join("verify.csv"), &rows)?;
    if !failures.is_empty() {
        return Err(CliError::Verification(failures.join("; ")));
    }
    Ok(format!("{} branch(es) across {} operator(s) passed", rows.len(), targets.len()))
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateRow {
    pub controller: String,
    pub reference: String,
    pub rmse: f64,
    pub max_abs: f64,
    pub rmse_low: f64,
    pub rmse_high: f64,
    pub tail_max_abs: f64,
    pub long_horizon: usize,
    pub long_max_abs: f64,
    pub bounded: bool,
}

pub fn cmd_simulate(ctx: &Context) -> Result<String, CliError> {
    let sim = ctx
        .cfg
        .simulate
        .as_ref()
        .ok_or_else(|| CliError::Config("simulate needs a [simulate] section".into()))?;
    let controllers = if sim.controllers.is_empty() { ctx.case_names() } else { sim.controllers.clone() };
    let mr = ctx.cfg.reference.as_ref().map(|r| ReferenceModel::new(r.clone(), ctx.cfg.ts)).transpose()?;
    let mut rows = Vec::new();
    for name in &controllers {
        let op = load_operator(&ctx.out, name)?;
        let plant_spec = sim
            .plant
            .as_ref()
            .or_else(|| effective_plant(&ctx.cfg, ctx.cfg.case(name)))
            .ok_or_else(|| CliError::Config("simulate needs a plant".into()))?;
        let opts = TrackingOptions { exclude: sim.exclude.unwrap_or(op.memory()).min(sim.len - 1), crossover: sim.crossover };
        for reference in &sim.references {
            let r = reference.signal.generate(sim.len, ctx.cfg.ts)?;
            let mut plant = plant_spec.build(ctx.cfg.ts)?;
            let trace = run_closed_loop(plant.as_mut(), &op, &r, &sim.noise)?;
            let path = ctx.out.join(format!("trace_{name}_{}.csv", reference.name));
            let metrics = if let Some(t) = trace.diverged_at {
                trace.save(path, None)?;
                diverged_metrics(t)
            } else {
                let (metrics, target) = match &mr {
                    Some(mr) => track_reference_model(&trace, mr, &opts)?,
                    None => (tracking_metrics(&trace.y, &r, &opts)?, r.clone()),
                };
                trace.save(path, Some(&target))?;
                metrics
            };
            let long_len = sim.len * sim.horizon_factor;
            let long_r = reference.signal.generate(long_len, ctx.cfg.ts)?;
            let long = run_closed_loop(plant.as_mut(), &op, &long_r, &sim.noise)?;
            rows.push(SimulateRow {
                controller: name.clone(),
                reference: reference.name.clone(),
                rmse: metrics.rmse,
                max_abs: metrics.max_abs,
                rmse_low: metrics.rmse_low,
                rmse_high: metrics.rmse_high,
                tail_max_abs: metrics.tail_max_abs,
                long_horizon: long_len,
                long_max_abs: long.max_abs(),
                bounded: long.is_bounded(sim.bound),
            });
        }
    }
    write_rows(&ctx.out.join("simulate_summary.csv"), &rows)?;
    let unbounded: Vec<String> =
        rows.iter().filter(|r| !r.bounded).map(|r| format!("{} / {}", r.controller, r.reference)).collect();
    if !unbounded.is_empty() {
        return Err(CliError::Verification(format!("unbounded loops: {}", unbounded.join(", "))));
    }
    let fits: Vec<String> = rows.iter().map(|r| format!("{}/{} rmse {:.4e}", r.controller, r.reference, r.rmse)).collect();
    Ok(fits.join(", "))
}

fn diverged_metrics(samples: usize) -> TrackingMetrics {
    let inf = f64::INFINITY;
    TrackingMetrics { rmse: inf, max_abs: inf, rmse_low: inf, rmse_high: inf, tail_max_abs: inf, samples }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub m: usize,
    pub h: usize,
    pub n_constraints: usize,
    pub repeats: usize,
    pub threads: usize,
    pub median_s: f64,
    pub min_s: f64,
    pub max_s: f64,
    pub status: SolveStatus,
}

/// Times synthesis (constraint assembly plus solve) over the `m x H` grid.
pub fn run_bench(ctx: &Context) -> Result<Vec<BenchRow>, CliError> {
    let bench = &ctx.cfg.bench;
    let case = match &bench.case {
        Some(name) => ctx.cfg.case(name),
        None => ctx.cfg.cases.first(),
    }
    .ok_or_else(|| CliError::Config("bench needs a [[case]] to take data and passivity settings from".into()))?;
    let base = case.synthesis.passivity.clone().ok_or_else(|| CliError::Config("bench case needs passivity settings".into()))?;
    let data = case_data(&ctx.cfg, Some(case), ctx.seed)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(bench.threads)
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let mut rows = Vec::new();
    for &m in &bench.m {
        for &h in &bench.h {
            let spec = SynthesisSpec {
                m,
                passivity: Some(pnfir::passivity::PassivityConfig { h_samples: h, ..base.clone() }),
                ..case.synthesis.clone()
            };
            let n_constraints = pnfir::trainer::constraints(&spec)?.len();
            let mut times = Vec::with_capacity(bench.repeats);
            let mut status = SolveStatus::Optimal;
            for _ in 0..bench.repeats {
                let start = Instant::now();
                let result = pool.install(|| train(&data.train, &spec, &ctx.cfg.solver));
                times.push(start.elapsed().as_secs_f64());
                status = match result {
                    Ok((_, r)) => r.status,
                    Err(pnfir::Error::Infeasible(_)) => SolveStatus::Infeasible,
                    Err(e) => return Err(e.into()),
                };
            }
            times.sort_by(f64::total_cmp);
            rows.push(BenchRow {
                m,
                h,
                n_constraints,
                repeats: bench.repeats,
                threads: bench.threads,
                median_s: times[times.len() / 2],
                min_s: times[0],
                max_s: times[times.len() - 1],
                status,
            });
        }
    }
    Ok(rows)
}

pub fn cmd_bench(ctx: &Context) -> Result<String, CliError> {
    let rows = run_bench(ctx)?;
    write_rows(&ctx.out.join("bench.csv"), &rows)?;
    let slowest = rows.iter().map(|r| r.median_s).fold(0.0, f64::max);
    Ok(format!("{} cell(s), slowest median {slowest:.4} s on {} thread(s)", rows.len(), ctx.cfg.bench.threads))
}
