//! Data generation shared by the commands: open-loop probing, optional VRFT
//! and assembly of training and validation sets.

use std::path::Path;

use pnfir::operators::NfirOperator;
use pnfir::plants::PlantSpec;
use pnfir::signals::Signal;
use pnfir::trainer::{TrainingPair, TrainingSet};
use pnfir::vrft::{load_plant_data, probe_batches, vrft_from_data, ControllerDataset, DataSource};

use crate::config::{CaseConfig, RunConfig};
use crate::CliError;

pub type Batch = (Signal, Signal);

/// Everything one case trains and validates on.
#[derive(Debug, Clone)]
pub struct CaseData {
    pub open_loop: Vec<Batch>,
    pub open_loop_validation: Vec<Batch>,
    pub controller: Option<ControllerDataset>,
    pub controller_validation: Option<ControllerDataset>,
    pub train: TrainingSet,
    pub validation: Option<TrainingSet>,
}

pub fn effective_plant<'a>(cfg: &'a RunConfig, case: Option<&'a CaseConfig>) -> Option<&'a PlantSpec> {
    case.and_then(|c| c.plant.as_ref()).or(cfg.plant.as_ref())
}

fn source(cfg: &RunConfig, plant: Option<&PlantSpec>, validation: bool) -> Result<DataSource, CliError> {
    if !cfg.data.files.is_empty() {
        return Ok(DataSource::Imported { files: cfg.data.files.iter().map(|f| f.display().to_string()).collect() });
    }
    let probe = if validation { cfg.validation.as_ref() } else { cfg.probe.as_ref() };
    match (plant, probe) {
        (Some(p), Some(q)) => Ok(DataSource::Simulated { plant: p.clone(), probe: q.clone() }),
        _ => Err(CliError::Config("a plant and a probe (or data.files) are required".into())),
    }
}

/// Open-loop `(u*, y*)` batches for training and validation.
pub fn open_loop(cfg: &RunConfig, plant: Option<&PlantSpec>, seed: u64) -> Result<(Vec<Batch>, Vec<Batch>), CliError> {
    let mut train = if cfg.data.files.is_empty() {
        let (plant, probe) = match source(cfg, plant, false)? {
            DataSource::Simulated { plant, probe } => (plant, probe),
            DataSource::Imported { .. } => unreachable!(),
        };
        probe_batches(&plant, &probe, cfg.ts, seed)?
    } else {
        cfg.data.files.iter().map(|f| load_imported(f, cfg.ts)).collect::<Result<_, _>>()?
    };
    let mut validation = match (&cfg.validation, plant) {
        (Some(probe), Some(plant)) if cfg.data.files.is_empty() => probe_batches(plant, probe, cfg.ts, seed.wrapping_add(1))?,
        _ => Vec::new(),
    };
    if let Some(k) = cfg.data.train_batches {
        if k == 0 || k > train.len() {
            return Err(CliError::Config(format!("train_batches = {k} but only {} batches exist", train.len())));
        }
        validation.splice(0..0, train.split_off(k));
    }
    Ok((train, validation))
}

fn load_imported(path: &Path, ts: f64) -> Result<Batch, CliError> {
    let (u, y) = load_plant_data(path)?;
    if !pnfir::signals::same_ts(u.ts(), ts) {
        return Err(CliError::Config(format!("{} is sampled at {} s, config says {ts} s", path.display(), u.ts())));
    }
    Ok((u, y))
}

fn identification_set(batches: &[Batch]) -> Result<TrainingSet, CliError> {
    let pairs = batches
        .iter()
        .map(|(u, y)| TrainingPair::new(u.clone(), y.clone(), None))
        .collect::<Result<_, _>>()?;
    Ok(TrainingSet::new(pairs)?)
}

/// Builds the training data: the ideal-controller samples when a reference
/// model is configured, the open-loop pairs otherwise.
pub fn case_data(cfg: &RunConfig, case: Option<&CaseConfig>, seed: u64) -> Result<CaseData, CliError> {
    let plant = effective_plant(cfg, case);
    let (open_loop, open_loop_validation) = open_loop(cfg, plant, seed)?;
    let Some(reference) = &cfg.reference else {
        let validation = (!open_loop_validation.is_empty()).then(|| identification_set(&open_loop_validation)).transpose()?;
        return Ok(CaseData {
            train: identification_set(&open_loop)?,
            validation,
            open_loop,
            open_loop_validation,
            controller: None,
            controller_validation: None,
        });
    };
    let controller = vrft_from_data(&open_loop, reference, &cfg.vrft, source(cfg, plant, false)?, seed)?;
    let controller_validation = if open_loop_validation.is_empty() {
        None
    } else {
        let src = if cfg.validation.is_some() { source(cfg, plant, true)? } else { source(cfg, plant, false)? };
        Some(vrft_from_data(&open_loop_validation, reference, &cfg.vrft, src, seed.wrapping_add(1))?)
    };
    Ok(CaseData {
        train: controller.training_set()?,
        validation: controller_validation.as_ref().map(|d| d.training_set()).transpose()?,
        controller: Some(controller),
        controller_validation,
        open_loop,
        open_loop_validation,
    })
}

pub fn operator_path(out: &Path, case: &str) -> std::path::PathBuf {
    out.join(format!("operator_{case}.json"))
}

pub fn load_operator(out: &Path, case: &str) -> Result<NfirOperator, CliError> {
    let path = operator_path(out, case);
    if !path.exists() {
        return Err(CliError::Config(format!("{} not found; run `pnfir train` first", path.display())));
    }
    Ok(NfirOperator::load(&path)?)
}

/// Output RMSE of `op` over a set, and the RMS of the targets.
pub fn fit_quality(op: &NfirOperator, set: &TrainingSet) -> Result<(f64, f64), CliError> {
    let rmse = pnfir::trainer::evaluate_rmse(op, set)?;
    let (mut ss, mut n) = (0.0, 0usize);
    for p in set.pairs() {
        ss += p.y.samples().iter().map(|v| v * v).sum::<f64>();
        n += p.len();
    }
    Ok((rmse, (ss / n.max(1) as f64).sqrt()))
}
