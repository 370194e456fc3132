//! Scenario runs and parameter sweeps with CSV output.

use std::path::Path;

use boltzmix::collision::{CollisionOperator, MixtureState, StateMode};
use boltzmix::diagnostics::{conserved_moments, fit_decay_rate, ConservedMoments, DecayField, DecayFit, DiagnosticsRecord, Recorder};
use boltzmix::solver::{run_observed, standing_wave};

use crate::config::{RunConfig, ScenarioName};
use crate::CliError;

/// Records of one run together with the config it actually used.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: RunConfig,
    pub records: Vec<DiagnosticsRecord>,
    /// Relative moment defect of one uncorrected collision step from the
    /// initial state, dt |int psi Q|.
    pub step_defect: f64,
    /// Smallest node value of F seen at any step.
    pub min_value: f64,
}

impl RunOutput {
    /// Largest relative deviation of recorded moments from the initial ones.
    pub fn max_drift(&self) -> f64 {
        let species = self.species();
        let first = self.records[0].moments();
        self.records
            .iter()
            .map(|r| r.moments().relative_drift(&first, &species))
            .fold(0.0, f64::max)
    }

    pub fn final_rel_entropy(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.rel_entropy)
    }

    pub fn decay_fit(&self, field: DecayField) -> Result<DecayFit, CliError> {
        Ok(fit_decay_rate(&self.records, field, self.config.fit_window())?)
    }

    fn species(&self) -> Vec<boltzmix::model::Species> {
        self.config.resolve().map(|r| r.species).unwrap_or_default()
    }
}

fn step_defect(op: &CollisionOperator, state: &MixtureState, dt: f64) -> Result<f64, CliError> {
    let species = op.species();
    let reference = conserved_moments(species, op.grid(), state)?;
    let cells = state.cell_count();
    let mut r = vec![0.0; species.len() + 4];
    for c in 0..cells {
        let w = op.weak_form(state, c)?;
        for (a, b) in r.iter_mut().zip(&w.residual) {
            *a += dt * b / cells as f64;
        }
    }
    let ns = species.len();
    let moved = ConservedMoments {
        mass: reference.mass.iter().zip(&r).map(|(m, d)| m + d).collect(),
        momentum: [0, 1, 2].map(|d| reference.momentum[d] + r[ns + d]),
        energy: reference.energy + r[ns + 3],
    };
    Ok(moved.relative_drift(&reference, species))
}

/// Runs the configured scenario in memory.
pub fn run(config: &RunConfig) -> Result<RunOutput, CliError> {
    let resolved = config.resolve()?;
    let op = resolved.operator(config)?;
    let recorder = Recorder::new(&op, resolved.weight.clone());
    let cfg = config.step_config(recorder.frequency().max_value())?;
    let initial = match (&resolved.torus, config.scenario.name) {
        (Some(t), ScenarioName::StandingWave) => {
            standing_wave(&resolved.species, &resolved.grid, t, config.scenario.amplitude.unwrap_or(0.2))?
        }
        (Some(t), _) => {
            let cell = resolved.scenario.build(&resolved.species, &resolved.grid, config.run.seed)?;
            MixtureState::new(StateMode::Physical, vec![cell; t.cells()])?
        }
        (None, _) => resolved.scenario.homogeneous(&resolved.species, &resolved.grid, config.run.seed)?,
    };
    let sample_every = config.run.sample_every;
    let dt = cfg.dt();
    let collides = resolved.torus.as_ref().map_or(true, |t| !t.transport_only);
    let defect = if collides { step_defect(&op, &initial, dt)? } else { 0.0 };
    let mut min_value = f64::INFINITY;
    let traj = run_observed(
        &op,
        &recorder,
        &initial,
        &cfg,
        resolved.torus.as_ref(),
        config.run.t_end,
        sample_every,
        |_, _, state| {
            min_value = min_value.min(state.min_value());
            Ok(())
        },
    )?;
    let mut used = config.clone();
    used.step.dt = Some(dt);
    Ok(RunOutput {
        config: used,
        records: traj.records,
        step_defect: defect,
        min_value,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_records(records: &[DiagnosticsRecord], path: &Path) -> Result<(), CliError> {
    let ns = records.first().map_or(0, |r| r.mass.len());
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(DiagnosticsRecord::csv_header(ns))?;
    for r in records {
        w.write_record(r.csv_row())?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Runs and writes diagnostics.csv, the resolved config.toml and, with
/// `plots`, one SVG per functional under plots/.
pub fn simulate(config: &RunConfig, out: &Path, plots: bool) -> Result<RunOutput, CliError> {
    let result = run(config)?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let mut used = result.config.clone();
    used.run.output = out.to_path_buf();
    let cfg_path = out.join("config.toml");
    std::fs::write(&cfg_path, used.to_toml()).map_err(io_err(&cfg_path))?;
    write_records(&result.records, &out.join("diagnostics.csv"))?;
    if plots {
        crate::plot::write_plots(&result.records, &out.join("plots"))?;
    }
    Ok(result)
}

/// Summary of one sweep run.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub final_rel_entropy: f64,
    pub decay_rate: Option<f64>,
    pub r_squared: Option<f64>,
    pub max_drift: f64,
    pub observed_drift: f64,
    pub min_value: f64,
}

pub const SWEEP_HEADER: [&str; 8] = [
    "parameter",
    "value",
    "final_rel_entropy",
    "decay_rate",
    "r_squared",
    "max_drift",
    "observed_drift",
    "min_value",
];

/// One run per value, each written under out/run_<k>, plus sweep.csv.
/// Decay rates are fitted to the relative entropy; `max_drift` is the
/// uncorrected one-step moment defect from the initial state and
/// `observed_drift` the largest recorded drift.
pub fn sweep(config: &RunConfig, parameter: &str, values: &[f64], out: &Path, plots: bool) -> Result<Vec<SweepRow>, CliError> {
    let configs = values
        .iter()
        .map(|v| config.with_parameter(parameter, *v))
        .collect::<Result<Vec<_>, _>>()?;
    for c in &configs {
        c.resolve()?;
    }
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let mut rows = Vec::with_capacity(values.len());
    for (k, (c, v)) in configs.iter().zip(values).enumerate() {
        let result = simulate(c, &out.join(format!("run_{k}")), plots)?;
        let fit = result.decay_fit(DecayField::RelEntropy).ok();
        rows.push(SweepRow {
            value: *v,
            final_rel_entropy: result.final_rel_entropy(),
            decay_rate: fit.map(|f| f.rate),
            r_squared: fit.map(|f| f.r_squared),
            max_drift: result.step_defect,
            observed_drift: result.max_drift(),
            min_value: result.min_value,
        });
    }
    let path = out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(SWEEP_HEADER)?;
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:e}"));
    for r in &rows {
        w.write_record([
            parameter.to_string(),
            format!("{:e}", r.value),
            format!("{:e}", r.final_rel_entropy),
            opt(r.decay_rate),
            opt(r.r_squared),
            format!("{:e}", r.max_drift),
            format!("{:e}", r.observed_drift),
            format!("{:e}", r.min_value),
        ])?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(rows)
}
