//! `run`, `validate-schedule` and `phi-table`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use dalvq::agreement::compute_phi_adjoint;
use dalvq::baselines::{run_clvq, run_lloyd};
use dalvq::diagnostics::{write_metrics_csv, ConvergenceReport};
use dalvq::geometry::QuantizerVec;
use dalvq::engine::{run_on, schedule_ticks, PhiSummary, RunArtifacts, StepBounds};
use dalvq::schedule::{generate_unchecked, write_trace, ActivityLaw, CommSchedule, ScheduleSpec, Topology, ValidationReport};
use serde::{Deserialize, Serialize};

use crate::{ExperimentConfig, Failure, Mode, VERSION};

pub const EFFECTIVE_CONFIG: &str = "effective-config.json";
pub const METRICS: &str = "metrics.csv";
pub const REPORT: &str = "report.json";
pub const FINAL_QUANTIZERS: &str = "final-quantizers.json";
pub const SCHEDULE_TRACE: &str = "schedule-trace.jsonl";
pub const RUN_INFO: &str = "run-info.json";
pub const PHI_TABLE: &str = "phi-table.csv";

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub allow_invalid_schedule: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(seed) = self.seed {
            cfg.run.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = Some(out.clone());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub version: String,
    /// Assumption checks that failed on the simulated schedule.
    pub failed_assumptions: Vec<String>,
    pub validation: Option<ValidationReport>,
    pub step_bounds: Option<StepBounds>,
    pub phi: Option<PhiSummary>,
    pub convergence: Option<ConvergenceReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalQuantizers {
    pub initial: Vec<Vec<f64>>,
    /// `w^i(T)` per processor, one point per component.
    pub processors: Vec<Vec<Vec<f64>>>,
    pub w_star: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub version: String,
    pub mode: Mode,
    pub seed: u64,
    pub wall_time_s: f64,
}

/// Result of a completed `run`.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out: PathBuf,
    pub failed_assumptions: Vec<String>,
    pub wall_time_s: f64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Failure::runtime(e.to_string()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn create_out(cfg: &ExperimentConfig) -> Result<PathBuf, Failure> {
    let out = cfg.out.clone().ok_or_else(|| Failure::config("no output directory: set `out` or pass --out"))?;
    std::fs::create_dir_all(&out)
        .map_err(|e| Failure::config(format!("output directory {} is not writable: {e}", out.display())))?;
    Ok(out)
}

/// Schedule family the mode actually simulates.
pub fn schedule_spec(cfg: &ExperimentConfig) -> ScheduleSpec {
    let mut spec = cfg.run.schedule.clone();
    if cfg.mode == Mode::AgreementOnly {
        spec.activity = ActivityLaw::Idle;
    }
    spec
}

/// Checks a schedule must pass for the mode; empty when it is usable.
pub fn failed_assumptions(report: &ValidationReport, mode: Mode) -> Vec<String> {
    let descent_ok = mode == Mode::AgreementOnly || (report.activity.passed && report.merge_descent_separated.passed);
    if report.consensus_assumptions_hold() && descent_ok {
        Vec::new()
    } else {
        report.failed().into_iter().map(str::to_owned).collect()
    }
}

fn build_schedule(cfg: &ExperimentConfig, ticks: usize) -> Result<(CommSchedule, ValidationReport), Failure> {
    let schedule = generate_unchecked(&schedule_spec(cfg), cfg.run.processors, ticks)?;
    let report = dalvq::schedule::validate(&schedule);
    Ok((schedule, report))
}

fn write_schedule(path: &Path, schedule: &CommSchedule) -> Result<(), Failure> {
    let mut w = BufWriter::new(File::create(path)?);
    write_trace(schedule, &mut w)?;
    w.flush()?;
    Ok(())
}

fn write_artifacts(out: &Path, cfg: &ExperimentConfig, art: &RunArtifacts, failed: Vec<String>) -> Result<(), Failure> {
    let mut w = BufWriter::new(File::create(out.join(METRICS))?);
    write_metrics_csv(&art.metrics, &mut w)?;
    w.flush()?;
    let report = RunReport {
        mode: cfg.mode,
        version: VERSION.to_owned(),
        failed_assumptions: failed,
        validation: art.validation.clone(),
        step_bounds: Some(art.step_bounds),
        phi: art.phi,
        convergence: Some(art.report.clone()),
    };
    write_json(&out.join(REPORT), &report)?;
    let finals = FinalQuantizers {
        initial: art.initial.to_points(),
        processors: art.final_versions.iter().map(QuantizerVec::to_points).collect(),
        w_star: art.final_w_star.as_ref().map(QuantizerVec::to_points),
    };
    write_json(&out.join(FINAL_QUANTIZERS), &finals)?;
    if let Some(s) = &art.schedule {
        if cfg.diagnostics.audit_schedule || cfg.run.schedule.topology == Topology::CustomTrace {
            write_schedule(&out.join(SCHEDULE_TRACE), s)?;
        }
    }
    Ok(())
}

fn write_validation_only(out: &Path, cfg: &ExperimentConfig, schedule: &CommSchedule, validation: ValidationReport, failed: Vec<String>) -> Result<(), Failure> {
    let report = RunReport {
        mode: cfg.mode,
        version: VERSION.to_owned(),
        failed_assumptions: failed,
        validation: Some(validation),
        step_bounds: None,
        phi: None,
        convergence: None,
    };
    write_json(&out.join(REPORT), &report)?;
    if cfg.diagnostics.audit_schedule || cfg.run.schedule.topology == Topology::CustomTrace {
        write_schedule(&out.join(SCHEDULE_TRACE), schedule)?;
    }
    Ok(())
}

/// Runs the configured mode and writes its artifacts. A schedule failing the
/// assumptions stops the run with [`Failure::Validation`] unless
/// `allow_invalid_schedule` is set; the report is written either way.
pub fn cmd_run(mut cfg: ExperimentConfig, overrides: &Overrides) -> Result<RunSummary, Failure> {
    overrides.apply(&mut cfg);
    cfg.check()?;
    let out = create_out(&cfg)?;
    write_json(&out.join(EFFECTIVE_CONFIG), &cfg)?;
    let start = Instant::now();

    let outcome = match cfg.mode {
        Mode::ValidateOnly => {
            let (schedule, validation) = build_schedule(&cfg, schedule_ticks(&cfg.run))?;
            let failed = failed_assumptions(&validation, Mode::Dalvq);
            write_validation_only(&out, &cfg, &schedule, validation, failed.clone())?;
            if failed.is_empty() {
                Ok(failed)
            } else {
                Err(Failure::Validation(failed))
            }
        }
        Mode::Dalvq | Mode::AgreementOnly => {
            let (schedule, validation) = build_schedule(&cfg, schedule_ticks(&cfg.run))?;
            let failed = failed_assumptions(&validation, cfg.mode);
            if !failed.is_empty() && !overrides.allow_invalid_schedule {
                write_validation_only(&out, &cfg, &schedule, validation, failed.clone())?;
                Err(Failure::Validation(failed))
            } else {
                let mut run_cfg = cfg.run.clone();
                run_cfg.schedule = schedule_spec(&cfg);
                let art = run_on(&run_cfg, schedule)?;
                write_artifacts(&out, &cfg, &art, failed.clone())?;
                Ok(failed)
            }
        }
        Mode::ClvqBaseline => {
            let art = run_clvq(&cfg.run)?;
            write_artifacts(&out, &cfg, &art, Vec::new())?;
            Ok(Vec::new())
        }
        Mode::LloydBaseline => {
            let art = run_lloyd(&cfg.run)?;
            write_artifacts(&out, &cfg, &art, Vec::new())?;
            Ok(Vec::new())
        }
    };

    let wall_time_s = start.elapsed().as_secs_f64();
    let info = RunInfo { version: VERSION.to_owned(), mode: cfg.mode, seed: cfg.run.seed, wall_time_s };
    write_json(&out.join(RUN_INFO), &info)?;
    outcome.map(|failed_assumptions| RunSummary { out, failed_assumptions, wall_time_s })
}

/// Validates the schedule the config would simulate. Writes `report.json`
/// into the output directory when one is given, else prints it.
pub fn cmd_validate_schedule(mut cfg: ExperimentConfig, overrides: &Overrides) -> Result<ValidationReport, Failure> {
    overrides.apply(&mut cfg);
    cfg.check()?;
    let (schedule, validation) = build_schedule(&cfg, schedule_ticks(&cfg.run))?;
    let mode = if cfg.mode == Mode::AgreementOnly { Mode::AgreementOnly } else { Mode::Dalvq };
    let failed = failed_assumptions(&validation, mode);
    if cfg.out.is_some() {
        let out = create_out(&cfg)?;
        write_json(&out.join(EFFECTIVE_CONFIG), &cfg)?;
        write_validation_only(&out, &cfg, &schedule, validation.clone(), failed.clone())?;
    } else {
        let text = serde_json::to_string_pretty(&validation).map_err(|e| Failure::runtime(e.to_string()))?;
        println!("{text}");
    }
    if failed.is_empty() {
        Ok(validation)
    } else {
        Err(Failure::Validation(failed))
    }
}

/// Writes `phi^{i,j}(t, tau)` for `tau_min <= tau < t` as CSV, to
/// `phi-table.csv` in the output directory when one is given, else to stdout.
/// `t` defaults to the horizon.
pub fn cmd_phi_table(mut cfg: ExperimentConfig, overrides: &Overrides, t: Option<usize>, tau_min: i64) -> Result<usize, Failure> {
    overrides.apply(&mut cfg);
    cfg.check()?;
    let t = t.unwrap_or(cfg.run.horizon);
    if t == 0 {
        return Err(Failure::config("phi table needs t >= 1"));
    }
    let (schedule, _) = build_schedule(&cfg, t)?;
    let table = compute_phi_adjoint(&schedule, t, tau_min)?;
    let records = table.to_records();
    let sink: Box<dyn Write> = match &cfg.out {
        Some(_) => Box::new(File::create(create_out(&cfg)?.join(PHI_TABLE))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(BufWriter::new(sink));
    for r in &records {
        w.serialize(r).map_err(|e| Failure::runtime(e.to_string()))?;
    }
    w.flush()?;
    Ok(records.len())
}
