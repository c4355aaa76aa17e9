//! Experiment configuration files.

use std::path::{Path, PathBuf};

use dalvq::engine::RunConfig;
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Dalvq,
    ClvqBaseline,
    LloydBaseline,
    /// The distributed iteration with every processor idle.
    AgreementOnly,
    ValidateOnly,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Dalvq => "dalvq",
            Mode::ClvqBaseline => "clvq-baseline",
            Mode::LloydBaseline => "lloyd-baseline",
            Mode::AgreementOnly => "agreement-only",
            Mode::ValidateOnly => "validate-only",
        }
    }

    /// Whether the mode simulates a communication schedule.
    pub fn uses_schedule(self) -> bool {
        matches!(self, Mode::Dalvq | Mode::AgreementOnly | Mode::ValidateOnly)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Diagnostics {
    /// Write the simulated schedule as `schedule-trace.jsonl`.
    #[serde(default)]
    pub audit_schedule: bool,
}

/// A run configuration plus where and how to run it. Sample replay is set
/// through `run.sampling`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub mode: Mode,
    /// Output directory; `--out` overrides it.
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub diagnostics: Diagnostics,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn check(&self) -> Result<(), Failure> {
        self.run.check()?;
        if self.mode == Mode::ClvqBaseline && self.run.processors != 1 {
            return Err(Failure::config(format!(
                "clvq-baseline runs a single processor, config has processors = {}",
                self.run.processors
            )));
        }
        Ok(())
    }

    /// Pretty JSON with every default written out.
    pub fn emit(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

/// Strict parse: unknown keys and schema violations are reported with their
/// key path, then semantic checks run.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, Failure> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let at = if path == "." { String::new() } else { format!(" at `{path}`") };
        Failure::config(format!("invalid config{at}: {}", e.inner()))
    })?;
    cfg.check()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg = parse_config_str(&text).map_err(|e| match e {
        Failure::Config(msg) => Failure::Config(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    // trace paths are relative to the config file
    if let (Some(trace), Some(dir)) = (cfg.run.schedule.trace.as_mut(), path.parent()) {
        if trace.is_relative() {
            *trace = dir.join(&*trace);
        }
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "run": {
            "processors": 2, "kappa": 3, "dim": 2, "horizon": 100,
            "distribution": {"kind": "uniform-box", "lo": [0, 0], "hi": [1, 1]},
            "schedule": {"topology": "ring"},
            "step": {"mode": "local-clock", "c": 0.5}
        }
    }"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config_str(MINIMAL).unwrap();
        assert_eq!(cfg.mode, Mode::Dalvq);
        assert_eq!(cfg.run.cadence, 10);
        assert_eq!(cfg.run.n_ref, 1000);
        assert_eq!(cfg.run.step.warmup, 1);
        let emitted = cfg.emit();
        assert!(emitted.contains("\"cadence\": 10"));
        assert!(emitted.contains("\"phi_tail\": 2000"));
        assert_eq!(parse_config_str(&emitted).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let text = MINIMAL.replacen("\"run\"", "\"foo\": 1, \"run\"", 1);
        let err = parse_config_str(&text).unwrap_err().to_string();
        assert!(err.contains("foo"), "{err}");
        let nested = MINIMAL.replace("\"topology\": \"ring\"", "\"topology\": \"ring\", \"foo\": 2");
        let err = parse_config_str(&nested).unwrap_err().to_string();
        assert!(err.contains("foo") && err.contains("run.schedule"), "{err}");
    }

    #[test]
    fn inverted_step_constants_cite_assumption_8() {
        let text = MINIMAL.replace("\"c\": 0.5", "\"c\": 0.5, \"k1\": 3.0, \"k2\": 2.0");
        let err = parse_config_str(&text).unwrap_err();
        assert!(matches!(err, Failure::Config(_)));
        assert!(err.to_string().contains("Assumption 8"), "{err}");
    }

    #[test]
    fn impossible_alpha_is_rejected() {
        let text = MINIMAL.replace(
            "\"topology\": \"ring\"",
            "\"topology\": \"complete\", \"declared\": {\"alpha\": 0.9, \"b1\": 1}",
        );
        let err = parse_config_str(&text).unwrap_err().to_string();
        assert!(err.contains("alpha"), "{err}");
    }
}
