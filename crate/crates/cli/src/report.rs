//! Cross-run comparison table.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::commands::{EFFECTIVE_CONFIG, METRICS, REPORT, RUN_INFO};
use crate::Failure;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub run: String,
    pub mode: String,
    /// Fingerprint of the data: distribution, seed and reference batch size.
    pub data: String,
    pub final_distortion: f64,
    pub final_consensus_gap: f64,
    /// Least-squares slope of `ln grad_norm_star` against `ln t` over the
    /// second half of the records.
    pub grad_norm_slope: f64,
    pub wall_time_s: f64,
}

fn read_json(dir: &Path, name: &str) -> Result<Value, Failure> {
    let path = dir.join(name);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Failure::runtime(format!("run {}: missing or unreadable {name}: {e}", dir.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::runtime(format!("run {}: corrupt {name}: {e}", dir.display())))
}

fn number(v: &Value, pointer: &str, dir: &Path, name: &str) -> Result<f64, Failure> {
    match v.pointer(pointer) {
        Some(Value::Number(n)) => Ok(n.as_f64().unwrap_or(f64::NAN)),
        // non-finite floats are written as null
        Some(Value::Null) => Ok(f64::NAN),
        _ => Err(Failure::runtime(format!("run {}: {name} lacks {pointer}", dir.display()))),
    }
}

fn grad_norm_slope(dir: &Path) -> Result<f64, Failure> {
    let path = dir.join(METRICS);
    let corrupt = |e: &dyn std::fmt::Display| Failure::runtime(format!("run {}: corrupt {METRICS}: {e}", dir.display()));
    let mut rdr = csv::Reader::from_path(&path)
        .map_err(|e| Failure::runtime(format!("run {}: missing or unreadable {METRICS}: {e}", dir.display())))?;
    let headers = rdr.headers().map_err(|e| corrupt(&e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| corrupt(&format!("no column {name}")));
    let (ct, cg) = (col("t")?, col("grad_norm_star")?);
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| corrupt(&e))?;
        let t: f64 = rec[ct].parse().map_err(|e| corrupt(&e))?;
        let g: f64 = rec[cg].parse().map_err(|e| corrupt(&e))?;
        rows.push((t, g));
    }
    let half = &rows[rows.len() / 2..];
    let pts: Vec<(f64, f64)> =
        half.iter().filter(|(t, g)| *t >= 1.0 && *g > 0.0 && g.is_finite()).map(|(t, g)| (t.ln(), g.ln())).collect();
    Ok(ls_slope(&pts))
}

fn ls_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn data_fingerprint(cfg: &Value, dir: &Path) -> Result<String, Failure> {
    let run = cfg.get("run").ok_or_else(|| Failure::runtime(format!("run {}: {EFFECTIVE_CONFIG} lacks `run`", dir.display())))?;
    let key = serde_json::json!([run.get("distribution"), run.get("seed"), run.get("n_ref")]);
    let digest = Sha256::digest(key.to_string().as_bytes());
    Ok(format!("{digest:x}")[..16].to_owned())
}

pub fn report_row(dir: &Path) -> Result<ReportRow, Failure> {
    let missing: Vec<&str> =
        [EFFECTIVE_CONFIG, METRICS, REPORT, RUN_INFO].into_iter().filter(|f| !dir.join(f).is_file()).collect();
    if !missing.is_empty() {
        return Err(Failure::runtime(format!("run {}: missing {}", dir.display(), missing.join(", "))));
    }
    let cfg = read_json(dir, EFFECTIVE_CONFIG)?;
    let report = read_json(dir, REPORT)?;
    let info = read_json(dir, RUN_INFO)?;
    Ok(ReportRow {
        run: dir.display().to_string(),
        mode: report.get("mode").and_then(Value::as_str).unwrap_or("unknown").to_owned(),
        data: data_fingerprint(&cfg, dir)?,
        final_distortion: number(&report, "/convergence/final_distortion", dir, REPORT)?,
        final_consensus_gap: number(&report, "/convergence/final_consensus_gap", dir, REPORT)?,
        grad_norm_slope: grad_norm_slope(dir)?,
        wall_time_s: number(&info, "/wall_time_s", dir, RUN_INFO)?,
    })
}

/// One row per run directory, as CSV.
pub fn cmd_report<W: Write>(dirs: &[PathBuf], out: W) -> Result<Vec<ReportRow>, Failure> {
    if dirs.is_empty() {
        return Err(Failure::config("report needs at least one run directory"));
    }
    let rows = dirs.iter().map(|d| report_row(d)).collect::<Result<Vec<_>, _>>()?;
    let mut w = csv::Writer::from_writer(out);
    for r in &rows {
        w.serialize(r).map_err(|e| Failure::runtime(e.to_string()))?;
    }
    w.flush()?;
    Ok(rows)
}
