//! Consolidated text summary over the run directories of an output root.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Result};

use crate::record::{load_all, RunRecord};

/// Renders every record below `out`, runs sorted by config hash and
/// commands by name. Errors when no run directory holds a record.
pub fn render(out: &Path, only: Option<&str>) -> Result<String> {
    let runs: Vec<_> = load_all(out)?.into_iter().filter(|(hash, _)| only.is_none_or(|h| h == hash)).collect();
    if runs.is_empty() {
        bail!("no run records under {}", out.display());
    }
    let mut text = String::new();
    for (hash, records) in &runs {
        for rec in records.values() {
            render_record(&mut text, hash, rec);
        }
    }
    let total: usize = runs.iter().map(|(_, r)| r.len()).sum();
    let passed: usize = runs.iter().flat_map(|(_, r)| r.values()).filter(|r| r.pass).count();
    writeln!(text, "{passed}/{total} commands passed across {} runs", runs.len()).unwrap();
    Ok(text)
}

fn render_record(text: &mut String, hash: &str, rec: &RunRecord) {
    let status = if rec.pass { "PASS" } else { "FAIL" };
    writeln!(text, "{hash}  {:<12} {:<20} {status}  ({}, {:.1}s)", rec.command, rec.preset, rec.version, rec.finished_unix - rec.started_unix).unwrap();
    for (name, c) in &rec.checks {
        let mark = if c.pass { "ok  " } else { "FAIL" };
        let threshold = c.threshold.map(|t| format!(" vs {t:.6e}")).unwrap_or_default();
        writeln!(text, "    {mark} {name:<22} {:.6e}{threshold}  {}", c.value, c.detail).unwrap();
    }
}

/// Writes `report.txt` and `report.dat` (run ordinal, fraction of passing
/// checks) into `out` and returns the text.
pub fn write(out: &Path, only: Option<&str>) -> Result<String> {
    let text = render(out, only)?;
    std::fs::write(out.join("report.txt"), &text)?;
    let mut dat = String::new();
    let runs = load_all(out)?;
    for (i, (_, records)) in runs.iter().enumerate() {
        let checks: Vec<bool> = records.values().flat_map(|r| r.checks.values().map(|c| c.pass)).collect();
        let frac = if checks.is_empty() { 1.0 } else { checks.iter().filter(|p| **p).count() as f64 / checks.len() as f64 };
        writeln!(dat, "{i} {frac:.17e}").unwrap();
    }
    std::fs::write(out.join("report.dat"), dat)?;
    Ok(text)
}
