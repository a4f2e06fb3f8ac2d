//! Run records, report emission, and the binary snapshot container.
//!
//! Every reported number carries either a standard error or an exactness
//! flag. Records serialise deterministically (BTreeMap ordering, shortest
//! round-trip float formatting), so identical `(config, seed)` runs produce
//! bit-identical files.

use crate::error::Result;
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// One reported value: estimate plus either a standard error or exactness.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Reported {
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub se: Option<f64>,
    pub exact: bool,
}

impl Reported {
    pub fn exact(value: f64) -> Self {
        Reported {
            value,
            se: None,
            exact: true,
        }
    }

    pub fn with_se(value: f64, se: f64) -> Self {
        Reported {
            value,
            se: Some(se),
            exact: false,
        }
    }
}

/// Result of one named experiment.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentResult {
    pub name: String,
    pub values: BTreeMap<String, Reported>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub passed: Option<bool>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub notes: Vec<String>,
}

impl ExperimentResult {
    pub fn new(name: &str) -> Self {
        ExperimentResult {
            name: name.to_string(),
            values: BTreeMap::new(),
            passed: None,
            notes: Vec::new(),
        }
    }

    pub fn report(&mut self, key: &str, r: Reported) -> &mut Self {
        self.values.insert(key.to_string(), r);
        self
    }

    pub fn note(&mut self, s: impl Into<String>) -> &mut Self {
        self.notes.push(s.into());
        self
    }
}

/// Outcome of one acceptance criterion.
#[derive(Debug, Clone, Serialize)]
pub struct CriterionResult {
    pub id: String,
    pub description: String,
    pub passed: bool,
    /// Soft criteria produce a diagnostic bundle instead of failing the
    /// suite.
    pub soft: bool,
    pub details: String,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        let status = if self.passed {
            "PASS"
        } else if self.soft {
            "SOFT-FAIL"
        } else {
            "FAIL"
        };
        format!(
            "[{status}] {}: {} — {}",
            self.id, self.description, self.details
        )
    }
}

/// Persisted record of a run.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub generator: String,
    pub artifact_version: String,
    pub exploratory: bool,
    pub warnings: Vec<String>,
    pub experiments: Vec<ExperimentResult>,
    pub criteria: Vec<CriterionResult>,
    pub wall_clock_ms: u128,
}

impl RunRecord {
    pub fn new(config_hash: &str, seed: u64) -> Self {
        RunRecord {
            config_hash: config_hash.to_string(),
            seed,
            generator: crate::rng::GENERATOR_ID.to_string(),
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            exploratory: false,
            warnings: Vec::new(),
            experiments: Vec::new(),
            criteria: Vec::new(),
            wall_clock_ms: 0,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Markdown summary (one table of experiments, one list of criteria).
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "# Run {}\n\nseed: {} | generator: {} | version: {}{}\n\n",
            &self.config_hash[..12.min(self.config_hash.len())],
            self.seed,
            self.generator,
            self.artifact_version,
            if self.exploratory {
                " | EXPLORATORY"
            } else {
                ""
            },
        ));
        if !self.criteria.is_empty() {
            out.push_str("## Criteria\n\n");
            for c in &self.criteria {
                out.push_str(&format!("- {}\n", c.line()));
            }
            out.push('\n');
        }
        if !self.experiments.is_empty() {
            out.push_str("## Experiments\n\n| experiment | key | value | se | exact |\n|---|---|---|---|---|\n");
            for e in &self.experiments {
                for (k, v) in &e.values {
                    out.push_str(&format!(
                        "| {} | {} | {} | {} | {} |\n",
                        e.name,
                        k,
                        v.value,
                        v.se.map(|s| s.to_string()).unwrap_or_else(|| "-".into()),
                        v.exact
                    ));
                }
            }
        }
        out
    }
}

/// Write a time-series CSV: one time column plus named columns.
pub fn write_csv(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{}", header.join(","))?;
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(f, "{}", line.join(","))?;
    }
    Ok(())
}

/// Header of the binary array container.
#[derive(Debug, Clone, Serialize, serde::Deserialize, PartialEq)]
pub struct SnapshotHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub endianness: String,
    pub order: String,
}

/// Write `data` as raw little-endian f64 plus a JSON sidecar header.
pub fn write_snapshot(path_base: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(crate::error::QflowError::SizeMismatch(format!(
            "snapshot shape {shape:?} expects {expected} values, got {}",
            data.len()
        )));
    }
    let header = SnapshotHeader {
        shape: shape.to_vec(),
        dtype: "f64".into(),
        endianness: "little".into(),
        order: "C".into(),
    };
    let mut bin = std::fs::File::create(path_base.with_extension("bin"))?;
    for v in data {
        bin.write_all(&v.to_le_bytes())?;
    }
    std::fs::write(
        path_base.with_extension("json"),
        serde_json::to_string_pretty(&header)?,
    )?;
    Ok(())
}

/// Read a snapshot written by [`write_snapshot`].
pub fn read_snapshot(path_base: &Path) -> Result<(SnapshotHeader, Vec<f64>)> {
    let header: SnapshotHeader =
        serde_json::from_str(&std::fs::read_to_string(path_base.with_extension("json"))?)?;
    let bytes = std::fs::read(path_base.with_extension("bin"))?;
    let mut data = Vec::with_capacity(bytes.len() / 8);
    for chunk in bytes.chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok((header, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_roundtrip() {
        let dir = std::env::temp_dir().join("qflow-snapshot-test");
        std::fs::create_dir_all(&dir).unwrap();
        let base = dir.join("field");
        let data: Vec<f64> = (0..24).map(|i| i as f64 * 0.5 - 3.0).collect();
        write_snapshot(&base, &[4, 6], &data).unwrap();
        let (header, back) = read_snapshot(&base).unwrap();
        assert_eq!(header.shape, vec![4, 6]);
        assert_eq!(header.dtype, "f64");
        assert_eq!(header.endianness, "little");
        assert_eq!(back, data);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn record_serialises_deterministically() {
        let mut rec = RunRecord::new("abc123", 9);
        let mut e = ExperimentResult::new("demo");
        e.report("zeta", Reported::with_se(1.5, 0.1));
        e.report("alpha", Reported::exact(2.0));
        rec.experiments.push(e);
        let a = rec.to_json().unwrap();
        let b = rec.to_json().unwrap();
        assert_eq!(a, b);
        // BTreeMap ordering puts alpha before zeta.
        let ia = a.find("alpha").unwrap();
        let iz = a.find("zeta").unwrap();
        assert!(ia < iz);
    }
}
