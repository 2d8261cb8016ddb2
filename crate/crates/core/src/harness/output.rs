use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::ExperimentConfig;
use super::experiment::{BanditReport, SimilarityEstimate};
use super::sweep::SweepTable;
use super::theory::TheoryReport;
use crate::bandit::write_round_logs;
use crate::error::{Error, Result};

pub const TOOL_NAME: &str = "mtbandit";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

/// Record written next to every run's outputs. Passing it back as
/// `--config` reproduces the run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub seeds: &'a [u64],
    pub config: &'a ExperimentConfig,
}

impl<'a> Manifest<'a> {
    pub fn new(command: &'a str, config: &'a ExperimentConfig) -> Self {
        Self {
            tool: TOOL_NAME,
            version: env!("CARGO_PKG_VERSION"),
            command,
            seeds: &config.seeds,
            config,
        }
    }
}

/// Output files held in memory until every computation has succeeded.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OutputSet {
    pub files: Vec<(String, Vec<u8>)>,
}

impl OutputSet {
    pub fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    pub fn add_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.add(name, bytes);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }

    /// Creates `dir` if needed and writes every file. Each file goes to a
    /// temporary name first and is renamed into place.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut staged = Vec::with_capacity(self.files.len());
        for (name, bytes) in &self.files {
            let tmp = dir.join(format!(".{name}.partial"));
            if let Err(e) = std::fs::write(&tmp, bytes) {
                for (t, _) in &staged {
                    let _ = std::fs::remove_file(t);
                }
                return Err(Error::io(&tmp, e));
            }
            staged.push((tmp, dir.join(name)));
        }
        let mut written = Vec::with_capacity(staged.len());
        for (tmp, path) in staged {
            std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        Ok(written)
    }
}

fn csv_bytes<T: Serialize>(rows: impl IntoIterator<Item = T>, header: bool) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(header).from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::io("<csv buffer>", e.into_error()))
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    method: &'a str,
    time: usize,
    mean_cumulative_regret: f64,
}

#[derive(Serialize)]
struct JsonSeed<'a> {
    seed: u64,
    final_regret: f64,
    similarity: Vec<Vec<f64>>,
    curve: &'a [f64],
}

#[derive(Serialize)]
struct JsonMethod<'a> {
    method: &'a str,
    mean_final_regret: f64,
    mean_curve: &'a [f64],
    seeds: Vec<JsonSeed<'a>>,
}

fn matrix_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// CSV: one long-form file per method and seed plus `summary.csv`.
/// JSON: a single `regret.json` with curves and similarity matrices.
pub fn bandit_outputs(report: &BanditReport, format: Format) -> Result<OutputSet> {
    let mut out = OutputSet::default();
    match format {
        Format::Csv => {
            for m in &report.methods {
                for r in &m.runs {
                    let mut bytes = Vec::new();
                    write_round_logs(&mut bytes, &r.logs)?;
                    out.add(format!("regret_{}_seed{}.csv", m.method.name(), r.seed), bytes);
                }
            }
            let rows = report.methods.iter().flat_map(|m| {
                m.mean_curve.iter().enumerate().map(|(t, &v)| SummaryRow {
                    method: m.method.name(),
                    time: t,
                    mean_cumulative_regret: v,
                })
            });
            out.add("summary.csv", csv_bytes(rows, true)?);
        }
        Format::Json => {
            let methods: Vec<JsonMethod> = report
                .methods
                .iter()
                .map(|m| JsonMethod {
                    method: m.method.name(),
                    mean_final_regret: m.mean_final_regret(),
                    mean_curve: &m.mean_curve,
                    seeds: m
                        .runs
                        .iter()
                        .map(|r| JsonSeed {
                            seed: r.seed,
                            final_regret: r.final_regret(),
                            similarity: matrix_rows(r.similarity.entries()),
                            curve: &r.curve,
                        })
                        .collect(),
                })
                .collect();
            out.add_json("regret.json", &methods)?;
        }
    }
    Ok(out)
}

pub fn sweep_outputs(table: &SweepTable, format: Format) -> Result<OutputSet> {
    let mut out = OutputSet::default();
    match format {
        Format::Csv => out.add("sweep.csv", csv_bytes(&table.rows, true)?),
        Format::Json => out.add_json("sweep.json", &table.rows)?,
    }
    Ok(out)
}

#[derive(Serialize)]
struct MonotonicityRow {
    set: usize,
    mu: f64,
    log_g: f64,
}

/// JSON: `theory.json`. CSV: `rank_bound.csv` and `monotonicity.csv`.
pub fn theory_outputs(report: &TheoryReport, format: Format) -> Result<OutputSet> {
    let mut out = OutputSet::default();
    match format {
        Format::Json => out.add_json("theory.json", report)?,
        Format::Csv => {
            out.add("rank_bound.csv", csv_bytes(&report.rank_bound, true)?);
            let rows = report.monotonicity.iter().enumerate().flat_map(|(set, m)| {
                m.mu.iter()
                    .zip(&m.log_g)
                    .map(move |(&mu, &log_g)| MonotonicityRow { set, mu, log_g })
            });
            out.add("monotonicity.csv", csv_bytes(rows, true)?);
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct JsonSimilarity {
    seed: u64,
    method: &'static str,
    matrix: Vec<Vec<f64>>,
}

/// CSV: headerless `similarity_<method>_seed<k>.csv`, readable by the
/// `file` similarity method. JSON: `similarity.json`.
pub fn similarity_outputs(estimates: &[SimilarityEstimate], format: Format) -> Result<OutputSet> {
    let mut out = OutputSet::default();
    match format {
        Format::Csv => {
            for e in estimates {
                let mut bytes = Vec::new();
                e.matrix.write_csv(&mut bytes)?;
                out.add(format!("similarity_{}_seed{}.csv", e.method.name(), e.seed), bytes);
            }
        }
        Format::Json => {
            let rows: Vec<JsonSimilarity> = estimates
                .iter()
                .map(|e| JsonSimilarity {
                    seed: e.seed,
                    method: e.method.name(),
                    matrix: matrix_rows(e.matrix.entries()),
                })
                .collect();
            out.add_json("similarity.json", &rows)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_to_creates_all_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut set = OutputSet::default();
        set.add("a.csv", b"x\n".to_vec());
        set.add_json("b.json", &[1, 2]).unwrap();
        let target = dir.path().join("nested");
        let paths = set.write_to(&target).unwrap();
        assert_eq!(paths.len(), 2);
        assert_eq!(std::fs::read(target.join("a.csv")).unwrap(), b"x\n");
        assert_eq!(std::fs::read_dir(&target).unwrap().count(), 2);
    }

    #[test]
    fn manifest_has_no_timestamps_and_reloads() {
        let cfg = ExperimentConfig {
            seeds: vec![5],
            ..Default::default()
        };
        let json = serde_json::to_string(&Manifest::new("bandit", &cfg)).unwrap();
        assert!(json.contains("\"tool\":\"mtbandit\""));
        assert_eq!(ExperimentConfig::from_json(&json).unwrap(), cfg);
    }
}
