//! Run-directory persistence: task artifacts, aggregate tables, and the
//! manifest.
//!
//! Everything written here is deterministic for a fixed configuration except
//! the round logs, whose wall times vary; those files are marked volatile in
//! the manifest and carry no checksum. Checksums are FNV-1a 64.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cohortweights::HospitalWeights;
use crate::error::{Error, Result};
use crate::factual::FactualModel;
use crate::federation::RoundLog;
use crate::numerics::MlpParams;
use crate::propensity::PatientWeights;

use super::pipeline::{aggregate_repeats, AggregateReport, RepeatReport, TaskReport, METRIC_NAMES};
use super::ExperimentConfig;

/// Externally supplied plug-in predictions keyed by (client_id, row).
pub type ExternalPlugin = BTreeMap<(usize, usize), (f64, f64, f64)>;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Shortest round-trip decimal representation, used by every CSV writer so
/// identical f64 values always serialize to identical bytes.
pub fn format_float(v: f64) -> String {
    format!("{v}")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSeed {
    pub repeat: usize,
    pub rotation: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    /// FNV-1a 64 in hex; absent for volatile files (round logs with wall
    /// times).
    pub fnv1a64: Option<String>,
    pub volatile: bool,
}

/// Everything needed to re-run bit-identically: the resolved configuration,
/// the code version, the derived per-task seeds, and the file inventory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub method: String,
    pub base_seed: u64,
    pub jobs: usize,
    pub rotations: usize,
    pub config_toml: String,
    pub task_seeds: Vec<TaskSeed>,
    pub files: Vec<FileEntry>,
}

fn task_dir(cfg: &ExperimentConfig, repeat: usize, rotation: usize) -> PathBuf {
    cfg.out_dir
        .join("tasks")
        .join(format!("r{repeat:02}_f{rotation:02}"))
}

fn write_jsonl(path: &Path, logs: &[RoundLog]) -> Result<()> {
    let mut out = String::new();
    for log in logs {
        out.push_str(&serde_json::to_string(log)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn write_task_artifacts(
    cfg: &ExperimentConfig,
    repeat: usize,
    rotation: usize,
    report: &TaskReport,
    thetas: &[(String, &MlpParams)],
    h: &[f64],
    model: &FactualModel,
    patient: &[PatientWeights],
    hospital: Option<&HospitalWeights>,
    ite_by_client: &[(usize, Vec<usize>, Vec<f64>)],
    propensity_logs: &[RoundLog],
    factual_logs: &[RoundLog],
) -> Result<()> {
    let dir = task_dir(cfg, repeat, rotation);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(report)?)?;

    if cfg.persist.models {
        for (name, params) in thetas {
            fs::write(dir.join(format!("{name}.json")), serde_json::to_string(params)?)?;
        }
        fs::write(dir.join("phi.json"), serde_json::to_string(model)?)?;
        // the strategy scalar is client-private: one file per client
        let h_dir = dir.join("h_c");
        fs::create_dir_all(&h_dir)?;
        for (pw, &h_c) in patient.iter().zip(h) {
            let state = serde_json::json!({ "client_id": pw.client_id, "h_c": h_c });
            fs::write(
                h_dir.join(format!("client_{:02}.json", pw.client_id)),
                serde_json::to_string(&state)?,
            )?;
        }
    }

    if cfg.persist.weights {
        let mut out = String::from("client_id,row,w\n");
        for pw in patient {
            for (row, w) in pw.w.iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", pw.client_id, row, format_float(*w)));
            }
        }
        fs::write(dir.join("patient_weights.csv"), out)?;
        if let Some(hw) = hospital {
            let mut out = String::from("client_id,w_c\n");
            for (cid, w) in hw.client_ids.iter().zip(&hw.w) {
                out.push_str(&format!("{cid},{}\n", format_float(*w)));
            }
            fs::write(dir.join("hospital_weights.csv"), out)?;
        }
    }

    if cfg.persist.predictions {
        let mut out = String::from("client_id,row,e_hat\n");
        for (cid, rows, e_hat) in ite_by_client {
            for (row, e) in rows.iter().zip(e_hat) {
                out.push_str(&format!("{cid},{row},{}\n", format_float(*e)));
            }
        }
        fs::write(dir.join("ite_estimates.csv"), out)?;
    }

    if cfg.persist.round_logs {
        write_jsonl(&dir.join("rounds_propensity.jsonl"), propensity_logs)?;
        write_jsonl(&dir.join("rounds_factual.jsonl"), factual_logs)?;
    }
    Ok(())
}

pub(crate) fn metrics_csv(aggregate: &AggregateReport) -> String {
    let mut header = String::from("method,n_repeats,rotations");
    for name in METRIC_NAMES {
        header.push_str(&format!(",{name}_mean,{name}_std"));
    }
    let mut row = format!(
        "{},{},{}",
        aggregate.method, aggregate.n_repeats, aggregate.rotations
    );
    for name in METRIC_NAMES {
        match aggregate.stats.get(name) {
            Some(s) => {
                row.push_str(&format!(",{},{}", format_float(s.mean), format_float(s.std)));
            }
            None => row.push_str(",,"),
        }
    }
    format!("{header}\n{row}\n")
}

fn walk_relative(root: &Path) -> Result<Vec<String>> {
    fn visit(dir: &Path, root: &Path, acc: &mut Vec<String>) -> Result<()> {
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            let path = entry.path();
            if path.is_dir() {
                visit(&path, root, acc)?;
            } else {
                let rel = path
                    .strip_prefix(root)
                    .map_err(|e| Error::Contract(format!("path outside run dir: {e}")))?;
                acc.push(rel.to_string_lossy().replace('\\', "/"));
            }
        }
        Ok(())
    }
    let mut acc = Vec::new();
    visit(root, root, &mut acc)?;
    acc.sort();
    Ok(acc)
}

fn is_volatile(path: &str) -> bool {
    path.rsplit('/')
        .next()
        .is_some_and(|name| name.starts_with("rounds_"))
}

pub(crate) fn write_run_outputs(
    cfg: &ExperimentConfig,
    repeats: &[RepeatReport],
    aggregate: &AggregateReport,
    reports: &[TaskReport],
) -> Result<()> {
    let out = &cfg.out_dir;
    fs::create_dir_all(out.join("repeats"))?;
    let config_toml = cfg.to_toml_string()?;
    fs::write(out.join("config.toml"), &config_toml)?;
    for rep in repeats {
        fs::write(
            out.join("repeats").join(format!("repeat_{:02}.json", rep.repeat)),
            serde_json::to_string_pretty(rep)?,
        )?;
    }
    fs::write(out.join("metrics.csv"), metrics_csv(aggregate))?;

    // manifest last: inventory everything but itself
    let mut files = Vec::new();
    for rel in walk_relative(out)? {
        if rel == "manifest.json" {
            continue;
        }
        let bytes = fs::read(out.join(&rel))?;
        let volatile = is_volatile(&rel);
        files.push(FileEntry {
            path: rel,
            bytes: bytes.len() as u64,
            fnv1a64: (!volatile).then(|| format!("{:016x}", fnv1a64(&bytes))),
            volatile,
        });
    }
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        method: cfg.method.name().to_string(),
        base_seed: cfg.seed,
        jobs: cfg.jobs,
        rotations: cfg.protocol.rotations(),
        config_toml,
        task_seeds: reports
            .iter()
            .map(|t| TaskSeed {
                repeat: t.repeat,
                rotation: t.rotation,
                seed: t.seed,
            })
            .collect(),
        files,
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(run_dir: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(run_dir.join("manifest.json"))?;
    Ok(serde_json::from_str(&text)?)
}

/// Recomputes the aggregate table from the per-repeat files and rewrites
/// `metrics.csv`. Returns the recomputed aggregate.
pub fn report(run_dir: &Path) -> Result<AggregateReport> {
    let manifest = read_manifest(run_dir)?;
    let mut repeats = Vec::new();
    let repeat_dir = run_dir.join("repeats");
    let mut names: Vec<PathBuf> = fs::read_dir(&repeat_dir)?
        .map(|e| Ok(e?.path()))
        .collect::<Result<_>>()?;
    names.sort();
    for path in names {
        let text = fs::read_to_string(&path)?;
        repeats.push(serde_json::from_str::<RepeatReport>(&text)?);
    }
    let aggregate = aggregate_repeats(&manifest.method, &repeats, manifest.rotations);
    fs::write(run_dir.join("metrics.csv"), metrics_csv(&aggregate))?;
    Ok(aggregate)
}

/// Side-by-side covariance table over completed runs, one row per method.
pub fn diagnose(run_dirs: &[PathBuf], out_path: Option<&Path>) -> Result<String> {
    let mut table = String::from(
        "method,cov_local_mean,cov_local_std,cov_global_mean,cov_global_std,if_pehe_mean,if_pehe_std\n",
    );
    for dir in run_dirs {
        let agg = report(dir)?;
        let cell = |name: &str| -> String {
            agg.stats
                .get(name)
                .map(|s| format!("{},{}", format_float(s.mean), format_float(s.std)))
                .unwrap_or_else(|| ",".to_string())
        };
        table.push_str(&format!(
            "{},{},{},{}\n",
            agg.method,
            cell("cov_local"),
            cell("cov_global"),
            cell("if_pehe")
        ));
    }
    if let Some(path) = out_path {
        fs::write(path, &table)?;
    }
    Ok(table)
}

/// Loads externally computed plug-in predictions
/// (`client_id,row,mu0,mu1,pi`).
pub fn load_plugin_csv(path: &Path) -> Result<ExternalPlugin> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Ingest {
        row: 1,
        column: "-".into(),
        reason: "empty plugin file".into(),
    })?;
    if header.trim() != "client_id,row,mu0,mu1,pi" {
        return Err(Error::Ingest {
            row: 1,
            column: "-".into(),
            reason: format!("expected header client_id,row,mu0,mu1,pi, found {header:?}"),
        });
    }
    let mut map = ExternalPlugin::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row = idx + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(Error::Ingest {
                row,
                column: "-".into(),
                reason: format!("expected 5 fields, found {}", fields.len()),
            });
        }
        let parse_u = |s: &str, col: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Ingest {
                row,
                column: col.into(),
                reason: format!("not an unsigned integer: {s:?}"),
            })
        };
        let parse_f = |s: &str, col: &str| -> Result<f64> {
            let v: f64 = s.parse().map_err(|_| Error::Ingest {
                row,
                column: col.into(),
                reason: format!("not a number: {s:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Ingest {
                    row,
                    column: col.into(),
                    reason: "non-finite".into(),
                });
            }
            Ok(v)
        };
        map.insert(
            (parse_u(fields[0], "client_id")?, parse_u(fields[1], "row")?),
            (
                parse_f(fields[2], "mu0")?,
                parse_f(fields[3], "mu1")?,
                parse_f(fields[4], "pi")?,
            ),
        );
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_vectors() {
        // standard FNV-1a 64 test vectors
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn volatile_detection() {
        assert!(is_volatile("tasks/r00_f00/rounds_factual.jsonl"));
        assert!(!is_volatile("tasks/r00_f00/metrics.json"));
        assert!(!is_volatile("metrics.csv"));
    }
}
