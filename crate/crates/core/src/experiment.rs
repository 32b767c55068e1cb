//! One full run over a generated stream, and the files it leaves behind.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::lw2g::DecisionKind;
use crate::metrics::{ffm, pra, AccuracyMatrix};
use crate::model::Encoder;
use crate::snapshot::Snapshot;
use crate::taskstream::generate;
use crate::trace::{to_jsonl, TraceRow};
use crate::trainer::{Learner, Mode, TaskReport};
use crate::Scalar;

pub const REPORT_SCHEMA: u32 = 1;

pub struct RunOutput<T> {
    pub config: ExperimentConfig,
    pub learner: Learner<T>,
    /// Class-incremental accuracy with key retrieval.
    pub retrieval: AccuracyMatrix,
    /// Same mask, but each task evaluated with the set that trained it.
    pub oracle: AccuracyMatrix,
    pub reports: Vec<TaskReport<T>>,
}

/// Trains on every task of the configured stream, evaluating all seen tasks
/// after each one.
pub fn run<T: Scalar>(cfg: &ExperimentConfig) -> Result<RunOutput<T>> {
    cfg.validate()?;
    let tasks = generate::<T>(&cfg.stream)?;
    let encoder = Encoder::new(&cfg.encoder)?;
    let mut learner = Learner::new(cfg.train.clone(), encoder)?;
    let n = tasks.len();
    let mut retrieval = AccuracyMatrix::new(n);
    let mut oracle = AccuracyMatrix::new(n);
    let mut reports = Vec::with_capacity(n);
    for (t, data) in tasks.iter().enumerate() {
        reports.push(learner.train_task(data)?);
        learner.evaluate_into(&tasks, t, &mut retrieval, &mut oracle)?;
    }
    Ok(RunOutput {
        config: cfg.clone(),
        learner,
        retrieval,
        oracle,
        reports,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: u32,
    pub mode: Mode,
    pub seed: u64,
    pub n_tasks: usize,
    pub faa: f64,
    pub ffm: Option<f64>,
    pub pra: f64,
    pub ssp: usize,
    pub per_task: Vec<f64>,
    pub oracle_faa: f64,
    pub oracle_per_task: Vec<f64>,
    pub decisions: Vec<DecisionKind>,
    pub assignments: BTreeMap<usize, Vec<u32>>,
    pub backbone_sha256: String,
}

impl<T: Scalar> RunOutput<T> {
    pub fn report(&self) -> Result<Report> {
        let n = self.retrieval.n_tasks();
        let per_task = self.retrieval.final_column()?;
        let oracle_per_task = self.oracle.final_column()?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Ok(Report {
            schema: REPORT_SCHEMA,
            mode: self.config.train.mode,
            seed: self.config.train.seed,
            n_tasks: n,
            faa: mean(&per_task),
            ffm: if n >= 2 {
                Some(ffm(&self.retrieval)?)
            } else {
                None
            },
            pra: pra(&self.retrieval)?,
            ssp: self.learner.pool.len(),
            per_task,
            oracle_faa: mean(&oracle_per_task),
            oracle_per_task,
            decisions: self.reports.iter().map(|r| r.decision).collect(),
            assignments: self.learner.pool.registry().assignments(),
            backbone_sha256: self.learner.encoder.backbone.fingerprint(),
        })
    }

    pub fn trace(&self) -> Vec<TraceRow> {
        self.reports.iter().map(TraceRow::from_report).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: u32,
    pub config_sha256: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub output_dir: String,
    /// File name → SHA-256 of its contents.
    pub files: BTreeMap<String, String>,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Writes `config.toml`, `report.json`, `metrics.csv`, `trace.jsonl`,
/// `snapshot.bin` and `manifest.json` into `dir`. `config_sha256` is the
/// hash of the config file the run came from; when absent, the hash of the
/// serialized config is used.
pub fn write_run<T: Scalar>(
    dir: &Path,
    out: &RunOutput<T>,
    config_sha256: Option<&str>,
    started_unix: u64,
) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let config_toml = out.config.to_toml()?;
    let mut report = serde_json::to_string_pretty(&out.report()?)?;
    report.push('\n');
    let mut csv = String::from("# retrieval\n");
    csv.push_str(&out.retrieval.to_csv());
    csv.push_str("# oracle\n");
    csv.push_str(&out.oracle.to_csv());
    let files: Vec<(&str, Vec<u8>)> = vec![
        ("config.toml", config_toml.clone().into_bytes()),
        ("report.json", report.into_bytes()),
        ("metrics.csv", csv.into_bytes()),
        ("trace.jsonl", to_jsonl(&out.trace())?.into_bytes()),
        (
            "snapshot.bin",
            Snapshot::capture(&out.learner, &out.retrieval, &out.oracle).to_bytes(),
        ),
    ];
    let mut hashes = BTreeMap::new();
    for (name, bytes) in &files {
        std::fs::write(dir.join(name), bytes)?;
        hashes.insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
    }
    let manifest = Manifest {
        schema: REPORT_SCHEMA,
        config_sha256: config_sha256
            .map(str::to_owned)
            .unwrap_or_else(|| hex::encode(Sha256::digest(config_toml.as_bytes()))),
        started_unix,
        finished_unix: unix_now(),
        output_dir: dir.display().to_string(),
        files: hashes,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(manifest)
}

/// Current time for [`write_run`]'s `started_unix`.
pub fn started_now() -> u64 {
    unix_now()
}

/// Differences `b − a` of the headline numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDiff {
    pub d_faa: f64,
    pub d_ffm: Option<f64>,
    pub d_pra: f64,
    pub d_ssp: i64,
}

pub fn compare(a: &Report, b: &Report) -> ReportDiff {
    ReportDiff {
        d_faa: b.faa - a.faa,
        d_ffm: a.ffm.zip(b.ffm).map(|(x, y)| y - x),
        d_pra: b.pra - a.pra,
        d_ssp: b.ssp as i64 - a.ssp as i64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskstream::StreamSpec;
    use crate::trainer::TrainConfig;

    fn tiny(mode: Mode) -> ExperimentConfig {
        ExperimentConfig {
            stream: StreamSpec {
                n_tasks: 2,
                classes_per_task: 2,
                similarity_schedule: vec![0.0, 1.0],
                samples_per_class: 10,
                ..StreamSpec::default()
            },
            train: TrainConfig {
                mode,
                epochs: 1,
                rep_samples: 16,
                d_sub: 16,
                ..TrainConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn report_fields_are_consistent() {
        let out = run::<f64>(&tiny(Mode::GrowAlways)).unwrap();
        let r = out.report().unwrap();
        assert_eq!(r.schema, 1);
        assert_eq!(r.ssp, 2);
        assert_eq!(r.decisions, vec![DecisionKind::Grow, DecisionKind::Grow]);
        assert_eq!(r.per_task.len(), 2);
        assert!(r.ffm.is_some());
        assert_eq!(out.trace().len(), 2);
    }

    #[test]
    fn compare_identical_is_zero() {
        let r = run::<f64>(&tiny(Mode::Lw2g)).unwrap().report().unwrap();
        let d = compare(&r, &r);
        assert_eq!(
            (d.d_faa, d.d_ffm, d.d_pra, d.d_ssp),
            (0.0, Some(0.0), 0.0, 0)
        );
    }

    #[test]
    fn writes_every_file() {
        let dir = tempfile::tempdir().unwrap();
        let out = run::<f64>(&tiny(Mode::Lw2g)).unwrap();
        let m = write_run(dir.path(), &out, None, 0).unwrap();
        for f in [
            "config.toml",
            "report.json",
            "metrics.csv",
            "trace.jsonl",
            "snapshot.bin",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
            assert!(m.files.contains_key(f));
        }
        assert!(dir.path().join("manifest.json").exists());
        let text = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
        let back: Report = serde_json::from_str(&text).unwrap();
        assert_eq!(back, out.report().unwrap());
    }
}
