use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{DatasetConfig, EvalConfig};
use crate::emissions::{EmissionsConfig, EmissionsReport};
use crate::error::RunError;
use crate::evaluator::MetricReport;
use crate::models::ModelConfig;
use crate::trainer::TrainConfig;

/// Column order of the results file.
pub const RESULT_COLUMNS: [&str; 16] = [
    "dataset", "model", "emb", "seqlen", "params", "p10", "r10", "ndcg10", "map10", "p20", "r20", "ndcg20", "map20", "kwh", "co2kg",
    "seconds",
];

/// Everything needed to re-run one sweep point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSnapshot {
    pub dataset: DatasetConfig,
    pub dataset_sha256: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub emissions: EmissionsConfig,
    pub base_seed: u64,
    pub replicate: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config_hash: String,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub snapshot: PointSnapshot,
    pub params: usize,
    pub metrics: Option<MetricReport>,
    pub emissions: Option<EmissionsReport>,
    pub best_epoch: Option<usize>,
    pub best_val_metric: Option<f64>,
    pub version: String,
    pub started_at: String,
    pub finished_at: String,
}

impl RunRecord {
    /// The results-file row; `None` for failed runs.
    pub fn csv_row(&self) -> Option<Vec<String>> {
        let m = self.metrics.as_ref()?;
        let e = self.emissions.as_ref()?;
        let s = &self.snapshot;
        let f = |x: f64| x.to_string();
        Some(vec![
            s.dataset.name.clone(),
            s.model.family.to_string(),
            s.model.emb.to_string(),
            s.model.seqlen.to_string(),
            self.params.to_string(),
            f(m.at10.precision),
            f(m.at10.recall),
            f(m.at10.ndcg),
            f(m.at10.map),
            f(m.at20.precision),
            f(m.at20.recall),
            f(m.at20.ndcg),
            f(m.at20.map),
            f(e.energy_kwh),
            f(e.co2eq_kg),
            f(e.elapsed_seconds),
        ])
    }
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> RunError + '_ {
    move |e| RunError::io(path, e)
}

fn append_locked(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), RunError> {
    let mut file = OpenOptions::new().create(true).read(true).append(true).open(path).map_err(io(path))?;
    file.lock().map_err(io(path))?;
    let result = (|| {
        let empty = file.seek(SeekFrom::End(0)).map_err(io(path))? == 0;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        if empty {
            w.write_record(header).map_err(|e| RunError::io(path, e.into()))?;
        }
        for r in rows {
            w.write_record(r).map_err(|e| RunError::io(path, e.into()))?;
        }
        let bytes = w.into_inner().map_err(|e| RunError::io(path, e.into_error()))?;
        file.write_all(&bytes).map_err(io(path))?;
        file.flush().map_err(io(path))
    })();
    let _ = file.unlock();
    result
}

/// Append-only results table plus per-run JSON sidecars in `root`.
pub struct ResultsStore {
    root: PathBuf,
}

impl ResultsStore {
    pub fn open(root: &Path) -> Result<Self, RunError> {
        for sub in ["runs", "checkpoints", "history"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(io(&d))?;
        }
        let store = Self { root: root.to_path_buf() };
        if !store.results_path().exists() {
            append_locked(&store.results_path(), &RESULT_COLUMNS, &[])?;
        }
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn results_path(&self) -> PathBuf {
        self.root.join("results.csv")
    }

    pub fn failures_path(&self) -> PathBuf {
        self.root.join("failures.csv")
    }

    pub fn record_path(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(format!("{run_id}.json"))
    }

    pub fn checkpoint_path(&self, run_id: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{run_id}.ckpt"))
    }

    pub fn history_path(&self, run_id: &str) -> PathBuf {
        self.root.join("history").join(format!("{run_id}.csv"))
    }

    pub fn load_record(&self, run_id: &str) -> Option<RunRecord> {
        let mut text = String::new();
        File::open(self.record_path(run_id)).ok()?.read_to_string(&mut text).ok()?;
        serde_json::from_str(&text).ok()
    }

    /// Writes the sidecar, then appends the row: results for completed runs,
    /// `failures.csv` otherwise.
    pub fn append(&self, record: &RunRecord) -> Result<(), RunError> {
        let path = self.record_path(&record.run_id);
        let tmp = path.with_extension("json.tmp");
        let json = serde_json::to_string_pretty(record).expect("record serializes");
        fs::write(&tmp, json + "\n").map_err(io(&tmp))?;
        fs::rename(&tmp, &path).map_err(io(&path))?;
        match record.csv_row() {
            Some(row) => append_locked(&self.results_path(), &RESULT_COLUMNS, &[row]),
            None => {
                let s = &record.snapshot;
                let row = vec![
                    record.run_id.clone(),
                    s.dataset.name.clone(),
                    s.model.family.to_string(),
                    s.model.emb.to_string(),
                    s.model.seqlen.to_string(),
                    s.seed.to_string(),
                    record.error.clone().unwrap_or_default(),
                ];
                append_locked(
                    &self.failures_path(),
                    &["run_id", "dataset", "model", "emb", "seqlen", "seed", "error"],
                    &[row],
                )
            }
        }
    }
}

/// Reads a results file into header-keyed string rows, checking the columns.
pub fn read_results(path: &Path) -> Result<Vec<Vec<String>>, RunError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != RESULT_COLUMNS {
        return Err(RunError::Config(format!(
            "{}: expected columns {}",
            path.display(),
            RESULT_COLUMNS.join(",")
        )));
    }
    r.records()
        .map(|rec| {
            rec.map(|r| r.iter().map(str::to_string).collect())
                .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))
        })
        .collect()
}
