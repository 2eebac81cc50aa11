use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::SystemTime;

use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::dataset::{prepare_cached, PreparedDataset};
use super::results::{PointSnapshot, ResultsStore, RunRecord, RunStatus};
use crate::data::{leave_one_out_split, Phase, SplitDataset};
use crate::emissions::track;
use crate::error::{RunError, TrainError};
use crate::evaluator::evaluate;
use crate::models::{save_checkpoint, CheckpointMeta, Family, Model};
use crate::seeding;
use crate::trainer::{train, TrainConfig};

/// One cell of the `model x emb x seqlen x replicate` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RunPoint {
    pub family: Family,
    pub emb: usize,
    pub seqlen: usize,
    pub replicate: usize,
    pub seed: u64,
}

/// Depends only on the point's own coordinates, so editing one sweep axis
/// leaves every other point's seed alone.
pub fn point_seed(base: u64, family: Family, emb: usize, seqlen: usize, replicate: usize) -> u64 {
    seeding::derive_u64(
        base,
        &["point", family.name(), &emb.to_string(), &seqlen.to_string(), &replicate.to_string()],
    )
}

pub fn plan_points(config: &ExperimentConfig) -> Vec<RunPoint> {
    let mut out = Vec::new();
    for &family in &config.models {
        for &emb in &config.emb {
            for &seqlen in &config.seqlen {
                for replicate in 0..config.replicates {
                    out.push(RunPoint {
                        family,
                        emb,
                        seqlen,
                        replicate,
                        seed: point_seed(config.seed, family, emb, seqlen, replicate),
                    });
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Worker threads; 0 and 1 both mean sequential.
    pub parallel: usize,
    /// Retry points whose previous attempt failed.
    pub resume: bool,
}

#[derive(Debug, Default)]
pub struct PlanSummary {
    pub total: usize,
    pub skipped: usize,
    pub completed: usize,
    pub failed: usize,
    /// Records produced by this invocation, in plan order.
    pub records: Vec<RunRecord>,
}

fn sha_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn now() -> String {
    chrono::DateTime::<chrono::Utc>::from(SystemTime::now()).to_rfc3339()
}

fn snapshot(config: &ExperimentConfig, prepared: &PreparedDataset, point: &RunPoint) -> PointSnapshot {
    PointSnapshot {
        dataset: config.dataset.clone(),
        dataset_sha256: prepared.stats.source_sha256.clone(),
        model: config.model.model_config(point.family, point.emb, point.seqlen),
        train: config.train.clone(),
        eval: config.eval.clone(),
        emissions: config.emissions,
        base_seed: config.seed,
        replicate: point.replicate,
        seed: point.seed,
    }
}

/// `(config_hash, run_id)`: the hash covers everything but the seeds; the
/// id adds the seed.
fn identify(snap: &PointSnapshot) -> (String, String) {
    let mut unseeded = snap.clone();
    unseeded.base_seed = 0;
    unseeded.replicate = 0;
    unseeded.seed = 0;
    unseeded.dataset.path = Default::default();
    let config_hash = sha_hex(serde_json::to_string(&unseeded).expect("snapshot serializes").as_bytes());
    let run_hash = sha_hex(format!("{config_hash}/{}", snap.seed).as_bytes());
    let m = &snap.model;
    let run_id = format!("{}-d{}-L{}-r{}-{}", m.family, m.emb, m.seqlen, snap.replicate, &run_hash[..12]);
    (config_hash[..16].to_string(), run_id)
}

fn train_config(snap: &PointSnapshot) -> TrainConfig {
    TrainConfig {
        seed: snap.seed,
        m_neg_eval: snap.eval.m_neg,
        ..snap.train.clone()
    }
}

struct PointOutput {
    params: usize,
    metrics: crate::evaluator::MetricReport,
    best_epoch: usize,
    best_val: Option<f64>,
}

fn execute(
    store: &ResultsStore,
    run_id: &str,
    snap: &PointSnapshot,
    split: &SplitDataset,
    progress: &(dyn Fn(&str) + Sync),
) -> Result<PointOutput, TrainError> {
    let model = Model::new(&snap.model, split.num_items, &mut seeding::stream(snap.seed, &[seeding::INIT]))?;
    let params = model.count_params();
    let cfg = train_config(snap);
    let out = train(model, split, &cfg, &snap.emissions, |e| {
        if let Some(v) = e.val_metric {
            progress(&format!("{run_id}: epoch {} loss {:.4} val {} {:.4}", e.epoch, e.loss, cfg.metric, v));
        }
    })?;
    let metrics = evaluate(&out.model, split, Phase::Test, snap.eval.m_neg, snap.seed)?;
    let meta = CheckpointMeta {
        family: snap.model.family,
        emb: snap.model.emb,
        seqlen: snap.model.seqlen,
        seed: snap.seed,
        epoch: out.history.best_epoch,
        val_metric: out.history.best_metric.unwrap_or(f64::NAN),
    };
    save_checkpoint(&store.checkpoint_path(run_id), &out.model, &meta)?;
    let hist = store.history_path(run_id);
    out.history
        .write_csv(&hist)
        .map_err(|e| TrainError::Config(format!("{}: {e}", hist.display())))?;
    Ok(PointOutput {
        params,
        metrics,
        best_epoch: out.history.best_epoch,
        best_val: out.history.best_metric,
    })
}

fn run_point(
    store: &ResultsStore,
    config: &ExperimentConfig,
    prepared: &PreparedDataset,
    split: &SplitDataset,
    point: &RunPoint,
    progress: &(dyn Fn(&str) + Sync),
) -> Result<RunRecord, RunError> {
    let snap = snapshot(config, prepared, point);
    let (config_hash, run_id) = identify(&snap);
    progress(&format!("{run_id}: start (seed {})", point.seed));
    let started_at = now();
    let (result, emissions) = track(&snap.emissions, || {
        panic::catch_unwind(AssertUnwindSafe(|| execute(store, &run_id, &snap, split, progress)))
    });
    let result = match result {
        Ok(r) => r.map_err(|e| e.to_string()),
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into())),
    };
    let record = match result {
        Ok(out) => RunRecord {
            run_id: run_id.clone(),
            config_hash,
            status: RunStatus::Completed,
            error: None,
            params: out.params,
            metrics: Some(out.metrics),
            emissions: Some(emissions),
            best_epoch: Some(out.best_epoch),
            best_val_metric: out.best_val,
            snapshot: snap,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_at,
            finished_at: now(),
        },
        Err(msg) => {
            progress(&format!("{run_id}: failed: {msg}"));
            RunRecord {
                run_id: run_id.clone(),
                config_hash,
                status: RunStatus::Failed,
                error: Some(msg),
                params: Model::new(&snap.model, split.num_items, &mut seeding::stream(0, &[]))
                    .map(|m| m.count_params())
                    .unwrap_or(0),
                metrics: None,
                emissions: Some(emissions),
                best_epoch: None,
                best_val_metric: None,
                snapshot: snap,
                version: env!("CARGO_PKG_VERSION").to_string(),
                started_at,
                finished_at: now(),
            }
        }
    };
    store.append(&record)?;
    if let Some(m) = &record.metrics {
        progress(&format!("{run_id}: test ndcg@10 {:.4} recall@10 {:.4}", m.at10.ndcg, m.at10.recall));
    }
    Ok(record)
}

/// Runs every point of the plan that has no completed record yet (and, with
/// `resume`, retries failed ones). A failing point is recorded and the plan
/// moves on.
pub fn run_plan(config: &ExperimentConfig, options: RunOptions, progress: &(dyn Fn(&str) + Sync)) -> Result<PlanSummary, RunError> {
    let store = ResultsStore::open(&config.output)?;
    let echo = config.output.join("config.resolved.yaml");
    fs::write(&echo, config.to_yaml()).map_err(|e| RunError::io(&echo, e))?;
    let format = config.dataset.resolved_format()?;
    let prepared = prepare_cached(&config.dataset.name, format, &config.dataset.path, &config.output.join("cache"))?;
    progress(&format!(
        "{}: {} users, {} items, {} interactions",
        config.dataset.name, prepared.stats.users, prepared.stats.items, prepared.stats.interactions
    ));
    let split = leave_one_out_split(&prepared.data);

    let points = plan_points(config);
    let mut summary = PlanSummary {
        total: points.len(),
        ..PlanSummary::default()
    };
    let todo: Vec<&RunPoint> = points
        .iter()
        .filter(|p| {
            let (_, id) = identify(&snapshot(config, &prepared, p));
            match store.load_record(&id).map(|r| r.status) {
                Some(RunStatus::Completed) => false,
                Some(RunStatus::Failed) => options.resume,
                None => true,
            }
        })
        .collect();
    summary.skipped = points.len() - todo.len();

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<RunRecord, RunError>)>> = Mutex::new(Vec::new());
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(point) = todo.get(i) else { break };
        let r = run_point(&store, config, &prepared, &split, point, progress);
        results.lock().expect("results lock").push((i, r));
    };
    let threads = options.parallel.clamp(1, todo.len().max(1));
    if threads == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(worker);
            }
        });
    }
    let mut results = results.into_inner().expect("results lock");
    results.sort_by_key(|(i, _)| *i);
    for (_, r) in results {
        let record = r?;
        match record.status {
            RunStatus::Completed => summary.completed += 1,
            RunStatus::Failed => summary.failed += 1,
        }
        summary.records.push(record);
    }
    Ok(summary)
}
