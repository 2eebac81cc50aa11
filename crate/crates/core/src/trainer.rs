//! Deterministic training: shuffled windows, BCE against sampled negatives,
//! clipped Adam updates and validation-based model selection.

use std::path::Path;
use std::time::Instant;

use seqbench_tensor::{Adam, AdamConfig, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Phase, SplitDataset};
use crate::emissions::EmissionsConfig;
use crate::error::TrainError;
use crate::evaluator::{evaluate, EvalNegatives, MetricKey};
use crate::models::Model;
use crate::seeding::{self, SeedBundle};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Negatives per positive during training.
    pub m_neg: usize,
    pub lr: f64,
    pub validate_every: usize,
    /// Stop after this many validations without improvement.
    pub patience: Option<usize>,
    pub metric: MetricKey,
    pub clip_norm: f64,
    #[serde(skip)]
    pub seed: u64,
    #[serde(skip)]
    pub m_neg_eval: EvalNegatives,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            batch_size: 64,
            m_neg: 1,
            lr: 1e-3,
            validate_every: 5,
            patience: None,
            metric: MetricKey::default(),
            clip_norm: 5.0,
            seed: 0,
            m_neg_eval: EvalNegatives::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.m_neg == 0 {
            return fail("m_neg must be at least 1");
        }
        if self.validate_every == 0 {
            return fail("validate_every must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return fail("clip_norm must be positive");
        }
        if self.patience == Some(0) {
            return fail("patience must be at least 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_metric: Option<f64>,
    pub seconds: f64,
    /// Cumulative estimate up to the end of this epoch.
    pub kwh: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: Option<f64>,
}

impl TrainHistory {
    /// `epoch,loss,val_metric,seconds,kwh`; epochs without validation leave
    /// the metric empty.
    pub fn write_csv(&self, path: &Path) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "loss", "val_metric", "seconds", "kwh"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.loss.to_string(),
                e.val_metric.map(|v| v.to_string()).unwrap_or_default(),
                e.seconds.to_string(),
                e.kwh.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub struct TrainOutcome {
    /// Parameters from the best validation epoch.
    pub model: Model,
    pub history: TrainHistory,
}

/// Seed of the validation negatives stream for a run seed.
pub fn validation_seed(seed: u64) -> u64 {
    seeding::derive_u64(seed, &["validation"])
}

/// Validation metric over every user with a validation target.
pub fn validate(model: &Model, split: &SplitDataset, m_neg_eval: EvalNegatives, key: MetricKey, seed: u64) -> Result<f64, TrainError> {
    Ok(evaluate(model, split, Phase::Val, m_neg_eval, validation_seed(seed))?.get(key))
}

fn clip(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Trains `model` in place of its initial parameters and returns the
/// parameters of the epoch with the best validation metric. `on_epoch` sees
/// each record as it is produced.
pub fn train(
    mut model: Model,
    split: &SplitDataset,
    config: &TrainConfig,
    emissions: &EmissionsConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let mut seeds = SeedBundle::new(config.seed);
    let view = split.train_view();
    let has_val = split.users.iter().any(|u| u.val.is_some());
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        model.params().tensors(),
    );
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Model)> = None;
    let mut stale = 0;
    let mut total_seconds = 0.0;
    let mut tape = Tape::new();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let batches = make_batches(&view, model.config().seqlen, config.batch_size, model.batch_mode(), config.m_neg, &mut seeds)?;
        let (mut loss_sum, mut slot_sum) = (0.0, 0usize);
        for (bi, batch) in batches.iter().enumerate() {
            tape.clear();
            let p = model.params().bind(&mut tape, true);
            let Some(loss) = model.batch_loss(&mut tape, &p, batch, Some(&mut seeds.dropout))? else {
                continue;
            };
            let value = tape.value(loss).item().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: bi,
                    loss: value,
                });
            }
            tape.backward(loss)?;
            let mut grads: Vec<Tensor> = p.iter().map(|&v| tape.grad(v).expect("parameters are tracked")).collect();
            clip(&mut grads, config.clip_norm);
            adam.step(model.params_mut().tensors_mut(), &grads)?;
            let n = batch.slots().len();
            loss_sum += value * n as f64;
            slot_sum += n;
        }
        tape.clear();

        let last = epoch == config.epochs;
        let val_metric = if has_val && (epoch % config.validate_every == 0 || last) {
            Some(validate(&model, split, config.m_neg_eval, config.metric, config.seed)?)
        } else {
            None
        };
        let seconds = started.elapsed().as_secs_f64();
        total_seconds += seconds;
        let record = EpochRecord {
            epoch,
            loss: if slot_sum > 0 { loss_sum / slot_sum as f64 } else { 0.0 },
            val_metric,
            seconds,
            kwh: emissions.kwh(total_seconds),
        };
        on_epoch(&record);
        history.epochs.push(record);

        if let Some(v) = val_metric {
            if best.as_ref().is_none_or(|(b, _)| v > *b) {
                best = Some((v, model.clone()));
                history.best_epoch = epoch;
                history.best_metric = Some(v);
                stale = 0;
            } else {
                stale += 1;
                if config.patience.is_some_and(|p| stale >= p) {
                    break;
                }
            }
        }
    }
    let model = match best {
        Some((_, m)) => m,
        None => {
            history.best_epoch = history.epochs.len();
            model
        }
    };
    Ok(TrainOutcome { model, history })
}
