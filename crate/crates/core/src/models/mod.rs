//! The five sequential recommenders behind one contract: encode a
//! left-padded window into one `d`-dimensional representation per position
//! and score candidates by dot product with the shared item table.

mod checkpoint;
mod corerec;
mod gru;
mod params;
mod transformer;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use seqbench_tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use params::ParamStore;

use crate::data::{pad_window, Batch, BatchMode, PAD};
use crate::error::ModelError;
use crate::seeding::{self, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Bert4rec,
    Core,
    Gru4rec,
    Narm,
    Sasrec,
}

impl Family {
    pub const ALL: [Family; 5] = [Family::Bert4rec, Family::Core, Family::Gru4rec, Family::Narm, Family::Sasrec];

    pub fn name(self) -> &'static str {
        match self {
            Family::Bert4rec => "bert4rec",
            Family::Core => "core",
            Family::Gru4rec => "gru4rec",
            Family::Narm => "narm",
            Family::Sasrec => "sasrec",
        }
    }

    /// Sequence-to-sequence families predict at every position.
    pub fn is_seq2seq(self) -> bool {
        matches!(self, Family::Gru4rec | Family::Sasrec | Family::Bert4rec)
    }

    pub fn is_transformer(self) -> bool {
        matches!(self, Family::Sasrec | Family::Bert4rec)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| ModelError::Config(format!("unknown model family `{s}` (expected bert4rec, core, gru4rec, narm or sasrec)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: Family,
    /// Embedding size `d`.
    pub emb: usize,
    /// Maximum input length `L`.
    pub seqlen: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub mask_prob: f64,
}

impl ModelConfig {
    pub fn new(family: Family, emb: usize, seqlen: usize) -> Self {
        Self {
            family,
            emb,
            seqlen,
            layers: 2,
            heads: 2,
            dropout: 0.2,
            mask_prob: 0.2,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.emb == 0 {
            return fail("embedding size must be positive".into());
        }
        if self.seqlen == 0 {
            return fail("sequence length must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.family.is_transformer() {
            if self.layers == 0 || self.heads == 0 {
                return fail("layers and heads must be positive".into());
            }
            if !self.emb.is_multiple_of(self.heads) {
                return fail(format!("embedding size {} not divisible by {} heads", self.emb, self.heads));
            }
        }
        if self.family == Family::Bert4rec && !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return fail(format!("mask probability {} outside (0, 1)", self.mask_prob));
        }
        Ok(())
    }
}

/// Dropout with keep masks drawn from the dropout stream; inactive when no
/// stream is supplied (evaluation).
pub(crate) struct Dropout<'a> {
    rng: Option<&'a mut Stream>,
    p: f64,
}

impl Dropout<'_> {
    pub(crate) fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var, ModelError> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.p > 0.0 => {
                let keep: Vec<bool> = (0..tape.value(x).numel()).map(|_| rng.random_bool(1.0 - self.p)).collect();
                Ok(tape.dropout(x, &keep, self.p)?)
            }
            _ => Ok(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    num_items: usize,
    params: ParamStore,
}

/// Initializes a model from the seed's `init` stream.
pub fn build_model(config: &ModelConfig, num_items: usize, seed: u64) -> Result<Model, ModelError> {
    Model::new(config, num_items, &mut seeding::stream(seed, &[seeding::INIT]))
}

pub fn count_params(model: &Model) -> usize {
    model.count_params()
}

impl Model {
    pub fn new(config: &ModelConfig, num_items: usize, rng: &mut Stream) -> Result<Self, ModelError> {
        config.validate()?;
        if num_items == 0 {
            return Err(ModelError::Config("empty item vocabulary".into()));
        }
        let mut params = ParamStore::new();
        let (m, d) = (num_items, config.emb);
        match config.family {
            Family::Gru4rec => gru::build_gru4rec(&mut params, rng, m, d),
            Family::Narm => gru::build_narm(&mut params, rng, m, d),
            Family::Core => corerec::build(&mut params, rng, m, d),
            Family::Sasrec | Family::Bert4rec => transformer::build(&mut params, rng, config, m),
        }
        Ok(Self {
            config: config.clone(),
            num_items,
            params,
        })
    }

    pub(crate) fn from_parts(config: ModelConfig, num_items: usize, params: ParamStore) -> Self {
        Self {
            config,
            num_items,
            params,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn family(&self) -> Family {
        self.config.family
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn count_params(&self) -> usize {
        self.params.count()
    }

    /// Id of the Cloze mask symbol (BERT4Rec only): one past the last item.
    pub fn mask_token(&self) -> Option<usize> {
        (self.family() == Family::Bert4rec).then_some(self.num_items + 1)
    }

    /// Batch layout this family trains on.
    pub fn batch_mode(&self) -> BatchMode {
        match self.family() {
            Family::Gru4rec | Family::Sasrec => BatchMode::Seq2Seq,
            Family::Narm | Family::Core => BatchMode::Seq2Item,
            Family::Bert4rec => BatchMode::Cloze {
                mask_prob: self.config.mask_prob,
                mask_token: self.num_items + 1,
            },
        }
    }

    /// Representations for every position of `rows` windows packed
    /// sequence-major in `ids`; shape `[ids.len(), d]`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        p: &[Var],
        ids: &[usize],
        rows: usize,
        dropout: Option<&mut Stream>,
    ) -> Result<Var, ModelError> {
        if rows == 0 || !ids.len().is_multiple_of(rows) || ids.is_empty() {
            return Err(ModelError::Contract(format!("{} ids do not form {rows} windows", ids.len())));
        }
        let limit = self.mask_token().unwrap_or(self.num_items);
        if let Some(&bad) = ids.iter().find(|&&i| i > limit) {
            return Err(ModelError::Contract(format!("item id {bad} outside vocabulary of {} items", self.num_items)));
        }
        let len = ids.len() / rows;
        let mut drop = Dropout {
            rng: dropout,
            p: self.config.dropout,
        };
        match self.family() {
            Family::Gru4rec => gru::encode_gru4rec(tape, p, ids, rows, len, &mut drop),
            Family::Narm => gru::encode_narm(tape, p, ids, rows, len, &mut drop),
            Family::Core => corerec::encode(tape, p, ids, rows, len, &mut drop),
            Family::Sasrec | Family::Bert4rec => transformer::encode(tape, p, &self.config, ids, rows, len, &mut drop),
        }
    }

    /// Mean BCE of each prediction slot's positive against its negatives.
    /// `None` when the batch has no prediction slots.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        p: &[Var],
        batch: &Batch,
        dropout: Option<&mut Stream>,
    ) -> Result<Option<Var>, ModelError> {
        if batch.mode != self.batch_mode() {
            return Err(ModelError::Contract(format!(
                "{:?} batch given to {} which trains on {:?}",
                batch.mode,
                self.family(),
                self.batch_mode()
            )));
        }
        let slots = batch.slots();
        if slots.is_empty() {
            return Ok(None);
        }
        let h = self.encode(tape, p, &batch.inputs, batch.rows(), dropout)?;
        let z = tape.gather_rows(h, &slots)?;
        let width = 1 + batch.m_neg;
        let logits = tape.score_candidates(z, p[0], &batch.candidates(&slots), width)?;
        let labels: Vec<f64> = (0..slots.len() * width).map(|i| if i % width == 0 { 1.0 } else { 0.0 }).collect();
        Ok(Some(tape.bce_with_logits(logits, &labels, None)?))
    }

    /// Input window for predicting the item after `history`.
    pub fn eval_window(&self, history: &[usize]) -> Vec<usize> {
        match self.mask_token() {
            Some(mask) => {
                let mut h = history.to_vec();
                h.push(mask);
                pad_window(&h, self.config.seqlen)
            }
            None => pad_window(history, self.config.seqlen),
        }
    }

    /// Representation at every position, without dropout.
    pub fn slot_representations(&self, ids: &[usize], rows: usize) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let h = self.encode(&mut tape, &p, ids, rows, None)?;
        Ok(tape.value(h).clone())
    }

    /// Last-position representation of each window, `[windows.len(), d]`.
    pub fn final_representations(&self, windows: &[Vec<usize>]) -> Result<Tensor, ModelError> {
        let len = windows.first().map_or(0, Vec::len);
        if windows.iter().any(|w| w.len() != len) {
            return Err(ModelError::Contract("windows of unequal length".into()));
        }
        let ids: Vec<usize> = windows.concat();
        let h = self.slot_representations(&ids, windows.len())?;
        let d = self.config.emb;
        let mut out = Vec::with_capacity(windows.len() * d);
        for r in 0..windows.len() {
            out.extend_from_slice(h.row(r * len + len - 1));
        }
        Ok(Tensor::from_vec(&[windows.len(), d], out)?)
    }

    /// `<z, E[c]>` for each candidate.
    pub fn score(&self, z: &[f64], candidates: &[usize]) -> Result<Vec<f64>, ModelError> {
        let table = &self.params.tensors()[0];
        if z.len() != self.config.emb {
            return Err(ModelError::Contract(format!("representation of size {} for d = {}", z.len(), self.config.emb)));
        }
        candidates
            .iter()
            .map(|&c| {
                if c == PAD || c > self.num_items {
                    return Err(ModelError::Contract(format!("candidate {c} is not an item id")));
                }
                Ok(z.iter().zip(table.row(c)).map(|(a, b)| a * b).sum())
            })
            .collect()
    }
}
