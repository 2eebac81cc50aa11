//! Sampled-candidate ranking evaluation with single-relevant-item metrics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{sample_negatives, EvalPair, Phase, SplitDataset};
use crate::error::{ModelError, TrainError};
use crate::models::Model;
use crate::seeding::SeedBundle;

/// Cut-offs reported for every metric.
pub const KS: [usize; 2] = [10, 20];

const EVAL_CHUNK: usize = 256;

/// 1-based rank of `scores[positive]`. Ties count against the positive, and
/// a non-finite positive score ranks last.
pub fn rank_positive(scores: &[f64], positive: usize) -> usize {
    let s = scores[positive];
    if !s.is_finite() {
        return scores.len();
    }
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &x)| i != positive && x >= s)
        .count()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AtK {
    pub precision: f64,
    pub recall: f64,
    pub ndcg: f64,
    pub map: f64,
}

/// Closed forms for one relevant item at `rank`.
pub fn metrics_at_k(rank: usize, k: usize) -> AtK {
    assert!(rank >= 1 && k >= 1, "rank and k start at 1");
    if rank > k {
        return AtK::default();
    }
    AtK {
        precision: 1.0 / k as f64,
        recall: 1.0,
        ndcg: 1.0 / ((rank + 1) as f64).log2(),
        map: 1.0 / rank as f64,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Metric {
    Precision,
    Recall,
    Ndcg,
    Map,
}

/// A metric at a cut-off, written `ndcg@10`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MetricKey {
    pub metric: Metric,
    pub k: usize,
}

impl Default for MetricKey {
    fn default() -> Self {
        Self {
            metric: Metric::Ndcg,
            k: 10,
        }
    }
}

impl fmt::Display for MetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.metric {
            Metric::Precision => "precision",
            Metric::Recall => "recall",
            Metric::Ndcg => "ndcg",
            Metric::Map => "map",
        };
        write!(f, "{name}@{}", self.k)
    }
}

impl FromStr for MetricKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, k) = s.split_once('@').ok_or_else(|| format!("expected <metric>@<k>, got `{s}`"))?;
        let metric = match name.to_ascii_lowercase().as_str() {
            "precision" | "p" => Metric::Precision,
            "recall" | "r" => Metric::Recall,
            "ndcg" => Metric::Ndcg,
            "map" => Metric::Map,
            _ => return Err(format!("unknown metric `{name}`")),
        };
        let k = k.parse().ok().filter(|&k| KS.contains(&k)).ok_or_else(|| format!("k must be one of {KS:?}"))?;
        Ok(Self { metric, k })
    }
}

impl Serialize for MetricKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MetricKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Number of sampled negatives per trial, or the whole unconsumed catalog.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EvalNegatives {
    Sampled(usize),
    All,
}

impl Default for EvalNegatives {
    fn default() -> Self {
        Self::Sampled(100)
    }
}

impl fmt::Display for EvalNegatives {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Sampled(n) => write!(f, "{n}"),
            Self::All => f.write_str("all"),
        }
    }
}

impl FromStr for EvalNegatives {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(Self::All);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Self::Sampled(n)),
            _ => Err(format!("expected a positive count or `all`, got `{s}`")),
        }
    }
}

impl Serialize for EvalNegatives {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Self::Sampled(n) => s.serialize_u64(*n as u64),
            Self::All => s.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for EvalNegatives {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(0) => Err(serde::de::Error::custom("negative count must be positive")),
            Raw::N(n) => Ok(Self::Sampled(n as usize)),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// One positive ranked against its negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedTrial {
    pub user: usize,
    /// Positive first, then negatives.
    pub candidates: Vec<usize>,
    pub scores: Vec<f64>,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub at10: AtK,
    pub at20: AtK,
    pub users: usize,
    pub m_neg: EvalNegatives,
    pub seed: u64,
}

impl MetricReport {
    pub fn at(&self, k: usize) -> &AtK {
        match k {
            10 => &self.at10,
            20 => &self.at20,
            _ => panic!("no metrics at k = {k}"),
        }
    }

    pub fn get(&self, key: MetricKey) -> f64 {
        let a = self.at(key.k);
        match key.metric {
            Metric::Precision => a.precision,
            Metric::Recall => a.recall,
            Metric::Ndcg => a.ndcg,
            Metric::Map => a.map,
        }
    }

    /// Means over trials; an empty trial set reports zeros.
    pub fn from_ranks(ranks: &[usize], m_neg: EvalNegatives, seed: u64) -> Self {
        let mean = |k: usize| {
            let mut acc = AtK::default();
            let mut hits = 0usize;
            for &r in ranks {
                let m = metrics_at_k(r, k);
                hits += usize::from(r <= k);
                acc.ndcg += m.ndcg;
                acc.map += m.map;
            }
            let n = ranks.len().max(1) as f64;
            let recall = hits as f64 / n;
            AtK {
                precision: recall / k as f64,
                recall,
                ndcg: acc.ndcg / n,
                map: acc.map / n,
            }
        };
        Self {
            at10: mean(10),
            at20: mean(20),
            users: ranks.len(),
            m_neg,
            seed,
        }
    }
}

/// Candidate list `[target, negatives...]` for one pair, drawn from the
/// pair's own `(seed, user)` stream.
pub fn trial_candidates(pair: &EvalPair, num_items: usize, m_neg: EvalNegatives, seed: u64) -> Result<Vec<usize>, TrainError> {
    let mut cands = vec![pair.target];
    match m_neg {
        EvalNegatives::Sampled(n) => {
            let mut rng = SeedBundle::eval_stream(seed, pair.user);
            cands.extend(sample_negatives(num_items, &pair.exclude, n, pair.user, &mut rng)?);
        }
        EvalNegatives::All => {
            cands.extend((1..=num_items).filter(|i| pair.exclude.binary_search(i).is_err()));
        }
    }
    Ok(cands)
}

/// Ranks every pair using `scorer`, which maps a chunk of pairs and their
/// candidate lists to one score vector per pair.
pub fn rank_trials<F>(
    pairs: &[EvalPair],
    num_items: usize,
    m_neg: EvalNegatives,
    seed: u64,
    mut scorer: F,
) -> Result<Vec<RankedTrial>, TrainError>
where
    F: FnMut(&[EvalPair], &[Vec<usize>]) -> Result<Vec<Vec<f64>>, TrainError>,
{
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(EVAL_CHUNK) {
        let cands = chunk
            .iter()
            .map(|p| trial_candidates(p, num_items, m_neg, seed))
            .collect::<Result<Vec<_>, _>>()?;
        let scores = scorer(chunk, &cands)?;
        for ((pair, c), s) in chunk.iter().zip(cands).zip(scores) {
            if s.len() != c.len() {
                return Err(ModelError::Contract(format!("{} scores for {} candidates", s.len(), c.len())).into());
            }
            out.push(RankedTrial {
                user: pair.user,
                rank: rank_positive(&s, 0),
                candidates: c,
                scores: s,
            });
        }
    }
    Ok(out)
}

/// Scores candidates with the model's final-position representation.
pub fn model_scorer(model: &Model) -> impl FnMut(&[EvalPair], &[Vec<usize>]) -> Result<Vec<Vec<f64>>, TrainError> + '_ {
    move |pairs, cands| {
        let windows: Vec<Vec<usize>> = pairs.iter().map(|p| model.eval_window(&p.input)).collect();
        let z = model.final_representations(&windows)?;
        cands
            .iter()
            .enumerate()
            .map(|(i, c)| Ok(model.score(z.row(i), c)?))
            .collect()
    }
}

pub fn evaluate_pairs(model: &Model, pairs: &[EvalPair], m_neg: EvalNegatives, seed: u64) -> Result<MetricReport, TrainError> {
    let trials = rank_trials(pairs, model.num_items(), m_neg, seed, model_scorer(model))?;
    let ranks: Vec<usize> = trials.iter().map(|t| t.rank).collect();
    Ok(MetricReport::from_ranks(&ranks, m_neg, seed))
}

/// Ranks each user's held-out item for `phase` against negatives drawn
/// outside the user's full history.
pub fn evaluate(model: &Model, split: &SplitDataset, phase: Phase, m_neg: EvalNegatives, seed: u64) -> Result<MetricReport, TrainError> {
    evaluate_pairs(model, &split.eval_pairs(phase), m_neg, seed)
}
