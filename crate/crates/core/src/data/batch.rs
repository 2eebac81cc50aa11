use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{TrainView, PAD};
use crate::error::DataError;
use crate::seeding::{SeedBundle, Stream};

/// Most recent `len` items, left-padded with [`PAD`] when shorter.
pub fn pad_window(seq: &[usize], len: usize) -> Vec<usize> {
    if seq.len() >= len {
        return seq[seq.len() - len..].to_vec();
    }
    let mut out = vec![PAD; len - seq.len()];
    out.extend_from_slice(seq);
    out
}

/// Draws `count` distinct ids uniformly from `1..=num_items` minus
/// `consumed` (which must be sorted). Draw order is part of the result.
pub fn sample_negatives(
    num_items: usize,
    consumed: &[usize],
    count: usize,
    user: usize,
    rng: &mut Stream,
) -> Result<Vec<usize>, DataError> {
    debug_assert!(consumed.windows(2).all(|w| w[0] < w[1]));
    let pool = num_items - consumed.iter().filter(|&&c| (1..=num_items).contains(&c)).count();
    if count > pool {
        return Err(DataError::NegativePool {
            user,
            pool,
            requested: count,
        });
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    if count * 4 >= pool {
        let mut cands: Vec<usize> = (1..=num_items).filter(|i| consumed.binary_search(i).is_err()).collect();
        let (picked, _) = cands.partial_shuffle(rng, count);
        return Ok(picked.to_vec());
    }
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let c = rng.random_range(1..=num_items);
        if consumed.binary_search(&c).is_err() && seen.insert(c) {
            out.push(c);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BatchMode {
    /// Next-item target at every non-pad position but the last.
    Seq2Seq,
    /// Same packed layout; slot `t` stands for the pair (window ending at
    /// `t`, next item), see [`Batch::expand_pairs`].
    Seq2Item,
    /// Random positions replaced by `mask_token` and predicted in place.
    Cloze { mask_prob: f64, mask_token: usize },
}

/// `rows x len` left-padded windows with per-slot targets and negatives.
/// A target of [`PAD`] marks a position without a prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub mode: BatchMode,
    pub users: Vec<usize>,
    pub len: usize,
    pub m_neg: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    /// `m_neg` ids per position, zero where there is no target.
    pub negatives: Vec<usize>,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.users.len()
    }

    pub fn pad_mask(&self) -> Vec<bool> {
        self.inputs.iter().map(|&i| i == PAD).collect()
    }

    /// Flat indices of positions that carry a target.
    pub fn slots(&self) -> Vec<usize> {
        (0..self.targets.len()).filter(|&i| self.targets[i] != PAD).collect()
    }

    /// Candidate ids per slot, `[positive, negatives...]`, flattened with
    /// width `1 + m_neg`.
    pub fn candidates(&self, slots: &[usize]) -> Vec<usize> {
        let mut out = Vec::with_capacity(slots.len() * (1 + self.m_neg));
        for &s in slots {
            out.push(self.targets[s]);
            out.extend_from_slice(&self.negatives[s * self.m_neg..(s + 1) * self.m_neg]);
        }
        out
    }

    /// Explicit `(window, next item)` pairs equivalent to this batch: one per
    /// slot, each window being the prefix ending at that slot re-padded to
    /// `len`.
    pub fn expand_pairs(&self) -> Vec<(Vec<usize>, usize)> {
        let mut out = Vec::new();
        for r in 0..self.rows() {
            let row = &self.inputs[r * self.len..(r + 1) * self.len];
            for t in 0..self.len {
                let target = self.targets[r * self.len + t];
                if target != PAD {
                    let prefix: Vec<usize> = row[..=t].iter().copied().filter(|&i| i != PAD).collect();
                    out.push((pad_window(&prefix, self.len), target));
                }
            }
        }
        out
    }
}

/// One window per user holding the most recent `len` training items,
/// users shuffled by the shuffle stream and negatives drawn from the
/// negatives stream, so the stream is a pure function of the seeds.
pub fn make_batches(
    view: &TrainView,
    len: usize,
    batch_size: usize,
    mode: BatchMode,
    m_neg: usize,
    seeds: &mut SeedBundle,
) -> Result<Vec<Batch>, DataError> {
    assert!(len >= 1 && batch_size >= 1, "window length and batch size must be positive");
    let min_items = match mode {
        BatchMode::Cloze { .. } => 1,
        _ => 2,
    };
    let mut order: Vec<usize> = (0..view.users.len()).filter(|&u| view.users[u].items.len() >= min_items).collect();
    order.shuffle(&mut seeds.shuffle);

    let mut batches = Vec::with_capacity(order.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let mut b = Batch {
            mode,
            users: Vec::with_capacity(chunk.len()),
            len,
            m_neg,
            inputs: Vec::with_capacity(chunk.len() * len),
            targets: Vec::with_capacity(chunk.len() * len),
            negatives: vec![PAD; chunk.len() * len * m_neg],
        };
        for &u in chunk {
            let tu = &view.users[u];
            let window = pad_window(&tu.items, len);
            let start = b.inputs.len();
            match mode {
                BatchMode::Seq2Seq | BatchMode::Seq2Item => {
                    for t in 0..len {
                        let next = if t + 1 < len && window[t] != PAD { window[t + 1] } else { PAD };
                        b.targets.push(next);
                    }
                    b.inputs.extend_from_slice(&window);
                }
                BatchMode::Cloze { mask_prob, mask_token } => {
                    let mut input = window.clone();
                    let mut targets = vec![PAD; len];
                    for t in 0..len {
                        if window[t] != PAD && seeds.mask.random_bool(mask_prob) {
                            input[t] = mask_token;
                            targets[t] = window[t];
                        }
                    }
                    if targets.iter().all(|&x| x == PAD) {
                        input[len - 1] = mask_token;
                        targets[len - 1] = window[len - 1];
                    }
                    b.inputs.extend_from_slice(&input);
                    b.targets.extend_from_slice(&targets);
                }
            }
            for t in 0..len {
                if b.targets[start + t] != PAD {
                    let negs = sample_negatives(view.num_items, &tu.consumed, m_neg, tu.user, &mut seeds.negatives)?;
                    let at = (start + t) * m_neg;
                    b.negatives[at..at + m_neg].copy_from_slice(&negs);
                }
            }
            b.users.push(tu.user);
        }
        batches.push(b);
    }
    Ok(batches)
}
