use std::rc::Rc;

use seqbench_tensor::{AttentionMask, Tape, Tensor, Var};

use super::params::{table, xavier, ParamStore};
use super::Dropout;
use crate::data::PAD;
use crate::error::ModelError;
use crate::seeding::Stream;

pub(super) fn build(store: &mut ParamStore, rng: &mut Stream, m: usize, d: usize) {
    store.push("item_emb", table(rng, m + 1, d), true);
    store.push("alpha.w", xavier(rng, &[d, d], d, d), false);
    store.push("alpha.b", Tensor::zeros(&[d]), false);
    store.push("alpha.v", xavier(rng, &[d, 1], d, 1), false);
}

/// `z_t = sum_{j <= t} alpha_tj E[s_j]` with
/// `alpha_t = softmax_j(v . tanh(W E[s_j] + b))`, so representations stay in
/// the item-embedding space.
pub(super) fn encode(
    tape: &mut Tape,
    p: &[Var],
    ids: &[usize],
    rows: usize,
    len: usize,
    drop: &mut Dropout,
) -> Result<Var, ModelError> {
    let x = tape.embedding_lookup(p[0], ids, PAD)?;
    let x = drop.apply(tape, x)?;
    let proj = tape.matmul_nt(x, p[1])?;
    let proj = tape.add_row(proj, p[2])?;
    let act = tape.tanh(proj);
    let e = tape.matmul(act, p[3])?;
    let ones = tape.constant(Tensor::filled(&[rows * len, 1], 1.0));
    let pad: Vec<bool> = ids.iter().map(|&i| i == PAD).collect();
    let mask = Rc::new(AttentionMask::causal(rows, len, &pad)?);
    Ok(tape.attention(ones, e, x, &mask, 1, 1.0)?)
}
