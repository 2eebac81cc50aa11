use std::rc::Rc;

use seqbench_tensor::{AttentionMask, Tape, Tensor, Var};

use super::params::{table, xavier, ParamStore};
use super::Dropout;
use crate::data::PAD;
use crate::error::ModelError;
use crate::seeding::Stream;

fn push_gru(store: &mut ParamStore, rng: &mut Stream, m: usize, d: usize) {
    store.push("item_emb", table(rng, m + 1, d), true);
    store.push("gru.w_ih", xavier(rng, &[3 * d, d], d, d), false);
    store.push("gru.w_hh", xavier(rng, &[3 * d, d], d, d), false);
    store.push("gru.b_ih", Tensor::zeros(&[3 * d]), false);
    store.push("gru.b_hh", Tensor::zeros(&[3 * d]), false);
}

pub(super) fn build_gru4rec(store: &mut ParamStore, rng: &mut Stream, m: usize, d: usize) {
    push_gru(store, rng, m, d);
}

pub(super) fn build_narm(store: &mut ParamStore, rng: &mut Stream, m: usize, d: usize) {
    push_gru(store, rng, m, d);
    store.push("attn.a1", xavier(rng, &[d, d], d, d), false);
    store.push("attn.a2", xavier(rng, &[d, d], d, d), false);
    store.push("attn.v", xavier(rng, &[d], d, 1), false);
    store.push("out.b", xavier(rng, &[d, 2 * d], 2 * d, d), false);
}

/// Runs the GRU over sequence-major inputs `x` and returns the hidden state
/// at every position, also sequence-major. Pad positions pass the state
/// through, and leading steps that are pad in every row are skipped.
fn run_gru(tape: &mut Tape, p: &[Var], x: Var, ids: &[usize], rows: usize, len: usize) -> Result<Var, ModelError> {
    let d = tape.value(p[2]).cols();
    let proj = tape.matmul_nt(x, p[1])?;
    let gx = tape.add_row(proj, p[3])?;
    let zero_row = tape.constant(Tensor::zeros(&[1, d]));
    let Some(start) = (0..len).find(|&t| (0..rows).any(|b| ids[b * len + t] != PAD)) else {
        let idx = vec![0; rows * len];
        return Ok(tape.gather_rows(zero_row, &idx)?);
    };
    let mut h = tape.constant(Tensor::zeros(&[rows, d]));
    let mut parts = vec![zero_row];
    for t in start..len {
        let picks: Vec<usize> = (0..rows).map(|b| b * len + t).collect();
        let active: Vec<bool> = picks.iter().map(|&i| ids[i] != PAD).collect();
        let gx_t = tape.gather_rows(gx, &picks)?;
        h = tape.gru_step(gx_t, h, p[2], p[4], Some(&active))?;
        parts.push(h);
    }
    let all = tape.concat_rows(&parts)?;
    let idx: Vec<usize> = (0..rows * len)
        .map(|i| {
            let (b, t) = (i / len, i % len);
            if t < start {
                0
            } else {
                1 + (t - start) * rows + b
            }
        })
        .collect();
    Ok(tape.gather_rows(all, &idx)?)
}

pub(super) fn encode_gru4rec(
    tape: &mut Tape,
    p: &[Var],
    ids: &[usize],
    rows: usize,
    len: usize,
    drop: &mut Dropout,
) -> Result<Var, ModelError> {
    let x = tape.embedding_lookup(p[0], ids, PAD)?;
    let x = drop.apply(tape, x)?;
    run_gru(tape, p, x, ids, rows, len)
}

/// Global state `h_t` plus a local context attending causally over
/// `h_1..h_t` with `alpha_tj ~ exp(v . sigmoid(A1 h_t + A2 h_j))`, combined
/// as `z_t = B [h_t; c_t]`.
pub(super) fn encode_narm(
    tape: &mut Tape,
    p: &[Var],
    ids: &[usize],
    rows: usize,
    len: usize,
    drop: &mut Dropout,
) -> Result<Var, ModelError> {
    let x = tape.embedding_lookup(p[0], ids, PAD)?;
    let x = drop.apply(tape, x)?;
    let h = run_gru(tape, p, x, ids, rows, len)?;
    let pad: Vec<bool> = ids.iter().map(|&i| i == PAD).collect();
    let mask = Rc::new(AttentionMask::causal(rows, len, &pad)?);
    let q = tape.matmul_nt(h, p[5])?;
    let k = tape.matmul_nt(h, p[6])?;
    let local = tape.additive_attention(q, k, p[7], h, &mask)?;
    let both = tape.concat_cols(&[h, local])?;
    let both = drop.apply(tape, both)?;
    Ok(tape.matmul_nt(both, p[8])?)
}
