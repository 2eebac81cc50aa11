use std::rc::Rc;

use seqbench_tensor::{AttentionMask, Tape, Tensor, Var};

use super::params::{table, xavier, ParamStore};
use super::{Dropout, Family, ModelConfig};
use crate::data::PAD;
use crate::error::ModelError;
use crate::seeding::Stream;

const PER_LAYER: usize = 16;
const LN_EPS: f64 = 1e-8;

pub(super) fn build(store: &mut ParamStore, rng: &mut Stream, config: &ModelConfig, m: usize) {
    let d = config.emb;
    let rows = if config.family == Family::Bert4rec { m + 2 } else { m + 1 };
    store.push("item_emb", table(rng, rows, d), true);
    store.push("pos_emb", table(rng, config.seqlen + 1, d), true);
    for l in 0..config.layers {
        let n = |s: &str| format!("block{l}.{s}");
        store.push(n("ln1.gain"), Tensor::filled(&[d], 1.0), false);
        store.push(n("ln1.bias"), Tensor::zeros(&[d]), false);
        for w in ["q", "k", "v", "o"] {
            store.push(n(&format!("attn.w{w}")), xavier(rng, &[d, d], d, d), false);
            store.push(n(&format!("attn.b{w}")), Tensor::zeros(&[d]), false);
        }
        store.push(n("ln2.gain"), Tensor::filled(&[d], 1.0), false);
        store.push(n("ln2.bias"), Tensor::zeros(&[d]), false);
        store.push(n("ffn.w1"), xavier(rng, &[4 * d, d], d, 4 * d), false);
        store.push(n("ffn.b1"), Tensor::zeros(&[4 * d]), false);
        store.push(n("ffn.w2"), xavier(rng, &[d, 4 * d], 4 * d, d), false);
        store.push(n("ffn.b2"), Tensor::zeros(&[d]), false);
    }
    store.push("ln.gain", Tensor::filled(&[d], 1.0), false);
    store.push("ln.bias", Tensor::zeros(&[d]), false);
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, ModelError> {
    let y = tape.matmul_nt(x, w)?;
    Ok(tape.add_row(y, b)?)
}

/// Pre-norm blocks over item plus right-aligned position embeddings: the
/// last real item gets position 1, pads get the frozen position 0.
pub(super) fn encode(
    tape: &mut Tape,
    p: &[Var],
    config: &ModelConfig,
    ids: &[usize],
    rows: usize,
    len: usize,
    drop: &mut Dropout,
) -> Result<Var, ModelError> {
    let mut pos = vec![0; ids.len()];
    for (i, slot) in pos.iter_mut().enumerate() {
        if ids[i] != PAD {
            *slot = len - i % len;
            if *slot > config.seqlen {
                return Err(ModelError::Contract(format!(
                    "window holds {} items but the model was built for {}",
                    slot, config.seqlen
                )));
            }
        }
    }
    let pad: Vec<bool> = ids.iter().map(|&i| i == PAD).collect();
    let mask = Rc::new(if config.family == Family::Sasrec {
        AttentionMask::causal(rows, len, &pad)?
    } else {
        AttentionMask::bidirectional(rows, len, &pad)?
    });
    let heads = config.heads;
    let scale = 1.0 / ((config.emb / heads) as f64).sqrt();

    let items = tape.embedding_lookup(p[0], ids, PAD)?;
    let positions = tape.embedding_lookup(p[1], &pos, PAD)?;
    let x = tape.add(items, positions)?;
    let mut x = drop.apply(tape, x)?;
    for l in 0..config.layers {
        let b = &p[2 + l * PER_LAYER..2 + (l + 1) * PER_LAYER];
        let a = tape.layer_norm(x, b[0], b[1], LN_EPS)?;
        let q = linear(tape, a, b[2], b[3])?;
        let k = linear(tape, a, b[4], b[5])?;
        let v = linear(tape, a, b[6], b[7])?;
        let att = tape.attention(q, k, v, &mask, heads, scale)?;
        let att = linear(tape, att, b[8], b[9])?;
        let att = drop.apply(tape, att)?;
        x = tape.add(x, att)?;
        let f = tape.layer_norm(x, b[10], b[11], LN_EPS)?;
        let f = linear(tape, f, b[12], b[13])?;
        let f = if config.family == Family::Sasrec { tape.relu(f) } else { tape.gelu(f) };
        let f = linear(tape, f, b[14], b[15])?;
        let f = drop.apply(tape, f)?;
        x = tape.add(x, f)?;
    }
    let n = p.len();
    Ok(tape.layer_norm(x, p[n - 2], p[n - 1], LN_EPS)?)
}
