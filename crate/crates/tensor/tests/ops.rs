use std::rc::Rc;

use proptest::prelude::*;
use seqbench_tensor::{AttentionMask, Tape, Tensor, TensorError};

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn matmul_identity_cases() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
    let eye = t.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]));
    let out = t.matmul(a, eye).unwrap();
    assert_eq!(t.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    let col = t.constant(Tensor::from_rows(&[[5.0], [7.0]]));
    let out = t.matmul(eye, col).unwrap();
    assert_eq!(t.value(out).shape(), &[2, 1]);
    assert_eq!(t.value(out).data(), &[5.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros(&[2, 3]));
    let b = t.constant(Tensor::zeros(&[2, 3]));
    let err = t.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        TensorError::Shape {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
}

#[test]
fn embedding_gather_and_scatter() {
    let rows: Vec<[f64; 2]> = (0..4).map(|r| [r as f64, 10.0 * r as f64]).collect();
    let mut t = Tape::new();
    let table = t.param(Tensor::from_rows(&rows));
    let out = t.embedding_lookup(table, &[2, 2, 0], 0).unwrap();
    assert_eq!(t.value(out).data(), &[2.0, 20.0, 2.0, 20.0, 0.0, 0.0]);

    let empty = t.embedding_lookup(table, &[], 0).unwrap();
    assert_eq!(t.value(empty).shape(), &[0, 2]);

    let mut t = Tape::new();
    let table = t.param(Tensor::from_rows(&rows));
    let out = t.embedding_lookup(table, &[1, 1, 0], 0).unwrap();
    let loss = t.sum(out);
    t.backward(loss).unwrap();
    // scatter-add: row 1 twice, pad row frozen
    assert_eq!(t.grad(table).unwrap().data(), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn embedding_rejects_out_of_range_id() {
    let mut t = Tape::new();
    let table = t.param(Tensor::zeros(&[4, 2]));
    let err = t.embedding_lookup(table, &[1, 4], 0).unwrap_err();
    assert_eq!(err, TensorError::Vocab { id: 4, rows: 4 });
}

#[test]
fn gru_cell_zero_weights_halves_state() {
    let h = 3;
    let mut t = Tape::new();
    let x = t.constant(Tensor::from_rows(&[[0.3, -1.2]]));
    let h0 = t.constant(Tensor::from_rows(&[[1.0, -2.0, 4.0]]));
    let w_ih = t.param(Tensor::zeros(&[3 * h, 2]));
    let w_hh = t.param(Tensor::zeros(&[3 * h, h]));
    let b_ih = t.param(Tensor::zeros(&[3 * h]));
    let b_hh = t.param(Tensor::zeros(&[3 * h]));
    let out = t.gru_cell(x, h0, w_ih, w_hh, b_ih, b_hh).unwrap();
    assert_eq!(t.value(out).data(), &[0.5, -1.0, 2.0]);

    let zero = t.constant(Tensor::zeros(&[1, h]));
    let out = t.gru_cell(x, zero, w_ih, w_hh, b_ih, b_hh).unwrap();
    assert_eq!(t.value(out).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn gru_cell_rejects_bad_weights() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1, 2]));
    let h0 = t.constant(Tensor::zeros(&[1, 3]));
    let w_ih = t.param(Tensor::zeros(&[9, 2]));
    let w_hh = t.param(Tensor::zeros(&[9, 2]));
    let b = t.param(Tensor::zeros(&[9]));
    let err = t.gru_cell(x, h0, w_ih, w_hh, b, b).unwrap_err();
    assert!(matches!(err, TensorError::Shape { .. }));
}

#[test]
fn attention_single_key_returns_value() {
    let mut t = Tape::new();
    let mask = Rc::new(AttentionMask::new(1, 1, vec![true]).unwrap());
    let q = t.constant(Tensor::from_rows(&[[0.4, -3.0]]));
    let k = t.constant(Tensor::from_rows(&[[1.5, 2.0]]));
    let v = t.constant(Tensor::from_rows(&[[7.0, -8.0]]));
    let out = t.attention(q, k, v, &mask, 1, 1.0 / 2f64.sqrt()).unwrap();
    assert_eq!(t.value(out).data(), &[7.0, -8.0]);
}

#[test]
fn attention_equal_scores_average_values() {
    let mut t = Tape::new();
    let mask = Rc::new(AttentionMask::new(1, 3, vec![true; 9]).unwrap());
    let q = t.constant(Tensor::zeros(&[3, 2]));
    let k = t.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]));
    let v = t.constant(Tensor::from_rows(&[[1.0, 0.0], [2.0, 3.0], [6.0, 3.0]]));
    let out = t.attention(q, k, v, &mask, 1, 1.0).unwrap();
    for r in 0..3 {
        assert!(close(t.value(out).row(r), &[3.0, 2.0], 1e-12));
    }
}

#[test]
fn causal_first_row_sees_only_itself() {
    let mut t = Tape::new();
    let mask = Rc::new(AttentionMask::causal(1, 2, &[false, false]).unwrap());
    let q = t.constant(Tensor::from_rows(&[[1.0, 0.5], [-0.3, 2.0]]));
    let k = t.constant(Tensor::from_rows(&[[0.2, 0.1], [4.0, 4.0]]));
    let v = t.constant(Tensor::from_rows(&[[9.0, -1.0], [3.0, 5.0]]));
    let out = t.attention(q, k, v, &mask, 1, 0.7).unwrap();
    assert_eq!(t.value(out).row(0), &[9.0, -1.0]);
}

#[test]
fn layer_norm_examples() {
    let mut t = Tape::new();
    let gain = t.constant(Tensor::vector(vec![1.0, 1.0]));
    let bias = t.constant(Tensor::vector(vec![0.0, 0.0]));
    let x = t.constant(Tensor::from_rows(&[[3.0, 3.0]]));
    let out = t.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert_eq!(t.value(out).data(), &[0.0, 0.0]);
    let x = t.constant(Tensor::from_rows(&[[1.0, -1.0]]));
    let out = t.layer_norm(x, gain, bias, 1e-12).unwrap();
    assert!(close(t.value(out).data(), &[1.0, -1.0], 1e-9));
    assert!(t.layer_norm(x, gain, bias, 0.0).is_err());
}

#[test]
fn bce_examples() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![0.0]));
    let loss = t.bce_with_logits(x, &[1.0], None).unwrap();
    assert!((t.value(loss).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[-0.5]);

    let x = t.constant(Tensor::vector(vec![20.0]));
    let loss = t.bce_with_logits(x, &[1.0], None).unwrap();
    let expected = (-20f64).exp().ln_1p();
    assert!((t.value(loss).item().unwrap() - expected).abs() < 1e-24);
    assert!((expected - 2.06e-9).abs() < 1e-11);

    let x = t.constant(Tensor::vector(vec![1e4, -1e4]));
    let loss = t.bce_with_logits(x, &[0.0, 1.0], None).unwrap();
    assert_eq!(t.value(loss).item().unwrap(), 1e4);

    let empty = t.constant(Tensor::vector(vec![]));
    assert!(matches!(t.bce_with_logits(empty, &[], None), Err(TensorError::Contract(_))));
}

#[test]
fn bce_weights_exclude_positions() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![0.0, 5.0]));
    let loss = t.bce_with_logits(x, &[1.0, 0.0], Some(&[1.0, 0.0])).unwrap();
    assert!((t.value(loss).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[-0.5, 0.0]);

    let zero = t.bce_with_logits(x, &[1.0, 0.0], Some(&[0.0, 0.0])).unwrap();
    assert_eq!(t.value(zero).item(), Some(0.0));
}

#[test]
fn backward_examples() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let y = t.param(Tensor::vector(vec![5.0]));
    let sq = t.mul(x, x).unwrap();
    let loss = t.sum(sq);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    assert_eq!(t.grad(y).unwrap().data(), &[0.0]);

    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![1.0, -1.0]));
    let a = t.sum(x);
    let b = t.sum(x);
    let loss = t.add(a, b).unwrap();
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[2.0, 2.0]);

    let err = t.backward(x).unwrap_err();
    assert!(matches!(err, TensorError::Contract(_)));
}

#[test]
fn tape_clear_resets_state() {
    let mut t = Tape::new();
    let x = t.param(Tensor::vector(vec![1.0]));
    let l = t.sum(x);
    t.backward(l).unwrap();
    assert_eq!(t.len(), 2);
    t.clear();
    assert!(t.is_empty());
}

fn replay(seed: u64) -> (f64, Vec<f64>) {
    let vals: Vec<f64> = (0..12).map(|i| ((seed + i) as f64 * 0.37).sin()).collect();
    let mut t = Tape::new();
    let a = t.param(Tensor::from_vec(&[3, 4], vals.clone()).unwrap());
    let b = t.param(Tensor::from_vec(&[4, 3], vals).unwrap());
    let m = t.matmul(a, b).unwrap();
    let s = t.tanh(m);
    let loss = t.mean(s).unwrap();
    t.backward(loss).unwrap();
    (t.value(loss).item().unwrap(), t.grad(a).unwrap().into_data())
}

#[test]
fn replay_is_bit_identical() {
    assert_eq!(replay(3), replay(3));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_masked_weights_vanish(
        scores in prop::collection::vec(-50.0f64..50.0, 16),
        bits in prop::collection::vec(any::<bool>(), 16),
    ) {
        // One-hot value rows expose the attention weights directly.
        let mut allowed = bits.clone();
        for i in 0..4 {
            allowed[i * 4 + i] = true;
        }
        let mask = Rc::new(AttentionMask::new(1, 4, allowed.clone()).unwrap());
        let mut t = Tape::new();
        let q = t.constant(Tensor::from_vec(&[4, 4], scores.clone()).unwrap());
        let k = t.constant(Tensor::from_rows(&[[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]]));
        let out = t.attention(q, k, k, &mask, 1, 1.0).unwrap();
        for i in 0..4 {
            let w = t.value(out).row(i);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for j in 0..4 {
                if !allowed[i * 4 + j] {
                    prop_assert_eq!(w[j], 0.0);
                }
            }
        }
    }

    #[test]
    fn ops_stay_finite_on_bounded_inputs(vals in prop::collection::vec(-50.0f64..50.0, 24)) {
        let mut t = Tape::new();
        let x = t.param(Tensor::from_vec(&[4, 6], vals.clone()).unwrap());
        let w = t.param(Tensor::from_vec(&[6, 4], vals.iter().map(|v| v / 50.0).collect()).unwrap());
        let g = t.param(Tensor::filled(&[6], 1.0));
        let b = t.param(Tensor::zeros(&[6]));
        let mask = Rc::new(AttentionMask::causal(1, 4, &[false; 4]).unwrap());
        let ln = t.layer_norm(x, g, b, 1e-8).unwrap();
        let att = t.attention(x, x, x, &mask, 2, 1.0).unwrap();
        let sig = t.sigmoid(att);
        let th = t.tanh(x);
        let h = t.slice_cols(th, 0, 2).unwrap();
        let w_hh = t.param(Tensor::from_vec(&[6, 2], vals[..12].to_vec()).unwrap());
        let b_hh = t.param(Tensor::zeros(&[6]));
        let gxs = t.slice_cols(x, 0, 6).unwrap();
        let gru = t.gru_step(gxs, h, w_hh, b_hh, None).unwrap();
        let proj = t.matmul(x, w).unwrap();
        let flat = t.concat_cols(&[ln, sig, proj]).unwrap();
        let labels: Vec<f64> = (0..t.value(flat).numel()).map(|i| (i % 2) as f64).collect();
        let l1 = t.bce_with_logits(flat, &labels, None).unwrap();
        let l2 = t.sum(gru);
        let loss = t.add(l1, l2).unwrap();
        t.backward(loss).unwrap();
        prop_assert!(t.value(loss).is_finite());
        for v in [x, w, g, b, w_hh, b_hh] {
            prop_assert!(t.grad(v).unwrap().is_finite());
        }
    }
}
