//! Central finite-difference oracle, independent of the tape's backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqbench_tensor::{Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Evaluates `build` on fresh leaves and reduces its output with a fixed
/// random projection so every output element matters.
fn scalar_loss<F>(build: &F, inputs: &[Tensor], proj: &Tensor) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let v = tape.value(out);
    v.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
}

/// Returns the worst norm-wise relative error between the tape gradient and
/// central differences over all inputs.
pub fn grad_check<F>(build: F, inputs: &[Tensor], seed: u64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let out_shape = tape.value(out).shape().to_vec();
    let proj = random(&mut rng(seed ^ 0x9e37), &out_shape, 1.0);
    let pv = tape.constant(proj.clone());
    let weighted = tape.mul(out, pv).unwrap();
    let loss = tape.sum(weighted);
    tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (idx, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).unwrap();
        let mut numeric = vec![0.0; inputs[idx].numel()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[idx].data_mut()[e] += STEP;
            let mut minus = inputs.to_vec();
            minus[idx].data_mut()[e] -= STEP;
            *slot = (scalar_loss(&build, &plus, &proj) - scalar_loss(&build, &minus, &proj)) / (2.0 * STEP);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let na: f64 = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let denom = (na + nn).max(1e-12);
        worst = worst.max(diff / denom);
    }
    worst
}
