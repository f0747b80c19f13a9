//! Shared test support: deterministic tensors and the central
//! finite-difference gradient oracle.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sscd_core::tape::{Tape, TensorId};
use sscd_core::tensor::Tensor;
use sscd_core::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen::<f64>() * (hi - lo) + lo)
}

pub fn rand_tensor_f32(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.gen::<f32>() * (hi - lo) + lo)
}

/// Random values kept at least `margin` away from zero (for kinked ops).
pub fn rand_tensor_away_from(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    scale: f64,
    margin: f64,
) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        sign * (margin + rng.gen::<f64>() * scale)
    })
}

/// Central-difference step per the gradient-check contract.
pub const FD_STEP: f64 = 1e-4;
/// Relative-error bound for 64-bit gradient checks.
pub const FD_TOL: f64 = 1e-4;

/// Max relative error between analytic and numeric gradients wrt every
/// input, where `build` assembles a scalar loss from fresh leaves.
///
/// The denominator is floored at 1e-2 so that near-zero gradients are
/// compared absolutely (at 1e-6 for the 1e-4 bound) instead of dividing
/// noise by noise.
pub fn grad_check(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>,
) -> f64 {
    // Analytic gradients.
    let mut tape: Tape<f64> = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &ids).expect("forward build");
    tape.backward(loss).expect("backward");
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad_tensor(id).into_data())
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> f64 {
        let mut tape: Tape<f64> = Tape::new();
        let ids: Vec<TensorId> = perturbed
            .iter()
            .map(|t| tape.leaf(t.clone(), false))
            .collect();
        let loss = build(&mut tape, &ids).expect("forward eval");
        tape.value(loss).data()[0]
    };

    let mut worst = 0.0f64;
    for (which, input) in inputs.iter().enumerate() {
        for elem in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[elem] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[elem] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let a = analytic[which][elem];
            let denom = a.abs().max(numeric.abs()).max(1e-2);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

/// Convenience: dot the output against a fixed random probe so the FD
/// loss exercises every output element with distinct weights.
pub fn probe_loss(tape: &mut Tape<f64>, out: TensorId, probe: &Tensor<f64>) -> Result<TensorId> {
    let p = tape.constant(probe.clone());
    let prod = tape.mul(out, p)?;
    Ok(tape.sum_all(prod))
}
