//! Central finite-difference gradient checking.
//!
//! These helpers evaluate only the forward pass and the loss, never
//! `backward`, so they stay usable as an independent check of the analytic
//! gradients.

use crate::error::Result;
use crate::models::{Batch, Mode, ModelState};
use crate::numkit::Vec64;
use crate::optim::{loss_and_grad, LossConfig};

/// Train-mode loss of `state` on `batch`; works on a clone so the caller's
/// running statistics are untouched.
pub fn training_loss(state: &ModelState, batch: &Batch, loss: &LossConfig) -> Result<f64> {
    let mut scratch = state.clone();
    let (logits, _) = scratch.forward(batch, Mode::Train)?;
    Ok(loss_and_grad(loss, &logits, &batch.labels)?.0)
}

/// Central finite differences of the training loss over every parameter.
pub fn finite_difference_gradient(
    state: &ModelState,
    batch: &Batch,
    loss: &LossConfig,
    h: f64,
) -> Result<Vec64> {
    let mut grad = Vec64::zeros(state.params.len());
    for j in 0..state.params.len() {
        let mut plus = state.clone();
        plus.params[j] += h;
        let mut minus = state.clone();
        minus.params[j] -= h;
        grad[j] =
            (training_loss(&plus, batch, loss)? - training_loss(&minus, batch, loss)?) / (2.0 * h);
    }
    Ok(grad)
}

/// Largest elementwise relative error between two gradients, with a small
/// absolute floor so near-zero pairs do not blow up the ratio.
pub fn max_relative_error(a: &Vec64, b: &Vec64) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    let mut worst = 0.0_f64;
    for j in 0..a.len() {
        let denom = a[j].abs().max(b[j].abs()).max(1e-6);
        worst = worst.max((a[j] - b[j]).abs() / denom);
    }
    worst
}
