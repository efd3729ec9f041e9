//! Losses, client-side optimizers, and learning-rate schedules for local
//! training.

use crate::error::{Error, Result};
use crate::numkit::{Mat64, Vec64};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
    Adam,
}

/// Hyper-parameters of a client optimizer; `OptimizerState` instantiates
/// these against a concrete parameter dimension.
#[derive(Clone, Debug)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn sgd_momentum(lr: f64, momentum: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::SgdMomentum,
            lr,
            momentum,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Validation(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Validation(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// One client's optimizer: hyper-parameters, step counter, and the moment
/// buffers (zero-initialized, sized to the model's parameter vector).
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr_base: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: usize,
    buf1: Vec64,
    buf2: Vec64,
}

impl OptimizerState {
    pub fn new(cfg: &OptimizerConfig, dim: usize) -> OptimizerState {
        let needs_buf1 = matches!(cfg.kind, OptimizerKind::SgdMomentum | OptimizerKind::Adam);
        let needs_buf2 = cfg.kind == OptimizerKind::Adam;
        OptimizerState {
            kind: cfg.kind,
            lr_base: cfg.lr,
            momentum: cfg.momentum,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            step_count: 0,
            buf1: Vec64::zeros(if needs_buf1 { dim } else { 0 }),
            buf2: Vec64::zeros(if needs_buf2 { dim } else { 0 }),
        }
    }

    /// Applies one update in place using `lr_now` (the scheduled rate for
    /// this step). Increments `step_count` by exactly one.
    pub fn step(&mut self, params: &mut Vec64, grad: &Vec64, lr_now: f64) -> Result<()> {
        if params.len() != grad.len() {
            return Err(Error::Dimension(format!(
                "params length {} but gradient length {}",
                params.len(),
                grad.len()
            )));
        }
        match self.kind {
            OptimizerKind::Sgd => {
                params.axpy(-lr_now, grad);
            }
            OptimizerKind::SgdMomentum => {
                if self.buf1.len() != params.len() {
                    return Err(Error::Dimension(
                        "momentum buffer does not match parameter length".into(),
                    ));
                }
                let m = self.momentum;
                for j in 0..params.len() {
                    self.buf1[j] = m * self.buf1[j] + grad[j];
                    params[j] -= lr_now * self.buf1[j];
                }
            }
            OptimizerKind::Adam => {
                if self.buf1.len() != params.len() {
                    return Err(Error::Dimension(
                        "moment buffers do not match parameter length".into(),
                    ));
                }
                let t = (self.step_count + 1) as i32;
                let (b1, b2) = (self.beta1, self.beta2);
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                for j in 0..params.len() {
                    self.buf1[j] = b1 * self.buf1[j] + (1.0 - b1) * grad[j];
                    self.buf2[j] = b2 * self.buf2[j] + (1.0 - b2) * grad[j] * grad[j];
                    let m_hat = self.buf1[j] / c1;
                    let v_hat = self.buf2[j] / c2;
                    params[j] -= lr_now * m_hat / (v_hat.sqrt() + self.epsilon);
                }
            }
        }
        self.step_count += 1;
        Ok(())
    }
}

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total_steps < 1 {
        return Err(Error::Validation("total_steps must be >= 1".into()));
    }
    if step > total_steps {
        return Err(Error::Validation(format!(
            "step {step} exceeds total_steps {total_steps}"
        )));
    }
    let frac = step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    WeightedFocal,
}

/// Loss selection plus the per-class weights and focusing exponent used by
/// the focal variant.
#[derive(Clone, Debug)]
pub struct LossConfig {
    pub kind: LossKind,
    pub class_weights: Vec64,
    pub gamma: f64,
}

impl LossConfig {
    pub fn cross_entropy(num_classes: usize) -> LossConfig {
        LossConfig {
            kind: LossKind::CrossEntropy,
            class_weights: Vec64::splat(1.0, num_classes),
            gamma: 0.0,
        }
    }

    pub fn weighted_focal(class_weights: Vec64, gamma: f64) -> Result<LossConfig> {
        if class_weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Validation("class weights must be positive".into()));
        }
        if gamma < 0.0 {
            return Err(Error::Validation(format!(
                "focal gamma must be nonnegative, got {gamma}"
            )));
        }
        Ok(LossConfig {
            kind: LossKind::WeightedFocal,
            class_weights,
            gamma,
        })
    }
}

/// Batch-mean loss and its exact gradient with respect to the logits.
///
/// Cross entropy: `-ln p_y`. Weighted focal:
/// `-w_y (1 - p_y)^gamma ln(p_y)` with `p = softmax(logits)`.
pub fn loss_and_grad(cfg: &LossConfig, logits: &Mat64, labels: &[usize]) -> Result<(f64, Mat64)> {
    let (bsz, classes) = (logits.rows(), logits.cols());
    if bsz != labels.len() {
        return Err(Error::Dimension(format!(
            "{bsz} logit rows but {} labels",
            labels.len()
        )));
    }
    if cfg.kind == LossKind::WeightedFocal && cfg.class_weights.len() != classes {
        return Err(Error::Dimension(format!(
            "{} class weights but {classes} classes",
            cfg.class_weights.len()
        )));
    }
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Validation(format!(
                "label {y} at row {r} out of range for {classes} classes"
            )));
        }
    }

    let mut total = 0.0;
    let mut dlogits = Mat64::zeros(bsz, classes);
    let inv_b = 1.0 / bsz as f64;
    let mut probs = vec![0.0; classes];
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (c, &v) in row.iter().enumerate() {
            probs[c] = (v - m).exp();
            z += probs[c];
        }
        for p in probs.iter_mut() {
            *p /= z;
        }
        // Clamp away log(0) without masking NaNs from overflowed logits.
        let mut q = probs[y];
        if q < 1e-300 {
            q = 1e-300;
        }
        match cfg.kind {
            LossKind::CrossEntropy => {
                total += -q.ln();
                for c in 0..classes {
                    let indicator = if c == y { 1.0 } else { 0.0 };
                    dlogits.set(r, c, (probs[c] - indicator) * inv_b);
                }
            }
            LossKind::WeightedFocal => {
                let w = cfg.class_weights[y];
                let gamma = cfg.gamma;
                let one_minus = 1.0 - q;
                total += -w * one_minus.powf(gamma) * q.ln();
                // dL/dq, then chain through dq/dz_c = q (1{c=y} - p_c).
                let dldq = if gamma == 0.0 {
                    -w / q
                } else {
                    w * gamma * one_minus.powf(gamma - 1.0) * q.ln() - w * one_minus.powf(gamma) / q
                };
                for c in 0..classes {
                    let indicator = if c == y { 1.0 } else { 0.0 };
                    dlogits.set(r, c, dldq * q * (indicator - probs[c]) * inv_b);
                }
            }
        }
    }
    Ok((total * inv_b, dlogits))
}

/// Per-class weights proportional to inverse frequency:
/// `N / (num_classes * count_c)` with counts clamped to at least one,
/// normalized so the weights average to 1.
pub fn inverse_frequency_weights(labels: &[usize], num_classes: usize) -> Vec64 {
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        if y < num_classes {
            counts[y] += 1;
        }
    }
    if labels.is_empty() {
        return Vec64::splat(1.0, num_classes);
    }
    let n = labels.len() as f64;
    let mut w: Vec<f64> = counts
        .iter()
        .map(|&c| n / (num_classes as f64 * c.max(1) as f64))
        .collect();
    let mean = w.iter().sum::<f64>() / num_classes as f64;
    for v in &mut w {
        *v /= mean;
    }
    Vec64::from_vec(w)
}
