//! Desk-scale differentiable model zoo: softmax regression and MLPs with
//! pluggable normalization, manual backpropagation, and fan-based random
//! initialization.
//!
//! Parameters live in one flat [`Vec64`] with a canonical layer-major
//! ordering so that parameter arithmetic elsewhere (averaging, control
//! variates, optimizer buffers) never needs to know the architecture:
//! for each layer, weights (row-major, `out_dim x in_dim`), then biases,
//! then — on hidden layers only — norm gains and norm shifts where the
//! norm kind has them. The output layer is always a plain linear layer.
//! Batch-norm running statistics are not trainable and are kept next to
//! the parameters in [`ModelState::bn_stats`].

use crate::error::{Error, Result};
use crate::numkit::{Mat64, RngStream, Vec64};
use std::ops::Range;

/// Epsilon inside activation-normalization denominators (batch/layer norm).
pub const NORM_EPS: f64 = 1e-5;
/// Default momentum for batch-norm running statistics.
pub const DEFAULT_STATS_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    None,
    BatchNorm,
    LayerNorm,
    WeightStandardized,
}

/// Architecture description. Empty `hidden_dims` means softmax regression.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub num_classes: usize,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub norm_kind: NormKind,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 1 {
            return Err(Error::Validation("input_dim must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Validation("num_classes must be >= 2".into()));
        }
        if self.hidden_dims.iter().any(|&d| d < 1) {
            return Err(Error::Validation("hidden dims must be >= 1".into()));
        }
        Ok(())
    }

    /// Exact number of trainable scalars, norm parameters included.
    pub fn param_count(&self) -> usize {
        ParamLayout::new(self).total
    }

    /// Widths of the hidden layers that carry batch-norm running stats.
    pub fn bn_layer_dims(&self) -> Vec<usize> {
        if self.norm_kind == NormKind::BatchNorm {
            self.hidden_dims.clone()
        } else {
            Vec::new()
        }
    }

    /// 64-bit FNV-1a over the canonical shape encoding; used to guard
    /// checkpoints against shape mismatches.
    pub fn spec_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let eat = |h: &mut u64, x: u64| {
            for b in x.to_le_bytes() {
                *h ^= b as u64;
                *h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        eat(&mut h, self.input_dim as u64);
        eat(&mut h, self.num_classes as u64);
        eat(&mut h, self.hidden_dims.len() as u64);
        for &d in &self.hidden_dims {
            eat(&mut h, d as u64);
        }
        eat(
            &mut h,
            match self.activation {
                Activation::Relu => 1,
                Activation::Tanh => 2,
            },
        );
        eat(
            &mut h,
            match self.norm_kind {
                NormKind::None => 1,
                NormKind::BatchNorm => 2,
                NormKind::LayerNorm => 3,
                NormKind::WeightStandardized => 4,
            },
        );
        h
    }

    pub(crate) fn layout(&self) -> ParamLayout {
        ParamLayout::new(self)
    }
}

/// Offsets of one layer's tensors inside the flat parameter vector.
#[derive(Clone, Debug)]
pub(crate) struct LayerLayout {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Range<usize>,
    pub b: Range<usize>,
    pub gain: Option<Range<usize>>,
    pub shift: Option<Range<usize>>,
}

#[derive(Clone, Debug)]
pub(crate) struct ParamLayout {
    /// Hidden layers in order, then the output layer.
    pub layers: Vec<LayerLayout>,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(spec: &ModelSpec) -> ParamLayout {
        let mut layers = Vec::with_capacity(spec.hidden_dims.len() + 1);
        let mut dims = Vec::with_capacity(spec.hidden_dims.len() + 2);
        dims.push(spec.input_dim);
        dims.extend_from_slice(&spec.hidden_dims);
        dims.push(spec.num_classes);

        let mut off = 0;
        let mut range = |len: usize| {
            let r = off..off + len;
            off = r.end;
            r
        };
        for l in 0..dims.len() - 1 {
            let (in_dim, out_dim) = (dims[l], dims[l + 1]);
            let is_hidden = l + 2 < dims.len();
            let w = range(in_dim * out_dim);
            let b = range(out_dim);
            let (gain, shift) = if is_hidden {
                match spec.norm_kind {
                    NormKind::BatchNorm | NormKind::LayerNorm => {
                        (Some(range(out_dim)), Some(range(out_dim)))
                    }
                    NormKind::WeightStandardized => (Some(range(out_dim)), None),
                    NormKind::None => (None, None),
                }
            } else {
                (None, None)
            };
            layers.push(LayerLayout {
                in_dim,
                out_dim,
                w,
                b,
                gain,
                shift,
            });
        }
        ParamLayout { layers, total: off }
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnLayerStats {
    pub mean: Vec64,
    pub var: Vec64,
}

/// Parameters plus normalization running state for one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub spec: ModelSpec,
    pub params: Vec64,
    pub bn_stats: Vec<BnLayerStats>,
    pub stats_momentum: f64,
}

impl ModelState {
    /// All-zero parameters with fresh running stats. Mostly for tests and
    /// as the assembly point for checkpoint/pretraining code.
    pub fn zeroed(spec: ModelSpec) -> Result<ModelState> {
        spec.validate()?;
        let total = spec.param_count();
        let bn_stats = spec
            .bn_layer_dims()
            .iter()
            .map(|&d| BnLayerStats {
                mean: Vec64::zeros(d),
                var: Vec64::splat(1.0, d),
            })
            .collect();
        Ok(ModelState {
            spec,
            params: Vec64::zeros(total),
            bn_stats,
            stats_momentum: DEFAULT_STATS_MOMENTUM,
        })
    }

    /// Flattened running stats (per BN layer: means then variances).
    /// Empty for models without batch norm.
    pub fn bn_stats_flat(&self) -> Vec64 {
        let mut out = Vec::new();
        for s in &self.bn_stats {
            out.extend_from_slice(s.mean.as_slice());
            out.extend_from_slice(s.var.as_slice());
        }
        Vec64::from_vec(out)
    }

    pub fn set_bn_stats_flat(&mut self, flat: &Vec64) -> Result<()> {
        let expected: usize = self.bn_stats.iter().map(|s| 2 * s.mean.len()).sum();
        if flat.len() != expected {
            return Err(Error::Dimension(format!(
                "running stats length {} does not match expected {expected}",
                flat.len()
            )));
        }
        let mut off = 0;
        for s in &mut self.bn_stats {
            let d = s.mean.len();
            for j in 0..d {
                s.mean[j] = flat[off + j];
            }
            off += d;
            for j in 0..d {
                let v = flat[off + j];
                if !(v > 0.0) {
                    return Err(Error::Validation(format!(
                        "running variance must stay positive, got {v}"
                    )));
                }
                s.var[j] = v;
            }
            off += d;
        }
        Ok(())
    }
}

/// A minibatch of feature rows and class labels.
#[derive(Clone, Debug)]
pub struct Batch {
    pub features: Mat64,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Mat64, labels: Vec<usize>) -> Result<Batch> {
        if features.rows() == 0 {
            return Err(Error::Validation(
                "batch must hold at least one sample".into(),
            ));
        }
        if features.rows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        Ok(Batch { features, labels })
    }

    pub fn size(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    XavierUniform,
    KaimingNormal,
}

/// Draws fresh parameters: weights per scheme with fan-based scaling,
/// zero biases, unit norm gains, zero shifts, and unit running variances.
pub fn init_params(
    spec: &ModelSpec,
    scheme: InitScheme,
    rng: &mut RngStream,
) -> Result<ModelState> {
    let mut state = ModelState::zeroed(spec.clone())?;
    let layout = spec.layout();
    for layer in &layout.layers {
        draw_layer_weights(&mut state.params, layer, scheme, rng);
        if let Some(g) = &layer.gain {
            for j in g.clone() {
                state.params[j] = 1.0;
            }
        }
        // biases and shifts stay zero
    }
    Ok(state)
}

pub(crate) fn draw_layer_weights(
    params: &mut Vec64,
    layer: &LayerLayout,
    scheme: InitScheme,
    rng: &mut RngStream,
) {
    match scheme {
        InitScheme::XavierUniform => {
            let a = (6.0 / (layer.in_dim + layer.out_dim) as f64).sqrt();
            for j in layer.w.clone() {
                params[j] = (2.0 * rng.next_f64() - 1.0) * a;
            }
        }
        InitScheme::KaimingNormal => {
            let std = (2.0 / layer.in_dim as f64).sqrt();
            for j in layer.w.clone() {
                params[j] = std * rng.standard_normal();
            }
        }
    }
}

/// Per-hidden-layer intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
struct LayerCache {
    /// Layer input, batch x in_dim.
    input: Mat64,
    /// Normalized pre-affine values (batch/layer norm only).
    xhat: Option<Mat64>,
    /// BN: per-feature batch variance. LN: per-sample variance.
    var: Vec<f64>,
    /// Pre-activation values (after norm affine where present).
    y: Mat64,
    /// Post-activation values.
    a: Mat64,
    /// Weight-standardization row cache.
    ws: Option<WsCache>,
}

#[derive(Clone, Debug)]
struct WsCache {
    /// Effective (standardized, gain-scaled) weight rows.
    w_hat: Mat64,
    /// Standardized rows before the gain factor.
    u: Mat64,
    /// Per-row standard deviation of the raw weights.
    sd: Vec<f64>,
}

/// Everything the backward pass needs from one forward call.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    mode: Mode,
    layers: Vec<LayerCache>,
    head_input: Mat64,
}

impl ForwardCache {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Smallest |pre-activation| fed to the hidden nonlinearity. Finite-
    /// difference gradient checks of ReLU models are only meaningful when
    /// this stays well above the probe step, since the loss is not
    /// differentiable at the kink.
    pub fn min_preactivation_margin(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.y.as_slice().iter())
            .fold(f64::INFINITY, |acc, v| acc.min(v.abs()))
    }
}

impl ModelState {
    /// Runs the network. Train mode normalizes with batch statistics and
    /// folds them into the running stats; eval mode uses running stats and
    /// leaves the state untouched.
    pub fn forward(&mut self, batch: &Batch, mode: Mode) -> Result<(Mat64, ForwardCache)> {
        let (logits, cache, batch_stats) = self.forward_impl(batch, mode)?;
        if mode == Mode::Train {
            let m = self.stats_momentum;
            for (stats, fresh) in self.bn_stats.iter_mut().zip(batch_stats) {
                let (mu, var) = fresh.expect("train forward computes BN batch stats");
                for j in 0..stats.mean.len() {
                    stats.mean[j] = (1.0 - m) * stats.mean[j] + m * mu[j];
                    stats.var[j] = (1.0 - m) * stats.var[j] + m * var[j];
                }
            }
        }
        Ok((logits, cache))
    }

    /// Eval-mode logits without touching any state; shares the exact code
    /// path of `forward(.., Mode::Eval)`.
    pub fn predict(&self, batch: &Batch) -> Result<Mat64> {
        Ok(self.forward_impl(batch, Mode::Eval)?.0)
    }

    /// Predicted class per row (lowest index wins ties).
    pub fn predict_classes(&self, batch: &Batch) -> Result<Vec<usize>> {
        let logits = self.predict(batch)?;
        (0..logits.rows())
            .map(|r| crate::numkit::argmax(logits.row(r)))
            .collect()
    }

    #[allow(clippy::type_complexity)]
    fn forward_impl(
        &self,
        batch: &Batch,
        mode: Mode,
    ) -> Result<(Mat64, ForwardCache, Vec<Option<(Vec<f64>, Vec<f64>)>>)> {
        let spec = &self.spec;
        if batch.features.cols() != spec.input_dim {
            return Err(Error::Dimension(format!(
                "batch features have {} columns, model expects {}",
                batch.features.cols(),
                spec.input_dim
            )));
        }
        if self.params.len() != spec.param_count() {
            return Err(Error::Dimension(format!(
                "parameter vector length {} does not match spec count {}",
                self.params.len(),
                spec.param_count()
            )));
        }
        let layout = spec.layout();
        let bsz = batch.size();
        let p = self.params.as_slice();

        let mut layers = Vec::with_capacity(spec.hidden_dims.len());
        let mut batch_stats = Vec::with_capacity(self.bn_stats.len());
        let mut x = batch.features.clone();

        for (l, layer) in layout.layers[..layout.layers.len() - 1].iter().enumerate() {
            let h = layer.out_dim;
            let mut ws = None;
            let mut z = Mat64::zeros(bsz, h);
            match spec.norm_kind {
                NormKind::WeightStandardized => {
                    let cache = standardize_rows(p, layer);
                    for b in 0..bsz {
                        let xr = x.row(b);
                        for j in 0..h {
                            let wr = cache.w_hat.row(j);
                            let mut acc = p[layer.b.start + j];
                            for i in 0..layer.in_dim {
                                acc += wr[i] * xr[i];
                            }
                            z.set(b, j, acc);
                        }
                    }
                    ws = Some(cache);
                }
                _ => {
                    for b in 0..bsz {
                        let xr = x.row(b);
                        for j in 0..h {
                            let wr = &p[layer.w.start + j * layer.in_dim
                                ..layer.w.start + (j + 1) * layer.in_dim];
                            let mut acc = p[layer.b.start + j];
                            for i in 0..layer.in_dim {
                                acc += wr[i] * xr[i];
                            }
                            z.set(b, j, acc);
                        }
                    }
                }
            }

            let (y, xhat, var) = match spec.norm_kind {
                NormKind::None | NormKind::WeightStandardized => (z.clone(), None, Vec::new()),
                NormKind::BatchNorm => {
                    let (mu, var) = if mode == Mode::Train {
                        if bsz < 2 {
                            return Err(Error::Validation(
                                "batch norm in train mode needs batch size >= 2".into(),
                            ));
                        }
                        let mut mu = vec![0.0; h];
                        let mut var = vec![0.0; h];
                        for j in 0..h {
                            for b in 0..bsz {
                                mu[j] += z.get(b, j);
                            }
                            mu[j] /= bsz as f64;
                            for b in 0..bsz {
                                let d = z.get(b, j) - mu[j];
                                var[j] += d * d;
                            }
                            var[j] /= bsz as f64;
                        }
                        batch_stats.push(Some((mu.clone(), var.clone())));
                        (mu, var)
                    } else {
                        let s = &self.bn_stats[batch_stats.len()];
                        batch_stats.push(None);
                        (s.mean.as_slice().to_vec(), s.var.as_slice().to_vec())
                    };
                    let gain = layer.gain.clone().expect("BN layer has gains");
                    let shift = layer.shift.clone().expect("BN layer has shifts");
                    let mut xh = Mat64::zeros(bsz, h);
                    let mut y = Mat64::zeros(bsz, h);
                    for j in 0..h {
                        let inv = 1.0 / (var[j] + NORM_EPS).sqrt();
                        let (g, s) = (p[gain.start + j], p[shift.start + j]);
                        for b in 0..bsz {
                            let v = (z.get(b, j) - mu[j]) * inv;
                            xh.set(b, j, v);
                            y.set(b, j, g * v + s);
                        }
                    }
                    (y, Some(xh), var)
                }
                NormKind::LayerNorm => {
                    let gain = layer.gain.clone().expect("LN layer has gains");
                    let shift = layer.shift.clone().expect("LN layer has shifts");
                    let mut mu = vec![0.0; bsz];
                    let mut var = vec![0.0; bsz];
                    let mut xh = Mat64::zeros(bsz, h);
                    let mut y = Mat64::zeros(bsz, h);
                    for b in 0..bsz {
                        let zr = z.row(b);
                        mu[b] = zr.iter().sum::<f64>() / h as f64;
                        var[b] =
                            zr.iter().map(|v| (v - mu[b]) * (v - mu[b])).sum::<f64>() / h as f64;
                        let inv = 1.0 / (var[b] + NORM_EPS).sqrt();
                        for j in 0..h {
                            let v = (zr[j] - mu[b]) * inv;
                            xh.set(b, j, v);
                            y.set(b, j, p[gain.start + j] * v + p[shift.start + j]);
                        }
                    }
                    (y, Some(xh), var)
                }
            };

            let mut a = Mat64::zeros(bsz, h);
            for b in 0..bsz {
                for j in 0..h {
                    a.set(b, j, apply_activation(spec.activation, y.get(b, j)));
                }
            }

            layers.push(LayerCache {
                input: x,
                xhat,
                var,
                y,
                a: a.clone(),
                ws,
            });
            x = a;
            let _ = l;
        }

        // Output layer: plain linear.
        let head = layout.layers.last().expect("layout has a head layer");
        let mut logits = Mat64::zeros(bsz, head.out_dim);
        for b in 0..bsz {
            let xr = x.row(b);
            for c in 0..head.out_dim {
                let wr = &p[head.w.start + c * head.in_dim..head.w.start + (c + 1) * head.in_dim];
                let mut acc = p[head.b.start + c];
                for i in 0..head.in_dim {
                    acc += wr[i] * xr[i];
                }
                logits.set(b, c, acc);
            }
        }

        let cache = ForwardCache {
            mode,
            layers,
            head_input: x,
        };
        Ok((logits, cache, batch_stats))
    }

    /// Backpropagates `dloss/dlogits` through the cached forward pass and
    /// returns the gradient in the canonical flat parameter ordering.
    /// Gradients flow exactly through the normalization, including batch
    /// statistics and the weight-standardization reparameterization.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Mat64) -> Result<Vec64> {
        if cache.mode != Mode::Train {
            return Err(Error::Validation(
                "backward requires a cache from a train-mode forward".into(),
            ));
        }
        let spec = &self.spec;
        let layout = spec.layout();
        let bsz = cache.head_input.rows();
        if dlogits.rows() != bsz || dlogits.cols() != spec.num_classes {
            return Err(Error::Dimension(format!(
                "dlogits is {}x{}, expected {}x{}",
                dlogits.rows(),
                dlogits.cols(),
                bsz,
                spec.num_classes
            )));
        }
        let p = self.params.as_slice();
        let mut grad = Vec64::zeros(layout.total);

        // Head layer.
        let head = layout.layers.last().expect("layout has a head layer");
        let mut dx = Mat64::zeros(bsz, head.in_dim);
        {
            let g = grad.as_mut_slice();
            for b in 0..bsz {
                let xr = cache.head_input.row(b);
                for c in 0..head.out_dim {
                    let d = dlogits.get(b, c);
                    g[head.b.start + c] += d;
                    let woff = head.w.start + c * head.in_dim;
                    for i in 0..head.in_dim {
                        g[woff + i] += d * xr[i];
                    }
                }
            }
            for b in 0..bsz {
                for i in 0..head.in_dim {
                    let mut acc = 0.0;
                    for c in 0..head.out_dim {
                        acc += dlogits.get(b, c) * p[head.w.start + c * head.in_dim + i];
                    }
                    dx.set(b, i, acc);
                }
            }
        }

        // Hidden layers, last to first. `dx` always holds dloss/d(layer output).
        for (l, layer) in layout.layers[..layout.layers.len() - 1]
            .iter()
            .enumerate()
            .rev()
        {
            let lc = &cache.layers[l];
            let h = layer.out_dim;

            // Through the activation.
            let mut dy = Mat64::zeros(bsz, h);
            for b in 0..bsz {
                for j in 0..h {
                    let d = dx.get(b, j)
                        * activation_derivative(spec.activation, lc.y.get(b, j), lc.a.get(b, j));
                    dy.set(b, j, d);
                }
            }

            // Through the normalization to dz.
            let dz = match spec.norm_kind {
                NormKind::None | NormKind::WeightStandardized => dy,
                NormKind::BatchNorm => {
                    let xh = lc.xhat.as_ref().expect("BN cache has xhat");
                    let gain = layer.gain.clone().expect("BN layer has gains");
                    let shift = layer.shift.clone().expect("BN layer has shifts");
                    let g = grad.as_mut_slice();
                    let mut dz = Mat64::zeros(bsz, h);
                    for j in 0..h {
                        let mut dgamma = 0.0;
                        let mut dbeta = 0.0;
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        let gamma = p[gain.start + j];
                        for b in 0..bsz {
                            let dyv = dy.get(b, j);
                            dgamma += dyv * xh.get(b, j);
                            dbeta += dyv;
                            let dxh = dyv * gamma;
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh.get(b, j);
                        }
                        g[gain.start + j] += dgamma;
                        g[shift.start + j] += dbeta;
                        let inv = 1.0 / (lc.var[j] + NORM_EPS).sqrt();
                        let n = bsz as f64;
                        for b in 0..bsz {
                            let dxh = dy.get(b, j) * gamma;
                            let v = inv / n * (n * dxh - sum_dxh - xh.get(b, j) * sum_dxh_xh);
                            dz.set(b, j, v);
                        }
                    }
                    dz
                }
                NormKind::LayerNorm => {
                    let xh = lc.xhat.as_ref().expect("LN cache has xhat");
                    let gain = layer.gain.clone().expect("LN layer has gains");
                    let shift = layer.shift.clone().expect("LN layer has shifts");
                    let g = grad.as_mut_slice();
                    let mut dz = Mat64::zeros(bsz, h);
                    for b in 0..bsz {
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..h {
                            let dyv = dy.get(b, j);
                            g[gain.start + j] += dyv * xh.get(b, j);
                            g[shift.start + j] += dyv;
                            let dxh = dyv * p[gain.start + j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh.get(b, j);
                        }
                        let inv = 1.0 / (lc.var[b] + NORM_EPS).sqrt();
                        let n = h as f64;
                        for j in 0..h {
                            let dxh = dy.get(b, j) * p[gain.start + j];
                            let v = inv / n * (n * dxh - sum_dxh - xh.get(b, j) * sum_dxh_xh);
                            dz.set(b, j, v);
                        }
                    }
                    dz
                }
            };

            // Through the linear map: weight/bias grads plus dx for the
            // layer below.
            let mut dx_next = Mat64::zeros(bsz, layer.in_dim);
            match spec.norm_kind {
                NormKind::WeightStandardized => {
                    let ws = lc.ws.as_ref().expect("SWS cache present");
                    let gain = layer.gain.clone().expect("SWS layer has gains");
                    // Accumulate dL/d(effective rows) first.
                    let mut dw_hat = Mat64::zeros(h, layer.in_dim);
                    let g = grad.as_mut_slice();
                    for b in 0..bsz {
                        let xr = lc.input.row(b);
                        for j in 0..h {
                            let d = dz.get(b, j);
                            g[layer.b.start + j] += d;
                            let row = dw_hat.row_mut(j);
                            for i in 0..layer.in_dim {
                                row[i] += d * xr[i];
                            }
                        }
                    }
                    for b in 0..bsz {
                        for i in 0..layer.in_dim {
                            let mut acc = 0.0;
                            for j in 0..h {
                                acc += dz.get(b, j) * ws.w_hat.get(j, i);
                            }
                            dx_next.set(b, i, acc);
                        }
                    }
                    // Pull dL/d(effective rows) back to raw weights and gains.
                    let n = layer.in_dim as f64;
                    let scale = 1.0 / n.sqrt();
                    for j in 0..h {
                        let sd = ws.sd[j];
                        let dwh = dw_hat.row(j);
                        let u = ws.u.row(j);
                        let dg: f64 =
                            dwh.iter().zip(u.iter()).map(|(a, b)| a * b).sum::<f64>() * scale;
                        g[gain.start + j] += dg;
                        if sd == 0.0 {
                            continue; // constant raw row: effective row is identically zero
                        }
                        let mean_a = dwh.iter().sum::<f64>() / n;
                        let mean_au = dwh.iter().zip(u.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                        let factor = p[gain.start + j] * scale / sd;
                        let woff = layer.w.start + j * layer.in_dim;
                        for i in 0..layer.in_dim {
                            g[woff + i] += factor * (dwh[i] - mean_a - u[i] * mean_au);
                        }
                    }
                }
                _ => {
                    let g = grad.as_mut_slice();
                    for b in 0..bsz {
                        let xr = lc.input.row(b);
                        for j in 0..h {
                            let d = dz.get(b, j);
                            g[layer.b.start + j] += d;
                            let woff = layer.w.start + j * layer.in_dim;
                            for i in 0..layer.in_dim {
                                g[woff + i] += d * xr[i];
                            }
                        }
                    }
                    for b in 0..bsz {
                        for i in 0..layer.in_dim {
                            let mut acc = 0.0;
                            for j in 0..h {
                                acc += dz.get(b, j) * p[layer.w.start + j * layer.in_dim + i];
                            }
                            dx_next.set(b, i, acc);
                        }
                    }
                }
            }
            dx = dx_next;
        }

        Ok(grad)
    }
}

fn apply_activation(act: Activation, v: f64) -> f64 {
    match act {
        Activation::Relu => {
            if v > 0.0 {
                v
            } else {
                0.0
            }
        }
        Activation::Tanh => v.tanh(),
    }
}

fn activation_derivative(act: Activation, y: f64, a: f64) -> f64 {
    match act {
        Activation::Relu => {
            if y > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Tanh => 1.0 - a * a,
    }
}

/// Standardizes each raw weight row to zero mean and unit variance, scaled
/// by `gain / sqrt(fan_in)`. A constant row standardizes to zeros, which
/// keeps the map well-defined; the denominator deliberately omits an
/// epsilon so the result is invariant to positive rescaling of a row.
fn standardize_rows(params: &[f64], layer: &LayerLayout) -> WsCache {
    let (h, n) = (layer.out_dim, layer.in_dim);
    let gain = layer.gain.clone().expect("SWS layer has gains");
    let mut w_hat = Mat64::zeros(h, n);
    let mut u = Mat64::zeros(h, n);
    let mut sd = vec![0.0; h];
    let scale = 1.0 / (n as f64).sqrt();
    for j in 0..h {
        let row = &params[layer.w.start + j * n..layer.w.start + (j + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / n as f64;
        let s = var.sqrt();
        sd[j] = s;
        if s > 0.0 {
            let g = params[gain.start + j] * scale;
            for i in 0..n {
                let uv = (row[i] - mean) / s;
                u.set(j, i, uv);
                w_hat.set(j, i, g * uv);
            }
        }
    }
    WsCache { w_hat, u, sd }
}

/// Mean, over clients and batch-norm layers, of the L2 distance between
/// each client's running means and the global running means.
pub fn bn_stat_mismatch(client_states: &[ModelState], global: &ModelState) -> Result<f64> {
    if client_states.is_empty() {
        return Err(Error::Validation("bn_stat_mismatch needs clients".into()));
    }
    if global.spec.norm_kind != NormKind::BatchNorm || global.bn_stats.is_empty() {
        return Err(Error::Validation(
            "bn_stat_mismatch requires a batch-norm model".into(),
        ));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for (ci, client) in client_states.iter().enumerate() {
        if client.spec != global.spec {
            return Err(Error::Validation(format!(
                "client {ci} spec differs from the global spec"
            )));
        }
        for (cs, gs) in client.bn_stats.iter().zip(global.bn_stats.iter()) {
            acc += cs.mean.sub(&gs.mean)?.l2_norm();
            count += 1;
        }
    }
    Ok(acc / count as f64)
}
