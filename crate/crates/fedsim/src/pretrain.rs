//! Initialization strategies: random schemes, checkpoint warm-starts, and
//! a denoising-autoencoder pretext pre-trainer for the model's hidden
//! stack.
//!
//! # Checkpoint format
//!
//! Little-endian binary, bit-exact across platforms:
//!
//! ```text
//! magic            4 bytes  "FSCK"
//! version          u32      currently 1
//! spec_hash        u64      ModelSpec::spec_hash of the saved model
//! stats_momentum   f64
//! param_count      u64
//! params           f64 * param_count
//! stats_len        u64      flattened BN running stats (mean,var per layer)
//! stats            f64 * stats_len
//! ```

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{
    draw_layer_weights, init_params, Batch, InitScheme, Mode, ModelSpec, ModelState,
};
use crate::numkit::{Mat64, RngStream, Vec64};
use crate::optim::{OptimizerConfig, OptimizerState};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

const CHECKPOINT_MAGIC: [u8; 4] = *b"FSCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Settings for the denoising-autoencoder pretext task.
#[derive(Clone, Debug)]
pub struct SslConfig {
    pub epochs: usize,
    pub lr: f64,
    pub noise_std: f64,
    pub batch_size: usize,
    pub scheme: InitScheme,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            epochs: 30,
            lr: 0.01,
            noise_std: 0.1,
            batch_size: 32,
            scheme: InitScheme::KaimingNormal,
        }
    }
}

/// How to produce the starting model of a run.
#[derive(Clone, Debug)]
pub enum InitStrategy {
    Random { scheme: InitScheme },
    Checkpoint { path: PathBuf },
    SslAutoencoder(SslConfig),
}

/// Per-epoch reconstruction losses from a pretext run.
#[derive(Clone, Debug, Default)]
pub struct SslReport {
    pub epoch_losses: Vec<f64>,
}

/// Trains the model's hidden stack (plus a temporary linear decoder) to
/// reconstruct clean inputs from noise-corrupted ones, then returns the
/// encoder weights with a freshly re-randomized classification head. The
/// decoder is discarded.
pub fn ssl_pretrain(
    spec: &ModelSpec,
    unlabeled: &Dataset,
    cfg: &SslConfig,
    rng: &mut RngStream,
) -> Result<(ModelState, SslReport)> {
    spec.validate()?;
    if spec.hidden_dims.is_empty() {
        return Err(Error::Validation(
            "ssl pretraining needs at least one hidden layer".into(),
        ));
    }
    if unlabeled.dim() != spec.input_dim {
        return Err(Error::Dimension(format!(
            "unlabeled data has dim {}, model expects {}",
            unlabeled.dim(),
            spec.input_dim
        )));
    }
    if spec.input_dim < 2 {
        return Err(Error::Validation(
            "the reconstruction head needs input_dim >= 2".into(),
        ));
    }
    if cfg.batch_size < 1 {
        return Err(Error::Validation("ssl batch_size must be >= 1".into()));
    }

    // Encoder stack plus a linear reconstruction head of width input_dim.
    let ae_spec = ModelSpec {
        input_dim: spec.input_dim,
        num_classes: spec.input_dim,
        hidden_dims: spec.hidden_dims.clone(),
        activation: spec.activation,
        norm_kind: spec.norm_kind,
    };
    let mut ae = init_params(&ae_spec, cfg.scheme, rng)?;
    let mut optimizer = OptimizerState::new(&OptimizerConfig::adam(cfg.lr), ae.spec.param_count());

    let n = unlabeled.len();
    let mut report = SslReport::default();
    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue; // batch statistics are undefined on singletons
            }
            let clean = unlabeled.batch(chunk)?;
            let mut noisy = clean.features.clone();
            if cfg.noise_std > 0.0 {
                for v in noisy.as_mut_slice() {
                    *v += cfg.noise_std * rng.standard_normal();
                }
            }
            let batch = Batch::new(noisy, vec![0; chunk.len()])?;
            let (recon, cache) = ae.forward(&batch, Mode::Train)?;
            let (loss, dlogits) = mse_loss_grad(&recon, &clean.features);
            if !loss.is_finite() {
                return Err(Error::Validation(
                    "non-finite reconstruction loss during pretraining".into(),
                ));
            }
            let grad = ae.backward(&cache, &dlogits)?;
            optimizer.step(&mut ae.params, &grad, cfg.lr)?;
            epoch_loss += loss;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::Validation(format!(
                "no usable batches: {n} samples with batch_size {}",
                cfg.batch_size
            )));
        }
        report.epoch_losses.push(epoch_loss / batches as f64);
    }

    // Transplant the encoder into the classification spec; the hidden
    // layers occupy the same prefix of the flat vector in both layouts.
    let mut out = ModelState::zeroed(spec.clone())?;
    let target_layout = spec.layout();
    let hidden_layers = spec.hidden_dims.len();
    for layer in &target_layout.layers[..hidden_layers] {
        for seg in [
            Some(layer.w.clone()),
            Some(layer.b.clone()),
            layer.gain.clone(),
            layer.shift.clone(),
        ]
        .into_iter()
        .flatten()
        {
            for j in seg {
                out.params[j] = ae.params[j];
            }
        }
    }
    out.bn_stats = ae.bn_stats;
    out.stats_momentum = ae.stats_momentum;
    // Fresh classification head.
    let head = target_layout
        .layers
        .last()
        .expect("layout has a head layer");
    draw_layer_weights(&mut out.params, head, cfg.scheme, rng);
    Ok((out, report))
}

/// Mean squared reconstruction error and its gradient on the outputs.
fn mse_loss_grad(recon: &Mat64, target: &Mat64) -> (f64, Mat64) {
    let scale = 1.0 / (recon.rows() * recon.cols()) as f64;
    let mut grad = Mat64::zeros(recon.rows(), recon.cols());
    let mut loss = 0.0;
    for (i, (r, t)) in recon
        .as_slice()
        .iter()
        .zip(target.as_slice().iter())
        .enumerate()
    {
        let d = r - t;
        loss += d * d * scale;
        grad.as_mut_slice()[i] = 2.0 * d * scale;
    }
    (loss, grad)
}

/// Writes a bit-exact snapshot of the model to `path`.
pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&state.spec.spec_hash().to_le_bytes());
    buf.extend_from_slice(&state.stats_momentum.to_le_bytes());
    buf.extend_from_slice(&(state.params.len() as u64).to_le_bytes());
    for v in state.params.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let stats = state.bn_stats_flat();
    buf.extend_from_slice(&(stats.len() as u64).to_le_bytes());
    for v in stats.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(format!("writing checkpoint {}", path.display()), e))
}

struct ByteReader<'a> {
    path: &'a Path,
    bytes: Vec<u8>,
    pos: usize,
}

impl ByteReader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!("needed {n} bytes for {what} at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64_le(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64_le(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

/// Reads a checkpoint, verifying magic, version, and the spec hash against
/// `expected_spec`. No partial state is ever returned.
pub fn load_checkpoint(path: &Path, expected_spec: &ModelSpec) -> Result<ModelState> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
    let mut r = ByteReader {
        path,
        bytes,
        pos: 0,
    };

    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: u32::from_le_bytes(CHECKPOINT_MAGIC),
            found: u32::from_le_bytes(magic.try_into().expect("4 bytes")),
        });
    }
    let version = r.u32_le("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let hash = r.u64_le("spec hash")?;
    let expected_hash = expected_spec.spec_hash();
    if hash != expected_hash {
        return Err(Error::SpecHashMismatch {
            path: path.to_path_buf(),
            expected: expected_hash,
            found: hash,
        });
    }
    let stats_momentum = r.f64_le("stats momentum")?;
    let param_count = r.u64_le("param count")? as usize;
    if param_count != expected_spec.param_count() {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!(
                "parameter count {param_count} disagrees with spec count {}",
                expected_spec.param_count()
            ),
        });
    }
    let mut params = Vec::with_capacity(param_count);
    for _ in 0..param_count {
        params.push(r.f64_le("parameters")?);
    }
    let stats_len = r.u64_le("stats length")? as usize;
    let expected_stats: usize = expected_spec.bn_layer_dims().iter().map(|d| 2 * d).sum();
    if stats_len != expected_stats {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("stats length {stats_len}, spec expects {expected_stats}"),
        });
    }
    let mut stats = Vec::with_capacity(stats_len);
    for _ in 0..stats_len {
        stats.push(r.f64_le("running stats")?);
    }
    if r.pos != r.bytes.len() {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("{} unexpected trailing bytes", r.bytes.len() - r.pos),
        });
    }

    let mut state = ModelState::zeroed(expected_spec.clone())?;
    state.params = Vec64::from_vec(params);
    state.stats_momentum = stats_momentum;
    if stats_len > 0 {
        state.set_bn_stats_flat(&Vec64::from_vec(stats))?;
    }
    Ok(state)
}

/// Dispatches to the configured initialization. The unlabeled dataset is
/// required only by the SSL pretext.
pub fn initialize(
    strategy: &InitStrategy,
    spec: &ModelSpec,
    unlabeled: Option<&Dataset>,
    rng: &mut RngStream,
) -> Result<ModelState> {
    match strategy {
        InitStrategy::Random { scheme } => init_params(spec, *scheme, rng),
        InitStrategy::Checkpoint { path } => load_checkpoint(path, spec),
        InitStrategy::SslAutoencoder(cfg) => {
            let data = unlabeled.ok_or_else(|| {
                Error::Validation("ssl initialization needs an unlabeled dataset".into())
            })?;
            Ok(ssl_pretrain(spec, data, cfg, rng)?.0)
        }
    }
}
