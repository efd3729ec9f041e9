//! JSON experiment configuration: parsing, presets, and validation.
//!
//! Top-level keys: `dataset`, `federation`, `model`/`models`,
//! `init`/`inits`, `strategy`/`strategies`, `optimizer`, `loss`, `seeds`,
//! `output`. The singular forms describe one run; the plural forms span a
//! grid. Validation errors name the offending JSON path.

use crate::error::{Error, Result};
use crate::federation::{
    ClientSchedule, ScaffoldWeighting, ScheduleHorizon, ServerSchedule, StrategyConfig,
};
use crate::models::{Activation, InitScheme, NormKind};
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::pretrain::{InitStrategy, SslConfig};
use serde::Deserialize;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawExperimentFile {
    pub dataset: Option<RawDataset>,
    pub federation: Option<RawFederation>,
    pub model: Option<RawModel>,
    pub models: Option<Vec<RawModel>>,
    pub init: Option<RawInit>,
    pub inits: Option<Vec<RawInit>>,
    pub strategy: Option<RawStrategy>,
    pub strategies: Option<Vec<RawStrategy>>,
    pub optimizer: Option<RawOptimizer>,
    pub loss: Option<RawLoss>,
    pub seeds: Option<Vec<u64>>,
    pub output: Option<RawOutput>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RawDataset {
    Synthetic {
        num_classes: usize,
        dim: usize,
        n_per_class: usize,
        separation: f64,
        noise_std: f64,
    },
    Idx {
        images: String,
        labels: String,
    },
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawFederation {
    pub num_clients: usize,
    pub alpha: f64,
    pub min_size: Option<usize>,
    pub rounds: Option<usize>,
    pub local_steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub eval_fraction: Option<f64>,
    pub share_running_stats: Option<bool>,
    pub persist_client_optimizer: Option<bool>,
    pub client_lr_schedule: Option<String>,
    pub schedule_horizon: Option<String>,
    pub client_lr_min: Option<f64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawModel {
    pub name: Option<String>,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub activation: Option<String>,
    pub norm_kind: Option<String>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawInit {
    pub kind: String,
    pub name: Option<String>,
    pub scheme: Option<String>,
    pub path: Option<String>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub noise_std: Option<f64>,
    pub batch_size: Option<usize>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawStrategy {
    pub kind: String,
    pub server_lr: Option<f64>,
    pub server_momentum: Option<f64>,
    pub schedule: Option<String>,
    pub weighting: Option<String>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawOptimizer {
    pub kind: String,
    pub lr: f64,
    pub momentum: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawLoss {
    pub kind: String,
    pub gamma: Option<f64>,
    pub class_weights: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawOutput {
    pub dir: String,
}

/// The two shipped hyper-parameter profiles. A preset fills in the
/// training schedule, optimizer, and loss wherever the config file left
/// them out; explicit fields always win.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// 20 rounds, 200 local steps, batch 64, Adam 5e-4, weighted focal loss.
    #[value(name = "fedisic-like")]
    FedisicLike,
    /// 20 rounds, 50 local steps, batch 128, SGD-momentum 0.01/0.9,
    /// cross-entropy.
    #[value(name = "organ-like")]
    OrganLike,
}

impl Preset {
    pub fn apply(&self, raw: &mut RawExperimentFile) {
        let (rounds, steps, batch) = match self {
            Preset::FedisicLike => (20, 200, 64),
            Preset::OrganLike => (20, 50, 128),
        };
        if let Some(fed) = raw.federation.as_mut() {
            fed.rounds.get_or_insert(rounds);
            fed.local_steps.get_or_insert(steps);
            fed.batch_size.get_or_insert(batch);
        }
        if raw.optimizer.is_none() {
            raw.optimizer = Some(match self {
                Preset::FedisicLike => RawOptimizer {
                    kind: "adam".into(),
                    lr: 5e-4,
                    momentum: None,
                    beta1: None,
                    beta2: None,
                    epsilon: None,
                },
                Preset::OrganLike => RawOptimizer {
                    kind: "sgd_momentum".into(),
                    lr: 0.01,
                    momentum: Some(0.9),
                    beta1: None,
                    beta2: None,
                    epsilon: None,
                },
            });
        }
        if raw.loss.is_none() {
            raw.loss = Some(match self {
                Preset::FedisicLike => RawLoss {
                    kind: "weighted_focal".into(),
                    gamma: Some(2.0),
                    class_weights: None,
                },
                Preset::OrganLike => RawLoss {
                    kind: "cross_entropy".into(),
                    gamma: None,
                    class_weights: None,
                },
            });
        }
    }
}

/// Which dataset a run draws from.
#[derive(Clone, Debug)]
pub enum DatasetSpec {
    Synthetic {
        num_classes: usize,
        dim: usize,
        n_per_class: usize,
        separation: f64,
        noise_std: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

/// Model axes of the grid; concrete input/output dims come from the
/// dataset at run time.
#[derive(Clone, Debug)]
pub struct NamedModel {
    pub name: String,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub norm_kind: NormKind,
}

#[derive(Clone, Debug)]
pub struct NamedInit {
    pub name: String,
    pub strategy: InitStrategy,
}

#[derive(Clone, Debug)]
pub struct NamedStrategy {
    pub name: String,
    pub config: StrategyConfig,
}

/// Loss selection; `Auto` weights are computed from the pooled training
/// labels of each seed.
#[derive(Clone, Debug)]
pub enum LossChoice {
    CrossEntropy,
    WeightedFocal {
        gamma: f64,
        class_weights: Option<Vec<f64>>,
    },
}

/// Fully validated experiment description.
#[derive(Clone, Debug)]
pub struct ResolvedExperiment {
    pub dataset: DatasetSpec,
    pub num_clients: usize,
    pub alpha: f64,
    pub min_size: usize,
    pub rounds: usize,
    pub local_steps: usize,
    pub batch_size: usize,
    pub eval_fraction: f64,
    pub share_running_stats: bool,
    pub persist_client_optimizer: bool,
    pub client_schedule: ClientSchedule,
    pub schedule_horizon: ScheduleHorizon,
    pub client_lr_min: f64,
    pub models: Vec<NamedModel>,
    pub inits: Vec<NamedInit>,
    pub strategies: Vec<NamedStrategy>,
    pub optimizer: OptimizerConfig,
    pub loss: LossChoice,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

/// Resolves a lone `model` section (used by the pretrain tool).
pub fn resolve_model_section(raw: &RawModel) -> Result<NamedModel> {
    resolve_model(raw, "model")
}

/// Resolves a lone `init` section (used by the pretrain tool).
pub fn resolve_init_section(raw: &RawInit) -> Result<NamedInit> {
    resolve_init(raw, "init")
}

pub fn load_raw(path: &Path) -> Result<RawExperimentFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config {
        field: path.display().to_string(),
        message: e.to_string(),
    })
}

fn required<T>(value: Option<T>, field: &str) -> Result<T> {
    value.ok_or_else(|| Error::config(field, "missing required field"))
}

fn parse_activation(raw: Option<&str>, field: &str) -> Result<Activation> {
    match raw.unwrap_or("relu") {
        "relu" => Ok(Activation::Relu),
        "tanh" => Ok(Activation::Tanh),
        other => Err(Error::config(
            field,
            format!("unknown activation `{other}`"),
        )),
    }
}

fn parse_norm(raw: Option<&str>, field: &str) -> Result<NormKind> {
    match raw.unwrap_or("none") {
        "none" => Ok(NormKind::None),
        "batch_norm" => Ok(NormKind::BatchNorm),
        "layer_norm" => Ok(NormKind::LayerNorm),
        "weight_standardized" => Ok(NormKind::WeightStandardized),
        other => Err(Error::config(field, format!("unknown norm_kind `{other}`"))),
    }
}

fn parse_scheme(raw: Option<&str>, field: &str) -> Result<InitScheme> {
    match raw.unwrap_or("kaiming_normal") {
        "kaiming_normal" => Ok(InitScheme::KaimingNormal),
        "xavier_uniform" => Ok(InitScheme::XavierUniform),
        other => Err(Error::config(field, format!("unknown scheme `{other}`"))),
    }
}

fn resolve_model(raw: &RawModel, field: &str) -> Result<NamedModel> {
    let activation = parse_activation(raw.activation.as_deref(), &format!("{field}.activation"))?;
    let norm_kind = parse_norm(raw.norm_kind.as_deref(), &format!("{field}.norm_kind"))?;
    let name = raw.name.clone().unwrap_or_else(|| {
        let base = if raw.hidden_dims.is_empty() {
            "softmax".to_string()
        } else {
            format!(
                "mlp{}",
                raw.hidden_dims
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join("x")
            )
        };
        let suffix = match norm_kind {
            NormKind::None => "",
            NormKind::BatchNorm => "-bn",
            NormKind::LayerNorm => "-ln",
            NormKind::WeightStandardized => "-sws",
        };
        format!("{base}{suffix}")
    });
    Ok(NamedModel {
        name,
        hidden_dims: raw.hidden_dims.clone(),
        activation,
        norm_kind,
    })
}

fn resolve_init(raw: &RawInit, field: &str) -> Result<NamedInit> {
    match raw.kind.as_str() {
        "random" => Ok(NamedInit {
            name: raw.name.clone().unwrap_or_else(|| "random".into()),
            strategy: InitStrategy::Random {
                scheme: parse_scheme(raw.scheme.as_deref(), &format!("{field}.scheme"))?,
            },
        }),
        "checkpoint" => {
            let path = PathBuf::from(required(raw.path.clone(), &format!("{field}.path"))?);
            if !path.exists() {
                return Err(Error::config(
                    format!("{field}.path"),
                    format!("checkpoint `{}` does not exist", path.display()),
                ));
            }
            Ok(NamedInit {
                name: raw.name.clone().unwrap_or_else(|| "checkpoint".into()),
                strategy: InitStrategy::Checkpoint { path },
            })
        }
        "ssl_autoencoder" => {
            let defaults = SslConfig::default();
            Ok(NamedInit {
                name: raw.name.clone().unwrap_or_else(|| "ssl".into()),
                strategy: InitStrategy::SslAutoencoder(SslConfig {
                    epochs: raw.epochs.unwrap_or(defaults.epochs),
                    lr: raw.lr.unwrap_or(defaults.lr),
                    noise_std: raw.noise_std.unwrap_or(defaults.noise_std),
                    batch_size: raw.batch_size.unwrap_or(defaults.batch_size),
                    scheme: parse_scheme(raw.scheme.as_deref(), &format!("{field}.scheme"))?,
                }),
            })
        }
        other => Err(Error::config(
            format!("{field}.kind"),
            format!("unknown init kind `{other}`"),
        )),
    }
}

fn resolve_strategy(raw: &RawStrategy, field: &str) -> Result<NamedStrategy> {
    let config = match raw.kind.as_str() {
        "fedavg" => StrategyConfig::FedAvg,
        "fedopt" => StrategyConfig::FedOpt {
            server_lr: raw.server_lr.unwrap_or(1.0),
            server_momentum: raw.server_momentum.unwrap_or(0.6),
            schedule: match raw.schedule.as_deref().unwrap_or("cosine") {
                "cosine" => ServerSchedule::Cosine,
                "constant" => ServerSchedule::Constant,
                other => {
                    return Err(Error::config(
                        format!("{field}.schedule"),
                        format!("unknown schedule `{other}`"),
                    ))
                }
            },
        },
        "scaffold" => StrategyConfig::Scaffold {
            server_lr: raw.server_lr.unwrap_or(1.0),
            weighting: match raw.weighting.as_deref().unwrap_or("uniform") {
                "uniform" => ScaffoldWeighting::Uniform,
                "sample_weighted" => ScaffoldWeighting::SampleWeighted,
                other => {
                    return Err(Error::config(
                        format!("{field}.weighting"),
                        format!("unknown weighting `{other}`"),
                    ))
                }
            },
        },
        other => {
            return Err(Error::config(
                format!("{field}.kind"),
                format!("unknown strategy kind `{other}`"),
            ))
        }
    };
    config
        .validate()
        .map_err(|e| Error::config(field, e.to_string()))?;
    Ok(NamedStrategy {
        name: config.name().to_string(),
        config,
    })
}

fn resolve_optimizer(raw: &RawOptimizer, field: &str) -> Result<OptimizerConfig> {
    let kind = match raw.kind.as_str() {
        "sgd" => OptimizerKind::Sgd,
        "sgd_momentum" => OptimizerKind::SgdMomentum,
        "adam" => OptimizerKind::Adam,
        other => {
            return Err(Error::config(
                format!("{field}.kind"),
                format!("unknown optimizer kind `{other}`"),
            ))
        }
    };
    let cfg = OptimizerConfig {
        kind,
        lr: raw.lr,
        momentum: raw.momentum.unwrap_or(0.9),
        beta1: raw.beta1.unwrap_or(0.9),
        beta2: raw.beta2.unwrap_or(0.999),
        epsilon: raw.epsilon.unwrap_or(1e-8),
    };
    cfg.validate()
        .map_err(|e| Error::config(field, e.to_string()))?;
    Ok(cfg)
}

fn resolve_loss(raw: Option<&RawLoss>, field: &str) -> Result<LossChoice> {
    let Some(raw) = raw else {
        return Ok(LossChoice::CrossEntropy);
    };
    match raw.kind.as_str() {
        "cross_entropy" => Ok(LossChoice::CrossEntropy),
        "weighted_focal" => {
            let gamma = raw.gamma.unwrap_or(2.0);
            if gamma < 0.0 {
                return Err(Error::config(
                    format!("{field}.gamma"),
                    "gamma must be nonnegative",
                ));
            }
            if let Some(w) = &raw.class_weights {
                if w.iter().any(|&x| !(x > 0.0)) {
                    return Err(Error::config(
                        format!("{field}.class_weights"),
                        "class weights must be positive",
                    ));
                }
            }
            Ok(LossChoice::WeightedFocal {
                gamma,
                class_weights: raw.class_weights.clone(),
            })
        }
        other => Err(Error::config(
            format!("{field}.kind"),
            format!("unknown loss kind `{other}`"),
        )),
    }
}

fn resolve_dataset(raw: &RawDataset) -> Result<DatasetSpec> {
    match raw {
        RawDataset::Synthetic {
            num_classes,
            dim,
            n_per_class,
            separation,
            noise_std,
        } => {
            if *num_classes < 2 {
                return Err(Error::config("dataset.num_classes", "must be >= 2"));
            }
            if *dim < 1 || *n_per_class < 1 {
                return Err(Error::config("dataset", "dim and n_per_class must be >= 1"));
            }
            if *noise_std < 0.0 {
                return Err(Error::config("dataset.noise_std", "must be nonnegative"));
            }
            Ok(DatasetSpec::Synthetic {
                num_classes: *num_classes,
                dim: *dim,
                n_per_class: *n_per_class,
                separation: *separation,
                noise_std: *noise_std,
            })
        }
        RawDataset::Idx { images, labels } => {
            let images = PathBuf::from(images);
            let labels = PathBuf::from(labels);
            for (p, field) in [(&images, "dataset.images"), (&labels, "dataset.labels")] {
                if !p.exists() {
                    return Err(Error::config(
                        field,
                        format!("file `{}` does not exist", p.display()),
                    ));
                }
            }
            Ok(DatasetSpec::Idx { images, labels })
        }
    }
}

/// Validates a parsed file into a runnable experiment. With
/// `require_singular` (the `run` subcommand) the model/init/strategy
/// sections must be singular; `grid` accepts either form.
pub fn resolve(raw: &RawExperimentFile, require_singular: bool) -> Result<ResolvedExperiment> {
    let dataset = resolve_dataset(required(raw.dataset.as_ref(), "dataset")?)?;
    let fed = required(raw.federation.as_ref(), "federation")?;
    if fed.num_clients < 2 {
        return Err(Error::config("federation.num_clients", "must be >= 2"));
    }
    if !(fed.alpha > 0.0) {
        return Err(Error::config("federation.alpha", "must be positive"));
    }
    let rounds = required(fed.rounds, "federation.rounds")?;
    let local_steps = required(fed.local_steps, "federation.local_steps")?;
    let batch_size = required(fed.batch_size, "federation.batch_size")?;
    if batch_size < 1 {
        return Err(Error::config("federation.batch_size", "must be >= 1"));
    }
    let eval_fraction = fed.eval_fraction.unwrap_or(0.25);
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(Error::config(
            "federation.eval_fraction",
            "must be in (0, 1)",
        ));
    }
    let client_schedule = match fed.client_lr_schedule.as_deref().unwrap_or("cosine") {
        "cosine" => ClientSchedule::Cosine,
        "constant" => ClientSchedule::Constant,
        other => {
            return Err(Error::config(
                "federation.client_lr_schedule",
                format!("unknown schedule `{other}`"),
            ))
        }
    };
    let schedule_horizon = match fed.schedule_horizon.as_deref().unwrap_or("per_round") {
        "per_round" => ScheduleHorizon::PerRound,
        "global" => ScheduleHorizon::Global,
        other => {
            return Err(Error::config(
                "federation.schedule_horizon",
                format!("unknown horizon `{other}`"),
            ))
        }
    };

    let models: Vec<NamedModel> = match (&raw.model, &raw.models) {
        (Some(m), None) => vec![resolve_model(m, "model")?],
        (None, Some(ms)) if !require_singular => {
            if ms.is_empty() {
                return Err(Error::config("models", "must not be empty"));
            }
            ms.iter()
                .enumerate()
                .map(|(i, m)| resolve_model(m, &format!("models[{i}]")))
                .collect::<Result<_>>()?
        }
        (None, Some(_)) => {
            return Err(Error::config(
                "models",
                "this command takes a single `model` section",
            ))
        }
        (Some(_), Some(_)) => {
            return Err(Error::config(
                "model",
                "give either `model` or `models`, not both",
            ))
        }
        (None, None) => return Err(Error::config("model", "missing required section")),
    };
    let inits: Vec<NamedInit> = match (&raw.init, &raw.inits) {
        (Some(i), None) => vec![resolve_init(i, "init")?],
        (None, Some(is)) if !require_singular => {
            if is.is_empty() {
                return Err(Error::config("inits", "must not be empty"));
            }
            is.iter()
                .enumerate()
                .map(|(i, x)| resolve_init(x, &format!("inits[{i}]")))
                .collect::<Result<_>>()?
        }
        (None, Some(_)) => {
            return Err(Error::config(
                "inits",
                "this command takes a single `init` section",
            ))
        }
        (Some(_), Some(_)) => {
            return Err(Error::config(
                "init",
                "give either `init` or `inits`, not both",
            ))
        }
        (None, None) => return Err(Error::config("init", "missing required section")),
    };
    let strategies: Vec<NamedStrategy> = match (&raw.strategy, &raw.strategies) {
        (Some(s), None) => vec![resolve_strategy(s, "strategy")?],
        (None, Some(ss)) if !require_singular => {
            if ss.is_empty() {
                return Err(Error::config("strategies", "must not be empty"));
            }
            ss.iter()
                .enumerate()
                .map(|(i, s)| resolve_strategy(s, &format!("strategies[{i}]")))
                .collect::<Result<_>>()?
        }
        (None, Some(_)) => {
            return Err(Error::config(
                "strategies",
                "this command takes a single `strategy` section",
            ))
        }
        (Some(_), Some(_)) => {
            return Err(Error::config(
                "strategy",
                "give either `strategy` or `strategies`, not both",
            ))
        }
        (None, None) => return Err(Error::config("strategy", "missing required section")),
    };

    let optimizer = resolve_optimizer(required(raw.optimizer.as_ref(), "optimizer")?, "optimizer")?;
    let loss = resolve_loss(raw.loss.as_ref(), "loss")?;
    let seeds = required(raw.seeds.clone(), "seeds")?;
    if seeds.is_empty() {
        return Err(Error::config("seeds", "must not be empty"));
    }
    let output_dir = PathBuf::from(
        raw.output
            .as_ref()
            .map(|o| o.dir.clone())
            .unwrap_or_else(|| "out".into()),
    );

    Ok(ResolvedExperiment {
        dataset,
        num_clients: fed.num_clients,
        alpha: fed.alpha,
        min_size: fed.min_size.unwrap_or(10),
        rounds,
        local_steps,
        batch_size,
        eval_fraction,
        share_running_stats: fed.share_running_stats.unwrap_or(true),
        persist_client_optimizer: fed.persist_client_optimizer.unwrap_or(false),
        client_schedule,
        schedule_horizon,
        client_lr_min: fed.client_lr_min.unwrap_or(0.0),
        models,
        inits,
        strategies,
        optimizer,
        loss,
        seeds,
        output_dir,
    })
}
