//! The architecture x initialization x aggregation sweep.
//!
//! Cells run independently (rayon dispatches them to the worker pool) and
//! every random stream derives from (seed, stable cell coordinates), so
//! the emitted rows are identical for any worker count or scheduling. One
//! centralized baseline is shared by all strategies of the same
//! (model, init, seed).

use super::config::{DatasetSpec, LossChoice, NamedInit, NamedModel, ResolvedExperiment};
use super::results::ResultRow;
use crate::data::{
    dirichlet_partition, load_idx, synth_blobs, train_eval_split, Dataset, Partition,
};
use crate::error::Result;
use crate::federation::{
    centralized_baseline, run_federation, FederationConfig, FederationHistory,
};
use crate::models::{ModelSpec, ModelState};
use crate::numkit::{RngStream, Vec64};
use crate::optim::{inverse_frequency_weights, LossConfig};
use crate::pretrain::initialize;
use rayon::prelude::*;

// Stream-id layout: everything a run draws is keyed by the master seed
// plus one of these stable channels.
const STREAM_DATA: u64 = 0x10;
const STREAM_SPLIT: u64 = 0x11;
const STREAM_PARTITION: u64 = 0x12;
const STREAM_INIT_BASE: u64 = 0x0001_0000;
const STREAM_CENTRAL_BASE: u64 = 0x0100_0000;
const STREAM_FED_BASE: u64 = 0x0200_0000;
const AXIS: u64 = 0x100; // up to 256 entries per grid axis

fn init_stream(mi: usize, ii: usize) -> u64 {
    STREAM_INIT_BASE + mi as u64 * AXIS + ii as u64
}

fn central_stream(mi: usize, ii: usize) -> u64 {
    STREAM_CENTRAL_BASE + mi as u64 * AXIS + ii as u64
}

fn fed_stream(mi: usize, ii: usize, si: usize) -> u64 {
    STREAM_FED_BASE + (mi as u64 * AXIS + ii as u64) * AXIS + si as u64
}

/// Everything derived from one master seed and shared by all cells.
struct SeedData {
    seed: u64,
    train: Dataset,
    test: Dataset,
    partition: Partition,
}

fn build_seed_data(exp: &ResolvedExperiment, seed: u64) -> Result<SeedData> {
    let ds = match &exp.dataset {
        DatasetSpec::Synthetic {
            num_classes,
            dim,
            n_per_class,
            separation,
            noise_std,
        } => {
            let mut rng = RngStream::new(seed, STREAM_DATA);
            synth_blobs(
                *num_classes,
                *dim,
                *n_per_class,
                *separation,
                *noise_std,
                &mut rng,
            )?
        }
        DatasetSpec::Idx { images, labels } => load_idx(images, labels)?,
    };
    let mut split_rng = RngStream::new(seed, STREAM_SPLIT);
    let (train, test) = train_eval_split(&ds, exp.eval_fraction, &mut split_rng)?;
    let mut part_rng = RngStream::new(seed, STREAM_PARTITION);
    let partition = dirichlet_partition(
        &train,
        exp.num_clients,
        exp.alpha,
        exp.min_size,
        &mut part_rng,
    )?;
    Ok(SeedData {
        seed,
        train,
        test,
        partition,
    })
}

fn loss_config(exp: &ResolvedExperiment, train: &Dataset) -> Result<LossConfig> {
    match &exp.loss {
        LossChoice::CrossEntropy => Ok(LossConfig::cross_entropy(train.num_classes)),
        LossChoice::WeightedFocal {
            gamma,
            class_weights,
        } => {
            let weights = match class_weights {
                Some(w) => Vec64::from_vec(w.clone()),
                None => inverse_frequency_weights(&train.labels, train.num_classes),
            };
            LossConfig::weighted_focal(weights, *gamma)
        }
    }
}

fn model_spec(model: &NamedModel, train: &Dataset) -> ModelSpec {
    ModelSpec {
        input_dim: train.dim(),
        num_classes: train.num_classes,
        hidden_dims: model.hidden_dims.clone(),
        activation: model.activation,
        norm_kind: model.norm_kind,
    }
}

fn federation_config(exp: &ResolvedExperiment, loss: LossConfig) -> FederationConfig {
    FederationConfig {
        total_rounds: exp.rounds,
        local_steps: exp.local_steps,
        batch_size: exp.batch_size,
        optimizer: exp.optimizer.clone(),
        loss,
        client_schedule: exp.client_schedule,
        schedule_horizon: exp.schedule_horizon,
        client_lr_min: exp.client_lr_min,
        share_running_stats: exp.share_running_stats,
        persist_client_optimizer: exp.persist_client_optimizer,
    }
}

fn build_init(
    init: &NamedInit,
    spec: &ModelSpec,
    train: &Dataset,
    seed: u64,
    mi: usize,
    ii: usize,
) -> Result<ModelState> {
    let mut rng = RngStream::new(seed, init_stream(mi, ii));
    initialize(&init.strategy, spec, Some(train), &mut rng)
}

/// Outcome of one full sweep.
#[derive(Debug, Default)]
pub struct GridReport {
    pub rows: Vec<ResultRow>,
    pub federated_runs: usize,
    pub baseline_runs: usize,
    pub failures: Vec<String>,
}

struct BaselineOutcome {
    history: FederationHistory,
}

/// Runs every (model x init x strategy x seed) cell of the experiment and
/// returns one row per round per cell. A failing cell contributes a
/// single row with an error status and does not stop the sweep.
pub fn run_grid(exp: &ResolvedExperiment) -> Result<GridReport> {
    let seed_data: Vec<SeedData> = exp
        .seeds
        .iter()
        .map(|&seed| build_seed_data(exp, seed))
        .collect::<Result<_>>()?;
    let (n_models, n_inits, n_strategies, n_seeds) = (
        exp.models.len(),
        exp.inits.len(),
        exp.strategies.len(),
        seed_data.len(),
    );

    // Baselines: one per (model, init, seed), shared across strategies.
    let baseline_jobs: Vec<(usize, usize, usize)> = (0..n_models)
        .flat_map(|mi| (0..n_inits).flat_map(move |ii| (0..n_seeds).map(move |di| (mi, ii, di))))
        .collect();
    let baselines: Vec<std::result::Result<BaselineOutcome, String>> = baseline_jobs
        .par_iter()
        .map(|&(mi, ii, di)| {
            let sd = &seed_data[di];
            let model = &exp.models[mi];
            let init = &exp.inits[ii];
            let spec = model_spec(model, &sd.train);
            let run = || -> Result<BaselineOutcome> {
                let loss = loss_config(exp, &sd.train)?;
                let state = build_init(init, &spec, &sd.train, sd.seed, mi, ii)?;
                let cfg = federation_config(exp, loss);
                let rng = RngStream::new(sd.seed, central_stream(mi, ii));
                let (history, _) = centralized_baseline(&sd.train, &sd.test, state, cfg, &rng)?;
                Ok(BaselineOutcome { history })
            };
            run().map_err(|e| {
                format!(
                    "baseline {}/{} seed {}: {e}",
                    model.name, init.name, sd.seed
                )
            })
        })
        .collect();
    let baseline_index = move |mi: usize, ii: usize, di: usize| (mi * n_inits + ii) * n_seeds + di;

    // Federated cells.
    let cell_jobs: Vec<(usize, usize, usize, usize)> = (0..n_models)
        .flat_map(|mi| {
            (0..n_inits).flat_map(move |ii| {
                (0..n_strategies).flat_map(move |si| (0..n_seeds).map(move |di| (mi, ii, si, di)))
            })
        })
        .collect();
    let cell_outcomes: Vec<std::result::Result<FederationHistory, String>> = cell_jobs
        .par_iter()
        .map(|&(mi, ii, si, di)| {
            let sd = &seed_data[di];
            let model = &exp.models[mi];
            let init = &exp.inits[ii];
            let strategy = &exp.strategies[si];
            if let Err(e) = &baselines[baseline_index(mi, ii, di)] {
                return Err(format!(
                    "cell {}/{}/{} seed {}: baseline failed: {e}",
                    model.name, init.name, strategy.name, sd.seed
                ));
            }
            let spec = model_spec(model, &sd.train);
            let run = || -> Result<FederationHistory> {
                let loss = loss_config(exp, &sd.train)?;
                let state = build_init(init, &spec, &sd.train, sd.seed, mi, ii)?;
                let cfg = federation_config(exp, loss);
                let rng = RngStream::new(sd.seed, fed_stream(mi, ii, si));
                let (history, _) = run_federation(
                    &sd.train,
                    &sd.test,
                    &sd.partition,
                    state,
                    strategy.config.clone(),
                    cfg,
                    &rng,
                )?;
                Ok(history)
            };
            run().map_err(|e| {
                format!(
                    "cell {}/{}/{} seed {}: {e}",
                    model.name, init.name, strategy.name, sd.seed
                )
            })
        })
        .collect();

    // Assemble rows in canonical cell order.
    let mut report = GridReport {
        baseline_runs: baselines.iter().filter(|b| b.is_ok()).count(),
        ..GridReport::default()
    };
    for (job_idx, &(mi, ii, si, di)) in cell_jobs.iter().enumerate() {
        let sd = &seed_data[di];
        let model = &exp.models[mi];
        let init = &exp.inits[ii];
        let strategy = &exp.strategies[si];
        match &cell_outcomes[job_idx] {
            Ok(history) => {
                report.federated_runs += 1;
                let central = &baselines[baseline_index(mi, ii, di)]
                    .as_ref()
                    .expect("cells with failed baselines are errors")
                    .history;
                for (r, metrics) in history.rounds.iter().enumerate() {
                    let central_bal = central
                        .rounds
                        .get(r)
                        .map(|m| m.balanced_accuracy)
                        .unwrap_or(0.0);
                    report.rows.push(ResultRow {
                        arch: model.name.clone(),
                        init: init.name.clone(),
                        aggregation: strategy.name.clone(),
                        seed: sd.seed,
                        round: metrics.round,
                        accuracy: metrics.accuracy,
                        balanced_accuracy: metrics.balanced_accuracy,
                        gap_to_central: metrics.balanced_accuracy - central_bal,
                        drift: metrics.drift,
                        bn_mismatch: metrics.bn_mismatch,
                        cumulative_bytes: metrics.cumulative_bytes,
                        status: "ok".into(),
                    });
                }
            }
            Err(message) => {
                report.failures.push(message.clone());
                report.rows.push(ResultRow {
                    arch: model.name.clone(),
                    init: init.name.clone(),
                    aggregation: strategy.name.clone(),
                    seed: sd.seed,
                    round: 0,
                    accuracy: 0.0,
                    balanced_accuracy: 0.0,
                    gap_to_central: 0.0,
                    drift: 0.0,
                    bn_mismatch: None,
                    cumulative_bytes: 0,
                    status: format!("error: {message}"),
                });
            }
        }
    }
    Ok(report)
}
