//! The federated training engine: round orchestration, local updates, the
//! three aggregation strategies, and drift/communication accounting.
//!
//! Within a round every client owns its state and random stream, so local
//! updates may run on any number of worker threads without changing a
//! single bit of the result. Aggregation is a strict barrier executed by
//! one actor in client order.

use crate::data::{Dataset, Partition};
use crate::error::{Error, Result};
use crate::models::{bn_stat_mismatch, ModelState, NormKind};
use crate::numkit::{weighted_sum, RngStream, Vec64};
use crate::optim::{cosine_lr, loss_and_grad, LossConfig, OptimizerConfig, OptimizerState};
use rayon::prelude::*;

/// Schedule applied to the FedOpt server learning rate across rounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ServerSchedule {
    Constant,
    Cosine,
}

/// How SCAFFOLD combines client displacements at the server.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaffoldWeighting {
    Uniform,
    SampleWeighted,
}

/// Aggregation strategy plus its server-side hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum StrategyConfig {
    FedAvg,
    FedOpt {
        server_lr: f64,
        server_momentum: f64,
        schedule: ServerSchedule,
    },
    Scaffold {
        server_lr: f64,
        weighting: ScaffoldWeighting,
    },
}

impl StrategyConfig {
    /// Server SGD with momentum and a cosine-annealed server rate.
    pub fn fedopt_default() -> StrategyConfig {
        StrategyConfig::FedOpt {
            server_lr: 1.0,
            server_momentum: 0.6,
            schedule: ServerSchedule::Cosine,
        }
    }

    pub fn scaffold_default() -> StrategyConfig {
        StrategyConfig::Scaffold {
            server_lr: 1.0,
            weighting: ScaffoldWeighting::Uniform,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            StrategyConfig::FedAvg => "fedavg",
            StrategyConfig::FedOpt { .. } => "fedopt",
            StrategyConfig::Scaffold { .. } => "scaffold",
        }
    }

    pub fn is_scaffold(&self) -> bool {
        matches!(self, StrategyConfig::Scaffold { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            StrategyConfig::FedAvg => Ok(()),
            StrategyConfig::FedOpt {
                server_lr,
                server_momentum,
                ..
            } => {
                if !(*server_lr > 0.0) {
                    return Err(Error::Validation("server_lr must be positive".into()));
                }
                if !(0.0..1.0).contains(server_momentum) {
                    return Err(Error::Validation(
                        "server momentum must be in [0, 1)".into(),
                    ));
                }
                Ok(())
            }
            StrategyConfig::Scaffold { server_lr, .. } => {
                if !(*server_lr > 0.0) {
                    return Err(Error::Validation("server_lr must be positive".into()));
                }
                Ok(())
            }
        }
    }
}

/// Client learning-rate schedule within local training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClientSchedule {
    Constant,
    Cosine,
}

/// Horizon of the cosine schedule: restart every round, or anneal once
/// over all `total_rounds * local_steps` steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleHorizon {
    PerRound,
    Global,
}

/// Everything a round of local training needs to know.
#[derive(Clone, Debug)]
pub struct FederationConfig {
    pub total_rounds: usize,
    pub local_steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub client_schedule: ClientSchedule,
    pub schedule_horizon: ScheduleHorizon,
    pub client_lr_min: f64,
    /// Average batch-norm running statistics alongside the parameters.
    pub share_running_stats: bool,
    /// Keep optimizer moments across rounds instead of resetting at each
    /// broadcast.
    pub persist_client_optimizer: bool,
}

impl FederationConfig {
    pub fn new(
        total_rounds: usize,
        local_steps: usize,
        batch_size: usize,
        optimizer: OptimizerConfig,
        loss: LossConfig,
    ) -> FederationConfig {
        FederationConfig {
            total_rounds,
            local_steps,
            batch_size,
            optimizer,
            loss,
            client_schedule: ClientSchedule::Cosine,
            schedule_horizon: ScheduleHorizon::PerRound,
            client_lr_min: 0.0,
            share_running_stats: true,
            persist_client_optimizer: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size < 1 {
            return Err(Error::Validation("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Scheduled client learning rate for local step `step` of `round`.
    pub fn client_lr(&self, round: usize, step: usize) -> Result<f64> {
        match self.client_schedule {
            ClientSchedule::Constant => Ok(self.optimizer.lr),
            ClientSchedule::Cosine => match self.schedule_horizon {
                ScheduleHorizon::PerRound => cosine_lr(
                    step,
                    self.local_steps.max(1),
                    self.optimizer.lr,
                    self.client_lr_min,
                ),
                ScheduleHorizon::Global => cosine_lr(
                    round * self.local_steps + step,
                    (self.total_rounds * self.local_steps).max(1),
                    self.optimizer.lr,
                    self.client_lr_min,
                ),
            },
        }
    }

    /// Sum of the scheduled client rates over one round's local steps,
    /// scaled to the effective per-gradient displacement. Heavy-ball
    /// momentum moves parameters by roughly `lr / (1 - m)` per unit
    /// gradient, and the SCAFFOLD variate update divides a displacement
    /// by this quantity to recover a gradient estimate; without the
    /// scaling the variates overshoot by that factor and the corrections
    /// destabilize training.
    fn effective_lr_sum(&self, round: usize) -> Result<f64> {
        let mut total = 0.0;
        for k in 0..self.local_steps {
            total += self.client_lr(round, k)?;
        }
        if self.optimizer.kind == crate::optim::OptimizerKind::SgdMomentum {
            total /= 1.0 - self.optimizer.momentum;
        }
        Ok(total)
    }
}

/// One client's persistent state across rounds.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub client_id: usize,
    pub shard: Vec<usize>,
    pub optimizer: OptimizerState,
    /// SCAFFOLD's local control variate `c_i`; zero-initialized.
    pub control_variate: Option<Vec64>,
    pub rng: RngStream,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

impl ClientState {
    pub fn sample_count(&self) -> usize {
        self.shard.len()
    }
}

/// Server-side state between rounds.
#[derive(Clone, Debug)]
pub struct ServerState {
    pub model: ModelState,
    /// FedOpt momentum buffer, zero at round 0.
    pub momentum: Option<Vec64>,
    /// SCAFFOLD server control variate `c`, zero at round 0.
    pub control: Option<Vec64>,
    pub round: usize,
    pub total_rounds: usize,
}

/// What a client sends back after local training.
#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub new_params: Vec64,
    /// Flattened batch-norm running stats, when the model carries them.
    pub new_bn_stats: Option<Vec64>,
    pub sample_count: usize,
    /// SCAFFOLD's `c_i_plus - c_i`; filled during the variate update.
    pub control_delta: Option<Vec64>,
    pub local_loss_trace: Vec<f64>,
    pub bytes: u64,
}

/// Metrics recorded after each aggregation.
#[derive(Clone, Debug)]
pub struct RoundMetrics {
    /// 1-based round index.
    pub round: usize,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub mean_client_loss: f64,
    pub drift: f64,
    pub bn_mismatch: Option<f64>,
    pub cumulative_bytes: u64,
}

#[derive(Clone, Debug, Default)]
pub struct FederationHistory {
    pub rounds: Vec<RoundMetrics>,
}

impl FederationHistory {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.rounds.last().map(|r| r.accuracy)
    }

    pub fn final_balanced_accuracy(&self) -> Option<f64> {
        self.rounds.last().map(|r| r.balanced_accuracy)
    }

    pub fn mean_drift(&self) -> f64 {
        if self.rounds.is_empty() {
            return 0.0;
        }
        self.rounds.iter().map(|r| r.drift).sum::<f64>() / self.rounds.len() as f64
    }
}

fn comm_cost_for_correction(with_variate: bool, param_count: usize) -> u64 {
    let multiplier = if with_variate { 4 } else { 2 };
    multiplier * param_count as u64 * 8
}

/// Bytes exchanged per client per round (up plus down), assuming raw
/// 8-byte scalars: `2 * params` for FedAvg/FedOpt, `4 * params` for
/// SCAFFOLD which ships a control variate alongside the model each way.
pub fn comm_cost(strategy: &StrategyConfig, param_count: usize) -> u64 {
    comm_cost_for_correction(strategy.is_scaffold(), param_count)
}

/// Scalars a client must hold for the strategy: SCAFFOLD stores the model
/// plus its own and the server's control variates.
pub fn local_storage_scalars(strategy: &StrategyConfig, param_count: usize) -> usize {
    match strategy {
        StrategyConfig::Scaffold { .. } => 3 * param_count,
        _ => param_count,
    }
}

fn sample_weights(updates: &[ClientUpdate]) -> Result<Vec<f64>> {
    let total: usize = updates.iter().map(|u| u.sample_count).sum();
    if total == 0 {
        return Err(Error::Validation("updates carry zero samples".into()));
    }
    Ok(updates
        .iter()
        .map(|u| u.sample_count as f64 / total as f64)
        .collect())
}

/// Sample-weighted average of the client parameter vectors.
pub fn fedavg_aggregate(updates: &[ClientUpdate]) -> Result<Vec64> {
    if updates.is_empty() {
        return Err(Error::Validation("no client updates to aggregate".into()));
    }
    let weights = sample_weights(updates)?;
    let vectors: Vec<Vec64> = updates.iter().map(|u| u.new_params.clone()).collect();
    weighted_sum(&vectors, &weights)
}

fn aggregate_bn_stats(updates: &[ClientUpdate]) -> Result<Option<Vec64>> {
    if updates.iter().any(|u| u.new_bn_stats.is_none()) {
        return Ok(None);
    }
    let weights = sample_weights(updates)?;
    let vectors: Vec<Vec64> = updates
        .iter()
        .map(|u| u.new_bn_stats.clone().expect("checked above"))
        .collect();
    Ok(Some(weighted_sum(&vectors, &weights)?))
}

/// FedOpt server step: treats the sample-weighted mean client displacement
/// as a pseudo-gradient for server SGD with momentum, optionally cosine
/// annealing the server rate over the total rounds.
pub fn fedopt_aggregate(
    server: &mut ServerState,
    updates: &[ClientUpdate],
    server_lr: f64,
    server_momentum: f64,
    schedule: ServerSchedule,
) -> Result<()> {
    if updates.is_empty() {
        return Err(Error::Validation("no client updates to aggregate".into()));
    }
    let weights = sample_weights(updates)?;
    let x = &server.model.params;
    let mut delta = Vec64::zeros(x.len());
    for (u, &w) in updates.iter().zip(weights.iter()) {
        let diff = u.new_params.sub(x)?;
        delta.axpy(w, &diff);
    }
    let momentum = server.momentum.get_or_insert_with(|| Vec64::zeros(x.len()));
    momentum.scale(server_momentum);
    momentum.axpy(1.0, &delta);
    let eta = match schedule {
        ServerSchedule::Constant => server_lr,
        ServerSchedule::Cosine => {
            cosine_lr(server.round, server.total_rounds.max(1), server_lr, 0.0)?
        }
    };
    let step = momentum.clone();
    server.model.params.axpy(eta, &step);
    Ok(())
}

/// Mean L2 displacement of the client models from the broadcast
/// parameters, normalized by sqrt(dimension).
pub fn client_drift(updates: &[ClientUpdate], broadcast: &Vec64) -> Result<f64> {
    if updates.is_empty() {
        return Err(Error::Validation("client_drift needs updates".into()));
    }
    let mut acc = 0.0;
    for u in updates {
        acc += u.new_params.sub(broadcast)?.l2_norm();
    }
    Ok(acc / updates.len() as f64 / (broadcast.len() as f64).sqrt())
}

/// A federation mid-flight: server, clients, and the data they train on.
pub struct Federation<'a> {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub strategy: StrategyConfig,
    pub cfg: FederationConfig,
    train: &'a Dataset,
    test: &'a Dataset,
    cumulative_bytes: u64,
}

impl<'a> Federation<'a> {
    pub fn new(
        train: &'a Dataset,
        test: &'a Dataset,
        partition: &Partition,
        init_state: ModelState,
        strategy: StrategyConfig,
        cfg: FederationConfig,
        rng: &RngStream,
    ) -> Result<Federation<'a>> {
        strategy.validate()?;
        cfg.validate()?;
        init_state.spec.validate()?;
        if train.dim() != init_state.spec.input_dim || test.dim() != init_state.spec.input_dim {
            return Err(Error::Dimension(format!(
                "dataset dim {} does not match model input dim {}",
                train.dim(),
                init_state.spec.input_dim
            )));
        }
        let param_count = init_state.spec.param_count();
        let scaffold = strategy.is_scaffold();
        let clients: Vec<ClientState> = partition
            .client_indices
            .iter()
            .enumerate()
            .map(|(i, shard)| ClientState {
                client_id: i,
                shard: shard.clone(),
                optimizer: OptimizerState::new(&cfg.optimizer, param_count),
                control_variate: scaffold.then(|| Vec64::zeros(param_count)),
                rng: rng.substream(i as u64),
                bytes_sent: 0,
                bytes_received: 0,
            })
            .collect();
        if clients.is_empty() {
            return Err(Error::Validation("partition has no clients".into()));
        }
        Ok(Federation {
            server: ServerState {
                model: init_state,
                momentum: None,
                control: scaffold.then(|| Vec64::zeros(param_count)),
                round: 0,
                total_rounds: cfg.total_rounds,
            },
            clients,
            strategy,
            cfg,
            train,
            test,
            cumulative_bytes: 0,
        })
    }

    /// Broadcast, local training on every client (possibly in parallel),
    /// then the strategy's aggregation step and the round's metrics.
    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        let round = self.server.round;
        let broadcast = self.server.model.params.clone();
        let lr_sum = if self.strategy.is_scaffold() {
            let s = self.cfg.effective_lr_sum(round)?;
            if s == 0.0 {
                return Err(Error::Validation(
                    "scaffold variate update needs local_steps * lr > 0".into(),
                ));
            }
            s
        } else {
            0.0
        };
        let server_control = self.server.control.clone();

        let global = &self.server.model;
        let cfg = &self.cfg;
        let train = self.train;
        let mut updates: Vec<ClientUpdate> = self
            .clients
            .par_iter_mut()
            .map(|client| {
                let correction = match (&server_control, &client.control_variate) {
                    (Some(c), Some(ci)) => Some(c.sub(ci)?),
                    _ => None,
                };
                local_update(train, client, global, cfg, round, correction.as_ref())
            })
            .collect::<Result<_>>()?;

        let drift = client_drift(&updates, &broadcast)?;
        let mean_client_loss = {
            let per_client: Vec<f64> = updates
                .iter()
                .filter(|u| !u.local_loss_trace.is_empty())
                .map(|u| u.local_loss_trace.iter().sum::<f64>() / u.local_loss_trace.len() as f64)
                .collect();
            if per_client.is_empty() {
                0.0
            } else {
                per_client.iter().sum::<f64>() / per_client.len() as f64
            }
        };

        match self.strategy.clone() {
            StrategyConfig::FedAvg => {
                self.server.model.params = fedavg_aggregate(&updates)?;
            }
            StrategyConfig::FedOpt {
                server_lr,
                server_momentum,
                schedule,
            } => {
                fedopt_aggregate(
                    &mut self.server,
                    &updates,
                    server_lr,
                    server_momentum,
                    schedule,
                )?;
            }
            StrategyConfig::Scaffold {
                server_lr,
                weighting,
            } => {
                self.scaffold_update(&broadcast, &mut updates, server_lr, weighting, lr_sum)?;
            }
        }

        if self.cfg.share_running_stats {
            if let Some(stats) = aggregate_bn_stats(&updates)? {
                self.server.model.set_bn_stats_flat(&stats)?;
            }
        }

        let bn_mismatch = if self.server.model.spec.norm_kind == NormKind::BatchNorm {
            let client_states: Vec<ModelState> = updates
                .iter()
                .map(|u| {
                    let mut m = self.server.model.clone();
                    m.params = u.new_params.clone();
                    if let Some(stats) = &u.new_bn_stats {
                        m.set_bn_stats_flat(stats)?;
                    }
                    Ok(m)
                })
                .collect::<Result<_>>()?;
            Some(bn_stat_mismatch(&client_states, &self.server.model)?)
        } else {
            None
        };

        self.cumulative_bytes += updates.iter().map(|u| u.bytes).sum::<u64>();
        let (accuracy, balanced_accuracy) =
            crate::bench::metrics::evaluate(&self.server.model, self.test)?;

        self.server.round += 1;
        Ok(RoundMetrics {
            round: self.server.round,
            accuracy,
            balanced_accuracy,
            mean_client_loss,
            drift,
            bn_mismatch,
            cumulative_bytes: self.cumulative_bytes,
        })
    }

    /// SCAFFOLD: clients already trained against `c - c_i`; update every
    /// local variate with `c_i+ = c_i - c + (x - y_i) / (K * lr_mean)`,
    /// move the server model toward the client mean, and advance the
    /// server variate by the mean variate delta.
    fn scaffold_update(
        &mut self,
        broadcast: &Vec64,
        updates: &mut [ClientUpdate],
        server_lr: f64,
        weighting: ScaffoldWeighting,
        lr_sum: f64,
    ) -> Result<()> {
        let n = updates.len() as f64;
        let c = self
            .server
            .control
            .clone()
            .expect("scaffold server control is initialized");

        let mut mean_delta = Vec64::zeros(broadcast.len());
        for (client, update) in self.clients.iter_mut().zip(updates.iter_mut()) {
            let disp = broadcast.sub(&update.new_params)?; // x - y_i
            let mut delta = Vec64::zeros(broadcast.len());
            delta.axpy(-1.0, &c);
            delta.axpy(1.0 / lr_sum, &disp);
            let ci = client
                .control_variate
                .as_mut()
                .expect("scaffold clients carry variates");
            ci.axpy(1.0, &delta);
            mean_delta.axpy(1.0 / n, &delta);
            update.control_delta = Some(delta);
        }

        let weights = match weighting {
            ScaffoldWeighting::Uniform => vec![1.0 / n; updates.len()],
            ScaffoldWeighting::SampleWeighted => sample_weights(updates)?,
        };
        let mut direction = Vec64::zeros(broadcast.len());
        for (u, &w) in updates.iter().zip(weights.iter()) {
            let diff = u.new_params.sub(broadcast)?;
            direction.axpy(w, &diff);
        }
        self.server.model.params.axpy(server_lr, &direction);

        let control = self
            .server
            .control
            .as_mut()
            .expect("scaffold server control is initialized");
        control.axpy(1.0, &mean_delta);
        Ok(())
    }

    /// Runs all remaining rounds and hands back the history and model.
    pub fn run(mut self) -> Result<(FederationHistory, ModelState)> {
        let mut history = FederationHistory::default();
        while self.server.round < self.cfg.total_rounds {
            history.rounds.push(self.run_round()?);
        }
        Ok((history, self.server.model))
    }
}

/// Runs `cfg.local_steps` minibatch steps from the broadcast parameters,
/// sampling with replacement from the client's shard via the client's own
/// stream. When a SCAFFOLD correction (`c - c_i`) is present it is added
/// to every gradient before the optimizer step.
pub fn local_update(
    train: &Dataset,
    client: &mut ClientState,
    global: &ModelState,
    cfg: &FederationConfig,
    round: usize,
    correction: Option<&Vec64>,
) -> Result<ClientUpdate> {
    if client.shard.is_empty() {
        return Err(Error::Validation(format!(
            "client {} has an empty shard",
            client.client_id
        )));
    }
    let mut model = global.clone();
    let param_count = model.spec.param_count();
    if let Some(c) = correction {
        if c.len() != param_count {
            return Err(Error::Dimension(format!(
                "correction length {} but {param_count} parameters",
                c.len()
            )));
        }
    }
    if !cfg.persist_client_optimizer {
        client.optimizer = OptimizerState::new(&cfg.optimizer, param_count);
    }

    let mut trace = Vec::with_capacity(cfg.local_steps);
    for step in 0..cfg.local_steps {
        let indices: Vec<usize> = (0..cfg.batch_size)
            .map(|_| client.shard[client.rng.next_below(client.shard.len())])
            .collect();
        let batch = train.batch(&indices)?;
        let (logits, cache) = model.forward(&batch, crate::models::Mode::Train)?;
        let (loss, dlogits) = loss_and_grad(&cfg.loss, &logits, &batch.labels)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                client_id: client.client_id,
                round,
                step,
            });
        }
        let mut grad = model.backward(&cache, &dlogits)?;
        if let Some(c) = correction {
            grad.axpy(1.0, c);
        }
        let lr = cfg.client_lr(round, step)?;
        client.optimizer.step(&mut model.params, &grad, lr)?;
        // A saturated softmax can keep the loss finite while the weights
        // overflow, so the parameters are checked too.
        if model.params.check_finite("client parameters").is_err() {
            return Err(Error::Divergence {
                client_id: client.client_id,
                round,
                step,
            });
        }
        trace.push(loss);
    }

    let bytes = comm_cost_for_correction(correction.is_some(), param_count);
    client.bytes_received += bytes / 2;
    client.bytes_sent += bytes - bytes / 2;

    let new_bn_stats = if model.bn_stats.is_empty() {
        None
    } else {
        Some(model.bn_stats_flat())
    };
    Ok(ClientUpdate {
        client_id: client.client_id,
        new_params: model.params,
        new_bn_stats,
        sample_count: client.shard.len(),
        control_delta: None,
        local_loss_trace: trace,
        bytes,
    })
}

/// Full pipeline: build a federation, run every round, return the history
/// and the final global model.
#[allow(clippy::too_many_arguments)]
pub fn run_federation(
    train: &Dataset,
    test: &Dataset,
    partition: &Partition,
    init_state: ModelState,
    strategy: StrategyConfig,
    cfg: FederationConfig,
    rng: &RngStream,
) -> Result<(FederationHistory, ModelState)> {
    Federation::new(train, test, partition, init_state, strategy, cfg, rng)?.run()
}

/// Centralized reference: the same local-training loop over the pooled
/// training set (one degenerate client, FedAvg), with communication and
/// drift metrics zeroed since nothing is exchanged. Evaluation runs
/// through the same code path as federated rounds.
pub fn centralized_baseline(
    train: &Dataset,
    test: &Dataset,
    init_state: ModelState,
    cfg: FederationConfig,
    rng: &RngStream,
) -> Result<(FederationHistory, ModelState)> {
    let partition = Partition::single_client(train.len());
    let (mut history, model) = run_federation(
        train,
        test,
        &partition,
        init_state,
        StrategyConfig::FedAvg,
        cfg,
        rng,
    )?;
    for m in &mut history.rounds {
        m.drift = 0.0;
        m.cumulative_bytes = 0;
    }
    Ok((history, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::models::{init_params, Activation, InitScheme, Mode, ModelSpec, NormKind};
    use proptest::prelude::*;

    fn blob_setup(seed: u64, norm: NormKind) -> (Dataset, Dataset, Partition, ModelState) {
        let mut rng = RngStream::new(seed, 500);
        let ds = synth_blobs(3, 4, 40, 4.0, 0.6, &mut rng).unwrap();
        let (train, test) = crate::data::train_eval_split(&ds, 0.25, &mut rng).unwrap();
        let partition = crate::data::dirichlet_partition(&train, 3, 1.0, 2, &mut rng).unwrap();
        let spec = ModelSpec {
            input_dim: 4,
            num_classes: 3,
            hidden_dims: vec![6],
            activation: Activation::Tanh,
            norm_kind: norm,
        };
        let state = init_params(&spec, InitScheme::KaimingNormal, &mut rng).unwrap();
        (train, test, partition, state)
    }

    fn sgd_cfg(rounds: usize, steps: usize) -> FederationConfig {
        FederationConfig::new(
            rounds,
            steps,
            8,
            crate::optim::OptimizerConfig::sgd(0.05),
            LossConfig::cross_entropy(3),
        )
    }

    fn client_for(train: &Dataset, shard: Vec<usize>, scaffold_dim: Option<usize>) -> ClientState {
        let _ = train;
        ClientState {
            client_id: 0,
            shard,
            optimizer: OptimizerState::new(&crate::optim::OptimizerConfig::sgd(0.05), 1),
            control_variate: scaffold_dim.map(Vec64::zeros),
            rng: RngStream::new(77, 7),
            bytes_sent: 0,
            bytes_received: 0,
        }
    }

    fn update_with(params: Vec<f64>, samples: usize) -> ClientUpdate {
        ClientUpdate {
            client_id: 0,
            new_params: Vec64::from_vec(params),
            new_bn_stats: None,
            sample_count: samples,
            control_delta: None,
            local_loss_trace: vec![],
            bytes: 0,
        }
    }

    #[test]
    fn zero_local_steps_is_a_no_op() {
        let (train, _, partition, state) = blob_setup(1, NormKind::None);
        let mut client = client_for(&train, partition.client_indices[0].clone(), None);
        let cfg = sgd_cfg(1, 0);
        let update = local_update(&train, &mut client, &state, &cfg, 0, None).unwrap();
        assert_eq!(update.new_params, state.params);
        assert!(update.local_loss_trace.is_empty());
    }

    #[test]
    fn constructed_correction_cancels_every_step() {
        // One-sample shard: the batch is the same each step, so a
        // correction of -g freezes the parameters and g stays constant.
        let (train, _, _, state) = blob_setup(2, NormKind::None);
        let mut probe = state.clone();
        let batch = train.batch(&[0]).unwrap();
        let (logits, cache) = probe.forward(&batch, Mode::Train).unwrap();
        let (_, dlogits) =
            loss_and_grad(&LossConfig::cross_entropy(3), &logits, &batch.labels).unwrap();
        let mut minus_g = probe.backward(&cache, &dlogits).unwrap();
        minus_g.scale(-1.0);

        let mut cfg = sgd_cfg(1, 5);
        cfg.batch_size = 1;
        cfg.client_schedule = ClientSchedule::Constant;
        let mut client = client_for(&train, vec![0], None);
        let update = local_update(&train, &mut client, &state, &cfg, 0, Some(&minus_g)).unwrap();
        assert_eq!(update.new_params, state.params);
    }

    #[test]
    fn single_step_matches_hand_unroll() {
        let (train, _, _, state) = blob_setup(3, NormKind::None);
        let mut cfg = sgd_cfg(1, 1);
        cfg.batch_size = 2;
        cfg.client_schedule = ClientSchedule::Constant;
        let correction = Vec64::splat(0.01, state.params.len());

        let mut client = client_for(&train, vec![0, 5, 9], None);
        let update = local_update(&train, &mut client, &state, &cfg, 0, Some(&correction)).unwrap();

        // Oracle: replay the same batch by hand.
        let mut replay_rng = RngStream::new(77, 7);
        let shard = [0usize, 5, 9];
        let idx: Vec<usize> = (0..2).map(|_| shard[replay_rng.next_below(3)]).collect();
        let batch = train.batch(&idx).unwrap();
        let mut model = state.clone();
        let (logits, cache) = model.forward(&batch, Mode::Train).unwrap();
        let (_, dlogits) =
            loss_and_grad(&LossConfig::cross_entropy(3), &logits, &batch.labels).unwrap();
        let mut g = model.backward(&cache, &dlogits).unwrap();
        g.axpy(1.0, &correction);
        let mut expected = state.params.clone();
        expected.axpy(-cfg.optimizer.lr, &g);
        for j in 0..expected.len() {
            assert!((update.new_params[j] - expected[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn local_update_rejects_empty_shards() {
        let (train, _, _, state) = blob_setup(4, NormKind::None);
        let mut client = client_for(&train, vec![], None);
        assert!(matches!(
            local_update(&train, &mut client, &state, &sgd_cfg(1, 1), 0, None),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn divergence_names_the_client() {
        // A single zero-noise sample and an absurd rate: the first step
        // sends the logits past f64 range on the second forward.
        let mut rng = RngStream::new(5, 550);
        let train = synth_blobs(3, 2, 5, 10.0, 0.0, &mut rng).unwrap();
        let spec = ModelSpec {
            input_dim: 2,
            num_classes: 3,
            hidden_dims: vec![],
            activation: Activation::Tanh,
            norm_kind: NormKind::None,
        };
        let state = ModelState::zeroed(spec).unwrap();
        let mut cfg = sgd_cfg(1, 4);
        cfg.batch_size = 1;
        cfg.optimizer = crate::optim::OptimizerConfig::sgd(1e307);
        cfg.client_schedule = ClientSchedule::Constant;
        let mut client = client_for(&train, vec![0], None);
        client.client_id = 3;
        match local_update(&train, &mut client, &state, &cfg, 2, None) {
            Err(Error::Divergence {
                client_id, round, ..
            }) => {
                assert_eq!(client_id, 3);
                assert_eq!(round, 2);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn fedavg_hand_examples() {
        let identical = vec![
            update_with(vec![1.5, -2.0], 10),
            update_with(vec![1.5, -2.0], 3),
        ];
        assert_eq!(
            fedavg_aggregate(&identical).unwrap().as_slice(),
            &[1.5, -2.0]
        );

        let equal_n = vec![update_with(vec![0.0], 5), update_with(vec![2.0], 5)];
        assert_eq!(fedavg_aggregate(&equal_n).unwrap()[0], 1.0);

        let weighted = vec![update_with(vec![4.0], 1), update_with(vec![0.0], 3)];
        assert!((fedavg_aggregate(&weighted).unwrap()[0] - 1.0).abs() < 1e-15);

        assert!(matches!(fedavg_aggregate(&[]), Err(Error::Validation(_))));
    }

    fn server_with(params: Vec<f64>, total_rounds: usize) -> ServerState {
        let spec = ModelSpec {
            input_dim: params.len(),
            num_classes: 2,
            hidden_dims: vec![],
            activation: Activation::Tanh,
            norm_kind: NormKind::None,
        };
        // The raw parameter vector is all that matters for these tests.
        let mut model = ModelState::zeroed(spec).unwrap();
        model.params = Vec64::from_vec(params);
        ServerState {
            model,
            momentum: None,
            control: None,
            round: 0,
            total_rounds,
        }
    }

    #[test]
    fn fedopt_with_zero_momentum_reduces_to_fedavg() {
        let updates = vec![
            update_with(vec![0.4, -1.0, 2.0], 2),
            update_with(vec![1.0, 0.5, -0.5], 6),
        ];
        let avg = fedavg_aggregate(&updates).unwrap();
        let mut server = server_with(vec![10.0, -3.0, 0.25], 4);
        fedopt_aggregate(&mut server, &updates, 1.0, 0.0, ServerSchedule::Constant).unwrap();
        for j in 0..3 {
            assert!(
                (server.model.params[j] - avg[j]).abs() < 1e-12,
                "{} vs {}",
                server.model.params[j],
                avg[j]
            );
        }
    }

    #[test]
    fn fedopt_momentum_unrolls_to_1_6_delta() {
        // Identical pseudo-gradients two rounds in a row with beta = 0.6:
        // the second move is 1.6 * delta.
        let delta = [0.5, -0.25];
        let mut server = server_with(vec![0.0, 0.0], 4);
        let round1 = vec![update_with(vec![0.0 + delta[0], 0.0 + delta[1]], 4)];
        fedopt_aggregate(&mut server, &round1, 1.0, 0.6, ServerSchedule::Constant).unwrap();
        let after_first = [server.model.params[0], server.model.params[1]];
        for j in 0..2 {
            assert!((after_first[j] - delta[j]).abs() < 1e-12);
        }
        let round2 = vec![update_with(
            vec![after_first[0] + delta[0], after_first[1] + delta[1]],
            4,
        )];
        fedopt_aggregate(&mut server, &round2, 1.0, 0.6, ServerSchedule::Constant).unwrap();
        for j in 0..2 {
            let move2 = server.model.params[j] - after_first[j];
            assert!((move2 - 1.6 * delta[j]).abs() < 1e-12, "move {move2}");
        }
    }

    #[test]
    fn fedopt_zero_delta_decays_momentum_only() {
        let mut server = server_with(vec![1.0], 4);
        server.momentum = Some(Vec64::from_vec(vec![0.5]));
        let updates = vec![update_with(vec![1.0], 4)]; // y == w_g, delta = 0
        fedopt_aggregate(&mut server, &updates, 0.0, 0.6, ServerSchedule::Constant).unwrap();
        assert_eq!(server.model.params[0], 1.0);
        assert!((server.momentum.as_ref().unwrap()[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn client_drift_examples() {
        let x = Vec64::from_vec(vec![0.0]);
        let same = vec![update_with(vec![0.0], 1), update_with(vec![0.0], 1)];
        assert_eq!(client_drift(&same, &x).unwrap(), 0.0);
        let offset = vec![update_with(vec![0.75], 1), update_with(vec![-0.75], 1)];
        assert!((client_drift(&offset, &x).unwrap() - 0.75).abs() < 1e-15);
        assert!(client_drift(&offset, &x).unwrap() >= 0.0);
        assert!(client_drift(&[], &x).is_err());
    }

    #[test]
    fn comm_cost_matches_documented_accounting() {
        let scaffold = StrategyConfig::scaffold_default();
        assert_eq!(comm_cost(&StrategyConfig::FedAvg, 15), 240);
        assert_eq!(
            comm_cost(&scaffold, 15),
            2 * comm_cost(&StrategyConfig::FedAvg, 15)
        );
        assert_eq!(local_storage_scalars(&scaffold, 15), 45);
        assert_eq!(local_storage_scalars(&StrategyConfig::FedAvg, 15), 15);
    }

    #[test]
    fn zero_rounds_returns_initialization() {
        let (train, test, partition, state) = blob_setup(6, NormKind::None);
        let (history, model) = run_federation(
            &train,
            &test,
            &partition,
            state.clone(),
            StrategyConfig::FedAvg,
            sgd_cfg(0, 4),
            &RngStream::new(1, 0),
        )
        .unwrap();
        assert!(history.rounds.is_empty());
        assert_eq!(model, state);
    }

    #[test]
    fn single_client_federation_equals_centralized() {
        let (train, test, _, state) = blob_setup(7, NormKind::BatchNorm);
        let partition = Partition::single_client(train.len());
        let cfg = sgd_cfg(3, 6);
        let rng = RngStream::new(21, 0);
        let (fed_hist, fed_model) = run_federation(
            &train,
            &test,
            &partition,
            state.clone(),
            StrategyConfig::FedAvg,
            cfg.clone(),
            &rng,
        )
        .unwrap();
        let (central_hist, central_model) =
            centralized_baseline(&train, &test, state, cfg, &rng).unwrap();
        for j in 0..fed_model.params.len() {
            assert!((fed_model.params[j] - central_model.params[j]).abs() < 1e-9);
        }
        assert_eq!(fed_model.bn_stats, central_model.bn_stats);
        for (a, b) in fed_hist.rounds.iter().zip(central_hist.rounds.iter()) {
            assert_eq!(a.accuracy, b.accuracy);
            assert_eq!(a.balanced_accuracy, b.balanced_accuracy);
        }
    }

    #[test]
    fn scaffold_single_client_tracks_fedavg() {
        let (train, test, _, state) = blob_setup(8, NormKind::None);
        let partition = Partition::single_client(train.len());
        let cfg = sgd_cfg(3, 5);
        let rng = RngStream::new(31, 0);
        let mut fedavg = Federation::new(
            &train,
            &test,
            &partition,
            state.clone(),
            StrategyConfig::FedAvg,
            cfg.clone(),
            &rng,
        )
        .unwrap();
        let mut scaffold = Federation::new(
            &train,
            &test,
            &partition,
            state,
            StrategyConfig::scaffold_default(),
            cfg,
            &rng,
        )
        .unwrap();
        for _ in 0..3 {
            fedavg.run_round().unwrap();
            scaffold.run_round().unwrap();
            for j in 0..fedavg.server.model.params.len() {
                let a = fedavg.server.model.params[j];
                let b = scaffold.server.model.params[j];
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn scaffold_server_variate_stays_at_client_mean() {
        let (train, test, partition, state) = blob_setup(9, NormKind::None);
        let rng = RngStream::new(41, 0);
        let mut fed = Federation::new(
            &train,
            &test,
            &partition,
            state,
            StrategyConfig::scaffold_default(),
            sgd_cfg(4, 5),
            &rng,
        )
        .unwrap();
        for _ in 0..4 {
            fed.run_round().unwrap();
            let c = fed.server.control.as_ref().unwrap();
            let mut mean = Vec64::zeros(c.len());
            for client in &fed.clients {
                mean.axpy(
                    1.0 / fed.clients.len() as f64,
                    client.control_variate.as_ref().unwrap(),
                );
            }
            let gap = c.sub(&mean).unwrap().l2_norm();
            assert!(gap < 1e-9, "server variate off client mean by {gap}");
        }
    }

    #[test]
    fn scaffold_corrections_stay_small_when_shards_are_identical() {
        // Each c_i estimates the client's local gradient, so its norm does
        // not vanish; the drift correction c - c_i does. Zero-noise blobs
        // under a round-robin partition give statistically identical
        // shards (corrections near zero, bounded by batch noise), while a
        // by-class partition makes them large.
        let mut rng = RngStream::new(10, 600);
        let ds = synth_blobs(3, 4, 30, 4.0, 0.0, &mut rng).unwrap();
        let spec = ModelSpec {
            input_dim: 4,
            num_classes: 3,
            hidden_dims: vec![],
            activation: Activation::Tanh,
            norm_kind: NormKind::None,
        };
        let state = init_params(&spec, InitScheme::KaimingNormal, &mut rng).unwrap();

        let round_robin = Partition {
            client_indices: (0..3).map(|k| (k..ds.len()).step_by(3).collect()).collect(),
            alpha: f64::INFINITY,
            seed: 0,
        };
        // Clients hold disjoint label sets: maximal heterogeneity.
        let by_class = Partition {
            client_indices: (0..3)
                .map(|c| (0..ds.len()).filter(|&i| ds.labels[i] == c).collect())
                .collect(),
            alpha: 0.0,
            seed: 0,
        };

        let correction_norm = |partition: &Partition| -> f64 {
            let rng = RngStream::new(51, 0);
            let mut fed = Federation::new(
                &ds,
                &ds,
                partition,
                state.clone(),
                StrategyConfig::scaffold_default(),
                sgd_cfg(3, 10),
                &rng,
            )
            .unwrap();
            for _ in 0..3 {
                fed.run_round().unwrap();
            }
            let c = fed.server.control.as_ref().unwrap();
            fed.clients
                .iter()
                .map(|cl| {
                    c.sub(cl.control_variate.as_ref().unwrap())
                        .unwrap()
                        .l2_norm()
                })
                .sum::<f64>()
                / fed.clients.len() as f64
        };
        let iid = correction_norm(&round_robin);
        let skewed = correction_norm(&by_class);
        assert!(
            iid < 0.5 * skewed,
            "iid corrections {iid} not clearly below skewed {skewed}"
        );
    }

    #[test]
    fn scaffold_rejects_zero_step_rounds() {
        let (train, test, partition, state) = blob_setup(11, NormKind::None);
        let rng = RngStream::new(61, 0);
        let mut fed = Federation::new(
            &train,
            &test,
            &partition,
            state,
            StrategyConfig::scaffold_default(),
            sgd_cfg(1, 0),
            &rng,
        )
        .unwrap();
        assert!(matches!(fed.run_round(), Err(Error::Validation(_))));
    }

    #[test]
    fn centralized_solves_separable_blobs() {
        // Near-perfect task by construction: wide separation, tiny noise.
        let mut rng = RngStream::new(13, 700);
        let ds = synth_blobs(3, 4, 60, 10.0, 0.3, &mut rng).unwrap();
        let (train, test) = crate::data::train_eval_split(&ds, 0.25, &mut rng).unwrap();
        let spec = ModelSpec {
            input_dim: 4,
            num_classes: 3,
            hidden_dims: vec![8],
            activation: Activation::Relu,
            norm_kind: NormKind::None,
        };
        let state = init_params(&spec, InitScheme::KaimingNormal, &mut rng).unwrap();
        let cfg = sgd_cfg(10, 20);
        let (hist, _) =
            centralized_baseline(&train, &test, state, cfg, &RngStream::new(13, 0)).unwrap();
        let acc = hist.final_accuracy().unwrap();
        assert!(acc >= 0.99, "centralized accuracy {acc}");
    }

    #[test]
    fn runs_are_bitwise_reproducible() {
        let (train, test, partition, state) = blob_setup(12, NormKind::BatchNorm);
        let cfg = sgd_cfg(3, 4);
        let rng = RngStream::new(71, 0);
        let run = || {
            run_federation(
                &train,
                &test,
                &partition,
                state.clone(),
                StrategyConfig::fedopt_default(),
                cfg.clone(),
                &rng,
            )
            .unwrap()
        };
        let (h1, m1) = run();
        let (h2, m2) = run();
        assert_eq!(m1, m2);
        for (a, b) in h1.rounds.iter().zip(h2.rounds.iter()) {
            assert_eq!(a.accuracy.to_bits(), b.accuracy.to_bits());
            assert_eq!(a.drift.to_bits(), b.drift.to_bits());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn fedavg_output_stays_in_the_convex_hull(
            seed in 0u64..500,
            clients in 2usize..5,
            dim in 1usize..6,
        ) {
            let mut rng = RngStream::new(seed, 900);
            let updates: Vec<ClientUpdate> = (0..clients)
                .map(|i| {
                    let params: Vec<f64> = (0..dim).map(|_| 3.0 * rng.standard_normal()).collect();
                    update_with(params, 1 + (seed as usize + i) % 7)
                })
                .collect();
            let out = fedavg_aggregate(&updates).unwrap();
            for j in 0..dim {
                let lo = updates.iter().map(|u| u.new_params[j]).fold(f64::INFINITY, f64::min);
                let hi = updates.iter().map(|u| u.new_params[j]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(out[j] >= lo - 1e-12 && out[j] <= hi + 1e-12);
            }
        }
    }
}
