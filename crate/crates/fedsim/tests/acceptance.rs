//! Acceptance suite: every release-gate property of the simulator, one
//! test per criterion, each printing a single PASS/FAIL line (visible with
//! `cargo test --test acceptance -- --nocapture`).

use fedsim::bench::{config, grid::run_grid, results::write_results};
use fedsim::data::{
    dirichlet_partition, heterogeneity_report, load_idx, save_idx, synth_blobs, train_eval_split,
    Dataset, Partition,
};
use fedsim::federation::{
    centralized_baseline, comm_cost, local_storage_scalars, run_federation, ClientSchedule,
    Federation, FederationConfig, FederationHistory, ScheduleHorizon, StrategyConfig,
};
use fedsim::gradcheck;
use fedsim::models::{
    init_params, Activation, Batch, InitScheme, Mode, ModelSpec, ModelState, NormKind,
};
use fedsim::numkit::{Mat64, RngStream, Vec64};
use fedsim::optim::{loss_and_grad, LossConfig, OptimizerConfig};
use fedsim::pretrain::{initialize, load_checkpoint, save_checkpoint, InitStrategy, SslConfig};
use std::time::Instant;

fn report(criterion: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "[{}] criterion {criterion:02} {name}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} ({name}): {detail}");
}

// ---------------------------------------------------------------------
// 1. Gradient correctness across architectures, norms, and losses.
// ---------------------------------------------------------------------

#[test]
fn criterion_01_gradient_correctness() {
    let started = Instant::now();
    let archs: [(&str, Vec<usize>, Activation); 3] = [
        ("softmax", vec![], Activation::Tanh),
        ("mlp-1h", vec![6], Activation::Tanh),
        ("mlp-2h", vec![7, 5], Activation::Relu),
    ];
    let norms = [
        NormKind::None,
        NormKind::BatchNorm,
        NormKind::LayerNorm,
        NormKind::WeightStandardized,
    ];
    let (input_dim, classes, batch) = (5usize, 3usize, 8usize);
    let mut worst = 0.0_f64;
    let mut checked = 0usize;
    for (ai, (_, hidden, activation)) in archs.iter().enumerate() {
        for (ni, norm) in norms.iter().enumerate() {
            let spec = ModelSpec {
                input_dim,
                num_classes: classes,
                hidden_dims: hidden.clone(),
                activation: *activation,
                norm_kind: *norm,
            };
            for loss_kind in 0..2usize {
                let loss = if loss_kind == 0 {
                    LossConfig::cross_entropy(classes)
                } else {
                    LossConfig::weighted_focal(Vec64::from_vec(vec![0.5, 1.0, 1.5]), 2.0).unwrap()
                };
                for instance in 0..20u64 {
                    // The finite-difference oracle is only valid where the
                    // loss is differentiable; ReLU instances whose
                    // pre-activations sit near the kink are redrawn.
                    let mut salt = 0u64;
                    let (analytic, numeric) = loop {
                        let tag = ((ai * 4 + ni) * 2 + loss_kind) as u64 * 100_000
                            + instance * 100
                            + salt;
                        let mut rng = RngStream::new(2024, tag);
                        let state =
                            init_params(&spec, InitScheme::KaimingNormal, &mut rng).unwrap();
                        let feats: Vec<f64> = (0..batch * input_dim)
                            .map(|_| rng.standard_normal())
                            .collect();
                        let labels: Vec<usize> =
                            (0..batch).map(|_| rng.next_below(classes)).collect();
                        let b =
                            Batch::new(Mat64::from_vec(batch, input_dim, feats).unwrap(), labels)
                                .unwrap();

                        let mut train_state = state.clone();
                        let (logits, cache) = train_state.forward(&b, Mode::Train).unwrap();
                        if *activation == Activation::Relu
                            && cache.min_preactivation_margin() < 1e-2
                            && salt < 50
                        {
                            salt += 1;
                            continue;
                        }
                        let (_, dlogits) = loss_and_grad(&loss, &logits, &b.labels).unwrap();
                        let analytic = train_state.backward(&cache, &dlogits).unwrap();
                        let numeric =
                            gradcheck::finite_difference_gradient(&state, &b, &loss, 1e-5).unwrap();
                        break (analytic, numeric);
                    };
                    let err = gradcheck::max_relative_error(&analytic, &numeric);
                    worst = worst.max(err);
                    checked += 1;
                }
            }
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    report(
        1,
        "gradient correctness",
        worst < 1e-4 && elapsed < 60.0,
        &format!("{checked} instances, max rel error {worst:.3e}, {elapsed:.1}s"),
    );
}

// ---------------------------------------------------------------------
// 2. Aggregator reduction identities over random configurations.
// ---------------------------------------------------------------------

fn tiny_task(seed: u64) -> (Dataset, Dataset, ModelState) {
    let mut rng = RngStream::new(seed, 9000);
    let ds = synth_blobs(3, 3, 12, 3.0, 0.5, &mut rng).unwrap();
    let spec = ModelSpec {
        input_dim: 3,
        num_classes: 3,
        hidden_dims: vec![],
        activation: Activation::Tanh,
        norm_kind: NormKind::None,
    };
    let state = init_params(&spec, InitScheme::KaimingNormal, &mut rng).unwrap();
    (ds.clone(), ds, state)
}

fn tiny_cfg(rounds: usize, seed: u64) -> FederationConfig {
    let mut cfg = FederationConfig::new(
        rounds,
        2 + (seed % 3) as usize,
        4,
        OptimizerConfig::sgd(0.02 + 0.01 * (seed % 4) as f64),
        LossConfig::cross_entropy(3),
    );
    cfg.client_schedule = if seed % 2 == 0 {
        ClientSchedule::Cosine
    } else {
        ClientSchedule::Constant
    };
    cfg.schedule_horizon = ScheduleHorizon::PerRound;
    cfg
}

#[test]
fn criterion_02_aggregator_reduction_identities() {
    use fedsim::federation::{fedavg_aggregate, fedopt_aggregate, ClientUpdate, ServerState};

    // (a) FedOpt with beta = 0, eta = 1, constant schedule equals FedAvg.
    let mut worst_fedopt = 0.0_f64;
    for case in 0..200u64 {
        let mut rng = RngStream::new(case, 101);
        let spec = ModelSpec {
            input_dim: 1 + rng.next_below(6),
            num_classes: 2,
            hidden_dims: vec![],
            activation: Activation::Tanh,
            norm_kind: NormKind::None,
        };
        let pc = spec.param_count();
        let clients = 1 + rng.next_below(5);
        let updates: Vec<ClientUpdate> = (0..clients)
            .map(|i| ClientUpdate {
                client_id: i,
                new_params: Vec64::from_vec((0..pc).map(|_| 3.0 * rng.standard_normal()).collect()),
                new_bn_stats: None,
                sample_count: 1 + rng.next_below(9),
                control_delta: None,
                local_loss_trace: vec![],
                bytes: 0,
            })
            .collect();
        let avg = fedavg_aggregate(&updates).unwrap();
        let mut model = ModelState::zeroed(spec).unwrap();
        model.params = Vec64::from_vec((0..pc).map(|_| rng.standard_normal()).collect());
        let mut server = ServerState {
            model,
            momentum: None,
            control: None,
            round: 0,
            total_rounds: 3,
        };
        fedopt_aggregate(
            &mut server,
            &updates,
            1.0,
            0.0,
            fedsim::federation::ServerSchedule::Constant,
        )
        .unwrap();
        for j in 0..pc {
            worst_fedopt = worst_fedopt.max((server.model.params[j] - avg[j]).abs());
        }
    }

    // (b) Single-client SCAFFOLD with zero variates tracks FedAvg.
    let mut worst_single = 0.0_f64;
    for case in 0..100u64 {
        let (train, test, state) = tiny_task(case);
        let partition = Partition::single_client(train.len());
        let cfg = tiny_cfg(2, case);
        let rng = RngStream::new(case, 55);
        let mut a = Federation::new(
            &train,
            &test,
            &partition,
            state.clone(),
            StrategyConfig::FedAvg,
            cfg.clone(),
            &rng,
        )
        .unwrap();
        let mut b = Federation::new(
            &train,
            &test,
            &partition,
            state,
            StrategyConfig::scaffold_default(),
            cfg,
            &rng,
        )
        .unwrap();
        for _ in 0..2 {
            a.run_round().unwrap();
            b.run_round().unwrap();
            let gap = a
                .server
                .model
                .params
                .sub(&b.server.model.params)
                .unwrap()
                .l2_norm();
            worst_single = worst_single.max(gap);
        }
    }

    // (c) The server variate equals the client-mean variate every round.
    let mut worst_mean = 0.0_f64;
    for case in 0..100u64 {
        let (train, test, state) = tiny_task(1000 + case);
        let clients = 2 + (case % 3) as usize;
        let shards: Vec<Vec<usize>> = (0..clients)
            .map(|k| (k..train.len()).step_by(clients).collect())
            .collect();
        let partition = Partition {
            client_indices: shards,
            alpha: 1.0,
            seed: case,
        };
        let rng = RngStream::new(case, 56);
        let mut fed = Federation::new(
            &train,
            &test,
            &partition,
            state,
            StrategyConfig::scaffold_default(),
            tiny_cfg(2, case),
            &rng,
        )
        .unwrap();
        for _ in 0..2 {
            fed.run_round().unwrap();
            let c = fed.server.control.as_ref().unwrap();
            let mut mean = Vec64::zeros(c.len());
            for cl in &fed.clients {
                mean.axpy(1.0 / clients as f64, cl.control_variate.as_ref().unwrap());
            }
            worst_mean = worst_mean.max(c.sub(&mean).unwrap().l2_norm());
        }
    }

    report(
        2,
        "aggregator reduction identities",
        worst_fedopt < 1e-12 && worst_single < 1e-9 && worst_mean < 1e-9,
        &format!(
            "fedopt-vs-fedavg {worst_fedopt:.2e}, single-client scaffold {worst_single:.2e}, variate mean {worst_mean:.2e}"
        ),
    );
}

// ---------------------------------------------------------------------
// 3. Communication and storage accounting.
// ---------------------------------------------------------------------

#[test]
fn criterion_03_comm_and_storage_accounting() {
    let scaffold = StrategyConfig::scaffold_default();
    let fedavg = StrategyConfig::FedAvg;
    let mut exact = true;
    for pc in [1usize, 15, 67, 83, 4096] {
        exact &= comm_cost(&scaffold, pc) == 2 * comm_cost(&fedavg, pc);
        exact &= comm_cost(&fedavg, pc) == 2 * pc as u64 * 8;
        exact &= local_storage_scalars(&scaffold, pc) == 3 * pc;
    }
    // The accounting the engine actually records matches the rule.
    let (train, test, state) = tiny_task(7);
    let pc = state.spec.param_count() as u64;
    let partition = Partition {
        client_indices: vec![
            (0..train.len() / 2).collect(),
            (train.len() / 2..train.len()).collect(),
        ],
        alpha: 1.0,
        seed: 7,
    };
    let cfg = tiny_cfg(3, 7);
    let rng = RngStream::new(7, 77);
    let (avg_hist, _) = run_federation(
        &train,
        &test,
        &partition,
        state.clone(),
        fedavg.clone(),
        cfg.clone(),
        &rng,
    )
    .unwrap();
    let (sc_hist, _) = run_federation(
        &train,
        &test,
        &partition,
        state,
        scaffold.clone(),
        cfg,
        &rng,
    )
    .unwrap();
    let avg_bytes = avg_hist.rounds.last().unwrap().cumulative_bytes;
    let sc_bytes = sc_hist.rounds.last().unwrap().cumulative_bytes;
    exact &= avg_bytes == 3 * 2 * 2 * pc * 8; // rounds x clients x 2pc scalars
    exact &= sc_bytes == 2 * avg_bytes;
    report(
        3,
        "communication/storage accounting",
        exact,
        &format!(
            "fedavg {avg_bytes} B, scaffold {sc_bytes} B over 3 rounds x 2 clients ({pc} params)"
        ),
    );
}

// ---------------------------------------------------------------------
// 4. Partitioner heterogeneity statistics.
// ---------------------------------------------------------------------

#[test]
fn criterion_04_partitioner_statistics() {
    let started = Instant::now();
    let seeds = 20u64;
    let mut tv_skewed = 0.0;
    let mut tv_iid = 0.0;
    let mut covers = true;
    for seed in 0..seeds {
        let mut data_rng = RngStream::new(seed, 1);
        let ds = synth_blobs(11, 4, 40, 6.0, 0.5, &mut data_rng).unwrap();
        for (alpha, acc) in [(0.1, &mut tv_skewed), (100.0, &mut tv_iid)] {
            let mut rng = RngStream::new(seed, if alpha < 1.0 { 2 } else { 3 });
            let p = dirichlet_partition(&ds, 4, alpha, 1, &mut rng).unwrap();
            let mut seen = vec![false; ds.len()];
            for shard in &p.client_indices {
                for &i in shard {
                    if seen[i] {
                        covers = false;
                    }
                    seen[i] = true;
                }
            }
            covers &= seen.iter().all(|&s| s);
            *acc += heterogeneity_report(&p, &ds).unwrap().mean_tv_to_global / seeds as f64;
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    let margin = tv_skewed - tv_iid;
    report(
        4,
        "partitioner statistics",
        covers && margin >= 0.25 && elapsed < 10.0,
        &format!(
            "mean TV alpha=0.1: {tv_skewed:.3}, alpha=100: {tv_iid:.3}, margin {margin:.3}, {elapsed:.1}s"
        ),
    );
}

// ---------------------------------------------------------------------
// Shared setup for the blob-task experiments (criteria 5-8).
// ---------------------------------------------------------------------

struct BlobTask {
    train: Dataset,
    test: Dataset,
    partition: Partition,
}

// Four classes with heavy overlap: hard enough that client drift at
// alpha = 0.1 visibly costs accuracy within 20 rounds.
fn blob_task(seed: u64, alpha: f64, norm: NormKind) -> (BlobTask, ModelState) {
    let mut data_rng = RngStream::new(seed, 11);
    let ds = synth_blobs(4, 6, 120, 3.0, 1.6, &mut data_rng).unwrap();
    let mut split_rng = RngStream::new(seed, 12);
    let (train, test) = train_eval_split(&ds, 0.25, &mut split_rng).unwrap();
    let mut part_rng = RngStream::new(seed, if alpha < 1.0 { 13 } else { 14 });
    let partition = dirichlet_partition(&train, 4, alpha, 5, &mut part_rng).unwrap();
    let spec = ModelSpec {
        input_dim: 6,
        num_classes: 4,
        hidden_dims: vec![24],
        activation: Activation::Relu,
        norm_kind: norm,
    };
    let mut init_rng = RngStream::new(seed, 15);
    let state = init_params(&spec, InitScheme::KaimingNormal, &mut init_rng).unwrap();
    (
        BlobTask {
            train,
            test,
            partition,
        },
        state,
    )
}

fn blob_cfg(rounds: usize, local_steps: usize) -> FederationConfig {
    FederationConfig::new(
        rounds,
        local_steps,
        32,
        OptimizerConfig::sgd_momentum(0.15, 0.9),
        LossConfig::cross_entropy(4),
    )
}

// ---------------------------------------------------------------------
// 5. Heterogeneity widens the gap to the centralized model.
// ---------------------------------------------------------------------

#[test]
fn criterion_05_heterogeneity_gap_direction() {
    let started = Instant::now();
    let seeds = 10u64;
    let mut deficit_skewed = 0.0;
    let mut deficit_iid = 0.0;
    for seed in 0..seeds {
        let cfg = blob_cfg(20, 50);
        let (task01, state01) = blob_task(seed, 0.1, NormKind::None);
        let (task100, state100) = blob_task(seed, 100.0, NormKind::None);
        let rng = RngStream::new(seed, 16);
        let (central_hist, _) = centralized_baseline(
            &task01.train,
            &task01.test,
            state01.clone(),
            cfg.clone(),
            &rng,
        )
        .unwrap();
        let central = central_hist.final_balanced_accuracy().unwrap();
        let fed_at = |task: &BlobTask, state: ModelState| -> f64 {
            let (hist, _) = run_federation(
                &task.train,
                &task.test,
                &task.partition,
                state,
                StrategyConfig::FedAvg,
                cfg.clone(),
                &RngStream::new(seed, 17),
            )
            .unwrap();
            hist.final_balanced_accuracy().unwrap()
        };
        deficit_skewed += (central - fed_at(&task01, state01)) / seeds as f64;
        deficit_iid += (central - fed_at(&task100, state100)) / seeds as f64;
    }
    let elapsed = started.elapsed().as_secs_f64();
    report(
        5,
        "heterogeneity gap direction",
        deficit_skewed > deficit_iid && deficit_iid.abs() < 0.02 && elapsed < 300.0,
        &format!(
            "mean deficit alpha=0.1: {:.2} pts, alpha=100: {:.2} pts, {elapsed:.1}s",
            100.0 * deficit_skewed,
            100.0 * deficit_iid
        ),
    );
}

// ---------------------------------------------------------------------
// 6. SCAFFOLD reduces client drift under heterogeneity.
// ---------------------------------------------------------------------

#[test]
fn criterion_06_scaffold_drift_reduction() {
    let seeds = 10u64;
    let mut successes = 0;
    let mut drifts = Vec::new();
    for seed in 0..seeds {
        let cfg = blob_cfg(20, 50);
        let (task, state) = blob_task(seed, 0.1, NormKind::None);
        let mean_drift = |strategy: StrategyConfig, state: ModelState| -> f64 {
            let (hist, _) = run_federation(
                &task.train,
                &task.test,
                &task.partition,
                state,
                strategy,
                cfg.clone(),
                &RngStream::new(seed, 18),
            )
            .unwrap();
            hist.mean_drift()
        };
        let avg = mean_drift(StrategyConfig::FedAvg, state.clone());
        let scaf = mean_drift(StrategyConfig::scaffold_default(), state);
        if scaf <= avg {
            successes += 1;
        }
        drifts.push((avg, scaf));
    }
    // One-sided sign test at the 5% level: 9 of 10 seeds.
    let detail = format!(
        "scaffold <= fedavg drift in {successes}/{seeds} seeds (first seed: fedavg {:.4}, scaffold {:.4})",
        drifts[0].0, drifts[0].1
    );
    report(6, "scaffold drift reduction", successes >= 9, &detail);
}

// ---------------------------------------------------------------------
// 7. Heterogeneity inflates the batch-norm statistic mismatch.
// ---------------------------------------------------------------------

#[test]
fn criterion_07_bn_statistic_mismatch() {
    let seeds = 10u64;
    let mut skewed = 0.0;
    let mut iid = 0.0;
    for seed in 0..seeds {
        let cfg = blob_cfg(1, 50);
        for (alpha, acc) in [(0.1, &mut skewed), (100.0, &mut iid)] {
            let (task, state) = blob_task(seed, alpha, NormKind::BatchNorm);
            let (hist, _) = run_federation(
                &task.train,
                &task.test,
                &task.partition,
                state,
                StrategyConfig::FedAvg,
                cfg.clone(),
                &RngStream::new(seed, 19),
            )
            .unwrap();
            *acc += hist.rounds[0]
                .bn_mismatch
                .expect("BN model records mismatch")
                / seeds as f64;
        }
    }
    report(
        7,
        "bn statistic mismatch",
        skewed > iid,
        &format!("after round 1: alpha=0.1 mean {skewed:.4}, alpha=100 mean {iid:.4}"),
    );
}

// ---------------------------------------------------------------------
// 8. SSL pre-training reaches the centralized bar in fewer rounds.
// ---------------------------------------------------------------------

#[test]
fn criterion_08_initialization_benefit() {
    // A bottleneck encoder on blobs whose class structure lives in a
    // low-dimensional subspace: reconstruction pretraining orients the
    // hidden units before any labels are seen, while a random init has to
    // discover the subspace from scratch.
    let seeds = 10u64;
    let rounds = 40;
    let mut random_hits = Vec::new();
    let mut ssl_hits = Vec::new();
    for seed in 0..seeds {
        let mut data_rng = RngStream::new(seed, 31);
        let ds = synth_blobs(4, 8, 120, 4.0, 1.0, &mut data_rng).unwrap();
        let mut split_rng = RngStream::new(seed, 32);
        let (train, test) = train_eval_split(&ds, 0.25, &mut split_rng).unwrap();
        let mut part_rng = RngStream::new(seed, 33);
        let partition = dirichlet_partition(&train, 4, 100.0, 5, &mut part_rng).unwrap();
        let spec = ModelSpec {
            input_dim: 8,
            num_classes: 4,
            hidden_dims: vec![3],
            activation: Activation::Relu,
            norm_kind: NormKind::None,
        };
        let cfg = FederationConfig::new(
            rounds,
            4,
            32,
            OptimizerConfig::sgd(0.05),
            LossConfig::cross_entropy(4),
        );
        let mut init_rng = RngStream::new(seed, 34);
        let random_state = init_params(&spec, InitScheme::KaimingNormal, &mut init_rng).unwrap();
        let mut ssl_rng = RngStream::new(seed, 35);
        let ssl_state = initialize(
            &InitStrategy::SslAutoencoder(SslConfig {
                epochs: 40,
                lr: 0.01,
                noise_std: 0.1,
                batch_size: 32,
                scheme: InitScheme::KaimingNormal,
            }),
            &spec,
            Some(&train),
            &mut ssl_rng,
        )
        .unwrap();

        let rng = RngStream::new(seed, 36);
        let (central_hist, _) =
            centralized_baseline(&train, &test, random_state.clone(), cfg.clone(), &rng).unwrap();
        let bar = 0.95 * central_hist.final_balanced_accuracy().unwrap();

        let rounds_to_bar = |state: ModelState| -> usize {
            let (hist, _) = run_federation(
                &train,
                &test,
                &partition,
                state,
                StrategyConfig::FedAvg,
                cfg.clone(),
                &RngStream::new(seed, 37),
            )
            .unwrap();
            hist.rounds
                .iter()
                .position(|m| m.balanced_accuracy >= bar)
                .map(|i| i + 1)
                .unwrap_or(rounds + 1)
        };
        random_hits.push(rounds_to_bar(random_state));
        ssl_hits.push(rounds_to_bar(ssl_state));
    }
    let median = |v: &mut Vec<usize>| -> f64 {
        v.sort_unstable();
        let n = v.len();
        if n % 2 == 0 {
            (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
        } else {
            v[n / 2] as f64
        }
    };
    let med_random = median(&mut random_hits);
    let med_ssl = median(&mut ssl_hits);
    report(
        8,
        "initialization benefit",
        med_ssl < med_random,
        &format!(
            "median rounds to 95% of central: ssl {med_ssl}, random {med_random} (ssl per-seed {ssl_hits:?}, random {random_hits:?})"
        ),
    );
}

// ---------------------------------------------------------------------
// 9. Bitwise determinism of the demo grid, any worker count.
// ---------------------------------------------------------------------

#[test]
fn criterion_09_grid_determinism() {
    let manifest = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let config_path = manifest.join("../../configs/demo_grid.json");
    let raw = config::load_raw(&config_path).unwrap();
    let exp = config::resolve(&raw, false).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for (label, threads) in [("a", 1usize), ("b", 4), ("c", 4)] {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        let grid = pool.install(|| run_grid(&exp)).unwrap();
        assert!(
            grid.failures.is_empty(),
            "demo grid failed: {:?}",
            grid.failures
        );
        let path = dir.path().join(format!("results-{label}.csv"));
        write_results(&grid.rows, &path).unwrap();
        outputs.push(std::fs::read(&path).unwrap());
    }
    let identical = outputs[0] == outputs[1] && outputs[1] == outputs[2];
    report(
        9,
        "grid determinism",
        identical,
        &format!(
            "results files byte-identical across worker counts 1/4/4 ({} bytes)",
            outputs[0].len()
        ),
    );
}

// ---------------------------------------------------------------------
// 10. Format round trips.
// ---------------------------------------------------------------------

#[test]
fn criterion_10_format_round_trips() {
    let dir = tempfile::tempdir().unwrap();

    // IDX: byte-valued features survive exactly.
    let features: Vec<f64> = (0..60).map(|i| ((i * 37) % 256) as f64 / 255.0).collect();
    let ds = Dataset::new(
        Mat64::from_vec(10, 6, features).unwrap(),
        vec![0, 1, 2, 3, 4, 0, 1, 2, 3, 9],
        10,
        "roundtrip",
    )
    .unwrap();
    let images = dir.path().join("x.idx");
    let labels = dir.path().join("y.idx");
    save_idx(&ds, &images, &labels).unwrap();
    let decoded = load_idx(&images, &labels).unwrap();
    let idx_ok =
        decoded.features.as_slice() == ds.features.as_slice() && decoded.labels == ds.labels;

    // Checkpoints: bitwise round trip including running stats.
    let spec = ModelSpec {
        input_dim: 6,
        num_classes: 4,
        hidden_dims: vec![8],
        activation: Activation::Relu,
        norm_kind: NormKind::BatchNorm,
    };
    let mut rng = RngStream::new(99, 0);
    let mut state = init_params(&spec, InitScheme::KaimingNormal, &mut rng).unwrap();
    state.bn_stats[0].mean[3] = -1.25;
    state.bn_stats[0].var[5] = 0.001953125;
    let ckpt = dir.path().join("model.fsck");
    save_checkpoint(&state, &ckpt).unwrap();
    let ckpt_ok = load_checkpoint(&ckpt, &spec).unwrap() == state;

    // Results: write -> read -> write is byte-stable.
    let (train, test, model) = tiny_task(3);
    let partition = Partition::single_client(train.len());
    let (hist, _) = run_federation(
        &train,
        &test,
        &partition,
        model,
        StrategyConfig::FedAvg,
        tiny_cfg(2, 3),
        &RngStream::new(3, 1),
    )
    .unwrap();
    let rows: Vec<fedsim::bench::ResultRow> = history_rows(&hist);
    let p1 = dir.path().join("r1.csv");
    let p2 = dir.path().join("r2.csv");
    write_results(&rows, &p1).unwrap();
    let back = fedsim::bench::read_results(&p1).unwrap();
    write_results(&back, &p2).unwrap();
    let results_ok = std::fs::read(&p1).unwrap() == std::fs::read(&p2).unwrap();

    report(
        10,
        "format round trips",
        idx_ok && ckpt_ok && results_ok,
        &format!("idx {idx_ok}, checkpoint {ckpt_ok}, results {results_ok}"),
    );
}

fn history_rows(hist: &FederationHistory) -> Vec<fedsim::bench::ResultRow> {
    hist.rounds
        .iter()
        .map(|m| fedsim::bench::ResultRow {
            arch: "softmax".into(),
            init: "random".into(),
            aggregation: "fedavg".into(),
            seed: 3,
            round: m.round,
            accuracy: m.accuracy,
            balanced_accuracy: m.balanced_accuracy,
            gap_to_central: m.balanced_accuracy - 0.912345678,
            drift: m.drift,
            bn_mismatch: m.bn_mismatch,
            cumulative_bytes: m.cumulative_bytes,
            status: "ok".into(),
        })
        .collect()
}
