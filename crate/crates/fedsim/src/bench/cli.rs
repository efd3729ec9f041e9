//! Command-line entry points.

use super::config::{self, Preset, RawExperimentFile};
use super::grid::run_grid;
use super::results::{format_summary, read_results, summarize, write_results};
use crate::data::{
    dirichlet_partition, heterogeneity_report, load_idx, synth_blobs, train_eval_split,
};
use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::numkit::RngStream;
use crate::pretrain::{initialize, save_checkpoint};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "fedsim",
    version,
    about = "Deterministic cross-silo federated learning simulator and benchmark harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single experiment described by a JSON config file.
    Run {
        config: PathBuf,
        /// Replace the config's seed list with one seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for the results file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Fill missing schedule/optimizer/loss settings from a profile.
        #[arg(long, value_enum)]
        preset: Option<Preset>,
    },
    /// Sweep every model x init x strategy cell of a grid spec file.
    Grid {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
    },
    /// Show shard sizes and label heterogeneity for the configured
    /// partition.
    PartitionReport {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Produce an initialization checkpoint from the configured dataset,
    /// model, and init sections.
    Pretrain {
        config: PathBuf,
        /// Where to write the checkpoint.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render a results file as a per-cell gap table.
    Summarize { results: PathBuf },
}

/// Parses `argv` and runs the selected subcommand. Returns the process
/// exit code: 0 on success, 1 on config/runtime failures (with a
/// diagnostic on stderr), 2 on usage errors.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_with_preset(path: &Path, preset: Option<Preset>) -> Result<RawExperimentFile> {
    let mut raw = config::load_raw(path)?;
    if let Some(p) = preset {
        p.apply(&mut raw);
    }
    Ok(raw)
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Run {
            config,
            seed,
            out,
            preset,
        } => execute_experiment(&config, seed, out, preset, true),
        Command::Grid {
            config,
            seed,
            out,
            preset,
        } => execute_experiment(&config, seed, out, preset, false),
        Command::PartitionReport { config, seed } => partition_report(&config, seed),
        Command::Pretrain { config, out, seed } => pretrain(&config, &out, seed),
        Command::Summarize { results } => {
            let rows = read_results(&results)?;
            print!("{}", format_summary(&summarize(&rows)));
            Ok(0)
        }
    }
}

fn execute_experiment(
    path: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    preset: Option<Preset>,
    single: bool,
) -> Result<i32> {
    let raw = load_with_preset(path, preset)?;
    let mut exp = config::resolve(&raw, single)?;
    if let Some(s) = seed {
        exp.seeds = vec![s];
    }
    if let Some(dir) = out {
        exp.output_dir = dir;
    }
    std::fs::create_dir_all(&exp.output_dir)
        .map_err(|e| Error::io(format!("creating {}", exp.output_dir.display()), e))?;

    let started = Instant::now();
    let report = run_grid(&exp)?;
    let results_path = exp.output_dir.join("results.csv");
    write_results(&report.rows, &results_path)?;

    for failure in &report.failures {
        eprintln!("warning: {failure}");
    }
    println!(
        "{} federated runs, {} baselines, {} rows -> {} ({:.2}s)",
        report.federated_runs,
        report.baseline_runs,
        report.rows.len(),
        results_path.display(),
        started.elapsed().as_secs_f64()
    );
    print!("{}", format_summary(&summarize(&report.rows)));

    if report.federated_runs == 0 {
        eprintln!("error: every cell failed");
        return Ok(1);
    }
    Ok(0)
}

fn build_dataset_for_tools(raw: &RawExperimentFile, seed: u64) -> Result<crate::data::Dataset> {
    let dataset = raw
        .dataset
        .as_ref()
        .ok_or_else(|| Error::config("dataset", "missing required field"))?;
    match dataset {
        config::RawDataset::Synthetic {
            num_classes,
            dim,
            n_per_class,
            separation,
            noise_std,
        } => {
            let mut rng = RngStream::new(seed, 0x10);
            synth_blobs(
                *num_classes,
                *dim,
                *n_per_class,
                *separation,
                *noise_std,
                &mut rng,
            )
        }
        config::RawDataset::Idx { images, labels } => {
            load_idx(&PathBuf::from(images), &PathBuf::from(labels))
        }
    }
}

fn partition_report(path: &Path, seed: Option<u64>) -> Result<i32> {
    let raw = config::load_raw(path)?;
    let seed = seed
        .or_else(|| raw.seeds.as_ref().and_then(|s| s.first().copied()))
        .unwrap_or(0);
    let fed = raw
        .federation
        .as_ref()
        .ok_or_else(|| Error::config("federation", "missing required field"))?;
    let ds = build_dataset_for_tools(&raw, seed)?;
    let eval_fraction = fed.eval_fraction.unwrap_or(0.25);
    let mut split_rng = RngStream::new(seed, 0x11);
    let (train, _) = train_eval_split(&ds, eval_fraction, &mut split_rng)?;
    let mut part_rng = RngStream::new(seed, 0x12);
    let partition = dirichlet_partition(
        &train,
        fed.num_clients,
        fed.alpha,
        fed.min_size.unwrap_or(10),
        &mut part_rng,
    )?;
    let report = heterogeneity_report(&partition, &train)?;

    println!(
        "dataset {} ({} train samples, {} classes), {} clients, alpha {}",
        train.name,
        train.len(),
        train.num_classes,
        fed.num_clients,
        fed.alpha
    );
    println!(
        "global label histogram: {}",
        fmt_hist(&report.global_histogram)
    );
    for (i, size) in report.client_sizes.iter().enumerate() {
        println!(
            "client {i}: {size} samples, tv_to_global {:.4}, histogram {}",
            report.tv_to_global[i],
            fmt_hist(&report.label_histograms[i])
        );
    }
    println!("mean tv_to_global: {:.4}", report.mean_tv_to_global);
    println!("pairwise tv:");
    for row in &report.pairwise_tv {
        println!(
            "  {}",
            row.iter()
                .map(|v| format!("{v:.3}"))
                .collect::<Vec<_>>()
                .join(" ")
        );
    }
    Ok(0)
}

fn fmt_hist(h: &crate::numkit::Vec64) -> String {
    format!(
        "[{}]",
        h.iter()
            .map(|v| format!("{v:.3}"))
            .collect::<Vec<_>>()
            .join(", ")
    )
}

fn pretrain(path: &Path, out: &Path, seed: Option<u64>) -> Result<i32> {
    let raw = config::load_raw(path)?;
    let seed = seed
        .or_else(|| raw.seeds.as_ref().and_then(|s| s.first().copied()))
        .unwrap_or(0);
    let exp_model = raw
        .model
        .as_ref()
        .ok_or_else(|| Error::config("model", "missing required field"))?;
    let init = raw
        .init
        .as_ref()
        .ok_or_else(|| Error::config("init", "missing required field"))?;
    let named_model = config::resolve_model_section(exp_model)?;
    let named_init = config::resolve_init_section(init)?;
    let ds = build_dataset_for_tools(&raw, seed)?;
    let spec = ModelSpec {
        input_dim: ds.dim(),
        num_classes: ds.num_classes,
        hidden_dims: named_model.hidden_dims.clone(),
        activation: named_model.activation,
        norm_kind: named_model.norm_kind,
    };
    let mut rng = RngStream::new(seed, 0x0001_0000);
    let state = initialize(&named_init.strategy, &spec, Some(&ds), &mut rng)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
        }
    }
    save_checkpoint(&state, out)?;
    println!(
        "wrote checkpoint for {} ({} params) to {}",
        named_model.name,
        spec.param_count(),
        out.display()
    );
    Ok(0)
}
