//! Runs one configured experiment and writes its artifacts.
//!
//! Output directory layout:
//!
//! | file                   | contents                                              |
//! |------------------------|-------------------------------------------------------|
//! | `metrics.csv`          | one row per round, round 0 being the initial model    |
//! | `summary.json`         | final accuracy, byte totals, per-round payload sizes  |
//! | `config.resolved.toml` | the effective config, including the seed              |
//! | `transfers.csv`        | every encoded frame: round, client, direction, bytes  |
//! | `partition.json`       | the client partition plan                             |
//!
//! Every file is a pure function of the config, so reruns are byte-identical.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{debug, info};
use rpn_core::codec::{self, PooledDelta};
use rpn_core::data::{load_idx, partition_random, synth_dataset, Dataset, PartitionPlan};
use rpn_core::proto::{
    fedavg_round, initial_metrics, server_round, setup_rpn, FaultPlan, FedAvgState, Federation, RoundMetrics, Transfer,
};
use rpn_core::Architecture;
use serde::{Deserialize, Serialize};

use crate::config::{Algorithm, DataSpec, ExperimentConfig};

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub accuracy: f64,
    pub loss: f64,
    pub upload_bytes: u64,
    pub download_bytes: u64,
    pub cum_bytes: u64,
}

/// Per-client payload of one round for one algorithm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Payload {
    pub parameters: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayloadComparison {
    pub rpn: Payload,
    pub fedavg: Payload,
    /// `100 · (1 − rpn / fedavg)` on parameter counts.
    pub parameter_reduction_percent: f64,
    pub byte_reduction_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub rounds: usize,
    pub clients: usize,
    pub clients_per_round: usize,
    pub model_parameters: usize,
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub best_accuracy: f64,
    /// Sample standard deviation of accuracy over the last five rounds
    /// (fewer if the run is shorter).
    pub last5_accuracy_std: f64,
    pub upload_bytes: u64,
    pub download_bytes: u64,
    pub total_bytes: u64,
    /// Upload per client per round under each algorithm, for this model.
    pub upload_per_client_round: PayloadComparison,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub transfers: Vec<Transfer>,
    pub summary: Summary,
}

/// Train and test sets described by the config.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.data {
        DataSpec::Idx { train_images, train_labels, test_images, test_labels, train_limit, test_limit } => {
            let mut train = load_idx(train_images, train_labels).context("loading training set")?;
            let mut test = load_idx(test_images, test_labels).context("loading test set")?;
            if let Some(n) = train_limit {
                train = train.truncate(*n);
            }
            if let Some(n) = test_limit {
                test = test.truncate(*n);
            }
            Ok((train, test))
        }
        DataSpec::Synth { classes, train_per_class, test_per_class, height, width, channels } => {
            // One draw so both splits share the class means; samples are interleaved by class.
            let all =
                synth_dataset(*classes, train_per_class + test_per_class, (*height, *width, *channels), cfg.seed)?;
            let split = classes * train_per_class;
            let train = all.truncate(split);
            let test = all.subset(&(split..all.len()).collect::<Vec<_>>());
            Ok((train, test))
        }
    }
}

/// Upload payload per client and round for both algorithms on `arch`.
pub fn payload_comparison(arch: &Architecture, pooling: bool) -> PayloadComparison {
    let g0 = arch.init_params(0);
    let pooled = if pooling { PooledDelta::zeros_for(&g0) } else { PooledDelta::zeros_unpooled(&g0) };
    let rpn = Payload { parameters: pooled.numel(), bytes: codec::count_bytes(&pooled) };
    let fedavg = Payload { parameters: g0.param_count(), bytes: codec::count_bytes_full(&g0) };
    PayloadComparison {
        parameter_reduction_percent: 100.0 * (1.0 - rpn.parameters as f64 / fedavg.parameters as f64),
        byte_reduction_percent: 100.0 * (1.0 - rpn.bytes as f64 / fedavg.bytes as f64),
        rpn,
        fedavg,
    }
}

fn row(m: &RoundMetrics, cum: &mut u64) -> MetricsRow {
    let (up, down) = (m.upload_bytes() as u64, m.download_bytes() as u64);
    *cum += up + down;
    let e = m.eval.expect("every round is evaluated");
    MetricsRow {
        round: m.round,
        accuracy: e.accuracy,
        loss: e.loss,
        upload_bytes: up,
        download_bytes: down,
        cum_bytes: *cum,
    }
}

/// Sample standard deviation; zero for fewer than two values.
fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn log_round(algorithm: Algorithm, m: &RoundMetrics, r: &MetricsRow) {
    info!(
        "{} round {:>3}: accuracy {:.4} loss {:.4} up {} B down {} B ({:.1}s)",
        algorithm.as_str(),
        r.round,
        r.accuracy,
        r.loss,
        r.upload_bytes,
        r.download_bytes,
        m.wall_time_secs
    );
}

/// Runs the experiment in memory and returns rows, transfers and summary.
pub fn simulate(cfg: &ExperimentConfig) -> Result<(Vec<MetricsRow>, Vec<Transfer>, Summary, PartitionPlan)> {
    cfg.validate()?;
    let (train, test) = load_data(cfg)?;
    let arch = cfg.architecture(train.sample_dims(), train.classes())?;
    let hp = cfg.hyperparams();
    hp.validate()?;
    let plan = partition_random(train.len(), hp.total_clients, cfg.seed, cfg.federation.size_jitter)?;
    info!(
        "{}: {} train / {} test samples, {} parameters, N={} M={} T={} E={} B={} lr={}",
        cfg.algorithm.as_str(),
        train.len(),
        test.len(),
        arch.param_count(),
        hp.total_clients,
        hp.clients_per_round,
        hp.rounds,
        hp.local_epochs,
        hp.batch_size,
        hp.learning_rate
    );
    debug!("client sizes {:?}", plan.sizes());
    let fed = Federation { arch: &arch, train: &train, hp };
    let mut rows = Vec::with_capacity(hp.rounds + 1);
    let mut log = Vec::new();
    let mut cum = 0u64;
    let faults = FaultPlan::none();
    match cfg.algorithm {
        Algorithm::Rpn => {
            let opts = cfg.rpn_options();
            let (mut server, mut clients, setup) = setup_rpn(&fed, &plan, &opts)?;
            let m0 = initial_metrics(&arch, &server.initial, &setup, Some(&test))?;
            rows.push(row(&m0, &mut cum));
            log_round(cfg.algorithm, &m0, rows.last().unwrap());
            log.extend(setup);
            for _ in 0..hp.rounds {
                let out = server_round(&server, &clients, &fed, &opts, &faults, Some(&test))?;
                rows.push(row(&out.metrics, &mut cum));
                log_round(cfg.algorithm, &out.metrics, rows.last().unwrap());
                log.extend(out.transfers);
                server = out.state;
                clients = out.clients;
            }
        }
        Algorithm::Fedavg => {
            let mut state = FedAvgState::new(&fed)?;
            let m0 = initial_metrics(&arch, &state.global, &[], Some(&test))?;
            rows.push(row(&m0, &mut cum));
            log_round(cfg.algorithm, &m0, rows.last().unwrap());
            for _ in 0..hp.rounds {
                let out = fedavg_round(&state, &plan, &fed, cfg.aggregation.fedavg, &faults, Some(&test))?;
                rows.push(row(&out.metrics, &mut cum));
                log_round(cfg.algorithm, &out.metrics, rows.last().unwrap());
                log.extend(out.transfers);
                state = out.state;
            }
        }
    }
    let last = rows.last().expect("round 0 is always present");
    let tail: Vec<f64> = rows.iter().skip(1).rev().take(5).map(|r| r.accuracy).collect();
    let summary = Summary {
        algorithm: cfg.algorithm,
        seed: cfg.seed,
        rounds: hp.rounds,
        clients: hp.total_clients,
        clients_per_round: hp.clients_per_round,
        model_parameters: arch.param_count(),
        final_accuracy: last.accuracy,
        final_loss: last.loss,
        best_accuracy: rows.iter().map(|r| r.accuracy).fold(0.0, f64::max),
        last5_accuracy_std: std_dev(&tail),
        upload_bytes: rows.iter().map(|r| r.upload_bytes).sum(),
        download_bytes: rows.iter().map(|r| r.download_bytes).sum(),
        total_bytes: last.cum_bytes,
        upload_per_client_round: payload_comparison(&arch, cfg.compression.pooling),
    };
    Ok((rows, log, summary, plan))
}

fn write_csv<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for item in items {
        w.serialize(item)?;
    }
    w.flush()?;
    Ok(())
}

/// Runs the experiment and writes every artifact into `cfg.out`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let Some(dir) = cfg.out.clone() else {
        bail!("no output directory: set `out` in the config or pass --out");
    };
    let (rows, transfers, summary, plan) = simulate(cfg)?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    if rows.is_empty() {
        // csv writes no header for an empty list; round 0 keeps this unreachable.
        bail!("no metrics recorded");
    }
    write_csv(&dir.join("metrics.csv"), &rows)?;
    write_csv(&dir.join("transfers.csv"), &transfers)?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    let mut resolved = cfg.clone();
    resolved.out = None;
    fs::write(dir.join("config.resolved.toml"), resolved.to_toml())?;
    fs::write(dir.join("partition.json"), serde_json::to_string(&plan)? + "\n")?;
    info!(
        "{}: final accuracy {:.4}, {} bytes transmitted, wrote {}",
        cfg.algorithm.as_str(),
        summary.final_accuracy,
        summary.total_bytes,
        dir.display()
    );
    Ok(RunOutput { dir, rows, transfers, summary })
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let rows = r
        .deserialize()
        .collect::<Result<Vec<MetricsRow>, _>>()
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok(rows)
}

pub fn read_transfers(path: &Path) -> Result<Vec<Transfer>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let rows =
        r.deserialize().collect::<Result<Vec<Transfer>, _>>().with_context(|| format!("parsing {}", path.display()))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn std_dev_examples() {
        assert_eq!(std_dev(&[]), 0.0);
        assert_eq!(std_dev(&[0.5; 5]), 0.0);
        assert_eq!(std_dev(&[0.7]), 0.0);
        assert!((std_dev(&[1.0, 3.0]) - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn reference_payload_comparison() {
        let p = payload_comparison(&Architecture::reference(), true);
        assert_eq!(p.fedavg.parameters, 553_866);
        // Kernels shrink 25×: 800 → 32 and 51,200 → 2,048; biases and the dense layer stay.
        assert_eq!(p.rpn.parameters, 32 + 32 + 2048 + 64 + 501_760 + 10);
        assert!(p.parameter_reduction_percent > 9.0 && p.parameter_reduction_percent < 9.1);
        let off = payload_comparison(&Architecture::reference(), false);
        assert_eq!(off.rpn, off.fedavg);
    }
}
