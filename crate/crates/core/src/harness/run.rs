//! Running configured experiments and the files they leave behind.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::data::{self, DatasetKind, Split, SyntheticSpec};
use super::HarnessError;
use crate::nn::Network;
use crate::parallel::{train, ClusterRun, LogRow, RunStatus, TrainingLog};
use crate::perfmodel::{cluster_preset, total_time, CostReport, ModelProfile};

/// Environment variable naming the directory relative output paths resolve against.
pub const OUTPUT_ROOT_VAR: &str = "BIGBATCH_OUT";

/// Flops per example per multiply-add: two forward, four backward.
pub const FLOPS_PER_MAC: f64 = 6.0;

pub const LOG_FILE: &str = "log.csv";
pub const SCHEDULE_FILE: &str = "schedule.csv";
pub const COST_FILE: &str = "cost.csv";
pub const SWEEP_FILE: &str = "sweep.csv";

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn config_err(message: String) -> HarnessError {
    HarnessError::Config { line: None, message }
}

/// Reads and parses a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    ExperimentConfig::parse(&text).map_err(|e| match e {
        HarnessError::Config { line, message } => HarnessError::Config {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

/// Generates or loads the configured data and checks it against the network.
pub fn load_dataset(cfg: &ExperimentConfig, net: &Network) -> Result<Split, HarnessError> {
    let d = &cfg.dataset;
    let split = match d.kind {
        DatasetKind::Idx => {
            let (images, labels) = match (&d.path, &d.labels) {
                (Some(i), Some(l)) => (i, l),
                _ => return Err(config_err("idx-file dataset needs path and labels".into())),
            };
            let all = data::load_idx(images, labels, d.num_classes)?;
            if let Some(n) = d.n {
                if n != all.len() {
                    return Err(HarnessError::Validation(format!(
                        "config expects {n} examples, files hold {}",
                        all.len()
                    )));
                }
            }
            data::split(&all, d.seed)?
        }
        kind => data::gen_synthetic(&SyntheticSpec {
            kind,
            n: d.n.ok_or_else(|| config_err("generated datasets need n".into()))?,
            num_classes: d.num_classes,
            input_dim: d.input_dim,
            noise: d.noise,
            seed: d.seed,
        })?,
    };
    if split.train.width() != net.input_dim() || d.input_dim != net.input_dim() {
        return Err(config_err(format!(
            "network takes {} inputs, dataset has {}",
            net.input_dim(),
            split.train.width()
        )));
    }
    if d.num_classes != net.num_classes() {
        return Err(config_err(format!(
            "network has {} outputs, dataset has {} classes",
            net.num_classes(),
            d.num_classes
        )));
    }
    Ok(split)
}

/// The desk-scale network as a cost-model profile.
pub fn network_profile(net: &Network) -> Result<ModelProfile, HarnessError> {
    let params = net.init(0).num_params() as u64;
    Ok(ModelProfile::new(
        "network",
        params,
        FLOPS_PER_MAC * net.dense_macs() as f64,
    )?)
}

/// Cost of the configured run under the configured interconnect.
pub fn cost_report(cfg: &ExperimentConfig, net: &Network, n_train: usize) -> Result<CostReport, HarnessError> {
    let spec = cluster_preset(&cfg.cluster.interconnect)?.with_workers(cfg.cluster.workers as u64);
    Ok(total_time(
        &network_profile(net)?,
        &spec,
        cfg.hyper.epochs,
        n_train as u64,
        cfg.hyper.batch_size as u64,
    )?)
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub log: TrainingLog,
    pub cost: CostReport,
    pub out_dir: PathBuf,
}

/// Trains, prices, and writes `log.csv`, `schedule.csv` and `cost.csv` under
/// the configured directory (relative to `root`).
pub fn run_experiment(cfg: &ExperimentConfig, root: &Path) -> Result<RunResult, HarnessError> {
    cfg.validate()?;
    let net = Network::new(cfg.network.clone())?;
    let split = load_dataset(cfg, &net)?;
    let cost = cost_report(cfg, &net, split.train.len())?;
    let run = ClusterRun::new(cfg.cluster.workers, cfg.hyper.batch_size, cfg.cluster.seed)?;
    let out = train(&net, &run, &split.train, &split.test, &cfg.hyper)?;
    let log = out.log;
    let executed = log.rows.len() as u64;
    let consistent = match log.status {
        RunStatus::Completed => executed == cost.iterations,
        RunStatus::Diverged { .. } => executed <= cost.iterations,
    };
    if !consistent {
        return Err(HarnessError::Validation(format!(
            "executed {executed} iterations, cost model expects {}",
            cost.iterations
        )));
    }
    let out_dir = root.join(&cfg.output.dir);
    fs::create_dir_all(&out_dir).map_err(|e| io_err(&out_dir, e))?;
    let echo = cfg.echo();
    write_file(&out_dir.join(LOG_FILE), &log_csv(&log, &echo)?)?;
    write_file(&out_dir.join(SCHEDULE_FILE), &schedule_csv(&log, &echo)?)?;
    write_file(
        &out_dir.join(COST_FILE),
        &cost_csv(&cost, cfg, split.train.len(), &echo)?,
    )?;
    Ok(RunResult { log, cost, out_dir })
}

fn write_file(path: &Path, text: &str) -> Result<(), HarnessError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn csv_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Csv(e.to_string())
}

fn csv_text(header: &str, head: &[String], rows: &[Vec<String>]) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(head).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    let body = String::from_utf8(w.into_inner().map_err(csv_err)?).map_err(csv_err)?;
    Ok(format!("{header}{body}"))
}

fn status_text(s: &RunStatus) -> String {
    match s {
        RunStatus::Completed => "completed".into(),
        RunStatus::Diverged { iteration, reason } => format!("diverged {iteration} {reason}"),
    }
}

fn parse_status(s: &str) -> Result<RunStatus, HarnessError> {
    if s == "completed" {
        return Ok(RunStatus::Completed);
    }
    let rest = s
        .strip_prefix("diverged ")
        .ok_or_else(|| HarnessError::Csv(format!("unrecognized status {s:?}")))?;
    let (it, reason) = rest.split_once(' ').unwrap_or((rest, ""));
    Ok(RunStatus::Diverged {
        iteration: it.parse().map_err(csv_err)?,
        reason: reason.to_string(),
    })
}

const STATUS_PREFIX: &str = "# status = ";

pub const LOG_COLUMNS: [&str; 10] = [
    "epoch",
    "iteration",
    "lr",
    "loss",
    "train_acc",
    "test_acc",
    "lambda_min",
    "lambda_med",
    "lambda_max",
    "wall_ms",
];

pub fn log_csv(log: &TrainingLog, echo: &str) -> Result<String, HarnessError> {
    let header = format!("{echo}{STATUS_PREFIX}{}\n", status_text(&log.status));
    let head: Vec<String> = LOG_COLUMNS.iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<String>> = log
        .rows
        .iter()
        .map(|r| {
            vec![
                r.epoch.to_string(),
                r.iteration.to_string(),
                r.lr.to_string(),
                r.loss.to_string(),
                r.train_acc.to_string(),
                r.test_acc.to_string(),
                r.lambda_min.to_string(),
                r.lambda_med.to_string(),
                r.lambda_max.to_string(),
                r.wall_ms.to_string(),
            ]
        })
        .collect();
    csv_text(&header, &head, &rows)
}

/// Per-iteration rate and the λ of every parameter group.
pub fn schedule_csv(log: &TrainingLog, echo: &str) -> Result<String, HarnessError> {
    let mut head = vec!["iteration".to_string(), "lr".to_string()];
    head.extend(log.group_names.iter().map(|g| format!("lambda:{g}")));
    let rows: Vec<Vec<String>> = log
        .rows
        .iter()
        .zip(&log.group_lambdas)
        .map(|(r, ls)| {
            let mut v = vec![r.iteration.to_string(), r.lr.to_string()];
            v.extend(ls.iter().map(f64::to_string));
            v
        })
        .collect();
    csv_text(echo, &head, &rows)
}

pub const COST_COLUMNS: [&str; 14] = [
    "model",
    "interconnect",
    "workers",
    "batch",
    "epochs",
    "n",
    "iterations",
    "messages",
    "comm_volume_words",
    "t_comp_per_iter",
    "t_comm_per_iter",
    "total_time",
    "total_flops",
    "energy_j",
];

fn cost_csv(c: &CostReport, cfg: &ExperimentConfig, n_train: usize, echo: &str) -> Result<String, HarnessError> {
    let head: Vec<String> = COST_COLUMNS.iter().map(|s| s.to_string()).collect();
    let row = vec![
        "network".to_string(),
        cfg.cluster.interconnect.clone(),
        cfg.cluster.workers.to_string(),
        cfg.hyper.batch_size.to_string(),
        cfg.hyper.epochs.to_string(),
        n_train.to_string(),
        c.iterations.to_string(),
        c.messages.to_string(),
        c.comm_volume_words.to_string(),
        c.t_comp_per_iter.to_string(),
        c.t_comm_per_iter.to_string(),
        c.total_time.to_string(),
        c.total_flops.to_string(),
        c.energy_estimate.to_string(),
    ];
    csv_text(echo, &head, &[row])
}

fn reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes())
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T, HarnessError>
where
    T::Err: std::fmt::Display,
{
    rec.get(i)
        .ok_or_else(|| HarnessError::Csv(format!("row has no column {i}")))?
        .parse()
        .map_err(csv_err)
}

/// Parses `log.csv` and `schedule.csv` text back into a log.
pub fn parse_log(log_text: &str, schedule_text: &str) -> Result<TrainingLog, HarnessError> {
    let status_line = log_text
        .lines()
        .find_map(|l| l.strip_prefix(STATUS_PREFIX))
        .ok_or_else(|| HarnessError::Csv("log has no status line".into()))?;
    let status = parse_status(status_line)?;
    let mut rows = Vec::new();
    for rec in reader(log_text).records() {
        let rec = rec.map_err(csv_err)?;
        rows.push(LogRow {
            epoch: field(&rec, 0)?,
            iteration: field(&rec, 1)?,
            lr: field(&rec, 2)?,
            loss: field(&rec, 3)?,
            train_acc: field(&rec, 4)?,
            test_acc: field(&rec, 5)?,
            lambda_min: field(&rec, 6)?,
            lambda_med: field(&rec, 7)?,
            lambda_max: field(&rec, 8)?,
            wall_ms: field(&rec, 9)?,
        });
    }
    let mut sched = reader(schedule_text);
    let group_names: Vec<String> = sched
        .headers()
        .map_err(csv_err)?
        .iter()
        .skip(2)
        .map(|h| h.strip_prefix("lambda:").unwrap_or(h).to_string())
        .collect();
    let mut group_lambdas = Vec::new();
    for rec in sched.records() {
        let rec = rec.map_err(csv_err)?;
        group_lambdas.push(
            (2..rec.len())
                .map(|i| field(&rec, i))
                .collect::<Result<Vec<f64>, _>>()?,
        );
    }
    Ok(TrainingLog {
        rows,
        status,
        group_lambdas,
        group_names,
    })
}

/// Reads the log files of a finished run directory.
pub fn read_log(dir: &Path) -> Result<TrainingLog, HarnessError> {
    let read = |f: &str| {
        let p = dir.join(f);
        fs::read_to_string(&p).map_err(|e| io_err(&p, e))
    };
    parse_log(&read(LOG_FILE)?, &read(SCHEDULE_FILE)?)
}

/// One line of a sweep comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub name: String,
    pub batch: usize,
    pub workers: usize,
    pub base_lr: f64,
    pub warmup_epochs: u64,
    pub lars: bool,
    pub status: String,
    pub final_test_acc: f64,
    /// First epoch (1-based) whose test accuracy reached the target.
    pub epochs_to_target: Option<u64>,
    pub iterations: u64,
    pub predicted_time: f64,
    pub comm_volume_words: u64,
    pub messages: u64,
    pub energy_j: f64,
}

pub const SWEEP_COLUMNS: [&str; 14] = [
    "name",
    "batch",
    "workers",
    "base_lr",
    "warmup_epochs",
    "lars",
    "status",
    "final_test_acc",
    "epochs_to_target",
    "iterations",
    "predicted_time",
    "comm_volume_words",
    "messages",
    "energy_j",
];

fn epochs_to_target(log: &TrainingLog, target: f64) -> Option<u64> {
    log.rows
        .iter()
        .find(|r| !r.test_acc.is_nan() && r.test_acc >= target)
        .map(|r| r.epoch + 1)
}

/// Runs every config (concurrently) and writes `sweep.csv` under `root`.
/// Configs must share the dataset and the epoch budget.
pub fn sweep(configs: &[(String, ExperimentConfig)], root: &Path, target: f64) -> Result<Vec<SweepRow>, HarnessError> {
    let Some((_, first)) = configs.first() else {
        return Err(config_err("sweep needs at least one config".into()));
    };
    for (name, c) in configs {
        if c.hyper.epochs != first.hyper.epochs {
            return Err(config_err(format!(
                "{name} trains for {} epochs, the sweep budget is {}",
                c.hyper.epochs, first.hyper.epochs
            )));
        }
        if c.dataset != first.dataset {
            return Err(config_err(format!("{name} uses a different dataset")));
        }
    }
    let mut dirs: Vec<&Path> = configs.iter().map(|(_, c)| c.output.dir.as_path()).collect();
    dirs.sort();
    if dirs.windows(2).any(|w| w[0] == w[1]) {
        return Err(config_err("sweep configs must use distinct output directories".into()));
    }
    let results: Vec<Result<RunResult, HarnessError>> =
        configs.par_iter().map(|(_, c)| run_experiment(c, root)).collect();
    let mut rows = Vec::with_capacity(configs.len());
    for ((name, c), r) in configs.iter().zip(results) {
        let r = r?;
        rows.push(SweepRow {
            name: name.clone(),
            batch: c.hyper.batch_size,
            workers: c.cluster.workers,
            base_lr: c.hyper.base_lr,
            warmup_epochs: c.hyper.warmup_epochs,
            lars: c.hyper.lars_enabled,
            status: status_text(&r.log.status),
            final_test_acc: r.log.final_test_acc(),
            epochs_to_target: epochs_to_target(&r.log, target),
            iterations: r.cost.iterations,
            predicted_time: r.cost.total_time,
            comm_volume_words: r.cost.comm_volume_words,
            messages: r.cost.messages,
            energy_j: r.cost.energy_estimate,
        });
    }
    let mut header = format!("# target_acc = {target}\n");
    for (name, c) in configs {
        let _ = writeln!(header, "# config {name}");
        header.push_str(&c.echo());
    }
    fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
    let path = root.join(SWEEP_FILE);
    write_file(&path, &sweep_csv(&rows, &header)?)?;
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow], header: &str) -> Result<String, HarnessError> {
    let head: Vec<String> = SWEEP_COLUMNS.iter().map(|s| s.to_string()).collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.name.clone(),
                r.batch.to_string(),
                r.workers.to_string(),
                r.base_lr.to_string(),
                r.warmup_epochs.to_string(),
                r.lars.to_string(),
                r.status.clone(),
                r.final_test_acc.to_string(),
                r.epochs_to_target.map(|e| e.to_string()).unwrap_or_default(),
                r.iterations.to_string(),
                r.predicted_time.to_string(),
                r.comm_volume_words.to_string(),
                r.messages.to_string(),
                r.energy_j.to_string(),
            ]
        })
        .collect();
    csv_text(header, &head, &body)
}

pub fn parse_sweep(text: &str) -> Result<Vec<SweepRow>, HarnessError> {
    let mut out = Vec::new();
    for rec in reader(text).records() {
        let rec = rec.map_err(csv_err)?;
        let ett = rec.get(8).unwrap_or("");
        out.push(SweepRow {
            name: field(&rec, 0)?,
            batch: field(&rec, 1)?,
            workers: field(&rec, 2)?,
            base_lr: field(&rec, 3)?,
            warmup_epochs: field(&rec, 4)?,
            lars: field(&rec, 5)?,
            status: field(&rec, 6)?,
            final_test_acc: field(&rec, 7)?,
            epochs_to_target: if ett.is_empty() {
                None
            } else {
                Some(ett.parse().map_err(csv_err)?)
            },
            iterations: field(&rec, 9)?,
            predicted_time: field(&rec, 10)?,
            comm_volume_words: field(&rec, 11)?,
            messages: field(&rec, 12)?,
            energy_j: field(&rec, 13)?,
        });
    }
    Ok(out)
}

/// Configs in `dir` with the `.cfg` extension, by file name.
pub fn load_config_dir(dir: &Path) -> Result<Vec<(String, ExperimentConfig)>, HarnessError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "cfg"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((name, load_config(p)?))
        })
        .collect()
}
