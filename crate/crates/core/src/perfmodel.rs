//! Analytical cost model for synchronous data-parallel training.
//!
//! Time follows an α-β-γ model: a tree all-reduce over `P` workers takes
//! `log2(P)` stages of `α + β·payload` seconds, and local compute on `B/P`
//! examples takes `flops_per_image · B/P · γ` seconds.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerfError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("unknown {kind} preset {name:?} (known: {known})")]
    UnknownPreset {
        kind: &'static str,
        name: String,
        known: String,
    },
    #[error("energy table has no entry {0:?}")]
    MissingEnergy(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelProfile {
    pub name: String,
    pub num_params: u64,
    pub flops_per_image: f64,
}

impl ModelProfile {
    pub fn new(name: &str, num_params: u64, flops_per_image: f64) -> Result<Self, PerfError> {
        if num_params == 0 || !(flops_per_image > 0.0 && flops_per_image.is_finite()) {
            return Err(PerfError::Domain(format!(
                "model {name}: parameters and flops must be positive, got {num_params} and {flops_per_image}"
            )));
        }
        Ok(Self {
            name: name.to_string(),
            num_params,
            flops_per_image,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterSpec {
    pub name: String,
    pub workers: u64,
    /// Seconds per message.
    pub alpha: f64,
    /// Seconds per word.
    pub beta: f64,
    /// Seconds per flop.
    pub gamma: f64,
    pub word_bytes: u32,
    pub flops_per_second_total: Option<f64>,
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<(), PerfError> {
        let ok = self.workers >= 1
            && self.alpha >= 0.0
            && self.beta >= 0.0
            && self.gamma > 0.0
            && self.alpha.is_finite()
            && self.beta.is_finite()
            && self.gamma.is_finite()
            && self.word_bytes > 0
            && self.flops_per_second_total.is_none_or(|f| f > 0.0 && f.is_finite());
        if ok {
            Ok(())
        } else {
            Err(PerfError::Domain(format!("invalid cluster spec {self:?}")))
        }
    }

    pub fn with_workers(mut self, workers: u64) -> Self {
        self.workers = workers;
        self
    }
}

pub const FLOAT_ADD: &str = "32 bit float add";
pub const FLOAT_MUL: &str = "32 bit float multiply";
pub const DRAM_ACCESS: &str = "32 bit DRAM access";

/// Picojoules per operation.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyTable {
    entries: BTreeMap<String, f64>,
}

impl EnergyTable {
    pub fn new(entries: impl IntoIterator<Item = (String, f64)>) -> Result<Self, PerfError> {
        let entries: BTreeMap<String, f64> = entries.into_iter().collect();
        if let Some((k, v)) = entries.iter().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
            return Err(PerfError::Domain(format!(
                "energy entry {k:?} must be positive, got {v}"
            )));
        }
        Ok(Self { entries })
    }

    pub fn get(&self, op: &str) -> Result<f64, PerfError> {
        self.entries
            .get(op)
            .copied()
            .ok_or_else(|| PerfError::MissingEnergy(op.to_string()))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, f64)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Joules for `flops` priced as half adds, half multiplies, plus `words`
    /// priced at `comm_class`.
    pub fn estimate(&self, flops: f64, words: f64, comm_class: &str) -> Result<f64, PerfError> {
        let per_flop = 0.5 * self.get(FLOAT_ADD)? + 0.5 * self.get(FLOAT_MUL)?;
        let per_word = self.get(comm_class)?;
        Ok((flops * per_flop + words * per_word) * 1e-12)
    }
}

impl Default for EnergyTable {
    fn default() -> Self {
        energy_preset()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum StagePayload {
    /// Every tree stage carries the whole model.
    #[default]
    Full,
    /// Every stage carries `|W| / P` words.
    Sharded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostOptions {
    pub payload: StagePayload,
    pub energy: EnergyTable,
    pub comm_class: String,
}

impl Default for CostOptions {
    fn default() -> Self {
        Self {
            payload: StagePayload::Full,
            energy: EnergyTable::default(),
            comm_class: DRAM_ACCESS.to_string(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IterationCount {
    pub count: u64,
    /// The batch is larger than the whole budget, so no iteration fits.
    pub warning: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationTime {
    pub t_comp: f64,
    /// One tree stage.
    pub t_comm: f64,
    /// `log2(P) · t_comm`.
    pub t_comm_total: f64,
    pub t_iter: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub iterations: u64,
    pub iterations_warning: bool,
    pub messages: u64,
    pub comm_volume_words: u64,
    pub t_comp_per_iter: f64,
    /// All `log2(P)` stages.
    pub t_comm_per_iter: f64,
    pub total_time: f64,
    pub total_flops: f64,
    pub energy_estimate: f64,
}

impl CostReport {
    pub fn t_iter(&self) -> f64 {
        self.t_comp_per_iter + self.t_comm_per_iter
    }
}

fn positive(name: &str, v: u64) -> Result<(), PerfError> {
    if v == 0 {
        Err(PerfError::Domain(format!("{name} must be positive")))
    } else {
        Ok(())
    }
}

/// `floor(epochs · n / batch)`.
pub fn iterations(epochs: u64, n: u64, batch: u64) -> Result<IterationCount, PerfError> {
    positive("epochs", epochs)?;
    positive("n", n)?;
    positive("batch", batch)?;
    let total = u128::from(epochs) * u128::from(n);
    let count = u64::try_from(total / u128::from(batch))
        .map_err(|_| PerfError::Domain("iteration count overflows u64".into()))?;
    Ok(IterationCount {
        count,
        warning: count == 0,
    })
}

/// `|W| · iterations` words.
pub fn comm_volume(profile: &ModelProfile, epochs: u64, n: u64, batch: u64) -> Result<u64, PerfError> {
    let it = iterations(epochs, n, batch)?.count;
    profile
        .num_params
        .checked_mul(it)
        .ok_or_else(|| PerfError::Domain("communication volume overflows u64".into()))
}

/// Number of tree stages, `ceil(log2 P)`.
pub fn tree_stages(workers: u64) -> u64 {
    u64::from(workers.max(1).next_power_of_two().trailing_zeros())
}

fn stage_words(profile: &ModelProfile, spec: &ClusterSpec, payload: StagePayload) -> f64 {
    match payload {
        StagePayload::Full => profile.num_params as f64,
        StagePayload::Sharded => profile.num_params as f64 / spec.workers as f64,
    }
}

pub fn iteration_time(profile: &ModelProfile, spec: &ClusterSpec, batch: u64) -> Result<IterationTime, PerfError> {
    iteration_time_with(profile, spec, batch, StagePayload::Full)
}

pub fn iteration_time_with(
    profile: &ModelProfile,
    spec: &ClusterSpec,
    batch: u64,
    payload: StagePayload,
) -> Result<IterationTime, PerfError> {
    spec.validate()?;
    positive("batch", batch)?;
    if !batch.is_multiple_of(spec.workers) {
        return Err(PerfError::Domain(format!(
            "batch {batch} is not divisible by {} workers",
            spec.workers
        )));
    }
    let local = (batch / spec.workers) as f64;
    let t_comp = profile.flops_per_image * local * spec.gamma;
    let t_comm = spec.alpha + spec.beta * stage_words(profile, spec, payload);
    let t_comm_total = (spec.workers as f64).log2() * t_comm;
    Ok(IterationTime {
        t_comp,
        t_comm,
        t_comm_total,
        t_iter: t_comp + t_comm_total,
    })
}

pub fn total_time(
    profile: &ModelProfile,
    spec: &ClusterSpec,
    epochs: u64,
    n: u64,
    batch: u64,
) -> Result<CostReport, PerfError> {
    total_time_with(profile, spec, epochs, n, batch, &CostOptions::default())
}

pub fn total_time_with(
    profile: &ModelProfile,
    spec: &ClusterSpec,
    epochs: u64,
    n: u64,
    batch: u64,
    opts: &CostOptions,
) -> Result<CostReport, PerfError> {
    let it = iterations(epochs, n, batch)?;
    let time = iteration_time_with(profile, spec, batch, opts.payload)?;
    let stages = tree_stages(spec.workers);
    let messages = it
        .count
        .checked_mul(stages)
        .ok_or_else(|| PerfError::Domain("message count overflows u64".into()))?;
    let total_flops = epochs as f64 * n as f64 * profile.flops_per_image;
    let words_moved = messages as f64 * stage_words(profile, spec, opts.payload);
    Ok(CostReport {
        iterations: it.count,
        iterations_warning: it.warning,
        messages,
        comm_volume_words: comm_volume(profile, epochs, n, batch)?,
        t_comp_per_iter: time.t_comp,
        t_comm_per_iter: time.t_comm_total,
        total_time: it.count as f64 * time.t_iter,
        total_flops,
        energy_estimate: opts.energy.estimate(total_flops, words_moved, &opts.comm_class)?,
    })
}

/// Computation per unit of communication, `flops_per_image / |W|`.
pub fn scaling_ratio(profile: &ModelProfile) -> f64 {
    profile.flops_per_image / profile.num_params as f64
}

/// Seconds for `total_flops` at the machine's aggregate rate.
pub fn whole_machine_time(total_flops: f64, spec: &ClusterSpec) -> Result<f64, PerfError> {
    let rate = spec
        .flops_per_second_total
        .ok_or_else(|| PerfError::Domain(format!("cluster {} has no aggregate flop rate", spec.name)))?;
    Ok(total_flops / rate)
}

/// Nearest power of ten in log space.
pub fn round_to_power_of_ten(x: f64) -> f64 {
    10f64.powi(x.log10().round() as i32)
}

pub fn model_presets() -> Vec<ModelProfile> {
    let m = |name: &str, params: u64, flops: f64| ModelProfile {
        name: name.to_string(),
        num_params: params,
        flops_per_image: flops,
    };
    vec![
        m("alexnet", 61_000_000, 1.5e9),
        m("resnet50", 25_000_000, 7.7e9),
        m("resnet50-7.72g", 25_000_000, 7.72e9),
    ]
}

/// P100 time per flop.
pub const P100_GAMMA: f64 = 0.9e-13;

pub fn cluster_presets() -> Vec<ClusterSpec> {
    let c = |name: &str, alpha: f64, beta: f64| ClusterSpec {
        name: name.to_string(),
        workers: 1,
        alpha,
        beta,
        gamma: P100_GAMMA,
        word_bytes: 4,
        flops_per_second_total: None,
    };
    vec![
        c("mellanox_fdr", 0.7e-6, 0.2e-9),
        c("intel_qdr", 1.2e-6, 0.3e-9),
        c("intel_10gbe", 7.2e-6, 0.9e-9),
        c("p100", 0.0, 0.0),
        ClusterSpec {
            flops_per_second_total: Some(200e15),
            ..c("top_supercomputer", 0.0, 0.0)
        },
    ]
}

pub fn energy_preset() -> EnergyTable {
    let rows = [
        ("32 bit int add", 0.1),
        (FLOAT_ADD, 0.9),
        ("32 bit register access", 1.0),
        ("32 bit int multiply", 3.1),
        (FLOAT_MUL, 3.7),
        ("32 bit SRAM access", 5.0),
        (DRAM_ACCESS, 640.0),
    ];
    EnergyTable {
        entries: rows.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    }
}

fn lookup<T: Clone>(kind: &'static str, name: &str, all: Vec<T>, key: impl Fn(&T) -> &str) -> Result<T, PerfError> {
    let known: Vec<String> = all.iter().map(|t| key(t).to_string()).collect();
    all.iter()
        .find(|t| key(t) == name)
        .cloned()
        .ok_or_else(|| PerfError::UnknownPreset {
            kind,
            name: name.to_string(),
            known: known.join(", "),
        })
}

pub fn model_preset(name: &str) -> Result<ModelProfile, PerfError> {
    lookup("model", name, model_presets(), |m| &m.name)
}

pub fn cluster_preset(name: &str) -> Result<ClusterSpec, PerfError> {
    lookup("cluster", name, cluster_presets(), |c| &c.name)
}
