//! In-process simulation of synchronous data-parallel SGD.
//!
//! `P` replicas each own a contiguous slice of the global batch. Gradients
//! travel as exact per-worker sums and are combined by a pairwise tree in
//! ascending worker order, then converted to the batch mean once. Because the
//! sums are exact, every `P` dividing `B` reproduces the single-worker run
//! bit for bit.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use thiserror::Error;

use crate::exact::ExactVec;
use crate::nn::engine::{self, Collective, GradSums, Mode};
use crate::nn::{evaluate, Batch, Network, NnError, ParamSet};
use crate::optim::{sgd_step, HyperParams, OptimError, ScheduleState, StepReport};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("batch of {batch} cannot be split evenly over {workers} workers")]
    Partition { batch: usize, workers: usize },
    #[error("all-reduce protocol error in group {group}: {detail}")]
    Protocol { group: String, detail: String },
    #[error("replicas out of sync at iteration {iteration}: {detail}")]
    Consistency { iteration: u64, detail: String },
    #[error("invalid run: {0}")]
    InvalidRun(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

/// Contiguous slices in index order; worker `j` gets `[j·B/P, (j+1)·B/P)`.
pub fn partition_batch(batch: &Batch, workers: usize) -> Result<Vec<Batch>, SimError> {
    let b = batch.len();
    if workers == 0 || !b.is_multiple_of(workers) || b == 0 {
        return Err(SimError::Partition { batch: b, workers });
    }
    let local = b / workers;
    Ok((0..workers).map(|j| batch.slice(j * local, (j + 1) * local)).collect())
}

/// Rows of `data` at `indices`, in that order.
pub fn gather(data: &Batch, indices: &[usize]) -> Result<Batch, SimError> {
    let w = data.width();
    let mut x = Vec::with_capacity(indices.len() * w);
    let mut y = Vec::with_capacity(indices.len());
    for &i in indices {
        x.extend_from_slice(data.inputs.row(i));
        y.push(data.labels[i]);
    }
    let inputs = Tensor::from_vec(vec![indices.len(), w], x).map_err(NnError::from)?;
    Ok(Batch::new(inputs, y)?)
}

/// Deterministic permutation of `0..n` for one epoch.
pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ epoch.wrapping_add(1).wrapping_mul(GOLDEN));
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

/// Pairwise-left binary tree over workers in ascending order: at each stage
/// worker `2k` absorbs worker `2k+1`; an odd worker out passes through.
#[derive(Clone, Debug, Default)]
pub struct TreeAllReduce {
    stages: u64,
    reductions: u64,
}

impl TreeAllReduce {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tree stages executed so far.
    pub fn stages(&self) -> u64 {
        self.stages
    }

    /// Collective calls so far.
    pub fn reductions(&self) -> u64 {
        self.reductions
    }

    fn reduce<T>(
        &mut self,
        mut level: Vec<T>,
        mut combine: impl FnMut(&mut T, T) -> Result<(), SimError>,
    ) -> Result<T, SimError> {
        if level.is_empty() {
            return Err(SimError::Protocol {
                group: "<all>".into(),
                detail: "no workers".into(),
            });
        }
        self.reductions += 1;
        while level.len() > 1 {
            let mut next = Vec::with_capacity(level.len().div_ceil(2));
            let mut it = level.into_iter();
            while let Some(mut left) = it.next() {
                if let Some(right) = it.next() {
                    combine(&mut left, right)?;
                }
                next.push(left);
            }
            level = next;
            self.stages += 1;
        }
        Ok(level.pop().expect("one survivor"))
    }

    /// Elementwise sum of per-worker gradient sums. Group names and lengths
    /// must agree; a mismatch names the offending group.
    pub fn all_reduce_grads(&mut self, mut grads: Vec<GradSums>) -> Result<GradSums, SimError> {
        self.reduce_grads_in_place(&mut grads)?;
        Ok(grads.swap_remove(0))
    }

    /// Tree reduction leaving the total in `grads[0]`; the other entries are
    /// consumed as scratch.
    pub fn reduce_grads_in_place(&mut self, grads: &mut [GradSums]) -> Result<(), SimError> {
        if grads.is_empty() {
            return Err(SimError::Protocol {
                group: "<all>".into(),
                detail: "no workers".into(),
            });
        }
        self.reductions += 1;
        let mut stride = 1;
        while stride < grads.len() {
            for left in (0..grads.len()).step_by(2 * stride) {
                let right = left + stride;
                if right < grads.len() {
                    let (a, b) = grads.split_at_mut(right);
                    merge_grads(&mut a[left], &b[0])?;
                }
            }
            stride *= 2;
            self.stages += 1;
        }
        Ok(())
    }
}

fn merge_grads(left: &mut GradSums, right: &GradSums) -> Result<(), SimError> {
    if left.groups.len() != right.groups.len() {
        return Err(SimError::Protocol {
            group: "<all>".into(),
            detail: format!("{} groups vs {}", left.groups.len(), right.groups.len()),
        });
    }
    for ((ln, lv), (rn, rv)) in left.groups.iter_mut().zip(&right.groups) {
        if ln != rn || lv.len() != rv.len() {
            return Err(SimError::Protocol {
                group: ln.clone(),
                detail: format!("peer sent {rn} with {} values, expected {}", rv.len(), lv.len()),
            });
        }
        lv.merge(rv);
    }
    Ok(())
}

impl Collective for TreeAllReduce {
    fn all_reduce(&mut self, partials: Vec<ExactVec>) -> Result<ExactVec, NnError> {
        self.reduce(partials, |left, right| {
            if left.len() != right.len() {
                return Err(SimError::Protocol {
                    group: "<activations>".into(),
                    detail: format!("partial of length {} vs {}", right.len(), left.len()),
                });
            }
            left.merge(&right);
            Ok(())
        })
        .map_err(|e| NnError::ShardMismatch(e.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct WorkerState {
    pub worker_id: usize,
    pub params: ParamSet,
    pub batch: Batch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClusterRun {
    pub workers: usize,
    pub global_batch: usize,
    pub seed: u64,
}

impl ClusterRun {
    pub fn new(workers: usize, global_batch: usize, seed: u64) -> Result<Self, SimError> {
        if workers == 0 || global_batch == 0 || !global_batch.is_multiple_of(workers) {
            return Err(SimError::Partition {
                batch: global_batch,
                workers,
            });
        }
        Ok(Self {
            workers,
            global_batch,
            seed,
        })
    }

    pub fn local_batch(&self) -> usize {
        self.global_batch / self.workers
    }
}

/// Checks that every replica matches worker 0.
pub fn check_sync(workers: &[WorkerState], iteration: u64) -> Result<(), SimError> {
    let Some(first) = workers.first() else {
        return Err(SimError::InvalidRun("no workers".into()));
    };
    let reference = first.params.checksum();
    for w in &workers[1..] {
        if w.params.checksum() != reference || !w.params.bits_eq(&first.params) {
            return Err(SimError::Consistency {
                iteration,
                detail: format!("worker {} differs from worker 0", w.worker_id),
            });
        }
    }
    Ok(())
}

/// Training-mode forward pass over the workers' current slices, writing each
/// worker's exact gradient sum (over its own examples) into `grads`.
pub fn local_gradients(
    net: &Network,
    workers: &[WorkerState],
    coll: &mut TreeAllReduce,
    grads: &mut Vec<GradSums>,
) -> Result<engine::Forward, SimError> {
    check_sync(workers, 0)?;
    let replicas: Vec<&ParamSet> = workers.iter().map(|w| &w.params).collect();
    let shards: Vec<&Batch> = workers.iter().map(|w| &w.batch).collect();
    let fwd = engine::forward(net, &replicas, &shards, Mode::Train, coll)?;
    engine::backward_into(net, &replicas, &fwd, coll, grads)?;
    Ok(fwd)
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    /// Mean loss of the batch before the update.
    pub loss: f64,
    pub correct: usize,
    pub report: StepReport,
}

/// `P` replicas, their collective, and reusable gradient buffers.
#[derive(Clone, Debug)]
pub struct Cluster {
    pub run: ClusterRun,
    pub workers: Vec<WorkerState>,
    pub coll: TreeAllReduce,
    grads: Vec<GradSums>,
}

impl Cluster {
    /// Synchronized replicas of `params`; each worker's slice starts empty
    /// until the first step loads one.
    pub fn new(run: ClusterRun, params: &ParamSet, placeholder: &Batch) -> Self {
        let workers = (0..run.workers)
            .map(|worker_id| WorkerState {
                worker_id,
                params: params.clone(),
                batch: placeholder.clone(),
            })
            .collect();
        Self {
            run,
            workers,
            coll: TreeAllReduce::new(),
            grads: Vec::new(),
        }
    }

    /// Loads `batch` into the workers, computes and reduces gradients, and
    /// applies one update identically on every replica.
    pub fn global_step(
        &mut self,
        net: &Network,
        batch: &Batch,
        hp: &HyperParams,
        st: &mut ScheduleState,
    ) -> Result<StepOutcome, SimError> {
        check_sync(&self.workers, st.iteration)?;
        if batch.len() != self.run.global_batch {
            return Err(SimError::InvalidRun(format!(
                "batch of {} for a cluster configured with {}",
                batch.len(),
                self.run.global_batch
            )));
        }
        for (w, s) in self.workers.iter_mut().zip(partition_batch(batch, self.run.workers)?) {
            w.batch = s;
        }
        let fwd = local_gradients(net, &self.workers, &mut self.coll, &mut self.grads)?;
        let loss = fwd.mean_loss();
        if !loss.is_finite() {
            return Err(NnError::NumericOverflow {
                layer: net.specs().len() - 1,
            }
            .into());
        }
        self.coll.reduce_grads_in_place(&mut self.grads)?;
        let total = &self.grads[0];
        let examples = batch.len() as f64;
        let mut report = None;
        let mut next_state = *st;
        for w in self.workers.iter_mut() {
            total.write_mean_into(&mut w.params, examples)?;
            engine::update_running_stats(&mut w.params, &fwd);
            let mut local = *st;
            report = Some(sgd_step(&mut w.params, hp, &mut local)?);
            next_state = local;
        }
        check_sync(&self.workers, st.iteration)?;
        *st = next_state;
        Ok(StepOutcome {
            loss,
            correct: fwd.correct(),
            report: report.expect("at least one worker"),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: u64,
    pub iteration: u64,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
    /// Evaluated on the last iteration of each epoch; NaN elsewhere.
    pub test_acc: f64,
    pub lambda_min: f64,
    pub lambda_med: f64,
    pub lambda_max: f64,
    pub wall_ms: f64,
}

impl LogRow {
    fn same_values(&self, o: &LogRow) -> bool {
        let f = |a: f64, b: f64| a.to_bits() == b.to_bits();
        self.epoch == o.epoch
            && self.iteration == o.iteration
            && f(self.lr, o.lr)
            && f(self.loss, o.loss)
            && f(self.train_acc, o.train_acc)
            && f(self.test_acc, o.test_acc)
            && f(self.lambda_min, o.lambda_min)
            && f(self.lambda_med, o.lambda_med)
            && f(self.lambda_max, o.lambda_max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RunStatus {
    Completed,
    Diverged { iteration: u64, reason: String },
}

impl RunStatus {
    pub fn is_completed(&self) -> bool {
        matches!(self, RunStatus::Completed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
    pub status: RunStatus,
    /// Per-group λ of every logged iteration, aligned with `group_names`.
    pub group_lambdas: Vec<Vec<f64>>,
    pub group_names: Vec<String>,
}

impl TrainingLog {
    /// Test accuracy of the last epoch-end evaluation, NaN if none ran.
    pub fn final_test_acc(&self) -> f64 {
        self.rows
            .iter()
            .rev()
            .map(|r| r.test_acc)
            .find(|a| !a.is_nan())
            .unwrap_or(f64::NAN)
    }

    /// Equality of everything except wall-clock timings.
    pub fn same_trajectory(&self, other: &TrainingLog) -> bool {
        self.status == other.status
            && self.group_names == other.group_names
            && self.rows.len() == other.rows.len()
            && self.rows.iter().zip(&other.rows).all(|(a, b)| a.same_values(b))
            && self.group_lambdas.len() == other.group_lambdas.len()
            && self
                .group_lambdas
                .iter()
                .zip(&other.group_lambdas)
                .all(|(a, b)| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
    }
}

/// Final parameters alongside the log.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub log: TrainingLog,
    pub params: ParamSet,
}

/// Runs `floor(E·n/B)` global steps from parameters initialized with
/// `run.seed`, reshuffling the training set at every epoch boundary.
/// Iterations past `E·floor(n/B)` draw from further permutations.
pub fn train(
    net: &Network,
    run: &ClusterRun,
    train_set: &Batch,
    test_set: &Batch,
    hp: &HyperParams,
) -> Result<TrainOutput, SimError> {
    if hp.batch_size != run.global_batch {
        return Err(SimError::InvalidRun(format!(
            "hyperparameter batch {} vs cluster batch {}",
            hp.batch_size, run.global_batch
        )));
    }
    let params = net.init(run.seed);
    train_from(net, run, params, train_set, test_set, hp)
}

pub fn train_from(
    net: &Network,
    run: &ClusterRun,
    params: ParamSet,
    train_set: &Batch,
    test_set: &Batch,
    hp: &HyperParams,
) -> Result<TrainOutput, SimError> {
    let n = train_set.len();
    let mut st = ScheduleState::new(hp, n as u64)?;
    let mut cluster = Cluster::new(*run, &params, train_set);
    let b = run.global_batch;
    let group_names: Vec<String> = params.groups.iter().map(|g| g.name.clone()).collect();
    let mut rows = Vec::with_capacity(st.max_iterations as usize);
    let mut group_lambdas = Vec::with_capacity(st.max_iterations as usize);
    let mut status = RunStatus::Completed;
    let mut perm = Vec::new();
    let start = Instant::now();

    while !st.is_finished() {
        let iteration = st.iteration;
        let epoch = st.epoch();
        let within = (iteration % st.iterations_per_epoch) as usize;
        if within == 0 {
            perm = epoch_permutation(n, run.seed, epoch);
        }
        let batch = gather(train_set, &perm[within * b..(within + 1) * b])?;
        let out = match cluster.global_step(net, &batch, hp, &mut st) {
            Ok(out) => out,
            Err(
                e @ (SimError::Nn(NnError::NumericOverflow { .. }) | SimError::Optim(OptimError::Divergence { .. })),
            ) => {
                status = RunStatus::Diverged {
                    iteration,
                    reason: e.to_string(),
                };
                break;
            }
            Err(e) => return Err(e),
        };
        let epoch_end = (iteration + 1) % st.iterations_per_epoch == 0 || st.is_finished();
        let test_acc = if epoch_end {
            evaluate(net, &cluster.workers[0].params, test_set, 1024)?.1
        } else {
            f64::NAN
        };
        let (lambda_min, lambda_med, lambda_max) = out.report.lambda_summary();
        group_lambdas.push(out.report.scales.iter().map(|s| s.lambda).collect());
        rows.push(LogRow {
            epoch,
            iteration,
            lr: out.report.lr,
            loss: out.loss,
            train_acc: out.correct as f64 / b as f64,
            test_acc,
            lambda_min,
            lambda_med,
            lambda_max,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(TrainOutput {
        log: TrainingLog {
            rows,
            status,
            group_lambdas,
            group_names,
        },
        params: cluster.workers.swap_remove(0).params,
    })
}
