//! Lockstep forward/backward over a batch split into shards.
//!
//! Each shard is evaluated against its own parameter replica. Whenever a
//! layer needs a sum over the whole batch (batch-norm statistics and their
//! backward terms) the per-shard partials are handed to a [`Collective`].
//! Parameter gradients come back as one exact sum per shard, in the sum-over-
//! examples convention; callers combine and scale them.

use crate::exact::{ExactSum, ExactVec};
use crate::nn::{Batch, Network, NnError, NormStats, Op, ParamSet, BN_RUNNING_MOMENTUM};
use crate::tensor::Tensor;

/// Combines one exact partial per shard into the batch-wide sum.
pub trait Collective {
    fn all_reduce(&mut self, partials: Vec<ExactVec>) -> Result<ExactVec, NnError>;
}

/// Merges partials left to right in shard order, with no communication model.
#[derive(Clone, Copy, Debug, Default)]
pub struct LocalSum;

impl Collective for LocalSum {
    fn all_reduce(&mut self, partials: Vec<ExactVec>) -> Result<ExactVec, NnError> {
        let mut it = partials.into_iter();
        let mut acc = it.next().ok_or_else(|| NnError::ShardMismatch("no partials".into()))?;
        for p in it {
            if p.len() != acc.len() {
                return Err(NnError::ShardMismatch(format!(
                    "partial of length {} vs {}",
                    p.len(),
                    acc.len()
                )));
            }
            acc.merge(&p);
        }
        Ok(acc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for batch norm; gradients available.
    Train,
    /// Running statistics for batch norm.
    Eval,
}

#[derive(Debug)]
enum LayerCache {
    Dense { input: Tensor },
    Relu { input: Tensor },
    BatchNorm { xhat: Tensor, inv_std: Vec<f64> },
    Head { probs: Tensor, labels: Vec<usize> },
}

/// Result of a lockstep forward pass.
#[derive(Debug)]
pub struct Forward {
    mode: Mode,
    caches: Vec<Vec<LayerCache>>,
    fingerprints: Vec<u64>,
    batch_stats: Vec<NormStats>,
    loss_sum: ExactSum,
    shard_correct: Vec<usize>,
    examples: usize,
}

impl Forward {
    /// Exact sum of per-example losses over all shards.
    pub fn loss_sum(&self) -> &ExactSum {
        &self.loss_sum
    }

    pub fn mean_loss(&self) -> f64 {
        self.loss_sum.round() / self.examples as f64
    }

    /// Examples whose arg-max prediction equals the label, over all shards.
    pub fn correct(&self) -> usize {
        self.shard_correct.iter().sum()
    }

    pub fn shard_correct(&self) -> &[usize] {
        &self.shard_correct
    }

    pub fn examples(&self) -> usize {
        self.examples
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Whole-batch mean and (biased) variance per batch-norm layer. Empty in
    /// evaluation mode.
    pub fn batch_stats(&self) -> &[NormStats] {
        &self.batch_stats
    }
}

/// Exact per-group gradient sums of one shard, aligned with `ParamSet::groups`.
#[derive(Clone, Debug)]
pub struct GradSums {
    pub groups: Vec<(String, ExactVec)>,
}

impl GradSums {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            groups: params
                .groups
                .iter()
                .map(|g| (g.name.clone(), ExactVec::zeros(g.param.len())))
                .collect(),
        }
    }

    pub fn clear(&mut self) {
        for (_, v) in self.groups.iter_mut() {
            v.clear();
        }
    }

    /// Whether the names and lengths match `params`.
    pub fn matches(&self, params: &ParamSet) -> bool {
        self.check_layout(params).is_ok()
    }

    /// Rounds each sum and divides by `divisor` into the `grad` buffers.
    pub fn write_mean_into(&self, params: &mut ParamSet, divisor: f64) -> Result<(), NnError> {
        self.check_layout(params)?;
        for ((_, sums), g) in self.groups.iter().zip(params.groups.iter_mut()) {
            for (out, s) in g.grad.data_mut().iter_mut().zip(sums.round()) {
                *out = s / divisor;
            }
        }
        Ok(())
    }

    /// Rounds each sum into the `grad` buffers without scaling.
    pub fn write_sum_into(&self, params: &mut ParamSet) -> Result<(), NnError> {
        self.check_layout(params)?;
        for ((_, sums), g) in self.groups.iter().zip(params.groups.iter_mut()) {
            sums.round_into(g.grad.data_mut());
        }
        Ok(())
    }

    fn check_layout(&self, params: &ParamSet) -> Result<(), NnError> {
        let ok = self.groups.len() == params.groups.len()
            && self
                .groups
                .iter()
                .zip(&params.groups)
                .all(|((n, s), g)| *n == g.name && s.len() == g.param.len());
        if ok {
            Ok(())
        } else {
            Err(NnError::ShardMismatch(
                "gradient sums do not match the parameter layout".into(),
            ))
        }
    }
}

fn check_inputs(net: &Network, replicas: &[&ParamSet], shards: &[&Batch]) -> Result<usize, NnError> {
    if shards.is_empty() || replicas.len() != shards.len() {
        return Err(NnError::ShardMismatch(format!(
            "{} replicas for {} shards",
            replicas.len(),
            shards.len()
        )));
    }
    for r in replicas {
        check_layout(net, r)?;
    }
    let classes = net.num_classes();
    let mut offset = 0;
    for b in shards {
        if b.width() != net.input_dim() {
            return Err(NnError::InputWidth {
                expected: net.input_dim(),
                got: b.width(),
            });
        }
        if let Some(i) = b.labels.iter().position(|&l| l >= classes) {
            return Err(NnError::LabelOutOfRange {
                index: offset + i,
                label: b.labels[i],
                classes,
            });
        }
        offset += b.len();
    }
    Ok(offset)
}

fn check_layout(net: &Network, params: &ParamSet) -> Result<(), NnError> {
    let mismatch = || NnError::InvalidNetwork("parameter set does not match the network layout".into());
    let mut stats = 0;
    for op in net.ops() {
        match *op {
            Op::Dense {
                weight,
                bias,
                in_dim,
                out_dim,
            } => {
                let w = params.groups.get(weight).ok_or_else(mismatch)?;
                if w.param.shape() != [in_dim, out_dim] {
                    return Err(mismatch());
                }
                if let Some(b) = bias {
                    if params.groups.get(b).map(|g| g.param.len()) != Some(out_dim) {
                        return Err(mismatch());
                    }
                }
            }
            Op::BatchNorm { scale, shift, dim, .. } => {
                for i in [scale, shift] {
                    if params.groups.get(i).map(|g| g.param.len()) != Some(dim) {
                        return Err(mismatch());
                    }
                }
                stats += 1;
            }
            _ => {}
        }
    }
    if params.norm_stats.len() != stats {
        return Err(mismatch());
    }
    Ok(())
}

fn dense_forward(x: &Tensor, w: &[f64], b: Option<&[f64]>, in_dim: usize, out_dim: usize) -> Tensor {
    let rows = x.rows();
    let xd = x.data();
    let mut out = vec![0.0; rows * out_dim];
    for i in 0..rows {
        let y = &mut out[i * out_dim..(i + 1) * out_dim];
        for a in 0..in_dim {
            let xa = xd[i * in_dim + a];
            let wrow = &w[a * out_dim..(a + 1) * out_dim];
            for (yo, wo) in y.iter_mut().zip(wrow) {
                *yo += xa * wo;
            }
        }
        if let Some(b) = b {
            for (yo, bo) in y.iter_mut().zip(b) {
                *yo += bo;
            }
        }
    }
    Tensor::from_vec(vec![rows, out_dim], out).expect("dense output shape")
}

/// `dx[a] = sum_o dy[o] * w[a, o]`, each sum taken left to right from zero.
/// Four rows of `w` are walked at once to overlap the dependent additions.
fn dense_input_grad(dy: &[f64], w: &[f64], dx: &mut [f64], out_dim: usize) {
    let mut quads = dx.chunks_exact_mut(4);
    let mut rows = w.chunks_exact(4 * out_dim);
    for (d, w4) in (&mut quads).zip(&mut rows) {
        let (w0, rest) = w4.split_at(out_dim);
        let (w1, rest) = rest.split_at(out_dim);
        let (w2, w3) = rest.split_at(out_dim);
        let mut acc = [0.0; 4];
        for o in 0..out_dim {
            let g = dy[o];
            acc[0] += g * w0[o];
            acc[1] += g * w1[o];
            acc[2] += g * w2[o];
            acc[3] += g * w3[o];
        }
        d.copy_from_slice(&acc);
    }
    for (d, wrow) in quads
        .into_remainder()
        .iter_mut()
        .zip(rows.remainder().chunks_exact(out_dim))
    {
        *d = dy.iter().zip(wrow).fold(0.0, |acc, (g, w)| acc + g * w);
    }
}

/// Column-major copy of a row-major `[rows, cols]` slice.
fn transpose(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; m.len()];
    for (i, row) in m.chunks_exact(cols).enumerate() {
        for (j, &v) in row.iter().enumerate() {
            t[j * rows + i] = v;
        }
    }
    t
}

fn column_sums(x: &Tensor, f: impl Fn(usize, f64) -> f64) -> ExactVec {
    let cols = x.cols();
    let mapped: Vec<f64> = x.data().iter().enumerate().map(|(k, &v)| f(k % cols, v)).collect();
    let mut acc = ExactVec::zeros(cols);
    add_column_sums(&mut acc, 0, &mapped, x.rows(), cols);
    acc
}

/// Adds the column sums of row-major `m` into `acc[offset..offset + cols]`.
fn add_column_sums(acc: &mut ExactVec, offset: usize, m: &[f64], rows: usize, cols: usize) {
    if rows == 0 {
        return;
    }
    let ones = vec![1.0; rows];
    for (c, col) in transpose(m, rows, cols).chunks_exact(rows).enumerate() {
        acc.get_mut(offset + c).add_products(col, &ones);
    }
}

/// Whole-batch per-feature mean and biased variance of `acts`.
fn batch_moments(acts: &[Tensor], examples: usize, coll: &mut dyn Collective) -> Result<NormStats, NnError> {
    let count = examples as f64;
    let sums = coll.all_reduce(acts.iter().map(|a| column_sums(a, |_, v| v)).collect())?;
    let mean: Vec<f64> = sums.round().into_iter().map(|s| s / count).collect();
    let sq = coll.all_reduce(
        acts.iter()
            .map(|a| {
                column_sums(a, |c, v| {
                    let d = v - mean[c];
                    d * d
                })
            })
            .collect(),
    )?;
    let var = sq.round().into_iter().map(|s| s / count).collect();
    Ok(NormStats { mean, var })
}

/// Returns `(gamma * xhat + beta, xhat)` with `xhat = (x - mean) * inv_std`.
fn normalize(x: &Tensor, mean: &[f64], inv_std: &[f64], gamma: &[f64], beta: &[f64]) -> (Tensor, Tensor) {
    let dim = x.cols();
    let mut xhat = x.clone();
    let mut y = x.clone();
    for (k, (h, out)) in xhat.data_mut().iter_mut().zip(y.data_mut()).enumerate() {
        let c = k % dim;
        *h = (*h - mean[c]) * inv_std[c];
        *out = gamma[c] * *h + beta[c];
    }
    (y, xhat)
}

/// Training-mode batch normalization of a single batch `x` ([rows, dim]).
pub fn batchnorm_forward(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Tensor, NnError> {
    if x.rows() < 2 {
        return Err(NnError::DegenerateBatch { layer: 0 });
    }
    let st = batch_moments(std::slice::from_ref(x), x.rows(), &mut LocalSum)?;
    let inv_std: Vec<f64> = st.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    Ok(normalize(x, &st.mean, &inv_std, gamma, beta).0)
}

pub fn forward(
    net: &Network,
    replicas: &[&ParamSet],
    shards: &[&Batch],
    mode: Mode,
    coll: &mut dyn Collective,
) -> Result<Forward, NnError> {
    let examples = check_inputs(net, replicas, shards)?;
    let n = shards.len();
    let mut acts: Vec<Tensor> = shards.iter().map(|b| b.inputs.clone()).collect();
    let mut caches: Vec<Vec<LayerCache>> = (0..n).map(|_| Vec::with_capacity(net.ops().len())).collect();
    let mut batch_stats = Vec::new();
    let mut loss_sum = ExactSum::new();
    let mut shard_correct = vec![0usize; n];

    for (layer, op) in net.ops().iter().enumerate() {
        match *op {
            Op::Dense {
                weight,
                bias,
                in_dim,
                out_dim,
            } => {
                for s in 0..n {
                    let p = replicas[s];
                    let w = p.groups[weight].param.data();
                    let b = bias.map(|b| p.groups[b].param.data());
                    let out = dense_forward(&acts[s], w, b, in_dim, out_dim);
                    let input = std::mem::replace(&mut acts[s], out);
                    caches[s].push(LayerCache::Dense { input });
                }
            }
            Op::Relu => {
                for s in 0..n {
                    let mut out = acts[s].clone();
                    for v in out.data_mut() {
                        if *v <= 0.0 {
                            *v = 0.0;
                        }
                    }
                    let input = std::mem::replace(&mut acts[s], out);
                    caches[s].push(LayerCache::Relu { input });
                }
            }
            Op::BatchNorm {
                scale,
                shift,
                stats,
                dim,
                eps,
            } => {
                let (mean, var) = match mode {
                    Mode::Train => {
                        if examples < 2 {
                            return Err(NnError::DegenerateBatch { layer });
                        }
                        let st = batch_moments(&acts, examples, coll)?;
                        let out = (st.mean.clone(), st.var.clone());
                        batch_stats.push(st);
                        out
                    }
                    Mode::Eval => {
                        let st = &replicas[0].norm_stats[stats];
                        (st.mean.clone(), st.var.clone())
                    }
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                for s in 0..n {
                    let p = replicas[s];
                    let (y, xhat) = normalize(
                        &acts[s],
                        &mean,
                        &inv_std,
                        p.groups[scale].param.data(),
                        p.groups[shift].param.data(),
                    );
                    debug_assert_eq!(y.cols(), dim);
                    acts[s] = y;
                    caches[s].push(LayerCache::BatchNorm {
                        xhat,
                        inv_std: inv_std.clone(),
                    });
                }
            }
            Op::SoftmaxXent { classes } => {
                for s in 0..n {
                    let logits = &acts[s];
                    let rows = logits.rows();
                    let mut probs = vec![0.0; rows * classes];
                    for i in 0..rows {
                        let z = logits.row(i);
                        let label = shards[s].labels[i];
                        let (argmax, max) =
                            z.iter()
                                .copied()
                                .enumerate()
                                .fold(
                                    (0, f64::NEG_INFINITY),
                                    |best, (k, v)| if v > best.1 { (k, v) } else { best },
                                );
                        let denom = z.iter().fold(0.0, |acc, &v| acc + (v - max).exp());
                        let lse = max + denom.ln();
                        let loss = lse - z[label];
                        if !loss.is_finite() {
                            return Err(NnError::NumericOverflow { layer });
                        }
                        loss_sum.add(loss);
                        if argmax == label {
                            shard_correct[s] += 1;
                        }
                        for (p, &v) in probs[i * classes..(i + 1) * classes].iter_mut().zip(z) {
                            *p = (v - lse).exp();
                        }
                    }
                    caches[s].push(LayerCache::Head {
                        probs: Tensor::from_vec(vec![rows, classes], probs)?,
                        labels: shards[s].labels.clone(),
                    });
                }
                continue;
            }
        }
        if acts.iter().any(|a| !a.all_finite()) {
            return Err(NnError::NumericOverflow { layer });
        }
    }

    Ok(Forward {
        mode,
        caches,
        fingerprints: replicas.iter().map(|r| r.checksum()).collect(),
        batch_stats,
        loss_sum,
        shard_correct,
        examples,
    })
}

/// Per-shard exact gradient sums of the summed (not averaged) loss.
pub fn backward(
    net: &Network,
    replicas: &[&ParamSet],
    fwd: &Forward,
    coll: &mut dyn Collective,
) -> Result<Vec<GradSums>, NnError> {
    let mut grads = Vec::new();
    backward_into(net, replicas, fwd, coll, &mut grads)?;
    Ok(grads)
}

/// As [`backward`], writing into `grads`, which is reused when its layout
/// already matches.
pub fn backward_into(
    net: &Network,
    replicas: &[&ParamSet],
    fwd: &Forward,
    coll: &mut dyn Collective,
    grads: &mut Vec<GradSums>,
) -> Result<(), NnError> {
    if fwd.mode != Mode::Train
        || replicas.len() != fwd.caches.len()
        || replicas.iter().zip(&fwd.fingerprints).any(|(r, &f)| r.checksum() != f)
    {
        return Err(NnError::StaleCache);
    }
    let n = replicas.len();
    let examples = fwd.examples as f64;
    if grads.len() == n && grads.iter().zip(replicas).all(|(g, r)| g.matches(r)) {
        grads.iter_mut().for_each(GradSums::clear);
    } else {
        *grads = replicas.iter().map(|r| GradSums::zeros_like(r)).collect();
    }
    let mut deltas: Vec<Tensor> = Vec::with_capacity(n);

    for (layer, op) in net.ops().iter().enumerate().rev() {
        match *op {
            Op::SoftmaxXent { .. } => {
                for cache in &fwd.caches {
                    let LayerCache::Head { probs, labels } = &cache[layer] else {
                        unreachable!("head cache");
                    };
                    let mut d = probs.clone();
                    let c = d.cols();
                    for (i, &l) in labels.iter().enumerate() {
                        d.data_mut()[i * c + l] -= 1.0;
                    }
                    deltas.push(d);
                }
            }
            Op::Dense {
                weight,
                bias,
                in_dim,
                out_dim,
            } => {
                for s in 0..n {
                    let LayerCache::Dense { input } = &fwd.caches[s][layer] else {
                        unreachable!("dense cache");
                    };
                    let dy = deltas[s].data();
                    let x = input.data();
                    let rows = input.rows();
                    let gw = &mut grads[s].groups[weight].1;
                    let xt = transpose(x, rows, in_dim);
                    let dyt = transpose(dy, rows, out_dim);
                    // Zero inputs (inactive ReLUs) contribute exact zeros; skip them.
                    let mut nz = Vec::with_capacity(rows);
                    let mut xs = Vec::with_capacity(rows);
                    let mut ds = Vec::with_capacity(rows);
                    for (a, xa) in xt.chunks_exact(rows).enumerate() {
                        nz.clear();
                        xs.clear();
                        for (i, &v) in xa.iter().enumerate() {
                            if v != 0.0 {
                                nz.push(i);
                                xs.push(v);
                            }
                        }
                        if nz.is_empty() {
                            continue;
                        }
                        let dense = nz.len() == rows;
                        for (o, dyo) in dyt.chunks_exact(rows).enumerate() {
                            let acc = gw.get_mut(a * out_dim + o);
                            if dense {
                                acc.add_products(xa, dyo);
                            } else {
                                ds.clear();
                                ds.extend(nz.iter().map(|&i| dyo[i]));
                                acc.add_products(&xs, &ds);
                            }
                        }
                    }
                    if let Some(b) = bias {
                        add_column_sums(&mut grads[s].groups[b].1, 0, dy, rows, out_dim);
                    }
                    if layer > 0 {
                        let w = replicas[s].groups[weight].param.data();
                        let mut dx = vec![0.0; rows * in_dim];
                        for i in 0..rows {
                            let dyi = &dy[i * out_dim..(i + 1) * out_dim];
                            dense_input_grad(dyi, w, &mut dx[i * in_dim..(i + 1) * in_dim], out_dim);
                        }
                        deltas[s] = Tensor::from_vec(vec![rows, in_dim], dx)?;
                    }
                }
            }
            Op::Relu => {
                for (delta, caches) in deltas.iter_mut().zip(&fwd.caches) {
                    let LayerCache::Relu { input } = &caches[layer] else {
                        unreachable!("relu cache");
                    };
                    for (d, &x) in delta.data_mut().iter_mut().zip(input.data()) {
                        if x <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
            }
            Op::BatchNorm { scale, shift, dim, .. } => {
                let mut partials = Vec::with_capacity(n);
                for s in 0..n {
                    let LayerCache::BatchNorm { xhat, .. } = &fwd.caches[s][layer] else {
                        unreachable!("batchnorm cache");
                    };
                    let dy = deltas[s].data();
                    let h = xhat.data();
                    // [sum dy | sum dy*xhat]
                    let mut p = ExactVec::zeros(2 * dim);
                    let dyh: Vec<f64> = dy.iter().zip(h).map(|(d, h)| d * h).collect();
                    add_column_sums(&mut p, 0, dy, xhat.rows(), dim);
                    add_column_sums(&mut p, dim, &dyh, xhat.rows(), dim);
                    for c in 0..dim {
                        grads[s].groups[shift].1.get_mut(c).merge(p.get(c));
                        grads[s].groups[scale].1.get_mut(c).merge(p.get(dim + c));
                    }
                    partials.push(p);
                }
                let totals = coll.all_reduce(partials)?.round();
                let (sum_dy, sum_dyh) = totals.split_at(dim);
                for s in 0..n {
                    let LayerCache::BatchNorm { xhat, inv_std } = &fwd.caches[s][layer] else {
                        unreachable!("batchnorm cache");
                    };
                    let gamma = replicas[s].groups[scale].param.data();
                    let h = xhat.data();
                    let d = deltas[s].data_mut();
                    for (k, dk) in d.iter_mut().enumerate() {
                        let c = k % dim;
                        let m1 = sum_dy[c] / examples;
                        let m2 = sum_dyh[c] / examples;
                        *dk = gamma[c] * inv_std[c] * (*dk - m1 - h[k] * m2);
                    }
                }
            }
        }
    }
    Ok(())
}

/// Folds a training pass's batch statistics into `params`' running statistics.
pub fn update_running_stats(params: &mut ParamSet, fwd: &Forward) {
    for (run, batch) in params.norm_stats.iter_mut().zip(&fwd.batch_stats) {
        for (r, b) in run.mean.iter_mut().zip(&batch.mean) {
            *r = BN_RUNNING_MOMENTUM * *r + (1.0 - BN_RUNNING_MOMENTUM) * b;
        }
        for (r, b) in run.var.iter_mut().zip(&batch.var) {
            *r = BN_RUNNING_MOMENTUM * *r + (1.0 - BN_RUNNING_MOMENTUM) * b;
        }
    }
}
