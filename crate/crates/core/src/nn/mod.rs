//! Feed-forward network engine: dense layers, batch normalization, ReLU and a
//! softmax cross-entropy head, with analytic gradients.
//!
//! Every reduction over the examples of a batch (loss, batch-norm statistics,
//! parameter gradients) goes through [`crate::exact`], so the result does not
//! depend on how the batch is split into shards. [`engine`] runs a forward
//! and backward pass over several shards in lockstep; [`forward_loss`] and
//! [`backward`] are the single-shard, mean-convention entry points.

pub mod engine;

use std::fmt;

use rand::RngCore;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use thiserror::Error;

use crate::tensor::{ShapeError, Tensor};

pub use engine::{Collective, Forward, GradSums, LocalSum, Mode};

/// Batch-norm epsilon used when a config does not give one.
pub const DEFAULT_BN_EPS: f64 = 1e-5;
/// Weight of the previous value in the running batch-norm statistics.
pub const BN_RUNNING_MOMENTUM: f64 = 0.9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("layers {first} and {second} are incompatible: {detail}")]
    IncompatibleLayers {
        first: usize,
        second: usize,
        detail: String,
    },
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("input width {got} does not match the network input width {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("label {label} of example {index} is outside [0, {classes})")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },
    #[error("batch has {inputs} input rows but {labels} labels")]
    LabelCount { inputs: usize, labels: usize },
    #[error("non-finite activations at layer {layer}")]
    NumericOverflow { layer: usize },
    #[error("batch norm at layer {layer} needs at least 2 examples in training mode")]
    DegenerateBatch { layer: usize },
    #[error("activation cache does not belong to the current parameters")]
    StaleCache,
    #[error("shard mismatch: {0}")]
    ShardMismatch(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Dense { in_dim: usize, out_dim: usize, bias: bool },
    BatchNorm { eps: f64 },
    Relu,
    SoftmaxXent,
}

impl LayerSpec {
    pub fn dense(in_dim: usize, out_dim: usize) -> Self {
        LayerSpec::Dense {
            in_dim,
            out_dim,
            bias: true,
        }
    }

    pub fn batchnorm() -> Self {
        LayerSpec::BatchNorm { eps: DEFAULT_BN_EPS }
    }

    fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::SoftmaxXent => "softmax-xent",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Weight,
        Category::Bias,
        Category::NormScale,
        Category::NormShift,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Weight => "weight",
            Category::Bias => "bias",
            Category::NormScale => "norm-scale",
            Category::NormShift => "norm-shift",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub category: Category,
    pub param: Tensor,
    pub grad: Tensor,
    pub momentum: Tensor,
}

impl ParamGroup {
    fn new(name: String, category: Category, param: Tensor) -> Self {
        let grad = Tensor::zeros(param.shape());
        let momentum = Tensor::zeros(param.shape());
        Self {
            name,
            category,
            param,
            grad,
            momentum,
        }
    }
}

/// Running batch-norm statistics used in evaluation mode.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// All trainable state of a network, plus its batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub groups: Vec<ParamGroup>,
    pub norm_stats: Vec<NormStats>,
}

impl ParamSet {
    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn group_mut(&mut self, name: &str) -> Option<&mut ParamGroup> {
        self.groups.iter_mut().find(|g| g.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.groups.iter().map(|g| g.param.len()).sum()
    }

    /// Hash of every parameter and running-statistic bit pattern. Gradients
    /// and momentum are excluded.
    pub fn checksum(&self) -> u64 {
        const K: u64 = 0x517c_c1b7_2722_0a95;
        let mix = |h: u64, w: u64| (h.rotate_left(5) ^ w).wrapping_mul(K);
        let mut h = 0;
        for g in &self.groups {
            h = g.name.bytes().fold(h, |h, b| mix(h, u64::from(b)));
            h = g.param.data().iter().fold(h, |h, x| mix(h, x.to_bits()));
        }
        for s in &self.norm_stats {
            h = s.mean.iter().chain(&s.var).fold(h, |h, x| mix(h, x.to_bits()));
        }
        h
    }

    /// Bitwise equality of parameters, gradients, momentum and statistics.
    pub fn bits_eq(&self, other: &ParamSet) -> bool {
        let stats_eq =
            |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        self.groups.len() == other.groups.len()
            && self.groups.iter().zip(&other.groups).all(|(a, b)| {
                a.name == b.name
                    && a.category == b.category
                    && a.param.bits_eq(&b.param)
                    && a.grad.bits_eq(&b.grad)
                    && a.momentum.bits_eq(&b.momentum)
            })
            && self.norm_stats.len() == other.norm_stats.len()
            && self
                .norm_stats
                .iter()
                .zip(&other.norm_stats)
                .all(|(a, b)| stats_eq(&a.mean, &b.mean) && stats_eq(&a.var, &b.var))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self, NnError> {
        if inputs.shape().len() != 2 || inputs.rows() != labels.len() {
            return Err(NnError::LabelCount {
                inputs: inputs.rows(),
                labels: labels.len(),
            });
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.inputs.cols()
    }

    /// Examples `[start, end)` as a new batch.
    pub fn slice(&self, start: usize, end: usize) -> Batch {
        let w = self.width();
        let data = self.inputs.data()[start * w..end * w].to_vec();
        Batch {
            inputs: Tensor::from_vec(vec![end - start, w], data).expect("non-empty slice"),
            labels: self.labels[start..end].to_vec(),
        }
    }

    /// Concatenation in argument order.
    pub fn concat(parts: &[Batch]) -> Result<Batch, NnError> {
        let w = parts.first().map(Batch::width).unwrap_or(0);
        if parts.iter().any(|p| p.width() != w) {
            return Err(NnError::ShardMismatch("batches differ in width".into()));
        }
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            data.extend_from_slice(p.inputs.data());
            labels.extend_from_slice(&p.labels);
        }
        let rows = labels.len();
        Batch::new(Tensor::from_vec(vec![rows, w], data)?, labels)
    }
}

/// One compiled layer with resolved widths and parameter indices.
#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Op {
    Dense {
        weight: usize,
        bias: Option<usize>,
        in_dim: usize,
        out_dim: usize,
    },
    BatchNorm {
        scale: usize,
        shift: usize,
        stats: usize,
        dim: usize,
        eps: f64,
    },
    Relu,
    SoftmaxXent {
        classes: usize,
    },
}

/// A validated layer stack.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    specs: Vec<LayerSpec>,
    ops: Vec<Op>,
    input_dim: usize,
    classes: usize,
}

impl Network {
    pub fn new(specs: Vec<LayerSpec>) -> Result<Self, NnError> {
        let mut width = match specs.first() {
            Some(LayerSpec::Dense { in_dim, .. }) => *in_dim,
            Some(other) => {
                return Err(NnError::InvalidNetwork(format!(
                    "first layer must be dense, got {}",
                    other.kind()
                )))
            }
            None => return Err(NnError::InvalidNetwork("no layers".into())),
        };
        let input_dim = width;
        let mut ops = Vec::with_capacity(specs.len());
        let mut groups = 0usize;
        let mut stats = 0usize;
        let last = specs.len() - 1;
        for (i, spec) in specs.iter().enumerate() {
            let op = match *spec {
                LayerSpec::Dense { in_dim, out_dim, bias } => {
                    if in_dim == 0 || out_dim == 0 {
                        return Err(NnError::InvalidNetwork(format!(
                            "layer {i}: dense dimensions must be positive"
                        )));
                    }
                    if in_dim != width {
                        return Err(NnError::IncompatibleLayers {
                            first: i - 1,
                            second: i,
                            detail: format!(
                                "{} outputs {width} features but dense expects {in_dim}",
                                specs[i - 1].kind()
                            ),
                        });
                    }
                    width = out_dim;
                    let weight = groups;
                    groups += 1;
                    let bias = bias.then(|| {
                        groups += 1;
                        weight + 1
                    });
                    Op::Dense {
                        weight,
                        bias,
                        in_dim,
                        out_dim,
                    }
                }
                LayerSpec::BatchNorm { eps } => {
                    if !(eps > 0.0 && eps.is_finite()) {
                        return Err(NnError::InvalidNetwork(format!(
                            "layer {i}: batchnorm eps must be positive, got {eps}"
                        )));
                    }
                    let op = Op::BatchNorm {
                        scale: groups,
                        shift: groups + 1,
                        stats,
                        dim: width,
                        eps,
                    };
                    groups += 2;
                    stats += 1;
                    op
                }
                LayerSpec::Relu => Op::Relu,
                LayerSpec::SoftmaxXent => {
                    if i != last {
                        return Err(NnError::IncompatibleLayers {
                            first: i,
                            second: i + 1,
                            detail: "softmax-xent must be the final layer".into(),
                        });
                    }
                    if width < 2 {
                        return Err(NnError::InvalidNetwork("softmax-xent needs at least 2 classes".into()));
                    }
                    Op::SoftmaxXent { classes: width }
                }
            };
            ops.push(op);
        }
        if !matches!(specs[last], LayerSpec::SoftmaxXent) {
            return Err(NnError::InvalidNetwork(
                "network must end in a softmax-xent layer".into(),
            ));
        }
        Ok(Self {
            specs,
            ops,
            input_dim,
            classes: width,
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub(crate) fn ops(&self) -> &[Op] {
        &self.ops
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    /// Multiply-adds per example in the dense layers.
    pub fn dense_macs(&self) -> usize {
        self.ops
            .iter()
            .map(|op| match op {
                Op::Dense { in_dim, out_dim, .. } => in_dim * out_dim,
                _ => 0,
            })
            .sum()
    }

    /// Fresh parameters: weights uniform in ±sqrt(6/(fan_in+fan_out)) drawn
    /// from xoshiro256++ seeded with `seed`, biases and shifts zero, scales
    /// one, running mean zero and running variance one.
    pub fn init(&self, seed: u64) -> ParamSet {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut groups = Vec::new();
        let mut norm_stats = Vec::new();
        for (i, op) in self.ops.iter().enumerate() {
            match *op {
                Op::Dense {
                    bias, in_dim, out_dim, ..
                } => {
                    let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
                    let data = (0..in_dim * out_dim)
                        .map(|_| limit * (2.0 * unit_uniform(&mut rng) - 1.0))
                        .collect();
                    let w = Tensor::from_vec(vec![in_dim, out_dim], data).expect("shape");
                    groups.push(ParamGroup::new(format!("dense{i}.weight"), Category::Weight, w));
                    if bias.is_some() {
                        groups.push(ParamGroup::new(
                            format!("dense{i}.bias"),
                            Category::Bias,
                            Tensor::zeros(&[out_dim]),
                        ));
                    }
                }
                Op::BatchNorm { dim, .. } => {
                    groups.push(ParamGroup::new(
                        format!("bn{i}.scale"),
                        Category::NormScale,
                        Tensor::filled(&[dim], 1.0),
                    ));
                    groups.push(ParamGroup::new(
                        format!("bn{i}.shift"),
                        Category::NormShift,
                        Tensor::zeros(&[dim]),
                    ));
                    norm_stats.push(NormStats {
                        mean: vec![0.0; dim],
                        var: vec![1.0; dim],
                    });
                }
                Op::Relu | Op::SoftmaxXent { .. } => {}
            }
        }
        ParamSet { groups, norm_stats }
    }
}

/// Uniform in [0, 1) from the top 53 bits of one generator output.
fn unit_uniform(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn init_network(specs: Vec<LayerSpec>, seed: u64) -> Result<(Network, ParamSet), NnError> {
    let net = Network::new(specs)?;
    let params = net.init(seed);
    Ok((net, params))
}

/// Activation record of one single-shard forward pass.
#[derive(Debug)]
pub struct Cache {
    forward: Forward,
}

/// Mean softmax cross-entropy over `batch` in training mode.
pub fn forward_loss(net: &Network, params: &ParamSet, batch: &Batch) -> Result<(f64, Cache), NnError> {
    let forward = engine::forward(net, &[params], &[batch], Mode::Train, &mut LocalSum)?;
    Ok((forward.mean_loss(), Cache { forward }))
}

/// Fills every group's `grad` with the gradient of the mean loss and folds
/// the batch statistics of the cached pass into the running statistics.
pub fn backward(net: &Network, params: &mut ParamSet, cache: Cache) -> Result<(), NnError> {
    let forward = cache.forward;
    let mut sums = engine::backward(net, &[&*params], &forward, &mut LocalSum)?;
    let sums = sums.pop().expect("one shard");
    let examples = forward.examples() as f64;
    sums.write_mean_into(params, examples)?;
    engine::update_running_stats(params, &forward);
    Ok(())
}

/// Loss and accuracy over `data` in evaluation mode, in chunks of `chunk` rows.
pub fn evaluate(net: &Network, params: &ParamSet, data: &Batch, chunk: usize) -> Result<(f64, f64), NnError> {
    let mut loss = crate::exact::ExactSum::new();
    let mut correct = 0usize;
    let mut start = 0;
    while start < data.len() {
        let end = (start + chunk.max(1)).min(data.len());
        let part = data.slice(start, end);
        let f = engine::forward(net, &[params], &[&part], Mode::Eval, &mut LocalSum)?;
        loss.merge(f.loss_sum());
        correct += f.correct();
        start = end;
    }
    let n = data.len() as f64;
    Ok((loss.round() / n, correct as f64 / n))
}
