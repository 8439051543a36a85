//! Experiment configuration.
//!
//! Line-oriented text: `[section]` headers, `key = value` pairs, `#` comments.
//! The `[network]` section repeats `layer = ...` in order. [`ExperimentConfig::to_text`]
//! prints floats in shortest round-trip form, so parsing the printed text
//! gives back the same bits.
//!
//! ```text
//! [network]
//! layer = dense 2 64
//! layer = batchnorm 0.00001
//! layer = relu
//! layer = dense 64 3
//! layer = softmax-xent
//!
//! [hyper]
//! base_lr = 0.05
//! batch_size = 32
//! epochs = 50
//!
//! [cluster]
//! workers = 1
//! seed = 1
//!
//! [dataset]
//! kind = synthetic-spirals
//! n = 10000
//! num_classes = 3
//! input_dim = 2
//! seed = 7
//!
//! [output]
//! dir = spirals-b32
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use super::data::DatasetKind;
use super::HarnessError;
use crate::nn::{Category, LayerSpec};
use crate::optim::HyperParams;

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterConfig {
    pub workers: usize,
    pub seed: u64,
    /// Cluster preset whose α, β, γ price the run in the cost report.
    pub interconnect: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Required for generated data; for IDX files, checked against the record count.
    pub n: Option<usize>,
    pub num_classes: usize,
    pub input_dim: usize,
    pub noise: f64,
    pub seed: u64,
    pub path: Option<PathBuf>,
    pub labels: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputConfig {
    /// Relative paths resolve against the output root.
    pub dir: PathBuf,
    pub formats: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub network: Vec<LayerSpec>,
    pub hyper: HyperParams,
    pub cluster: ClusterConfig,
    pub dataset: DatasetConfig,
    pub output: OutputConfig,
}

pub const DEFAULT_INTERCONNECT: &str = "mellanox_fdr";
pub const DEFAULT_NOISE: f64 = 0.05;
pub const FORMATS: [&str; 1] = ["csv"];

const SECTIONS: [&str; 5] = ["network", "hyper", "cluster", "dataset", "output"];

fn err(line: Option<usize>, message: impl Into<String>) -> HarnessError {
    HarnessError::Config {
        line,
        message: message.into(),
    }
}

/// One `key = value` with its 1-based line number.
struct Entry {
    line: usize,
    key: String,
    value: String,
    used: bool,
}

struct Section {
    line: usize,
    entries: Vec<Entry>,
}

impl Section {
    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        let e = self.entries.iter_mut().find(|e| e.key == key && !e.used)?;
        e.used = true;
        Some((e.line, e.value.clone()))
    }

    fn get<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, HarnessError> {
        match self.take(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| err(Some(line), format!("cannot parse {key} = {v:?}"))),
        }
    }

    fn require<T: FromStr>(&mut self, section: &str, key: &str) -> Result<T, HarnessError> {
        self.get(key)?
            .ok_or_else(|| err(Some(self.line), format!("[{section}] is missing {key}")))
    }

    fn finish(&self, section: &str) -> Result<(), HarnessError> {
        match self.entries.iter().find(|e| !e.used) {
            Some(e) => Err(err(
                Some(e.line),
                format!("unknown or repeated key {} in [{section}]", e.key),
            )),
            None => Ok(()),
        }
    }
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool, HarnessError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(err(Some(line), format!("{key} must be true or false, got {v:?}"))),
    }
}

fn parse_layer(line: usize, v: &str) -> Result<LayerSpec, HarnessError> {
    let words: Vec<&str> = v.split_whitespace().collect();
    let num = |s: &str| -> Result<usize, HarnessError> {
        s.parse()
            .map_err(|_| err(Some(line), format!("bad layer dimension {s:?}")))
    };
    match words.as_slice() {
        ["dense", i, o] => Ok(LayerSpec::Dense {
            in_dim: num(i)?,
            out_dim: num(o)?,
            bias: true,
        }),
        ["dense", i, o, "nobias"] => Ok(LayerSpec::Dense {
            in_dim: num(i)?,
            out_dim: num(o)?,
            bias: false,
        }),
        ["batchnorm", eps] => Ok(LayerSpec::BatchNorm {
            eps: eps
                .parse()
                .map_err(|_| err(Some(line), format!("bad batchnorm epsilon {eps:?}")))?,
        }),
        ["relu"] => Ok(LayerSpec::Relu),
        ["softmax-xent"] => Ok(LayerSpec::SoftmaxXent),
        _ => Err(err(Some(line), format!("unrecognized layer {v:?}"))),
    }
}

fn layer_text(l: &LayerSpec) -> String {
    match l {
        LayerSpec::Dense {
            in_dim,
            out_dim,
            bias: true,
        } => format!("dense {in_dim} {out_dim}"),
        LayerSpec::Dense {
            in_dim,
            out_dim,
            bias: false,
        } => format!("dense {in_dim} {out_dim} nobias"),
        LayerSpec::BatchNorm { eps } => format!("batchnorm {eps}"),
        LayerSpec::Relu => "relu".into(),
        LayerSpec::SoftmaxXent => "softmax-xent".into(),
    }
}

fn parse_categories(line: usize, v: &str) -> Result<BTreeSet<Category>, HarnessError> {
    if v == "none" {
        return Ok(BTreeSet::new());
    }
    v.split_whitespace()
        .map(|w| Category::parse(w).ok_or_else(|| err(Some(line), format!("unknown parameter category {w:?}"))))
        .collect()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut sections: Vec<(String, Section)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let t = raw.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            if let Some(name) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                if !SECTIONS.contains(&name) {
                    return Err(err(Some(line), format!("unknown section [{name}]")));
                }
                if sections.iter().any(|(n, _)| n == name) {
                    return Err(err(Some(line), format!("section [{name}] appears twice")));
                }
                sections.push((
                    name.to_string(),
                    Section {
                        line,
                        entries: Vec::new(),
                    },
                ));
                continue;
            }
            let Some((k, v)) = t.split_once('=') else {
                return Err(err(Some(line), format!("expected key = value, got {t:?}")));
            };
            let Some((_, sec)) = sections.last_mut() else {
                return Err(err(Some(line), "key outside any section"));
            };
            let key = k.trim().to_string();
            if key != "layer" && sec.entries.iter().any(|e| e.key == key) {
                return Err(err(Some(line), format!("duplicate key {key}")));
            }
            sec.entries.push(Entry {
                line,
                key,
                value: v.trim().to_string(),
                used: false,
            });
        }
        let mut section = |name: &str| -> Result<Section, HarnessError> {
            let pos = sections
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| err(None, format!("missing section [{name}]")))?;
            Ok(sections.swap_remove(pos).1)
        };

        let mut net = section("network")?;
        let mut network = Vec::new();
        while let Some((line, v)) = net.take("layer") {
            network.push(parse_layer(line, &v)?);
        }
        net.finish("network")?;

        let mut h = section("hyper")?;
        let d = HyperParams::default();
        let lars_enabled = match h.take("lars") {
            Some((line, v)) => parse_bool(line, "lars", &v)?,
            None => d.lars_enabled,
        };
        let lars_skip = match h.take("lars_skip") {
            Some((line, v)) => parse_categories(line, &v)?,
            None => d.lars_skip.clone(),
        };
        let hyper = HyperParams {
            base_lr: h.get("base_lr")?.unwrap_or(d.base_lr),
            momentum: h.get("momentum")?.unwrap_or(d.momentum),
            weight_decay: h.get("weight_decay")?.unwrap_or(d.weight_decay),
            poly_power: h.get("poly_power")?.unwrap_or(d.poly_power),
            warmup_epochs: h.get("warmup_epochs")?.unwrap_or(d.warmup_epochs),
            epochs: h.require("hyper", "epochs")?,
            batch_size: h.require("hyper", "batch_size")?,
            lars_enabled,
            lars_trust: h.get("lars_trust")?.unwrap_or(d.lars_trust),
            lars_skip,
        };
        h.finish("hyper")?;

        let mut c = section("cluster")?;
        let cluster = ClusterConfig {
            workers: c.get("workers")?.unwrap_or(1),
            seed: c.require("cluster", "seed")?,
            interconnect: c
                .get("interconnect")?
                .unwrap_or_else(|| DEFAULT_INTERCONNECT.to_string()),
        };
        c.finish("cluster")?;

        let mut ds = section("dataset")?;
        let (kind_line, kind_text) = ds
            .take("kind")
            .ok_or_else(|| err(Some(ds.line), "[dataset] is missing kind"))?;
        let kind = DatasetKind::parse(&kind_text)
            .ok_or_else(|| err(Some(kind_line), format!("unknown dataset kind {kind_text:?}")))?;
        let dataset = DatasetConfig {
            kind,
            n: ds.get("n")?,
            num_classes: ds.require("dataset", "num_classes")?,
            input_dim: ds.require("dataset", "input_dim")?,
            noise: ds.get("noise")?.unwrap_or(DEFAULT_NOISE),
            seed: ds.require("dataset", "seed")?,
            path: ds.get::<String>("path")?.map(PathBuf::from),
            labels: ds.get::<String>("labels")?.map(PathBuf::from),
        };
        ds.finish("dataset")?;

        let mut o = section("output")?;
        let output = OutputConfig {
            dir: PathBuf::from(o.require::<String>("output", "dir")?),
            formats: o
                .get::<String>("formats")?
                .map(|f| f.split_whitespace().map(str::to_string).collect())
                .unwrap_or_else(|| vec!["csv".to_string()]),
        };
        o.finish("output")?;

        let cfg = ExperimentConfig {
            network,
            hyper,
            cluster,
            dataset,
            output,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks everything that does not need the dataset to be loaded.
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.network.is_empty() {
            return Err(err(None, "[network] has no layers"));
        }
        self.hyper.validate().map_err(|e| err(None, e.to_string()))?;
        if self.cluster.workers == 0 || !self.hyper.batch_size.is_multiple_of(self.cluster.workers) {
            return Err(err(
                None,
                format!(
                    "batch_size {} is not divisible by {} workers",
                    self.hyper.batch_size, self.cluster.workers
                ),
            ));
        }
        crate::perfmodel::cluster_preset(&self.cluster.interconnect).map_err(|e| err(None, e.to_string()))?;
        let ds = &self.dataset;
        match ds.kind {
            DatasetKind::Idx => {
                for (key, p) in [("path", &ds.path), ("labels", &ds.labels)] {
                    match p {
                        None => return Err(err(None, format!("idx-file dataset needs {key}"))),
                        Some(p) if !p.is_file() => {
                            return Err(err(None, format!("{key} {} does not exist", p.display())))
                        }
                        _ => {}
                    }
                }
            }
            _ => {
                if ds.n.is_none() {
                    return Err(err(None, "generated datasets need n"));
                }
                if ds.path.is_some() || ds.labels.is_some() {
                    return Err(err(None, "path and labels apply only to idx-file datasets"));
                }
            }
        }
        if let Some(f) = self.output.formats.iter().find(|f| !FORMATS.contains(&f.as_str())) {
            return Err(err(None, format!("unsupported output format {f:?}")));
        }
        Ok(())
    }

    /// Canonical text; every field is written, defaults included.
    pub fn to_text(&self) -> String {
        let mut s = String::from("[network]\n");
        for l in &self.network {
            let _ = writeln!(s, "layer = {}", layer_text(l));
        }
        let h = &self.hyper;
        let skip: Vec<&str> = h.lars_skip.iter().map(|c| c.as_str()).collect();
        let _ = write!(
            s,
            "\n[hyper]\nbase_lr = {}\nmomentum = {}\nweight_decay = {}\npoly_power = {}\nwarmup_epochs = {}\n\
             epochs = {}\nbatch_size = {}\nlars = {}\nlars_trust = {}\nlars_skip = {}\n",
            h.base_lr,
            h.momentum,
            h.weight_decay,
            h.poly_power,
            h.warmup_epochs,
            h.epochs,
            h.batch_size,
            h.lars_enabled,
            h.lars_trust,
            if skip.is_empty() {
                "none".to_string()
            } else {
                skip.join(" ")
            },
        );
        let c = &self.cluster;
        let _ = write!(
            s,
            "\n[cluster]\nworkers = {}\nseed = {}\ninterconnect = {}\n",
            c.workers, c.seed, c.interconnect
        );
        let d = &self.dataset;
        let _ = write!(s, "\n[dataset]\nkind = {}\n", d.kind.as_str());
        if let Some(n) = d.n {
            let _ = writeln!(s, "n = {n}");
        }
        let _ = write!(
            s,
            "num_classes = {}\ninput_dim = {}\nnoise = {}\nseed = {}\n",
            d.num_classes, d.input_dim, d.noise, d.seed
        );
        for (key, p) in [("path", &d.path), ("labels", &d.labels)] {
            if let Some(p) = p {
                let _ = writeln!(s, "{key} = {}", p.display());
            }
        }
        let _ = write!(
            s,
            "\n[output]\ndir = {}\nformats = {}\n",
            self.output.dir.display(),
            self.output.formats.join(" ")
        );
        s
    }

    /// The canonical text with every line commented out, for file headers.
    pub fn echo(&self) -> String {
        self.to_text()
            .lines()
            .map(|l| {
                if l.is_empty() {
                    "#\n".to_string()
                } else {
                    format!("# {l}\n")
                }
            })
            .collect()
    }

    /// Desk-scale spirals baseline: 2→64→64→C with batch norm, B=32, E=50.
    pub fn spirals_baseline(seed: u64) -> Self {
        let c = 3;
        ExperimentConfig {
            network: vec![
                LayerSpec::dense(2, 64),
                LayerSpec::batchnorm(),
                LayerSpec::Relu,
                LayerSpec::dense(64, 64),
                LayerSpec::batchnorm(),
                LayerSpec::Relu,
                LayerSpec::dense(64, c),
                LayerSpec::SoftmaxXent,
            ],
            hyper: HyperParams {
                base_lr: 0.05,
                epochs: 50,
                batch_size: 32,
                ..HyperParams::default()
            },
            cluster: ClusterConfig {
                workers: 1,
                seed,
                interconnect: DEFAULT_INTERCONNECT.to_string(),
            },
            dataset: DatasetConfig {
                kind: DatasetKind::Spirals,
                n: Some(10_000),
                num_classes: c,
                input_dim: 2,
                noise: DEFAULT_NOISE,
                seed,
                path: None,
                labels: None,
            },
            output: OutputConfig {
                dir: PathBuf::from(format!("spirals-seed{seed}")),
                formats: vec!["csv".to_string()],
            },
        }
    }
}
