//! CSV reproductions of the cost tables and a dump of the built-in presets.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::HarnessError;
use crate::perfmodel::{
    cluster_preset, cluster_presets, energy_preset, iteration_time, iterations, model_preset, model_presets,
    scaling_ratio, tree_stages,
};

/// ImageNet-1k training set size.
pub const IMAGENET_TRAIN: u64 = 1_280_000;
/// Per-machine batch held fixed while machines are added.
pub const LOCAL_BATCH: u64 = 512;
pub const ITERATION_BATCHES: [u64; 6] = [512, 1024, 2048, 4096, 8192, 1_280_000];
pub const ITERATION_EPOCHS: u64 = 100;

fn csv_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Csv(e.to_string())
}

fn to_csv(head: &[&str], rows: Vec<Vec<String>>) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(head).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    String::from_utf8(w.into_inner().map_err(csv_err)?).map_err(csv_err)
}

/// Iterations and time per batch size at 100 epochs of ImageNet, one worker
/// per 512 images, priced with `model` on `cluster`.
pub fn iteration_table(model: &str, cluster: &str) -> Result<String, HarnessError> {
    let m = model_preset(model)?;
    let base = cluster_preset(cluster)?;
    let mut rows = Vec::new();
    for b in ITERATION_BATCHES {
        let p = b / LOCAL_BATCH;
        let spec = base.clone().with_workers(p);
        let it = iterations(ITERATION_EPOCHS, IMAGENET_TRAIN, b)?.count;
        let t = iteration_time(&m, &spec, b)?;
        rows.push(vec![
            b.to_string(),
            ITERATION_EPOCHS.to_string(),
            it.to_string(),
            p.to_string(),
            (p as f64).log2().to_string(),
            tree_stages(p).to_string(),
            t.t_comp.to_string(),
            t.t_comm.to_string(),
            t.t_iter.to_string(),
            (it as f64 * t.t_iter).to_string(),
        ]);
    }
    to_csv(
        &[
            "batch",
            "epochs",
            "iterations",
            "workers",
            "log2_workers",
            "tree_stages",
            "t_comp",
            "t_comm",
            "t_iter",
            "total_time",
        ],
        rows,
    )
}

/// Parameters, flops per image and their ratio for each model preset.
pub fn scaling_table() -> Result<String, HarnessError> {
    let rows = model_presets()
        .iter()
        .map(|m| {
            vec![
                m.name.clone(),
                m.num_params.to_string(),
                m.flops_per_image.to_string(),
                scaling_ratio(m).to_string(),
            ]
        })
        .collect();
    to_csv(&["model", "num_params", "flops_per_image", "scaling_ratio"], rows)
}

/// Network constants of every cluster preset.
pub fn network_table() -> Result<String, HarnessError> {
    let rows = cluster_presets()
        .iter()
        .map(|c| {
            vec![
                c.name.clone(),
                format!("{:e}", c.alpha),
                format!("{:e}", c.beta),
                format!("{:e}", c.gamma),
            ]
        })
        .collect();
    to_csv(&["cluster", "alpha_s", "beta_s_per_word", "gamma_s_per_flop"], rows)
}

/// Energy per operation.
pub fn energy_table() -> Result<String, HarnessError> {
    let rows = energy_preset()
        .entries()
        .map(|(op, pj)| vec![op.to_string(), pj.to_string()])
        .collect();
    to_csv(&["operation", "picojoules"], rows)
}

pub const TABLE_FILES: [&str; 4] = ["iterations.csv", "scaling.csv", "network.csv", "energy.csv"];

/// Writes all four tables into `dir`.
pub fn write_tables(dir: &Path, model: &str, cluster: &str) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io {
        path: dir.display().to_string(),
        message: e.to_string(),
    })?;
    let contents = [
        iteration_table(model, cluster)?,
        scaling_table()?,
        network_table()?,
        energy_table()?,
    ];
    TABLE_FILES
        .iter()
        .zip(contents)
        .map(|(f, text)| {
            let p = dir.join(f);
            std::fs::write(&p, text).map_err(|e| HarnessError::Io {
                path: p.display().to_string(),
                message: e.to_string(),
            })?;
            Ok(p)
        })
        .collect()
}

/// Presets as a commented config fragment.
pub fn presets_text() -> String {
    let mut s = String::from("# models: name num_params flops_per_image\n");
    for m in model_presets() {
        let _ = writeln!(s, "# model = {} {} {}", m.name, m.num_params, m.flops_per_image);
    }
    s.push_str("# clusters: name alpha beta gamma\n");
    for c in cluster_presets() {
        let _ = writeln!(
            s,
            "# interconnect = {} {:e} {:e} {:e}",
            c.name, c.alpha, c.beta, c.gamma
        );
    }
    s.push_str("# energy (pJ)\n");
    for (op, pj) in energy_preset().entries() {
        let _ = writeln!(s, "# energy = {op}: {pj}");
    }
    s
}
