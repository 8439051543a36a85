//! End-to-end acceptance suite. Runs sequentially in one test so the timed
//! criteria do not compete for cores, prints one line per criterion and fails
//! if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use bigbatch::harness::config::ExperimentConfig;
use bigbatch::harness::data::{gen_synthetic, DatasetKind, SyntheticSpec};
use bigbatch::harness::run::{self, read_log, run_experiment};
use bigbatch::nn::{backward, forward_loss, Batch, Category, LayerSpec, Network, ParamSet};
use bigbatch::optim::{linear_scaled_lr, scheduled_lr, HyperParams, ScheduleState};
use bigbatch::parallel::{epoch_permutation, gather, Cluster, ClusterRun, RunStatus};
use bigbatch::perfmodel::{cluster_preset, whole_machine_time};
use bigbatch::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

type Outcome = Result<String, String>;

/// Writes to the process stdout directly so the lines survive the test
/// harness's output capture.
macro_rules! report {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, $($arg)*);
        let _ = out.flush();
    }};
}
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bigbatch"))
}

fn desk_network() -> Network {
    Network::new(ExperimentConfig::spirals_baseline(0).network).unwrap()
}

// 1. bitwise P-invariance over 200 iterations at B=256

fn checksums(net: &Network, data: &Batch, workers: usize, hp: &HyperParams, steps: u64) -> Result<Vec<u64>, String> {
    let run = ClusterRun::new(workers, hp.batch_size, 11).map_err(|e| e.to_string())?;
    let mut cluster = Cluster::new(run, &net.init(run.seed), data);
    let mut st = ScheduleState::new(hp, data.len() as u64).map_err(|e| e.to_string())?;
    let b = hp.batch_size;
    let mut perm = Vec::new();
    let mut out = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let within = (st.iteration % st.iterations_per_epoch) as usize;
        if within == 0 {
            perm = epoch_permutation(data.len(), run.seed, st.epoch());
        }
        let batch = gather(data, &perm[within * b..(within + 1) * b]).map_err(|e| e.to_string())?;
        cluster
            .global_step(net, &batch, hp, &mut st)
            .map_err(|e| e.to_string())?;
        let sum = cluster.workers[0].params.checksum();
        check(
            cluster.workers.iter().all(|w| w.params.checksum() == sum),
            format!("P={workers}: replicas disagree at iteration {}", st.iteration),
        )?;
        out.push(sum);
    }
    Ok(out)
}

fn criterion1() -> Outcome {
    let start = Instant::now();
    let net = desk_network();
    let data = spirals(10_000, 1).train;
    let hp = HyperParams {
        base_lr: 0.4,
        batch_size: 256,
        epochs: 10,
        warmup_epochs: 1,
        lars_enabled: true,
        ..HyperParams::default()
    };
    let steps = 200;
    let reference = checksums(&net, &data, 1, &hp, steps)?;
    for p in [2, 4, 8, 16] {
        let other = checksums(&net, &data, p, &hp, steps)?;
        if let Some(i) = reference.iter().zip(&other).position(|(a, b)| a != b) {
            return Err(format!("P={p} departs from P=1 at step {}", i + 1));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 60.0, format!("took {secs:.1} s"))?;
    Ok(format!("P in {{2,4,8,16}} bitwise equal to P=1 for {steps} steps"))
}

// 2. analytic against central-difference gradients

fn criterion2() -> Outcome {
    let net = Network::new(vec![
        LayerSpec::dense(3, 5),
        LayerSpec::batchnorm(),
        LayerSpec::Relu,
        LayerSpec::Dense {
            in_dim: 5,
            out_dim: 4,
            bias: false,
        },
        LayerSpec::Relu,
        LayerSpec::dense(4, 4),
        LayerSpec::batchnorm(),
        LayerSpec::Relu,
        LayerSpec::dense(4, 3),
        LayerSpec::SoftmaxXent,
    ])
    .unwrap();
    let loss = |p: &ParamSet, b: &Batch| forward_loss(&net, p, b).unwrap().0;
    let mut worst = 0.0f64;
    let mut covered = std::collections::BTreeSet::new();
    let seeds = 12;
    for seed in 0..seeds {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut params = net.init(seed);
        for g in params.groups.iter_mut() {
            if g.category != Category::Weight {
                for v in g.param.data_mut() {
                    *v += rng.random_range(-0.3..0.3);
                }
            }
        }
        let rows = 7;
        let x: Vec<f64> = (0..rows * 3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<usize> = (0..rows).map(|_| rng.random_range(0..3)).collect();
        let batch = Batch::new(Tensor::from_vec(vec![rows, 3], x).unwrap(), y).unwrap();

        let mut analytic = params.clone();
        let (_, cache) = forward_loss(&net, &analytic, &batch).unwrap();
        backward(&net, &mut analytic, cache).unwrap();

        let h = 1e-5;
        for gi in 0..params.groups.len() {
            let mut p = params.clone();
            let numeric: Vec<f64> = (0..p.groups[gi].param.len())
                .map(|k| {
                    let orig = p.groups[gi].param.data()[k];
                    p.groups[gi].param.data_mut()[k] = orig + h;
                    let up = loss(&p, &batch);
                    p.groups[gi].param.data_mut()[k] = orig - h;
                    let down = loss(&p, &batch);
                    p.groups[gi].param.data_mut()[k] = orig;
                    (up - down) / (2.0 * h)
                })
                .collect();
            let a = analytic.groups[gi].grad.data();
            let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|t| t * t).sum::<f64>().sqrt();
            let diff = norm(&mut a.iter().zip(&numeric).map(|(a, n)| a - n));
            let scale = norm(&mut a.iter().copied()).max(norm(&mut numeric.iter().copied()));
            let err = if scale < 1e-8 { diff } else { diff / scale };
            check(
                err < 1e-5,
                format!("seed {seed} group {}: relative error {err:e}", params.groups[gi].name),
            )?;
            worst = worst.max(err);
            covered.insert(params.groups[gi].category);
        }
    }
    check(
        covered.len() == Category::ALL.len(),
        format!("categories covered: {covered:?}"),
    )?;
    Ok(format!(
        "{seeds} seeds, all parameter categories, worst relative error {worst:.1e}"
    ))
}

// 3 to 6. table output of the CLI

fn read_csv(path: &Path) -> Result<Vec<Vec<String>>, String> {
    let mut r = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    r.records()
        .map(|rec| {
            rec.map(|r| r.iter().map(str::to_string).collect())
                .map_err(|e| e.to_string())
        })
        .collect()
}

fn row<'a>(rows: &'a [Vec<String>], key: &str) -> Result<&'a [String], String> {
    rows.iter()
        .find(|r| r[0] == key)
        .map(Vec::as_slice)
        .ok_or_else(|| format!("no row for {key}"))
}

fn num(s: &str) -> Result<f64, String> {
    s.parse().map_err(|_| format!("not a number: {s}"))
}

fn criterion3(tables: &Path) -> Outcome {
    let rows = read_csv(&tables.join("iterations.csv"))?;
    let got: Vec<&str> = rows.iter().map(|r| r[2].as_str()).collect();
    let want = ["250000", "125000", "62500", "31250", "15625", "100"];
    check(got == want, format!("iterations {got:?}"))?;
    Ok(format!("iterations {}", got.join(", ")))
}

fn criterion4(tables: &Path) -> Outcome {
    let rows = read_csv(&tables.join("scaling.csv"))?;
    let alex = num(&row(&rows, "alexnet")?[3])?;
    let res = num(&row(&rows, "resnet50")?[3])?;
    check((alex - 24.6).abs() <= 0.5, format!("alexnet ratio {alex}"))?;
    check((res - 308.0).abs() <= 0.5, format!("resnet50 ratio {res}"))?;
    Ok(format!("alexnet {alex:.2}, resnet50 {res:.1}"))
}

fn criterion5() -> Outcome {
    let out = bin()
        .args(["cost", "--model", "resnet50-7.72g", "--cluster", "top_supercomputer"])
        .args(["--batch", "8192", "--epochs", "90", "--n", "1280000"])
        .output()
        .map_err(|e| e.to_string())?;
    check(out.status.success(), String::from_utf8_lossy(&out.stderr).into_owned())?;
    let text = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = text.lines().collect();
    let col = lines[0]
        .split(',')
        .position(|c| c == "total_flops")
        .ok_or("no total_flops column")?;
    let flops = num(lines[1].split(',').nth(col).ok_or("short row")?)?;
    let exact = 90.0 * 1.28e6 * 7.72e9;
    check(
        (flops - exact).abs() <= 0.005 * exact,
        format!("{flops:e} vs {exact:e}"),
    )?;
    check(
        (flops - 8.89e17).abs() <= 0.005 * 8.89e17,
        format!("{flops:e} vs 8.89e17"),
    )?;
    let machine = cluster_preset("top_supercomputer").map_err(|e| e.to_string())?;
    let secs = whole_machine_time(flops, &machine).map_err(|e| e.to_string())?;
    check((4.0..=5.0).contains(&secs), format!("whole machine {secs} s"))?;
    Ok(format!("{flops:.4e} flops, {secs:.2} s at 2e17 flop/s"))
}

fn criterion6(tables: &Path) -> Outcome {
    let net = read_csv(&tables.join("network.csv"))?;
    let want = [
        ("mellanox_fdr", 0.7e-6, 0.2e-9),
        ("intel_qdr", 1.2e-6, 0.3e-9),
        ("intel_10gbe", 7.2e-6, 0.9e-9),
    ];
    for (name, a, b) in want {
        let r = row(&net, name)?;
        check(
            num(&r[1])? == a && num(&r[2])? == b,
            format!("{name}: alpha {} beta {}", r[1], r[2]),
        )?;
        check(num(&r[3])? == 0.9e-13, format!("{name}: gamma {}", r[3]))?;
    }
    let energy = read_csv(&tables.join("energy.csv"))?;
    let want = [
        ("32 bit int add", 0.1),
        ("32 bit float add", 0.9),
        ("32 bit register access", 1.0),
        ("32 bit int multiply", 3.1),
        ("32 bit float multiply", 3.7),
        ("32 bit SRAM access", 5.0),
        ("32 bit DRAM access", 640.0),
    ];
    check(energy.len() == want.len(), format!("{} energy rows", energy.len()))?;
    for (op, pj) in want {
        let r = row(&energy, op)?;
        check(num(&r[1])? == pj, format!("{op}: {} pJ", r[1]))?;
    }
    Ok("alpha, beta, gamma and all seven energy rows exact".into())
}

// 7. large-batch recipe on spirals

fn spirals(n: usize, seed: u64) -> bigbatch::harness::data::Split {
    gen_synthetic(&SyntheticSpec {
        kind: DatasetKind::Spirals,
        n,
        num_classes: 3,
        input_dim: 2,
        noise: 0.05,
        seed,
    })
    .unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn criterion7(root: &Path) -> Outcome {
    let start = Instant::now();
    let large = 512;
    let mut base = Vec::new();
    let mut lars = Vec::new();
    let mut plain = Vec::new();
    for seed in 1..=5u64 {
        let b32 = ExperimentConfig::spirals_baseline(seed);
        let lr = linear_scaled_lr(b32.hyper.base_lr, b32.hyper.batch_size, large).map_err(|e| e.to_string())?;
        let mut recipe = b32.clone();
        recipe.hyper.batch_size = large;
        recipe.hyper.base_lr = lr;
        recipe.hyper.warmup_epochs = 5;
        recipe.hyper.lars_enabled = true;
        recipe.output.dir = format!("lars-seed{seed}").into();
        let mut naive = recipe.clone();
        naive.hyper.warmup_epochs = 0;
        naive.hyper.lars_enabled = false;
        naive.output.dir = format!("plain-seed{seed}").into();
        for (cfg, sink) in [(&b32, &mut base), (&recipe, &mut lars), (&naive, &mut plain)] {
            let r = run_experiment(cfg, root).map_err(|e| e.to_string())?;
            let acc = match r.log.status {
                RunStatus::Completed => r.log.final_test_acc(),
                RunStatus::Diverged { .. } => 0.0,
            };
            sink.push(acc);
        }
    }
    let (mb, ml, mp) = (median(base.clone()), median(lars.clone()), median(plain.clone()));
    let fmt = |v: &[f64]| v.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(" ");
    report!("    B=32 baseline         {}  median {mb:.4}", fmt(&base));
    report!("    B=512 warmup+LARS     {}  median {ml:.4}", fmt(&lars));
    report!(
        "    B=512 scaled lr only  {}  median {mp:.4}  (reported, not asserted)",
        fmt(&plain)
    );
    let gap = (mb - ml) * 100.0;
    let secs = start.elapsed().as_secs_f64();
    check(
        gap <= 1.0,
        format!("LARS median {ml:.4} trails baseline {mb:.4} by {gap:.2} points"),
    )?;
    check(secs < 300.0, format!("took {secs:.0} s"))?;
    Ok(format!("median gap {gap:.2} points over 5 seeds"))
}

// 8. schedule contract

fn criterion8() -> Outcome {
    let hp = HyperParams {
        base_lr: 0.3,
        epochs: 10,
        ..HyperParams::default()
    };
    let st = ScheduleState::new(&hp, 1000).map_err(|e| e.to_string())?;
    let at =
        |hp: &HyperParams, i: u64| scheduled_lr(hp, &ScheduleState { iteration: i, ..st }).map_err(|e| e.to_string());
    let max = st.max_iterations;
    check(at(&hp, 0)? == 0.3, "start")?;
    check(at(&hp, max)? == 0.0, "end")?;
    check((at(&hp, max / 2)? - 0.3 * 0.25).abs() < 1e-15, "midpoint")?;

    let warm = HyperParams {
        warmup_epochs: 2,
        ..hp.clone()
    };
    let w = st.warmup_iterations(&warm);
    let step = warm.base_lr / w as f64;
    let curve: Vec<f64> = (0..=max).map(|i| at(&warm, i)).collect::<Result<_, _>>()?;
    let jump = curve[..=w as usize]
        .windows(2)
        .map(|p| (p[1] - p[0]).abs())
        .fold(0.0, f64::max);
    check(
        jump <= step * (1.0 + 1e-12),
        format!("warmup jump {jump} exceeds {step}"),
    )?;
    check(
        curve[w as usize - 1] == warm.base_lr && curve[w as usize] == warm.base_lr,
        "boundary",
    )?;

    let scaled = linear_scaled_lr(0.02, 512, 4096).map_err(|e| e.to_string())?;
    check((scaled - 0.16).abs() < 1e-15, format!("linear scaling gave {scaled}"))?;
    Ok("poly endpoints, midpoint, warmup continuity, 0.02 at 512 scales to 0.16 at 4096".into())
}

// 9. divergence through the CLI

fn criterion9(root: &Path) -> Outcome {
    let mut cfg = ExperimentConfig::spirals_baseline(4);
    cfg.dataset.n = Some(2000);
    cfg.hyper.epochs = 3;
    cfg.hyper.base_lr = 1e30;
    cfg.output.dir = "unstable".into();
    let file = root.join("unstable.cfg");
    std::fs::write(&file, cfg.to_text()).map_err(|e| e.to_string())?;
    let out = bin()
        .arg("--out-root")
        .arg(root)
        .arg("train")
        .arg(&file)
        .output()
        .map_err(|e| e.to_string())?;
    let code = out.status.code();
    check(code.is_some_and(|c| c != 0), format!("exit {code:?}"))?;
    let log = read_log(&root.join("unstable")).map_err(|e| e.to_string())?;
    let RunStatus::Diverged { iteration, reason } = &log.status else {
        return Err(format!("status {:?}", log.status));
    };
    check(
        log.rows.len() as u64 == *iteration,
        format!("{} rows before iteration {iteration}", log.rows.len()),
    )?;
    check(
        log.rows.iter().all(|r| r.loss.is_finite()),
        "non-finite loss in the kept rows",
    )?;
    check(
        root.join("unstable").join(run::SCHEDULE_FILE).is_file(),
        "schedule missing",
    )?;
    Ok(format!(
        "exit {}, diverged at iteration {iteration} ({reason}), {} rows kept",
        code.unwrap(),
        log.rows.len()
    ))
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let tables = root.join("tables");
    let made = bin().arg("--out-root").arg(root).arg("tables").output().unwrap();
    assert!(made.status.success(), "{}", String::from_utf8_lossy(&made.stderr));

    let criteria: Vec<Criterion> = vec![
        ("sequential consistency", Box::new(criterion1)),
        ("gradient correctness", Box::new(criterion2)),
        ("iteration table", Box::new(|| criterion3(&tables))),
        ("scaling ratios", Box::new(|| criterion4(&tables))),
        ("flop arithmetic", Box::new(criterion5)),
        ("network and energy presets", Box::new(|| criterion6(&tables))),
        ("large-batch recipe", Box::new(|| criterion7(root))),
        ("schedule contract", Box::new(criterion8)),
        ("divergence handling", Box::new(|| criterion9(root))),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let res = f();
        let took = Duration::as_secs_f64(&t.elapsed());
        match res {
            Ok(detail) => report!("criterion {}: PASS  {name}: {detail} [{took:.1} s]", i + 1),
            Err(why) => {
                report!("criterion {}: FAIL  {name}: {why} [{took:.1} s]", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
