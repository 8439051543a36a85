use bigbatch::exact::ExactVec;
use bigbatch::harness::data::{gen_synthetic, DatasetKind, Split, SyntheticSpec};
use bigbatch::nn::engine::GradSums;
use bigbatch::nn::{Batch, LayerSpec, Network, ParamSet};
use bigbatch::optim::{HyperParams, ScheduleState};
use bigbatch::parallel::{
    epoch_permutation, gather, partition_batch, train, Cluster, ClusterRun, SimError, TreeAllReduce,
};
use bigbatch::perfmodel::iterations;
use proptest::prelude::*;

fn mlp() -> Network {
    Network::new(vec![
        LayerSpec::dense(2, 16),
        LayerSpec::batchnorm(),
        LayerSpec::Relu,
        LayerSpec::dense(16, 16),
        LayerSpec::batchnorm(),
        LayerSpec::Relu,
        LayerSpec::dense(16, 3),
        LayerSpec::SoftmaxXent,
    ])
    .unwrap()
}

fn spirals(n: usize, seed: u64) -> Split {
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

fn hyper(batch: usize, epochs: u64, lars: bool) -> HyperParams {
    HyperParams {
        base_lr: 0.1,
        batch_size: batch,
        epochs,
        warmup_epochs: u64::from(epochs > 1),
        lars_enabled: lars,
        ..HyperParams::default()
    }
}

/// Parameters after every step of a run with `workers` replicas.
fn trajectory(net: &Network, data: &Batch, workers: usize, hp: &HyperParams, steps: u64) -> Vec<ParamSet> {
    let run = ClusterRun::new(workers, hp.batch_size, 5).unwrap();
    let mut cluster = Cluster::new(run, &net.init(run.seed), data);
    let mut st = ScheduleState::new(hp, data.len() as u64).unwrap();
    let b = hp.batch_size;
    let mut perm = Vec::new();
    let mut out = Vec::new();
    for _ in 0..steps {
        let within = (st.iteration % st.iterations_per_epoch) as usize;
        if within == 0 {
            perm = epoch_permutation(data.len(), run.seed, st.epoch());
        }
        let batch = gather(data, &perm[within * b..(within + 1) * b]).unwrap();
        cluster.global_step(net, &batch, hp, &mut st).unwrap();
        let first = cluster.workers[0].params.checksum();
        assert!(cluster.workers.iter().all(|w| w.params.checksum() == first));
        out.push(cluster.workers[0].params.clone());
    }
    out
}

#[test]
fn worker_count_does_not_change_trajectory() {
    let net = mlp();
    let data = spirals(700, 3).train;
    let hp = hyper(64, 10, true);
    let reference = trajectory(&net, &data, 1, &hp, 25);
    for p in [2, 4, 8, 16] {
        let other = trajectory(&net, &data, p, &hp, 25);
        for (i, (a, b)) in reference.iter().zip(&other).enumerate() {
            assert!(a.bits_eq(b), "P={p} diverges from P=1 at step {i}");
        }
    }
}

#[test]
fn training_logs_match_across_worker_counts() {
    let net = mlp();
    let s = spirals(600, 8);
    let hp = hyper(32, 2, true);
    let one = train(&net, &ClusterRun::new(1, 32, 9).unwrap(), &s.train, &s.test, &hp).unwrap();
    let four = train(&net, &ClusterRun::new(4, 32, 9).unwrap(), &s.train, &s.test, &hp).unwrap();
    assert!(one.log.same_trajectory(&four.log));
    assert!(one.params.bits_eq(&four.params));
    assert_eq!(
        one.log.rows.len() as u64,
        iterations(2, s.train.len() as u64, 32).unwrap().count
    );
}

#[test]
fn training_is_deterministic_per_seed() {
    let net = mlp();
    let s = spirals(400, 2);
    let hp = hyper(40, 2, false);
    let a = train(&net, &ClusterRun::new(2, 40, 1).unwrap(), &s.train, &s.test, &hp).unwrap();
    let b = train(&net, &ClusterRun::new(2, 40, 1).unwrap(), &s.train, &s.test, &hp).unwrap();
    let c = train(&net, &ClusterRun::new(2, 40, 2).unwrap(), &s.train, &s.test, &hp).unwrap();
    assert!(a.log.same_trajectory(&b.log));
    assert!(!a.log.same_trajectory(&c.log));
}

#[test]
fn one_epoch_over_one_batch_is_one_iteration() {
    let net = mlp();
    let s = spirals(400, 4);
    let n = s.train.len();
    let hp = hyper(n, 1, false);
    let out = train(&net, &ClusterRun::new(4, n, 0).unwrap(), &s.train, &s.test, &hp).unwrap();
    assert_eq!(out.log.rows.len(), 1);
    assert!(!out.log.rows[0].test_acc.is_nan());
}

#[test]
fn desynchronized_replica_is_detected() {
    let net = mlp();
    let data = spirals(400, 6).train;
    let hp = hyper(32, 1, false);
    let run = ClusterRun::new(4, 32, 0).unwrap();
    let mut cluster = Cluster::new(run, &net.init(0), &data);
    let mut st = ScheduleState::new(&hp, data.len() as u64).unwrap();
    let batch = data.slice(0, 32);
    cluster.global_step(&net, &batch, &hp, &mut st).unwrap();
    let w = &mut cluster.workers[2].params.groups[0].param.data_mut()[0];
    *w = f64::from_bits(w.to_bits() ^ 1);
    let err = cluster.global_step(&net, &batch, &hp, &mut st).unwrap_err();
    assert!(matches!(err, SimError::Consistency { iteration: 1, .. }), "{err}");
}

#[test]
fn ragged_partitions_are_rejected() {
    let data = spirals(400, 6).train;
    assert!(matches!(
        ClusterRun::new(3, 32, 0),
        Err(SimError::Partition { batch: 32, workers: 3 })
    ));
    assert!(matches!(
        partition_batch(&data.slice(0, 10), 4),
        Err(SimError::Partition { .. })
    ));
}

#[test]
fn mismatched_gradient_layout_names_the_group() {
    let params = mlp().init(0);
    let good = GradSums::zeros_like(&params);
    let mut bad = good.clone();
    bad.groups[3].1 = ExactVec::zeros(bad.groups[3].1.len() + 1);
    let name = bad.groups[3].0.clone();
    let err = TreeAllReduce::new().all_reduce_grads(vec![good, bad]).unwrap_err();
    match err {
        SimError::Protocol { group, .. } => assert_eq!(group, name),
        other => panic!("unexpected {other}"),
    }
}

fn grad_sums(values: &[Vec<f64>]) -> GradSums {
    let mut v = ExactVec::zeros(values[0].len());
    for row in values {
        for (i, &x) in row.iter().enumerate() {
            v.add_at(i, x);
        }
    }
    GradSums {
        groups: vec![("w".to_string(), v)],
    }
}

fn reduce(parts: Vec<GradSums>) -> Vec<f64> {
    TreeAllReduce::new().all_reduce_grads(parts).unwrap().groups[0]
        .1
        .round()
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e3f64..1e3,
        (-1.0f64..1.0, -40i32..40).prop_map(|(m, e)| m * 2f64.powi(e))
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn all_reduce_is_linear(
        a in prop::collection::vec(prop::collection::vec(finite(), 4), 1..9),
        b in prop::collection::vec(prop::collection::vec(finite(), 4), 1..9),
    ) {
        let p = a.len().min(b.len());
        let ra = reduce(a[..p].iter().map(|r| grad_sums(std::slice::from_ref(r))).collect());
        let rb = reduce(b[..p].iter().map(|r| grad_sums(std::slice::from_ref(r))).collect());
        let rab = reduce((0..p).map(|j| grad_sums(&[a[j].clone(), b[j].clone()])).collect());
        for i in 0..4 {
            let lhs = ra[i] + rb[i];
            // two roundings on the left, one on the right; scale by the operands
            let tol = 1e-12 * (ra[i].abs() + rb[i].abs()).max(f64::MIN_POSITIVE);
            prop_assert!((lhs - rab[i]).abs() <= tol, "{} vs {}", lhs, rab[i]);
        }
    }

    #[test]
    fn opposite_gradients_cancel_exactly(g in prop::collection::vec(prop::collection::vec(finite(), 3), 1..6)) {
        let mut parts: Vec<GradSums> = g.iter().map(|r| grad_sums(std::slice::from_ref(r))).collect();
        parts.extend(g.iter().map(|r| grad_sums(&[r.iter().map(|x| -x).collect()])));
        prop_assert!(reduce(parts).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn duplicate_slices_scale_by_worker_count(row in prop::collection::vec(finite(), 5), lp in 0u32..5) {
        let p = 1usize << lp;
        let total = reduce((0..p).map(|_| grad_sums(std::slice::from_ref(&row))).collect());
        for (t, x) in total.iter().zip(&row) {
            prop_assert_eq!(t.to_bits(), (x * p as f64).to_bits());
        }
    }

    #[test]
    fn executed_iterations_match_cost_model(e in 1u64..4, n in 60usize..200, b in 1usize..40) {
        let b = b.min(n);
        let hp = HyperParams { base_lr: 0.01, batch_size: b, epochs: e, ..HyperParams::default() };
        let st = ScheduleState::new(&hp, n as u64).unwrap();
        prop_assert_eq!(st.max_iterations, iterations(e, n as u64, b as u64).unwrap().count);
    }
}

#[test]
fn executed_log_length_matches_cost_model() {
    let net = Network::new(vec![LayerSpec::dense(2, 3), LayerSpec::SoftmaxXent]).unwrap();
    let s = spirals(300, 1);
    let n = s.train.len() as u64;
    for (e, b) in [(1u64, 7usize), (3, 50), (2, 270), (5, 100)] {
        let hp = HyperParams {
            base_lr: 0.01,
            batch_size: b,
            epochs: e,
            ..HyperParams::default()
        };
        let out = train(&net, &ClusterRun::new(1, b, 0).unwrap(), &s.train, &s.test, &hp).unwrap();
        assert_eq!(
            out.log.rows.len() as u64,
            iterations(e, n, b as u64).unwrap().count,
            "E={e} B={b}"
        );
    }
}
