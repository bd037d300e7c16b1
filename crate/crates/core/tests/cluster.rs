use hybridtrain::cluster::*;
use hybridtrain::datagen::{gen_hep, Dataset};
use hybridtrain::models::*;
use hybridtrain::solvers::SolverConfig;

fn hep() -> Network {
    let mut net = build_hep_mini(&HepConfig::default()).unwrap();
    net.init_params(5);
    net
}

fn quiet(mut plan: ClusterPlan) -> ClusterPlan {
    plan.network.jitter_sigma = 0.0;
    plan.compute.straggler_probability = 0.0;
    plan
}

#[test]
fn allreduce_hand_example() {
    let net = NetworkModel {
        latency_s: 1e-6,
        bandwidth_bytes_per_s: 1e9,
        jitter_sigma: 0.0,
        stream: 0,
    };
    // 2 * 63/64 * 590e3 / 1e9 + 2 * 63 * 1e-6
    let hand = 1.161_562_5e-3 + 1.26e-4;
    assert!((allreduce_time(590_000, 64, &net) - hand).abs() < 1e-15);
    assert_eq!(allreduce_time(590_000, 1, &net), 0.0);
}

#[test]
fn paper_node_arithmetic() {
    let p = plan_cluster_with(9600, 9, 6).unwrap();
    assert_eq!((p.worker_count(), p.ps_nodes, p.workers_per_group), (9594, 6, 1066));
    let p = plan_cluster_with(9622, 8, 14).unwrap();
    assert_eq!((p.worker_count(), p.ps_nodes, p.workers_per_group), (9608, 14, 1201));
    assert!(plan_cluster(6, 1, &hep()).is_err());
    let p = plan_cluster(10, 1, &hep()).unwrap();
    assert_eq!((p.ps_nodes, p.workers_per_group), (6, 4));
}

#[test]
fn sync_run_equals_reference_trainer() {
    let net = hep();
    let data = Dataset::Hep(gen_hep(3, 400, 0.3).unwrap());
    let solver = SolverConfig::adam(1e-3);
    let plan = ClusterPlan::from_workers(1, 8, net.trainable_layer_count()).unwrap();
    let out = run_training(&plan, &net, &data, &solver, 16, 20, 9).unwrap();
    let (losses, params) = reference_sync_training(&net, &data, &solver, 16, 20, 9).unwrap();
    let sim: Vec<f64> = out.log.losses().into_iter().map(Option::unwrap).collect();
    assert_eq!(sim, losses);
    assert_eq!(out.params, params);
    assert!(out.log.records.iter().all(|r| r.staleness == 0));
}

#[test]
fn staleness_is_groups_minus_one_without_jitter() {
    let net = hep();
    for g in [2, 4, 8] {
        let plan = quiet(ClusterPlan::from_workers(g, 4, net.trainable_layer_count()).unwrap());
        let log = run_timing(&plan, &net, 32, 200, 1).unwrap();
        let mut by_step: Vec<&IterRecord> = log.records.iter().collect();
        by_step.sort_by_key(|r| r.global_step);
        for (k, r) in by_step.iter().enumerate() {
            assert_eq!(r.global_step, k as u64 + 1);
            if k >= g {
                assert_eq!(r.staleness, g as u64 - 1, "G={g} step {}", r.global_step);
            }
        }
    }
}

#[test]
fn unit_degradation_changes_nothing() {
    let net = hep();
    let plan = ClusterPlan::from_workers(2, 4, net.trainable_layer_count()).unwrap();
    let slowed = inject_degradation(plan.clone(), 3, 1.0).unwrap();
    assert_eq!(run_timing(&plan, &net, 16, 50, 2).unwrap(), run_timing(&slowed, &net, 16, 50, 2).unwrap());
    assert!(inject_degradation(plan.clone(), 3, 0.5).is_err());
    assert!(inject_degradation(plan.clone(), plan.worker_count(), 2.0).is_err());
}

#[test]
fn sync_time_grows_with_slowdown() {
    let net = hep();
    let plan = ClusterPlan::from_workers(1, 16, net.trainable_layer_count()).unwrap();
    let mut last = 0.0;
    for s in [1.0, 1.5, 3.0, 10.0] {
        let t = run_timing(&inject_degradation(plan.clone(), 7, s).unwrap(), &net, 256, 30, 4)
            .unwrap()
            .makespan();
        assert!(t >= last, "slowdown {s}: {t} < {last}");
        last = t;
    }
}

#[test]
fn only_the_slowed_group_loses_cadence() {
    let net = hep();
    let plan = ClusterPlan::from_workers(4, 16, net.trainable_layer_count()).unwrap();
    let slow = inject_degradation(plan.clone(), 5, 10.0).unwrap();
    let rate = |log: &RunLog, g: usize| {
        let r = log.group_records(g);
        (r.len() - 1) as f64 / (r.last().unwrap().end - r[0].end)
    };
    let (a, b) = (run_timing(&plan, &net, 512, 400, 6).unwrap(), run_timing(&slow, &net, 512, 400, 6).unwrap());
    assert!(rate(&b, 0) < 0.5 * rate(&a, 0));
    for g in 1..4 {
        let ratio = rate(&b, g) / rate(&a, g);
        assert!((0.8..1.25).contains(&ratio), "group {g}: {ratio}");
    }
}

#[test]
fn runs_are_deterministic() {
    let net = hep();
    let plan = ClusterPlan::from_workers(4, 8, net.trainable_layer_count()).unwrap();
    assert_eq!(run_timing(&plan, &net, 64, 100, 8).unwrap(), run_timing(&plan, &net, 64, 100, 8).unwrap());
    assert_ne!(run_timing(&plan, &net, 64, 100, 8).unwrap(), run_timing(&plan, &net, 64, 100, 9).unwrap());
}

#[test]
fn hep_training_beats_chance() {
    let data = Dataset::Hep(gen_hep(8, 4000, 0.5).unwrap());
    let net = hep();
    for g in [1, 2] {
        let plan = plan_cluster(64, g, &net).unwrap();
        let out = run_training(&plan, &net, &data, &SolverConfig::adam(1e-3), 32, 200, 3).unwrap();
        let l: Vec<f64> = out.log.losses().into_iter().map(Option::unwrap).collect();
        let tail = l[l.len() - 20..].iter().sum::<f64>() / 20.0;
        assert!(tail < std::f64::consts::LN_2, "G={g}: trailing loss {tail}");
    }
}
