use std::collections::BTreeSet;

use proptest::prelude::*;

use duobft_sim::check::{check_liveness, check_safety, Verdict};
use duobft_sim::metrics::compute_metrics;
use duobft_sim::scenario::{Partition, Protocol, Scenario};
use duobft_sim::sim::{run, Simulation};
use duobft_sim::suite::{fault_scenario, run_and_judge, FaultKind};
use duobft_sim::trace::{Model, Record, Trace};

fn small(protocol: Protocol) -> Scenario {
    let (n, f) = if protocol == Protocol::FlexMinbft {
        (3, 1)
    } else {
        (4, 1)
    };
    let mut s = Scenario::new(protocol, n, f);
    s.clients = 2;
    s.requests_per_client = Some(3);
    s.network.jitter_ms = 2;
    s
}

fn executed_by(trace: &Trace, node: u32, model: Model) -> Vec<(u32, u64)> {
    trace
        .records
        .iter()
        .filter_map(|r| match r {
            Record::Executed {
                node: n,
                model: m,
                commands,
                ..
            } if *n == node && *m == model => Some(commands.clone()),
            _ => None,
        })
        .flatten()
        .collect()
}

#[test]
fn equal_seeds_give_identical_traces() {
    for protocol in [Protocol::Duobft, Protocol::McDuobft, Protocol::FlexMinbft] {
        let s = small(protocol);
        let a = run(&s, 11).unwrap().to_ndjson();
        let b = run(&s, 11).unwrap().to_ndjson();
        assert_eq!(a, b, "{protocol:?}");
        assert_ne!(a, run(&s, 12).unwrap().to_ndjson(), "jitter should depend on the seed");
    }
}

#[test]
fn unit_delay_step_counts() {
    let mut s = Scenario::new(Protocol::Duobft, 4, 1);
    s.requests_per_client = Some(1);
    let trace = run(&s, 1).unwrap();
    // Every hop takes one unit, so a message delivered at t was sent at t - 1.
    let propose = trace
        .records
        .iter()
        .find_map(|r| match r {
            Record::Deliver { t, from: 0, msg, .. } if msg == "propose" => Some(t - 1),
            _ => None,
        })
        .expect("primary proposes");
    for node in 0..4 {
        let first = |model| {
            trace.records.iter().find_map(|r| match r {
                Record::Committed {
                    t, node: n, model: m, ..
                } if *n == node && *m == model => Some(*t),
                _ => None,
            })
        };
        assert_eq!(first(Model::Hybrid), Some(propose + 2), "replica {node}");
        assert_eq!(first(Model::Bft), Some(propose + 4), "replica {node}");
    }
    let m = compute_metrics(&trace);
    assert_eq!((m.hybrid.count, m.hybrid.p50), (1, 4));
    assert_eq!((m.bft.count, m.bft.p50), (1, 6));
}

#[test]
fn isolated_minority_commits_nothing() {
    let mut s = small(Protocol::Duobft);
    s.stop.max_time_ms = 2_000;
    s.network.partitions.push(Partition {
        groups: vec![vec![3]],
        from_ms: 0,
        to_ms: u64::MAX,
    });
    let trace = run(&s, 4).unwrap();
    let commits = |node| {
        trace
            .records
            .iter()
            .filter(|r| matches!(r, Record::Committed { node: n, .. } if *n == node))
            .count()
    };
    assert_eq!(commits(3), 0);
    assert!(commits(0) > 0 && commits(1) > 0 && commits(2) > 0);
    assert!(check_safety(&trace, Model::Hybrid).unwrap().is_pass());
    assert!(check_safety(&trace, Model::Bft).unwrap().is_pass());
}

#[test]
fn total_loss_stalls_with_diagnostic() {
    let mut s = small(Protocol::Duobft);
    s.network.drop_prob = 1.0;
    s.stop.max_time_ms = 1_000;
    let (trace, stats, diagnostic) = Simulation::new(&s, 2).unwrap().run_diagnosed();
    assert!(stats.truncated);
    assert!(matches!(
        trace.records.last(),
        Some(Record::End { truncated: true, .. })
    ));
    assert!(!trace.records.iter().any(|r| matches!(r, Record::Accept { .. })));
    let d = diagnostic.expect("a stalled run explains itself");
    assert_eq!(d.outstanding, vec![(0, 1), (1, 1)]);
    assert!(d.to_string().contains("outstanding"));
    assert!(check_safety(&trace, Model::Hybrid).unwrap().is_pass());
    assert!(!check_liveness(&trace).unwrap().is_pass());
}

#[test]
fn duplication_changes_nothing_observable() {
    for protocol in [Protocol::Duobft, Protocol::FlexMinbft] {
        let clean = small(protocol);
        let mut dup = clean.clone();
        dup.network.dup_prob = 0.5;
        for seed in 0..10 {
            let a = run(&clean, seed).unwrap();
            let b = run(&dup, seed).unwrap();
            let (ma, mb) = (compute_metrics(&a), compute_metrics(&b));
            assert_eq!(ma.committed_hybrid, mb.committed_hybrid);
            assert_eq!(ma.hybrid.count + ma.bft.count, mb.hybrid.count + mb.bft.count);
            for node in 0..clean.n as u32 {
                let exec = executed_by(&b, node, Model::Hybrid);
                let distinct: BTreeSet<_> = exec.iter().collect();
                assert_eq!(distinct.len(), exec.len(), "{protocol:?} seed {seed} replica {node}");
            }
        }
    }
}

#[test]
fn stored_traces_check_identically() {
    let s = fault_scenario(Protocol::Duobft, 4, FaultKind::Equivocation, 3);
    let trace = run(&s, 3).unwrap();
    let back = Trace::read_ndjson(&trace.to_ndjson()[..]).unwrap();
    assert_eq!(back, trace);
    for model in [Model::Hybrid, Model::Bft] {
        assert_eq!(
            check_safety(&back, model).unwrap(),
            check_safety(&trace, model).unwrap()
        );
    }
    assert_eq!(check_liveness(&back).unwrap(), check_liveness(&trace).unwrap());
}

#[test]
fn multichain_spreads_work_over_lanes() {
    let mut s = small(Protocol::McDuobft);
    s.instances = 3;
    s.clients = 6;
    let trace = run(&s, 5).unwrap();
    let lanes: BTreeSet<u32> = trace
        .records
        .iter()
        .filter_map(|r| match r {
            Record::Committed { lane, .. } => Some(*lane),
            _ => None,
        })
        .collect();
    assert_eq!(lanes, BTreeSet::from([0, 1, 2]));
    assert!(check_liveness(&trace).unwrap().is_pass());
}

#[test]
fn flexible_minbft_tolerates_minority_sized_cluster() {
    // Five replicas tolerating two faults: commits need three, view changes three.
    let mut s = Scenario::new(Protocol::FlexMinbft, 5, 2);
    s.clients = 2;
    s.requests_per_client = Some(4);
    s.base_timeout_ms = 40;
    s.client_timeout_ms = 200;
    s.faults.push(duobft_sim::scenario::FaultSpec {
        node: 4,
        behavior: duobft_sim::scenario::BehaviorKind::Crash,
        at_ms: Some(0),
        from_view: None,
        prob: None,
        omit: None,
    });
    let outcome = run_and_judge(&s, 8).unwrap();
    assert!(outcome.is_pass(), "{outcome:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_fault_scripts_stay_safe_and_live(
        seed in any::<u64>(),
        kind in prop::sample::select(FaultKind::ALL.to_vec()),
        protocol in prop::sample::select(vec![Protocol::Duobft, Protocol::McDuobft, Protocol::FlexMinbft]),
        n in prop::sample::select(vec![4usize, 7]),
    ) {
        let s = fault_scenario(protocol, n, kind, seed);
        let outcome = run_and_judge(&s, seed).unwrap();
        prop_assert_eq!(outcome.hybrid, Verdict::Pass);
        prop_assert_eq!(outcome.bft, Verdict::Pass);
        prop_assert_eq!(outcome.liveness, Verdict::Pass);
    }

    #[test]
    fn reruns_are_deterministic(seed in any::<u64>(), kind in prop::sample::select(FaultKind::ALL.to_vec())) {
        let s = fault_scenario(Protocol::McDuobft, 4, kind, seed);
        prop_assert_eq!(run(&s, seed).unwrap(), run(&s, seed).unwrap());
    }
}
