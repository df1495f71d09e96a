mod common;

use common::{command, config, Net};
use duobft_core::crypto::keygen;
use duobft_core::duobft::DuoReplica;
use duobft_core::messages::{FaultModel, ResponseModel};
use duobft_core::quorum::duobft_params;
use duobft_core::replica::{CommPattern, Output, Pacing, Replica};

fn cluster(f: usize, lanes: u32, comm: CommPattern, pacing: Pacing) -> Net<DuoReplica> {
    let params = duobft_params(f).unwrap();
    let nodes = (0..params.n as u32)
        .map(|i| DuoReplica::new(config(i, params, lanes, comm, pacing), keygen(i as u64)))
        .collect();
    Net::new(nodes)
}

#[test]
fn single_request_commits_in_two_and_four_steps() {
    let mut net = cluster(1, 1, CommPattern::Quadratic, Pacing::BftQc);
    net.request_all(command(1, 1, ResponseModel::Both));
    net.run(100);
    for node in 0..4 {
        assert_eq!(
            net.commits(node, FaultModel::Hybrid).first().map(|c| c.0),
            Some(2),
            "node {node}"
        );
        assert_eq!(net.commits(node, FaultModel::Bft), vec![(4, 0, 1)], "node {node}");
    }
    let hybrid: Vec<u64> = net.replies(FaultModel::Hybrid).iter().map(|r| r.0).collect();
    assert_eq!(hybrid, vec![2; 4]);
    let bft: Vec<u64> = net.replies(FaultModel::Bft).iter().map(|r| r.0).collect();
    assert_eq!(bft, vec![4; 4]);
}

#[test]
fn linear_mode_commits_everywhere() {
    let mut net = cluster(1, 1, CommPattern::Linear, Pacing::BftQc);
    for s in 1..=5 {
        net.request_all(command(1, s, ResponseModel::Both));
    }
    net.run(200);
    for node in 0..4 {
        assert_eq!(net.nodes[node].ledger(FaultModel::Bft).executed_count(), 5);
        assert_eq!(net.nodes[node].ledger(FaultModel::Hybrid).executed_count(), 5);
    }
}

#[test]
fn lanes_execute_rounds_identically() {
    let mut net = cluster(1, 4, CommPattern::Quadratic, Pacing::BftQc);
    for s in 1..=10 {
        net.request_all(command(s as u32, 1, ResponseModel::Both));
    }
    net.run(500);
    let state = net.nodes[0].ledger(FaultModel::Bft).state();
    for node in 0..4 {
        assert_eq!(net.nodes[node].ledger(FaultModel::Bft).executed_count(), 10);
        assert_eq!(net.nodes[node].ledger(FaultModel::Bft).state(), state);
        assert_eq!(net.nodes[node].ledger(FaultModel::Hybrid).state(), state);
    }
}

#[test]
fn silent_primary_is_replaced() {
    let mut net = cluster(1, 1, CommPattern::Quadratic, Pacing::BftQc);
    net.silent.insert(0);
    net.request_all(command(1, 1, ResponseModel::Both));
    net.run(2_000);
    for node in 1..4 {
        assert_eq!(net.nodes[node].view(), 1);
        assert!(!net.nodes[node].is_view_changing());
        assert_eq!(net.nodes[node].ledger(FaultModel::Bft).executed_count(), 1);
    }
    let installs = net
        .log
        .iter()
        .filter(|r| matches!(r.output, Output::ViewInstalled { view: 1 }))
        .count();
    assert_eq!(installs, 4);
}

#[test]
fn view_change_preserves_committed_blocks() {
    let mut net = cluster(1, 1, CommPattern::Quadratic, Pacing::BftQc);
    net.request_all(command(1, 1, ResponseModel::Both));
    net.run(10);
    net.silent.insert(0);
    net.request_all(command(1, 2, ResponseModel::Both));
    net.run(5_000);
    for node in 1..4 {
        assert!(net.nodes[node].view() >= 1);
        assert_eq!(net.nodes[node].ledger(FaultModel::Bft).executed_count(), 2);
        assert_eq!(net.nodes[node].chain(0)[0], net.nodes[1].chain(0)[0]);
    }
}
