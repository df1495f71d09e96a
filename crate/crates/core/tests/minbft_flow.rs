mod common;

use common::{command, config, Net};
use duobft_core::crypto::keygen;
use duobft_core::messages::{FaultModel, ResponseModel};
use duobft_core::minbft::MinbftReplica;
use duobft_core::quorum::flexminbft_params;
use duobft_core::replica::{CommPattern, Output, Pacing, Replica};

fn cluster(n: usize, f: usize) -> Net<MinbftReplica> {
    let params = flexminbft_params(n, f).unwrap();
    let nodes = (0..n as u32)
        .map(|i| {
            MinbftReplica::new(
                config(i, params, 1, CommPattern::Quadratic, Pacing::BftQc),
                keygen(i as u64),
            )
        })
        .collect();
    Net::new(nodes)
}

#[test]
fn requests_execute_in_the_same_order() {
    let mut net = cluster(4, 1);
    for s in 1..=6 {
        net.request_all(command(s as u32 % 2, s, ResponseModel::Hybrid));
    }
    net.run(200);
    let state = net.nodes[0].ledger().state();
    for node in &net.nodes {
        assert_eq!(node.ledger().executed_count(), 6);
        assert_eq!(node.ledger().state(), state);
    }
    assert!(net.replies(FaultModel::Hybrid).len() >= 6 * 2);
}

#[test]
fn backups_count_their_own_commit() {
    // With a commit quorum of two, a backup holds the primary's prepare and
    // its own commit one step after the prepare; the primary waits for a commit.
    let mut net = cluster(4, 1);
    net.request_all(command(1, 1, ResponseModel::Hybrid));
    net.run(100);
    assert_eq!(net.commits(0, FaultModel::Hybrid), vec![(2, 0, 1)]);
    for node in 1..4 {
        assert_eq!(net.commits(node, FaultModel::Hybrid), vec![(1, 0, 1)]);
    }
}

#[test]
fn silent_primary_is_replaced() {
    let mut net = cluster(5, 2);
    net.silent.insert(0);
    net.request_all(command(1, 1, ResponseModel::Hybrid));
    net.run(5_000);
    for node in 1..5 {
        assert_eq!(net.nodes[node].view(), 1);
        assert_eq!(net.nodes[node].ledger().executed_count(), 1);
    }
}

#[test]
fn reproposal_under_new_counter_executes_once() {
    let mut net = cluster(4, 1);
    let cmd = command(1, 1, ResponseModel::Hybrid);
    net.request_all(cmd.clone());
    net.run(10);
    let out = net.nodes[0].propose_batch(vec![cmd]);
    assert!(matches!(out[0], Output::Broadcast(_)));
    let before = net.log.len();
    net.inject(0, out);
    net.run(100);
    for node in &net.nodes {
        assert_eq!(node.ledger().executed_count(), 1);
    }
    let commits = net.log[before..]
        .iter()
        .filter(|r| matches!(r.output, Output::Committed { .. }))
        .count();
    assert_eq!(commits, 4, "the second prepare still commits, but executes nothing");
}

#[test]
fn view_change_keeps_executed_prefix() {
    let mut net = cluster(4, 1);
    for s in 1..=3 {
        net.request_all(command(1, s, ResponseModel::Hybrid));
    }
    net.run(20);
    net.silent.insert(0);
    net.request_all(command(1, 4, ResponseModel::Hybrid));
    net.run(5_000);
    let state = net.nodes[1].ledger().state();
    for node in 1..4 {
        assert_eq!(net.nodes[node].ledger().executed_count(), 4);
        assert_eq!(net.nodes[node].ledger().state(), state);
    }
}
