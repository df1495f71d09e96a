//! Randomised fault scenarios for multi-seed suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::check::{check_liveness, check_safety, CheckError, Verdict};
use crate::scenario::{BehaviorKind, FaultSpec, Partition, Protocol, Scenario, ScenarioError, TraceLevel};
use crate::sim::run;
use crate::trace::{Model, Trace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FaultKind {
    None,
    Crash,
    Drops,
    Duplication,
    Partition,
    SilentPrimary,
    Equivocation,
}

impl FaultKind {
    pub const ALL: [FaultKind; 7] = [
        FaultKind::None,
        FaultKind::Crash,
        FaultKind::Drops,
        FaultKind::Duplication,
        FaultKind::Partition,
        FaultKind::SilentPrimary,
        FaultKind::Equivocation,
    ];
}

fn fault(node: u32, behavior: BehaviorKind) -> FaultSpec {
    FaultSpec {
        node,
        behavior,
        at_ms: None,
        from_view: None,
        prob: None,
        omit: None,
    }
}

/// A small closed-loop workload under one fault script. All randomness in
/// the script itself comes from `seed`; the run uses the same seed.
pub fn fault_scenario(protocol: Protocol, n: usize, kind: FaultKind, seed: u64) -> Scenario {
    let f = (n - 1) / 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_fa17);
    let mut s = Scenario::new(protocol, n, f);
    s.clients = rng.random_range(1..=3);
    s.requests_per_client = Some(rng.random_range(3..=6));
    s.batch_size = rng.random_range(1..=4);
    s.payload_size = 16;
    s.base_timeout_ms = 40;
    s.client_timeout_ms = 200;
    s.response = ["both", "hybrid", "bft", "50%"][rng.random_range(0..4)].into();
    s.trace = TraceLevel::Events;
    s.network.jitter_ms = rng.random_range(0..=3);
    s.network.retransmit_ms = 10;
    s.stop.max_time_ms = 60_000;
    if protocol == Protocol::McDuobft {
        s.instances = rng.random_range(2..=4);
    }
    let victim = rng.random_range(0..n as u32);
    match kind {
        FaultKind::None => {}
        FaultKind::Crash => {
            let mut spec = fault(victim, BehaviorKind::Crash);
            spec.at_ms = Some(rng.random_range(0..30));
            s.faults.push(spec);
        }
        FaultKind::Drops => {
            // Losses never stop, so the delivery bound the timeouts must
            // exceed is several retransmission intervals per hop.
            s.network.drop_prob = 0.3;
            s.base_timeout_ms = 200;
        }
        FaultKind::Duplication => s.network.dup_prob = 0.5,
        FaultKind::Partition => {
            let from = rng.random_range(0..20);
            let to = from + rng.random_range(10..100);
            let mut order: Vec<u32> = (0..n as u32).collect();
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let cut = rng.random_range(1..n);
            s.network.partitions.push(Partition {
                groups: vec![order[..cut].to_vec()],
                from_ms: from,
                to_ms: to,
            });
            s.network.gst_ms = to;
        }
        FaultKind::SilentPrimary => s.faults.push(fault(0, BehaviorKind::SilentPrimary)),
        FaultKind::Equivocation => {
            let mut spec = fault(0, BehaviorKind::Equivocate);
            spec.at_ms = Some(rng.random_range(0..10));
            s.faults.push(spec);
        }
    }
    s
}

/// Verdicts of one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub seed: u64,
    pub hybrid: Verdict,
    pub bft: Verdict,
    pub liveness: Verdict,
}

impl Outcome {
    pub fn is_pass(&self) -> bool {
        self.hybrid.is_pass() && self.bft.is_pass() && self.liveness.is_pass()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SuiteError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Check(#[from] CheckError),
}

pub fn judge(trace: &Trace, seed: u64) -> Result<Outcome, CheckError> {
    Ok(Outcome {
        seed,
        hybrid: check_safety(trace, Model::Hybrid)?,
        bft: check_safety(trace, Model::Bft)?,
        liveness: check_liveness(trace)?,
    })
}

pub fn run_and_judge(scenario: &Scenario, seed: u64) -> Result<Outcome, SuiteError> {
    let trace = run(scenario, seed)?;
    Ok(judge(&trace, seed)?)
}

/// Runs `seeds` in parallel; results are in seed order.
pub fn run_seeds<F>(seeds: &[u64], make: F) -> Result<Vec<Outcome>, SuiteError>
where
    F: Fn(u64) -> Scenario + Sync,
{
    seeds.par_iter().map(|&seed| run_and_judge(&make(seed), seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenarios_are_valid_and_deterministic() {
        for kind in FaultKind::ALL {
            for n in [4, 7, 10] {
                let s = fault_scenario(Protocol::Duobft, n, kind, 9);
                s.validate().unwrap();
                assert_eq!(s, fault_scenario(Protocol::Duobft, n, kind, 9));
            }
        }
    }
}
