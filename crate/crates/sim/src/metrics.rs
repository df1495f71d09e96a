//! Client-observed metrics computed from a trace.

use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;

use crate::trace::{Model, Record, Trace};

/// Nearest-rank percentiles of client latencies, in simulated milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Percentiles {
    pub count: usize,
    pub p50: u64,
    pub p95: u64,
    pub p99: u64,
}

impl Percentiles {
    /// Empty input yields all zeros.
    pub fn of(mut samples: Vec<u64>) -> Self {
        if samples.is_empty() {
            return Percentiles::default();
        }
        samples.sort_unstable();
        let rank = |q: u64| {
            let k = (q * samples.len() as u64).div_ceil(100) as usize;
            samples[k.max(1) - 1]
        };
        Percentiles {
            count: samples.len(),
            p50: rank(50),
            p95: rank(95),
            p99: rank(99),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Metrics {
    pub hybrid: Percentiles,
    pub bft: Percentiles,
    /// Distinct commands executed by the first correct replica, per model.
    pub committed_hybrid: usize,
    pub committed_bft: usize,
    /// Accepted requests per simulated second, over the submission window.
    pub throughput: f64,
    /// Highest view installed by any replica.
    pub view_changes: u64,
    /// Replica-to-replica deliveries per accepted request.
    pub messages_per_command: f64,
    /// True when latencies come from an interpolated latency matrix.
    pub approximate: bool,
}

pub fn compute_metrics(trace: &Trace) -> Metrics {
    let mut latencies = [Vec::new(), Vec::new()];
    let mut accepted = BTreeSet::new();
    let mut views = 0;
    let mut protocol_deliveries = 0;
    let mut end = 0;
    let reference = trace
        .header
        .as_ref()
        .and_then(|h| (0..h.n as u32).find(|r| !h.faulty.contains(r)))
        .unwrap_or(0);
    let mut committed = [BTreeSet::new(), BTreeSet::new()];
    let idx = |m: Model| (m == Model::Bft) as usize;
    for r in &trace.records {
        match r {
            Record::Accept {
                client,
                seq,
                model,
                latency,
                ..
            } => {
                latencies[idx(*model)].push(*latency);
                accepted.insert((*client, *seq));
            }
            Record::ViewInstall { view, .. } => views = views.max(*view),
            Record::Executed {
                node, model, commands, ..
            } if *node == reference => {
                committed[idx(*model)].extend(commands.iter().copied());
            }
            Record::End {
                t,
                protocol_deliveries: p,
                ..
            } => {
                protocol_deliveries = *p;
                end = *t;
            }
            _ => {}
        }
    }
    let [hybrid, bft] = latencies;
    let window = trace.header.as_ref().map_or(end, |h| h.submit_until_ms.min(end)).max(1);
    let n = accepted.len();
    Metrics {
        hybrid: Percentiles::of(hybrid),
        bft: Percentiles::of(bft),
        committed_hybrid: committed[0].len(),
        committed_bft: committed[1].len(),
        throughput: n as f64 * 1000.0 / window as f64,
        view_changes: views,
        messages_per_command: if n == 0 {
            0.0
        } else {
            protocol_deliveries as f64 / n as f64
        },
        approximate: trace.header.as_ref().is_some_and(|h| h.matrix == "azure10"),
    }
}

impl Metrics {
    /// One machine-readable line.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain data")
    }

    pub const TABLE_HEADER: &'static str = "model   count    p50    p95    p99  | throughput  views  msgs/cmd";
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", Self::TABLE_HEADER)?;
        for (name, p) in [("hybrid", self.hybrid), ("bft", self.bft)] {
            writeln!(
                f,
                "{name:<6} {:>6} {:>6} {:>6} {:>6}  | {:>10.1} {:>6} {:>9.1}",
                p.count, p.p50, p.p95, p.p99, self.throughput, self.view_changes, self.messages_per_command
            )?;
        }
        if self.approximate {
            writeln!(f, "note: latencies use an interpolated region matrix")?;
        }
        Ok(())
    }
}
