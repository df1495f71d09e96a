//! Acceptance suite: one PASS/FAIL line per criterion.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use duobft_core::quorum::flexminbft_params;
use duobft_sim::explore::explore;
use duobft_sim::matrix::MatrixName;
use duobft_sim::metrics::compute_metrics;
use duobft_sim::scenario::{BehaviorKind, FaultSpec, Protocol, Scenario, TraceLevel};
use duobft_sim::sim::run;
use duobft_sim::suite::{fault_scenario, judge, run_seeds, FaultKind};
use duobft_sim::trace::{Model, Record, Trace};

type Outcome = Result<String, String>;

fn ensure(cond: bool, why: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(why())
    }
}

fn spec(node: u32, behavior: BehaviorKind) -> FaultSpec {
    FaultSpec {
        node,
        behavior,
        at_ms: None,
        from_view: None,
        prob: None,
        omit: None,
    }
}

/// A short closed-loop workload with tight timeouts.
fn workload(protocol: Protocol, n: usize, f: usize, seed: u64) -> Scenario {
    let mut s = Scenario::new(protocol, n, f);
    s.clients = 2;
    s.requests_per_client = Some(4);
    s.batch_size = 2;
    s.payload_size = 16;
    s.base_timeout_ms = 40;
    s.client_timeout_ms = 200;
    s.trace = TraceLevel::Events;
    s.network.jitter_ms = seed % 4;
    s
}

fn max_view(trace: &Trace) -> u64 {
    trace
        .records
        .iter()
        .filter_map(|r| match r {
            Record::ViewInstall { view, .. } => Some(*view),
            _ => None,
        })
        .max()
        .unwrap_or(0)
}

fn ac1() -> Outcome {
    let out = Command::new(env!("CARGO_BIN_EXE_duosim"))
        .args(["matrix", "--protocol", "duobft", "--f", "1..8"])
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || "matrix exited nonzero".into())?;
    let text = String::from_utf8_lossy(&out.stdout);
    let rows: Vec<Vec<usize>> = text
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().filter_map(|c| c.parse().ok()).collect())
        .collect();
    let expected: Vec<Vec<usize>> = (1..=8)
        .map(|f| vec![f, 3 * f + 1, f + 1, 2 * f + 1, 2 * f + 1, f + 1])
        .collect();
    ensure(rows == expected, || format!("matrix rows {rows:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(0xac1);
    let (mut accepted, mut rejected) = (0, 0);
    for _ in 0..1000 {
        let n = rng.random_range(1..=64);
        let f = rng.random_range(0..=n);
        // Commit quorums of f + 1 exceed f and view-change quorums of n - f
        // meet every one of them; both must be formable from n - f live replicas.
        let attainable = f >= 1 && f < n - f;
        match flexminbft_params(n, f) {
            Ok(p) => {
                ensure(attainable, || format!("accepted n = {n}, f = {f}"))?;
                ensure(p.commit_hybrid > f && p.commit_hybrid + p.view_change > n, || {
                    format!("{p:?}")
                })?;
                ensure(p.commit_hybrid == f + 1 && p.view_change == n - f, || format!("{p:?}"))?;
                accepted += 1;
            }
            Err(_) => {
                ensure(!attainable, || format!("rejected n = {n}, f = {f}"))?;
                rejected += 1;
            }
        }
    }
    Ok(format!(
        "matrix f=1..8 exact; 1000 flexible pairs: {accepted} accepted, {rejected} rejected"
    ))
}

fn ac2() -> Outcome {
    let mut s = Scenario::new(Protocol::Duobft, 4, 1);
    s.requests_per_client = Some(1);
    let trace = run(&s, 1).map_err(|e| e.to_string())?;
    let propose = trace
        .records
        .iter()
        .find_map(|r| match r {
            Record::Deliver { t, from: 0, msg, .. } if msg == "propose" => Some(t - 1),
            _ => None,
        })
        .ok_or("no proposal")?;
    for node in 0..4 {
        let first = |model| {
            trace.records.iter().find_map(|r| match r {
                Record::Committed {
                    t, node: n, model: m, ..
                } if *n == node && *m == model => Some(*t - propose),
                _ => None,
            })
        };
        let (h, b) = (first(Model::Hybrid), first(Model::Bft));
        ensure(h == Some(2) && b == Some(4), || {
            format!("replica {node}: hybrid {h:?}, bft {b:?}")
        })?;
    }
    let m = compute_metrics(&trace);
    ensure(m.hybrid.p50 == 4 && m.bft.p50 == 6, || {
        format!("client latencies {} / {}", m.hybrid.p50, m.bft.p50)
    })?;
    Ok("commit +2 / +4 delays after propose; client latency 4 / 6".into())
}

fn ac3() -> Outcome {
    const RUNS: u64 = 1000;
    let sizes = [4usize, 7, 10];
    let mut summary = Vec::new();
    for protocol in [Protocol::Duobft, Protocol::McDuobft, Protocol::FlexMinbft] {
        let seeds: Vec<u64> = (0..RUNS).collect();
        let outcomes = run_seeds(&seeds, |seed| {
            let kind = FaultKind::ALL[(seed % 7) as usize];
            let n = sizes[((seed / 7) % 3) as usize];
            fault_scenario(protocol, n, kind, seed)
        })
        .map_err(|e| e.to_string())?;
        let failed: Vec<_> = outcomes.iter().filter(|o| !o.is_pass()).collect();
        ensure(failed.is_empty(), || {
            format!("{protocol:?}: {} failures, first {:?}", failed.len(), failed[0])
        })?;
        summary.push(format!("{} x{}", protocol.name(), outcomes.len()));
    }
    Ok(format!("0 safety / liveness failures ({})", summary.join(", ")))
}

fn ac4() -> Outcome {
    let seeds: Vec<u64> = (0..200).collect();
    let outcomes = run_seeds(&seeds, |seed| {
        let mut s = workload(Protocol::Duobft, 4, 1, 3);
        let mut fault = spec(0, BehaviorKind::CompromisedUsig);
        fault.at_ms = Some(seed % 8);
        s.faults.push(fault);
        s
    })
    .map_err(|e| e.to_string())?;
    let hybrid_fail = outcomes.iter().filter(|o| !o.hybrid.is_pass()).count();
    let bft_fail = outcomes.iter().filter(|o| !o.bft.is_pass()).count();
    ensure(hybrid_fail >= 1, || "no hybrid violation in 200 seeds".into())?;
    ensure(bft_fail == 0, || format!("{bft_fail} BFT violations"))?;
    Ok(format!("hybrid FAIL on {hybrid_fail}/200 seeds, BFT PASS on 200/200"))
}

fn ac5() -> Outcome {
    for protocol in [Protocol::Duobft, Protocol::FlexMinbft] {
        let f = 1;
        let mut s = workload(protocol, 4, f, 3);
        s.faults.push(spec(0, BehaviorKind::SilentPrimary));
        let trace = run(&s, 3).map_err(|e| e.to_string())?;
        let outcome = judge(&trace, 3).map_err(|e| e.to_string())?;
        ensure(outcome.is_pass(), || {
            format!("{protocol:?} silent primary: {outcome:?}")
        })?;
        for node in 1..4 {
            let entered: Vec<_> = trace
                .records
                .iter()
                .filter_map(|r| match r {
                    Record::EnterVc {
                        node: n,
                        view,
                        requests,
                        ..
                    } if *n == node => Some((*view, *requests)),
                    _ => None,
                })
                .collect();
            ensure(entered == [(1, f + 1)], || {
                format!("{protocol:?} replica {node} entered {entered:?}")
            })?;
            let installed = trace
                .records
                .iter()
                .any(|r| matches!(r, Record::ViewInstall { node: n, view: 1, .. } if *n == node));
            ensure(installed, || {
                format!("{protocol:?} replica {node} never installed view 1")
            })?;
        }
        ensure(max_view(&trace) == 1, || {
            format!("{protocol:?} reached view {}", max_view(&trace))
        })?;
    }

    let mut reached = Vec::new();
    for protocol in [Protocol::Duobft, Protocol::FlexMinbft] {
        for n in [4usize, 7, 10] {
            let f = (n - 1) / 3;
            let results: Vec<Result<(u64, bool), String>> = (0..100u64)
                .into_par_iter()
                .map(|seed| {
                    let mut s = workload(protocol, n, f, seed);
                    s.faults
                        .extend((0..f as u32).map(|r| spec(r, BehaviorKind::SilentPrimary)));
                    let trace = run(&s, seed).map_err(|e| e.to_string())?;
                    let outcome = judge(&trace, seed).map_err(|e| e.to_string())?;
                    Ok((max_view(&trace), outcome.is_pass()))
                })
                .collect();
            let mut top = 0;
            for (seed, r) in results.into_iter().enumerate() {
                let (view, pass) = r?;
                ensure(pass && view <= f as u64 + 1, || {
                    format!("{protocol:?} n = {n} seed {seed}: view {view}, pass {pass}")
                })?;
                top = top.max(view);
            }
            reached.push(format!("{}/{}", top, f + 1));
        }
    }
    Ok(format!(
        "silent primary: view 1 after f+1 requests, pending commands committed; 600 cascades, max view / bound {}",
        reached.join(" ")
    ))
}

/// Client latency percentiles for a WAN multichain run with every client on one model.
fn wan_latency(response: &str) -> Result<(u64, u64), String> {
    let mut s = Scenario::new(Protocol::McDuobft, 25, 8);
    s.instances = 4;
    s.matrix = MatrixName::Azure10;
    s.clients = 20;
    s.batch_size = 10;
    s.response = response.into();
    s.trace = TraceLevel::Events;
    s.base_timeout_ms = 2000;
    s.client_timeout_ms = 10_000;
    s.stop.submit_until_ms = 1500;
    let trace = run(&s, 1).map_err(|e| e.to_string())?;
    let outcome = judge(&trace, 1).map_err(|e| e.to_string())?;
    ensure(outcome.is_pass(), || format!("{response}: {outcome:?}"))?;
    let m = compute_metrics(&trace);
    Ok((m.hybrid.p50, m.bft.p50))
}

fn ac6() -> Outcome {
    let runs: Vec<_> = ["100%", "0%"].into_par_iter().map(wan_latency).collect();
    let (hybrid, _) = runs[0].clone()?;
    let (_, bft) = runs[1].clone()?;
    ensure(hybrid > 0 && bft > 0, || "no accepted requests".into())?;
    ensure(hybrid * 100 <= bft * 80, || {
        format!("hybrid p50 {hybrid} vs BFT p50 {bft}")
    })?;
    ensure(hybrid < 300, || format!("hybrid p50 {hybrid} ms"))?;
    Ok(format!(
        "N=25 m=4: hybrid p50 {hybrid} ms, BFT p50 {bft} ms, ratio {:.2} (interpolated region matrix)",
        hybrid as f64 / bft as f64
    ))
}

fn ac7() -> Outcome {
    let mut compared = 0;
    for seed in 0..30u64 {
        let kind = FaultKind::ALL[(seed % 7) as usize];
        let mut single = fault_scenario(Protocol::Duobft, [4, 7][(seed % 2) as usize], kind, seed);
        single.trace = TraceLevel::Full;
        let mut multi = single.clone();
        multi.protocol = Protocol::McDuobft;
        multi.instances = 1;
        let a = run(&single, seed).map_err(|e| e.to_string())?.to_ndjson();
        let b = run(&multi, seed).map_err(|e| e.to_string())?.to_ndjson();
        ensure(a == b, || format!("traces differ for seed {seed} ({kind:?})"))?;
        compared += 1;
    }

    let throughput = |m: u32| -> Result<f64, String> {
        let mut s = Scenario::new(Protocol::McDuobft, 4, 1);
        s.instances = m;
        s.matrix = MatrixName::Azure10;
        s.clients = 100;
        s.batch_size = 10;
        s.trace = TraceLevel::Events;
        s.base_timeout_ms = 2000;
        s.client_timeout_ms = 10_000;
        s.stop.submit_until_ms = 3000;
        let trace = run(&s, 1).map_err(|e| e.to_string())?;
        let outcome = judge(&trace, 1).map_err(|e| e.to_string())?;
        ensure(outcome.is_pass(), || format!("m = {m}: {outcome:?}"))?;
        Ok(compute_metrics(&trace).throughput)
    };
    let rates: Vec<_> = [1, 4].into_par_iter().map(throughput).collect();
    let (one, four) = (rates[0].clone()?, rates[1].clone()?);
    ensure(four >= 2.0 * one, || {
        format!("m=4 {four:.1} req/s vs m=1 {one:.1} req/s")
    })?;
    Ok(format!(
        "{compared} seeds byte-identical at m=1; throughput m=1 {one:.0} req/s, m=4 {four:.0} req/s ({:.2}x)",
        four / one
    ))
}

fn ac8() -> Outcome {
    let honest = explore(false);
    ensure(honest.terminal > 0 && honest.max_bft_height >= 1, || {
        format!("honest exploration incomplete: {honest:?}")
    })?;
    ensure(honest.hybrid_violations == 0 && honest.bft_violations == 0, || {
        format!("honest: {honest:?}")
    })?;
    let attacked = explore(true);
    ensure(attacked.hybrid_violations >= 1, || format!("compromised: {attacked:?}"))?;
    ensure(attacked.bft_violations == 0, || format!("compromised: {attacked:?}"))?;
    Ok(format!(
        "honest: {} states, 0 violations; compromised: {} states, {} hybrid / 0 BFT violations",
        honest.states, attacked.states, attacked.hybrid_violations
    ))
}

fn ac9() -> Outcome {
    let per_seed: Vec<Result<(usize, usize), String>> = (0..200u64)
        .into_par_iter()
        .map(|seed| {
            let mut s = workload(Protocol::FlexMinbft, 4, 1, seed);
            s.faults.push(spec(0, BehaviorKind::Repropose));
            let trace = run(&s, seed).map_err(|e| e.to_string())?;
            let outcome = judge(&trace, seed).map_err(|e| e.to_string())?;
            ensure(outcome.is_pass(), || format!("seed {seed}: {outcome:?}"))?;
            let mut executed: BTreeMap<u32, BTreeSet<(u32, u64)>> = BTreeMap::new();
            let (mut slots, mut batches) = (0, 0);
            for r in &trace.records {
                match r {
                    Record::Executed { node, commands, .. } if *node != 0 => {
                        batches += 1;
                        for c in commands {
                            ensure(executed.entry(*node).or_default().insert(*c), || {
                                format!("seed {seed}: replica {node} executed {c:?} twice")
                            })?;
                        }
                    }
                    Record::Committed { node, .. } if *node != 0 => slots += 1,
                    _ => {}
                }
            }
            Ok((slots, batches))
        })
        .collect();
    let (mut slots, mut batches) = (0, 0);
    for r in per_seed {
        let (s, b) = r?;
        slots += s;
        batches += b;
    }
    // Each batch occupies two attested log slots but executes once.
    ensure(slots >= 2 * batches, || {
        format!("re-proposals not observed: {slots} slots for {batches} batches")
    })?;

    let mut detected = 0;
    for seed in 0..20u64 {
        let mut s = workload(Protocol::FlexMinbft, 5, 2, seed);
        s.faults.push(spec(0, BehaviorKind::SilentPrimary));
        let mut truncate = spec(1, BehaviorKind::TruncateLog);
        truncate.omit = Some(1);
        s.faults.push(truncate);
        let trace = run(&s, seed).map_err(|e| e.to_string())?;
        let outcome = judge(&trace, seed).map_err(|e| e.to_string())?;
        ensure(outcome.hybrid.is_pass(), || {
            format!("truncation seed {seed}: {outcome:?}")
        })?;
        let found = trace.records.iter().any(|r| {
            matches!(r, Record::Evidence { node, detail, .. }
                if *node >= 2 && detail.contains("LogHole") && detail.contains("ReplicaId(1)"))
        });
        detected += found as usize;
    }
    ensure(detected == 20, || format!("log hole detected on {detected}/20 seeds"))?;
    Ok(format!(
        "200 re-proposing seeds: {slots} attested slots, {batches} batch executions, no duplicates; log hole flagged on 20/20 truncation seeds"
    ))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("AC1", ac1),
        ("AC2", ac2),
        ("AC3", ac3),
        ("AC4", ac4),
        ("AC5", ac5),
        ("AC6", ac6),
        ("AC7", ac7),
        ("AC8", ac8),
        ("AC9", ac9),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with("AC")).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !only.is_empty() && !only.iter().any(|o| o == name) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("{name} PASS  {detail}  [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("{name} FAIL  {why}  [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
