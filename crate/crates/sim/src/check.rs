//! Safety and liveness checkers. Both are pure functions of a trace.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::trace::{Model, Record, Trace};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail(Violation),
}

impl Verdict {
    pub fn is_pass(&self) -> bool {
        matches!(self, Verdict::Pass)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Pass => write!(f, "PASS"),
            Verdict::Fail(v) => write!(f, "FAIL: {v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// Two correct replicas committed different blocks at one position.
    Conflict {
        model: Model,
        lane: u32,
        index: u64,
        first: (u32, String),
        second: (u32, String),
    },
    /// A replica's commits under one model skip a position.
    Gap {
        node: u32,
        model: Model,
        lane: u32,
        index: u64,
    },
    /// Executed command sequences of two correct replicas diverge.
    Divergence {
        model: Model,
        nodes: (u32, u32),
        position: usize,
    },
    /// A BFT commit that the same replica has not hybrid-committed.
    BftNotInHybrid { node: u32, lane: u32, index: u64 },
    /// A command submitted before the cutoff never reached its model's quorum.
    Unanswered { client: u32, seq: u64, model: Model },
    /// More view changes after stabilisation than the fault bound allows.
    TooManyViewChanges { after_gst: u64, bound: u64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Conflict {
                model,
                lane,
                index,
                first,
                second,
            } => write!(
                f,
                "{} conflict at lane {lane} index {index}: replica {} committed {}, replica {} committed {}",
                model.name(),
                first.0,
                short(&first.1),
                second.0,
                short(&second.1)
            ),
            Violation::Gap {
                node,
                model,
                lane,
                index,
            } => {
                write!(f, "replica {node} skipped {} lane {lane} index {index}", model.name())
            }
            Violation::Divergence { model, nodes, position } => write!(
                f,
                "{} execution of replicas {} and {} diverges at position {position}",
                model.name(),
                nodes.0,
                nodes.1
            ),
            Violation::BftNotInHybrid { node, lane, index } => write!(
                f,
                "replica {node} BFT-committed lane {lane} index {index} without a matching hybrid commit"
            ),
            Violation::Unanswered { client, seq, model } => {
                write!(f, "client {client} request {seq} never accepted under {}", model.name())
            }
            Violation::TooManyViewChanges { after_gst, bound } => {
                write!(f, "{after_gst} view changes after stabilisation, bound {bound}")
            }
        }
    }
}

fn short(s: &str) -> &str {
    &s[..s.len().min(12)]
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CheckError {
    #[error("trace has no header")]
    MissingHeader,
    #[error("trace is incomplete: no end record")]
    Truncated,
}

fn correct_nodes(trace: &Trace) -> Result<BTreeSet<u32>, CheckError> {
    let h = trace.header.as_ref().ok_or(CheckError::MissingHeader)?;
    if !trace.is_complete() {
        return Err(CheckError::Truncated);
    }
    Ok((0..h.n as u32).filter(|r| !h.faulty.contains(r)).collect())
}

/// Safety under `model`: correct replicas never commit different blocks at
/// the same position, each commits positions in order, and their executed
/// command sequences are prefixes of one another. Without a compromised
/// trusted counter, each replica's BFT commits are also among its hybrid
/// commits.
pub fn check_safety(trace: &Trace, model: Model) -> Result<Verdict, CheckError> {
    let correct = correct_nodes(trace)?;
    let compromised = trace.header.as_ref().is_some_and(|h| !h.compromised.is_empty());

    let mut chosen: BTreeMap<(u32, u64), (u32, &str)> = BTreeMap::new();
    let mut next: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    let mut hybrid: BTreeMap<(u32, u32, u64), &str> = BTreeMap::new();
    let mut executed: BTreeMap<u32, Vec<(u32, u64)>> = BTreeMap::new();

    for r in &trace.records {
        match r {
            Record::Committed {
                node,
                model: m,
                lane,
                index,
                digest,
                ..
            } if correct.contains(node) => {
                if *m == Model::Hybrid {
                    hybrid.insert((*node, *lane, *index), digest);
                }
                if *m != model {
                    continue;
                }
                let expected = next.entry((*node, *lane)).or_insert(1);
                if *index != *expected {
                    return Ok(Verdict::Fail(Violation::Gap {
                        node: *node,
                        model,
                        lane: *lane,
                        index: *expected,
                    }));
                }
                *expected += 1;
                match chosen.get(&(*lane, *index)) {
                    Some((other, d)) if *d != digest.as_str() => {
                        return Ok(Verdict::Fail(Violation::Conflict {
                            model,
                            lane: *lane,
                            index: *index,
                            first: (*other, d.to_string()),
                            second: (*node, digest.clone()),
                        }));
                    }
                    Some(_) => {}
                    None => {
                        chosen.insert((*lane, *index), (*node, digest));
                    }
                }
                if model == Model::Bft && !compromised && hybrid.get(&(*node, *lane, *index)) != Some(&digest.as_str())
                {
                    return Ok(Verdict::Fail(Violation::BftNotInHybrid {
                        node: *node,
                        lane: *lane,
                        index: *index,
                    }));
                }
            }
            Record::Executed {
                node,
                model: m,
                commands,
                ..
            } if *m == model && correct.contains(node) => {
                executed.entry(*node).or_default().extend(commands.iter().copied());
            }
            _ => {}
        }
    }

    let seqs: Vec<(u32, &Vec<(u32, u64)>)> = executed.iter().map(|(n, s)| (*n, s)).collect();
    if let Some((longest_node, longest)) = seqs.iter().max_by_key(|(_, s)| s.len()) {
        for (node, s) in &seqs {
            if let Some(position) = s.iter().zip(longest.iter()).position(|(a, b)| a != b) {
                return Ok(Verdict::Fail(Violation::Divergence {
                    model,
                    nodes: (*longest_node, *node),
                    position,
                }));
            }
        }
    }
    Ok(Verdict::Pass)
}

/// Liveness: every request submitted before the cutoff was accepted under
/// each model its client awaited, and after stabilisation at most `f + 1`
/// view changes happened.
pub fn check_liveness(trace: &Trace) -> Result<Verdict, CheckError> {
    let correct = correct_nodes(trace)?;
    let h = trace.header.as_ref().ok_or(CheckError::MissingHeader)?;
    let mut outstanding: BTreeMap<(u32, u64), BTreeSet<Model>> = BTreeMap::new();
    let mut view_at_gst = 0;
    let mut max_view = 0;
    for r in &trace.records {
        match r {
            Record::Request { t, client, seq, awaits } if *t < h.submit_until_ms => {
                outstanding.insert((*client, *seq), awaits.iter().copied().collect());
            }
            Record::Accept { client, seq, model, .. } => {
                if let Some(set) = outstanding.get_mut(&(*client, *seq)) {
                    set.remove(model);
                    if set.is_empty() {
                        outstanding.remove(&(*client, *seq));
                    }
                }
            }
            Record::ViewInstall { t, node, view } | Record::EnterVc { t, node, view, .. } if correct.contains(node) => {
                if *t <= h.gst_ms {
                    view_at_gst = view_at_gst.max(*view);
                }
                max_view = max_view.max(*view);
            }
            _ => {}
        }
    }
    if let Some(((client, seq), models)) = outstanding.into_iter().next() {
        let model = *models.iter().next().expect("non-empty");
        return Ok(Verdict::Fail(Violation::Unanswered { client, seq, model }));
    }
    let after_gst = max_view - view_at_gst;
    let bound = h.f as u64 + 1;
    if after_gst > bound {
        return Ok(Verdict::Fail(Violation::TooManyViewChanges { after_gst, bound }));
    }
    Ok(Verdict::Pass)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::Header;

    fn header() -> Header {
        Header {
            seed: 0,
            n: 4,
            f: 1,
            lanes: 1,
            faulty: vec![3],
            compromised: vec![],
            gst_ms: 0,
            submit_until_ms: 100,
            matrix: "unit".into(),
        }
    }

    fn commit(node: u32, model: Model, index: u64, digest: &str) -> Record {
        Record::Committed {
            t: index,
            node,
            model,
            lane: 0,
            index,
            digest: digest.into(),
        }
    }

    fn end() -> Record {
        Record::End {
            t: 50,
            deliveries: 0,
            protocol_deliveries: 0,
            drops: 0,
            truncated: false,
        }
    }

    fn trace(records: Vec<Record>) -> Trace {
        Trace {
            header: Some(header()),
            records,
        }
    }

    #[test]
    fn consistent_commits_pass() {
        let t = trace(vec![
            commit(0, Model::Hybrid, 1, "aa"),
            commit(1, Model::Hybrid, 1, "aa"),
            commit(1, Model::Hybrid, 2, "bb"),
            commit(1, Model::Bft, 1, "aa"),
            end(),
        ]);
        assert_eq!(check_safety(&t, Model::Hybrid), Ok(Verdict::Pass));
        assert_eq!(check_safety(&t, Model::Bft), Ok(Verdict::Pass));
    }

    #[test]
    fn conflicting_height_two_commits_fail_with_the_pair() {
        let t = trace(vec![
            commit(0, Model::Hybrid, 1, "aa"),
            commit(0, Model::Hybrid, 2, "bb"),
            commit(1, Model::Hybrid, 1, "aa"),
            commit(1, Model::Hybrid, 2, "cc"),
            end(),
        ]);
        match check_safety(&t, Model::Hybrid).unwrap() {
            Verdict::Fail(Violation::Conflict {
                index, first, second, ..
            }) => {
                assert_eq!(index, 2);
                assert_eq!(first, (0, "bb".into()));
                assert_eq!(second, (1, "cc".into()));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn faulty_replicas_are_ignored() {
        let t = trace(vec![
            commit(0, Model::Hybrid, 1, "aa"),
            commit(3, Model::Hybrid, 1, "zz"),
            end(),
        ]);
        assert!(check_safety(&t, Model::Hybrid).unwrap().is_pass());
    }

    #[test]
    fn bft_commit_must_be_hybrid_committed() {
        let t = trace(vec![commit(0, Model::Bft, 1, "aa"), end()]);
        assert!(matches!(
            check_safety(&t, Model::Bft).unwrap(),
            Verdict::Fail(Violation::BftNotInHybrid { .. })
        ));
    }

    #[test]
    fn incomplete_trace_is_an_error() {
        let t = trace(vec![commit(0, Model::Hybrid, 1, "aa")]);
        assert_eq!(check_safety(&t, Model::Hybrid), Err(CheckError::Truncated));
    }

    #[test]
    fn gaps_are_reported() {
        let t = trace(vec![commit(0, Model::Hybrid, 2, "aa"), end()]);
        assert!(matches!(
            check_safety(&t, Model::Hybrid).unwrap(),
            Verdict::Fail(Violation::Gap { .. })
        ));
    }

    #[test]
    fn executed_sequences_must_be_prefixes() {
        let exec = |node, commands: Vec<(u32, u64)>| Record::Executed {
            t: 1,
            node,
            model: Model::Bft,
            commands,
        };
        let ok = trace(vec![exec(0, vec![(1, 1), (1, 2)]), exec(1, vec![(1, 1)]), end()]);
        assert!(check_safety(&ok, Model::Bft).unwrap().is_pass());
        let bad = trace(vec![exec(0, vec![(1, 1), (1, 2)]), exec(1, vec![(1, 2)]), end()]);
        assert!(matches!(
            check_safety(&bad, Model::Bft).unwrap(),
            Verdict::Fail(Violation::Divergence { .. })
        ));
    }

    #[test]
    fn unanswered_requests_fail_liveness() {
        let req = Record::Request {
            t: 5,
            client: 0,
            seq: 1,
            awaits: vec![Model::Hybrid, Model::Bft],
        };
        let acc = |model| Record::Accept {
            t: 9,
            client: 0,
            seq: 1,
            model,
            latency: 4,
        };
        let partial = trace(vec![req.clone(), acc(Model::Hybrid), end()]);
        assert!(matches!(
            check_liveness(&partial).unwrap(),
            Verdict::Fail(Violation::Unanswered { model: Model::Bft, .. })
        ));
        let full = trace(vec![req, acc(Model::Hybrid), acc(Model::Bft), end()]);
        assert!(check_liveness(&full).unwrap().is_pass());
    }

    #[test]
    fn view_changes_after_gst_are_bounded() {
        let vc = |view| Record::ViewInstall { t: 10, node: 0, view };
        let ok = trace(vec![vc(1), vc(2), end()]);
        assert!(check_liveness(&ok).unwrap().is_pass());
        let bad = trace(vec![vc(1), vc(2), vc(3), end()]);
        assert!(matches!(
            check_liveness(&bad).unwrap(),
            Verdict::Fail(Violation::TooManyViewChanges { after_gst: 3, bound: 2 })
        ));
    }
}
