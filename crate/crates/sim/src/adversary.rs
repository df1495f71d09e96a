//! Replica engines and the Byzantine wrappers around them.

use duobft_core::crypto::ReplicaId;
use duobft_core::duobft::DuoReplica;
use duobft_core::messages::{
    vote_context, Block, ClientId, Command, Prepare, Propose, ProtocolMessage, ResponseModel, ViewChange, ViewChangeLog,
};
use duobft_core::minbft::MinbftReplica;
use duobft_core::replica::{Output, Replica, Timer};
use duobft_core::usig::{CounterStrategy, UsigInstance};

use crate::scenario::Behavior;

/// Client id used for commands only an adversary invents.
pub const ADVERSARY_CLIENT: ClientId = ClientId(u32::MAX);

#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Engine {
    Duo(DuoReplica),
    Min(MinbftReplica),
}

impl Engine {
    pub fn replica(&mut self) -> &mut dyn Replica {
        match self {
            Engine::Duo(r) => r,
            Engine::Min(r) => r,
        }
    }

    pub fn view(&self) -> u64 {
        match self {
            Engine::Duo(r) => r.view(),
            Engine::Min(r) => r.view(),
        }
    }

    pub fn usig_mut(&mut self) -> &mut UsigInstance {
        match self {
            Engine::Duo(r) => r.usig_mut(),
            Engine::Min(r) => r.usig_mut(),
        }
    }

    pub fn on_message(&mut self, msg: ProtocolMessage) -> Vec<Output> {
        self.replica().on_message(msg)
    }

    pub fn on_timer(&mut self, timer: Timer) -> Vec<Output> {
        self.replica().on_timer(timer)
    }
}

/// A faulty replica's behaviour, applied to what its engine emits.
#[derive(Debug, Clone, PartialEq)]
pub struct Adversary {
    pub behavior: Behavior,
    id: ReplicaId,
    n: usize,
    fired: bool,
}

impl Adversary {
    pub fn new(behavior: Behavior, id: ReplicaId, n: usize, engine: &mut Engine) -> Self {
        if behavior.is_compromised() {
            engine.usig_mut().compromise(CounterStrategy::Sequential);
        }
        Adversary {
            behavior,
            id,
            n,
            fired: false,
        }
    }

    /// Whether the one-shot fork has been sent.
    pub fn fired(&self) -> bool {
        self.fired
    }

    pub fn is_crashed(&self, now: u64) -> bool {
        matches!(self.behavior, Behavior::Crash { at_ms } if now >= at_ms)
    }

    /// Probability that each outbound message is silently discarded.
    pub fn drop_prob(&self) -> f64 {
        match self.behavior {
            Behavior::DropOutbound { prob } => prob,
            _ => 0.0,
        }
    }

    /// The two halves a forking primary splits the other replicas into; the
    /// primary itself joins the first.
    pub fn split(&self) -> (Vec<ReplicaId>, Vec<ReplicaId>) {
        let others: Vec<ReplicaId> = (0..self.n as u32).map(ReplicaId).filter(|r| *r != self.id).collect();
        let half = others.len() / 2;
        let mut a = vec![self.id];
        a.extend_from_slice(&others[..half]);
        (a, others[half..].to_vec())
    }

    pub fn outbound(&mut self, engine: &mut Engine, now: u64, outputs: Vec<Output>) -> Vec<Output> {
        match self.behavior {
            Behavior::Crash { .. } | Behavior::DropOutbound { .. } => outputs,
            Behavior::SilentPrimary { from_view } => {
                let view = engine.view();
                let primary = ReplicaId::primary_of(view, self.n);
                if view >= from_view && primary == self.id {
                    outputs.into_iter().filter(|o| !is_network(o)).collect()
                } else {
                    outputs
                }
            }
            Behavior::Equivocate { at_ms } | Behavior::CompromisedUsig { at_ms } => {
                if self.fired || now < at_ms {
                    return outputs;
                }
                let forge = self.behavior.is_compromised();
                let mut result = Vec::with_capacity(outputs.len() + self.n);
                for o in outputs {
                    match o {
                        Output::Broadcast(msg) if !self.fired => match self.fork(engine, &msg, forge) {
                            Some(other) => {
                                self.fired = true;
                                let (a, b) = self.split();
                                for to in a {
                                    result.push(Output::Send { to, msg: msg.clone() });
                                }
                                for to in b {
                                    result.push(Output::Send { to, msg: other.clone() });
                                }
                            }
                            None => result.push(Output::Broadcast(msg)),
                        },
                        o => result.push(o),
                    }
                }
                result
            }
            Behavior::TruncateLog { omit } => outputs
                .into_iter()
                .map(|o| match o {
                    Output::Broadcast(ProtocolMessage::ViewChange(vc)) => {
                        Output::Broadcast(ProtocolMessage::ViewChange(truncate(engine, vc, omit)))
                    }
                    o => o,
                })
                .collect(),
            Behavior::Repropose => {
                let mut result = Vec::with_capacity(outputs.len());
                for o in outputs {
                    let again = match (&o, &mut *engine) {
                        (Output::Broadcast(ProtocolMessage::Prepare(p)), Engine::Min(r)) => {
                            Some(r.propose_batch(p.batch.clone()))
                        }
                        _ => None,
                    };
                    result.push(o);
                    result.extend(again.into_iter().flatten());
                }
                result
            }
        }
    }

    /// A conflicting twin of the primary's proposal. Without a compromised
    /// counter the twin reuses the original attestation and fails verification.
    fn fork(&self, engine: &mut Engine, msg: &ProtocolMessage, forge: bool) -> Option<ProtocolMessage> {
        let junk = |seq| Command {
            client: ADVERSARY_CLIENT,
            sequence: seq,
            payload: vec![0xad],
            response_model: ResponseModel::Both,
        };
        match msg {
            ProtocolMessage::Propose(p) if p.sender == self.id => {
                let mut block: Block = p.block.clone();
                block.commands = vec![junk(block.height)];
                let ui = if forge {
                    let ctx = vote_context(p.view, block.instance, block.height, &block.digest());
                    engine.usig_mut().forge(p.ui.counter, ctx).ok()?
                } else {
                    p.ui
                };
                Some(ProtocolMessage::Propose(Propose {
                    view: p.view,
                    sender: p.sender,
                    block,
                    justify: p.justify.clone(),
                    ui,
                }))
            }
            ProtocolMessage::Prepare(p) if p.sender == self.id => {
                let batch = vec![junk(p.ui.counter)];
                let ui = if forge {
                    engine
                        .usig_mut()
                        .forge(p.ui.counter, Prepare::attested_digest(p.view, p.sender, &batch))
                        .ok()?
                } else {
                    p.ui
                };
                Some(ProtocolMessage::Prepare(Prepare {
                    view: p.view,
                    sender: p.sender,
                    batch,
                    ui,
                }))
            }
            _ => None,
        }
    }
}

fn is_network(o: &Output) -> bool {
    matches!(o, Output::Send { .. } | Output::Broadcast(_) | Output::Reply { .. })
}

/// Drops the last `omit` own entries of a MinBFT log and re-attests the
/// ViewChange. The fresh counter lies beyond the dropped entries.
fn truncate(engine: &mut Engine, vc: ViewChange, omit: usize) -> ViewChange {
    let ViewChangeLog::Messages(mut entries) = vc.log else {
        return vc;
    };
    for _ in 0..omit {
        match entries.iter().rposition(|e| e.is_own()) {
            Some(i) => {
                entries.remove(i);
            }
            None => break,
        }
    }
    let log = ViewChangeLog::Messages(entries);
    let ui = engine
        .usig_mut()
        .create_ui_for_digest(ViewChange::attested_digest(vc.sender, vc.new_view, &log));
    ViewChange {
        sender: vc.sender,
        new_view: vc.new_view,
        log,
        ui,
    }
}
