//! Exhaustive exploration of DuoBFT delivery orders on a small model.
//!
//! Four replicas, one client command, no timers and no losses: the primary
//! proposes block 1 and then the block that completes its two-chain. Every
//! order in which in-flight Propose and Vote messages can be delivered is
//! explored depth-first; states are deduplicated by fingerprint. A replica's
//! messages to itself are delivered immediately, which only removes orders
//! that no other replica can observe. Fingerprints and message identities
//! ignore which voters make up a certificate, since replicas act on any
//! valid certificate for a block alike.

use std::collections::hash_map::DefaultHasher;
use std::collections::{HashMap, HashSet};
use std::hash::{Hash, Hasher};
use std::rc::Rc;

use duobft_core::crypto::{keygen, Digest, ReplicaId};
use duobft_core::duobft::DuoReplica;
use duobft_core::messages::{
    serialize, ClientId, ClientRequest, Command, FaultModel, Propose, ProtocolMessage, ResponseModel,
};
use duobft_core::quorum::duobft_params;
use duobft_core::replica::{CommPattern, Output, Pacing, ReplicaConfig};

use crate::adversary::{Adversary, Engine};
use crate::scenario::Behavior;

const N: usize = 4;

/// What the exploration found.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Exploration {
    pub states: usize,
    /// Terminal states, where nothing is left in flight.
    pub terminal: usize,
    /// Distinct states in which two replicas committed different blocks at
    /// one height under the hybrid rule.
    pub hybrid_violations: usize,
    pub bft_violations: usize,
    /// Highest height committed under the BFT rule in any state.
    pub max_bft_height: u64,
}

/// Per-replica data derived from its state, refreshed only when it changes.
#[derive(Clone, PartialEq, Eq)]
struct Summary {
    fingerprint: u64,
    /// Committed block digests per model, by height.
    committed: [Vec<Digest>; 2],
}

impl Summary {
    fn of(engine: &Engine) -> Self {
        let Engine::Duo(d) = engine else {
            unreachable!("explorer runs DuoBFT")
        };
        let mut h = DefaultHasher::new();
        d.hash_modulo_voters(&mut h);
        let committed = [FaultModel::Hybrid, FaultModel::Bft].map(|model| {
            let top = d.frontier(0, model) as usize;
            d.chain(0).iter().take(top).map(|e| e.block.digest()).collect()
        });
        Summary {
            fingerprint: h.finish(),
            committed,
        }
    }
}

#[derive(Clone)]
struct State {
    replicas: Vec<Rc<Engine>>,
    summaries: Vec<Rc<Summary>>,
    adversary: Option<Adversary>,
    /// Interned message ids in flight, with their destination, sorted.
    inflight: Vec<(u32, u32)>,
}

struct Explorer {
    messages: Vec<ProtocolMessage>,
    ids: HashMap<Vec<u8>, u32>,
    seen: HashSet<u64>,
    result: Exploration,
}

impl Explorer {
    /// Messages are identified modulo the voters of any certificate they
    /// carry, matching how states are compared.
    fn intern(&mut self, msg: ProtocolMessage) -> u32 {
        let mut key = msg.clone();
        if let ProtocolMessage::Propose(Propose { justify: Some(q), .. }) = &mut key {
            q.votes.clear();
        }
        let bytes = serialize(&key);
        if let Some(id) = self.ids.get(&bytes) {
            return *id;
        }
        let id = self.messages.len() as u32;
        self.messages.push(msg);
        self.ids.insert(bytes, id);
        id
    }

    /// Delivers `msg` to `to` and everything it sends itself, queueing the rest.
    fn deliver(&mut self, state: &mut State, to: u32, msg: ProtocolMessage) {
        let mut local = vec![msg];
        while let Some(msg) = local.pop() {
            let engine = Rc::make_mut(&mut state.replicas[to as usize]);
            let mut out = engine.on_message(msg);
            if let Some(adv) = state.adversary.as_mut().filter(|_| to == 0) {
                out = adv.outbound(engine, 0, out);
            }
            for o in out {
                let targets: Vec<(u32, ProtocolMessage)> = match o {
                    Output::Broadcast(m) => (0..N as u32).map(|r| (r, m.clone())).collect(),
                    Output::Send { to, msg } => vec![(to.0, msg)],
                    _ => continue,
                };
                for (r, m) in targets {
                    if !matches!(m, ProtocolMessage::Propose(_) | ProtocolMessage::Vote(_)) {
                        continue;
                    }
                    if r == to {
                        local.push(m);
                    } else {
                        let id = self.intern(m);
                        state.inflight.push((r, id));
                    }
                }
            }
        }
        state.inflight.sort_unstable();
        state.summaries[to as usize] = Rc::new(Summary::of(&state.replicas[to as usize]));
    }

    fn fingerprint(state: &State) -> u64 {
        let mut h = DefaultHasher::new();
        for s in &state.summaries {
            s.fingerprint.hash(&mut h);
        }
        state.adversary.as_ref().map(|a| a.fired()).hash(&mut h);
        state.inflight.hash(&mut h);
        h.finish()
    }

    fn judge(&mut self, state: &State) {
        for (m, model) in [FaultModel::Hybrid, FaultModel::Bft].into_iter().enumerate() {
            let mut chosen: Vec<Digest> = Vec::new();
            let mut conflict = false;
            for s in &state.summaries {
                let committed = &s.committed[m];
                for (i, d) in committed.iter().enumerate() {
                    match chosen.get(i) {
                        Some(c) => conflict |= c != d,
                        None => chosen.push(*d),
                    }
                }
                if model == FaultModel::Bft {
                    self.result.max_bft_height = self.result.max_bft_height.max(committed.len() as u64);
                }
            }
            if conflict {
                match model {
                    FaultModel::Hybrid => self.result.hybrid_violations += 1,
                    FaultModel::Bft => self.result.bft_violations += 1,
                }
            }
        }
    }

    fn run(&mut self, start: State) {
        let mut stack = vec![start];
        while let Some(state) = stack.pop() {
            if !self.seen.insert(Self::fingerprint(&state)) {
                continue;
            }
            self.result.states += 1;
            self.judge(&state);
            if state.inflight.is_empty() {
                self.result.terminal += 1;
                continue;
            }
            let mut previous = None;
            for i in 0..state.inflight.len() {
                let (to, id) = state.inflight[i];
                // Identical copies lead to identical successors.
                if previous == Some((to, id)) {
                    continue;
                }
                previous = Some((to, id));
                let mut next = state.clone();
                next.inflight.remove(i);
                let msg = self.messages[id as usize].clone();
                self.deliver(&mut next, to, msg);
                stack.push(next);
            }
        }
    }
}

/// Explores every delivery order. With `compromised`, the primary forges a
/// second attestation for its first proposal and splits the replicas.
pub fn explore(compromised: bool) -> Exploration {
    let params = duobft_params(1).expect("f = 1 is valid");
    let keys: Vec<_> = (0..N as u64).map(keygen).collect();
    let publics: Vec<_> = keys.iter().map(|k| k.public()).collect();
    let mut replicas: Vec<Engine> = keys
        .into_iter()
        .enumerate()
        .map(|(i, key)| {
            let cfg = ReplicaConfig {
                id: ReplicaId(i as u32),
                params,
                keys: publics.clone(),
                batch_size: 1,
                base_timeout: u64::MAX / 4,
                lanes: 1,
                comm: CommPattern::Quadratic,
                pacing: Pacing::BftQc,
            };
            Engine::Duo(DuoReplica::new(cfg, key))
        })
        .collect();
    let adversary = compromised.then(|| {
        Adversary::new(
            Behavior::CompromisedUsig { at_ms: 0 },
            ReplicaId(0),
            N,
            &mut replicas[0],
        )
    });
    let mut explorer = Explorer {
        messages: Vec::new(),
        ids: HashMap::new(),
        seen: HashSet::new(),
        result: Exploration::default(),
    };
    let mut state = State {
        summaries: replicas.iter().map(|e| Rc::new(Summary::of(e))).collect(),
        replicas: replicas.into_iter().map(Rc::new).collect(),
        adversary,
        inflight: Vec::new(),
    };
    let request = ProtocolMessage::ClientRequest(ClientRequest {
        command: Command {
            client: ClientId(0),
            sequence: 1,
            payload: vec![7],
            response_model: ResponseModel::Both,
        },
    });
    explorer.deliver(&mut state, 0, request);
    explorer.run(state);
    explorer.result
}
