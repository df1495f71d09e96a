//! A unit-delay network for driving replicas in tests.

#![allow(dead_code)]

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};

use duobft_core::crypto::{keygen, ReplicaId};
use duobft_core::messages::{ClientId, ClientRequest, Command, FaultModel, ProtocolMessage, ResponseModel};
use duobft_core::quorum::QuorumParams;
use duobft_core::replica::{CommPattern, Output, Pacing, Replica, ReplicaConfig, Timer};

pub fn config(id: u32, params: QuorumParams, lanes: u32, comm: CommPattern, pacing: Pacing) -> ReplicaConfig {
    ReplicaConfig {
        id: ReplicaId(id),
        params,
        keys: (0..params.n as u64).map(|i| keygen(i).public()).collect(),
        batch_size: 16,
        base_timeout: 50,
        lanes,
        comm,
        pacing,
    }
}

pub fn command(client: u32, sequence: u64, model: ResponseModel) -> Command {
    Command {
        client: ClientId(client),
        sequence,
        payload: vec![0; 8],
        response_model: model,
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Event {
    Deliver { to: usize, msg: ProtocolMessage },
    Timer { node: usize, timer: Timer, generation: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub time: u64,
    pub node: usize,
    pub output: Output,
}

pub struct Net<R: Replica> {
    pub nodes: Vec<R>,
    pub time: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<(u64, u64, usize)>>,
    events: Vec<Option<Event>>,
    generations: Vec<std::collections::BTreeMap<Timer, u64>>,
    /// Nodes whose outgoing traffic is dropped.
    pub silent: BTreeSet<usize>,
    pub log: Vec<Record>,
}

impl<R: Replica> Net<R> {
    pub fn new(nodes: Vec<R>) -> Self {
        let n = nodes.len();
        Net {
            nodes,
            time: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            events: Vec::new(),
            generations: vec![Default::default(); n],
            silent: BTreeSet::new(),
            log: Vec::new(),
        }
    }

    fn push(&mut self, at: u64, ev: Event) {
        self.seq += 1;
        self.events.push(Some(ev));
        self.queue.push(Reverse((at, self.seq, self.events.len() - 1)));
    }

    pub fn request_all(&mut self, cmd: Command) {
        for to in 0..self.nodes.len() {
            let msg = ProtocolMessage::ClientRequest(ClientRequest { command: cmd.clone() });
            self.push(self.time, Event::Deliver { to, msg });
        }
    }

    /// Applies outputs produced outside the event loop.
    pub fn inject(&mut self, node: usize, outputs: Vec<Output>) {
        self.apply(node, outputs);
    }

    fn apply(&mut self, node: usize, outputs: Vec<Output>) {
        for o in outputs {
            self.log.push(Record {
                time: self.time,
                node,
                output: o.clone(),
            });
            if self.silent.contains(&node) {
                continue;
            }
            match o {
                Output::Send { to, msg } => self.push(self.time + 1, Event::Deliver { to: to.index(), msg }),
                Output::Broadcast(msg) => {
                    for to in 0..self.nodes.len() {
                        self.push(self.time + 1, Event::Deliver { to, msg: msg.clone() });
                    }
                }
                Output::SetTimer { timer, after } => {
                    let g = self.generations[node].entry(timer).or_insert(0);
                    *g += 1;
                    let generation = *g;
                    self.push(
                        self.time + after,
                        Event::Timer {
                            node,
                            timer,
                            generation,
                        },
                    );
                }
                Output::CancelTimer(timer) => {
                    *self.generations[node].entry(timer).or_insert(0) += 1;
                }
                _ => {}
            }
        }
    }

    /// Runs until the queue drains or `until` is reached.
    pub fn run(&mut self, until: u64) {
        while let Some(Reverse((at, _, idx))) = self.queue.peek().copied() {
            if at > until {
                break;
            }
            self.queue.pop();
            self.time = at;
            let ev = self.events[idx].take().expect("event consumed once");
            match ev {
                Event::Deliver { to, msg } => {
                    let out = self.nodes[to].on_message(msg);
                    self.apply(to, out);
                }
                Event::Timer {
                    node,
                    timer,
                    generation,
                } => {
                    if self.generations[node].get(&timer) == Some(&generation) {
                        let out = self.nodes[node].on_timer(timer);
                        self.apply(node, out);
                    }
                }
            }
        }
    }

    pub fn commits(&self, node: usize, model: FaultModel) -> Vec<(u64, u32, u64)> {
        self.log
            .iter()
            .filter(|r| r.node == node)
            .filter_map(|r| match &r.output {
                Output::Committed {
                    model: m, lane, index, ..
                } if *m == model => Some((r.time, *lane, *index)),
                _ => None,
            })
            .collect()
    }

    pub fn replies(&self, model: FaultModel) -> Vec<(u64, usize)> {
        self.log
            .iter()
            .filter_map(|r| match &r.output {
                Output::Reply { reply, .. } if reply.model == model => Some((r.time, r.node)),
                _ => None,
            })
            .collect()
    }
}
