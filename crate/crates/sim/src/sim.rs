//! The discrete-event simulator.
//!
//! Events are processed in `(time, sequence)` order, where the sequence is
//! the order of scheduling; with a seeded RNG this makes every run a pure
//! function of `(scenario, seed)`. Lost messages are retransmitted by their
//! sender until delivered, so after partitions heal and losses stop every
//! message between correct nodes eventually arrives.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;
use std::rc::Rc;

use duobft_core::crypto::{keygen, Digest, ReplicaId};
use duobft_core::duobft::DuoReplica;
use duobft_core::messages::{serialize, ClientReply, ClientRequest, Command, ProtocolMessage, ResponseModel};
use duobft_core::minbft::MinbftReplica;
use duobft_core::replica::{Output, ReplicaConfig, Timer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest as _, Sha256};

use crate::adversary::{Adversary, Engine};
use crate::matrix::Placement;
use crate::scenario::{Protocol, Scenario, ScenarioError, TraceLevel};
use crate::trace::{Header, Model, Record, Trace};

#[derive(Debug, Clone)]
enum Event {
    Deliver {
        from: u32,
        to: u32,
        msg: Rc<ProtocolMessage>,
    },
    Resend {
        from: u32,
        to: u32,
        msg: Rc<ProtocolMessage>,
    },
    ReplicaTimer {
        node: u32,
        timer: Timer,
        generation: u64,
    },
    ClientTimer {
        client: u32,
        generation: u64,
    },
    ClientStart {
        client: u32,
    },
}

#[derive(Debug)]
struct Scheduled {
    at: u64,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    // Reversed: BinaryHeap is a max-heap.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

#[derive(Debug)]
struct Pending {
    command: Command,
    sent_at: u64,
    replies: BTreeMap<(Model, Digest), BTreeSet<ReplicaId>>,
    accepted: BTreeSet<Model>,
}

#[derive(Debug)]
struct Client {
    model: ResponseModel,
    awaits: Vec<Model>,
    next_seq: u64,
    pending: Option<Pending>,
    generation: u64,
}

/// Counters reported at the end of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunStats {
    pub deliveries: u64,
    pub protocol_deliveries: u64,
    pub drops: u64,
    pub end_time: u64,
    pub truncated: bool,
}

/// What was pending when a run hit its time limit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub time: u64,
    pub queued_events: usize,
    /// `(client, sequence)` of requests still awaiting a quorum of replies.
    pub outstanding: Vec<(u32, u64)>,
    /// Current view of each replica.
    pub views: Vec<u64>,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "stalled at t = {} ms with {} events queued",
            self.time, self.queued_events
        )?;
        writeln!(f, "replica views: {:?}", self.views)?;
        if self.outstanding.is_empty() {
            write!(f, "no client requests outstanding")
        } else {
            write!(f, "outstanding requests (client, seq): {:?}", self.outstanding)
        }
    }
}

pub struct Simulation {
    scenario: Scenario,
    n: usize,
    rng: ChaCha8Rng,
    now: u64,
    seq: u64,
    queue: BinaryHeap<Scheduled>,
    engines: Vec<Engine>,
    adversaries: Vec<Option<Adversary>>,
    timer_generations: Vec<BTreeMap<Timer, u64>>,
    clients: Vec<Client>,
    placement: Placement,
    trace: Trace,
    stats: RunStats,
}

impl Simulation {
    pub fn new(scenario: &Scenario, seed: u64) -> Result<Self, ScenarioError> {
        scenario.validate()?;
        let params = scenario.params()?;
        let n = scenario.n;
        let keys: Vec<_> = (0..n as u64).map(keygen).collect();
        let publics: Vec<_> = keys.iter().map(|k| k.public()).collect();
        let behaviors = scenario.behaviors()?;
        let mut engines = Vec::with_capacity(n);
        let mut adversaries = Vec::with_capacity(n);
        for (i, key) in keys.into_iter().enumerate() {
            let cfg = ReplicaConfig {
                id: ReplicaId(i as u32),
                params,
                keys: publics.clone(),
                batch_size: scenario.batch_size,
                base_timeout: scenario.base_timeout_ms,
                lanes: scenario.lanes(),
                comm: scenario.comm_pattern(),
                pacing: scenario.pacing_mode(),
            };
            let mut engine = match scenario.protocol {
                Protocol::FlexMinbft => Engine::Min(MinbftReplica::new(cfg, key)),
                Protocol::Duobft | Protocol::McDuobft => Engine::Duo(DuoReplica::new(cfg, key)),
            };
            let adversary = behaviors[i].map(|b| Adversary::new(b, ReplicaId(i as u32), n, &mut engine));
            engines.push(engine);
            adversaries.push(adversary);
        }
        let clients = scenario
            .client_models()?
            .into_iter()
            .map(|model| Client {
                model,
                awaits: match scenario.protocol {
                    Protocol::FlexMinbft => vec![Model::Hybrid],
                    _ => model.models().map(Model::from).collect(),
                },
                next_seq: 1,
                pending: None,
                generation: 0,
            })
            .collect::<Vec<_>>();
        let header = Header {
            seed,
            n,
            f: scenario.f,
            lanes: scenario.lanes(),
            faulty: scenario.faulty(),
            compromised: behaviors
                .iter()
                .enumerate()
                .filter(|(_, b)| b.is_some_and(|b| b.is_compromised()))
                .map(|(i, _)| i as u32)
                .collect(),
            gst_ms: scenario.network.gst_ms,
            submit_until_ms: scenario.stop.submit_until_ms,
            matrix: format!("{:?}", scenario.matrix).to_lowercase(),
        };
        let mut sim = Simulation {
            n,
            rng: ChaCha8Rng::seed_from_u64(seed),
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            engines,
            adversaries,
            timer_generations: vec![BTreeMap::new(); n],
            placement: Placement::new(scenario.matrix, n, clients.len()),
            clients,
            trace: Trace::new(header),
            stats: RunStats::default(),
            scenario: scenario.clone(),
        };
        for c in 0..sim.clients.len() as u32 {
            sim.schedule(0, Event::ClientStart { client: c });
        }
        Ok(sim)
    }

    fn full(&self) -> bool {
        self.scenario.trace == TraceLevel::Full
    }

    fn schedule(&mut self, at: u64, event: Event) {
        self.seq += 1;
        self.queue.push(Scheduled {
            at,
            seq: self.seq,
            event,
        });
    }

    fn record(&mut self, r: Record) {
        self.trace.records.push(r);
    }

    fn is_replica(&self, node: u32) -> bool {
        (node as usize) < self.n
    }

    fn crashed(&self, node: u32) -> bool {
        self.is_replica(node)
            && self.adversaries[node as usize]
                .as_ref()
                .is_some_and(|a| a.is_crashed(self.now))
    }

    fn base_delay(&self, from: u32, to: u32) -> u64 {
        let n = self.n as u32;
        match (from < n, to < n) {
            (true, true) => self.placement.replica_delay(from as usize, to as usize),
            (true, false) => self.placement.client_delay((to - n) as usize, from as usize),
            (false, true) => self.placement.client_delay((from - n) as usize, to as usize),
            (false, false) => 1,
        }
    }

    fn partitioned(&self, from: u32, to: u32) -> bool {
        if !self.is_replica(from) || !self.is_replica(to) {
            return false;
        }
        let group = |parts: &[Vec<u32>], r: u32| parts.iter().position(|g| g.contains(&r));
        self.scenario
            .network
            .partitions
            .iter()
            .any(|p| (p.from_ms..p.to_ms).contains(&self.now) && group(&p.groups, from) != group(&p.groups, to))
    }

    fn chance(&mut self, p: f64) -> bool {
        p > 0.0 && self.rng.random::<f64>() < p
    }

    fn delay(&mut self, from: u32, to: u32) -> u64 {
        let mut d = self.base_delay(from, to);
        let net = &self.scenario.network;
        let (jitter, extra, gst) = (net.jitter_ms, net.pre_gst_extra_ms, net.gst_ms);
        if jitter > 0 {
            d += self.rng.random_range(0..=jitter);
        }
        if self.now < gst && extra > 0 {
            d += self.rng.random_range(0..=extra);
        }
        d
    }

    fn send(&mut self, from: u32, to: u32, msg: Rc<ProtocolMessage>) {
        if from == to {
            let d = self.base_delay(from, to);
            self.schedule(self.now + d, Event::Deliver { from, to, msg });
            return;
        }
        let faulty_drop =
            self.is_replica(from) && self.adversaries[from as usize].as_ref().map_or(0.0, |a| a.drop_prob()) > 0.0;
        if faulty_drop {
            let p = self.adversaries[from as usize].as_ref().map_or(0.0, |a| a.drop_prob());
            if self.chance(p) {
                self.drop_record(from, to, &msg);
                return;
            }
        }
        let drop_prob = self.scenario.network.drop_prob;
        if self.partitioned(from, to) || self.chance(drop_prob) {
            self.drop_record(from, to, &msg);
            let at = self.now + self.scenario.network.retransmit_ms;
            self.schedule(at, Event::Resend { from, to, msg });
            return;
        }
        let d = self.delay(from, to);
        let dup = self.scenario.network.dup_prob;
        if self.chance(dup) {
            let d2 = self.delay(from, to);
            self.schedule(
                self.now + d2,
                Event::Deliver {
                    from,
                    to,
                    msg: msg.clone(),
                },
            );
        }
        self.schedule(self.now + d, Event::Deliver { from, to, msg });
    }

    fn drop_record(&mut self, from: u32, to: u32, msg: &ProtocolMessage) {
        self.stats.drops += 1;
        if self.full() {
            let t = self.now;
            self.record(Record::Drop {
                t,
                from,
                to,
                msg: msg.kind().to_string(),
            });
        }
    }

    fn apply(&mut self, node: u32, outputs: Vec<Output>) {
        let outputs = match self.adversaries[node as usize].as_mut() {
            Some(adv) => adv.outbound(&mut self.engines[node as usize], self.now, outputs),
            None => outputs,
        };
        let t = self.now;
        for o in outputs {
            match o {
                Output::Send { to, msg } => self.send(node, to.0, Rc::new(msg)),
                Output::Broadcast(msg) => {
                    let msg = Rc::new(msg);
                    for to in 0..self.n as u32 {
                        self.send(node, to, msg.clone());
                    }
                }
                Output::Reply { client, reply } => {
                    if (client.0 as usize) < self.clients.len() {
                        let to = self.n as u32 + client.0;
                        self.send(node, to, Rc::new(ProtocolMessage::ClientReply(reply)));
                    }
                }
                Output::SetTimer { timer, after } => {
                    let g = self.timer_generations[node as usize].entry(timer).or_insert(0);
                    *g += 1;
                    let generation = *g;
                    self.schedule(
                        t + after,
                        Event::ReplicaTimer {
                            node,
                            timer,
                            generation,
                        },
                    );
                }
                Output::CancelTimer(timer) => {
                    *self.timer_generations[node as usize].entry(timer).or_insert(0) += 1;
                }
                Output::Committed {
                    model,
                    lane,
                    index,
                    digest,
                } => self.record(Record::Committed {
                    t,
                    node,
                    model: model.into(),
                    lane,
                    index,
                    digest: digest.to_string(),
                }),
                Output::Executed { commands, .. } if commands.is_empty() => {}
                Output::Executed { model, commands } => self.record(Record::Executed {
                    t,
                    node,
                    model: model.into(),
                    commands: commands.iter().map(|c| (c.client.0, c.sequence)).collect(),
                }),
                Output::EnterViewChange { view, requests } => self.record(Record::EnterVc {
                    t,
                    node,
                    view,
                    requests,
                }),
                Output::ViewInstalled { view } => self.record(Record::ViewInstall { t, node, view }),
                Output::Evidence(e) => self.record(Record::Evidence {
                    t,
                    node,
                    detail: format!("{e:?}"),
                }),
            }
        }
    }

    // ---- clients ----

    fn client_issue(&mut self, c: u32) {
        let limit = self.scenario.requests_per_client.unwrap_or(u64::MAX);
        let client = &mut self.clients[c as usize];
        if self.now >= self.scenario.stop.submit_until_ms || client.next_seq > limit {
            return;
        }
        let seq = client.next_seq;
        client.next_seq += 1;
        let mut payload = vec![0u8; self.scenario.payload_size];
        for (b, s) in payload.iter_mut().zip(seq.to_le_bytes()) {
            *b = s;
        }
        let command = Command {
            client: duobft_core::messages::ClientId(c),
            sequence: seq,
            payload,
            response_model: client.model,
        };
        client.pending = Some(Pending {
            command: command.clone(),
            sent_at: self.now,
            replies: BTreeMap::new(),
            accepted: BTreeSet::new(),
        });
        let awaits = client.awaits.clone();
        self.record(Record::Request {
            t: self.now,
            client: c,
            seq,
            awaits,
        });
        self.client_broadcast(c, command);
    }

    fn client_broadcast(&mut self, c: u32, command: Command) {
        let from = self.n as u32 + c;
        let msg = Rc::new(ProtocolMessage::ClientRequest(ClientRequest { command }));
        for to in 0..self.n as u32 {
            self.send(from, to, msg.clone());
        }
        let client = &mut self.clients[c as usize];
        client.generation += 1;
        let generation = client.generation;
        let at = self.now + self.scenario.client_timeout_ms;
        self.schedule(at, Event::ClientTimer { client: c, generation });
    }

    fn client_reply(&mut self, c: u32, reply: ClientReply) {
        let quorum = self.scenario.f + 1;
        let now = self.now;
        let client = &mut self.clients[c as usize];
        let Some(p) = client.pending.as_mut() else {
            return;
        };
        let model = Model::from(reply.model);
        if reply.command != p.command.id() || !client.awaits.contains(&model) || p.accepted.contains(&model) {
            return;
        }
        let voters = p.replies.entry((model, reply.result)).or_default();
        voters.insert(reply.replica);
        if voters.len() < quorum {
            return;
        }
        p.accepted.insert(model);
        let (seq, latency) = (p.command.sequence, now - p.sent_at);
        let done = client.awaits.iter().all(|m| p.accepted.contains(m));
        self.record(Record::Accept {
            t: now,
            client: c,
            seq,
            model,
            latency,
        });
        if done {
            let client = &mut self.clients[c as usize];
            client.pending = None;
            client.generation += 1;
            self.client_issue(c);
        }
    }

    // ---- main loop ----

    fn is_live(&self, ev: &Event) -> bool {
        match ev {
            Event::ReplicaTimer {
                node,
                timer,
                generation,
            } => self.timer_generations[*node as usize].get(timer) == Some(generation),
            Event::ClientTimer { client, generation } => self.clients[*client as usize].generation == *generation,
            _ => true,
        }
    }

    fn handle(&mut self, ev: Event) {
        match ev {
            Event::ClientStart { client } => self.client_issue(client),
            Event::ClientTimer { client, .. } => {
                if let Some(p) = &self.clients[client as usize].pending {
                    let command = p.command.clone();
                    self.client_broadcast(client, command);
                }
            }
            Event::Resend { from, to, msg } => {
                if !self.crashed(from) {
                    self.send(from, to, msg);
                }
            }
            Event::ReplicaTimer { node, timer, .. } => {
                if self.crashed(node) {
                    return;
                }
                if self.full() {
                    let t = self.now;
                    self.record(Record::Timer {
                        t,
                        node,
                        timer: format!("{timer:?}"),
                    });
                }
                let out = self.engines[node as usize].on_timer(timer);
                self.apply(node, out);
            }
            Event::Deliver { from, to, msg } => {
                if self.crashed(to) {
                    return;
                }
                self.stats.deliveries += 1;
                if self.is_replica(from) && self.is_replica(to) {
                    self.stats.protocol_deliveries += 1;
                }
                if self.full() {
                    let digest = hex::encode(Sha256::digest(serialize(&msg)));
                    let t = self.now;
                    self.record(Record::Deliver {
                        t,
                        from,
                        to,
                        msg: msg.kind().to_string(),
                        digest,
                    });
                }
                let msg = Rc::try_unwrap(msg).unwrap_or_else(|rc| (*rc).clone());
                if self.is_replica(to) {
                    let out = self.engines[to as usize].on_message(msg);
                    self.apply(to, out);
                } else if let ProtocolMessage::ClientReply(reply) = msg {
                    self.client_reply(to - self.n as u32, reply);
                }
            }
        }
    }

    /// Processes every event due at or before `until`. Returns false once
    /// the queue is empty.
    pub fn run_until(&mut self, until: u64) -> bool {
        loop {
            match self.queue.peek() {
                None => return false,
                Some(s) if s.at > until => return true,
                Some(_) => {}
            }
            let s = self.queue.pop().expect("peeked");
            if self.is_live(&s.event) {
                self.now = s.at;
                self.handle(s.event);
            }
        }
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    /// Runs to quiescence or the time limit and returns the trace.
    pub fn run(self) -> (Trace, RunStats) {
        let (trace, stats, _) = self.run_diagnosed();
        (trace, stats)
    }

    /// Like [`Simulation::run`], also describing what was still pending if
    /// the run hit its time limit.
    pub fn run_diagnosed(mut self) -> (Trace, RunStats, Option<Diagnostic>) {
        let max = self.scenario.stop.max_time_ms;
        self.stats.truncated = self.run_until(max);
        let diagnostic = self.stats.truncated.then(|| self.diagnostic());
        self.stats.end_time = self.now;
        let stats = self.stats;
        self.record(Record::End {
            t: stats.end_time,
            deliveries: stats.deliveries,
            protocol_deliveries: stats.protocol_deliveries,
            drops: stats.drops,
            truncated: stats.truncated,
        });
        (self.trace, stats, diagnostic)
    }

    fn diagnostic(&self) -> Diagnostic {
        Diagnostic {
            time: self.now,
            queued_events: self.queue.len(),
            outstanding: self
                .clients
                .iter()
                .enumerate()
                .filter_map(|(c, client)| client.pending.as_ref().map(|p| (c as u32, p.command.sequence)))
                .collect(),
            views: self.engines.iter().map(Engine::view).collect(),
        }
    }

    /// Replica state, for tests.
    pub fn engine(&self, r: usize) -> &Engine {
        &self.engines[r]
    }
}

/// Convenience: build and run one seed.
pub fn run(scenario: &Scenario, seed: u64) -> Result<Trace, ScenarioError> {
    Ok(Simulation::new(scenario, seed)?.run().0)
}
