//! The DuoBFT replica.
//!
//! One chain of blocks per lane (a single lane is plain DuoBFT). Every block
//! collects votes that yield a hybrid certificate (`f+1`) and a BFT
//! certificate (`2f+1`). A block is hybrid-committed once it holds a hybrid
//! certificate of the current view and its predecessors are committed; it is
//! BFT-committed once it and its child hold BFT certificates from the same
//! view. Both ledgers execute committed blocks round by round across lanes.
//!
//! Ordering rules:
//! - proposals of a view are processed in the primary's counter order,
//!   starting right after the counter of its NewView (or at 1 in view 0);
//! - a replica votes at most once per height per view and only for blocks
//!   extending its own chain, so its votes in a view form one chain;
//! - a proposal whose parent was proposed in the same view carries the
//!   parent's pacing certificate, so every voter holds it.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;
use core::hash::{Hash, Hasher};

use crate::crypto::{Digest, KeyPair, ReplicaId};
use crate::messages::{
    vote_context, Adopted, Block, CertBroadcast, ChainEntry, ClientReply, ClientRequest, Command, CommandId,
    FaultModel, Flavor, NewView, Propose, ProtocolMessage, QuorumCertificate, ReqViewChange, ViewChange, ViewChangeLog,
    Vote,
};
use crate::multichain::{Dispatcher, RoundExecutor};
use crate::quorum::{try_assemble_cached, validate_certificate_cached, Ballot};
use crate::replica::{
    CommPattern, Evidence, Ledger, Output, Pacing, Replica, ReplicaConfig, RequestQueue, Status, Timer, ViewSync,
};
use crate::usig::{UsigCertificate, UsigInstance, VerifyCache};

const HYBRID: usize = 0;
const BFT: usize = 1;

fn model_index(m: FaultModel) -> usize {
    match m {
        FaultModel::Hybrid => HYBRID,
        FaultModel::Bft => BFT,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
struct Lane {
    /// `chain[h - 1]` is the block at height `h`.
    chain: Vec<ChainEntry>,
    digests: Vec<Digest>,
    /// Committed height per model.
    frontier: [u64; 2],
    /// Current-view ballots by `(height, digest)`.
    votes: BTreeMap<(u64, Digest), BTreeMap<ReplicaId, UsigCertificate>>,
    /// Certificates that arrived before their block.
    early_certs: BTreeMap<(u64, Digest), Vec<QuorumCertificate>>,
    /// Height of the primary's latest proposal in this view.
    proposed_height: u64,
}

impl Lane {
    fn height(&self) -> u64 {
        self.chain.len() as u64
    }

    fn head_digest(&self) -> Option<Digest> {
        self.digests.last().copied()
    }

    fn position(&self, height: u64, digest: &Digest) -> Option<usize> {
        let i = height.checked_sub(1)? as usize;
        (self.digests.get(i) == Some(digest)).then_some(i)
    }

    fn push(&mut self, entry: ChainEntry) {
        self.digests.push(entry.block.digest());
        self.chain.push(entry);
    }

    fn reset_chain(&mut self, chain: Vec<ChainEntry>) {
        self.digests = chain.iter().map(|e| e.block.digest()).collect();
        self.chain = chain;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct ModelState {
    ledger: Ledger,
    rounds: RoundExecutor,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DuoReplica {
    cfg: ReplicaConfig,
    key: KeyPair,
    usig: UsigInstance,
    cache: VerifyCache,
    sync: ViewSync,
    lanes: Vec<Lane>,
    models: [ModelState; 2],
    /// Next primary counter to process in the current view.
    expected_counter: u64,
    /// Current-view proposals waiting for earlier counters.
    held: BTreeMap<u64, Propose>,
    /// Primary attestations seen in the current view, by counter.
    primary_counters: BTreeMap<u64, Digest>,
    /// Voter attestations seen, by `(voter, counter)`.
    voter_counters: BTreeMap<(ReplicaId, u64), Digest>,
    /// Current-view votes by `(voter, lane, height)`.
    voter_heights: BTreeMap<(ReplicaId, u32, u64), Digest>,
    /// Messages for views not yet installed.
    future: Vec<ProtocolMessage>,
    view_changes: BTreeMap<u64, BTreeMap<ReplicaId, ViewChange>>,
    new_view_sent: BTreeSet<u64>,
    waiting: RequestQueue,
    proposed: BTreeSet<CommandId>,
    dispatcher: Dispatcher,
    progress_armed: bool,
}

impl DuoReplica {
    pub fn new(cfg: ReplicaConfig, key: KeyPair) -> Self {
        assert!(cfg.params.commit_bft.is_some(), "DuoBFT needs a BFT threshold");
        let lanes = cfg.lanes.max(1);
        let usig = UsigInstance::new(cfg.id, key.clone());
        let model = || ModelState {
            ledger: Ledger::new(),
            rounds: RoundExecutor::new(lanes),
        };
        DuoReplica {
            usig,
            key,
            cache: VerifyCache::new(),
            sync: ViewSync::new(),
            lanes: (0..lanes).map(|_| Lane::default()).collect(),
            models: [model(), model()],
            expected_counter: 1,
            held: BTreeMap::new(),
            primary_counters: BTreeMap::new(),
            voter_counters: BTreeMap::new(),
            voter_heights: BTreeMap::new(),
            future: Vec::new(),
            view_changes: BTreeMap::new(),
            new_view_sent: BTreeSet::new(),
            waiting: RequestQueue::new(),
            proposed: BTreeSet::new(),
            dispatcher: Dispatcher::new(lanes),
            progress_armed: false,
            cfg,
        }
    }

    pub fn config(&self) -> &ReplicaConfig {
        &self.cfg
    }

    /// The trusted counter; exposed so fault injection can compromise it.
    pub fn usig_mut(&mut self) -> &mut UsigInstance {
        &mut self.usig
    }

    pub fn usig(&self) -> &UsigInstance {
        &self.usig
    }

    pub fn chain(&self, lane: u32) -> &[ChainEntry] {
        &self.lanes[lane as usize].chain
    }

    pub fn frontier(&self, lane: u32, model: FaultModel) -> u64 {
        self.lanes[lane as usize].frontier[model_index(model)]
    }

    pub fn ledger(&self, model: FaultModel) -> &Ledger {
        &self.models[model_index(model)].ledger
    }

    /// Hashes the replica state with every certificate reduced to what it
    /// certifies. A valid certificate is acted on the same way whichever
    /// voters signed it, so states that hash equal here make the same
    /// decisions from then on. Used to deduplicate states in exhaustive
    /// exploration.
    pub fn hash_modulo_voters<H: Hasher>(&self, h: &mut H) {
        let cert = |q: Option<&QuorumCertificate>, h: &mut H| {
            q.map(|q| (q.view, q.instance, q.height, q.block_digest, q.flavor))
                .hash(h)
        };
        self.usig.hash(h);
        self.sync.hash(h);
        for lane in &self.lanes {
            for e in &lane.chain {
                (&e.block, e.view, &e.proposal_ui).hash(h);
                cert(e.hybrid.as_ref(), h);
                cert(e.bft.as_ref(), h);
            }
            (&lane.frontier, &lane.votes, lane.proposed_height).hash(h);
            for (key, certs) in &lane.early_certs {
                key.hash(h);
                for q in certs {
                    cert(Some(q), h);
                }
            }
        }
        self.models.hash(h);
        self.expected_counter.hash(h);
        for (counter, p) in &self.held {
            (counter, p.view, p.sender, &p.block, &p.ui).hash(h);
            cert(p.justify.as_ref(), h);
        }
        (&self.primary_counters, &self.voter_counters, &self.voter_heights).hash(h);
        (&self.future, &self.view_changes, &self.new_view_sent).hash(h);
        (&self.waiting, &self.proposed, &self.dispatcher, self.progress_armed).hash(h);
    }

    fn primary(&self) -> ReplicaId {
        self.cfg.primary_of(self.sync.view)
    }

    fn is_primary(&self) -> bool {
        self.primary() == self.cfg.id && self.sync.status == Status::Normal
    }

    fn hybrid_threshold(&self) -> usize {
        self.cfg.params.commit_hybrid
    }

    fn bft_threshold(&self) -> usize {
        self.cfg.params.commit_bft.unwrap_or(usize::MAX)
    }

    /// Defers `msg` if it belongs to a view this replica has not installed.
    /// Returns true if the message is for the installed view.
    fn current(&mut self, view: u64, msg: &ProtocolMessage) -> bool {
        if view < self.sync.view {
            return false;
        }
        if view > self.sync.view || self.sync.status != Status::Normal {
            self.future.push(msg.clone());
            return false;
        }
        true
    }

    fn suspect(&mut self, out: &mut Vec<Output>) {
        if let Some(req) = self.sync.suspect(self.cfg.id, &self.key) {
            out.push(Output::Broadcast(ProtocolMessage::ReqViewChange(req)));
        }
    }

    fn evidence(&mut self, ev: Evidence, suspect: bool, out: &mut Vec<Output>) {
        out.push(Output::Evidence(ev));
        if suspect {
            self.suspect(out);
        }
    }

    // ---- client requests ----

    fn on_request(&mut self, cmd: Command, out: &mut Vec<Output>) {
        let id = cmd.id();
        if self.models[BFT].ledger.is_executed(id) {
            for model in cmd.response_model.models() {
                if let Some(result) = self.models[model_index(model)].ledger.cached_reply(id) {
                    out.push(Output::Reply {
                        client: cmd.client,
                        reply: ClientReply {
                            replica: self.cfg.id,
                            command: id,
                            model,
                            result,
                        },
                    });
                }
            }
            return;
        }
        if self.waiting.contains_key(&id) {
            return;
        }
        self.dispatcher.dispatch(id);
        self.waiting.insert(id, cmd.clone());
        if self.sync.status == Status::Normal && self.primary() != self.cfg.id {
            out.push(Output::Send {
                to: self.primary(),
                msg: ProtocolMessage::ClientRequest(ClientRequest { command: cmd }),
            });
        }
        self.arm_progress(out);
    }

    fn arm_progress(&mut self, out: &mut Vec<Output>) {
        if !self.progress_armed && !self.waiting.is_empty() && self.primary() != self.cfg.id {
            self.progress_armed = true;
            out.push(Output::SetTimer {
                timer: Timer::Progress,
                after: self.sync.timeout(self.cfg.base_timeout),
            });
        }
    }

    fn rearm_progress(&mut self, out: &mut Vec<Output>) {
        if self.progress_armed {
            self.progress_armed = false;
            out.push(Output::CancelTimer(Timer::Progress));
        }
        self.arm_progress(out);
    }

    // ---- normal case ----

    fn on_propose(&mut self, p: Propose, out: &mut Vec<Output>) {
        if !self.current(p.view, &ProtocolMessage::Propose(p.clone())) {
            return;
        }
        let primary = self.primary();
        if p.sender != primary || p.block.instance >= self.cfg.lanes.max(1) {
            return;
        }
        let ctx = vote_context(p.view, p.block.instance, p.block.height, &p.block.digest());
        let valid = p.ui.replica == primary && self.cfg.key(primary).is_some_and(|k| self.cache.verify(k, &ctx, &p.ui));
        if !valid {
            let ev = Evidence::InvalidAttestation {
                replica: primary,
                view: p.view,
            };
            self.evidence(ev, true, out);
            return;
        }
        let counter = p.ui.counter;
        match self.primary_counters.get(&counter) {
            Some(seen) if *seen == ctx => {
                if counter >= self.expected_counter && !self.held.contains_key(&counter) {
                    // Known only from a vote so far.
                } else {
                    return;
                }
            }
            Some(_) => {
                self.evidence(
                    Evidence::Equivocation {
                        replica: primary,
                        counter,
                    },
                    true,
                    out,
                );
                return;
            }
            None => {
                self.primary_counters.insert(counter, ctx);
            }
        }
        if counter < self.expected_counter {
            return;
        }
        self.held.insert(counter, p);
        while let Some(next) = self.held.remove(&self.expected_counter) {
            self.expected_counter += 1;
            self.accept_proposal(next, out);
        }
    }

    fn accept_proposal(&mut self, p: Propose, out: &mut Vec<Output>) {
        let view = self.sync.view;
        let lane_idx = p.block.instance as usize;
        let digest = p.block.digest();
        let height = p.block.height;
        let extends = {
            let lane = &self.lanes[lane_idx];
            p.block.is_well_formed(self.cfg.batch_size)
                && height == lane.height() + 1
                && p.block.parent == lane.head_digest()
        };
        if !extends {
            let ev = Evidence::NonExtending {
                replica: p.sender,
                view,
                height,
            };
            self.evidence(ev, true, out);
            return;
        }
        let parent_in_view = self.lanes[lane_idx].chain.last().is_some_and(|e| e.view == view);
        if parent_in_view {
            let ok = p.justify.as_ref().is_some_and(|q| {
                let flavor_ok = self.cfg.pacing == Pacing::HybridQc || q.flavor == Flavor::Bft;
                flavor_ok
                    && q.view == view
                    && q.instance == p.block.instance
                    && q.height == height - 1
                    && Some(q.block_digest) == p.block.parent
                    && validate_certificate_cached(q, &self.cfg.params, &self.cfg.keys, &mut self.cache)
            });
            if !ok {
                let ev = Evidence::NonExtending {
                    replica: p.sender,
                    view,
                    height,
                };
                self.evidence(ev, true, out);
                return;
            }
            let q = p.justify.clone().expect("checked above");
            self.store_cert(lane_idx, height as usize - 2, q);
        }
        self.lanes[lane_idx].push(ChainEntry {
            block: p.block.clone(),
            view,
            proposal_ui: p.ui,
            hybrid: None,
            bft: None,
        });
        self.lanes[lane_idx]
            .votes
            .entry((height, digest))
            .or_default()
            .insert(p.sender, p.ui);
        for cmd in &p.block.commands {
            self.proposed.insert(cmd.id());
        }
        if p.sender != self.cfg.id {
            let ctx = vote_context(view, p.block.instance, height, &digest);
            let vote = Vote {
                view,
                sender: self.cfg.id,
                instance: p.block.instance,
                height,
                block_digest: digest,
                proposer_ui: p.ui,
                voter_ui: self.usig.create_ui_for_digest(ctx),
            };
            self.voter_heights.insert((self.cfg.id, vote.instance, height), digest);
            let msg = ProtocolMessage::Vote(vote);
            match self.cfg.comm {
                CommPattern::Quadratic => out.push(Output::Broadcast(msg)),
                CommPattern::Linear => out.push(Output::Send { to: p.sender, msg }),
            }
        }
        if let Some(certs) = self.lanes[lane_idx].early_certs.remove(&(height, digest)) {
            for q in certs {
                self.store_cert(lane_idx, height as usize - 1, q);
            }
        }
        self.try_certify(lane_idx, height, digest, out);
        self.advance(lane_idx, out);
    }

    fn on_vote(&mut self, v: Vote, out: &mut Vec<Output>) {
        if !self.current(v.view, &ProtocolMessage::Vote(v.clone())) {
            return;
        }
        if self.cfg.comm == CommPattern::Linear && !self.is_primary() {
            return;
        }
        let primary = self.primary();
        if v.instance >= self.cfg.lanes.max(1)
            || v.sender.index() >= self.cfg.params.n
            || v.voter_ui.replica != v.sender
            || v.proposer_ui.replica != primary
        {
            return;
        }
        let ctx = v.context();
        let ok = {
            let pk = self.cfg.keys[primary.index()];
            let vk = self.cfg.keys[v.sender.index()];
            self.cache.verify(&pk, &ctx, &v.proposer_ui) && self.cache.verify(&vk, &ctx, &v.voter_ui)
        };
        if !ok {
            return;
        }
        match self.primary_counters.get(&v.proposer_ui.counter) {
            Some(seen) if *seen != ctx => {
                let ev = Evidence::Equivocation {
                    replica: primary,
                    counter: v.proposer_ui.counter,
                };
                self.evidence(ev, true, out);
            }
            Some(_) => {}
            None => {
                self.primary_counters.insert(v.proposer_ui.counter, ctx);
            }
        }
        if let Some(seen) = self.voter_counters.get(&(v.sender, v.voter_ui.counter)) {
            if *seen != ctx {
                let ev = Evidence::Equivocation {
                    replica: v.sender,
                    counter: v.voter_ui.counter,
                };
                self.evidence(ev, false, out);
            }
            return;
        }
        self.voter_counters.insert((v.sender, v.voter_ui.counter), ctx);
        let key = (v.sender, v.instance, v.height);
        if let Some(d) = self.voter_heights.get(&key) {
            if *d != v.block_digest {
                let ev = Evidence::ConflictingVote {
                    replica: v.sender,
                    view: v.view,
                    height: v.height,
                };
                self.evidence(ev, false, out);
                return;
            }
        } else {
            self.voter_heights.insert(key, v.block_digest);
        }
        let lane_idx = v.instance as usize;
        self.lanes[lane_idx]
            .votes
            .entry((v.height, v.block_digest))
            .or_default()
            .insert(v.sender, v.voter_ui);
        if self.lanes[lane_idx].position(v.height, &v.block_digest).is_some() {
            self.try_certify(lane_idx, v.height, v.block_digest, out);
            self.advance(lane_idx, out);
        }
    }

    fn on_cert(&mut self, c: CertBroadcast, out: &mut Vec<Output>) {
        if !self.current(c.view, &ProtocolMessage::CertBroadcast(c.clone())) {
            return;
        }
        let q = c.certificate;
        if c.sender != self.primary() || q.view != self.sync.view || q.instance >= self.cfg.lanes.max(1) {
            return;
        }
        if !validate_certificate_cached(&q, &self.cfg.params, &self.cfg.keys, &mut self.cache) {
            return;
        }
        let lane_idx = q.instance as usize;
        match self.lanes[lane_idx].position(q.height, &q.block_digest) {
            Some(i) => {
                self.store_cert(lane_idx, i, q);
                self.advance(lane_idx, out);
            }
            None => {
                let lane = &mut self.lanes[lane_idx];
                if q.height > lane.height() {
                    lane.early_certs.entry((q.height, q.block_digest)).or_default().push(q);
                }
            }
        }
    }

    /// Records `q` on the entry at index `i`; a BFT certificate also yields
    /// the hybrid one. Returns true if anything new was stored.
    fn store_cert(&mut self, lane_idx: usize, i: usize, q: QuorumCertificate) -> bool {
        let f1 = self.hybrid_threshold();
        let entry = &mut self.lanes[lane_idx].chain[i];
        let mut changed = false;
        if q.flavor == Flavor::Bft && entry.bft.is_none() {
            if entry.hybrid.is_none() {
                let mut h = q.clone();
                h.flavor = Flavor::Hybrid;
                h.votes.truncate(f1);
                entry.hybrid = Some(h);
            }
            entry.bft = Some(q);
            changed = true;
        } else if q.flavor == Flavor::Hybrid && entry.hybrid.is_none() {
            entry.hybrid = Some(q);
            changed = true;
        }
        changed
    }

    fn try_certify(&mut self, lane_idx: usize, height: u64, digest: Digest, out: &mut Vec<Output>) {
        let view = self.sync.view;
        let Some(i) = self.lanes[lane_idx].position(height, &digest) else {
            return;
        };
        if self.lanes[lane_idx].chain[i].view != view {
            return;
        }
        if self.cfg.comm == CommPattern::Linear && !self.is_primary() {
            return;
        }
        let ballots: Vec<Ballot> = match self.lanes[lane_idx].votes.get(&(height, digest)) {
            Some(set) => set
                .iter()
                .map(|(r, ui)| Ballot {
                    view,
                    instance: lane_idx as u32,
                    height,
                    block_digest: digest,
                    replica: *r,
                    ui: *ui,
                })
                .collect(),
            None => return,
        };
        let linear_primary = self.cfg.comm == CommPattern::Linear;
        for (flavor, threshold) in [
            (Flavor::Bft, self.bft_threshold()),
            (Flavor::Hybrid, self.hybrid_threshold()),
        ] {
            let entry = &self.lanes[lane_idx].chain[i];
            let have = match flavor {
                Flavor::Hybrid => entry.hybrid.is_some(),
                Flavor::Bft => entry.bft.is_some(),
            };
            if have || ballots.len() < threshold {
                continue;
            }
            let cert = try_assemble_cached(&ballots, flavor, &self.cfg.params, &self.cfg.keys, &mut self.cache)
                .ok()
                .flatten();
            if let Some(q) = cert {
                if linear_primary {
                    out.push(Output::Broadcast(ProtocolMessage::CertBroadcast(CertBroadcast {
                        view,
                        sender: self.cfg.id,
                        certificate: q.clone(),
                    })));
                }
                self.store_cert(lane_idx, i, q);
            }
        }
    }

    // ---- commit rules ----

    fn advance(&mut self, lane_idx: usize, out: &mut Vec<Output>) {
        if self.sync.status != Status::Normal {
            return;
        }
        let view = self.sync.view;
        let lane = &self.lanes[lane_idx];
        let mut target = None;
        let mut h = lane.frontier[HYBRID] + 1;
        while h <= lane.height() {
            let e = &lane.chain[h as usize - 1];
            if e.view == view && e.hybrid.as_ref().is_some_and(|q| q.view == view) {
                target = Some(h);
            } else if e.view == view {
                break;
            }
            h += 1;
        }
        if let Some(t) = target {
            self.commit_through(lane_idx, FaultModel::Hybrid, t, out);
        }
        let lane = &self.lanes[lane_idx];
        let mut best = None;
        let start = lane.frontier[BFT] + 1;
        for h in start..lane.height() {
            let a = &lane.chain[h as usize - 1];
            let b = &lane.chain[h as usize];
            if let (Some(qa), Some(qb)) = (&a.bft, &b.bft) {
                if qa.view == qb.view {
                    best = Some(h);
                }
            }
        }
        if let Some(t) = best {
            if t > self.lanes[lane_idx].frontier[HYBRID] {
                self.commit_through(lane_idx, FaultModel::Hybrid, t, out);
            }
            self.commit_through(lane_idx, FaultModel::Bft, t, out);
        }
    }

    fn commit_through(&mut self, lane_idx: usize, model: FaultModel, target: u64, out: &mut Vec<Output>) {
        let m = model_index(model);
        let from = self.lanes[lane_idx].frontier[m] + 1;
        let target = target.min(self.lanes[lane_idx].height());
        if target < from {
            return;
        }
        for h in from..=target {
            let lane = &self.lanes[lane_idx];
            let i = h as usize - 1;
            out.push(Output::Committed {
                model,
                lane: lane_idx as u32,
                index: h,
                digest: lane.digests[i],
            });
            let block = lane.chain[i].block.clone();
            self.models[m].rounds.push(lane_idx as u32, block);
        }
        self.lanes[lane_idx].frontier[m] = target;
        self.execute_rounds(model, out);
    }

    fn execute_rounds(&mut self, model: FaultModel, out: &mut Vec<Output>) {
        let m = model_index(model);
        let ready = self.models[m].rounds.drain_ready();
        if ready.is_empty() {
            return;
        }
        let mut progressed = false;
        for (_, blocks) in ready {
            let mut executed = Vec::new();
            for block in blocks {
                for cmd in &block.commands {
                    let id = cmd.id();
                    if let Some(result) = self.models[m].ledger.execute(cmd) {
                        executed.push(id);
                        if cmd.response_model.wants(model) {
                            out.push(Output::Reply {
                                client: cmd.client,
                                reply: ClientReply {
                                    replica: self.cfg.id,
                                    command: id,
                                    model,
                                    result,
                                },
                            });
                        }
                    }
                    if model == FaultModel::Bft {
                        progressed |= self.waiting.remove(&id).is_some();
                        self.proposed.remove(&id);
                    }
                }
            }
            out.push(Output::Executed {
                model,
                commands: executed,
            });
        }
        if progressed {
            self.sync.progressed();
            self.rearm_progress(out);
        }
    }

    // ---- proposing ----

    fn maybe_propose(&mut self, out: &mut Vec<Output>) {
        if !self.is_primary() {
            return;
        }
        let view = self.sync.view;
        // Rounds execute only once every lane has BFT-committed them, so
        // pace until all lanes pass the highest round holding commands that
        // has yet to execute.
        let executed = self.lanes.iter().map(|l| l.frontier[BFT]).min().unwrap_or(0);
        let target = self
            .lanes
            .iter()
            .filter_map(|l| {
                (executed as usize..l.chain.len())
                    .rev()
                    .find(|i| !l.chain[*i].block.commands.is_empty())
                    .map(|i| i as u64 + 1)
            })
            .max()
            .unwrap_or(0);
        for lane_idx in 0..self.lanes.len() {
            let lane = &self.lanes[lane_idx];
            if lane.proposed_height > lane.height() {
                continue;
            }
            let justify = match lane.chain.last() {
                None => None,
                Some(head) if head.view < view => None,
                Some(head) => {
                    let q = match self.cfg.pacing {
                        Pacing::BftQc => head.bft.clone(),
                        Pacing::HybridQc => head.bft.clone().or_else(|| head.hybrid.clone()),
                    };
                    match q {
                        Some(q) => Some(q),
                        None => continue,
                    }
                }
            };
            let batch: Vec<Command> = self
                .waiting
                .iter()
                .filter(|(id, _)| {
                    !self.proposed.contains(id)
                        && !self.models[BFT].ledger.is_executed(**id)
                        && self.dispatcher.lane_of(id) == Some(lane_idx as u32)
                })
                .take(self.cfg.batch_size)
                .map(|(_, c)| c.clone())
                .collect();
            let lane = &self.lanes[lane_idx];
            if batch.is_empty() && lane.frontier[BFT] >= target {
                continue;
            }
            let block = Block {
                height: lane.height() + 1,
                parent: lane.head_digest(),
                commands: batch,
                instance: lane_idx as u32,
            };
            let ctx = vote_context(view, block.instance, block.height, &block.digest());
            let ui = self.usig.create_ui_for_digest(ctx);
            for c in &block.commands {
                self.proposed.insert(c.id());
            }
            self.lanes[lane_idx].proposed_height = block.height;
            out.push(Output::Broadcast(ProtocolMessage::Propose(Propose {
                view,
                sender: self.cfg.id,
                block,
                justify,
                ui,
            })));
        }
    }

    // ---- view change ----

    fn on_req_view_change(&mut self, req: ReqViewChange, out: &mut Vec<Output>) {
        let threshold = self.cfg.params.req_view_change;
        if let Some((target, count)) = self.sync.on_request(&req, &self.cfg.keys, threshold) {
            self.start_view_change(target, count, out);
        }
    }

    fn start_view_change(&mut self, view: u64, requests: usize, out: &mut Vec<Output>) {
        let timeout = self.sync.enter(view, self.cfg.base_timeout);
        out.push(Output::EnterViewChange { view, requests });
        self.clear_view_state();
        if self.progress_armed {
            self.progress_armed = false;
            out.push(Output::CancelTimer(Timer::Progress));
        }
        let log = ViewChangeLog::Chains(self.lanes.iter().map(|l| l.chain.clone()).collect());
        let ui = self
            .usig
            .create_ui_for_digest(ViewChange::attested_digest(self.cfg.id, view, &log));
        out.push(Output::Broadcast(ProtocolMessage::ViewChange(ViewChange {
            sender: self.cfg.id,
            new_view: view,
            log,
            ui,
        })));
        out.push(Output::SetTimer {
            timer: Timer::NewView(view),
            after: timeout,
        });
    }

    fn clear_view_state(&mut self) {
        self.held.clear();
        self.primary_counters.clear();
        self.voter_heights.clear();
        for lane in &mut self.lanes {
            lane.votes.clear();
            lane.early_certs.clear();
        }
        let view = self.sync.view;
        self.future.retain(|m| message_view(m).is_some_and(|v| v >= view));
    }

    fn validate_view_change(&mut self, vc: &ViewChange) -> bool {
        if vc.sender.index() >= self.cfg.params.n || vc.ui.replica != vc.sender {
            return false;
        }
        let ViewChangeLog::Chains(chains) = &vc.log else {
            return false;
        };
        if chains.len() != self.lanes.len() {
            return false;
        }
        let key = self.cfg.keys[vc.sender.index()];
        if !self.cache.verify(&key, &vc.digest(), &vc.ui) {
            return false;
        }
        chains
            .iter()
            .enumerate()
            .all(|(lane, chain)| self.validate_chain(lane as u32, chain, vc.new_view))
    }

    fn validate_chain(&mut self, lane: u32, chain: &[ChainEntry], before: u64) -> bool {
        let mut parent = None;
        let mut last_view = 0;
        for (i, e) in chain.iter().enumerate() {
            let height = i as u64 + 1;
            let b = &e.block;
            if b.height != height || b.instance != lane || b.parent != parent || !b.is_well_formed(usize::MAX) {
                return false;
            }
            if e.view >= before || e.view < last_view {
                return false;
            }
            let digest = b.digest();
            let proposer = self.cfg.primary_of(e.view);
            let ctx = vote_context(e.view, lane, height, &digest);
            if e.proposal_ui.replica != proposer
                || !self
                    .cache
                    .verify(&self.cfg.keys[proposer.index()], &ctx, &e.proposal_ui)
            {
                return false;
            }
            for (q, flavor) in [(&e.hybrid, Flavor::Hybrid), (&e.bft, Flavor::Bft)] {
                if let Some(q) = q {
                    let matches = q.flavor == flavor
                        && q.view == e.view
                        && q.instance == lane
                        && q.height == height
                        && q.block_digest == digest;
                    if !matches || !validate_certificate_cached(q, &self.cfg.params, &self.cfg.keys, &mut self.cache) {
                        return false;
                    }
                }
            }
            parent = Some(digest);
            last_view = e.view;
        }
        true
    }

    fn on_view_change(&mut self, vc: ViewChange, out: &mut Vec<Output>) {
        let target = vc.new_view;
        if target < self.sync.view || (target == self.sync.view && self.sync.status == Status::Normal) {
            return;
        }
        if self
            .view_changes
            .get(&target)
            .is_some_and(|m| m.contains_key(&vc.sender))
        {
            return;
        }
        if !self.validate_view_change(&vc) {
            return;
        }
        let sender = vc.sender;
        self.view_changes.entry(target).or_default().insert(sender, vc);
        let join = self.cfg.params.f + 1;
        if let Some(v) = self.sync.on_view_change_seen(sender, target, join) {
            self.start_view_change(v, 0, out);
        }
        self.maybe_new_view(out);
    }

    fn maybe_new_view(&mut self, out: &mut Vec<Output>) {
        let view = self.sync.view;
        if self.sync.status != Status::ViewChanging
            || self.cfg.primary_of(view) != self.cfg.id
            || self.new_view_sent.contains(&view)
        {
            return;
        }
        let threshold = self.cfg.params.view_change;
        let Some(vcs) = self.view_changes.get(&view) else {
            return;
        };
        if vcs.len() < threshold {
            return;
        }
        let selected: Vec<ViewChange> = vcs.values().take(threshold).cloned().collect();
        let adopted = Adopted::Chains(adopted_chains(&selected, self.lanes.len()));
        let digest = NewView::attested_digest(self.cfg.id, view, &selected, &adopted);
        let ui = self.usig.create_ui_for_digest(digest);
        self.new_view_sent.insert(view);
        out.push(Output::Broadcast(ProtocolMessage::NewView(NewView {
            sender: self.cfg.id,
            new_view: view,
            view_changes: selected,
            adopted,
            ui,
        })));
    }

    fn on_new_view(&mut self, nv: NewView, out: &mut Vec<Output>) {
        let view = nv.new_view;
        if view < self.sync.view || (view == self.sync.view && self.sync.status == Status::Normal) {
            return;
        }
        let primary = self.cfg.primary_of(view);
        if nv.sender != primary || nv.ui.replica != primary {
            return;
        }
        let key = self.cfg.keys[primary.index()];
        if !self.cache.verify(&key, &nv.digest(), &nv.ui) {
            return;
        }
        let mut senders = BTreeSet::new();
        let mut valid = nv.view_changes.len() >= self.cfg.params.view_change;
        for vc in &nv.view_changes {
            valid &= vc.new_view == view && senders.insert(vc.sender) && self.validate_view_change(vc);
            if !valid {
                break;
            }
        }
        let expected = valid.then(|| adopted_chains(&nv.view_changes, self.lanes.len()));
        let Some(chains) = expected.filter(|c| nv.adopted == Adopted::Chains(c.clone())) else {
            out.push(Output::Evidence(Evidence::BadNewView { replica: primary, view }));
            if self.sync.view < view {
                self.start_view_change(view, 0, out);
            }
            self.suspect(out);
            return;
        };
        self.install(view, chains, nv.ui.counter, out);
    }

    fn install(&mut self, view: u64, chains: Vec<Vec<ChainEntry>>, base_counter: u64, out: &mut Vec<Output>) {
        if self.sync.view < view {
            self.sync.enter(view, self.cfg.base_timeout);
        }
        self.clear_view_state();
        self.sync.install(view);
        out.push(Output::CancelTimer(Timer::NewView(view)));
        out.push(Output::ViewInstalled { view });
        self.view_changes = self.view_changes.split_off(&(view + 1));
        self.expected_counter = base_counter + 1;
        for (lane, chain) in self.lanes.iter_mut().zip(chains) {
            lane.reset_chain(chain);
            lane.proposed_height = lane.height();
        }
        self.proposed = self
            .lanes
            .iter()
            .flat_map(|l| l.chain[(l.frontier[BFT] as usize).min(l.chain.len())..].iter())
            .flat_map(|e| e.block.commands.iter().map(|c| c.id()))
            .collect();
        if self.primary() != self.cfg.id {
            let to = self.primary();
            for cmd in self.waiting.values() {
                out.push(Output::Send {
                    to,
                    msg: ProtocolMessage::ClientRequest(ClientRequest { command: cmd.clone() }),
                });
            }
        }
        self.rearm_progress(out);
        for lane_idx in 0..self.lanes.len() {
            self.advance(lane_idx, out);
        }
        let future = core::mem::take(&mut self.future);
        for msg in future {
            match message_view(&msg) {
                Some(v) if v == view => self.dispatch(msg, out),
                Some(v) if v > view => self.future.push(msg),
                _ => {}
            }
        }
    }

    fn on_timer_fired(&mut self, timer: Timer, out: &mut Vec<Output>) {
        match timer {
            Timer::Progress => {
                self.progress_armed = false;
                if self.sync.status == Status::Normal && !self.waiting.is_empty() && self.primary() != self.cfg.id {
                    self.suspect(out);
                }
            }
            Timer::NewView(v) => {
                if self.sync.view == v && self.sync.status == Status::ViewChanging {
                    self.suspect(out);
                }
            }
        }
    }

    fn dispatch(&mut self, msg: ProtocolMessage, out: &mut Vec<Output>) {
        match msg {
            ProtocolMessage::ClientRequest(r) => self.on_request(r.command, out),
            ProtocolMessage::Propose(p) => self.on_propose(p, out),
            ProtocolMessage::Vote(v) => self.on_vote(v, out),
            ProtocolMessage::CertBroadcast(c) => self.on_cert(c, out),
            ProtocolMessage::ReqViewChange(r) => self.on_req_view_change(r, out),
            ProtocolMessage::ViewChange(vc) => self.on_view_change(vc, out),
            ProtocolMessage::NewView(nv) => self.on_new_view(nv, out),
            ProtocolMessage::Prepare(_) | ProtocolMessage::Commit(_) | ProtocolMessage::ClientReply(_) => {}
        }
    }
}

fn message_view(msg: &ProtocolMessage) -> Option<u64> {
    match msg {
        ProtocolMessage::Propose(p) => Some(p.view),
        ProtocolMessage::Vote(v) => Some(v.view),
        ProtocolMessage::CertBroadcast(c) => Some(c.view),
        _ => None,
    }
}

/// The chains a new primary adopts, computed from validated ViewChange logs.
///
/// Per lane: the anchor is the reported block whose BFT certificate has the
/// highest `(view, height)`. The head is the reported block with the highest
/// `(proposal view, height, digest)` among those whose chain contains the
/// anchor. The result is the head's chain, each entry carrying the smallest
/// reported attestation and certificates for that block.
pub fn adopted_chains(view_changes: &[ViewChange], lanes: usize) -> Vec<Vec<ChainEntry>> {
    let mut result = Vec::with_capacity(lanes);
    for lane in 0..lanes {
        let chains: Vec<(&[ChainEntry], Vec<Digest>)> = view_changes
            .iter()
            .filter_map(|vc| match &vc.log {
                ViewChangeLog::Chains(c) => c.get(lane).map(|c| c.as_slice()),
                ViewChangeLog::Messages(_) => None,
            })
            .map(|c| (c, c.iter().map(|e| e.block.digest()).collect()))
            .collect();
        let anchor = chains
            .iter()
            .flat_map(|(c, d)| c.iter().zip(d.iter()))
            .filter_map(|(e, d)| e.bft.as_ref().map(|q| (q.view, e.block.height, *d)))
            .max();
        let contains_anchor = |digests: &[Digest], idx: usize| match anchor {
            None => true,
            Some((_, h, d)) => idx + 1 >= h as usize && digests.get(h as usize - 1) == Some(&d),
        };
        let mut head: Option<((u64, u64, Digest), usize)> = None;
        for (ci, (c, d)) in chains.iter().enumerate() {
            for (i, e) in c.iter().enumerate() {
                if !contains_anchor(d, i) {
                    continue;
                }
                let rank = (e.view, e.block.height, d[i]);
                if head.is_none_or(|(r, _)| rank > r) {
                    head = Some((rank, ci));
                }
            }
        }
        let Some(((_, height, _), ci)) = head else {
            result.push(Vec::new());
            continue;
        };
        let (base, base_digests) = &chains[ci];
        let mut adopted: Vec<ChainEntry> = base[..height as usize].to_vec();
        for (i, entry) in adopted.iter_mut().enumerate() {
            let same = chains
                .iter()
                .filter(|(_, d)| d.get(i) == Some(&base_digests[i]))
                .map(|(c, _)| &c[i]);
            for other in same {
                entry.proposal_ui = entry.proposal_ui.min(other.proposal_ui);
                entry.hybrid = min_cert(entry.hybrid.take(), other.hybrid.clone());
                entry.bft = min_cert(entry.bft.take(), other.bft.clone());
            }
        }
        result.push(adopted);
    }
    result
}

fn min_cert(a: Option<QuorumCertificate>, b: Option<QuorumCertificate>) -> Option<QuorumCertificate> {
    match (a, b) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    }
}

impl Replica for DuoReplica {
    fn id(&self) -> ReplicaId {
        self.cfg.id
    }

    fn view(&self) -> u64 {
        self.sync.view
    }

    fn is_view_changing(&self) -> bool {
        self.sync.status == Status::ViewChanging
    }

    fn on_message(&mut self, msg: ProtocolMessage) -> Vec<Output> {
        let mut out = Vec::new();
        self.dispatch(msg, &mut out);
        self.maybe_propose(&mut out);
        out
    }

    fn on_timer(&mut self, timer: Timer) -> Vec<Output> {
        let mut out = Vec::new();
        self.on_timer_fired(timer, &mut out);
        self.maybe_propose(&mut out);
        out
    }
}
