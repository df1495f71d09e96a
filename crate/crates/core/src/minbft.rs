//! The Flexible MinBFT replica.
//!
//! The primary attests each batch in a Prepare; every other replica answers
//! with a Commit carrying its own attestation. A prepare executes once the
//! primary plus enough committers reach the commit threshold, in the
//! primary's counter order. Messages from each sender are processed strictly
//! in that sender's counter order.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use crate::crypto::{Digest, KeyPair, ReplicaId};
use crate::messages::{
    Adopted, ClientReply, ClientRequest, Command, CommandId, Commit, FaultModel, LogEntry, NewView, Prepare,
    ProtocolMessage, ReqViewChange, ViewChange, ViewChangeLog,
};
use crate::replica::{Evidence, Ledger, Output, Replica, ReplicaConfig, RequestQueue, Status, Timer, ViewSync};
use crate::usig::{UsigInstance, VerifyCache};

/// A prepare accepted in its view, with the replicas endorsing it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Slot {
    prepare: Prepare,
    digest: Digest,
    endorsers: BTreeSet<ReplicaId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MinbftReplica {
    cfg: ReplicaConfig,
    key: KeyPair,
    usig: UsigInstance,
    cache: VerifyCache,
    sync: ViewSync,
    /// Every message this replica attested, in counter order, plus adopted prepares.
    log: Vec<LogEntry>,
    /// Next counter to process per sender.
    next_ui: BTreeMap<ReplicaId, u64>,
    /// Messages ahead of their sender's sequence.
    held: BTreeMap<(ReplicaId, u64), ProtocolMessage>,
    future: Vec<ProtocolMessage>,
    /// Prepares by `(view, primary counter)`.
    slots: BTreeMap<(u64, u64), Slot>,
    /// Commits whose prepare is not accepted yet: `(view, counter) -> sender -> prepare digest`.
    early: BTreeMap<(u64, u64), BTreeMap<ReplicaId, Digest>>,
    /// Next primary counter to execute in the current view.
    next_exec: u64,
    executed_slots: BTreeSet<(u64, u64)>,
    committed: u64,
    ledger: Ledger,
    view_changes: BTreeMap<u64, BTreeMap<ReplicaId, ViewChange>>,
    new_view_sent: BTreeSet<u64>,
    waiting: RequestQueue,
    proposed: BTreeSet<CommandId>,
    progress_armed: bool,
}

impl MinbftReplica {
    pub fn new(cfg: ReplicaConfig, key: KeyPair) -> Self {
        MinbftReplica {
            usig: UsigInstance::new(cfg.id, key.clone()),
            key,
            cache: VerifyCache::new(),
            sync: ViewSync::new(),
            log: Vec::new(),
            next_ui: BTreeMap::new(),
            held: BTreeMap::new(),
            future: Vec::new(),
            slots: BTreeMap::new(),
            early: BTreeMap::new(),
            next_exec: 1,
            executed_slots: BTreeSet::new(),
            committed: 0,
            ledger: Ledger::new(),
            view_changes: BTreeMap::new(),
            new_view_sent: BTreeSet::new(),
            waiting: RequestQueue::new(),
            proposed: BTreeSet::new(),
            progress_armed: false,
            cfg,
        }
    }

    pub fn config(&self) -> &ReplicaConfig {
        &self.cfg
    }

    pub fn usig_mut(&mut self) -> &mut UsigInstance {
        &mut self.usig
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    fn primary(&self) -> ReplicaId {
        self.cfg.primary_of(self.sync.view)
    }

    fn is_primary(&self) -> bool {
        self.primary() == self.cfg.id && self.sync.status == Status::Normal
    }

    /// Attests and broadcasts a Prepare for `batch` in the current view.
    /// The batch is taken as given, even if it repeats earlier commands.
    pub fn propose_batch(&mut self, batch: Vec<Command>) -> Vec<Output> {
        let view = self.sync.view;
        let ui = self
            .usig
            .create_ui_for_digest(Prepare::attested_digest(view, self.cfg.id, &batch));
        for c in &batch {
            self.proposed.insert(c.id());
        }
        let prepare = Prepare {
            view,
            sender: self.cfg.id,
            batch,
            ui,
        };
        self.log.push(LogEntry::Prepare(prepare.clone()));
        alloc::vec![Output::Broadcast(ProtocolMessage::Prepare(prepare))]
    }

    fn suspect(&mut self, out: &mut Vec<Output>) {
        if let Some(req) = self.sync.suspect(self.cfg.id, &self.key) {
            out.push(Output::Broadcast(ProtocolMessage::ReqViewChange(req)));
        }
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

    fn on_request(&mut self, cmd: Command, out: &mut Vec<Output>) {
        let id = cmd.id();
        if self.ledger.is_executed(id) {
            if let Some(result) = self.ledger.cached_reply(id) {
                out.push(Output::Reply {
                    client: cmd.client,
                    reply: ClientReply {
                        replica: self.cfg.id,
                        command: id,
                        model: FaultModel::Hybrid,
                        result,
                    },
                });
            }
            return;
        }
        if self.waiting.contains_key(&id) {
            return;
        }
        self.waiting.insert(id, cmd.clone());
        if self.sync.status == Status::Normal && self.primary() != self.cfg.id {
            out.push(Output::Send {
                to: self.primary(),
                msg: ProtocolMessage::ClientRequest(ClientRequest { command: cmd }),
            });
        }
        self.arm_progress(out);
    }

    fn maybe_propose(&mut self, out: &mut Vec<Output>) {
        if !self.is_primary() {
            return;
        }
        loop {
            let batch: Vec<Command> = self
                .waiting
                .iter()
                .filter(|(id, _)| !self.proposed.contains(id) && !self.ledger.is_executed(**id))
                .take(self.cfg.batch_size)
                .map(|(_, c)| c.clone())
                .collect();
            if batch.is_empty() {
                return;
            }
            out.extend(self.propose_batch(batch));
        }
    }

    // ---- sender-ordered processing ----

    /// Routes a Prepare or Commit through its sender's counter sequence.
    fn ordered(&mut self, msg: ProtocolMessage, out: &mut Vec<Output>) {
        let (view, ui) = match &msg {
            ProtocolMessage::Prepare(p) => (p.view, p.ui),
            ProtocolMessage::Commit(c) => (c.view, c.ui),
            _ => return,
        };
        if view > self.sync.view || (view == self.sync.view && self.sync.status != Status::Normal) {
            self.future.push(msg);
            return;
        }
        let sender = ui.replica;
        let next = self.next_ui.get(&sender).copied().unwrap_or(1);
        if ui.counter < next {
            return;
        }
        if ui.counter > next {
            self.held.entry((sender, ui.counter)).or_insert(msg);
            return;
        }
        if !self.verify_message(&msg) {
            // A bad attestation does not advance the sequence.
            if sender == self.primary() {
                let ev = Evidence::InvalidAttestation { replica: sender, view };
                out.push(Output::Evidence(ev));
                self.suspect(out);
            }
            return;
        }
        self.next_ui.insert(sender, next + 1);
        self.process(msg, out);
        self.drain_held(sender, out);
    }

    fn drain_held(&mut self, sender: ReplicaId, out: &mut Vec<Output>) {
        loop {
            let next = self.next_ui.get(&sender).copied().unwrap_or(1);
            let stale: Vec<(ReplicaId, u64)> = self.held.range((sender, 0)..(sender, next)).map(|(k, _)| *k).collect();
            for k in stale {
                self.held.remove(&k);
            }
            let Some(msg) = self.held.remove(&(sender, next)) else {
                return;
            };
            self.ordered(msg, out);
            if self.next_ui.get(&sender).copied().unwrap_or(1) == next {
                return;
            }
        }
    }

    fn verify_message(&mut self, msg: &ProtocolMessage) -> bool {
        match msg {
            ProtocolMessage::Prepare(p) => self.verify_prepare(p),
            ProtocolMessage::Commit(c) => self.verify_commit(c),
            _ => false,
        }
    }

    fn verify_prepare(&mut self, p: &Prepare) -> bool {
        let primary = self.cfg.primary_of(p.view);
        p.sender == primary
            && p.ui.replica == primary
            && p.batch.len() <= self.cfg.batch_size
            && self.cache.verify(&self.cfg.keys[primary.index()], &p.digest(), &p.ui)
    }

    fn verify_commit(&mut self, c: &Commit) -> bool {
        c.sender.index() < self.cfg.params.n
            && c.ui.replica == c.sender
            && c.prepare.view == c.view
            && self.verify_prepare(&c.prepare)
            && self.cache.verify(&self.cfg.keys[c.sender.index()], &c.digest(), &c.ui)
    }

    fn process(&mut self, msg: ProtocolMessage, out: &mut Vec<Output>) {
        if self.sync.status != Status::Normal {
            return;
        }
        match msg {
            ProtocolMessage::Prepare(p) if p.view == self.sync.view => self.accept_prepare(p, out),
            ProtocolMessage::Commit(c) if c.view == self.sync.view => {
                let key = (c.view, c.prepare.ui.counter);
                let digest = c.prepare.digest();
                let sender = c.sender;
                self.ordered(ProtocolMessage::Prepare(c.prepare), out);
                match self.slots.get_mut(&key) {
                    Some(slot) if slot.digest == digest => {
                        slot.endorsers.insert(sender);
                    }
                    Some(_) => {
                        let ev = Evidence::Equivocation {
                            replica: self.primary(),
                            counter: key.1,
                        };
                        out.push(Output::Evidence(ev));
                        self.suspect(out);
                    }
                    None => {
                        self.early.entry(key).or_default().insert(sender, digest);
                    }
                }
                self.try_execute(out);
            }
            _ => {}
        }
    }

    fn accept_prepare(&mut self, p: Prepare, out: &mut Vec<Output>) {
        let key = (p.view, p.ui.counter);
        let digest = p.digest();
        let mut endorsers = BTreeSet::new();
        endorsers.insert(p.sender);
        if let Some(early) = self.early.remove(&key) {
            endorsers.extend(early.into_iter().filter(|(_, d)| *d == digest).map(|(r, _)| r));
        }
        for c in &p.batch {
            self.proposed.insert(c.id());
        }
        if p.sender != self.cfg.id {
            let ui = self
                .usig
                .create_ui_for_digest(Commit::attested_digest(p.view, self.cfg.id, &p.ui));
            let commit = Commit {
                view: p.view,
                sender: self.cfg.id,
                prepare: p.clone(),
                ui,
            };
            self.log.push(LogEntry::Commit(commit.clone()));
            endorsers.insert(self.cfg.id);
            out.push(Output::Broadcast(ProtocolMessage::Commit(commit)));
        }
        self.slots.insert(
            key,
            Slot {
                prepare: p,
                digest,
                endorsers,
            },
        );
        self.try_execute(out);
    }

    fn try_execute(&mut self, out: &mut Vec<Output>) {
        let view = self.sync.view;
        let threshold = self.cfg.params.commit_hybrid;
        while let Some(slot) = self.slots.get(&(view, self.next_exec)) {
            if slot.endorsers.len() < threshold {
                return;
            }
            let prepare = slot.prepare.clone();
            self.next_exec += 1;
            self.execute(prepare, out);
        }
    }

    fn execute(&mut self, p: Prepare, out: &mut Vec<Output>) {
        if !self.executed_slots.insert((p.view, p.ui.counter)) {
            return;
        }
        self.committed += 1;
        out.push(Output::Committed {
            model: FaultModel::Hybrid,
            lane: 0,
            index: self.committed,
            digest: p.digest(),
        });
        let mut executed = Vec::new();
        let mut progressed = false;
        for cmd in &p.batch {
            let id = cmd.id();
            if let Some(result) = self.ledger.execute(cmd) {
                executed.push(id);
                out.push(Output::Reply {
                    client: cmd.client,
                    reply: ClientReply {
                        replica: self.cfg.id,
                        command: id,
                        model: FaultModel::Hybrid,
                        result,
                    },
                });
            }
            progressed |= self.waiting.remove(&id).is_some();
            self.proposed.remove(&id);
        }
        out.push(Output::Executed {
            model: FaultModel::Hybrid,
            commands: executed,
        });
        if progressed {
            self.sync.progressed();
            self.rearm_progress(out);
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
        if self.progress_armed {
            self.progress_armed = false;
            out.push(Output::CancelTimer(Timer::Progress));
        }
        let log = ViewChangeLog::Messages(self.log.clone());
        let ui = self
            .usig
            .create_ui_for_digest(ViewChange::attested_digest(self.cfg.id, view, &log));
        self.log.push(LogEntry::Other(ui));
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

    /// Checks a ViewChange, including that its log has no holes: own entries
    /// carry counters `1..=k` and the ViewChange itself carries `k + 1`.
    fn validate_view_change(&mut self, vc: &ViewChange) -> bool {
        if vc.sender.index() >= self.cfg.params.n || vc.ui.replica != vc.sender {
            return false;
        }
        let ViewChangeLog::Messages(entries) = &vc.log else {
            return false;
        };
        let key = self.cfg.keys[vc.sender.index()];
        if !self.cache.verify(&key, &vc.digest(), &vc.ui) {
            return false;
        }
        let mut expected = 1;
        for entry in entries {
            let ok = match entry {
                LogEntry::Prepare(p) => p.sender == vc.sender && p.view < vc.new_view && self.verify_prepare(p),
                LogEntry::Commit(c) => c.sender == vc.sender && c.view < vc.new_view && self.verify_commit(c),
                LogEntry::Other(ui) => ui.replica == vc.sender && self.cache.verify(&key, &ui.message_digest, ui),
                LogEntry::Adopted(p) => p.view < vc.new_view && self.verify_prepare(p),
            };
            if !ok {
                return false;
            }
            if entry.is_own() {
                if entry.ui().counter != expected {
                    return false;
                }
                expected += 1;
            }
        }
        vc.ui.counter == expected
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
            out.push(Output::Evidence(Evidence::LogHole {
                replica: vc.sender,
                view: target,
            }));
            return;
        }
        self.absorb(&vc, out);
        let sender = vc.sender;
        self.view_changes.entry(target).or_default().insert(sender, vc);
        if let Some(v) = self.sync.on_view_change_seen(sender, target, self.cfg.params.f + 1) {
            self.start_view_change(v, 0, out);
        }
        self.maybe_new_view(out);
    }

    /// Feeds the unseen part of a validated log through normal processing and
    /// moves the sender's sequence past its ViewChange.
    fn absorb(&mut self, vc: &ViewChange, out: &mut Vec<Output>) {
        let ViewChangeLog::Messages(entries) = &vc.log else {
            return;
        };
        let sender = vc.sender;
        for entry in entries.iter().filter(|e| e.is_own()) {
            let next = self.next_ui.get(&sender).copied().unwrap_or(1);
            if entry.ui().counter < next {
                continue;
            }
            match entry {
                LogEntry::Prepare(p) => self.ordered(ProtocolMessage::Prepare(p.clone()), out),
                LogEntry::Commit(c) => self.ordered(ProtocolMessage::Commit(c.clone()), out),
                _ => {}
            }
            let next = self.next_ui.get(&sender).copied().unwrap_or(1);
            if next <= entry.ui().counter {
                self.next_ui.insert(sender, entry.ui().counter + 1);
            }
        }
        let next = self.next_ui.entry(sender).or_insert(1);
        *next = (*next).max(vc.ui.counter + 1);
        self.drain_held(sender, out);
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
        let adopted = Adopted::Prepares(adopted_prepares(&selected));
        let ui = self
            .usig
            .create_ui_for_digest(NewView::attested_digest(self.cfg.id, view, &selected, &adopted));
        self.log.push(LogEntry::Other(ui));
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
        if !self.cache.verify(&self.cfg.keys[primary.index()], &nv.digest(), &nv.ui) {
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
        let expected = valid.then(|| adopted_prepares(&nv.view_changes));
        let Some(adopted) = expected.filter(|s| nv.adopted == Adopted::Prepares(s.clone())) else {
            out.push(Output::Evidence(Evidence::BadNewView { replica: primary, view }));
            if self.sync.view < view {
                self.start_view_change(view, 0, out);
            }
            self.suspect(out);
            return;
        };
        if self.sync.view < view {
            self.sync.enter(view, self.cfg.base_timeout);
        }
        for vc in &nv.view_changes {
            self.absorb(vc, out);
        }
        self.sync.install(view);
        out.push(Output::CancelTimer(Timer::NewView(view)));
        out.push(Output::ViewInstalled { view });
        self.view_changes = self.view_changes.split_off(&(view + 1));
        for p in adopted {
            if !self.executed_slots.contains(&(p.view, p.ui.counter)) {
                self.log.push(LogEntry::Adopted(p.clone()));
                self.execute(p, out);
            }
        }
        self.slots.retain(|(v, _), _| *v >= view);
        self.early.retain(|(v, _), _| *v >= view);
        self.next_exec = nv.ui.counter + 1;
        let next = self.next_ui.entry(primary).or_insert(1);
        *next = (*next).max(nv.ui.counter + 1);
        self.held.retain(|(r, c), _| *r != primary || *c > nv.ui.counter);
        self.proposed.clear();
        if primary != self.cfg.id {
            for cmd in self.waiting.values() {
                out.push(Output::Send {
                    to: primary,
                    msg: ProtocolMessage::ClientRequest(ClientRequest { command: cmd.clone() }),
                });
            }
        }
        self.rearm_progress(out);
        let future = core::mem::take(&mut self.future);
        for msg in future {
            self.ordered(msg, out);
        }
        let senders: Vec<ReplicaId> = self
            .held
            .keys()
            .map(|(r, _)| *r)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        for r in senders {
            self.drain_held(r, out);
        }
    }

    fn dispatch(&mut self, msg: ProtocolMessage, out: &mut Vec<Output>) {
        match msg {
            ProtocolMessage::ClientRequest(r) => self.on_request(r.command, out),
            m @ (ProtocolMessage::Prepare(_) | ProtocolMessage::Commit(_)) => self.ordered(m, out),
            ProtocolMessage::ReqViewChange(r) => self.on_req_view_change(r, out),
            ProtocolMessage::ViewChange(vc) => self.on_view_change(vc, out),
            ProtocolMessage::NewView(nv) => self.on_new_view(nv, out),
            _ => {}
        }
    }
}

/// The prepares a new primary installs: every prepare found in the logs,
/// one per `(view, counter)` (the smallest digest if several), in that order.
pub fn adopted_prepares(view_changes: &[ViewChange]) -> Vec<Prepare> {
    let mut by_slot: BTreeMap<(u64, u64), (Digest, &Prepare)> = BTreeMap::new();
    for vc in view_changes {
        let ViewChangeLog::Messages(entries) = &vc.log else {
            continue;
        };
        for entry in entries {
            let p = match entry {
                LogEntry::Prepare(p) | LogEntry::Adopted(p) => p,
                LogEntry::Commit(c) => &c.prepare,
                LogEntry::Other(_) => continue,
            };
            let d = p.digest();
            by_slot
                .entry((p.view, p.ui.counter))
                .and_modify(|cur| {
                    if d < cur.0 {
                        *cur = (d, p);
                    }
                })
                .or_insert((d, p));
        }
    }
    by_slot.into_values().map(|(_, p)| p.clone()).collect()
}

impl Replica for MinbftReplica {
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
        match timer {
            Timer::Progress => {
                self.progress_armed = false;
                if self.sync.status == Status::Normal && !self.waiting.is_empty() && self.primary() != self.cfg.id {
                    self.suspect(&mut out);
                }
            }
            Timer::NewView(v) => {
                if self.sync.view == v && self.sync.status == Status::ViewChanging {
                    self.suspect(&mut out);
                }
            }
        }
        self.maybe_propose(&mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::keygen;
    use crate::messages::{ClientId, ResponseModel};
    use crate::quorum::flexminbft_params;
    use crate::replica::{CommPattern, Pacing};
    use alloc::vec;

    fn replica(id: u32) -> MinbftReplica {
        let cfg = ReplicaConfig {
            id: ReplicaId(id),
            params: flexminbft_params(3, 1).unwrap(),
            keys: (0..3).map(|i| keygen(i).public()).collect(),
            batch_size: 4,
            base_timeout: 100,
            lanes: 1,
            comm: CommPattern::Quadratic,
            pacing: Pacing::BftQc,
        };
        MinbftReplica::new(cfg, keygen(id as u64))
    }

    fn command(client: u32, sequence: u64) -> Command {
        Command {
            client: ClientId(client),
            sequence,
            payload: vec![1, 2, 3],
            response_model: ResponseModel::Hybrid,
        }
    }

    fn prepares(out: Vec<Output>) -> Vec<Prepare> {
        out.into_iter()
            .filter_map(|o| match o {
                Output::Broadcast(ProtocolMessage::Prepare(p)) => Some(p),
                _ => None,
            })
            .collect()
    }

    fn executed(out: &[Output]) -> Vec<CommandId> {
        out.iter()
            .filter_map(|o| match o {
                Output::Executed { commands, .. } => Some(commands.clone()),
                _ => None,
            })
            .flatten()
            .collect()
    }

    #[test]
    fn reproposed_batch_executes_once() {
        let mut primary = replica(0);
        let mut backup = replica(1);
        let batch = vec![command(7, 1)];
        let first = prepares(primary.propose_batch(batch.clone()));
        let second = prepares(primary.propose_batch(batch));
        assert_eq!((first.len(), second.len()), (1, 1));
        assert_ne!(first[0].ui.counter, second[0].ui.counter);

        let out = backup.on_message(ProtocolMessage::Prepare(first[0].clone()));
        assert_eq!(executed(&out), vec![command(7, 1).id()]);
        let out = backup.on_message(ProtocolMessage::Prepare(second[0].clone()));
        assert!(executed(&out).is_empty());
        assert!(out.iter().any(|o| matches!(o, Output::Committed { index: 2, .. })));
        assert!(backup.ledger().is_executed(command(7, 1).id()));
    }

    #[test]
    fn prepares_wait_for_their_counter_predecessor() {
        let mut primary = replica(0);
        let mut backup = replica(1);
        let first = prepares(primary.propose_batch(vec![command(1, 1)]));
        let second = prepares(primary.propose_batch(vec![command(2, 1)]));
        let out = backup.on_message(ProtocolMessage::Prepare(second[0].clone()));
        assert!(executed(&out).is_empty());
        let out = backup.on_message(ProtocolMessage::Prepare(first[0].clone()));
        assert_eq!(executed(&out), vec![command(1, 1).id(), command(2, 1).id()]);
    }

    #[test]
    fn adoption_keeps_one_prepare_per_slot_in_order() {
        let mut primary = replica(0);
        let a = prepares(primary.propose_batch(vec![command(1, 1)])).remove(0);
        let b = prepares(primary.propose_batch(vec![command(2, 1)])).remove(0);
        let mut usig = UsigInstance::new(ReplicaId(1), keygen(1));
        let vc = |sender: u32, log: Vec<LogEntry>, usig: &mut UsigInstance| ViewChange {
            sender: ReplicaId(sender),
            new_view: 1,
            log: ViewChangeLog::Messages(log),
            ui: usig.create_ui(b"vc"),
        };
        let commit_b = Commit {
            view: 0,
            sender: ReplicaId(1),
            prepare: b.clone(),
            ui: usig.create_ui(b"commit"),
        };
        let reports = [
            vc(1, vec![LogEntry::Commit(commit_b)], &mut usig),
            vc(
                2,
                vec![LogEntry::Prepare(b.clone()), LogEntry::Prepare(a.clone())],
                &mut usig,
            ),
            vc(3, vec![], &mut usig),
        ];
        assert_eq!(adopted_prepares(&reports), vec![a, b]);
    }
}
