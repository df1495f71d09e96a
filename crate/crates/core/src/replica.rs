//! Types shared by the replica state machines: configuration, handler
//! outputs, timers, the replicated ledger and view-change bookkeeping.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use crate::codec::Encode;
use crate::crypto::{hash_parts, verify, Digest, KeyPair, PublicKey, ReplicaId};
use crate::messages::{ClientId, ClientReply, Command, CommandId, FaultModel, ProtocolMessage, ReqViewChange};
use crate::quorum::QuorumParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CommPattern {
    /// Votes are broadcast to every replica.
    Quadratic,
    /// Votes go to the primary, which broadcasts certificates.
    Linear,
}

/// Certificate the primary waits for before proposing the next block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pacing {
    HybridQc,
    BftQc,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ReplicaConfig {
    pub id: ReplicaId,
    pub params: QuorumParams,
    /// Public keys of all replicas, indexed by id.
    pub keys: Vec<PublicKey>,
    pub batch_size: usize,
    /// Progress timeout in milliseconds; doubled per consecutive view change.
    pub base_timeout: u64,
    pub lanes: u32,
    pub comm: CommPattern,
    pub pacing: Pacing,
}

impl ReplicaConfig {
    pub fn primary_of(&self, view: u64) -> ReplicaId {
        ReplicaId::primary_of(view, self.params.n)
    }

    pub fn key(&self, r: ReplicaId) -> Option<&PublicKey> {
        self.keys.get(r.index())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Timer {
    /// Fires when forwarded requests have made no progress.
    Progress,
    /// Fires when the new view has not been installed in time.
    NewView(u64),
}

/// Misbehaviour observed by a correct replica.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Evidence {
    /// A primary message whose attestation does not verify.
    InvalidAttestation { replica: ReplicaId, view: u64 },
    /// Two different messages attested with the same counter.
    Equivocation { replica: ReplicaId, counter: u64 },
    /// Two different votes for the same height in one view.
    ConflictingVote { replica: ReplicaId, view: u64, height: u64 },
    /// A proposal that does not extend the chain.
    NonExtending { replica: ReplicaId, view: u64, height: u64 },
    /// A view-change log with missing counters.
    LogHole { replica: ReplicaId, view: u64 },
    /// A NewView whose adopted sequence does not match the certificate.
    BadNewView { replica: ReplicaId, view: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Output {
    Send {
        to: ReplicaId,
        msg: ProtocolMessage,
    },
    /// To every replica, the sender included.
    Broadcast(ProtocolMessage),
    Reply {
        client: ClientId,
        reply: ClientReply,
    },
    SetTimer {
        timer: Timer,
        after: u64,
    },
    CancelTimer(Timer),
    /// A block (or prepare) became final under `model`.
    Committed {
        model: FaultModel,
        lane: u32,
        index: u64,
        digest: Digest,
    },
    /// Commands applied to the `model` ledger, in order.
    Executed {
        model: FaultModel,
        commands: Vec<CommandId>,
    },
    EnterViewChange {
        view: u64,
        requests: usize,
    },
    ViewInstalled {
        view: u64,
    },
    Evidence(Evidence),
}

/// The interface the simulator drives.
pub trait Replica {
    fn id(&self) -> ReplicaId;
    fn view(&self) -> u64;
    fn is_view_changing(&self) -> bool;
    fn on_message(&mut self, msg: ProtocolMessage) -> Vec<Output>;
    fn on_timer(&mut self, timer: Timer) -> Vec<Output>;
}

/// A replicated state that is a hash chain over executed commands.
///
/// Client commands not yet executed, in arrival order so batches are
/// formed first come, first served.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct RequestQueue {
    arrival: BTreeMap<CommandId, u64>,
    order: BTreeMap<u64, (CommandId, Command)>,
    next: u64,
}

impl RequestQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains_key(&self, id: &CommandId) -> bool {
        self.arrival.contains_key(id)
    }

    /// Queues `cmd` behind everything already waiting. Re-inserting a
    /// queued command keeps its place.
    pub fn insert(&mut self, id: CommandId, cmd: Command) {
        if self.arrival.contains_key(&id) {
            return;
        }
        self.arrival.insert(id, self.next);
        self.order.insert(self.next, (id, cmd));
        self.next += 1;
    }

    pub fn remove(&mut self, id: &CommandId) -> Option<Command> {
        let at = self.arrival.remove(id)?;
        self.order.remove(&at).map(|(_, c)| c)
    }

    pub fn is_empty(&self) -> bool {
        self.arrival.is_empty()
    }

    pub fn len(&self) -> usize {
        self.arrival.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&CommandId, &Command)> {
        self.order.values().map(|(id, c)| (id, c))
    }

    pub fn values(&self) -> impl Iterator<Item = &Command> {
        self.order.values().map(|(_, c)| c)
    }
}

/// `v_req` holds the last executed sequence per client; commands at or below
/// it are never executed again.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Ledger {
    state: Digest,
    v_req: BTreeMap<ClientId, u64>,
    replies: BTreeMap<ClientId, (u64, Digest)>,
    executed: u64,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies `cmd` and returns the result, or `None` for a duplicate.
    pub fn execute(&mut self, cmd: &Command) -> Option<Digest> {
        if self.is_executed(cmd.id()) {
            return None;
        }
        self.state = hash_parts(&[b"duobft-exec", &self.state.0, &cmd.to_bytes()]);
        self.v_req.insert(cmd.client, cmd.sequence);
        self.replies.insert(cmd.client, (cmd.sequence, self.state));
        self.executed += 1;
        Some(self.state)
    }

    pub fn is_executed(&self, id: CommandId) -> bool {
        self.v_req.get(&id.client).is_some_and(|s| id.sequence <= *s)
    }

    /// Result of the client's latest command if it is `id`.
    pub fn cached_reply(&self, id: CommandId) -> Option<Digest> {
        self.replies
            .get(&id.client)
            .filter(|(s, _)| *s == id.sequence)
            .map(|(_, d)| *d)
    }

    pub fn state(&self) -> Digest {
        self.state
    }

    pub fn executed_count(&self) -> u64 {
        self.executed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Status {
    Normal,
    ViewChanging,
}

/// Request/join bookkeeping of the view-change subprotocol.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub(crate) struct ViewSync {
    pub view: u64,
    pub status: Status,
    /// Views this replica already asked to leave.
    requested: BTreeSet<u64>,
    /// `new_view -> senders` of verified ReqViewChange messages.
    requests: BTreeMap<u64, BTreeSet<ReplicaId>>,
    /// `new_view -> senders` of ViewChange messages seen.
    joins: BTreeMap<u64, BTreeSet<ReplicaId>>,
    consecutive: u32,
}

impl ViewSync {
    pub fn new() -> Self {
        ViewSync {
            view: 0,
            status: Status::Normal,
            requested: BTreeSet::new(),
            requests: BTreeMap::new(),
            joins: BTreeMap::new(),
            consecutive: 0,
        }
    }

    /// Builds this replica's request to leave the current view, once per view.
    pub fn suspect(&mut self, id: ReplicaId, key: &KeyPair) -> Option<ReqViewChange> {
        let old = self.view;
        if !self.requested.insert(old) {
            return None;
        }
        let new = old + 1;
        Some(ReqViewChange {
            sender: id,
            old_view: old,
            new_view: new,
            signature: key.sign(&ReqViewChange::signed_bytes(id, old, new)),
        })
    }

    /// Records a request; returns `(target, count)` when this replica should
    /// move to a view-change for `target`.
    pub fn on_request(&mut self, req: &ReqViewChange, keys: &[PublicKey], threshold: usize) -> Option<(u64, usize)> {
        if req.new_view != req.old_view + 1 || req.old_view < self.view {
            return None;
        }
        let key = keys.get(req.sender.index())?;
        let bytes = ReqViewChange::signed_bytes(req.sender, req.old_view, req.new_view);
        if !verify(key, &bytes, &req.signature) {
            return None;
        }
        let set = self.requests.entry(req.new_view).or_default();
        set.insert(req.sender);
        let count = set.len();
        (count >= threshold && req.new_view > self.view).then_some((req.new_view, count))
    }

    /// Records a ViewChange for `view`; returns `Some(view)` if enough
    /// replicas moved there that this replica should follow.
    pub fn on_view_change_seen(&mut self, sender: ReplicaId, view: u64, threshold: usize) -> Option<u64> {
        if view <= self.view {
            return None;
        }
        let set = self.joins.entry(view).or_default();
        set.insert(sender);
        (set.len() >= threshold).then_some(view)
    }

    /// Moves to view-change mode for `view`; returns the NewView timeout.
    pub fn enter(&mut self, view: u64, base_timeout: u64) -> u64 {
        debug_assert!(view > self.view);
        self.view = view;
        self.status = Status::ViewChanging;
        self.consecutive = self.consecutive.saturating_add(1);
        self.requests = self.requests.split_off(&view);
        self.joins = self.joins.split_off(&(view + 1));
        self.timeout(base_timeout)
    }

    pub fn install(&mut self, view: u64) {
        self.view = view;
        self.status = Status::Normal;
    }

    /// Called on progress in an installed view.
    pub fn progressed(&mut self) {
        self.consecutive = 0;
    }

    pub fn timeout(&self, base: u64) -> u64 {
        base.saturating_mul(1u64 << self.consecutive.min(16))
    }
}
