//! Wire-level messages, blocks and quorum certificates.
//!
//! Every type has a canonical encoding (see [`crate::codec`]). Attested
//! messages carry a [`UsigCertificate`] over the digest returned by their
//! `attested_digest` method; votes and proposals both attest the same
//! [`vote_context`], which is what lets a proposal count as the primary's vote.

use alloc::vec::Vec;

use crate::codec::{Bytes, Decode, DecodeError, Encode, Reader};
use crate::crypto::{hash, hash_parts, Digest, ReplicaId, Signature};
use crate::usig::UsigCertificate;

/// Default number of commands per block or prepare.
pub const DEFAULT_BATCH_SIZE: usize = 200;
/// Default command payload length in bytes.
pub const DEFAULT_PAYLOAD_SIZE: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ClientId(pub u32);

/// The fault model under which a replica committed something.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FaultModel {
    Hybrid,
    Bft,
}

impl FaultModel {
    pub const ALL: [FaultModel; 2] = [FaultModel::Hybrid, FaultModel::Bft];

    pub fn name(self) -> &'static str {
        match self {
            FaultModel::Hybrid => "hybrid",
            FaultModel::Bft => "bft",
        }
    }
}

/// Which commit models a client wants replies for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ResponseModel {
    Hybrid,
    Bft,
    Both,
}

impl ResponseModel {
    pub fn wants(self, model: FaultModel) -> bool {
        matches!(
            (self, model),
            (ResponseModel::Both, _)
                | (ResponseModel::Hybrid, FaultModel::Hybrid)
                | (ResponseModel::Bft, FaultModel::Bft)
        )
    }

    pub fn models(self) -> impl Iterator<Item = FaultModel> {
        FaultModel::ALL.into_iter().filter(move |m| self.wants(*m))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CommandId {
    pub client: ClientId,
    pub sequence: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Command {
    pub client: ClientId,
    pub sequence: u64,
    pub payload: Vec<u8>,
    pub response_model: ResponseModel,
}

impl Command {
    pub fn id(&self) -> CommandId {
        CommandId {
            client: self.client,
            sequence: self.sequence,
        }
    }
}

/// `B_k = (b_k, h_{k-1})`: a batch of commands plus the digest of the parent.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Block {
    pub height: u64,
    pub parent: Option<Digest>,
    pub commands: Vec<Command>,
    /// Multi-chain lane; 0 for single-chain runs.
    pub instance: u32,
}

impl Block {
    pub fn genesis(instance: u32, commands: Vec<Command>) -> Self {
        Block {
            height: 1,
            parent: None,
            commands,
            instance,
        }
    }

    pub fn child_of(parent: &Block, commands: Vec<Command>) -> Self {
        Block {
            height: parent.height + 1,
            parent: Some(parent.digest()),
            commands,
            instance: parent.instance,
        }
    }

    /// Structural validity: only height 1 may (and must) lack a parent.
    pub fn is_well_formed(&self, batch_size: usize) -> bool {
        self.height >= 1 && (self.parent.is_none() == (self.height == 1)) && self.commands.len() <= batch_size
    }

    pub fn digest(&self) -> Digest {
        block_digest(self)
    }
}

/// Hash of the canonical encoding of `block`.
pub fn block_digest(block: &Block) -> Digest {
    hash_parts(&[b"duobft-block", &block.to_bytes()])
}

/// What a proposal and every vote for a block attest to.
pub fn vote_context(view: u64, instance: u32, height: u64, block: &Digest) -> Digest {
    let mut buf = Vec::with_capacity(64);
    buf.extend_from_slice(b"duobft-vote");
    view.encode(&mut buf);
    instance.encode(&mut buf);
    height.encode(&mut buf);
    block.encode(&mut buf);
    hash(&buf)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Flavor {
    Hybrid,
    Bft,
}

impl Flavor {
    pub fn model(self) -> FaultModel {
        match self {
            Flavor::Hybrid => FaultModel::Hybrid,
            Flavor::Bft => FaultModel::Bft,
        }
    }
}

/// Distinct-replica attested votes for one block in one view.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct QuorumCertificate {
    pub view: u64,
    pub instance: u32,
    pub height: u64,
    pub block_digest: Digest,
    pub flavor: Flavor,
    /// Sorted by replica id.
    pub votes: Vec<(ReplicaId, UsigCertificate)>,
}

impl QuorumCertificate {
    pub fn context(&self) -> Digest {
        vote_context(self.view, self.instance, self.height, &self.block_digest)
    }

    /// Ordering used to pick the highest certificate: view first, then height.
    pub fn rank(&self) -> (u64, u64) {
        (self.view, self.height)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Propose {
    pub view: u64,
    pub sender: ReplicaId,
    pub block: Block,
    /// Certificate for the parent block, if the parent exists.
    pub justify: Option<QuorumCertificate>,
    /// Attests `vote_context(view, block.instance, block.height, digest(block))`.
    pub ui: UsigCertificate,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Vote {
    pub view: u64,
    pub sender: ReplicaId,
    pub instance: u32,
    pub height: u64,
    pub block_digest: Digest,
    pub proposer_ui: UsigCertificate,
    pub voter_ui: UsigCertificate,
}

impl Vote {
    pub fn context(&self) -> Digest {
        vote_context(self.view, self.instance, self.height, &self.block_digest)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CertBroadcast {
    pub view: u64,
    pub sender: ReplicaId,
    pub certificate: QuorumCertificate,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Prepare {
    pub view: u64,
    pub sender: ReplicaId,
    pub batch: Vec<Command>,
    pub ui: UsigCertificate,
}

impl Prepare {
    pub fn attested_digest(view: u64, sender: ReplicaId, batch: &[Command]) -> Digest {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"duobft-prepare");
        view.encode(&mut buf);
        sender.encode(&mut buf);
        (batch.len() as u32).encode(&mut buf);
        for c in batch {
            c.encode(&mut buf);
        }
        hash(&buf)
    }

    pub fn digest(&self) -> Digest {
        Self::attested_digest(self.view, self.sender, &self.batch)
    }
}

/// A replica's endorsement of a primary's prepare. Carries the prepare so
/// that receivers can process it even if the prepare itself is late.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Commit {
    pub view: u64,
    pub sender: ReplicaId,
    pub prepare: Prepare,
    pub ui: UsigCertificate,
}

impl Commit {
    pub fn attested_digest(view: u64, sender: ReplicaId, primary_ui: &UsigCertificate) -> Digest {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"duobft-commit");
        view.encode(&mut buf);
        sender.encode(&mut buf);
        primary_ui.encode(&mut buf);
        hash(&buf)
    }

    pub fn digest(&self) -> Digest {
        Self::attested_digest(self.view, self.sender, &self.prepare.ui)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ReqViewChange {
    pub sender: ReplicaId,
    pub old_view: u64,
    pub new_view: u64,
    pub signature: Signature,
}

impl ReqViewChange {
    pub fn signed_bytes(sender: ReplicaId, old_view: u64, new_view: u64) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"duobft-reqvc");
        sender.encode(&mut buf);
        old_view.encode(&mut buf);
        new_view.encode(&mut buf);
        buf
    }
}

/// A block a replica holds, with whatever certificates it holds for it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ChainEntry {
    pub block: Block,
    /// View in which the block was proposed.
    pub view: u64,
    /// The proposer's attestation of `vote_context(view, ..)`.
    pub proposal_ui: UsigCertificate,
    pub hybrid: Option<QuorumCertificate>,
    pub bft: Option<QuorumCertificate>,
}

/// An attested message a replica generated, as recorded in its view-change log.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum LogEntry {
    Prepare(Prepare),
    Commit(Commit),
    /// View-change traffic; only the certificate is needed to account for the counter.
    Other(UsigCertificate),
    /// A prepare executed on installing a new view. Carries the primary's
    /// attestation, not the reporter's, and takes no counter of its own.
    Adopted(Prepare),
}

impl LogEntry {
    pub fn ui(&self) -> &UsigCertificate {
        match self {
            LogEntry::Prepare(p) | LogEntry::Adopted(p) => &p.ui,
            LogEntry::Commit(c) => &c.ui,
            LogEntry::Other(ui) => ui,
        }
    }

    /// Whether the entry consumed one of the reporter's own counters.
    pub fn is_own(&self) -> bool {
        !matches!(self, LogEntry::Adopted(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ViewChangeLog {
    /// Per-lane chains held by a DuoBFT replica.
    Chains(Vec<Vec<ChainEntry>>),
    /// Every attested message a MinBFT replica has generated, in counter order.
    Messages(Vec<LogEntry>),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ViewChange {
    pub sender: ReplicaId,
    pub new_view: u64,
    pub log: ViewChangeLog,
    pub ui: UsigCertificate,
}

impl ViewChange {
    pub fn attested_digest(sender: ReplicaId, new_view: u64, log: &ViewChangeLog) -> Digest {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"duobft-viewchange");
        sender.encode(&mut buf);
        new_view.encode(&mut buf);
        log.encode(&mut buf);
        hash(&buf)
    }

    pub fn digest(&self) -> Digest {
        Self::attested_digest(self.sender, self.new_view, &self.log)
    }
}

/// The sequence `S` a new primary installs.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Adopted {
    Chains(Vec<Vec<ChainEntry>>),
    Prepares(Vec<Prepare>),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NewView {
    pub sender: ReplicaId,
    pub new_view: u64,
    pub view_changes: Vec<ViewChange>,
    pub adopted: Adopted,
    pub ui: UsigCertificate,
}

impl NewView {
    pub fn attested_digest(sender: ReplicaId, new_view: u64, view_changes: &[ViewChange], adopted: &Adopted) -> Digest {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"duobft-newview");
        sender.encode(&mut buf);
        new_view.encode(&mut buf);
        (view_changes.len() as u32).encode(&mut buf);
        for vc in view_changes {
            vc.ui.encode(&mut buf);
        }
        adopted.encode(&mut buf);
        hash(&buf)
    }

    pub fn digest(&self) -> Digest {
        Self::attested_digest(self.sender, self.new_view, &self.view_changes, &self.adopted)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ClientRequest {
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ClientReply {
    pub replica: ReplicaId,
    pub command: CommandId,
    pub model: FaultModel,
    pub result: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ProtocolMessage {
    Propose(Propose),
    Vote(Vote),
    CertBroadcast(CertBroadcast),
    Prepare(Prepare),
    Commit(Commit),
    ReqViewChange(ReqViewChange),
    ViewChange(ViewChange),
    NewView(NewView),
    ClientRequest(ClientRequest),
    ClientReply(ClientReply),
}

impl ProtocolMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            ProtocolMessage::Propose(_) => "propose",
            ProtocolMessage::Vote(_) => "vote",
            ProtocolMessage::CertBroadcast(_) => "cert",
            ProtocolMessage::Prepare(_) => "prepare",
            ProtocolMessage::Commit(_) => "commit",
            ProtocolMessage::ReqViewChange(_) => "req-view-change",
            ProtocolMessage::ViewChange(_) => "view-change",
            ProtocolMessage::NewView(_) => "new-view",
            ProtocolMessage::ClientRequest(_) => "request",
            ProtocolMessage::ClientReply(_) => "reply",
        }
    }

    /// Messages that belong to the view-change subprotocol.
    pub fn is_view_change(&self) -> bool {
        matches!(
            self,
            ProtocolMessage::ReqViewChange(_) | ProtocolMessage::ViewChange(_) | ProtocolMessage::NewView(_)
        )
    }
}

// ---- canonical encoding ----

macro_rules! enum_codec {
    ($t:ty, $what:literal, { $($v:path = $n:literal),* $(,)? }) => {
        impl Encode for $t {
            fn encode(&self, out: &mut Vec<u8>) {
                out.push(match self { $($v => $n),* });
            }
        }
        impl Decode for $t {
            fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
                match r.u8()? {
                    $($n => Ok($v),)*
                    tag => Err(DecodeError::BadTag { what: $what, tag }),
                }
            }
        }
    };
}

enum_codec!(FaultModel, "fault model", { FaultModel::Hybrid = 0, FaultModel::Bft = 1 });
enum_codec!(ResponseModel, "response model", {
    ResponseModel::Hybrid = 0, ResponseModel::Bft = 1, ResponseModel::Both = 2,
});
enum_codec!(Flavor, "flavor", { Flavor::Hybrid = 0, Flavor::Bft = 1 });

macro_rules! struct_codec {
    ($t:ident { $($f:ident : $ft:ty),* $(,)? }) => {
        impl Encode for $t {
            fn encode(&self, out: &mut Vec<u8>) {
                $(self.$f.encode(out);)*
            }
        }
        impl Decode for $t {
            fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
                Ok($t { $($f: <$ft>::decode(r)?,)* })
            }
        }
    };
}

impl Encode for ClientId {
    fn encode(&self, out: &mut Vec<u8>) {
        self.0.encode(out);
    }
}

impl Decode for ClientId {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(ClientId(u32::decode(r)?))
    }
}

impl Encode for Command {
    fn encode(&self, out: &mut Vec<u8>) {
        self.client.encode(out);
        self.sequence.encode(out);
        (self.payload.len() as u32).encode(out);
        out.extend_from_slice(&self.payload);
        self.response_model.encode(out);
    }
}

impl Decode for Command {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(Command {
            client: ClientId::decode(r)?,
            sequence: u64::decode(r)?,
            payload: Bytes::decode(r)?.0,
            response_model: ResponseModel::decode(r)?,
        })
    }
}

struct_codec!(CommandId {
    client: ClientId,
    sequence: u64
});
struct_codec!(Block { height: u64, parent: Option<Digest>, commands: Vec<Command>, instance: u32 });
struct_codec!(QuorumCertificate {
    view: u64,
    instance: u32,
    height: u64,
    block_digest: Digest,
    flavor: Flavor,
    votes: Vec<(ReplicaId, UsigCertificate)>,
});
struct_codec!(Propose {
    view: u64,
    sender: ReplicaId,
    block: Block,
    justify: Option<QuorumCertificate>,
    ui: UsigCertificate,
});
struct_codec!(Vote {
    view: u64,
    sender: ReplicaId,
    instance: u32,
    height: u64,
    block_digest: Digest,
    proposer_ui: UsigCertificate,
    voter_ui: UsigCertificate,
});
struct_codec!(CertBroadcast {
    view: u64,
    sender: ReplicaId,
    certificate: QuorumCertificate
});
struct_codec!(Prepare { view: u64, sender: ReplicaId, batch: Vec<Command>, ui: UsigCertificate });
struct_codec!(Commit {
    view: u64,
    sender: ReplicaId,
    prepare: Prepare,
    ui: UsigCertificate
});
struct_codec!(ReqViewChange {
    sender: ReplicaId,
    old_view: u64,
    new_view: u64,
    signature: Signature
});
struct_codec!(ChainEntry {
    block: Block,
    view: u64,
    proposal_ui: UsigCertificate,
    hybrid: Option<QuorumCertificate>,
    bft: Option<QuorumCertificate>,
});
struct_codec!(ViewChange {
    sender: ReplicaId,
    new_view: u64,
    log: ViewChangeLog,
    ui: UsigCertificate
});
struct_codec!(NewView {
    sender: ReplicaId,
    new_view: u64,
    view_changes: Vec<ViewChange>,
    adopted: Adopted,
    ui: UsigCertificate,
});
struct_codec!(ClientRequest { command: Command });
struct_codec!(ClientReply {
    replica: ReplicaId,
    command: CommandId,
    model: FaultModel,
    result: Digest
});

impl Encode for LogEntry {
    fn encode(&self, out: &mut Vec<u8>) {
        match self {
            LogEntry::Prepare(p) => {
                out.push(0);
                p.encode(out);
            }
            LogEntry::Commit(c) => {
                out.push(1);
                c.encode(out);
            }
            LogEntry::Other(ui) => {
                out.push(2);
                ui.encode(out);
            }
            LogEntry::Adopted(p) => {
                out.push(3);
                p.encode(out);
            }
        }
    }
}

impl Decode for LogEntry {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            0 => Ok(LogEntry::Prepare(Prepare::decode(r)?)),
            1 => Ok(LogEntry::Commit(Commit::decode(r)?)),
            2 => Ok(LogEntry::Other(UsigCertificate::decode(r)?)),
            3 => Ok(LogEntry::Adopted(Prepare::decode(r)?)),
            tag => Err(DecodeError::BadTag { what: "log entry", tag }),
        }
    }
}

impl Encode for ViewChangeLog {
    fn encode(&self, out: &mut Vec<u8>) {
        match self {
            ViewChangeLog::Chains(c) => {
                out.push(0);
                c.encode(out);
            }
            ViewChangeLog::Messages(m) => {
                out.push(1);
                m.encode(out);
            }
        }
    }
}

impl Decode for ViewChangeLog {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            0 => Ok(ViewChangeLog::Chains(Decode::decode(r)?)),
            1 => Ok(ViewChangeLog::Messages(Decode::decode(r)?)),
            tag => Err(DecodeError::BadTag {
                what: "view-change log",
                tag,
            }),
        }
    }
}

impl Encode for Adopted {
    fn encode(&self, out: &mut Vec<u8>) {
        match self {
            Adopted::Chains(c) => {
                out.push(0);
                c.encode(out);
            }
            Adopted::Prepares(p) => {
                out.push(1);
                p.encode(out);
            }
        }
    }
}

impl Decode for Adopted {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            0 => Ok(Adopted::Chains(Decode::decode(r)?)),
            1 => Ok(Adopted::Prepares(Decode::decode(r)?)),
            tag => Err(DecodeError::BadTag {
                what: "adopted sequence",
                tag,
            }),
        }
    }
}

impl Encode for ProtocolMessage {
    fn encode(&self, out: &mut Vec<u8>) {
        match self {
            ProtocolMessage::Propose(m) => {
                out.push(1);
                m.encode(out)
            }
            ProtocolMessage::Vote(m) => {
                out.push(2);
                m.encode(out)
            }
            ProtocolMessage::CertBroadcast(m) => {
                out.push(3);
                m.encode(out)
            }
            ProtocolMessage::Prepare(m) => {
                out.push(4);
                m.encode(out)
            }
            ProtocolMessage::Commit(m) => {
                out.push(5);
                m.encode(out)
            }
            ProtocolMessage::ReqViewChange(m) => {
                out.push(6);
                m.encode(out)
            }
            ProtocolMessage::ViewChange(m) => {
                out.push(7);
                m.encode(out)
            }
            ProtocolMessage::NewView(m) => {
                out.push(8);
                m.encode(out)
            }
            ProtocolMessage::ClientRequest(m) => {
                out.push(9);
                m.encode(out)
            }
            ProtocolMessage::ClientReply(m) => {
                out.push(10);
                m.encode(out)
            }
        }
    }
}

impl Decode for ProtocolMessage {
    fn decode(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(match r.u8()? {
            1 => ProtocolMessage::Propose(Decode::decode(r)?),
            2 => ProtocolMessage::Vote(Decode::decode(r)?),
            3 => ProtocolMessage::CertBroadcast(Decode::decode(r)?),
            4 => ProtocolMessage::Prepare(Decode::decode(r)?),
            5 => ProtocolMessage::Commit(Decode::decode(r)?),
            6 => ProtocolMessage::ReqViewChange(Decode::decode(r)?),
            7 => ProtocolMessage::ViewChange(Decode::decode(r)?),
            8 => ProtocolMessage::NewView(Decode::decode(r)?),
            9 => ProtocolMessage::ClientRequest(Decode::decode(r)?),
            10 => ProtocolMessage::ClientReply(Decode::decode(r)?),
            tag => return Err(DecodeError::BadTag { what: "message", tag }),
        })
    }
}

/// Canonical bytes of `msg`.
pub fn serialize(msg: &ProtocolMessage) -> Vec<u8> {
    msg.to_bytes()
}

pub fn deserialize(bytes: &[u8]) -> Result<ProtocolMessage, DecodeError> {
    ProtocolMessage::from_bytes(bytes)
}
