//! Flexible hybrid quorum thresholds and certificate assembly.
//!
//! Every parameter set satisfies `commit_hybrid > f` and
//! `view_change + commit_hybrid > n`, so any commit quorum intersects any
//! view-change quorum.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::crypto::{Digest, PublicKey, ReplicaId};
use crate::messages::{vote_context, Flavor, QuorumCertificate};
use crate::usig::{UsigCertificate, VerifyCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuorumParams {
    pub n: usize,
    pub f: usize,
    pub commit_hybrid: usize,
    pub commit_bft: Option<usize>,
    pub view_change: usize,
    pub req_view_change: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum QuorumError {
    #[error("at least one tolerated fault is required (f = {0})")]
    NoFaults(usize),
    #[error("commit quorum f+1 = {commit} unattainable with n = {n}, f = {f}")]
    Unattainable { n: usize, f: usize, commit: usize },
    #[error("votes reference different blocks")]
    MixedVotes,
    #[error("certificate flavor {0:?} has no threshold in this configuration")]
    NoThreshold(Flavor),
}

impl QuorumParams {
    fn checked(self) -> Self {
        debug_assert!(self.commit_hybrid > self.f);
        debug_assert!(self.view_change + self.commit_hybrid > self.n);
        debug_assert!(self.view_change <= self.n - self.f);
        debug_assert!(self.commit_bft.is_none_or(|q| q <= self.n - self.f));
        self
    }

    pub fn threshold(&self, flavor: Flavor) -> Option<usize> {
        match flavor {
            Flavor::Hybrid => Some(self.commit_hybrid),
            Flavor::Bft => self.commit_bft,
        }
    }

    /// `|Q_c| > f` and `|Q_vc| + |Q_c| > N`.
    pub fn satisfies_intersection(&self) -> bool {
        self.commit_hybrid > self.f && self.view_change + self.commit_hybrid > self.n
    }

    /// True iff every quorum can be formed by the `n - f` correct replicas.
    pub fn attainable(&self) -> bool {
        let live = self.n.saturating_sub(self.f);
        self.commit_hybrid <= live
            && self.view_change <= live
            && self.req_view_change <= live
            && self.commit_bft.is_none_or(|q| q <= live)
    }
}

/// DuoBFT: `n = 3f+1`, hybrid `f+1`, BFT `2f+1`, view change `2f+1`.
pub fn duobft_params(f: usize) -> Result<QuorumParams, QuorumError> {
    if f < 1 {
        return Err(QuorumError::NoFaults(f));
    }
    Ok(QuorumParams {
        n: 3 * f + 1,
        f,
        commit_hybrid: f + 1,
        commit_bft: Some(2 * f + 1),
        view_change: 2 * f + 1,
        req_view_change: f + 1,
    }
    .checked())
}

/// Flexible MinBFT: commit `f+1`, view change `n-f`.
pub fn flexminbft_params(n: usize, f: usize) -> Result<QuorumParams, QuorumError> {
    if f < 1 {
        return Err(QuorumError::NoFaults(f));
    }
    if f + 1 > n.saturating_sub(f) {
        return Err(QuorumError::Unattainable { n, f, commit: f + 1 });
    }
    Ok(QuorumParams {
        n,
        f,
        commit_hybrid: f + 1,
        commit_bft: None,
        view_change: n - f,
        req_view_change: f + 1,
    }
    .checked())
}

/// One attested endorsement of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Ballot {
    pub view: u64,
    pub instance: u32,
    pub height: u64,
    pub block_digest: Digest,
    pub replica: ReplicaId,
    pub ui: UsigCertificate,
}

fn ballot_valid(
    context: &Digest,
    replica: ReplicaId,
    ui: &UsigCertificate,
    keys: &[PublicKey],
    cache: &mut VerifyCache,
) -> bool {
    ui.replica == replica
        && keys
            .get(replica.index())
            .is_some_and(|pk| cache.verify(pk, context, ui))
}

/// Builds a certificate of `flavor` once enough distinct replicas have valid
/// ballots. Invalid ballots are skipped; duplicates count once.
pub fn try_assemble(
    ballots: &[Ballot],
    flavor: Flavor,
    params: &QuorumParams,
    keys: &[PublicKey],
) -> Result<Option<QuorumCertificate>, QuorumError> {
    try_assemble_cached(ballots, flavor, params, keys, &mut VerifyCache::new())
}

pub fn try_assemble_cached(
    ballots: &[Ballot],
    flavor: Flavor,
    params: &QuorumParams,
    keys: &[PublicKey],
    cache: &mut VerifyCache,
) -> Result<Option<QuorumCertificate>, QuorumError> {
    let threshold = params.threshold(flavor).ok_or(QuorumError::NoThreshold(flavor))?;
    let Some(first) = ballots.first() else {
        return Ok(None);
    };
    let key = (first.view, first.instance, first.height, first.block_digest);
    if ballots
        .iter()
        .any(|b| (b.view, b.instance, b.height, b.block_digest) != key)
    {
        return Err(QuorumError::MixedVotes);
    }
    let context = vote_context(key.0, key.1, key.2, &key.3);
    let mut votes: BTreeMap<ReplicaId, UsigCertificate> = BTreeMap::new();
    for b in ballots {
        if votes.contains_key(&b.replica) {
            continue;
        }
        if ballot_valid(&context, b.replica, &b.ui, keys, cache) {
            votes.insert(b.replica, b.ui);
        }
    }
    if votes.len() < threshold {
        return Ok(None);
    }
    Ok(Some(QuorumCertificate {
        view: key.0,
        instance: key.1,
        height: key.2,
        block_digest: key.3,
        flavor,
        votes: votes.into_iter().take(threshold).collect(),
    }))
}

/// True iff `cert` has enough distinct, verifying votes for its flavor.
pub fn validate_certificate(cert: &QuorumCertificate, params: &QuorumParams, keys: &[PublicKey]) -> bool {
    validate_certificate_cached(cert, params, keys, &mut VerifyCache::new())
}

pub fn validate_certificate_cached(
    cert: &QuorumCertificate,
    params: &QuorumParams,
    keys: &[PublicKey],
    cache: &mut VerifyCache,
) -> bool {
    let Some(threshold) = params.threshold(cert.flavor) else {
        return false;
    };
    if cert.votes.len() < threshold {
        return false;
    }
    // Strictly increasing ids imply distinctness.
    if cert.votes.windows(2).any(|w| w[0].0 >= w[1].0) {
        return false;
    }
    let context = cert.context();
    cert.votes
        .iter()
        .all(|(r, ui)| ballot_valid(&context, *r, ui, keys, cache))
}

/// Replica sets of size `k` drawn from `0..n`, as bitmasks.
pub fn subsets_of_size(n: usize, k: usize) -> Vec<u32> {
    (0u32..(1u32 << n)).filter(|m| m.count_ones() as usize == k).collect()
}
