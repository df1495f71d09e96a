//! Software emulation of the Unique Sequential Identifier Generator.
//!
//! An honest instance hands out counters 1, 2, 3, ... and signs each counter
//! together with the digest of the attested message. A compromised instance
//! models a broken trusted environment: it can be told to repeat or skip
//! counters and can forge certificates for arbitrary counters.

use alloc::collections::BTreeSet;
use alloc::rc::Rc;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::crypto::{hash, verify, Digest, KeyPair, PublicKey, ReplicaId, Signature};

/// `(counter, H(m))` signed by the instance key of `replica`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UsigCertificate {
    pub replica: ReplicaId,
    pub counter: u64,
    pub message_digest: Digest,
    pub signature: Signature,
}

impl UsigCertificate {
    fn signed_bytes(replica: ReplicaId, counter: u64, digest: &Digest) -> [u8; 48] {
        let mut out = [0u8; 48];
        out[..4].copy_from_slice(b"USIG");
        out[4..8].copy_from_slice(&replica.0.to_be_bytes());
        out[8..16].copy_from_slice(&counter.to_be_bytes());
        out[16..].copy_from_slice(&digest.0);
        out
    }
}

/// How a compromised instance picks counters for `create_ui`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CounterStrategy {
    /// Keeps counting normally; forgery is only used through [`UsigInstance::forge`].
    Sequential,
    /// Every call after the first reuses the previous counter.
    RepeatLast,
    /// Each call advances the counter by the given stride instead of one.
    Skip(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UsigMode {
    Honest,
    Compromised(CounterStrategy),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum UsigError {
    #[error("forging certificates requires a compromised USIG")]
    NotCompromised,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct UsigInstance {
    owner: ReplicaId,
    keypair: KeyPair,
    last_counter: u64,
    mode: UsigMode,
}

impl UsigInstance {
    pub fn new(owner: ReplicaId, keypair: KeyPair) -> Self {
        UsigInstance {
            owner,
            keypair,
            last_counter: 0,
            mode: UsigMode::Honest,
        }
    }

    pub fn owner(&self) -> ReplicaId {
        self.owner
    }

    pub fn public(&self) -> PublicKey {
        self.keypair.public()
    }

    /// Last issued counter; 0 before the first certificate.
    pub fn last_counter(&self) -> u64 {
        self.last_counter
    }

    pub fn mode(&self) -> UsigMode {
        self.mode
    }

    pub fn compromise(&mut self, strategy: CounterStrategy) {
        self.mode = UsigMode::Compromised(strategy);
    }

    pub fn is_compromised(&self) -> bool {
        matches!(self.mode, UsigMode::Compromised(_))
    }

    /// Attests `message`.
    pub fn create_ui(&mut self, message: &[u8]) -> UsigCertificate {
        self.create_ui_for_digest(hash(message))
    }

    /// Attests a message given its digest.
    pub fn create_ui_for_digest(&mut self, digest: Digest) -> UsigCertificate {
        let counter = match self.mode {
            UsigMode::Honest | UsigMode::Compromised(CounterStrategy::Sequential) => self.last_counter + 1,
            UsigMode::Compromised(CounterStrategy::RepeatLast) => self.last_counter.max(1),
            UsigMode::Compromised(CounterStrategy::Skip(stride)) => self.last_counter + stride.max(1),
        };
        self.last_counter = counter;
        self.sign_counter(counter, digest)
    }

    /// Signs an arbitrary counter without touching the internal counter.
    pub fn forge(&self, counter: u64, digest: Digest) -> Result<UsigCertificate, UsigError> {
        if !self.is_compromised() {
            return Err(UsigError::NotCompromised);
        }
        Ok(self.sign_counter(counter, digest))
    }

    fn sign_counter(&self, counter: u64, digest: Digest) -> UsigCertificate {
        let bytes = UsigCertificate::signed_bytes(self.owner, counter, &digest);
        UsigCertificate {
            replica: self.owner,
            counter,
            message_digest: digest,
            signature: self.keypair.sign(&bytes),
        }
    }
}

/// True iff `cert` was issued for `message` by the instance owning `public`.
pub fn verify_ui(public: &PublicKey, message: &[u8], cert: &UsigCertificate) -> bool {
    verify_ui_digest(public, &hash(message), cert)
}

/// [`verify_ui`] for callers that already hold the message digest.
pub fn verify_ui_digest(public: &PublicKey, digest: &Digest, cert: &UsigCertificate) -> bool {
    if cert.message_digest != *digest || cert.counter == 0 {
        return false;
    }
    let bytes = UsigCertificate::signed_bytes(cert.replica, cert.counter, digest);
    verify(public, &bytes, &cert.signature)
}

/// Memo of certificates that already passed signature verification.
///
/// Keys cover the verifying key and the full certificate including the
/// signature, so a tampered copy of a verified certificate is never accepted
/// from the cache. Clones share one memo: a verified signature stays valid
/// whichever copy of a replica state checked it.
#[derive(Debug, Clone, Default)]
pub struct VerifyCache {
    seen: Rc<RefCell<BTreeSet<[u8; 32]>>>,
}

impl VerifyCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(public: &PublicKey, digest: &Digest, cert: &UsigCertificate) -> [u8; 32] {
        let mut buf = Vec::with_capacity(32 + 32 + 48 + 64);
        buf.extend_from_slice(&public.0);
        buf.extend_from_slice(&digest.0);
        buf.extend_from_slice(&UsigCertificate::signed_bytes(
            cert.replica,
            cert.counter,
            &cert.message_digest,
        ));
        buf.extend_from_slice(&cert.signature.0);
        hash(&buf).0
    }

    pub fn verify(&mut self, public: &PublicKey, digest: &Digest, cert: &UsigCertificate) -> bool {
        let key = Self::key(public, digest, cert);
        if self.seen.borrow().contains(&key) {
            return true;
        }
        let ok = verify_ui_digest(public, digest, cert);
        if ok {
            self.seen.borrow_mut().insert(key);
        }
        ok
    }

    pub fn len(&self) -> usize {
        self.seen.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.borrow().is_empty()
    }
}

// Caches never influence protocol decisions, so they are invisible to state
// comparison and fingerprinting.
impl PartialEq for VerifyCache {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl Eq for VerifyCache {}

impl core::hash::Hash for VerifyCache {
    fn hash<H: core::hash::Hasher>(&self, _: &mut H) {}
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::keygen;

    fn instance(id: u32) -> UsigInstance {
        UsigInstance::new(ReplicaId(id), keygen(100 + id as u64))
    }

    #[test]
    fn counters_start_at_one_and_are_sequential() {
        let mut u = instance(0);
        assert_eq!(u.last_counter(), 0);
        assert_eq!(u.create_ui(b"a").counter, 1);
        assert_eq!(u.create_ui(b"b").counter, 2);
        assert_eq!(u.last_counter(), 2);
    }

    #[test]
    fn honest_instance_issues_exactly_one_to_n() {
        let mut u = instance(1);
        let counters: alloc::vec::Vec<u64> = (0..50u32).map(|i| u.create_ui(&i.to_be_bytes()).counter).collect();
        assert_eq!(counters, (1..=50).collect::<alloc::vec::Vec<_>>());
    }

    #[test]
    fn verify_round_trip_and_tamper() {
        let mut u = instance(2);
        let cert = u.create_ui(b"prepare");
        assert!(verify_ui(&u.public(), b"prepare", &cert));
        assert!(!verify_ui(&u.public(), b"prepare!", &cert));
        let mut bumped = cert;
        bumped.counter += 1;
        assert!(!verify_ui(&u.public(), b"prepare", &bumped));
        assert!(!verify_ui(&instance(3).public(), b"prepare", &cert));
    }

    #[test]
    fn repeat_last_reuses_counter_for_different_digests() {
        let mut u = instance(0);
        u.compromise(CounterStrategy::RepeatLast);
        let a = u.create_ui(b"block-a");
        let b = u.create_ui(b"block-b");
        assert_eq!((a.counter, b.counter), (1, 1));
        assert_ne!(a.message_digest, b.message_digest);
        // Both verify: the hybrid uniqueness guarantee is gone.
        assert!(verify_ui(&u.public(), b"block-a", &a));
        assert!(verify_ui(&u.public(), b"block-b", &b));
    }

    #[test]
    fn skip_strategy_leaves_holes() {
        let mut u = instance(0);
        u.compromise(CounterStrategy::Skip(3));
        assert_eq!(u.create_ui(b"x").counter, 3);
        assert_eq!(u.create_ui(b"y").counter, 6);
    }

    #[test]
    fn forge_requires_compromise() {
        let mut u = instance(0);
        assert_eq!(u.forge(1, hash(b"x")), Err(UsigError::NotCompromised));
        u.compromise(CounterStrategy::Sequential);
        let c = u.forge(1, hash(b"x")).unwrap();
        assert!(verify_ui(&u.public(), b"x", &c));
        assert_eq!(u.last_counter(), 0);
    }

    #[test]
    fn cache_rejects_tampered_copy() {
        let mut u = instance(4);
        let d = hash(b"m");
        let cert = u.create_ui_for_digest(d);
        let mut cache = VerifyCache::new();
        assert!(cache.verify(&u.public(), &d, &cert));
        assert!(cache.verify(&u.public(), &d, &cert));
        let mut forged = cert;
        forged.signature.0[0] ^= 1;
        assert!(!cache.verify(&u.public(), &d, &forged));
        assert!(!cache.verify(&u.public(), &hash(b"other"), &cert));
    }
}
