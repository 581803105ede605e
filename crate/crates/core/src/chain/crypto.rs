//! Signature schemes for ledger records.
//!
//! Two providers implement [`SignatureProvider`]:
//!
//! * [`KeyedHashSigner`]: SHA-256 over `secret || message`. The public key is
//!   the secret itself, so it authenticates only among parties that already
//!   share keys. It is cheap and deterministic, which is what simulations need.
//! * [`Ed25519Signer`]: real asymmetric signatures for realistic runs.

use std::collections::BTreeMap;
use std::fmt;

use ed25519_dalek::{Signer as _, Verifier as _};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest as _, Sha256};

use super::AgentId;
use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Eq)]
pub struct SecretKey(pub Vec<u8>);

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PublicKey(pub Vec<u8>);

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Signature(pub Vec<u8>);

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

#[derive(Debug, Clone)]
pub struct KeyPair {
    pub secret: SecretKey,
    pub public: PublicKey,
}

/// Known public keys, by agent.
pub type Keyring = BTreeMap<AgentId, PublicKey>;

pub trait SignatureProvider: Send + Sync {
    /// Derives a key pair deterministically from `seed`.
    fn keypair_from_seed(&self, seed: u64) -> KeyPair;

    fn sign(&self, secret: &SecretKey, message: &[u8]) -> Result<Signature>;

    fn verify(&self, public: &PublicKey, message: &[u8], signature: &Signature) -> bool;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct KeyedHashSigner;

impl KeyedHashSigner {
    fn tag(key: &[u8], message: &[u8]) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((key.len() as u64).to_le_bytes());
        h.update(key);
        h.update(message);
        h.finalize().into()
    }
}

impl SignatureProvider for KeyedHashSigner {
    fn keypair_from_seed(&self, seed: u64) -> KeyPair {
        let key = Sha256::digest([b"keyed-hash-seed".as_slice(), &seed.to_le_bytes()].concat());
        KeyPair {
            secret: SecretKey(key.to_vec()),
            public: PublicKey(key.to_vec()),
        }
    }

    fn sign(&self, secret: &SecretKey, message: &[u8]) -> Result<Signature> {
        if secret.0.is_empty() {
            return Err(Error::Signing("empty keyed-hash secret".into()));
        }
        Ok(Signature(Self::tag(&secret.0, message).to_vec()))
    }

    fn verify(&self, public: &PublicKey, message: &[u8], signature: &Signature) -> bool {
        !public.0.is_empty() && Self::tag(&public.0, message).as_slice() == signature.0
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Ed25519Signer;

impl SignatureProvider for Ed25519Signer {
    fn keypair_from_seed(&self, seed: u64) -> KeyPair {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let key = ed25519_dalek::SigningKey::generate(&mut rng);
        KeyPair {
            secret: SecretKey(key.to_bytes().to_vec()),
            public: PublicKey(key.verifying_key().to_bytes().to_vec()),
        }
    }

    fn sign(&self, secret: &SecretKey, message: &[u8]) -> Result<Signature> {
        let bytes: [u8; 32] = secret
            .0
            .as_slice()
            .try_into()
            .map_err(|_| Error::Signing("ed25519 secret must be 32 bytes".into()))?;
        let key = ed25519_dalek::SigningKey::from_bytes(&bytes);
        Ok(Signature(key.sign(message).to_bytes().to_vec()))
    }

    fn verify(&self, public: &PublicKey, message: &[u8], signature: &Signature) -> bool {
        let Ok(pk) = <[u8; 32]>::try_from(public.0.as_slice()) else {
            return false;
        };
        let Ok(vk) = ed25519_dalek::VerifyingKey::from_bytes(&pk) else {
            return false;
        };
        let Ok(sig) = ed25519_dalek::Signature::from_slice(&signature.0) else {
            return false;
        };
        vk.verify(message, &sig).is_ok()
    }
}
