// SPDX-License-Identifier: Apache-2.0

//! Key generation, digests and detached signatures.
//!
//! The signature suite is ECDSA over P-256 with SHA-256 and RFC 6979
//! deterministic nonces, so identical inputs always yield identical
//! signatures. Keys are derived from 32-byte seeds for reproducible runs.

use std::fmt;

use p256::ecdsa::signature::{Signer, Verifier};
use p256::ecdsa::{SigningKey, VerifyingKey};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::messages::{EnvelopeHeader, EnvelopeProfile, SignedEnvelope};

/// COSE algorithm identifier for ECDSA P-256 with SHA-256.
pub const ALG_ES256: i64 = -7;

pub const PUBLIC_KEY_LEN: usize = 33;
pub const SIGNATURE_LEN: usize = 64;
pub const KEY_ID_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("seed must be exactly 32 bytes, got {0}")]
    BadSeedLength(usize),
    #[error("refusing to sign an empty payload")]
    EmptyPayload,
}

/// SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", hex::encode(&self.0[..8]))
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

pub fn digest(bytes: &[u8]) -> Digest {
    Digest(Sha256::digest(bytes).into())
}

/// Digest over the concatenation of several parts.
pub fn digest_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    Digest(h.finalize().into())
}

/// SEC1 compressed P-256 point.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PublicKey(pub [u8; PUBLIC_KEY_LEN]);

impl PublicKey {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn key_id(&self) -> KeyId {
        let d = digest(&self.0);
        let mut id = [0u8; KEY_ID_LEN];
        id.copy_from_slice(&d.0[..KEY_ID_LEN]);
        KeyId(id)
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", hex::encode(&self.0[..9]))
    }
}

/// First eight bytes of the public-key digest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct KeyId(pub [u8; KEY_ID_LEN]);

impl fmt::Debug for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyId({})", hex::encode(self.0))
    }
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

/// Fixed-size `r || s` signature.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature(pub [u8; SIGNATURE_LEN]);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({}..)", hex::encode(&self.0[..8]))
    }
}

#[derive(Clone)]
pub struct KeyPair {
    secret: SigningKey,
    public: PublicKey,
    key_id: KeyId,
}

impl KeyPair {
    pub fn public_key(&self) -> PublicKey {
        self.public
    }

    pub fn key_id(&self) -> KeyId {
        self.key_id
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        let sig: p256::ecdsa::Signature = self.secret.sign(message);
        let mut out = [0u8; SIGNATURE_LEN];
        out.copy_from_slice(&sig.to_bytes());
        Signature(out)
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("key_id", &self.key_id)
            .finish_non_exhaustive()
    }
}

impl PartialEq for KeyPair {
    fn eq(&self, other: &Self) -> bool {
        self.public == other.public
    }
}

impl Eq for KeyPair {}

/// Derives a key pair from a 32-byte seed.
///
/// The seed is hashed with a counter until it yields a valid scalar, so every
/// seed maps to exactly one key pair.
pub fn generate_key_pair(seed: &[u8]) -> Result<KeyPair, CryptoError> {
    if seed.len() != 32 {
        return Err(CryptoError::BadSeedLength(seed.len()));
    }
    let mut counter = 0u32;
    let secret = loop {
        let candidate = digest_parts(&[b"keygen", seed, &counter.to_be_bytes()]);
        if let Ok(sk) = SigningKey::from_bytes(&candidate.0.into()) {
            break sk;
        }
        counter += 1;
    };
    let point = VerifyingKey::from(&secret).to_encoded_point(true);
    let mut public = [0u8; PUBLIC_KEY_LEN];
    public.copy_from_slice(point.as_bytes());
    let public = PublicKey(public);
    Ok(KeyPair {
        secret,
        key_id: public.key_id(),
        public,
    })
}

/// Verifies a detached signature. Malformed keys or signatures yield `false`.
pub fn verify(public_key: &PublicKey, message: &[u8], signature: &Signature) -> bool {
    let Ok(vk) = VerifyingKey::from_sec1_bytes(&public_key.0) else {
        return false;
    };
    let Ok(sig) = p256::ecdsa::Signature::from_slice(&signature.0) else {
        return false;
    };
    vk.verify(message, &sig).is_ok()
}

/// Checks that `bytes` decode to a point on the curve.
pub fn is_valid_public_key(bytes: &[u8]) -> bool {
    VerifyingKey::from_sec1_bytes(bytes).is_ok()
}

pub fn sign_envelope(
    key: &KeyPair,
    profile: EnvelopeProfile,
    payload: &[u8],
) -> Result<SignedEnvelope, CryptoError> {
    if payload.is_empty() {
        return Err(CryptoError::EmptyPayload);
    }
    let header = EnvelopeHeader {
        algorithm: ALG_ES256,
        signer: key.key_id(),
        profile,
    };
    let signature = key.sign(&SignedEnvelope::signing_input(&header, payload));
    Ok(SignedEnvelope {
        header,
        payload: payload.to_vec(),
        signature,
    })
}

/// True iff `env` carries a valid signature by `public_key` over its header
/// and payload, and the header names that key and the supported algorithm.
pub fn verify_envelope(public_key: &PublicKey, env: &SignedEnvelope) -> bool {
    env.header.algorithm == ALG_ES256
        && env.header.signer == public_key.key_id()
        && verify(
            public_key,
            &SignedEnvelope::signing_input(&env.header, &env.payload),
            &env.signature,
        )
}
