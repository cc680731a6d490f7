// SPDX-License-Identifier: Apache-2.0

//! Abstract authenticated channel.
//!
//! Stands in for a DTLS or EDHOC handshake: three messages carrying both
//! parties' certificate chains, fresh random contributions and signatures
//! over the transcript. Each side verifies the other's chain against its own
//! trust store. Established sessions exchange records carrying a sequence
//! number and an integrity tag; a record is accepted at most once.
//!
//! ```text
//! initiator                               responder
//!   ClientHello { id, cert, chain, r_i } ->
//!                <- ServerHello { id, cert, chain, r_r, sig_r(transcript) }
//!   Finished { id, sig_i(transcript) }   ->
//! ```
//!
//! No payload encryption happens here; the simulator keeps record payloads
//! away from observers instead.

use std::fmt;

use ciborium::value::Value;
use rand::RngCore;
use thiserror::Error;

use crate::codec::{self, CodecError, Fields, WireCodec};
use crate::crypto::{self, digest_parts, Digest, KeyPair, Signature};
use crate::messages::TimeStamp;
use crate::pki::{verify_chain, ChainFailure, CompactCertificate, RevocationView, TrustStore};

pub type SessionId = [u8; 8];

/// A certificate, the intermediates needed to verify it, and its key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Credential {
    pub key: KeyPair,
    pub certificate: CompactCertificate,
    pub chain: Vec<CompactCertificate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Initiator,
    Responder,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Initiator => "initiator",
            Side::Responder => "responder",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SessionError {
    /// `side` could not verify its peer's certificate chain.
    #[error("{side} rejected peer: {reason}")]
    PeerUntrusted { side: Side, reason: ChainFailure },
    /// The peer's transcript signature does not verify.
    #[error("{side} rejected peer proof of key possession")]
    BadProof { side: Side },
    #[error("handshake message does not belong to this session")]
    HandshakeMismatch,
    #[error("record sequence {seq} not above last accepted {last}")]
    ReplayDetected { seq: u64, last: u64 },
    #[error("record belongs to another session")]
    WrongSession,
    #[error("record integrity tag mismatch")]
    RecordIntegrity,
    #[error("session is not established")]
    NotEstablished,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientHello {
    pub session_id: SessionId,
    pub certificate: CompactCertificate,
    pub chain: Vec<CompactCertificate>,
    pub random: [u8; 32],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerHello {
    pub session_id: SessionId,
    pub certificate: CompactCertificate,
    pub chain: Vec<CompactCertificate>,
    pub random: [u8; 32],
    pub proof: Signature,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Finished {
    pub session_id: SessionId,
    pub proof: Signature,
}

/// One protected message inside a session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionRecord {
    pub session_id: SessionId,
    pub seq: u64,
    pub payload: Vec<u8>,
    pub tag: [u8; 32],
}

impl WireCodec for ClientHello {
    fn to_value(&self) -> Value {
        Value::Array(vec![
            codec::bytes(&self.session_id),
            self.certificate.to_value(),
            codec::array_of(&self.chain),
            codec::bytes(&self.random),
        ])
    }

    fn from_value(value: Value) -> Result<Self, CodecError> {
        let mut f = Fields::open(value, 4, "client hello")?;
        Ok(ClientHello {
            session_id: f.fixed()?,
            certificate: CompactCertificate::from_value(f.next())?,
            chain: codec::decode_array_of(f.array()?)?,
            random: f.fixed()?,
        })
    }
}

impl ServerHello {
    fn tbs_value(&self) -> Value {
        Value::Array(vec![
            codec::bytes(&self.session_id),
            self.certificate.to_value(),
            codec::array_of(&self.chain),
            codec::bytes(&self.random),
        ])
    }
}

impl WireCodec for ServerHello {
    fn to_value(&self) -> Value {
        let Value::Array(mut items) = self.tbs_value() else {
            unreachable!("tbs_value builds an array")
        };
        items.push(codec::bytes(&self.proof.0));
        Value::Array(items)
    }

    fn from_value(value: Value) -> Result<Self, CodecError> {
        let mut f = Fields::open(value, 5, "server hello")?;
        Ok(ServerHello {
            session_id: f.fixed()?,
            certificate: CompactCertificate::from_value(f.next())?,
            chain: codec::decode_array_of(f.array()?)?,
            random: f.fixed()?,
            proof: Signature(f.fixed()?),
        })
    }
}

impl WireCodec for Finished {
    fn to_value(&self) -> Value {
        Value::Array(vec![
            codec::bytes(&self.session_id),
            codec::bytes(&self.proof.0),
        ])
    }

    fn from_value(value: Value) -> Result<Self, CodecError> {
        let mut f = Fields::open(value, 2, "finished")?;
        Ok(Finished {
            session_id: f.fixed()?,
            proof: Signature(f.fixed()?),
        })
    }
}

impl WireCodec for SessionRecord {
    fn to_value(&self) -> Value {
        Value::Array(vec![
            codec::bytes(&self.session_id),
            codec::uint(self.seq),
            codec::bytes(&self.payload),
            codec::bytes(&self.tag),
        ])
    }

    fn from_value(value: Value) -> Result<Self, CodecError> {
        let mut f = Fields::open(value, 4, "session record")?;
        Ok(SessionRecord {
            session_id: f.fixed()?,
            seq: f.uint()?,
            payload: f.bytes()?,
            tag: f.fixed()?,
        })
    }
}

/// One endpoint's view of an established channel.
#[derive(Debug, Clone)]
pub struct AuthenticatedSession {
    local_certificate: CompactCertificate,
    peer_certificate: CompactCertificate,
    session_id: SessionId,
    side: Side,
    send_seq: u64,
    recv_seq: u64,
    established: bool,
    key_fingerprint: Digest,
    mac_key: Digest,
}

impl AuthenticatedSession {
    fn new(
        side: Side,
        session_id: SessionId,
        local: &CompactCertificate,
        peer: &CompactCertificate,
        shared: Digest,
    ) -> Self {
        AuthenticatedSession {
            local_certificate: local.clone(),
            peer_certificate: peer.clone(),
            session_id,
            side,
            send_seq: 0,
            recv_seq: 0,
            established: true,
            key_fingerprint: digest_parts(&[b"fingerprint", &shared.0]),
            mac_key: digest_parts(&[b"record-mac", &shared.0]),
        }
    }

    /// A session object that never completed its handshake.
    pub fn unauthenticated(
        local: &CompactCertificate,
        peer: &CompactCertificate,
        session_id: SessionId,
    ) -> Self {
        AuthenticatedSession {
            established: false,
            ..AuthenticatedSession::new(Side::Initiator, session_id, local, peer, Digest([0; 32]))
        }
    }

    pub fn session_id(&self) -> SessionId {
        self.session_id
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn is_established(&self) -> bool {
        self.established
    }

    pub fn local_certificate(&self) -> &CompactCertificate {
        &self.local_certificate
    }

    pub fn peer_certificate(&self) -> &CompactCertificate {
        &self.peer_certificate
    }

    pub fn key_fingerprint(&self) -> Digest {
        self.key_fingerprint
    }

    pub fn send_seq(&self) -> u64 {
        self.send_seq
    }

    pub fn recv_seq(&self) -> u64 {
        self.recv_seq
    }

    fn tag(&self, sender: Side, seq: u64, payload: &[u8]) -> [u8; 32] {
        let direction = [sender as u8];
        digest_parts(&[
            b"record",
            &self.mac_key.0,
            &self.session_id,
            &direction,
            &seq.to_be_bytes(),
            payload,
        ])
        .0
    }

    pub fn send(&mut self, payload: &[u8]) -> Result<SessionRecord, SessionError> {
        if !self.established {
            return Err(SessionError::NotEstablished);
        }
        self.send_seq += 1;
        Ok(SessionRecord {
            session_id: self.session_id,
            seq: self.send_seq,
            payload: payload.to_vec(),
            tag: self.tag(self.side, self.send_seq, payload),
        })
    }

    pub fn receive(&mut self, record: &SessionRecord) -> Result<Vec<u8>, SessionError> {
        if !self.established {
            return Err(SessionError::NotEstablished);
        }
        if record.session_id != self.session_id {
            return Err(SessionError::WrongSession);
        }
        let sender = match self.side {
            Side::Initiator => Side::Responder,
            Side::Responder => Side::Initiator,
        };
        if record.tag != self.tag(sender, record.seq, &record.payload) {
            return Err(SessionError::RecordIntegrity);
        }
        if record.seq <= self.recv_seq {
            return Err(SessionError::ReplayDetected {
                seq: record.seq,
                last: self.recv_seq,
            });
        }
        self.recv_seq = record.seq;
        Ok(record.payload.clone())
    }
}

/// Initiator state between sending `ClientHello` and receiving `ServerHello`.
#[derive(Debug, Clone)]
pub struct InitiatorHandshake {
    session_id: SessionId,
    hello_digest: Digest,
}

/// Responder state between sending `ServerHello` and receiving `Finished`.
#[derive(Debug, Clone)]
pub struct ResponderHandshake {
    session_id: SessionId,
    hello_digest: Digest,
    server_hello_bytes: Vec<u8>,
    local: CompactCertificate,
    peer: CompactCertificate,
}

impl ResponderHandshake {
    pub fn session_id(&self) -> SessionId {
        self.session_id
    }

    pub fn peer_certificate(&self) -> &CompactCertificate {
        &self.peer
    }
}

impl InitiatorHandshake {
    pub fn session_id(&self) -> SessionId {
        self.session_id
    }
}

fn hello_digest(hello: &ClientHello) -> Digest {
    digest_parts(&[b"client-hello", &codec::to_bytes(&hello.to_value())])
}

fn responder_proof_input(hello_digest: &Digest, server: &ServerHello) -> Vec<u8> {
    let mut input = b"responder".to_vec();
    input.extend_from_slice(&hello_digest.0);
    input.extend_from_slice(&codec::to_bytes(&server.tbs_value()));
    input
}

fn initiator_proof_input(hello_digest: &Digest, server_hello_bytes: &[u8]) -> Vec<u8> {
    let mut input = b"initiator".to_vec();
    input.extend_from_slice(&hello_digest.0);
    input.extend_from_slice(&crypto::digest(server_hello_bytes).0);
    input
}

fn shared_secret(hello_digest: &Digest, server_hello_bytes: &[u8]) -> Digest {
    digest_parts(&[b"shared", &hello_digest.0, server_hello_bytes])
}

pub fn initiate(
    credential: &Credential,
    rng: &mut impl RngCore,
) -> (InitiatorHandshake, ClientHello) {
    let mut session_id = [0u8; 8];
    rng.fill_bytes(&mut session_id);
    let mut random = [0u8; 32];
    rng.fill_bytes(&mut random);
    let hello = ClientHello {
        session_id,
        certificate: credential.certificate.clone(),
        chain: credential.chain.clone(),
        random,
    };
    let state = InitiatorHandshake {
        session_id,
        hello_digest: hello_digest(&hello),
    };
    (state, hello)
}

pub fn respond(
    credential: &Credential,
    store: &TrustStore,
    now: TimeStamp,
    revocations: &RevocationView,
    hello: &ClientHello,
    rng: &mut impl RngCore,
) -> Result<(ResponderHandshake, ServerHello), SessionError> {
    verify_chain(&hello.certificate, &hello.chain, store, now, revocations).map_err(|reason| {
        SessionError::PeerUntrusted {
            side: Side::Responder,
            reason,
        }
    })?;
    let mut random = [0u8; 32];
    rng.fill_bytes(&mut random);
    let hello_digest = hello_digest(hello);
    let mut server = ServerHello {
        session_id: hello.session_id,
        certificate: credential.certificate.clone(),
        chain: credential.chain.clone(),
        random,
        proof: Signature([0; 64]),
    };
    server.proof = credential
        .key
        .sign(&responder_proof_input(&hello_digest, &server));
    let state = ResponderHandshake {
        session_id: hello.session_id,
        hello_digest,
        server_hello_bytes: codec::to_bytes(&server.to_value()),
        local: credential.certificate.clone(),
        peer: hello.certificate.clone(),
    };
    Ok((state, server))
}

impl InitiatorHandshake {
    pub fn finish(
        self,
        credential: &Credential,
        store: &TrustStore,
        now: TimeStamp,
        revocations: &RevocationView,
        server: &ServerHello,
    ) -> Result<(AuthenticatedSession, Finished), SessionError> {
        if server.session_id != self.session_id {
            return Err(SessionError::HandshakeMismatch);
        }
        verify_chain(&server.certificate, &server.chain, store, now, revocations).map_err(
            |reason| SessionError::PeerUntrusted {
                side: Side::Initiator,
                reason,
            },
        )?;
        if !crypto::verify(
            &server.certificate.subject_public_key,
            &responder_proof_input(&self.hello_digest, server),
            &server.proof,
        ) {
            return Err(SessionError::BadProof {
                side: Side::Initiator,
            });
        }
        let server_bytes = codec::to_bytes(&server.to_value());
        let finished = Finished {
            session_id: self.session_id,
            proof: credential
                .key
                .sign(&initiator_proof_input(&self.hello_digest, &server_bytes)),
        };
        let session = AuthenticatedSession::new(
            Side::Initiator,
            self.session_id,
            &credential.certificate,
            &server.certificate,
            shared_secret(&self.hello_digest, &server_bytes),
        );
        Ok((session, finished))
    }
}

impl ResponderHandshake {
    pub fn complete(self, finished: &Finished) -> Result<AuthenticatedSession, SessionError> {
        if finished.session_id != self.session_id {
            return Err(SessionError::HandshakeMismatch);
        }
        if !crypto::verify(
            &self.peer.subject_public_key,
            &initiator_proof_input(&self.hello_digest, &self.server_hello_bytes),
            &finished.proof,
        ) {
            return Err(SessionError::BadProof {
                side: Side::Responder,
            });
        }
        Ok(AuthenticatedSession::new(
            Side::Responder,
            self.session_id,
            &self.local,
            &self.peer,
            shared_secret(&self.hello_digest, &self.server_hello_bytes),
        ))
    }
}

/// Runs the full handshake in-process.
#[allow(clippy::too_many_arguments)]
pub fn establish(
    initiator: &Credential,
    responder: &Credential,
    initiator_store: &TrustStore,
    responder_store: &TrustStore,
    now: TimeStamp,
    initiator_revocations: &RevocationView,
    responder_revocations: &RevocationView,
    rng: &mut impl RngCore,
) -> Result<(AuthenticatedSession, AuthenticatedSession), SessionError> {
    let (pending, hello) = initiate(initiator, rng);
    let (responder_pending, server) = respond(
        responder,
        responder_store,
        now,
        responder_revocations,
        &hello,
        rng,
    )?;
    let (initiator_session, finished) = pending.finish(
        initiator,
        initiator_store,
        now,
        initiator_revocations,
        &server,
    )?;
    let responder_session = responder_pending.complete(&finished)?;
    Ok((initiator_session, responder_session))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::generate_key_pair;
    use crate::messages::Uri;
    use crate::pki::{CertProfile, CertificateAuthority};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    struct Fixture {
        store: TrustStore,
        client: Credential,
        server: Credential,
    }

    fn fixture() -> Fixture {
        let window = (TimeStamp(0), TimeStamp(1_000));
        let mut ca = CertificateAuthority::root(
            b"root",
            generate_key_pair(&[1; 32]).unwrap(),
            window,
            Uri::new("coaps://root").unwrap(),
        )
        .unwrap();
        let mut cred = |seed: u8, name: &[u8], profile| {
            let key = generate_key_pair(&[seed; 32]).unwrap();
            let certificate = ca
                .certify_key(name, key.public_key(), profile, window)
                .unwrap();
            Credential {
                key,
                certificate,
                chain: vec![],
            }
        };
        let client = cred(2, b"device", CertProfile::Operational);
        let server = cred(3, b"server", CertProfile::Server);
        Fixture {
            store: ca.trust_store().clone(),
            client,
            server,
        }
    }

    fn open(f: &Fixture, seed: u64) -> (AuthenticatedSession, AuthenticatedSession) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let none = RevocationView::new();
        establish(
            &f.client,
            &f.server,
            &f.store,
            &f.store,
            TimeStamp(10),
            &none,
            &none,
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn establish_agrees_on_fingerprint() {
        let f = fixture();
        let (c, s) = open(&f, 1);
        assert_eq!(c.session_id(), s.session_id());
        assert_eq!(c.key_fingerprint(), s.key_fingerprint());
        assert_eq!(s.peer_certificate(), &f.client.certificate);
        let (c2, _) = open(&f, 2);
        assert_ne!(c.key_fingerprint(), c2.key_fingerprint());
    }

    #[test]
    fn untrusted_peer_is_rejected_with_reason() {
        let f = fixture();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let none = RevocationView::new();
        let empty = TrustStore::new();
        let err = establish(
            &f.client,
            &f.server,
            &empty,
            &f.store,
            TimeStamp(10),
            &none,
            &none,
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            SessionError::PeerUntrusted {
                side: Side::Initiator,
                reason: ChainFailure::UnknownIssuer { .. }
            }
        ));
        let err = establish(
            &f.client,
            &f.server,
            &f.store,
            &empty,
            TimeStamp(10),
            &none,
            &none,
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            SessionError::PeerUntrusted {
                side: Side::Responder,
                ..
            }
        ));
    }

    #[test]
    fn stolen_certificate_without_key_fails_proof() {
        let f = fixture();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let none = RevocationView::new();
        let impostor = Credential {
            key: generate_key_pair(&[9; 32]).unwrap(),
            ..f.server.clone()
        };
        let err = establish(
            &f.client,
            &impostor,
            &f.store,
            &f.store,
            TimeStamp(10),
            &none,
            &none,
            &mut rng,
        )
        .unwrap_err();
        assert_eq!(
            err,
            SessionError::BadProof {
                side: Side::Initiator
            }
        );
    }

    #[test]
    fn records_are_accepted_once() {
        let f = fixture();
        let (mut c, mut s) = open(&f, 5);
        let r1 = c.send(b"hello").unwrap();
        assert_eq!(s.receive(&r1).unwrap(), b"hello");
        assert!(matches!(
            s.receive(&r1),
            Err(SessionError::ReplayDetected { seq: 1, last: 1 })
        ));
        let back = s.send(b"ack").unwrap();
        assert_eq!(c.receive(&back).unwrap(), b"ack");
    }

    #[test]
    fn reflected_record_is_rejected() {
        let f = fixture();
        let (mut c, _s) = open(&f, 6);
        let r = c.send(b"x").unwrap();
        assert_eq!(c.receive(&r), Err(SessionError::RecordIntegrity));
    }

    #[test]
    fn cross_session_replay_is_rejected() {
        let f = fixture();
        let (mut c1, _) = open(&f, 7);
        let (_, mut s2) = open(&f, 8);
        let r = c1.send(b"x").unwrap();
        assert_eq!(s2.receive(&r), Err(SessionError::WrongSession));
    }

    #[test]
    fn tampered_record_fails_integrity() {
        let f = fixture();
        let (mut c, mut s) = open(&f, 9);
        let mut r = c.send(b"payload").unwrap();
        r.payload[0] ^= 1;
        assert_eq!(s.receive(&r), Err(SessionError::RecordIntegrity));
    }

    #[test]
    fn unestablished_session_refuses_traffic() {
        let f = fixture();
        let mut s = AuthenticatedSession::unauthenticated(
            &f.server.certificate,
            &f.client.certificate,
            [0; 8],
        );
        assert_eq!(s.send(b"x"), Err(SessionError::NotEstablished));
    }

    #[test]
    fn handshake_messages_round_trip() {
        let f = fixture();
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let (_, hello) = initiate(&f.client, &mut rng);
        assert_eq!(
            ClientHello::decode(&hello.encode().unwrap()).unwrap(),
            hello
        );
        let none = RevocationView::new();
        let (_, server) =
            respond(&f.server, &f.store, TimeStamp(1), &none, &hello, &mut rng).unwrap();
        assert_eq!(
            ServerHello::decode(&server.encode().unwrap()).unwrap(),
            server
        );
    }
}
