// SPDX-License-Identifier: Apache-2.0

//! Helpers shared by the integration test targets.
//!
//! `Ref` is a deliberately small CBOR writer that knows nothing about the
//! library's codec. Golden vectors are checked against it, so a change in
//! either the library or ciborium shows up as a byte mismatch.

#![allow(dead_code)]

use std::path::PathBuf;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use trust_transfer::codec::CodecError;
use trust_transfer::crypto::{generate_key_pair, KeyPair};
use trust_transfer::messages::{
    CertificateSigningRequest, DeviceUpdateInfo, Message, MessageKind, TimeStamp, TransferMessage,
    UpdateInfoList, Uri, VersionInfo,
};
use trust_transfer::pki::{CertProfile, CompactCertificate, TbsCertificate};

// ---------------------------------------------------------------------------
// Reference encoder

#[derive(Debug, Clone)]
pub enum Ref {
    U(u64),
    /// Negative integer, given as its (negative) value.
    N(i64),
    B(Vec<u8>),
    A(Vec<Ref>),
    M(Vec<(Ref, Ref)>),
    Bool(bool),
    Null,
}

fn head(major: u8, arg: u64, out: &mut Vec<u8>) {
    let m = major << 5;
    if arg < 24 {
        out.push(m | arg as u8);
    } else if arg <= 0xff {
        out.extend([m | 24, arg as u8]);
    } else if arg <= 0xffff {
        out.push(m | 25);
        out.extend((arg as u16).to_be_bytes());
    } else if arg <= 0xffff_ffff {
        out.push(m | 26);
        out.extend((arg as u32).to_be_bytes());
    } else {
        out.push(m | 27);
        out.extend(arg.to_be_bytes());
    }
}

impl Ref {
    pub fn bytes(b: &[u8]) -> Ref {
        Ref::B(b.to_vec())
    }

    pub fn write(&self, out: &mut Vec<u8>) {
        match self {
            Ref::U(v) => head(0, *v, out),
            Ref::N(v) => {
                assert!(*v < 0);
                head(1, (-1 - *v) as u64, out)
            }
            Ref::B(b) => {
                head(2, b.len() as u64, out);
                out.extend_from_slice(b);
            }
            Ref::A(items) => {
                head(4, items.len() as u64, out);
                for i in items {
                    i.write(out);
                }
            }
            Ref::M(entries) => {
                head(5, entries.len() as u64, out);
                for (k, v) in entries {
                    k.write(out);
                    v.write(out);
                }
            }
            Ref::Bool(false) => out.push(0xf4),
            Ref::Bool(true) => out.push(0xf5),
            Ref::Null => out.push(0xf6),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out);
        out
    }
}

pub fn ref_uri(u: &Uri) -> Ref {
    Ref::bytes(u.as_str().as_bytes())
}

pub fn ref_version(v: &VersionInfo) -> Ref {
    Ref::A(vec![Ref::U(v.manifest_sequence), ref_uri(&v.manifest_uri)])
}

pub fn ref_certificate(c: &CompactCertificate) -> Ref {
    let profile = match c.profile {
        CertProfile::RootCa => 0,
        CertProfile::SubCa => 1,
        CertProfile::Factory => 2,
        CertProfile::Operational => 3,
        CertProfile::Server => 4,
    };
    Ref::A(vec![
        Ref::U(c.serial),
        Ref::bytes(&c.subject_name),
        Ref::bytes(c.subject_public_key.as_bytes()),
        Ref::bytes(&c.issuer_name),
        Ref::U(c.not_before.0),
        Ref::U(c.not_after.0),
        Ref::U(profile),
        Ref::bytes(&c.signature.0),
    ])
}

pub fn ref_device_info(d: &DeviceUpdateInfo) -> Ref {
    Ref::A(vec![
        ref_certificate(&d.factory_certificate),
        Ref::U(d.update_not_before.0),
        Ref::U(d.update_not_after.0),
        ref_version(&d.version),
    ])
}

pub fn ref_list(l: &UpdateInfoList) -> Ref {
    Ref::A(l.entries.iter().map(ref_device_info).collect())
}

pub fn ref_transfer(t: &TransferMessage) -> Ref {
    Ref::A(vec![
        Ref::U(t.reset_not_before.0),
        Ref::U(t.reset_not_after.0),
        t.ra_uri.as_ref().map_or(Ref::Null, ref_uri),
        Ref::A(vec![
            ref_uri(&t.update_uri),
            Ref::Bool(t.contact_update_before_enroll),
        ]),
        ref_uri(&t.enroll_uri),
        ref_uri(&t.fallback_uri),
    ])
}

pub fn ref_csr(c: &CertificateSigningRequest) -> Ref {
    let profile = match c.requested_profile {
        CertProfile::Factory => 2,
        CertProfile::Operational => 3,
        other => panic!("csr profile {other:?}"),
    };
    Ref::A(vec![
        Ref::bytes(&c.subject_name),
        Ref::bytes(c.subject_public_key.as_bytes()),
        Ref::U(profile),
        Ref::bytes(&c.proof_of_possession.0),
    ])
}

// ---------------------------------------------------------------------------
// Fixtures

pub fn uri(s: &str) -> Uri {
    Uri::new(s).unwrap()
}

pub fn key(tag: u8) -> KeyPair {
    generate_key_pair(&[tag; 32]).unwrap()
}

/// The transfer message used throughout the examples.
pub fn example_transfer() -> TransferMessage {
    TransferMessage {
        reset_not_before: TimeStamp(1000),
        reset_not_after: TimeStamp(2000),
        ra_uri: None,
        update_uri: uri("coaps://u.sp2.ex"),
        contact_update_before_enroll: false,
        enroll_uri: uri("coaps://ca2.ex/est"),
        fallback_uri: uri("coaps://u.sp1.ex"),
    }
}

pub fn factory_cert(
    serial: u64,
    subject: &[u8],
    subject_key: &KeyPair,
    issuer: &KeyPair,
) -> CompactCertificate {
    TbsCertificate {
        serial,
        subject_name: subject.to_vec(),
        subject_public_key: subject_key.public_key(),
        issuer_name: b"permanent-ca".to_vec(),
        not_before: TimeStamp(0),
        not_after: TimeStamp(1_000_000_000),
        profile: CertProfile::Factory,
    }
    .sign(issuer)
}

pub fn device_info(serial: u64) -> DeviceUpdateInfo {
    let name = format!("dev-{serial:04}");
    DeviceUpdateInfo {
        factory_certificate: factory_cert(serial, name.as_bytes(), &key(serial as u8), &key(0xca)),
        update_not_before: TimeStamp(500),
        update_not_after: TimeStamp(5000),
        version: VersionInfo {
            manifest_sequence: 2,
            manifest_uri: uri("coaps://fw.sp1.example/2"),
        },
    }
}

// ---------------------------------------------------------------------------
// Random valid messages

fn rand_uri(rng: &mut impl Rng) -> Uri {
    let len = rng.gen_range(1..=64);
    let s: String = (0..len)
        .map(|_| {
            // Mostly ASCII with the odd multi-byte character.
            if rng.gen_ratio(1, 16) {
                'é'
            } else {
                rng.gen_range(b'!'..=b'~') as char
            }
        })
        .collect();
    Uri::new(s).unwrap()
}

fn rand_time_pair(rng: &mut impl Rng) -> (TimeStamp, TimeStamp) {
    // Spread values over every integer head width.
    let bits = rng.gen_range(0..64);
    let a = rng.gen::<u64>() >> bits;
    let b = rng.gen::<u64>() >> rng.gen_range(0..64);
    (TimeStamp(a.min(b)), TimeStamp(a.max(b)))
}

fn rand_version(rng: &mut impl Rng) -> VersionInfo {
    VersionInfo {
        manifest_sequence: rng.gen::<u64>() >> rng.gen_range(0..64),
        manifest_uri: rand_uri(rng),
    }
}

fn rand_key(rng: &mut impl RngCore) -> KeyPair {
    let mut seed = [0u8; 32];
    rng.fill_bytes(&mut seed);
    generate_key_pair(&seed).unwrap()
}

fn rand_name(rng: &mut impl Rng) -> Vec<u8> {
    let len = rng.gen_range(0..40);
    (0..len).map(|_| rng.gen()).collect()
}

fn rand_cert(rng: &mut impl Rng, serial: u64, signer: &KeyPair) -> CompactCertificate {
    let (nb, na) = rand_time_pair(rng);
    let profile = [
        CertProfile::RootCa,
        CertProfile::SubCa,
        CertProfile::Factory,
        CertProfile::Operational,
        CertProfile::Server,
    ][rng.gen_range(0..5)];
    TbsCertificate {
        serial,
        subject_name: rand_name(rng),
        subject_public_key: rand_key(rng).public_key(),
        issuer_name: rand_name(rng),
        not_before: nb,
        not_after: na,
        profile,
    }
    .sign(signer)
}

fn rand_device_info(rng: &mut impl Rng, serial: u64, signer: &KeyPair) -> DeviceUpdateInfo {
    let (nb, na) = rand_time_pair(rng);
    DeviceUpdateInfo {
        factory_certificate: rand_cert(rng, serial, signer),
        update_not_before: nb,
        update_not_after: na,
        version: rand_version(rng),
    }
}

pub fn rand_transfer(rng: &mut impl Rng) -> TransferMessage {
    let (nb, na) = rand_time_pair(rng);
    TransferMessage {
        reset_not_before: nb,
        reset_not_after: na,
        ra_uri: rng.gen_bool(0.5).then(|| rand_uri(rng)),
        update_uri: rand_uri(rng),
        contact_update_before_enroll: rng.gen(),
        enroll_uri: rand_uri(rng),
        fallback_uri: rand_uri(rng),
    }
}

/// One random valid message of every kind, derived from `seed`.
pub fn random_messages(seed: u64) -> Vec<Message> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let signer = rand_key(&mut rng);
    let n = rng.gen_range(0..4);
    let mut serial = rng.gen::<u32>() as u64;
    let entries = (0..n)
        .map(|_| {
            serial += rng.gen_range(1..1000);
            rand_device_info(&mut rng, serial, &signer)
        })
        .collect();
    let subject = rand_key(&mut rng);
    let profile = if rng.gen() {
        CertProfile::Factory
    } else {
        CertProfile::Operational
    };
    let csr = CertificateSigningRequest::new(&subject, &rand_name(&mut rng), profile);
    let transfer = rand_transfer(&mut rng);
    let payload = Message::TransferMessage(transfer.clone());
    let envelope = trust_transfer::crypto::sign_envelope(
        &signer,
        trust_transfer::messages::EnvelopeProfile::Cwt,
        &trust_transfer::messages::encode(&payload).unwrap(),
    )
    .unwrap();
    let cert_serial = rng.gen();
    vec![
        Message::VersionInfo(rand_version(&mut rng)),
        Message::DeviceUpdateInfo(rand_device_info(&mut rng, 7, &signer)),
        Message::UpdateInfoList(UpdateInfoList { entries }),
        Message::TransferMessage(transfer),
        Message::CertificateSigningRequest(csr),
        Message::SignedEnvelope(envelope),
        Message::Certificate(rand_cert(&mut rng, cert_serial, &signer)),
    ]
}

// ---------------------------------------------------------------------------
// Vector files

pub fn vectors_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("vectors")
}

/// Reads a hex vector. Blank lines and `#` comments are ignored.
pub fn read_hex(name: &str) -> Vec<u8> {
    let path = vectors_dir().join(name);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let hex: String = text
        .lines()
        .map(|l| l.split('#').next().unwrap().trim())
        .collect();
    hex::decode(hex).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expected {
    Malformed,
    Invariant,
}

#[derive(Debug)]
pub struct MalformedCase {
    pub line: usize,
    pub kind: MessageKind,
    pub expected: Expected,
    pub bytes: Vec<u8>,
    pub note: String,
}

fn parse_kind(s: &str) -> MessageKind {
    match s {
        "version" => MessageKind::VersionInfo,
        "device_info" => MessageKind::DeviceUpdateInfo,
        "list" => MessageKind::UpdateInfoList,
        "transfer" => MessageKind::TransferMessage,
        "csr" => MessageKind::CertificateSigningRequest,
        "envelope" => MessageKind::SignedEnvelope,
        "certificate" => MessageKind::Certificate,
        other => panic!("unknown kind {other}"),
    }
}

/// Loads `vectors/malformed.txt`: `kind expected hex... # note` per line.
/// A hex field of `-` stands for empty input.
pub fn malformed_corpus() -> Vec<MalformedCase> {
    let path = vectors_dir().join("malformed.txt");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut cases = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let (body, note) = line.split_once('#').unwrap_or((line, ""));
        let mut parts = body.split_whitespace();
        let Some(kind) = parts.next() else { continue };
        let expected = match parts.next().expect("expected column") {
            "malformed" => Expected::Malformed,
            "invariant" => Expected::Invariant,
            other => panic!("line {}: bad expectation {other}", i + 1),
        };
        let hex: String = parts.filter(|p| *p != "-").collect();
        cases.push(MalformedCase {
            line: i + 1,
            kind: parse_kind(kind),
            expected,
            bytes: hex::decode(&hex).unwrap_or_else(|e| panic!("line {}: {e}", i + 1)),
            note: note.trim().to_string(),
        });
    }
    cases
}

pub fn classify(err: &CodecError) -> Expected {
    match err {
        CodecError::MalformedEncoding(_) => Expected::Malformed,
        CodecError::InvariantViolation(_) => Expected::Invariant,
    }
}
