// SPDX-License-Identifier: Apache-2.0

//! Datagrams exchanged between simulated actors.
//!
//! Every packet carries a [`Frame`]: one of the three handshake messages, a
//! session record, or a cleartext alert. Application messages ([`AppMsg`])
//! travel only inside records.

use std::fmt;

use ciborium::value::Value;

use crate::codec::{self, CodecError, Fields, WireCodec};
use crate::crypto::{Digest, PublicKey};
use crate::device::{EnrollGrant, EnrollRequest, TruststoreUpdate};
use crate::messages::{
    CertificateSigningRequest, SignedEnvelope, UpdateInfoList, Uri, VersionInfo,
};
use crate::pki::CompactCertificate;
use crate::session::{ClientHello, Finished, ServerHello, SessionId, SessionRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ActorId {
    Sp1,
    Sp2,
    Ca1,
    Ca2,
    Device(u32),
    Adversary,
}

impl ActorId {
    pub fn device_index(self) -> Option<u32> {
        match self {
            ActorId::Device(i) => Some(i),
            _ => None,
        }
    }
}

impl fmt::Display for ActorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActorId::Sp1 => f.write_str("sp1"),
            ActorId::Sp2 => f.write_str("sp2"),
            ActorId::Ca1 => f.write_str("ca1"),
            ActorId::Ca2 => f.write_str("ca2"),
            ActorId::Device(i) => write!(f, "dev-{i:04}"),
            ActorId::Adversary => f.write_str("adv"),
        }
    }
}

impl std::str::FromStr for ActorId {
    type Err = String;

    /// Accepts the display form; device numbers may omit the zero padding.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sp1" => Ok(ActorId::Sp1),
            "sp2" => Ok(ActorId::Sp2),
            "ca1" => Ok(ActorId::Ca1),
            "ca2" => Ok(ActorId::Ca2),
            "adv" | "adversary" => Ok(ActorId::Adversary),
            other => other
                .strip_prefix("dev-")
                .and_then(|n| n.parse().ok())
                .map(ActorId::Device)
                .ok_or_else(|| format!("unknown actor {s:?}")),
        }
    }
}

/// Purpose of a packet as an on-path observer can tell it apart: by
/// endpoint, port and timing. Records and handshakes carry the class of the
/// exchange they belong to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MessageClass {
    InitialEnroll,
    UpdateInfoList,
    Registration,
    TransferToSp1,
    LastUpdate,
    TruststoreUpdate,
    TransferDelivery,
    Revocation,
    Attestation,
    FirmwareUpdate,
    Reenroll,
    Fallback,
    Service,
}

impl MessageClass {
    pub const ALL: [MessageClass; 13] = [
        MessageClass::InitialEnroll,
        MessageClass::UpdateInfoList,
        MessageClass::Registration,
        MessageClass::TransferToSp1,
        MessageClass::LastUpdate,
        MessageClass::TruststoreUpdate,
        MessageClass::TransferDelivery,
        MessageClass::Revocation,
        MessageClass::Attestation,
        MessageClass::FirmwareUpdate,
        MessageClass::Reenroll,
        MessageClass::Fallback,
        MessageClass::Service,
    ];

    /// Classes that make up the operator-change flow.
    pub const TRANSFER_FLOW: [MessageClass; 11] = [
        MessageClass::UpdateInfoList,
        MessageClass::Registration,
        MessageClass::TransferToSp1,
        MessageClass::LastUpdate,
        MessageClass::TruststoreUpdate,
        MessageClass::TransferDelivery,
        MessageClass::Revocation,
        MessageClass::Attestation,
        MessageClass::FirmwareUpdate,
        MessageClass::Reenroll,
        MessageClass::Fallback,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MessageClass::InitialEnroll => "initial_enroll",
            MessageClass::UpdateInfoList => "update_info_list",
            MessageClass::Registration => "registration",
            MessageClass::TransferToSp1 => "transfer_to_sp1",
            MessageClass::LastUpdate => "last_update",
            MessageClass::TruststoreUpdate => "truststore_update",
            MessageClass::TransferDelivery => "transfer_delivery",
            MessageClass::Revocation => "revocation",
            MessageClass::Attestation => "attestation",
            MessageClass::FirmwareUpdate => "firmware_update",
            MessageClass::Reenroll => "reenroll",
            MessageClass::Fallback => "fallback",
            MessageClass::Service => "service",
        }
    }
}

impl fmt::Display for MessageClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for MessageClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MessageClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown message class {s:?}"))
    }
}

/// Cleartext framing visible to observers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FrameKind {
    ClientHello,
    ServerHello,
    Finished,
    Record,
    Alert,
}

impl FrameKind {
    pub fn name(self) -> &'static str {
        match self {
            FrameKind::ClientHello => "client_hello",
            FrameKind::ServerHello => "server_hello",
            FrameKind::Finished => "finished",
            FrameKind::Record => "record",
            FrameKind::Alert => "alert",
        }
    }
}

impl std::str::FromStr for FrameKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            FrameKind::ClientHello,
            FrameKind::ServerHello,
            FrameKind::Finished,
            FrameKind::Record,
            FrameKind::Alert,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| format!("unknown frame kind {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    ClientHello(ClientHello),
    ServerHello(ServerHello),
    Finished(Finished),
    Record(SessionRecord),
    /// Handshake refusal. Unauthenticated, like its real-world counterparts.
    Alert {
        session_id: SessionId,
        reason: String,
    },
}

impl Frame {
    pub fn kind(&self) -> FrameKind {
        match self {
            Frame::ClientHello(_) => FrameKind::ClientHello,
            Frame::ServerHello(_) => FrameKind::ServerHello,
            Frame::Finished(_) => FrameKind::Finished,
            Frame::Record(_) => FrameKind::Record,
            Frame::Alert { .. } => FrameKind::Alert,
        }
    }
}

fn text(s: &str) -> Value {
    Value::Text(s.to_string())
}

fn expect_text(value: Value, what: &'static str) -> Result<String, CodecError> {
    match value {
        Value::Text(s) => Ok(s),
        _ => Err(CodecError::malformed(format!(
            "{what}: expected text string"
        ))),
    }
}

/// Splits `[tag, body...]` into the tag and the remaining elements.
fn open_tagged(value: Value, what: &'static str) -> Result<(u64, Vec<Value>), CodecError> {
    let mut items = codec::expect_array(value, what)?;
    if items.is_empty() {
        return Err(CodecError::malformed(format!("{what}: empty array")));
    }
    let tag = codec::expect_uint(items.remove(0), what)?;
    Ok((tag, items))
}

fn body(items: Vec<Value>, arity: usize, what: &'static str) -> Result<Fields, CodecError> {
    Fields::open(Value::Array(items), arity, what)
}

impl WireCodec for Frame {
    fn to_value(&self) -> Value {
        let (tag, inner) = match self {
            Frame::ClientHello(m) => (0, m.to_value()),
            Frame::ServerHello(m) => (1, m.to_value()),
            Frame::Finished(m) => (2, m.to_value()),
            Frame::Record(m) => (3, m.to_value()),
            Frame::Alert { session_id, reason } => (
                4,
                Value::Array(vec![codec::bytes(session_id), text(reason)]),
            ),
        };
        Value::Array(vec![codec::uint(tag), inner])
    }

    fn from_value(value: Value) -> Result<Self, CodecError> {
        let mut f = Fields::open(value, 2, "frame")?;
        let tag = f.uint()?;
        let inner = f.next();
        Ok(match tag {
            0 => Frame::ClientHello(ClientHello::from_value(inner)?),
            1 => Frame::ServerHello(ServerHello::from_value(inner)?),
            2 => Frame::Finished(Finished::from_value(inner)?),
            3 => Frame::Record(SessionRecord::from_value(inner)?),
            4 => {
                let mut a = Fields::open(inner, 2, "alert")?;
                Frame::Alert {
                    session_id: a.fixed()?,
                    reason: expect_text(a.next(), "alert reason")?,
                }
            }
            other => return Err(CodecError::malformed(format!("unknown frame tag {other}"))),
        })
    }
}

/// Application messages carried inside session records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AppMsg {
    Enroll(EnrollRequest),
    EnrollGranted(EnrollGrant),
    Reject(String),
    Ack,
    UpdateInfoPush {
        list: SignedEnvelope,
        /// Expected attestation measurements per device id.
        ra_refs: Vec<(Vec<u8>, Digest)>,
    },
    TransferCwt(SignedEnvelope),
    Register(UpdateInfoList),
    Registered(Uri),
    FirmwarePush(VersionInfo),
    TruststorePush(TruststoreUpdate),
    TransferDelivery(SignedEnvelope),
    RaHello,
    RaChallenge([u8; 16]),
    RaEvidence {
        nonce: [u8; 16],
        response: Digest,
    },
    RaVerdict(bool),
    UpdateQuery(VersionInfo),
    UpdateOffer(Option<VersionInfo>),
    FallbackContact(String),
    FallbackAck {
        attested: Option<bool>,
    },
    Revoke(Vec<u64>),
    ServiceRequest,
    ServiceResponse,
}

fn grant_value(g: &EnrollGrant) -> Value {
    Value::Array(vec![
        g.certificate.to_value(),
        codec::array_of(&g.chain),
        g.server_key_seed.map_or(Value::Null, |s| codec::bytes(&s)),
        Value::Array(
            g.roots
                .iter()
                .map(|(c, p)| Value::Array(vec![c.to_value(), Value::Bool(*p)]))
                .collect(),
        ),
        Value::Array(g.pins.iter().map(|d| codec::bytes(&d.0)).collect()),
        g.operator_signer
            .map_or(Value::Null, |k| codec::bytes(&k.0)),
    ])
}

fn grant_from(value: Value) -> Result<EnrollGrant, CodecError> {
    let mut f = Fields::open(value, 6, "enroll grant")?;
    let certificate = CompactCertificate::from_value(f.next())?;
    let chain = codec::decode_array_of(f.array()?)?;
    let server_key_seed = match f.next() {
        Value::Null => None,
        v => Some(fixed::<32>(v, "server key seed")?),
    };
    let mut roots = Vec::new();
    for item in f.array()? {
        let mut r = Fields::open(item, 2, "granted root")?;
        roots.push((CompactCertificate::from_value(r.next())?, r.bool()?));
    }
    let mut pins = Vec::new();
    for item in f.array()? {
        pins.push(Digest(fixed::<32>(item, "pin")?));
    }
    let operator_signer = match f.next() {
        Value::Null => None,
        v => Some(PublicKey(fixed::<33>(v, "operator signer")?)),
    };
    Ok(EnrollGrant {
        certificate,
        chain,
        server_key_seed,
        roots,
        pins,
        operator_signer,
    })
}

fn fixed<const N: usize>(value: Value, what: &'static str) -> Result<[u8; N], CodecError> {
    codec::expect_bytes(value, what)?
        .try_into()
        .map_err(|_| CodecError::malformed(format!("{what}: expected {N} bytes")))
}

fn version_opt(v: &Option<VersionInfo>) -> Value {
    v.as_ref().map_or(Value::Null, WireCodec::to_value)
}

impl WireCodec for AppMsg {
    fn to_value(&self) -> Value {
        let (tag, fields): (u64, Vec<Value>) = match self {
            AppMsg::Enroll(EnrollRequest::Csr(csr)) => (0, vec![csr.to_value()]),
            AppMsg::Enroll(EnrollRequest::ServerKeygen) => (1, vec![]),
            AppMsg::EnrollGranted(g) => (2, vec![grant_value(g)]),
            AppMsg::Reject(reason) => (3, vec![text(reason)]),
            AppMsg::Ack => (4, vec![]),
            AppMsg::UpdateInfoPush { list, ra_refs } => (
                5,
                vec![
                    list.to_value(),
                    Value::Array(
                        ra_refs
                            .iter()
                            .map(|(id, d)| Value::Array(vec![codec::bytes(id), codec::bytes(&d.0)]))
                            .collect(),
                    ),
                ],
            ),
            AppMsg::TransferCwt(env) => (6, vec![env.to_value()]),
            AppMsg::Register(list) => (7, vec![list.to_value()]),
            AppMsg::Registered(uri) => (8, vec![uri.to_value()]),
            AppMsg::FirmwarePush(v) => (9, vec![v.to_value()]),
            AppMsg::TruststorePush(u) => (
                10,
                vec![
                    codec::array_of(&u.add),
                    Value::Bool(u.persist),
                    Value::Array(u.remove.iter().map(|n| codec::bytes(n)).collect()),
                ],
            ),
            AppMsg::TransferDelivery(env) => (11, vec![env.to_value()]),
            AppMsg::RaHello => (12, vec![]),
            AppMsg::RaChallenge(nonce) => (13, vec![codec::bytes(nonce)]),
            AppMsg::RaEvidence { nonce, response } => {
                (14, vec![codec::bytes(nonce), codec::bytes(&response.0)])
            }
            AppMsg::RaVerdict(v) => (15, vec![Value::Bool(*v)]),
            AppMsg::UpdateQuery(v) => (16, vec![v.to_value()]),
            AppMsg::UpdateOffer(v) => (17, vec![version_opt(v)]),
            AppMsg::FallbackContact(reason) => (18, vec![text(reason)]),
            AppMsg::FallbackAck { attested } => {
                (19, vec![attested.map_or(Value::Null, Value::Bool)])
            }
            AppMsg::Revoke(serials) => (
                20,
                vec![Value::Array(
                    serials.iter().map(|s| codec::uint(*s)).collect(),
                )],
            ),
            AppMsg::ServiceRequest => (21, vec![]),
            AppMsg::ServiceResponse => (22, vec![]),
        };
        let mut items = vec![codec::uint(tag)];
        items.extend(fields);
        Value::Array(items)
    }

    fn from_value(value: Value) -> Result<Self, CodecError> {
        let (tag, items) = open_tagged(value, "app message")?;
        let w = "app message";
        Ok(match tag {
            0 => {
                let mut f = body(items, 1, w)?;
                AppMsg::Enroll(EnrollRequest::Csr(CertificateSigningRequest::from_value(
                    f.next(),
                )?))
            }
            1 => {
                body(items, 0, w)?;
                AppMsg::Enroll(EnrollRequest::ServerKeygen)
            }
            2 => AppMsg::EnrollGranted(grant_from(body(items, 1, w)?.next())?),
            3 => AppMsg::Reject(expect_text(body(items, 1, w)?.next(), "reason")?),
            4 => {
                body(items, 0, w)?;
                AppMsg::Ack
            }
            5 => {
                let mut f = body(items, 2, w)?;
                let list = SignedEnvelope::from_value(f.next())?;
                let mut ra_refs = Vec::new();
                for item in f.array()? {
                    let mut r = Fields::open(item, 2, "ra reference")?;
                    ra_refs.push((r.bytes()?, Digest(r.fixed()?)));
                }
                AppMsg::UpdateInfoPush { list, ra_refs }
            }
            6 => AppMsg::TransferCwt(SignedEnvelope::from_value(body(items, 1, w)?.next())?),
            7 => AppMsg::Register(UpdateInfoList::from_value(body(items, 1, w)?.next())?),
            8 => AppMsg::Registered(Uri::from_value(body(items, 1, w)?.next())?),
            9 => AppMsg::FirmwarePush(VersionInfo::from_value(body(items, 1, w)?.next())?),
            10 => {
                let mut f = body(items, 3, w)?;
                let add = codec::decode_array_of(f.array()?)?;
                let persist = f.bool()?;
                let remove = f
                    .array()?
                    .into_iter()
                    .map(|v| codec::expect_bytes(v, "root name"))
                    .collect::<Result<_, _>>()?;
                AppMsg::TruststorePush(TruststoreUpdate {
                    add,
                    persist,
                    remove,
                })
            }
            11 => AppMsg::TransferDelivery(SignedEnvelope::from_value(body(items, 1, w)?.next())?),
            12 => {
                body(items, 0, w)?;
                AppMsg::RaHello
            }
            13 => AppMsg::RaChallenge(body(items, 1, w)?.fixed()?),
            14 => {
                let mut f = body(items, 2, w)?;
                AppMsg::RaEvidence {
                    nonce: f.fixed()?,
                    response: Digest(f.fixed()?),
                }
            }
            15 => AppMsg::RaVerdict(body(items, 1, w)?.bool()?),
            16 => AppMsg::UpdateQuery(VersionInfo::from_value(body(items, 1, w)?.next())?),
            17 => AppMsg::UpdateOffer(match body(items, 1, w)?.next() {
                Value::Null => None,
                v => Some(VersionInfo::from_value(v)?),
            }),
            18 => AppMsg::FallbackContact(expect_text(body(items, 1, w)?.next(), "reason")?),
            19 => AppMsg::FallbackAck {
                attested: match body(items, 1, w)?.next() {
                    Value::Null => None,
                    Value::Bool(b) => Some(b),
                    _ => return Err(CodecError::malformed("fallback ack: expected bool or null")),
                },
            },
            20 => AppMsg::Revoke(
                body(items, 1, w)?
                    .array()?
                    .into_iter()
                    .map(|v| codec::expect_uint(v, "serial"))
                    .collect::<Result<_, _>>()?,
            ),
            21 => {
                body(items, 0, w)?;
                AppMsg::ServiceRequest
            }
            22 => {
                body(items, 0, w)?;
                AppMsg::ServiceResponse
            }
            other => {
                return Err(CodecError::malformed(format!(
                    "unknown app message tag {other}"
                )))
            }
        })
    }
}
