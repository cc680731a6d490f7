// SPDX-License-Identifier: Apache-2.0

//! Protocol payloads and their wire encodings.
//!
//! `UpdateInfoList` is what the original operator shares with the target
//! operator; `TransferMessage` is the claim set the target operator prepares
//! and the original operator relays to each device. Both travel inside a
//! [`SignedEnvelope`].

use std::collections::BTreeSet;
use std::fmt;

use ciborium::value::Value;

use crate::codec::{self, CodecError, Fields, WireCodec};
use crate::crypto::{self, KeyId, KeyPair, PublicKey, Signature, KEY_ID_LEN, SIGNATURE_LEN};
use crate::pki::{CertProfile, CompactCertificate};

pub const MAX_URI_LEN: usize = 255;

/// Endpoint URI. Carried on the wire as a byte string holding UTF-8.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Uri(String);

impl Uri {
    pub fn new(value: impl Into<String>) -> Result<Self, CodecError> {
        let value = value.into();
        if value.is_empty() {
            return Err(CodecError::invariant("uri must not be empty"));
        }
        if value.len() > MAX_URI_LEN {
            return Err(CodecError::invariant(format!(
                "uri is {} bytes, limit is {MAX_URI_LEN}",
                value.len()
            )));
        }
        Ok(Uri(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for Uri {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Uri({:?})", self.0)
    }
}

impl fmt::Display for Uri {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl WireCodec for Uri {
    fn to_value(&self) -> Value {
        codec::bytes(self.0.as_bytes())
    }

    fn from_value(value: Value) -> Result<Self, CodecError> {
        let raw = codec::expect_bytes(value, "uri")?;
        let text =
            String::from_utf8(raw).map_err(|_| CodecError::malformed("uri: invalid utf-8"))?;
        Uri::new(text)
    }
}

/// Seconds since the epoch of the simulation clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct TimeStamp(pub u64);

impl TimeStamp {
    pub fn plus(self, seconds: u64) -> TimeStamp {
        TimeStamp(self.0.saturating_add(seconds))
    }
}

impl fmt::Display for TimeStamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl WireCodec for TimeStamp {
    fn to_value(&self) -> Value {
        codec::uint(self.0)
    }

    fn from_value(value: Value) -> Result<Self, CodecError> {
        codec::expect_uint(value, "time").map(TimeStamp)
    }
}

/// A firmware manifest reference: sequence number plus manifest URI.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VersionInfo {
    pub manifest_sequence: u64,
    pub manifest_uri: Uri,
}

impl WireCodec for VersionInfo {
    fn to_value(&self) -> Value {
        Value::Array(vec![
            codec::uint(self.manifest_sequence),
            self.manifest_uri.to_value(),
        ])
    }

    fn from_value(value: Value) -> Result<Self, CodecError> {
        let mut f = Fields::open(value, 2, "version info")?;
        Ok(VersionInfo {
            manifest_sequence: f.uint()?,
            manifest_uri: Uri::from_value(f.next())?,
        })
    }
}

/// Per-device information shared by the original operator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceUpdateInfo {
    pub factory_certificate: CompactCertificate,
    pub update_not_before: TimeStamp,
    pub update_not_after: TimeStamp,
    pub version: VersionInfo,
}

impl WireCodec for DeviceUpdateInfo {
    fn validate(&self) -> Result<(), CodecError> {
        self.factory_certificate.validate()?;
        if self.update_not_before > self.update_not_after {
            return Err(CodecError::invariant(format!(
                "update window inverted: {} > {}",
                self.update_not_before, self.update_not_after
            )));
        }
        Ok(())
    }

    fn to_value(&self) -> Value {
        Value::Array(vec![
            self.factory_certificate.to_value(),
            self.update_not_before.to_value(),
            self.update_not_after.to_value(),
            self.version.to_value(),
        ])
    }

    fn from_value(value: Value) -> Result<Self, CodecError> {
        let mut f = Fields::open(value, 4, "device update info")?;
        Ok(DeviceUpdateInfo {
            factory_certificate: CompactCertificate::from_value(f.next())?,
            update_not_before: TimeStamp::from_value(f.next())?,
            update_not_after: TimeStamp::from_value(f.next())?,
            version: VersionInfo::from_value(f.next())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct UpdateInfoList {
    pub entries: Vec<DeviceUpdateInfo>,
}

impl WireCodec for UpdateInfoList {
    fn validate(&self) -> Result<(), CodecError> {
        let mut serials = BTreeSet::new();
        for entry in &self.entries {
            entry.validate()?;
            if !serials.insert(entry.factory_certificate.serial) {
                return Err(CodecError::invariant(format!(
                    "duplicate factory certificate serial {}",
                    entry.factory_certificate.serial
                )));
            }
        }
        Ok(())
    }

    fn to_value(&self) -> Value {
        codec::array_of(&self.entries)
    }

    fn from_value(value: Value) -> Result<Self, CodecError> {
        let items = codec::expect_array(value, "update info list")?;
        Ok(UpdateInfoList {
            entries: codec::decode_array_of(items)?,
        })
    }
}

/// The six-claim transfer instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferMessage {
    pub reset_not_before: TimeStamp,
    pub reset_not_after: TimeStamp,
    /// Remote-attestation server, absent when no attestation is required.
    pub ra_uri: Option<Uri>,
    pub update_uri: Uri,
    /// Contact the update server before re-enrolling.
    pub contact_update_before_enroll: bool,
    pub enroll_uri: Uri,
    pub fallback_uri: Uri,
}

impl TransferMessage {
    pub const CLAIM_COUNT: usize = 6;

    pub fn reset_window_contains(&self, now: TimeStamp) -> bool {
        self.reset_not_before <= now && now <= self.reset_not_after
    }
}

impl WireCodec for TransferMessage {
    fn validate(&self) -> Result<(), CodecError> {
        if self.reset_not_before > self.reset_not_after {
            return Err(CodecError::invariant(format!(
                "reset window inverted: {} > {}",
                self.reset_not_before, self.reset_not_after
            )));
        }
        Ok(())
    }

    fn to_value(&self) -> Value {
        Value::Array(vec![
            self.reset_not_before.to_value(),
            self.reset_not_after.to_value(),
            self.ra_uri.as_ref().map_or(Value::Null, Uri::to_value),
            Value::Array(vec![
                self.update_uri.to_value(),
                Value::Bool(self.contact_update_before_enroll),
            ]),
            self.enroll_uri.to_value(),
            self.fallback_uri.to_value(),
        ])
    }

    fn from_value(value: Value) -> Result<Self, CodecError> {
        let mut f = Fields::open(value, Self::CLAIM_COUNT, "transfer message")?;
        let reset_not_before = TimeStamp::from_value(f.next())?;
        let reset_not_after = TimeStamp::from_value(f.next())?;
        let ra_uri = match f.next() {
            Value::Null => None,
            other => Some(Uri::from_value(other)?),
        };
        let mut update = Fields::open(f.next(), 2, "update uri")?;
        let update_uri = Uri::from_value(update.next())?;
        let contact_update_before_enroll = update.bool()?;
        Ok(TransferMessage {
            reset_not_before,
            reset_not_after,
            ra_uri,
            update_uri,
            contact_update_before_enroll,
            enroll_uri: Uri::from_value(f.next())?,
            fallback_uri: Uri::from_value(f.next())?,
        })
    }
}

/// Certificate request with proof of possession of the subject key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CertificateSigningRequest {
    pub subject_name: Vec<u8>,
    pub subject_public_key: PublicKey,
    pub requested_profile: CertProfile,
    pub proof_of_possession: Signature,
}

impl CertificateSigningRequest {
    pub fn new(key: &KeyPair, subject_name: &[u8], requested_profile: CertProfile) -> Self {
        let tbs = Self::tbs_bytes(subject_name, &key.public_key(), requested_profile);
        CertificateSigningRequest {
            subject_name: subject_name.to_vec(),
            subject_public_key: key.public_key(),
            requested_profile,
            proof_of_possession: key.sign(&tbs),
        }
    }

    fn tbs_bytes(subject: &[u8], key: &PublicKey, profile: CertProfile) -> Vec<u8> {
        codec::to_bytes(&Value::Array(vec![
            codec::bytes(subject),
            codec::bytes(key.as_bytes()),
            codec::uint(profile.code()),
        ]))
    }

    pub fn verify_proof_of_possession(&self) -> bool {
        let tbs = Self::tbs_bytes(
            &self.subject_name,
            &self.subject_public_key,
            self.requested_profile,
        );
        crypto::verify(&self.subject_public_key, &tbs, &self.proof_of_possession)
    }
}

impl WireCodec for CertificateSigningRequest {
    fn validate(&self) -> Result<(), CodecError> {
        if !matches!(
            self.requested_profile,
            CertProfile::Factory | CertProfile::Operational
        ) {
            return Err(CodecError::invariant(
                "csr may only request factory or operational profiles",
            ));
        }
        Ok(())
    }

    fn to_value(&self) -> Value {
        Value::Array(vec![
            codec::bytes(&self.subject_name),
            codec::bytes(self.subject_public_key.as_bytes()),
            codec::uint(self.requested_profile.code()),
            codec::bytes(&self.proof_of_possession.0),
        ])
    }

    fn from_value(value: Value) -> Result<Self, CodecError> {
        let mut f = Fields::open(value, 4, "csr")?;
        Ok(CertificateSigningRequest {
            subject_name: f.bytes()?,
            subject_public_key: PublicKey(f.fixed()?),
            requested_profile: CertProfile::from_code(f.uint()?)?,
            proof_of_possession: Signature(f.fixed()?),
        })
    }
}

/// Distinguishes the two signed payload kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnvelopeProfile {
    /// Signed transfer claims.
    Cwt,
    /// Signed device update information.
    UpdateList,
}

impl EnvelopeProfile {
    fn code(self) -> u64 {
        match self {
            EnvelopeProfile::Cwt => 61,
            EnvelopeProfile::UpdateList => 60,
        }
    }

    fn from_code(code: u64) -> Result<Self, CodecError> {
        match code {
            61 => Ok(EnvelopeProfile::Cwt),
            60 => Ok(EnvelopeProfile::UpdateList),
            other => Err(CodecError::malformed(format!(
                "unknown envelope profile {other}"
            ))),
        }
    }
}

const HDR_ALG: i64 = 1;
const HDR_PROFILE: i64 = 3;
const HDR_KID: i64 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvelopeHeader {
    pub algorithm: i64,
    pub signer: KeyId,
    pub profile: EnvelopeProfile,
}

impl EnvelopeHeader {
    fn to_value(&self) -> Value {
        Value::Map(vec![
            (codec::int(HDR_ALG), codec::int(self.algorithm)),
            (codec::int(HDR_PROFILE), codec::uint(self.profile.code())),
            (codec::int(HDR_KID), codec::bytes(&self.signer.0)),
        ])
    }

    fn from_value(value: Value) -> Result<Self, CodecError> {
        let Value::Map(entries) = value else {
            return Err(CodecError::malformed("envelope header: expected map"));
        };
        if entries.len() != 3 {
            return Err(CodecError::malformed(format!(
                "envelope header: expected 3 labels, got {}",
                entries.len()
            )));
        }
        let mut values = Vec::with_capacity(3);
        for ((k, v), label) in entries.into_iter().zip([HDR_ALG, HDR_PROFILE, HDR_KID]) {
            if codec::expect_int(k, "header label")? != label {
                return Err(CodecError::malformed(format!(
                    "envelope header: expected label {label}"
                )));
            }
            values.push(v);
        }
        let mut values = values.into_iter();
        let algorithm = codec::expect_int(values.next().expect("3 values"), "algorithm")?;
        let profile = EnvelopeProfile::from_code(codec::expect_uint(
            values.next().expect("3 values"),
            "profile",
        )?)?;
        let kid = codec::expect_bytes(values.next().expect("3 values"), "key id")?;
        let signer =
            KeyId(kid.try_into().map_err(|_| {
                CodecError::malformed(format!("key id must be {KEY_ID_LEN} bytes"))
            })?);
        Ok(EnvelopeHeader {
            algorithm,
            signer,
            profile,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        codec::to_bytes(&self.to_value())
    }
}

/// Header, payload and detached signature over `encode(header) || payload`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignedEnvelope {
    pub header: EnvelopeHeader,
    pub payload: Vec<u8>,
    pub signature: Signature,
}

impl SignedEnvelope {
    pub fn signing_input(header: &EnvelopeHeader, payload: &[u8]) -> Vec<u8> {
        let mut input = header.encode();
        input.extend_from_slice(payload);
        input
    }
}

impl WireCodec for SignedEnvelope {
    fn to_value(&self) -> Value {
        Value::Array(vec![
            codec::bytes(&self.header.encode()),
            codec::bytes(&self.payload),
            codec::bytes(&self.signature.0),
        ])
    }

    fn from_value(value: Value) -> Result<Self, CodecError> {
        let mut f = Fields::open(value, 3, "signed envelope")?;
        let header = EnvelopeHeader::from_value(codec::from_bytes(&f.bytes()?)?)?;
        let payload = f.bytes()?;
        let raw_sig = f.bytes()?;
        let signature = Signature(raw_sig.try_into().map_err(|_| {
            CodecError::malformed(format!("signature must be {SIGNATURE_LEN} bytes"))
        })?);
        Ok(SignedEnvelope {
            header,
            payload,
            signature,
        })
    }
}

/// Tag selecting the expected type for [`decode`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageKind {
    VersionInfo,
    DeviceUpdateInfo,
    UpdateInfoList,
    TransferMessage,
    CertificateSigningRequest,
    SignedEnvelope,
    Certificate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    VersionInfo(VersionInfo),
    DeviceUpdateInfo(DeviceUpdateInfo),
    UpdateInfoList(UpdateInfoList),
    TransferMessage(TransferMessage),
    CertificateSigningRequest(CertificateSigningRequest),
    SignedEnvelope(SignedEnvelope),
    Certificate(CompactCertificate),
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::VersionInfo(_) => MessageKind::VersionInfo,
            Message::DeviceUpdateInfo(_) => MessageKind::DeviceUpdateInfo,
            Message::UpdateInfoList(_) => MessageKind::UpdateInfoList,
            Message::TransferMessage(_) => MessageKind::TransferMessage,
            Message::CertificateSigningRequest(_) => MessageKind::CertificateSigningRequest,
            Message::SignedEnvelope(_) => MessageKind::SignedEnvelope,
            Message::Certificate(_) => MessageKind::Certificate,
        }
    }
}

pub fn encode(message: &Message) -> Result<Vec<u8>, CodecError> {
    match message {
        Message::VersionInfo(m) => m.encode(),
        Message::DeviceUpdateInfo(m) => m.encode(),
        Message::UpdateInfoList(m) => m.encode(),
        Message::TransferMessage(m) => m.encode(),
        Message::CertificateSigningRequest(m) => m.encode(),
        Message::SignedEnvelope(m) => m.encode(),
        Message::Certificate(m) => m.encode(),
    }
}

pub fn decode(kind: MessageKind, bytes: &[u8]) -> Result<Message, CodecError> {
    Ok(match kind {
        MessageKind::VersionInfo => Message::VersionInfo(VersionInfo::decode(bytes)?),
        MessageKind::DeviceUpdateInfo => {
            Message::DeviceUpdateInfo(DeviceUpdateInfo::decode(bytes)?)
        }
        MessageKind::UpdateInfoList => Message::UpdateInfoList(UpdateInfoList::decode(bytes)?),
        MessageKind::TransferMessage => Message::TransferMessage(TransferMessage::decode(bytes)?),
        MessageKind::CertificateSigningRequest => {
            Message::CertificateSigningRequest(CertificateSigningRequest::decode(bytes)?)
        }
        MessageKind::SignedEnvelope => Message::SignedEnvelope(SignedEnvelope::decode(bytes)?),
        MessageKind::Certificate => Message::Certificate(CompactCertificate::decode(bytes)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uri(s: &str) -> Uri {
        Uri::new(s).unwrap()
    }

    fn sample_transfer() -> TransferMessage {
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

    #[test]
    fn empty_update_info_list_is_single_byte() {
        assert_eq!(UpdateInfoList::default().encode().unwrap(), vec![0x80]);
    }

    #[test]
    fn transfer_message_has_six_claims_with_null_ra() {
        let bytes = sample_transfer().encode().unwrap();
        let items = codec::expect_array(codec::from_bytes(&bytes).unwrap(), "t").unwrap();
        assert_eq!(items.len(), 6);
        assert_eq!(items[2], Value::Null);
    }

    #[test]
    fn transfer_message_round_trips() {
        let tm = sample_transfer();
        assert_eq!(TransferMessage::decode(&tm.encode().unwrap()).unwrap(), tm);
        let with_ra = TransferMessage {
            ra_uri: Some(uri("coaps://ra.sp2.ex")),
            contact_update_before_enroll: true,
            ..tm
        };
        assert_eq!(
            TransferMessage::decode(&with_ra.encode().unwrap()).unwrap(),
            with_ra
        );
    }

    #[test]
    fn five_element_transfer_message_is_malformed() {
        let mut items = codec::expect_array(
            codec::from_bytes(&sample_transfer().encode().unwrap()).unwrap(),
            "t",
        )
        .unwrap();
        items.pop();
        let bytes = codec::to_bytes(&Value::Array(items));
        assert!(matches!(
            TransferMessage::decode(&bytes),
            Err(CodecError::MalformedEncoding(_))
        ));
    }

    #[test]
    fn inverted_window_is_invariant_violation() {
        let tm = TransferMessage {
            reset_not_before: TimeStamp(5),
            reset_not_after: TimeStamp(4),
            ..sample_transfer()
        };
        assert!(matches!(
            tm.encode(),
            Err(CodecError::InvariantViolation(_))
        ));
        let bytes = codec::to_bytes(&tm.to_value());
        assert!(matches!(
            TransferMessage::decode(&bytes),
            Err(CodecError::InvariantViolation(_))
        ));
    }

    #[test]
    fn uri_limits() {
        assert!(Uri::new("").is_err());
        assert!(Uri::new("a".repeat(255)).is_ok());
        assert!(matches!(
            Uri::new("a".repeat(256)),
            Err(CodecError::InvariantViolation(_))
        ));
    }

    #[test]
    fn csr_proof_of_possession() {
        let key = crypto::generate_key_pair(&[9; 32]).unwrap();
        let csr = CertificateSigningRequest::new(&key, b"dev-1", CertProfile::Operational);
        assert!(csr.verify_proof_of_possession());
        let back = CertificateSigningRequest::decode(&csr.encode().unwrap()).unwrap();
        assert_eq!(back, csr);
        let mut forged = csr.clone();
        forged.subject_name = b"dev-2".to_vec();
        assert!(!forged.verify_proof_of_possession());
    }

    #[test]
    fn decode_by_kind() {
        let tm = sample_transfer();
        let bytes = encode(&Message::TransferMessage(tm.clone())).unwrap();
        assert_eq!(
            decode(MessageKind::TransferMessage, &bytes).unwrap(),
            Message::TransferMessage(tm)
        );
        assert!(decode(MessageKind::VersionInfo, &bytes).is_err());
    }
}
