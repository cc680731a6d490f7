// SPDX-License-Identifier: Apache-2.0

//! Device lifecycle state machine.
//!
//! ```text
//! blank -> provisioned -> enrolled -> transferPending -> resetDone
//!                          ^    |                          |
//!                          +----+     [attested] -> [updated] -> reenrolled
//!                                                          \-> fallback
//! ```
//!
//! [`DeviceState`] holds only primitives that change state locally. Network
//! exchanges are driven either by the simulator's device actor or, for
//! direct use, by the synchronous helpers at the bottom of this module that
//! talk to a [`DeviceNetwork`].

use std::fmt::{self, Write as _};

use rand::RngCore;
use thiserror::Error;

use crate::codec::{CodecError, WireCodec};
use crate::crypto::{self, digest_parts, generate_key_pair, Digest, KeyPair, PublicKey};
use crate::messages::{
    CertificateSigningRequest, EnvelopeProfile, SignedEnvelope, TimeStamp, TransferMessage, Uri,
    VersionInfo,
};
use crate::pki::{
    verify_chain, CertProfile, ChainFailure, CompactCertificate, RevocationView, TrustStore,
};
use crate::session::Credential;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Blank,
    Provisioned,
    Enrolled,
    TransferPending,
    ResetDone,
    Attested,
    Updated,
    Reenrolled,
    Fallback,
}

impl Phase {
    pub const ALL: [Phase; 9] = [
        Phase::Blank,
        Phase::Provisioned,
        Phase::Enrolled,
        Phase::TransferPending,
        Phase::ResetDone,
        Phase::Attested,
        Phase::Updated,
        Phase::Reenrolled,
        Phase::Fallback,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Blank => "blank",
            Phase::Provisioned => "provisioned",
            Phase::Enrolled => "enrolled",
            Phase::TransferPending => "transferPending",
            Phase::ResetDone => "resetDone",
            Phase::Attested => "attested",
            Phase::Updated => "updated",
            Phase::Reenrolled => "reenrolled",
            Phase::Fallback => "fallback",
        }
    }

    /// Phases in which no further progress is expected.
    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Reenrolled | Phase::Fallback)
    }

    /// Between the reset and the end of the post-reset sequence.
    pub fn is_post_reset(self) -> bool {
        matches!(self, Phase::ResetDone | Phase::Attested | Phase::Updated)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Phase::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown phase {s:?}"))
    }
}

/// Edges of the lifecycle graph.
pub fn is_allowed_transition(from: Phase, to: Phase) -> bool {
    use Phase::*;
    matches!(
        (from, to),
        (Blank, Provisioned)
            | (Provisioned, Enrolled)
            | (Enrolled, Enrolled)
            | (Enrolled, TransferPending)
            | (TransferPending, ResetDone)
            | (TransferPending, Fallback)
            | (ResetDone, Attested | Updated | Reenrolled | Fallback)
            | (Attested, Updated | Reenrolled | Fallback)
            | (Updated, Reenrolled | Fallback)
            | (Reenrolled, Reenrolled)
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeviceError {
    #[error("factory certificate does not carry the factory key")]
    KeyCertMismatch,
    #[error("{operation} is not allowed in phase {phase}")]
    WrongPhase {
        operation: &'static str,
        phase: Phase,
    },
    #[error("transfer message signature does not verify under the operator key")]
    BadSignature,
    #[error("now={now} outside reset window [{not_before}, {not_after}]")]
    OutsideResetWindow {
        now: TimeStamp,
        not_before: TimeStamp,
        not_after: TimeStamp,
    },
    #[error("malformed transfer message: {0}")]
    MalformedTransfer(CodecError),
    #[error("enrollment rejected: {0}")]
    EnrollRejected(String),
    #[error("issued certificate unusable: {0}")]
    BadGrant(String),
    #[error("firmware sequence {offered} does not advance {current}")]
    StaleFirmware { current: u64, offered: u64 },
}

/// Where the device sends each kind of request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoints {
    pub ca_uri: Uri,
    pub update_uri: Option<Uri>,
    pub contact_update_before_enroll: bool,
    pub ra_uri: Option<Uri>,
    pub fallback_uri: Option<Uri>,
}

/// Installed firmware. `code_digest` stands in for the image contents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Firmware {
    pub version: VersionInfo,
    pub code_digest: Digest,
}

/// Digest of the genuine image for a manifest sequence number.
pub fn reference_code_digest(sequence: u64) -> Digest {
    digest_parts(&[b"firmware", &sequence.to_be_bytes()])
}

/// Measurement reported in attestation: binds the manifest to the image.
pub fn firmware_measurement(version: &VersionInfo, code_digest: &Digest) -> Digest {
    let manifest = version.encode().expect("version info is valid");
    digest_parts(&[b"measurement", &manifest, &code_digest.0])
}

impl Firmware {
    pub fn genuine(version: VersionInfo) -> Self {
        Firmware {
            code_digest: reference_code_digest(version.manifest_sequence),
            version,
        }
    }

    pub fn measurement(&self) -> Digest {
        firmware_measurement(&self.version, &self.code_digest)
    }
}

/// How the operational key pair comes into existence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KeyGeneration {
    #[default]
    OnDevice,
    ServerGenerated,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EnrollRequest {
    Csr(CertificateSigningRequest),
    /// The CA generates the key pair for the authenticated subject.
    ServerKeygen,
}

/// What an authority returns on successful enrollment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnrollGrant {
    pub certificate: CompactCertificate,
    pub chain: Vec<CompactCertificate>,
    /// Seed of a server-generated key pair.
    pub server_key_seed: Option<[u8; 32]>,
    /// Roots to add, with their persistence flag.
    pub roots: Vec<(CompactCertificate, bool)>,
    /// Server certificate digests to pin; never persistent.
    pub pins: Vec<Digest>,
    /// Key the operator signs protocol data with.
    pub operator_signer: Option<PublicKey>,
}

/// Roots an operator pushes before handing the device over.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TruststoreUpdate {
    pub add: Vec<CompactCertificate>,
    pub persist: bool,
    pub remove: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PostResetStep {
    Attest,
    Update,
    Enroll,
}

impl fmt::Display for PostResetStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PostResetStep::Attest => "attest",
            PostResetStep::Update => "update",
            PostResetStep::Enroll => "enroll",
        })
    }
}

/// What the device keeps from the previous operator across a reset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResetAgreement {
    pub factory_certificate: CompactCertificate,
    pub firmware: VersionInfo,
    /// Fingerprints of roots allowed to remain.
    pub roots: Vec<Digest>,
    pub transfer: TransferMessage,
}

#[derive(Debug, Clone)]
pub struct DeviceState {
    device_id: Vec<u8>,
    phase: Phase,
    history: Vec<Phase>,
    factory_key: Option<KeyPair>,
    factory_cert: Option<CompactCertificate>,
    operational: Option<Credential>,
    previous_operational_keys: Vec<PublicKey>,
    trust_store: TrustStore,
    endpoints: Option<Endpoints>,
    firmware: Firmware,
    pending_transfer: Option<TransferMessage>,
    operator_signer: Option<PublicKey>,
    fallback_reason: Option<String>,
    fallback_contacted: bool,
}

impl DeviceState {
    pub fn new(device_id: &[u8], firmware: Firmware) -> Self {
        DeviceState {
            device_id: device_id.to_vec(),
            phase: Phase::Blank,
            history: vec![Phase::Blank],
            factory_key: None,
            factory_cert: None,
            operational: None,
            previous_operational_keys: Vec::new(),
            trust_store: TrustStore::new(),
            endpoints: None,
            firmware,
            pending_transfer: None,
            operator_signer: None,
            fallback_reason: None,
            fallback_contacted: false,
        }
    }

    pub fn device_id(&self) -> &[u8] {
        &self.device_id
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Every phase entered so far, starting with `Blank`.
    pub fn history(&self) -> &[Phase] {
        &self.history
    }

    pub fn factory_certificate(&self) -> Option<&CompactCertificate> {
        self.factory_cert.as_ref()
    }

    pub fn operational(&self) -> Option<&Credential> {
        self.operational.as_ref()
    }

    pub fn operational_certificate(&self) -> Option<&CompactCertificate> {
        self.operational.as_ref().map(|c| &c.certificate)
    }

    pub fn previous_operational_keys(&self) -> &[PublicKey] {
        &self.previous_operational_keys
    }

    pub fn trust_store(&self) -> &TrustStore {
        &self.trust_store
    }

    pub fn endpoints(&self) -> Option<&Endpoints> {
        self.endpoints.as_ref()
    }

    pub fn firmware(&self) -> &Firmware {
        &self.firmware
    }

    pub fn pending_transfer(&self) -> Option<&TransferMessage> {
        self.pending_transfer.as_ref()
    }

    pub fn operator_signer(&self) -> Option<&PublicKey> {
        self.operator_signer.as_ref()
    }

    pub fn fallback_reason(&self) -> Option<&str> {
        self.fallback_reason.as_deref()
    }

    pub fn fallback_contacted(&self) -> bool {
        self.fallback_contacted
    }

    fn transition(&mut self, to: Phase) {
        assert!(
            is_allowed_transition(self.phase, to),
            "illegal lifecycle edge {} -> {}",
            self.phase,
            to
        );
        self.phase = to;
        self.history.push(to);
    }

    fn require(&self, operation: &'static str, allowed: &[Phase]) -> Result<(), DeviceError> {
        if allowed.contains(&self.phase) {
            Ok(())
        } else {
            Err(DeviceError::WrongPhase {
                operation,
                phase: self.phase,
            })
        }
    }

    pub fn provision_factory(
        &mut self,
        factory_key: KeyPair,
        factory_cert: CompactCertificate,
        initial_store: TrustStore,
        ca_uri: Uri,
    ) -> Result<(), DeviceError> {
        self.require("provisionFactory", &[Phase::Blank])?;
        if factory_cert.subject_public_key != factory_key.public_key() {
            return Err(DeviceError::KeyCertMismatch);
        }
        self.factory_key = Some(factory_key);
        self.factory_cert = Some(factory_cert);
        self.trust_store = initial_store;
        self.endpoints = Some(Endpoints {
            ca_uri,
            update_uri: None,
            contact_update_before_enroll: false,
            ra_uri: None,
            fallback_uri: None,
        });
        self.transition(Phase::Provisioned);
        Ok(())
    }

    /// Factory identity, used for enrollment and for all post-reset contact.
    pub fn factory_credential(&self) -> Option<Credential> {
        Some(Credential {
            key: self.factory_key.clone()?,
            certificate: self.factory_cert.clone()?,
            chain: Vec::new(),
        })
    }

    /// The credential the device authenticates with right now.
    pub fn credential(&self) -> Option<Credential> {
        self.operational
            .clone()
            .or_else(|| self.factory_credential())
    }

    /// Credential for an enrollment request: the factory identity, except
    /// for renewals where the current operational certificate is used.
    pub fn enrollment_credential(&self) -> Option<Credential> {
        match self.phase {
            Phase::Enrolled | Phase::Reenrolled => self.credential(),
            _ => self.factory_credential(),
        }
    }

    fn can_enroll(&self) -> Result<(), DeviceError> {
        self.require(
            "enroll",
            &[
                Phase::Provisioned,
                Phase::Enrolled,
                Phase::ResetDone,
                Phase::Attested,
                Phase::Updated,
                Phase::Reenrolled,
            ],
        )
    }

    /// Generates a fresh operational key from `seed` and the CSR for it.
    pub fn prepare_enrollment(
        &self,
        seed: &[u8; 32],
    ) -> Result<(KeyPair, CertificateSigningRequest), DeviceError> {
        self.can_enroll()?;
        let key = generate_key_pair(seed).expect("seed is 32 bytes");
        let csr = CertificateSigningRequest::new(&key, &self.device_id, CertProfile::Operational);
        Ok((key, csr))
    }

    /// Installs a granted operational certificate. `key` is the pending key
    /// for on-device generation; server-generated grants carry their seed.
    pub fn complete_enrollment(
        &mut self,
        key: Option<KeyPair>,
        grant: EnrollGrant,
        now: TimeStamp,
    ) -> Result<(), DeviceError> {
        self.can_enroll()?;
        let key = match (key, grant.server_key_seed) {
            (_, Some(seed)) => generate_key_pair(&seed).expect("seed is 32 bytes"),
            (Some(key), None) => key,
            (None, None) => return Err(DeviceError::BadGrant("no key material".into())),
        };
        let cert = &grant.certificate;
        if cert.subject_public_key != key.public_key() {
            return Err(DeviceError::BadGrant(
                "certificate is for another key".into(),
            ));
        }
        if cert.profile != CertProfile::Operational {
            return Err(DeviceError::BadGrant(format!("profile {:?}", cert.profile)));
        }
        if cert.subject_name != self.device_id {
            return Err(DeviceError::BadGrant(
                "certificate names another device".into(),
            ));
        }
        if self.previous_operational_keys.contains(&key.public_key())
            || self.operational_certificate().map(|c| c.subject_public_key)
                == Some(key.public_key())
        {
            return Err(DeviceError::BadGrant("operational key reused".into()));
        }
        let mut store = self.trust_store.clone();
        for (root, persist) in &grant.roots {
            store
                .add_root(root.clone(), *persist)
                .map_err(|e| DeviceError::BadGrant(e.to_string()))?;
        }
        verify_chain(cert, &grant.chain, &store, now, &RevocationView::new())
            .map_err(|reason| DeviceError::BadGrant(reason.to_string()))?;
        for pin in &grant.pins {
            store.pin(*pin, false);
        }
        self.trust_store = store;
        if let Some(signer) = grant.operator_signer {
            self.operator_signer = Some(signer);
        }
        if let Some(old) = self.operational.take() {
            self.previous_operational_keys.push(old.key.public_key());
        }
        self.operational = Some(Credential {
            key,
            certificate: grant.certificate,
            chain: grant.chain,
        });
        let next = match self.phase {
            Phase::Provisioned | Phase::Enrolled => Phase::Enrolled,
            _ => Phase::Reenrolled,
        };
        self.transition(next);
        Ok(())
    }

    /// Installs a newer firmware manifest. The image becomes the genuine one
    /// for that sequence number.
    pub fn apply_firmware(&mut self, version: VersionInfo) -> Result<(), DeviceError> {
        self.require(
            "applyFirmware",
            &[Phase::Enrolled, Phase::ResetDone, Phase::Attested],
        )?;
        let current = self.firmware.version.manifest_sequence;
        if version.manifest_sequence <= current {
            return Err(DeviceError::StaleFirmware {
                current,
                offered: version.manifest_sequence,
            });
        }
        self.firmware = Firmware::genuine(version);
        Ok(())
    }

    /// Corrupts the installed image without touching its manifest.
    pub fn tamper_firmware(&mut self) {
        self.firmware.code_digest.0[0] ^= 0xff;
    }

    pub fn apply_truststore_update(
        &mut self,
        update: &TruststoreUpdate,
    ) -> Result<(), DeviceError> {
        self.require("truststoreUpdate", &[Phase::Enrolled])?;
        let mut store = self.trust_store.clone();
        for name in &update.remove {
            store.remove_root(name);
        }
        for root in &update.add {
            store
                .add_root(root.clone(), update.persist)
                .map_err(|e| DeviceError::BadGrant(e.to_string()))?;
        }
        self.trust_store = store;
        Ok(())
    }

    /// Validates a transfer CWT received from the current operator.
    pub fn handle_transfer_message(
        &mut self,
        envelope: &SignedEnvelope,
        now: TimeStamp,
    ) -> Result<(), DeviceError> {
        self.require("handleTransferMessage", &[Phase::Enrolled])?;
        let signer = self.operator_signer.ok_or(DeviceError::BadSignature)?;
        if envelope.header.profile != EnvelopeProfile::Cwt
            || !crypto::verify_envelope(&signer, envelope)
        {
            return Err(DeviceError::BadSignature);
        }
        let transfer =
            TransferMessage::decode(&envelope.payload).map_err(DeviceError::MalformedTransfer)?;
        if !transfer.reset_window_contains(now) {
            return Err(DeviceError::OutsideResetWindow {
                now,
                not_before: transfer.reset_not_before,
                not_after: transfer.reset_not_after,
            });
        }
        self.pending_transfer = Some(transfer);
        self.transition(Phase::TransferPending);
        Ok(())
    }

    /// Erases the current operator's material and points the device at the
    /// new operator. The window is checked again; outside it the device
    /// falls back without resetting.
    pub fn reset_to_agreed_state(&mut self, now: TimeStamp) -> Result<(), DeviceError> {
        self.require("resetToAgreedState", &[Phase::TransferPending])?;
        let transfer = self
            .pending_transfer
            .clone()
            .expect("transferPending holds a transfer");
        if !transfer.reset_window_contains(now) {
            self.enter_fallback(format!(
                "reset at {now} outside window [{}, {}]",
                transfer.reset_not_before, transfer.reset_not_after
            ));
            return Err(DeviceError::OutsideResetWindow {
                now,
                not_before: transfer.reset_not_before,
                not_after: transfer.reset_not_after,
            });
        }
        if let Some(old) = self.operational.take() {
            self.previous_operational_keys.push(old.key.public_key());
        }
        self.operator_signer = None;
        self.trust_store.retain_persistent();
        self.endpoints = Some(Endpoints {
            ca_uri: transfer.enroll_uri.clone(),
            update_uri: Some(transfer.update_uri.clone()),
            contact_update_before_enroll: transfer.contact_update_before_enroll,
            ra_uri: transfer.ra_uri.clone(),
            fallback_uri: Some(transfer.fallback_uri.clone()),
        });
        self.transition(Phase::ResetDone);
        Ok(())
    }

    /// Steps still to run after the reset, in order.
    pub fn post_reset_plan(&self) -> Vec<PostResetStep> {
        let Some(endpoints) = &self.endpoints else {
            return Vec::new();
        };
        let mut steps = Vec::new();
        if self.phase == Phase::ResetDone && endpoints.ra_uri.is_some() {
            steps.push(PostResetStep::Attest);
        }
        if matches!(self.phase, Phase::ResetDone | Phase::Attested)
            && endpoints.contact_update_before_enroll
        {
            steps.push(PostResetStep::Update);
        }
        if self.phase.is_post_reset() {
            steps.push(PostResetStep::Enroll);
        }
        steps
    }

    /// Response to an attestation challenge.
    pub fn ra_respond(&self, nonce: &[u8; 16]) -> Digest {
        attestation_response(&self.firmware.measurement(), nonce)
    }

    pub fn mark_attested(&mut self) -> Result<(), DeviceError> {
        self.require("markAttested", &[Phase::ResetDone])?;
        self.transition(Phase::Attested);
        Ok(())
    }

    /// Records the update-server contact, installing `offered` if newer.
    pub fn complete_update(&mut self, offered: Option<VersionInfo>) -> Result<(), DeviceError> {
        self.require("completeUpdate", &[Phase::ResetDone, Phase::Attested])?;
        if let Some(version) = offered {
            if version.manifest_sequence > self.firmware.version.manifest_sequence {
                self.firmware = Firmware::genuine(version);
            }
        }
        self.transition(Phase::Updated);
        Ok(())
    }

    /// Gives up on the new operator. Allowed from any transfer phase.
    pub fn enter_fallback(&mut self, reason: impl Into<String>) {
        if self.phase != Phase::Fallback {
            self.transition(Phase::Fallback);
            self.fallback_reason = Some(reason.into());
            self.operational = None;
        }
    }

    pub fn mark_fallback_contacted(&mut self) {
        debug_assert_eq!(self.phase, Phase::Fallback);
        self.fallback_contacted = true;
    }

    /// Lists every post-reset value that is not covered by `agreement`.
    pub fn audit_reset(&self, agreement: &ResetAgreement) -> Vec<String> {
        let mut violations = Vec::new();
        if self.operational.is_some() {
            violations.push("operational credential retained".to_string());
        }
        if self.operator_signer.is_some() {
            violations.push("previous operator signer key retained".to_string());
        }
        if !self.trust_store.pinned().is_empty() {
            violations.push(format!(
                "{} pinned digests retained",
                self.trust_store.pinned().len()
            ));
        }
        for root in self.trust_store.roots() {
            if !agreement.roots.contains(&root.fingerprint()) {
                violations.push(format!("root {} not in agreement", root.subject()));
            }
        }
        if self.factory_cert.as_ref() != Some(&agreement.factory_certificate) {
            violations.push("factory certificate differs".to_string());
        }
        if self.firmware.version != agreement.firmware {
            violations.push(format!(
                "firmware sequence {} not agreed ({})",
                self.firmware.version.manifest_sequence, agreement.firmware.manifest_sequence
            ));
        }
        let t = &agreement.transfer;
        let expected = Endpoints {
            ca_uri: t.enroll_uri.clone(),
            update_uri: Some(t.update_uri.clone()),
            contact_update_before_enroll: t.contact_update_before_enroll,
            ra_uri: t.ra_uri.clone(),
            fallback_uri: Some(t.fallback_uri.clone()),
        };
        if self.endpoints.as_ref() != Some(&expected) {
            violations.push("endpoints differ from transfer message".to_string());
        }
        violations
    }

    /// One-line-per-field dump.
    pub fn report(&self) -> String {
        let mut out = String::new();
        let id = String::from_utf8_lossy(&self.device_id);
        let _ = writeln!(out, "device={id} phase={}", self.phase);
        let history: Vec<_> = self.history.iter().map(|p| p.name()).collect();
        let _ = writeln!(out, "device={id} history={}", history.join(","));
        let _ = writeln!(
            out,
            "device={id} firmware.seq={} firmware.measurement={}",
            self.firmware.version.manifest_sequence,
            self.firmware.measurement()
        );
        match &self.operational {
            Some(c) => {
                let _ = writeln!(
                    out,
                    "device={id} operational.issuer={} operational.serial={}",
                    c.certificate.issuer(),
                    c.certificate.serial
                );
            }
            None => {
                let _ = writeln!(out, "device={id} operational=none");
            }
        }
        let roots: Vec<_> = self.trust_store.roots().map(|r| r.subject()).collect();
        let _ = writeln!(
            out,
            "device={id} truststore.roots={} truststore.pins={}",
            roots.join(","),
            self.trust_store.pinned().len()
        );
        if let Some(e) = &self.endpoints {
            let opt = |u: &Option<Uri>| u.as_ref().map_or("-".to_string(), Uri::to_string);
            let _ = writeln!(
                out,
                "device={id} endpoints.ca={} endpoints.update={} endpoints.ra={} endpoints.fallback={}",
                e.ca_uri,
                opt(&e.update_uri),
                opt(&e.ra_uri),
                opt(&e.fallback_uri)
            );
        }
        if let Some(reason) = &self.fallback_reason {
            let _ = writeln!(
                out,
                "device={id} fallback.reason={reason:?} fallback.contacted={}",
                self.fallback_contacted
            );
        }
        out
    }
}

/// `digest(measurement || nonce)`.
pub fn attestation_response(measurement: &Digest, nonce: &[u8; 16]) -> Digest {
    digest_parts(&[b"ra-response", &measurement.0, nonce])
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetError {
    #[error("no response")]
    Unreachable,
    #[error("peer rejected request: {0}")]
    Rejected(String),
    #[error("peer not trusted: {0}")]
    PeerUntrusted(ChainFailure),
}

/// Request/response exchanges a device makes, each over a fresh
/// authenticated session.
pub trait DeviceNetwork {
    fn enroll(
        &mut self,
        ca_uri: &Uri,
        credential: &Credential,
        trust_store: &TrustStore,
        request: EnrollRequest,
        now: TimeStamp,
    ) -> Result<EnrollGrant, NetError>;

    /// Runs one attestation round; `prover` answers the verifier's nonce.
    fn attest(
        &mut self,
        ra_uri: &Uri,
        credential: &Credential,
        trust_store: &TrustStore,
        now: TimeStamp,
        prover: &mut dyn FnMut(&[u8; 16]) -> Digest,
    ) -> Result<bool, NetError>;

    fn update(
        &mut self,
        update_uri: &Uri,
        credential: &Credential,
        trust_store: &TrustStore,
        now: TimeStamp,
        current: &VersionInfo,
    ) -> Result<Option<VersionInfo>, NetError>;

    fn contact_fallback(
        &mut self,
        fallback_uri: &Uri,
        credential: &Credential,
        trust_store: &TrustStore,
        now: TimeStamp,
        reason: &str,
    ) -> Result<(), NetError>;
}

fn fresh_seed(rng: &mut impl RngCore) -> [u8; 32] {
    let mut seed = [0u8; 32];
    rng.fill_bytes(&mut seed);
    seed
}

/// One enrollment attempt at the device's configured CA.
pub fn enroll_once(
    device: &mut DeviceState,
    net: &mut impl DeviceNetwork,
    now: TimeStamp,
    keygen: KeyGeneration,
    rng: &mut impl RngCore,
) -> Result<CompactCertificate, DeviceError> {
    device.can_enroll()?;
    let credential = device
        .enrollment_credential()
        .expect("provisioned devices hold a factory credential");
    let ca_uri = device
        .endpoints
        .as_ref()
        .expect("provisioned")
        .ca_uri
        .clone();
    let (key, request) = match keygen {
        KeyGeneration::OnDevice => {
            let (key, csr) = device.prepare_enrollment(&fresh_seed(rng))?;
            (Some(key), EnrollRequest::Csr(csr))
        }
        KeyGeneration::ServerGenerated => (None, EnrollRequest::ServerKeygen),
    };
    let grant = net
        .enroll(&ca_uri, &credential, &device.trust_store, request, now)
        .map_err(|e| DeviceError::EnrollRejected(e.to_string()))?;
    device.complete_enrollment(key, grant, now)?;
    Ok(device
        .operational_certificate()
        .expect("just enrolled")
        .clone())
}

/// First enrollment with the original operator's CA.
pub fn initial_enroll(
    device: &mut DeviceState,
    net: &mut impl DeviceNetwork,
    now: TimeStamp,
    keygen: KeyGeneration,
    rng: &mut impl RngCore,
) -> Result<CompactCertificate, DeviceError> {
    device.require("initialEnroll", &[Phase::Provisioned])?;
    enroll_once(device, net, now, keygen, rng)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PostResetReport {
    /// Each attempt in order, with its outcome.
    pub attempts: Vec<(PostResetStep, Result<(), String>)>,
    pub final_phase: Phase,
}

impl PostResetReport {
    /// Steps that completed, in completion order.
    pub fn completed(&self) -> Vec<PostResetStep> {
        self.attempts
            .iter()
            .filter(|(_, r)| r.is_ok())
            .map(|(s, _)| *s)
            .collect()
    }
}

/// Runs attestation, update and re-enrollment as the transfer message
/// demands. Each step gets `retry_budget` attempts; when a step is
/// exhausted the device falls back and reports to the fallback URI.
pub fn run_post_reset_sequence(
    device: &mut DeviceState,
    net: &mut impl DeviceNetwork,
    now: TimeStamp,
    keygen: KeyGeneration,
    retry_budget: u32,
    rng: &mut impl RngCore,
) -> Result<PostResetReport, DeviceError> {
    device.require("runPostResetSequence", &[Phase::ResetDone])?;
    let mut attempts = Vec::new();
    'steps: for step in device.post_reset_plan() {
        let mut last_error = String::new();
        for _ in 0..retry_budget.max(1) {
            let outcome = run_step(device, net, step, now, keygen, rng);
            attempts.push((step, outcome.clone()));
            match outcome {
                Ok(()) => continue 'steps,
                Err(e) if e.starts_with("permanent:") => {
                    last_error = e;
                    break;
                }
                Err(e) => last_error = e,
            }
        }
        device.enter_fallback(format!("{step} failed: {last_error}"));
        break;
    }
    if device.phase == Phase::Fallback {
        let fallback = device
            .endpoints
            .as_ref()
            .and_then(|e| e.fallback_uri.clone())
            .expect("reset installs a fallback uri");
        let credential = device.factory_credential().expect("factory credential");
        let reason = device.fallback_reason.clone().unwrap_or_default();
        for _ in 0..retry_budget.max(1) * 2 {
            if net
                .contact_fallback(&fallback, &credential, &device.trust_store, now, &reason)
                .is_ok()
            {
                device.mark_fallback_contacted();
                break;
            }
        }
    }
    Ok(PostResetReport {
        attempts,
        final_phase: device.phase,
    })
}

fn run_step(
    device: &mut DeviceState,
    net: &mut impl DeviceNetwork,
    step: PostResetStep,
    now: TimeStamp,
    keygen: KeyGeneration,
    rng: &mut impl RngCore,
) -> Result<(), String> {
    let credential = device.factory_credential().expect("factory credential");
    let endpoints = device.endpoints.clone().expect("reset installs endpoints");
    match step {
        PostResetStep::Attest => {
            let uri = endpoints
                .ra_uri
                .expect("attest planned only with an RA uri");
            let firmware = device.firmware.clone();
            let mut prover =
                |nonce: &[u8; 16]| attestation_response(&firmware.measurement(), nonce);
            match net.attest(&uri, &credential, &device.trust_store, now, &mut prover) {
                Ok(true) => device.mark_attested().map_err(|e| e.to_string()),
                Ok(false) => Err("permanent: attestation verdict negative".into()),
                Err(e) => Err(e.to_string()),
            }
        }
        PostResetStep::Update => {
            let uri = endpoints
                .update_uri
                .expect("update planned only with an update uri");
            let current = device.firmware.version.clone();
            let offered = net
                .update(&uri, &credential, &device.trust_store, now, &current)
                .map_err(|e| e.to_string())?;
            device.complete_update(offered).map_err(|e| e.to_string())
        }
        PostResetStep::Enroll => enroll_once(device, net, now, keygen, rng)
            .map(|_| ())
            .map_err(|e| e.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lifecycle_edges() {
        use Phase::*;
        assert!(is_allowed_transition(Blank, Provisioned));
        assert!(is_allowed_transition(Enrolled, Enrolled));
        assert!(is_allowed_transition(ResetDone, Reenrolled));
        assert!(!is_allowed_transition(Provisioned, TransferPending));
        assert!(!is_allowed_transition(Enrolled, ResetDone));
        assert!(!is_allowed_transition(Fallback, Reenrolled));
        assert!(!is_allowed_transition(Updated, Attested));
        for p in Phase::ALL {
            assert_eq!(p.name().parse::<Phase>().unwrap(), p);
            assert!(!is_allowed_transition(Fallback, p));
        }
    }

    #[test]
    fn measurement_tracks_image() {
        let v = VersionInfo {
            manifest_sequence: 3,
            manifest_uri: Uri::new("coaps://fw.example/3").unwrap(),
        };
        let genuine = Firmware::genuine(v.clone());
        let mut device = DeviceState::new(b"dev", genuine.clone());
        let nonce = [7u8; 16];
        let expected = attestation_response(&genuine.measurement(), &nonce);
        assert_eq!(device.ra_respond(&nonce), expected);
        assert_ne!(device.ra_respond(&[8u8; 16]), expected);
        device.tamper_firmware();
        assert_ne!(device.ra_respond(&nonce), expected);
    }
}
