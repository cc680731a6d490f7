// SPDX-License-Identifier: Apache-2.0

//! Service-provider logic: building and verifying the signed device list,
//! preparing and relaying the transfer message, attestation and updates.

use std::collections::BTreeMap;

use rand::RngCore;
use thiserror::Error;

use crate::codec::{CodecError, WireCodec};
use crate::crypto::{self, sign_envelope, Digest, KeyPair, PublicKey};
use crate::device::attestation_response;
use crate::messages::{
    DeviceUpdateInfo, EnvelopeProfile, SignedEnvelope, TimeStamp, TransferMessage, UpdateInfoList,
    Uri, VersionInfo,
};
use crate::pki::{Capability, CertificateAuthority, CompactCertificate, PkiError, RevocationView};
use crate::session::AuthenticatedSession;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OperatorError {
    #[error("device {0} is not managed by this operator")]
    UnknownDevice(String),
    #[error("no signer key agreed with {0}")]
    UnknownPeer(String),
    #[error("device list signature does not verify under the agreed SP1 key")]
    BadSp1Signature,
    #[error("transfer message signature does not verify under the agreed SP2 key")]
    BadSp2Signature,
    #[error("malformed payload: {0}")]
    Malformed(CodecError),
    #[error("registration with the new CA failed: {0}")]
    RegistrationFailed(PkiError),
    #[error("no expected measurement for device {0}")]
    NoExpectedMeasurement(String),
    #[error("no outstanding challenge for device {0}")]
    NoChallenge(String),
    #[error("peer is not authenticated or not authorized")]
    PeerUntrusted,
}

fn display_id(id: &[u8]) -> String {
    String::from_utf8_lossy(id).into_owned()
}

/// What an operator knows about one device it manages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManagedDevice {
    pub factory_certificate: CompactCertificate,
    pub version: VersionInfo,
    /// Window in which the device may be handed over.
    pub transfer_window: (TimeStamp, TimeStamp),
}

#[derive(Debug, Clone)]
pub struct OperatorState {
    pub name: Vec<u8>,
    pub signing_key: KeyPair,
    /// Signer keys of counterpart operators, fixed by the agreement.
    pub peer_signer_keys: BTreeMap<Vec<u8>, PublicKey>,
    pub managed_devices: BTreeMap<Vec<u8>, ManagedDevice>,
    pub update_server_uri: Uri,
    /// Firmware the update server hands out.
    pub current_firmware: VersionInfo,
}

impl OperatorState {
    pub fn new(
        name: &[u8],
        signing_key: KeyPair,
        update_server_uri: Uri,
        current_firmware: VersionInfo,
    ) -> Self {
        OperatorState {
            name: name.to_vec(),
            signing_key,
            peer_signer_keys: BTreeMap::new(),
            managed_devices: BTreeMap::new(),
            update_server_uri,
            current_firmware,
        }
    }

    pub fn agree_signer(&mut self, peer: &[u8], key: PublicKey) {
        self.peer_signer_keys.insert(peer.to_vec(), key);
    }

    pub fn manage(&mut self, device_id: &[u8], device: ManagedDevice) {
        self.managed_devices.insert(device_id.to_vec(), device);
    }

    fn peer_key(&self, peer: &[u8]) -> Result<&PublicKey, OperatorError> {
        self.peer_signer_keys
            .get(peer)
            .ok_or_else(|| OperatorError::UnknownPeer(display_id(peer)))
    }

    /// Device id of a managed device with this factory certificate.
    pub fn device_for_factory_cert(&self, cert: &CompactCertificate) -> Option<&[u8]> {
        self.managed_devices
            .iter()
            .find(|(_, d)| &d.factory_certificate == cert)
            .map(|(id, _)| id.as_slice())
    }
}

/// Builds the unsigned list for `device_ids`, in the order given.
pub fn build_update_info_list(
    sp1: &OperatorState,
    device_ids: &[Vec<u8>],
) -> Result<UpdateInfoList, OperatorError> {
    let mut entries = Vec::with_capacity(device_ids.len());
    for id in device_ids {
        let device = sp1
            .managed_devices
            .get(id)
            .ok_or_else(|| OperatorError::UnknownDevice(display_id(id)))?;
        entries.push(DeviceUpdateInfo {
            factory_certificate: device.factory_certificate.clone(),
            update_not_before: device.transfer_window.0,
            update_not_after: device.transfer_window.1,
            version: device.version.clone(),
        });
    }
    let list = UpdateInfoList { entries };
    list.validate().map_err(OperatorError::Malformed)?;
    Ok(list)
}

/// Signs the device list for the new operator.
pub fn sp1_build_update_info_list(
    sp1: &OperatorState,
    device_ids: &[Vec<u8>],
) -> Result<SignedEnvelope, OperatorError> {
    let list = build_update_info_list(sp1, device_ids)?;
    let payload = list.encode().map_err(OperatorError::Malformed)?;
    Ok(
        sign_envelope(&sp1.signing_key, EnvelopeProfile::UpdateList, &payload)
            .expect("encoded list is never empty"),
    )
}

/// Verifies the device list under the key agreed with `sp1_name`.
pub fn sp2_verify_update_info_list(
    sp2: &OperatorState,
    sp1_name: &[u8],
    envelope: &SignedEnvelope,
) -> Result<UpdateInfoList, OperatorError> {
    let key = sp2.peer_key(sp1_name)?;
    if envelope.header.profile != EnvelopeProfile::UpdateList
        || !crypto::verify_envelope(key, envelope)
    {
        return Err(OperatorError::BadSp1Signature);
    }
    UpdateInfoList::decode(&envelope.payload).map_err(OperatorError::Malformed)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferOptions {
    pub ra_uri: Option<Uri>,
    pub contact_update_before_enroll: bool,
    /// Placeholder for the fallback claim; SP1 overwrites it when relaying.
    pub fallback_uri: Uri,
}

/// Smallest window covering every per-device window in `list`.
pub fn window_hull(list: &UpdateInfoList) -> Option<(TimeStamp, TimeStamp)> {
    let start = list.entries.iter().map(|e| e.update_not_before).min()?;
    let end = list.entries.iter().map(|e| e.update_not_after).max()?;
    Some((start, end))
}

/// Builds and signs the transfer message once registration returned
/// `enroll_uri`. Devices in the list become managed by `sp2`.
pub fn sp2_build_transfer(
    sp2: &mut OperatorState,
    list: &UpdateInfoList,
    enroll_uri: Uri,
    options: &TransferOptions,
) -> Result<(SignedEnvelope, TransferMessage), OperatorError> {
    let (reset_not_before, reset_not_after) =
        window_hull(list).unwrap_or((TimeStamp(0), TimeStamp(0)));
    let transfer = TransferMessage {
        reset_not_before,
        reset_not_after,
        ra_uri: options.ra_uri.clone(),
        update_uri: sp2.update_server_uri.clone(),
        contact_update_before_enroll: options.contact_update_before_enroll,
        enroll_uri,
        fallback_uri: options.fallback_uri.clone(),
    };
    let payload = transfer.encode().map_err(OperatorError::Malformed)?;
    let envelope = sign_envelope(&sp2.signing_key, EnvelopeProfile::Cwt, &payload)
        .expect("encoded transfer message is never empty");
    for entry in &list.entries {
        sp2.manage(
            &entry.factory_certificate.subject_name,
            ManagedDevice {
                factory_certificate: entry.factory_certificate.clone(),
                version: entry.version.clone(),
                transfer_window: (entry.update_not_before, entry.update_not_after),
            },
        );
    }
    Ok((envelope, transfer))
}

/// Registers the listed factory certificates with `ca2` and prepares the
/// signed transfer message.
pub fn sp2_prepare_transfer(
    sp2: &mut OperatorState,
    list: &UpdateInfoList,
    ca2: &mut CertificateAuthority,
    now: TimeStamp,
    revocations: &RevocationView,
    options: &TransferOptions,
) -> Result<(SignedEnvelope, TransferMessage), OperatorError> {
    let enroll_uri = ca2
        .register_update_info_list(list, now, revocations)
        .map_err(OperatorError::RegistrationFailed)?;
    sp2_build_transfer(sp2, list, enroll_uri, options)
}

/// Verifies the new operator's transfer message and re-signs it for one
/// device, with the fallback claim pointing at SP1's update server.
pub fn sp1_relay_transfer(
    sp1: &OperatorState,
    sp2_name: &[u8],
    sp2_envelope: &SignedEnvelope,
    device_id: &[u8],
) -> Result<SignedEnvelope, OperatorError> {
    let key = sp1.peer_key(sp2_name)?;
    if sp2_envelope.header.profile != EnvelopeProfile::Cwt
        || !crypto::verify_envelope(key, sp2_envelope)
    {
        return Err(OperatorError::BadSp2Signature);
    }
    if !sp1.managed_devices.contains_key(device_id) {
        return Err(OperatorError::UnknownDevice(display_id(device_id)));
    }
    let mut transfer =
        TransferMessage::decode(&sp2_envelope.payload).map_err(OperatorError::Malformed)?;
    transfer.fallback_uri = sp1.update_server_uri.clone();
    let payload = transfer.encode().map_err(OperatorError::Malformed)?;
    Ok(
        sign_envelope(&sp1.signing_key, EnvelopeProfile::Cwt, &payload)
            .expect("encoded transfer message is never empty"),
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RaExchange {
    pub nonce: [u8; 16],
    pub device_id: Vec<u8>,
    pub reported_measurement: Digest,
    pub verdict: bool,
}

/// Attestation verifier holding expected measurements shared by SP1.
#[derive(Debug, Clone, Default)]
pub struct RaVerifier {
    expected: BTreeMap<Vec<u8>, Digest>,
    outstanding: BTreeMap<Vec<u8>, [u8; 16]>,
}

impl RaVerifier {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn expect(&mut self, device_id: &[u8], measurement: Digest) {
        self.expected.insert(device_id.to_vec(), measurement);
    }

    pub fn expected(&self, device_id: &[u8]) -> Option<&Digest> {
        self.expected.get(device_id)
    }

    /// Issues a fresh nonce, replacing any earlier one for the device.
    pub fn challenge(
        &mut self,
        device_id: &[u8],
        rng: &mut impl RngCore,
    ) -> Result<[u8; 16], OperatorError> {
        if !self.expected.contains_key(device_id) {
            return Err(OperatorError::NoExpectedMeasurement(display_id(device_id)));
        }
        let mut nonce = [0u8; 16];
        rng.fill_bytes(&mut nonce);
        self.outstanding.insert(device_id.to_vec(), nonce);
        Ok(nonce)
    }

    /// Checks a response against the outstanding nonce, which is consumed.
    pub fn verify(
        &mut self,
        device_id: &[u8],
        nonce: &[u8; 16],
        reported: Digest,
    ) -> Result<RaExchange, OperatorError> {
        let expected = *self
            .expected
            .get(device_id)
            .ok_or_else(|| OperatorError::NoExpectedMeasurement(display_id(device_id)))?;
        let issued = self
            .outstanding
            .remove(device_id)
            .ok_or_else(|| OperatorError::NoChallenge(display_id(device_id)))?;
        let verdict = &issued == nonce && reported == attestation_response(&expected, &issued);
        Ok(RaExchange {
            nonce: *nonce,
            device_id: device_id.to_vec(),
            reported_measurement: reported,
            verdict,
        })
    }
}

/// Answers a device's update query: the newer manifest, or `None` when the
/// device is current.
pub fn update_server_serve(
    operator: &OperatorState,
    session: &AuthenticatedSession,
    current: &VersionInfo,
) -> Result<Option<VersionInfo>, OperatorError> {
    if !session.is_established()
        || !session
            .peer_certificate()
            .profile
            .permits(Capability::FirmwareUpdate)
    {
        return Err(OperatorError::PeerUntrusted);
    }
    if current.manifest_sequence < operator.current_firmware.manifest_sequence {
        Ok(Some(operator.current_firmware.clone()))
    } else {
        Ok(None)
    }
}
