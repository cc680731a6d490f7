// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::{
    verify_chain, CertProfile, CertRef, ChainFailure, CompactCertificate, RevocationView,
    TbsCertificate, TrustStore,
};
use crate::crypto::{KeyPair, PublicKey};
use crate::messages::{CertificateSigningRequest, TimeStamp, UpdateInfoList, Uri};
use crate::session::{AuthenticatedSession, Credential};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PkiError {
    #[error("proof of possession does not verify")]
    BadProofOfPossession,
    #[error("validity window inverted: {not_before} > {not_after}")]
    InvalidValidityWindow {
        not_before: TimeStamp,
        not_after: TimeStamp,
    },
    #[error("factory certificate {serial} does not verify: {reason}")]
    UnverifiableFactoryCert { serial: u64, reason: String },
    #[error("{subject} is not registered with this authority")]
    NotRegistered { subject: String },
    #[error("factory certificate {serial} is revoked")]
    RevokedFactoryCert { serial: u64 },
    #[error("operational certificate {serial} is revoked")]
    RevokedCredential { serial: u64 },
    #[error("request for {requested:?} over a session authenticated as {authenticated:?}")]
    NameMismatch {
        authenticated: String,
        requested: String,
    },
    #[error("{0:?} certificates cannot authorize enrollment")]
    ProfileNotAllowed(CertProfile),
    #[error("session is not established")]
    NotAuthenticated,
    #[error("serial {0} was never issued by this authority")]
    UnknownSerial(u64),
}

/// Issuing authority with its registration and revocation state.
#[derive(Debug, Clone)]
pub struct CertificateAuthority {
    name: Vec<u8>,
    key: KeyPair,
    certificate: CompactCertificate,
    /// Non-root ancestors of `certificate`, nearest first.
    chain: Vec<CompactCertificate>,
    trust_store: TrustStore,
    registered_factory: BTreeMap<u64, CompactCertificate>,
    next_serial: u64,
    issued: BTreeMap<u64, Vec<u8>>,
    revoked: BTreeSet<u64>,
    enroll_uri: Uri,
    operational_lifetime: u64,
}

const DEFAULT_OPERATIONAL_LIFETIME: u64 = 3600;

impl CertificateAuthority {
    /// Creates a self-signed root authority. The root trusts itself.
    pub fn root(
        name: &[u8],
        key: KeyPair,
        validity: (TimeStamp, TimeStamp),
        enroll_uri: Uri,
    ) -> Result<Self, PkiError> {
        check_window(validity)?;
        let certificate = TbsCertificate {
            serial: 1,
            subject_name: name.to_vec(),
            subject_public_key: key.public_key(),
            issuer_name: name.to_vec(),
            not_before: validity.0,
            not_after: validity.1,
            profile: CertProfile::RootCa,
        }
        .sign(&key);
        let mut trust_store = TrustStore::new();
        trust_store
            .add_root(certificate.clone(), true)
            .expect("freshly built root is self-signed");
        Ok(CertificateAuthority {
            name: name.to_vec(),
            key,
            issued: BTreeMap::from([(1, name.to_vec())]),
            certificate,
            chain: Vec::new(),
            trust_store,
            registered_factory: BTreeMap::new(),
            next_serial: 2,
            revoked: BTreeSet::new(),
            enroll_uri,
            operational_lifetime: DEFAULT_OPERATIONAL_LIFETIME,
        })
    }

    /// Creates an authority whose certificate is issued by `parent`. It
    /// trusts the root `parent` chains to.
    pub fn subordinate(
        name: &[u8],
        key: KeyPair,
        parent: &mut CertificateAuthority,
        validity: (TimeStamp, TimeStamp),
        enroll_uri: Uri,
    ) -> Result<Self, PkiError> {
        let certificate =
            parent.certify_key(name, key.public_key(), CertProfile::SubCa, validity)?;
        let mut chain = vec![];
        if parent.certificate.profile != CertProfile::RootCa {
            chain.push(parent.certificate.clone());
            chain.extend(parent.chain.iter().cloned());
        }
        let mut trust_store = TrustStore::new();
        for root in parent
            .trust_store
            .roots()
            .filter(|r| r.subject_name == parent.root_name())
        {
            trust_store
                .add_root(root.clone(), true)
                .expect("parent trust store holds only roots");
        }
        Ok(CertificateAuthority {
            name: name.to_vec(),
            key,
            certificate,
            chain,
            trust_store,
            registered_factory: BTreeMap::new(),
            next_serial: 1,
            issued: BTreeMap::new(),
            revoked: BTreeSet::new(),
            enroll_uri,
            operational_lifetime: DEFAULT_OPERATIONAL_LIFETIME,
        })
    }

    pub fn name(&self) -> &[u8] {
        &self.name
    }

    pub fn certificate(&self) -> &CompactCertificate {
        &self.certificate
    }

    /// Intermediates a relying party needs to reach the root, nearest first.
    pub fn chain(&self) -> &[CompactCertificate] {
        &self.chain
    }

    /// Chain to present for a certificate this authority issued.
    pub fn issued_chain(&self) -> Vec<CompactCertificate> {
        if self.certificate.profile == CertProfile::RootCa {
            Vec::new()
        } else {
            let mut chain = vec![self.certificate.clone()];
            chain.extend(self.chain.iter().cloned());
            chain
        }
    }

    /// Subject name of the root this authority chains to.
    pub fn root_name(&self) -> Vec<u8> {
        self.chain
            .last()
            .unwrap_or(&self.certificate)
            .issuer_name
            .clone()
    }

    pub fn public_key(&self) -> PublicKey {
        self.key.public_key()
    }

    /// The authority's own certificate and key, for serving requests over
    /// authenticated sessions.
    pub fn session_credential(&self) -> Credential {
        Credential {
            key: self.key.clone(),
            certificate: self.certificate.clone(),
            chain: self.chain.clone(),
        }
    }

    pub fn enroll_uri(&self) -> &Uri {
        &self.enroll_uri
    }

    pub fn set_enroll_uri(&mut self, uri: Uri) {
        self.enroll_uri = uri;
    }

    pub fn trust_store(&self) -> &TrustStore {
        &self.trust_store
    }

    /// Adds a root used to verify factory certificates and peers.
    pub fn trust_root(&mut self, root: CompactCertificate) -> Result<(), super::TrustStoreError> {
        self.trust_store.add_root(root, true)
    }

    pub fn set_operational_lifetime(&mut self, seconds: u64) {
        self.operational_lifetime = seconds;
    }

    pub fn operational_lifetime(&self) -> u64 {
        self.operational_lifetime
    }

    pub fn is_registered(&self, factory_serial: u64) -> bool {
        self.registered_factory.contains_key(&factory_serial)
    }

    pub fn registered_count(&self) -> usize {
        self.registered_factory.len()
    }

    /// Serial the next issued certificate will carry.
    pub fn next_serial(&self) -> u64 {
        self.next_serial
    }

    /// Signs a certificate for `public_key` without a request. Used while
    /// setting up hierarchies and server credentials.
    pub fn certify_key(
        &mut self,
        subject_name: &[u8],
        public_key: PublicKey,
        profile: CertProfile,
        validity: (TimeStamp, TimeStamp),
    ) -> Result<CompactCertificate, PkiError> {
        check_window(validity)?;
        let serial = self.next_serial;
        self.next_serial += 1;
        self.issued.insert(serial, subject_name.to_vec());
        Ok(TbsCertificate {
            serial,
            subject_name: subject_name.to_vec(),
            subject_public_key: public_key,
            issuer_name: self.name.clone(),
            not_before: validity.0,
            not_after: validity.1,
            profile,
        }
        .sign(&self.key))
    }

    pub fn issue_certificate(
        &mut self,
        csr: &CertificateSigningRequest,
        profile: CertProfile,
        validity: (TimeStamp, TimeStamp),
    ) -> Result<CompactCertificate, PkiError> {
        if !csr.verify_proof_of_possession() {
            return Err(PkiError::BadProofOfPossession);
        }
        self.certify_key(&csr.subject_name, csr.subject_public_key, profile, validity)
    }

    /// Registers factory certificates for later enrollment and returns the
    /// enrollment URI. Nothing is registered unless every certificate
    /// verifies against this authority's trust store.
    pub fn register_factory_certs(
        &mut self,
        certificates: &[CompactCertificate],
        now: TimeStamp,
        revocations: &RevocationView,
    ) -> Result<Uri, PkiError> {
        for cert in certificates {
            if cert.profile != CertProfile::Factory {
                return Err(PkiError::UnverifiableFactoryCert {
                    serial: cert.serial,
                    reason: format!("profile {:?}", cert.profile),
                });
            }
            verify_chain(cert, &[], &self.trust_store, now, revocations).map_err(|reason| {
                PkiError::UnverifiableFactoryCert {
                    serial: cert.serial,
                    reason: reason.to_string(),
                }
            })?;
        }
        for cert in certificates {
            self.registered_factory.insert(cert.serial, cert.clone());
        }
        Ok(self.enroll_uri.clone())
    }

    pub fn register_update_info_list(
        &mut self,
        list: &UpdateInfoList,
        now: TimeStamp,
        revocations: &RevocationView,
    ) -> Result<Uri, PkiError> {
        let certs: Vec<_> = list
            .entries
            .iter()
            .map(|e| e.factory_certificate.clone())
            .collect();
        self.register_factory_certs(&certs, now, revocations)
    }

    /// Checks that `session`'s peer may obtain an operational certificate
    /// and returns the subject name it is entitled to.
    pub fn authorize_enrollment(
        &self,
        session: &AuthenticatedSession,
        revocations: &RevocationView,
    ) -> Result<Vec<u8>, PkiError> {
        if !session.is_established() {
            return Err(PkiError::NotAuthenticated);
        }
        let peer = session.peer_certificate();
        match peer.profile {
            CertProfile::Factory => {
                match self.registered_factory.get(&peer.serial) {
                    Some(registered) if registered == peer => {}
                    _ => {
                        return Err(PkiError::NotRegistered {
                            subject: peer.subject(),
                        })
                    }
                }
                if revocations.contains(peer) {
                    return Err(PkiError::RevokedFactoryCert {
                        serial: peer.serial,
                    });
                }
            }
            // Renewal: an operational certificate from this authority.
            CertProfile::Operational => {
                if peer.issuer_name != self.name
                    || self.issued.get(&peer.serial) != Some(&peer.subject_name)
                {
                    return Err(PkiError::NotRegistered {
                        subject: peer.subject(),
                    });
                }
                if self.revoked.contains(&peer.serial) || revocations.contains(peer) {
                    return Err(PkiError::RevokedCredential {
                        serial: peer.serial,
                    });
                }
            }
            other => return Err(PkiError::ProfileNotAllowed(other)),
        }
        Ok(peer.subject_name.clone())
    }

    fn operational_window(&self, now: TimeStamp) -> (TimeStamp, TimeStamp) {
        let end = now
            .plus(self.operational_lifetime)
            .min(self.certificate.not_after);
        (now, end.max(now))
    }

    /// Issues an operational certificate to an authenticated device.
    pub fn enroll(
        &mut self,
        session: &AuthenticatedSession,
        csr: &CertificateSigningRequest,
        now: TimeStamp,
        revocations: &RevocationView,
    ) -> Result<CompactCertificate, PkiError> {
        let entitled = self.authorize_enrollment(session, revocations)?;
        if !csr.verify_proof_of_possession() {
            return Err(PkiError::BadProofOfPossession);
        }
        if csr.subject_name != entitled {
            return Err(PkiError::NameMismatch {
                authenticated: String::from_utf8_lossy(&entitled).into_owned(),
                requested: String::from_utf8_lossy(&csr.subject_name).into_owned(),
            });
        }
        let window = self.operational_window(now);
        self.issue_certificate(csr, CertProfile::Operational, window)
    }

    /// Enrollment for devices that cannot generate keys: the authority
    /// derives the key pair from `seed` and returns it with the certificate.
    pub fn enroll_server_generated(
        &mut self,
        session: &AuthenticatedSession,
        seed: &[u8; 32],
        now: TimeStamp,
        revocations: &RevocationView,
    ) -> Result<(KeyPair, CompactCertificate), PkiError> {
        let entitled = self.authorize_enrollment(session, revocations)?;
        let key = crate::crypto::generate_key_pair(seed).expect("seed is 32 bytes");
        let window = self.operational_window(now);
        let cert = self.certify_key(
            &entitled,
            key.public_key(),
            CertProfile::Operational,
            window,
        )?;
        Ok((key, cert))
    }

    pub fn revoke(&mut self, serial: u64) -> Result<(), PkiError> {
        if !self.issued.contains_key(&serial) {
            return Err(PkiError::UnknownSerial(serial));
        }
        self.revoked.insert(serial);
        Ok(())
    }

    pub fn is_revoked(&self, serial: u64) -> Result<bool, PkiError> {
        if !self.issued.contains_key(&serial) {
            return Err(PkiError::UnknownSerial(serial));
        }
        Ok(self.revoked.contains(&serial))
    }

    /// This authority's revocations, for merging into a relying party's view.
    pub fn revocation_entries(&self) -> impl Iterator<Item = CertRef> + '_ {
        self.revoked.iter().map(|&serial| CertRef {
            issuer: self.name.clone(),
            serial,
        })
    }

    pub fn verify_issued(
        &self,
        cert: &CompactCertificate,
        now: TimeStamp,
        revocations: &RevocationView,
    ) -> Result<(), ChainFailure> {
        verify_chain(
            cert,
            &self.issued_chain(),
            &self.trust_store,
            now,
            revocations,
        )
    }
}

fn check_window((not_before, not_after): (TimeStamp, TimeStamp)) -> Result<(), PkiError> {
    if not_before > not_after {
        return Err(PkiError::InvalidValidityWindow {
            not_before,
            not_after,
        });
    }
    Ok(())
}
