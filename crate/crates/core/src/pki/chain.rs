// SPDX-License-Identifier: Apache-2.0

//! Certificate path validation.
//!
//! Paths are searched linearly: starting from the leaf, each link's issuer is
//! looked up among the trusted roots and then among the supplied
//! intermediates. Every link must be inside its validity window and absent
//! from the revocation view. A non-root link whose digest is pinned in the
//! trust store terminates the path successfully.

use std::collections::BTreeSet;
use std::fmt;

use super::{CertRef, CompactCertificate, TrustStore};
use crate::messages::TimeStamp;

/// Why a path did not verify.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChainFailure {
    Expired { serial: u64 },
    NotYetValid { serial: u64 },
    Revoked { serial: u64 },
    BadSignature { serial: u64 },
    UnknownIssuer { issuer: String },
    UntrustedRoot { subject: String },
    IssuerNotCa { issuer: String },
    PathTooLong,
}

impl fmt::Display for ChainFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChainFailure::Expired { serial } => write!(f, "Expired(serial={serial})"),
            ChainFailure::NotYetValid { serial } => write!(f, "NotYetValid(serial={serial})"),
            ChainFailure::Revoked { serial } => write!(f, "Revoked(serial={serial})"),
            ChainFailure::BadSignature { serial } => write!(f, "BadSignature(serial={serial})"),
            ChainFailure::UnknownIssuer { issuer } => write!(f, "UnknownIssuer({issuer})"),
            ChainFailure::UntrustedRoot { subject } => write!(f, "UntrustedRoot({subject})"),
            ChainFailure::IssuerNotCa { issuer } => write!(f, "IssuerNotCa({issuer})"),
            ChainFailure::PathTooLong => f.write_str("PathTooLong"),
        }
    }
}

/// Revoked certificates as seen by a relying party.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RevocationView {
    revoked: BTreeSet<CertRef>,
}

impl RevocationView {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, entry: CertRef) {
        self.revoked.insert(entry);
    }

    pub fn contains(&self, cert: &CompactCertificate) -> bool {
        self.revoked.contains(&cert.cert_ref())
    }

    pub fn len(&self) -> usize {
        self.revoked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.revoked.is_empty()
    }
}

impl FromIterator<CertRef> for RevocationView {
    fn from_iter<I: IntoIterator<Item = CertRef>>(iter: I) -> Self {
        RevocationView {
            revoked: iter.into_iter().collect(),
        }
    }
}

const MAX_PATH_LEN: usize = 8;

pub fn verify_chain(
    cert: &CompactCertificate,
    intermediates: &[CompactCertificate],
    store: &TrustStore,
    now: TimeStamp,
    revocations: &RevocationView,
) -> Result<(), ChainFailure> {
    let mut current = cert;
    for _ in 0..MAX_PATH_LEN {
        check_link(current, now, revocations)?;

        if store.roots().any(|r| r == current) {
            return Ok(());
        }
        if store.is_pinned(&current.fingerprint()) {
            return Ok(());
        }

        let mut named_issuer = false;
        for root in store.roots_named(&current.issuer_name) {
            named_issuer = true;
            if current.verify_signature(&root.subject_public_key) {
                check_link(root, now, revocations)?;
                return Ok(());
            }
        }

        if current.issuer_name == current.subject_name {
            return Err(if named_issuer {
                ChainFailure::BadSignature {
                    serial: current.serial,
                }
            } else {
                ChainFailure::UntrustedRoot {
                    subject: current.subject(),
                }
            });
        }

        let mut next = None;
        for candidate in intermediates
            .iter()
            .filter(|c| c.subject_name == current.issuer_name)
        {
            named_issuer = true;
            if current.verify_signature(&candidate.subject_public_key) {
                next = Some(candidate);
                break;
            }
        }
        match next {
            Some(issuer) if !issuer.profile.is_ca() => {
                return Err(ChainFailure::IssuerNotCa {
                    issuer: issuer.subject(),
                })
            }
            Some(issuer) => current = issuer,
            None if named_issuer => {
                return Err(ChainFailure::BadSignature {
                    serial: current.serial,
                })
            }
            None => {
                return Err(ChainFailure::UnknownIssuer {
                    issuer: current.issuer(),
                })
            }
        }
    }
    Err(ChainFailure::PathTooLong)
}

fn check_link(
    cert: &CompactCertificate,
    now: TimeStamp,
    revocations: &RevocationView,
) -> Result<(), ChainFailure> {
    if now < cert.not_before {
        return Err(ChainFailure::NotYetValid {
            serial: cert.serial,
        });
    }
    if now > cert.not_after {
        return Err(ChainFailure::Expired {
            serial: cert.serial,
        });
    }
    if revocations.contains(cert) {
        return Err(ChainFailure::Revoked {
            serial: cert.serial,
        });
    }
    Ok(())
}
