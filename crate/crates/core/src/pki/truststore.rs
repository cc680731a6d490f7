// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeSet;

use thiserror::Error;

use super::{CertProfile, CompactCertificate};
use crate::crypto::Digest;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TrustStoreError {
    #[error("certificate {0:?} is not a self-signed root")]
    NotSelfSignedRoot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrustAnchor {
    pub certificate: CompactCertificate,
    /// Survives a device reset.
    pub persist_across_reset: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PinnedCertificate {
    pub digest: Digest,
    pub persist_across_reset: bool,
}

/// Trusted roots plus digests of individually trusted non-root certificates.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrustStore {
    roots: Vec<TrustAnchor>,
    pinned: Vec<PinnedCertificate>,
}

impl TrustStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_roots<'a>(
        roots: impl IntoIterator<Item = &'a CompactCertificate>,
        persist_across_reset: bool,
    ) -> Result<Self, TrustStoreError> {
        let mut store = TrustStore::new();
        for root in roots {
            store.add_root(root.clone(), persist_across_reset)?;
        }
        Ok(store)
    }

    /// Adds a root. Re-adding an existing root only widens its persistence.
    pub fn add_root(
        &mut self,
        certificate: CompactCertificate,
        persist_across_reset: bool,
    ) -> Result<(), TrustStoreError> {
        if certificate.profile != CertProfile::RootCa || !certificate.is_self_signed() {
            return Err(TrustStoreError::NotSelfSignedRoot(certificate.subject()));
        }
        if let Some(existing) = self.roots.iter_mut().find(|a| a.certificate == certificate) {
            existing.persist_across_reset |= persist_across_reset;
        } else {
            self.roots.push(TrustAnchor {
                certificate,
                persist_across_reset,
            });
        }
        Ok(())
    }

    pub fn remove_root(&mut self, subject_name: &[u8]) -> bool {
        let before = self.roots.len();
        self.roots
            .retain(|a| a.certificate.subject_name != subject_name);
        before != self.roots.len()
    }

    pub fn pin(&mut self, digest: Digest, persist_across_reset: bool) {
        if let Some(existing) = self.pinned.iter_mut().find(|p| p.digest == digest) {
            existing.persist_across_reset |= persist_across_reset;
        } else {
            self.pinned.push(PinnedCertificate {
                digest,
                persist_across_reset,
            });
        }
    }

    pub fn roots(&self) -> impl Iterator<Item = &CompactCertificate> {
        self.roots.iter().map(|a| &a.certificate)
    }

    pub fn anchors(&self) -> &[TrustAnchor] {
        &self.roots
    }

    pub fn pinned(&self) -> &[PinnedCertificate] {
        &self.pinned
    }

    pub fn root_names(&self) -> BTreeSet<Vec<u8>> {
        self.roots
            .iter()
            .map(|a| a.certificate.subject_name.clone())
            .collect()
    }

    pub fn is_pinned(&self, digest: &Digest) -> bool {
        self.pinned.iter().any(|p| &p.digest == digest)
    }

    /// Roots whose subject matches `issuer_name`.
    pub(crate) fn roots_named<'a>(
        &'a self,
        issuer_name: &'a [u8],
    ) -> impl Iterator<Item = &'a CompactCertificate> + 'a {
        self.roots()
            .filter(move |r| r.subject_name.as_slice() == issuer_name)
    }

    /// Drops every entry not flagged to survive a reset.
    pub fn retain_persistent(&mut self) {
        self.roots.retain(|a| a.persist_across_reset);
        self.pinned.retain(|p| p.persist_across_reset);
    }

    pub fn is_empty(&self) -> bool {
        self.roots.is_empty() && self.pinned.is_empty()
    }
}
