// SPDX-License-Identifier: Apache-2.0

//! Certificates, trust stores, issuing authorities and CA hierarchies.

mod authority;
mod certificate;
mod chain;
mod hierarchy;
mod truststore;

pub use authority::{CertificateAuthority, PkiError};
pub use certificate::{Capability, CertProfile, CertRef, CompactCertificate, TbsCertificate};
pub use chain::{verify_chain, ChainFailure, RevocationView};
pub use hierarchy::{
    build_hierarchy, minimal_truststore, CaRole, Hierarchy, HierarchyParams, HierarchyVariant,
    TruststorePhase, CA1_NAME, CA2_NAME, PERMANENT_CA_NAME,
};
pub use truststore::{PinnedCertificate, TrustAnchor, TrustStore, TrustStoreError};
