// SPDX-License-Identifier: Apache-2.0

//! The four CA arrangements a transfer can start from.
//!
//! | variant | CA1                     | CA2                     |
//! |---------|-------------------------|-------------------------|
//! | a       | own root                | own root                |
//! | b       | sub-CA of permanent CA  | own root                |
//! | c       | sub-CA of permanent CA  | sub-CA of permanent CA  |
//! | d       | the permanent CA itself | sub-CA of permanent CA  |
//!
//! Factory certificates are always issued by the permanent CA.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::RngCore;

use super::{CertificateAuthority, CompactCertificate};
use crate::crypto::{generate_key_pair, KeyPair};
use crate::messages::{TimeStamp, Uri};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HierarchyVariant {
    A,
    B,
    C,
    D,
}

impl HierarchyVariant {
    pub const ALL: [HierarchyVariant; 4] = [
        HierarchyVariant::A,
        HierarchyVariant::B,
        HierarchyVariant::C,
        HierarchyVariant::D,
    ];
}

impl fmt::Display for HierarchyVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HierarchyVariant::A => "a",
            HierarchyVariant::B => "b",
            HierarchyVariant::C => "c",
            HierarchyVariant::D => "d",
        })
    }
}

impl FromStr for HierarchyVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(HierarchyVariant::A),
            "b" => Ok(HierarchyVariant::B),
            "c" => Ok(HierarchyVariant::C),
            "d" => Ok(HierarchyVariant::D),
            other => Err(format!("unknown hierarchy variant {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CaRole {
    Permanent,
    Ca1,
    Ca2,
}

impl FromStr for CaRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "permanent" => Ok(CaRole::Permanent),
            "ca1" => Ok(CaRole::Ca1),
            "ca2" => Ok(CaRole::Ca2),
            other => Err(format!("unknown CA role {other:?}")),
        }
    }
}

/// Point in the device lifecycle a trust store must be ready for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TruststorePhase {
    /// Factory provisioning, before the first enrollment with CA1.
    PreEnroll,
    /// After the last operation by the original operator.
    PreTransfer,
}

/// Roots a device needs in `phase`, named by the authority whose
/// self-signed certificate is that root.
pub fn minimal_truststore(variant: HierarchyVariant, phase: TruststorePhase) -> BTreeSet<CaRole> {
    use CaRole::*;
    use HierarchyVariant::*;
    let roles: &[CaRole] = match (variant, phase) {
        (A, TruststorePhase::PreEnroll) => &[Ca1],
        (A, TruststorePhase::PreTransfer) => &[Ca1, Ca2],
        (B, TruststorePhase::PreEnroll) => &[Permanent],
        (B, TruststorePhase::PreTransfer) => &[Permanent, Ca2],
        (C | D, _) => &[Permanent],
    };
    roles.iter().copied().collect()
}

#[derive(Debug, Clone)]
pub struct HierarchyParams {
    pub now: TimeStamp,
    pub ca_lifetime: u64,
    pub ca1_enroll_uri: Uri,
    pub ca2_enroll_uri: Uri,
    pub permanent_enroll_uri: Uri,
}

impl HierarchyParams {
    pub fn new(now: TimeStamp) -> Self {
        HierarchyParams {
            now,
            ca_lifetime: 20 * 365 * 24 * 3600,
            ca1_enroll_uri: Uri::new("coaps://ca1.example/est").expect("static uri"),
            ca2_enroll_uri: Uri::new("coaps://ca2.example/est").expect("static uri"),
            permanent_enroll_uri: Uri::new("coaps://permanent-ca.example/est").expect("static uri"),
        }
    }
}

pub const PERMANENT_CA_NAME: &[u8] = b"permanent-ca";
pub const CA1_NAME: &[u8] = b"ca1";
pub const CA2_NAME: &[u8] = b"ca2";

#[derive(Debug, Clone)]
pub struct Hierarchy {
    variant: HierarchyVariant,
    authorities: Vec<CertificateAuthority>,
    permanent: usize,
    ca1: usize,
    ca2: usize,
}

fn fresh_key(rng: &mut impl RngCore) -> KeyPair {
    let mut seed = [0u8; 32];
    rng.fill_bytes(&mut seed);
    generate_key_pair(&seed).expect("seed is 32 bytes")
}

pub fn build_hierarchy(
    variant: HierarchyVariant,
    rng: &mut impl RngCore,
    params: &HierarchyParams,
) -> Hierarchy {
    let validity = (params.now, params.now.plus(params.ca_lifetime));
    let mut permanent = CertificateAuthority::root(
        PERMANENT_CA_NAME,
        fresh_key(rng),
        validity,
        params.permanent_enroll_uri.clone(),
    )
    .expect("validity is ordered");

    let sub = |name: &[u8], parent: &mut CertificateAuthority, uri: &Uri, key| {
        CertificateAuthority::subordinate(name, key, parent, validity, uri.clone())
            .expect("validity is ordered")
    };
    let own_root = |name: &[u8], uri: &Uri, key| {
        CertificateAuthority::root(name, key, validity, uri.clone()).expect("validity is ordered")
    };

    let (authorities, ca1, ca2) = match variant {
        HierarchyVariant::A => {
            let ca1 = own_root(CA1_NAME, &params.ca1_enroll_uri, fresh_key(rng));
            let ca2 = own_root(CA2_NAME, &params.ca2_enroll_uri, fresh_key(rng));
            (vec![permanent, ca1, ca2], 1, 2)
        }
        HierarchyVariant::B => {
            let ca1 = sub(
                CA1_NAME,
                &mut permanent,
                &params.ca1_enroll_uri,
                fresh_key(rng),
            );
            let ca2 = own_root(CA2_NAME, &params.ca2_enroll_uri, fresh_key(rng));
            (vec![permanent, ca1, ca2], 1, 2)
        }
        HierarchyVariant::C => {
            let ca1 = sub(
                CA1_NAME,
                &mut permanent,
                &params.ca1_enroll_uri,
                fresh_key(rng),
            );
            let ca2 = sub(
                CA2_NAME,
                &mut permanent,
                &params.ca2_enroll_uri,
                fresh_key(rng),
            );
            (vec![permanent, ca1, ca2], 1, 2)
        }
        HierarchyVariant::D => {
            let ca2 = sub(
                CA2_NAME,
                &mut permanent,
                &params.ca2_enroll_uri,
                fresh_key(rng),
            );
            // The permanent CA serves the original operator directly.
            permanent.set_enroll_uri(params.ca1_enroll_uri.clone());
            (vec![permanent, ca2], 0, 1)
        }
    };

    let mut hierarchy = Hierarchy {
        variant,
        authorities,
        permanent: 0,
        ca1,
        ca2,
    };
    // Every authority verifies factory certificates against the permanent root.
    let permanent_root = hierarchy.authority(CaRole::Permanent).certificate().clone();
    for ca in &mut hierarchy.authorities {
        ca.trust_root(permanent_root.clone())
            .expect("permanent CA certificate is a root");
    }
    hierarchy
}

impl Hierarchy {
    pub fn variant(&self) -> HierarchyVariant {
        self.variant
    }

    fn index(&self, role: CaRole) -> usize {
        match role {
            CaRole::Permanent => self.permanent,
            CaRole::Ca1 => self.ca1,
            CaRole::Ca2 => self.ca2,
        }
    }

    pub fn authority(&self, role: CaRole) -> &CertificateAuthority {
        &self.authorities[self.index(role)]
    }

    pub fn authority_mut(&mut self, role: CaRole) -> &mut CertificateAuthority {
        let i = self.index(role);
        &mut self.authorities[i]
    }

    /// True when CA1 and the permanent CA are one authority.
    pub fn ca1_is_permanent(&self) -> bool {
        self.ca1 == self.permanent
    }

    /// The self-signed certificate anchoring `role`'s authority.
    pub fn anchor_of(&self, role: CaRole) -> &CompactCertificate {
        let root_name = self.authority(role).root_name();
        self.authorities
            .iter()
            .map(CertificateAuthority::certificate)
            .find(|c| c.subject_name == root_name && c.is_self_signed())
            .expect("every authority chains to a root in the hierarchy")
    }

    /// Certificate of a role that is itself a root.
    pub fn root_certificate(&self, role: CaRole) -> Option<&CompactCertificate> {
        let cert = self.authority(role).certificate();
        cert.is_self_signed().then_some(cert)
    }

    pub fn minimal_truststore_names(&self, phase: TruststorePhase) -> BTreeSet<Vec<u8>> {
        minimal_truststore(self.variant, phase)
            .into_iter()
            .map(|role| self.authority(role).name().to_vec())
            .collect()
    }

    pub fn minimal_truststore_roots(&self, phase: TruststorePhase) -> Vec<CompactCertificate> {
        minimal_truststore(self.variant, phase)
            .into_iter()
            .map(|role| {
                self.root_certificate(role)
                    .expect("minimal trust store lists only root authorities")
                    .clone()
            })
            .collect()
    }

    /// Splits into (permanent, ca1, ca2) owners. In variant d the permanent
    /// slot is `None` because CA1 is the permanent CA.
    pub fn into_authorities(
        self,
    ) -> (
        Option<CertificateAuthority>,
        CertificateAuthority,
        CertificateAuthority,
    ) {
        let mut slots: Vec<Option<CertificateAuthority>> =
            self.authorities.into_iter().map(Some).collect();
        let ca1 = slots[self.ca1].take().expect("ca1 slot");
        let ca2 = slots[self.ca2].take().expect("ca2 slot");
        let permanent = slots[self.permanent].take();
        (permanent, ca1, ca2)
    }
}
