// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use trust_transfer::crypto::{generate_key_pair, KeyPair};
use trust_transfer::messages::{CertificateSigningRequest, TimeStamp, Uri};
use trust_transfer::pki::{
    build_hierarchy, minimal_truststore, verify_chain, CaRole, Capability, CertProfile,
    CertificateAuthority, ChainFailure, CompactCertificate, Hierarchy, HierarchyParams,
    HierarchyVariant, PkiError, RevocationView, TbsCertificate, TrustStore, TruststorePhase,
};
use trust_transfer::session::{establish, AuthenticatedSession, Credential};

const NOW: TimeStamp = TimeStamp(10_000);

fn hierarchy(variant: HierarchyVariant, seed: u64) -> Hierarchy {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    build_hierarchy(variant, &mut rng, &HierarchyParams::new(TimeStamp(0)))
}

fn key(tag: u8) -> KeyPair {
    generate_key_pair(&[tag; 32]).unwrap()
}

fn store(roots: &[&CompactCertificate]) -> TrustStore {
    TrustStore::with_roots(roots.iter().copied(), true).unwrap()
}

fn none() -> RevocationView {
    RevocationView::new()
}

/// Factory credential for `name`, issued by the permanent CA.
fn factory(h: &mut Hierarchy, name: &str, tag: u8) -> Credential {
    let k = key(tag);
    let ca = h.authority_mut(CaRole::Permanent);
    let certificate = ca
        .certify_key(
            name.as_bytes(),
            k.public_key(),
            CertProfile::Factory,
            (TimeStamp(0), TimeStamp(1 << 40)),
        )
        .unwrap();
    Credential {
        key: k,
        certificate,
        chain: ca.issued_chain(),
    }
}

/// Session between a device and `role`'s authority, as seen by the authority.
fn session_with(h: &Hierarchy, device: &Credential, role: CaRole) -> AuthenticatedSession {
    let ca = h.authority(role);
    let device_store = store(&[h.anchor_of(role)]);
    let mut rng = ChaCha20Rng::seed_from_u64(77);
    let (_, server_side) = establish(
        device,
        &ca.session_credential(),
        &device_store,
        ca.trust_store(),
        NOW,
        &none(),
        &none(),
        &mut rng,
    )
    .expect("handshake");
    server_side
}

#[test]
fn variant_a_has_two_independent_roots() {
    let h = hierarchy(HierarchyVariant::A, 1);
    assert!(h.root_certificate(CaRole::Ca1).is_some());
    assert!(h.root_certificate(CaRole::Ca2).is_some());
    assert_ne!(
        h.authority(CaRole::Ca1).root_name(),
        h.authority(CaRole::Ca2).root_name()
    );
}

#[test]
fn variant_b_ca1_is_sub_ca_and_ca2_is_root() {
    let h = hierarchy(HierarchyVariant::B, 1);
    let ca1 = h.authority(CaRole::Ca1).certificate();
    assert_eq!(ca1.profile, CertProfile::SubCa);
    assert_eq!(ca1.issuer_name, b"permanent-ca");
    let perm = h.root_certificate(CaRole::Permanent).unwrap();
    assert!(ca1.verify_signature(&perm.subject_public_key));
    assert!(h.root_certificate(CaRole::Ca2).is_some());
}

#[test]
fn variants_c_and_d_verify_ca2_with_the_permanent_root_alone() {
    for v in [HierarchyVariant::C, HierarchyVariant::D] {
        let h = hierarchy(v, 2);
        let perm = h.root_certificate(CaRole::Permanent).unwrap();
        let only_perm = store(&[perm]);
        for role in [CaRole::Ca1, CaRole::Ca2] {
            let ca = h.authority(role);
            assert_eq!(
                verify_chain(ca.certificate(), ca.chain(), &only_perm, NOW, &none()),
                Ok(()),
                "variant {v} {role:?}"
            );
        }
    }
    assert!(hierarchy(HierarchyVariant::D, 2).ca1_is_permanent());
}

#[test]
fn every_ca_certificate_verifies_along_its_issuer_chain() {
    for v in HierarchyVariant::ALL {
        let h = hierarchy(v, 3);
        for role in [CaRole::Permanent, CaRole::Ca1, CaRole::Ca2] {
            let ca = h.authority(role);
            let anchor = store(&[h.anchor_of(role)]);
            assert_eq!(
                verify_chain(ca.certificate(), ca.chain(), &anchor, NOW, &none()),
                Ok(())
            );
        }
    }
}

/// The roots each variant needs before the transfer, written out by hand.
fn expected_roots(v: HierarchyVariant) -> BTreeSet<CaRole> {
    use CaRole::*;
    match v {
        HierarchyVariant::A => [Ca1, Ca2].into(),
        HierarchyVariant::B => [Permanent, Ca2].into(),
        HierarchyVariant::C | HierarchyVariant::D => [Permanent].into(),
    }
}

/// Smallest set of root roles from which every role in `needed` verifies.
fn brute_force_minimum(h: &Hierarchy, needed: &[CaRole]) -> BTreeSet<CaRole> {
    let roots: Vec<CaRole> = [CaRole::Permanent, CaRole::Ca1, CaRole::Ca2]
        .into_iter()
        .filter(|r| h.root_certificate(*r).is_some())
        .filter(|r| !(h.ca1_is_permanent() && *r == CaRole::Ca1))
        .collect();
    let mut best: Option<BTreeSet<CaRole>> = None;
    for mask in 0u32..(1 << roots.len()) {
        let subset: BTreeSet<CaRole> = (0..roots.len())
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| roots[i])
            .collect();
        let certs: Vec<&CompactCertificate> = subset
            .iter()
            .map(|r| h.root_certificate(*r).unwrap())
            .collect();
        let s = store(&certs);
        let ok = needed.iter().all(|role| {
            let ca = h.authority(*role);
            verify_chain(ca.certificate(), ca.chain(), &s, NOW, &none()).is_ok()
        });
        if ok && best.as_ref().is_none_or(|b| subset.len() < b.len()) {
            best = Some(subset);
        }
    }
    best.expect("some subset works")
}

#[test]
fn minimal_truststore_matches_table_and_brute_force() {
    for v in HierarchyVariant::ALL {
        let pre_transfer = minimal_truststore(v, TruststorePhase::PreTransfer);
        assert_eq!(pre_transfer, expected_roots(v), "variant {v}");
        let h = hierarchy(v, 4);
        assert_eq!(
            brute_force_minimum(&h, &[CaRole::Ca1, CaRole::Ca2]),
            pre_transfer,
            "variant {v}"
        );
        assert_eq!(
            brute_force_minimum(&h, &[CaRole::Ca1]),
            minimal_truststore(v, TruststorePhase::PreEnroll),
            "variant {v}"
        );
    }
}

#[test]
fn removing_any_minimal_root_breaks_a_ca_chain() {
    for v in HierarchyVariant::ALL {
        let h = hierarchy(v, 5);
        let roots = h.minimal_truststore_roots(TruststorePhase::PreTransfer);
        for skip in 0..roots.len() {
            let partial: Vec<_> = roots
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != skip)
                .map(|(_, r)| r)
                .collect();
            let s = store(&partial);
            let broken = [CaRole::Ca1, CaRole::Ca2].iter().any(|role| {
                let ca = h.authority(*role);
                verify_chain(ca.certificate(), ca.chain(), &s, NOW, &none()).is_err()
            });
            assert!(broken, "variant {v} without root {skip}");
        }
    }
}

#[test]
fn issuance_uses_consecutive_serials_and_checks_possession() {
    let mut h = hierarchy(HierarchyVariant::C, 6);
    let ca2 = h.authority_mut(CaRole::Ca2);
    let window = (NOW, NOW.plus(100));
    let n = ca2.next_serial();
    let a = ca2
        .issue_certificate(
            &CertificateSigningRequest::new(&key(1), b"x", CertProfile::Operational),
            CertProfile::Operational,
            window,
        )
        .unwrap();
    let b = ca2
        .issue_certificate(
            &CertificateSigningRequest::new(&key(2), b"y", CertProfile::Operational),
            CertProfile::Operational,
            window,
        )
        .unwrap();
    assert_eq!((a.serial, b.serial), (n, n + 1));
    assert_eq!(a.issuer_name, b"ca2");
    assert!(a.verify_signature(&ca2.public_key()));

    let mut bad = CertificateSigningRequest::new(&key(3), b"z", CertProfile::Operational);
    bad.proof_of_possession.0[10] ^= 1;
    assert_eq!(
        ca2.issue_certificate(&bad, CertProfile::Operational, window),
        Err(PkiError::BadProofOfPossession)
    );
    let good = CertificateSigningRequest::new(&key(3), b"z", CertProfile::Operational);
    assert!(matches!(
        ca2.issue_certificate(&good, CertProfile::Operational, (NOW.plus(5), NOW)),
        Err(PkiError::InvalidValidityWindow { .. })
    ));
}

#[test]
fn device_chain_in_variant_c_expiry_and_revocation() {
    let mut h = hierarchy(HierarchyVariant::C, 7);
    let perm = h.root_certificate(CaRole::Permanent).unwrap().clone();
    let only_perm = store(&[&perm]);
    let ca2 = h.authority_mut(CaRole::Ca2);
    let leaf = ca2
        .certify_key(
            b"dev-0001",
            key(9).public_key(),
            CertProfile::Operational,
            (NOW, NOW.plus(50)),
        )
        .unwrap();
    let chain = ca2.issued_chain();
    assert_eq!(
        verify_chain(&leaf, &chain, &only_perm, NOW, &none()),
        Ok(())
    );

    // The intermediate outlives the leaf here, so push `now` past the CA.
    let ca_end = chain[0].not_after;
    let long_leaf = ca2
        .certify_key(
            b"dev-0002",
            key(10).public_key(),
            CertProfile::Operational,
            (NOW, ca_end.plus(10)),
        )
        .unwrap();
    assert_eq!(
        verify_chain(&long_leaf, &chain, &only_perm, ca_end.plus(1), &none()),
        Err(ChainFailure::Expired {
            serial: chain[0].serial
        })
    );
    assert_eq!(
        verify_chain(&leaf, &chain, &only_perm, NOW.plus(51), &none()),
        Err(ChainFailure::Expired {
            serial: leaf.serial
        })
    );

    ca2.revoke(leaf.serial).unwrap();
    let view: RevocationView = ca2.revocation_entries().collect();
    assert_eq!(
        verify_chain(&leaf, &chain, &only_perm, NOW, &view),
        Err(ChainFailure::Revoked {
            serial: leaf.serial
        })
    );
    assert_eq!(ca2.is_revoked(leaf.serial), Ok(true));
    assert_eq!(ca2.is_revoked(long_leaf.serial), Ok(false));
    assert_eq!(
        ca2.is_revoked(999_999),
        Err(PkiError::UnknownSerial(999_999))
    );
    assert_eq!(ca2.revoke(999_999), Err(PkiError::UnknownSerial(999_999)));
}

#[test]
fn mutating_any_link_breaks_the_chain() {
    let mut h = hierarchy(HierarchyVariant::C, 8);
    let perm = h.root_certificate(CaRole::Permanent).unwrap().clone();
    let ca2 = h.authority_mut(CaRole::Ca2);
    let leaf = ca2
        .certify_key(
            b"dev",
            key(4).public_key(),
            CertProfile::Operational,
            (NOW, NOW.plus(50)),
        )
        .unwrap();
    let chain = ca2.issued_chain();
    let s = store(&[&perm]);
    assert!(verify_chain(&leaf, &chain, &s, NOW, &none()).is_ok());

    let mut bad_leaf = leaf.clone();
    bad_leaf.signature.0[0] ^= 0x80;
    assert!(verify_chain(&bad_leaf, &chain, &s, NOW, &none()).is_err());
    let mut bad_leaf = leaf.clone();
    bad_leaf.tbs.subject_name = b"dew".to_vec();
    assert!(verify_chain(&bad_leaf, &chain, &s, NOW, &none()).is_err());

    let mut bad_chain = chain.clone();
    bad_chain[0].signature.0[5] ^= 1;
    assert!(verify_chain(&leaf, &bad_chain, &s, NOW, &none()).is_err());
    let mut bad_chain = chain.clone();
    bad_chain[0].tbs.not_after = bad_chain[0].not_after.plus(1);
    assert!(verify_chain(&leaf, &bad_chain, &s, NOW, &none()).is_err());

    // A root with a different key under the same name.
    let mut fake_perm = CertificateAuthority::root(
        b"permanent-ca",
        key(66),
        (TimeStamp(0), TimeStamp(1 << 40)),
        Uri::new("coaps://x").unwrap(),
    )
    .unwrap();
    let fake_store = store(&[fake_perm.certificate()]);
    assert!(verify_chain(&leaf, &chain, &fake_store, NOW, &none()).is_err());
    // And a chain forged under that fake root does not verify against the real one.
    let forged_ca = fake_perm
        .certify_key(
            b"ca2",
            key(67).public_key(),
            CertProfile::SubCa,
            (TimeStamp(0), TimeStamp(1 << 40)),
        )
        .unwrap();
    assert!(verify_chain(&forged_ca, &[], &s, NOW, &none()).is_err());
}

#[test]
fn truststore_holds_only_self_signed_roots() {
    let mut h = hierarchy(HierarchyVariant::B, 9);
    let ca1_cert = h.authority(CaRole::Ca1).certificate().clone();
    let mut s = TrustStore::new();
    assert!(s.add_root(ca1_cert, true).is_err());
    let dev = factory(&mut h, "dev-0001", 1);
    assert!(s.add_root(dev.certificate, true).is_err());
    assert!(s.is_empty());
}

#[test]
fn factory_profile_cannot_operate() {
    assert!(!CertProfile::Factory.permits(Capability::Operate));
    assert!(CertProfile::Factory.permits(Capability::Enroll));
    assert!(CertProfile::Operational.permits(Capability::Operate));
    for p in [CertProfile::RootCa, CertProfile::SubCa, CertProfile::Server] {
        assert!(!p.permits(Capability::Enroll), "{p:?}");
    }
}

#[test]
fn register_factory_certs_cases() {
    let mut h = hierarchy(HierarchyVariant::A, 10);
    let certs: Vec<_> = (1..=3)
        .map(|i| factory(&mut h, &format!("dev-{i:04}"), i).certificate)
        .collect();
    let ca2 = h.authority_mut(CaRole::Ca2);
    assert_eq!(
        ca2.register_factory_certs(&[], NOW, &none())
            .unwrap()
            .as_str(),
        "coaps://ca2.example/est"
    );
    assert_eq!(ca2.registered_count(), 0);

    let uri = ca2.register_factory_certs(&certs, NOW, &none()).unwrap();
    assert_eq!(uri, *ca2.enroll_uri());
    assert_eq!(ca2.registered_count(), 3);
    assert!(certs.iter().all(|c| ca2.is_registered(c.serial)));

    let rogue = TbsCertificate {
        serial: 4242,
        subject_name: b"rogue".to_vec(),
        subject_public_key: key(50).public_key(),
        issuer_name: b"rogue".to_vec(),
        not_before: TimeStamp(0),
        not_after: TimeStamp(1 << 40),
        profile: CertProfile::Factory,
    }
    .sign(&key(50));
    let mut h2 = hierarchy(HierarchyVariant::A, 10);
    let more: Vec<_> = (5..=6)
        .map(|i| factory(&mut h2, &format!("dev-{i:04}"), i).certificate)
        .collect();
    let ca2 = h.authority_mut(CaRole::Ca2);
    let err = ca2
        .register_factory_certs(&[more[0].clone(), rogue, more[1].clone()], NOW, &none())
        .unwrap_err();
    assert!(
        matches!(err, PkiError::UnverifiableFactoryCert { serial: 4242, .. }),
        "{err:?}"
    );
    // Nothing from a rejected batch is registered.
    assert_eq!(ca2.registered_count(), 3);
}

#[test]
fn enrollment_requires_registration_and_matching_name() {
    let mut h = hierarchy(HierarchyVariant::B, 11);
    let dev = factory(&mut h, "dev-0001", 1);
    let other = factory(&mut h, "dev-0002", 2);
    h.authority_mut(CaRole::Ca1)
        .register_factory_certs(std::slice::from_ref(&dev.certificate), NOW, &none())
        .unwrap();

    let session = session_with(&h, &dev, CaRole::Ca1);
    let fresh = key(30);
    let csr = CertificateSigningRequest::new(&fresh, b"dev-0001", CertProfile::Operational);
    let ca1 = h.authority_mut(CaRole::Ca1);
    let cert = ca1.enroll(&session, &csr, NOW, &none()).unwrap();
    assert_eq!(cert.profile, CertProfile::Operational);
    assert_eq!(cert.subject_name, b"dev-0001");
    assert_eq!(cert.subject_public_key, fresh.public_key());
    assert_eq!(ca1.verify_issued(&cert, NOW, &none()), Ok(()));

    let mismatched = CertificateSigningRequest::new(&fresh, b"dev-0002", CertProfile::Operational);
    assert!(matches!(
        ca1.enroll(&session, &mismatched, NOW, &none()),
        Err(PkiError::NameMismatch { .. })
    ));

    let unregistered = session_with(&h, &other, CaRole::Ca1);
    let csr2 = CertificateSigningRequest::new(&key(31), b"dev-0002", CertProfile::Operational);
    assert!(matches!(
        h.authority_mut(CaRole::Ca1)
            .enroll(&unregistered, &csr2, NOW, &none()),
        Err(PkiError::NotRegistered { .. })
    ));

    // A revoked factory certificate cannot enroll.
    let mut revoked = none();
    revoked.insert(dev.certificate.cert_ref());
    assert!(matches!(
        h.authority_mut(CaRole::Ca1)
            .enroll(&session, &csr, NOW, &revoked),
        Err(PkiError::RevokedFactoryCert { .. })
    ));
}

#[test]
fn variant_c_device_reaches_ca2_with_only_the_permanent_root() {
    let mut h = hierarchy(HierarchyVariant::C, 12);
    let dev = factory(&mut h, "dev-0001", 1);
    let perm = h.root_certificate(CaRole::Permanent).unwrap().clone();
    let ca2 = h.authority(CaRole::Ca2);
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    assert!(establish(
        &dev,
        &ca2.session_credential(),
        &store(&[&perm]),
        ca2.trust_store(),
        NOW,
        &none(),
        &none(),
        &mut rng,
    )
    .is_ok());

    // Variant a: a device holding only CA1's root cannot authenticate CA2.
    let mut h = hierarchy(HierarchyVariant::A, 12);
    let dev = factory(&mut h, "dev-0001", 1);
    let ca1_root = h.root_certificate(CaRole::Ca1).unwrap().clone();
    let ca2 = h.authority(CaRole::Ca2);
    let err = establish(
        &dev,
        &ca2.session_credential(),
        &store(&[&ca1_root]),
        ca2.trust_store(),
        NOW,
        &none(),
        &none(),
        &mut rng,
    )
    .unwrap_err();
    assert!(err.to_string().contains("rejected peer"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn serials_strictly_increase(ops in proptest::collection::vec(0u8..3, 1..30)) {
        let mut h = hierarchy(HierarchyVariant::C, 13);
        let ca = h.authority_mut(CaRole::Ca2);
        let mut last = 0;
        for (i, op) in ops.into_iter().enumerate() {
            let k = key(i as u8);
            let window = (NOW, NOW.plus(10));
            let serial = match op {
                0 => ca.certify_key(b"d", k.public_key(), CertProfile::Operational, window).unwrap().serial,
                1 => ca.issue_certificate(&CertificateSigningRequest::new(&k, b"d", CertProfile::Operational), CertProfile::Operational, window).unwrap().serial,
                _ => {
                    // Rejected requests must not consume a serial.
                    let mut bad = CertificateSigningRequest::new(&k, b"d", CertProfile::Operational);
                    bad.proof_of_possession.0[0] ^= 1;
                    prop_assert!(ca.issue_certificate(&bad, CertProfile::Operational, window).is_err());
                    continue;
                }
            };
            prop_assert!(serial > last);
            prop_assert_eq!(ca.next_serial(), serial + 1);
            last = serial;
        }
    }

    #[test]
    fn verify_chain_respects_validity_bounds(offset in 0u64..200) {
        let mut h = hierarchy(HierarchyVariant::B, 14);
        let perm = h.root_certificate(CaRole::Permanent).unwrap().clone();
        let ca1 = h.authority_mut(CaRole::Ca1);
        let leaf = ca1.certify_key(b"d", key(1).public_key(), CertProfile::Operational, (NOW.plus(50), NOW.plus(150))).unwrap();
        let now = NOW.plus(offset);
        let result = verify_chain(&leaf, &ca1.issued_chain(), &store(&[&perm]), now, &none());
        prop_assert_eq!(result.is_ok(), (50..=150).contains(&offset));
    }
}
