// SPDX-License-Identifier: Apache-2.0

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use trust_transfer::codec::WireCodec;
use trust_transfer::crypto::{self, generate_key_pair, sign_envelope, KeyPair};
use trust_transfer::device::{attestation_response, Firmware};
use trust_transfer::messages::{
    EnvelopeProfile, SignedEnvelope, TimeStamp, TransferMessage, UpdateInfoList, Uri, VersionInfo,
};
use trust_transfer::operators::{
    build_update_info_list, sp1_build_update_info_list, sp1_relay_transfer, sp2_prepare_transfer,
    sp2_verify_update_info_list, update_server_serve, window_hull, ManagedDevice, OperatorError,
    OperatorState, RaVerifier, TransferOptions,
};
use trust_transfer::pki::{
    build_hierarchy, CaRole, CertProfile, CompactCertificate, Hierarchy, HierarchyParams,
    HierarchyVariant, RevocationView, TbsCertificate, TrustStore,
};
use trust_transfer::session::{establish, AuthenticatedSession, Credential};

const NOW: TimeStamp = TimeStamp(1_000);

fn key(tag: u8) -> KeyPair {
    generate_key_pair(&[tag; 32]).unwrap()
}

fn uri(s: &str) -> Uri {
    Uri::new(s).unwrap()
}

fn version(seq: u64) -> VersionInfo {
    VersionInfo {
        manifest_sequence: seq,
        manifest_uri: uri(&format!("coaps://fw.sp1.example/{seq}")),
    }
}

struct Setup {
    hierarchy: Hierarchy,
    sp1: OperatorState,
    sp2: OperatorState,
    ids: Vec<Vec<u8>>,
    factory: Vec<Credential>,
}

fn setup(n: u8, variant: HierarchyVariant) -> Setup {
    let mut rng = ChaCha20Rng::seed_from_u64(n as u64);
    let mut hierarchy = build_hierarchy(variant, &mut rng, &HierarchyParams::new(TimeStamp(0)));
    let mut sp1 = OperatorState::new(
        b"sp1",
        key(0xa1),
        uri("coaps://update.sp1.example/fw"),
        version(2),
    );
    let mut sp2 = OperatorState::new(
        b"sp2",
        key(0xa2),
        uri("coaps://update.sp2.example/fw"),
        version(3),
    );
    sp1.agree_signer(b"sp2", sp2.signing_key.public_key());
    sp2.agree_signer(b"sp1", sp1.signing_key.public_key());
    let mut ids = Vec::new();
    let mut factory = Vec::new();
    for i in 0..n {
        let id = format!("dev-{i:04}").into_bytes();
        let k = key(i + 1);
        let perm = hierarchy.authority_mut(CaRole::Permanent);
        let cert = perm
            .certify_key(
                &id,
                k.public_key(),
                CertProfile::Factory,
                (TimeStamp(0), TimeStamp(1 << 40)),
            )
            .unwrap();
        sp1.manage(
            &id,
            ManagedDevice {
                factory_certificate: cert.clone(),
                version: version(2),
                transfer_window: (TimeStamp(500 + i as u64 * 10), TimeStamp(5_000 + i as u64)),
            },
        );
        factory.push(Credential {
            key: k,
            certificate: cert,
            chain: vec![],
        });
        ids.push(id);
    }
    Setup {
        hierarchy,
        sp1,
        sp2,
        ids,
        factory,
    }
}

fn options(ra: bool, flag: bool) -> TransferOptions {
    TransferOptions {
        ra_uri: ra.then(|| uri("coaps://ra.sp2.example/attest")),
        contact_update_before_enroll: flag,
        fallback_uri: uri("coaps://placeholder.invalid"),
    }
}

/// SP2 side of the hand-over, returning the signed message and claims.
fn prepare(s: &mut Setup, opts: &TransferOptions) -> (SignedEnvelope, TransferMessage) {
    let signed = sp1_build_update_info_list(&s.sp1, &s.ids).unwrap();
    let list = sp2_verify_update_info_list(&s.sp2, b"sp1", &signed).unwrap();
    let ca2 = s.hierarchy.authority_mut(CaRole::Ca2);
    sp2_prepare_transfer(&mut s.sp2, &list, ca2, NOW, &RevocationView::new(), opts).unwrap()
}

#[test]
fn list_of_two_carries_certificates_and_manifests() {
    let s = setup(2, HierarchyVariant::B);
    let list = build_update_info_list(&s.sp1, &s.ids).unwrap();
    assert_eq!(list.entries.len(), 2);
    for (entry, cred) in list.entries.iter().zip(&s.factory) {
        assert_eq!(entry.factory_certificate, cred.certificate);
        assert_eq!(entry.version, version(2));
        assert!(entry.update_not_before <= entry.update_not_after);
    }
    assert_eq!(
        build_update_info_list(&s.sp1, &[b"dev-9999".to_vec()]),
        Err(OperatorError::UnknownDevice("dev-9999".into()))
    );
}

#[test]
fn sp2_accepts_the_list_only_under_the_agreed_key() {
    let mut s = setup(2, HierarchyVariant::B);
    let signed = sp1_build_update_info_list(&s.sp1, &s.ids).unwrap();
    let list = sp2_verify_update_info_list(&s.sp2, b"sp1", &signed).unwrap();
    assert_eq!(list, build_update_info_list(&s.sp1, &s.ids).unwrap());

    assert!(matches!(
        sp2_verify_update_info_list(&s.sp2, b"sp9", &signed),
        Err(OperatorError::UnknownPeer(_))
    ));
    let mut tampered = signed.clone();
    let last = tampered.payload.len() - 1;
    tampered.payload[last] ^= 1;
    assert_eq!(
        sp2_verify_update_info_list(&s.sp2, b"sp1", &tampered),
        Err(OperatorError::BadSp1Signature)
    );
    // Same bytes signed as a CWT are not a device list.
    let as_cwt = sign_envelope(&s.sp1.signing_key, EnvelopeProfile::Cwt, &signed.payload).unwrap();
    assert_eq!(
        sp2_verify_update_info_list(&s.sp2, b"sp1", &as_cwt),
        Err(OperatorError::BadSp1Signature)
    );
    s.sp2.agree_signer(b"sp1", key(0x99).public_key());
    assert_eq!(
        sp2_verify_update_info_list(&s.sp2, b"sp1", &signed),
        Err(OperatorError::BadSp1Signature)
    );
}

#[test]
fn prepared_transfer_claims() {
    let mut s = setup(3, HierarchyVariant::C);
    let (env, claims) = prepare(&mut s, &options(false, false));
    assert!(claims.ra_uri.is_none());
    assert_eq!(TransferMessage::decode(&env.payload).unwrap(), claims);
    assert_eq!(
        &claims.enroll_uri,
        s.hierarchy.authority(CaRole::Ca2).enroll_uri()
    );
    assert_eq!(claims.update_uri, s.sp2.update_server_uri);
    assert!(crypto::verify_envelope(
        &s.sp2.signing_key.public_key(),
        &env
    ));
    let list = build_update_info_list(&s.sp1, &s.ids).unwrap();
    assert_eq!(
        (claims.reset_not_before, claims.reset_not_after),
        window_hull(&list).unwrap()
    );
    assert_eq!(
        (claims.reset_not_before, claims.reset_not_after),
        (TimeStamp(500), TimeStamp(5_002))
    );
    let ca2 = s.hierarchy.authority(CaRole::Ca2);
    assert_eq!(ca2.registered_count(), 3);
    assert_eq!(s.sp2.managed_devices.len(), 3);

    let mut s = setup(1, HierarchyVariant::C);
    let (_, with_ra) = prepare(&mut s, &options(true, true));
    assert_eq!(with_ra.ra_uri, Some(uri("coaps://ra.sp2.example/attest")));
    assert!(with_ra.contact_update_before_enroll);
}

#[test]
fn rogue_certificate_fails_registration() {
    let mut s = setup(2, HierarchyVariant::C);
    let mut list = build_update_info_list(&s.sp1, &s.ids).unwrap();
    let rogue_key = key(0x66);
    list.entries[1].factory_certificate = TbsCertificate {
        serial: 99,
        subject_name: b"dev-0001".to_vec(),
        subject_public_key: rogue_key.public_key(),
        issuer_name: b"dev-0001".to_vec(),
        not_before: TimeStamp(0),
        not_after: TimeStamp(1 << 40),
        profile: CertProfile::Factory,
    }
    .sign(&rogue_key);
    let ca2 = s.hierarchy.authority_mut(CaRole::Ca2);
    let err = sp2_prepare_transfer(
        &mut s.sp2,
        &list,
        ca2,
        NOW,
        &RevocationView::new(),
        &options(false, false),
    )
    .unwrap_err();
    assert!(
        matches!(err, OperatorError::RegistrationFailed(_)),
        "{err:?}"
    );
    assert_eq!(s.hierarchy.authority(CaRole::Ca2).registered_count(), 0);
    assert!(s.sp2.managed_devices.is_empty());
}

#[test]
fn relay_rewrites_only_the_fallback_claim() {
    let mut s = setup(2, HierarchyVariant::D);
    let (env, original) = prepare(&mut s, &options(true, true));
    for id in &s.ids {
        let relayed = sp1_relay_transfer(&s.sp1, b"sp2", &env, id).unwrap();
        let claims = TransferMessage::decode(&relayed.payload).unwrap();
        assert_eq!(claims.fallback_uri, s.sp1.update_server_uri);
        assert_eq!(
            TransferMessage {
                fallback_uri: original.fallback_uri.clone(),
                ..claims
            },
            original
        );
        assert!(crypto::verify_envelope(
            &s.sp1.signing_key.public_key(),
            &relayed
        ));
        assert!(!crypto::verify_envelope(
            &s.sp2.signing_key.public_key(),
            &relayed
        ));
    }
}

#[test]
fn relay_refuses_bad_input() {
    let mut s = setup(1, HierarchyVariant::B);
    let (env, _) = prepare(&mut s, &options(false, false));
    let mut tampered = env.clone();
    tampered.payload[3] ^= 0x01;
    assert_eq!(
        sp1_relay_transfer(&s.sp1, b"sp2", &tampered, &s.ids[0]),
        Err(OperatorError::BadSp2Signature)
    );
    let mut bad_sig = env.clone();
    bad_sig.signature.0[63] ^= 0x01;
    assert_eq!(
        sp1_relay_transfer(&s.sp1, b"sp2", &bad_sig, &s.ids[0]),
        Err(OperatorError::BadSp2Signature)
    );
    // Signed by an outsider who claims SP2's key id.
    let mut forged = sign_envelope(&key(0x77), EnvelopeProfile::Cwt, &env.payload).unwrap();
    forged.header.signer = env.header.signer;
    assert_eq!(
        sp1_relay_transfer(&s.sp1, b"sp2", &forged, &s.ids[0]),
        Err(OperatorError::BadSp2Signature)
    );
    let as_list = sign_envelope(
        &s.sp2.signing_key,
        EnvelopeProfile::UpdateList,
        &env.payload,
    )
    .unwrap();
    assert_eq!(
        sp1_relay_transfer(&s.sp1, b"sp2", &as_list, &s.ids[0]),
        Err(OperatorError::BadSp2Signature)
    );
    assert!(matches!(
        sp1_relay_transfer(&s.sp1, b"sp2", &env, b"dev-7777"),
        Err(OperatorError::UnknownDevice(_))
    ));
}

fn device_firmware() -> Firmware {
    Firmware::genuine(version(2))
}

#[test]
fn attestation_verdicts() {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let mut v = RaVerifier::new();
    let good = device_firmware();
    v.expect(b"dev-0000", good.measurement());

    let nonce = v.challenge(b"dev-0000", &mut rng).unwrap();
    let ex = v
        .verify(
            b"dev-0000",
            &nonce,
            attestation_response(&good.measurement(), &nonce),
        )
        .unwrap();
    assert!(ex.verdict);

    let mut bad = good.clone();
    bad.code_digest.0[7] ^= 0x10;
    let nonce = v.challenge(b"dev-0000", &mut rng).unwrap();
    assert!(
        !v.verify(
            b"dev-0000",
            &nonce,
            attestation_response(&bad.measurement(), &nonce)
        )
        .unwrap()
        .verdict
    );

    // An honest response to an old nonce, replayed against a new challenge.
    let old = v.challenge(b"dev-0000", &mut rng).unwrap();
    let old_response = attestation_response(&good.measurement(), &old);
    let fresh = v.challenge(b"dev-0000", &mut rng).unwrap();
    assert_ne!(old, fresh);
    assert!(!v.verify(b"dev-0000", &fresh, old_response).unwrap().verdict);
    // The challenge was consumed.
    assert_eq!(
        v.verify(b"dev-0000", &fresh, old_response),
        Err(OperatorError::NoChallenge("dev-0000".into()))
    );
    assert_eq!(
        v.challenge(b"dev-0001", &mut rng),
        Err(OperatorError::NoExpectedMeasurement("dev-0001".into()))
    );
}

fn session_for(s: &Setup, peer: &Credential) -> AuthenticatedSession {
    let perm = s.hierarchy.root_certificate(CaRole::Permanent).unwrap();
    let trust = TrustStore::with_roots([perm], true).unwrap();
    let mut server_ca = s.hierarchy.clone();
    let server_key = key(0x55);
    let server_cert = server_ca
        .authority_mut(CaRole::Permanent)
        .certify_key(
            b"update.sp2",
            server_key.public_key(),
            CertProfile::Server,
            (TimeStamp(0), TimeStamp(1 << 40)),
        )
        .unwrap();
    let server = Credential {
        key: server_key,
        certificate: server_cert,
        chain: vec![],
    };
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    let none = RevocationView::new();
    establish(peer, &server, &trust, &trust, NOW, &none, &none, &mut rng)
        .unwrap()
        .1
}

#[test]
fn update_server_serves_newer_firmware_to_authenticated_devices() {
    let s = setup(1, HierarchyVariant::C);
    let session = session_for(&s, &s.factory[0]);
    assert_eq!(
        update_server_serve(&s.sp2, &session, &version(2)),
        Ok(Some(version(3)))
    );
    assert_eq!(update_server_serve(&s.sp2, &session, &version(3)), Ok(None));
    assert_eq!(update_server_serve(&s.sp2, &session, &version(4)), Ok(None));

    let cert: &CompactCertificate = &s.factory[0].certificate;
    let unauth = AuthenticatedSession::unauthenticated(cert, cert, [0; 8]);
    assert_eq!(
        update_server_serve(&s.sp2, &unauth, &version(2)),
        Err(OperatorError::PeerUntrusted)
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn relay_preserves_other_claims(
        nb in 0u64..1_000_000, span in 0u64..1_000_000,
        ra in proptest::option::of("[a-z]{1,40}"), flag in any::<bool>(),
        enroll in "[a-z]{1,60}", update in "[a-z]{1,60}",
    ) {
        let sp2 = key(0xb2);
        let mut sp1 = OperatorState::new(b"sp1", key(0xb1), uri("coaps://update.sp1.example/fw"), version(1));
        sp1.agree_signer(b"sp2", sp2.public_key());
        sp1.manage(b"d", ManagedDevice {
            factory_certificate: TbsCertificate {
                serial: 1, subject_name: b"d".to_vec(), subject_public_key: sp2.public_key(),
                issuer_name: b"p".to_vec(), not_before: TimeStamp(0), not_after: TimeStamp(1),
                profile: CertProfile::Factory,
            }.sign(&sp2),
            version: version(1),
            transfer_window: (TimeStamp(0), TimeStamp(1)),
        });
        let original = TransferMessage {
            reset_not_before: TimeStamp(nb),
            reset_not_after: TimeStamp(nb + span),
            ra_uri: ra.map(|r| uri(&r)),
            update_uri: uri(&update),
            contact_update_before_enroll: flag,
            enroll_uri: uri(&enroll),
            fallback_uri: uri("coaps://placeholder"),
        };
        let env = sign_envelope(&sp2, EnvelopeProfile::Cwt, &original.encode().unwrap()).unwrap();
        let relayed = TransferMessage::decode(&sp1_relay_transfer(&sp1, b"sp2", &env, b"d").unwrap().payload).unwrap();
        prop_assert_eq!(relayed.reset_not_before, original.reset_not_before);
        prop_assert_eq!(relayed.reset_not_after, original.reset_not_after);
        prop_assert_eq!(&relayed.ra_uri, &original.ra_uri);
        prop_assert_eq!(&relayed.update_uri, &original.update_uri);
        prop_assert_eq!(relayed.contact_update_before_enroll, original.contact_update_before_enroll);
        prop_assert_eq!(&relayed.enroll_uri, &original.enroll_uri);
        prop_assert_eq!(&relayed.fallback_uri, &sp1.update_server_uri);
    }

    #[test]
    fn attestation_is_sound_for_every_tamper_position(byte in 0usize..32, bit in 0u8..8, seed in any::<u64>()) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut v = RaVerifier::new();
        let good = device_firmware();
        v.expect(b"d", good.measurement());
        let mut bad = good.clone();
        bad.code_digest.0[byte] ^= 1 << bit;
        let nonce = v.challenge(b"d", &mut rng).unwrap();
        prop_assert!(!v.verify(b"d", &nonce, attestation_response(&bad.measurement(), &nonce)).unwrap().verdict);
        let nonce = v.challenge(b"d", &mut rng).unwrap();
        prop_assert!(v.verify(b"d", &nonce, attestation_response(&good.measurement(), &nonce)).unwrap().verdict);
    }
}

#[test]
fn empty_list_has_no_window() {
    assert_eq!(window_hull(&UpdateInfoList::default()), None);
}
