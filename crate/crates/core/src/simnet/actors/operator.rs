// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, BTreeSet};

use super::super::engine::{Accepting, Ctx, Delivered, Endpoint, EpEvent, Timer};
use super::super::wire::{ActorId, AppMsg, MessageClass};
use crate::codec::WireCodec;
use crate::crypto::{Digest, PublicKey};
use crate::device::{attestation_response, TruststoreUpdate};
use crate::messages::{SignedEnvelope, UpdateInfoList, Uri};
use crate::operators::{
    build_update_info_list, sp1_build_update_info_list, sp1_relay_transfer, sp2_build_transfer,
    sp2_verify_update_info_list, update_server_serve, OperatorState, RaVerifier, TransferOptions,
};
use crate::pki::{Capability, CertProfile, CompactCertificate, TrustStore};
use crate::session::{Credential, SessionId, Side};

/// Where an operator's pushes to one device stand.
#[derive(Debug, Default)]
struct Push {
    steps: Vec<(MessageClass, AppMsg)>,
    next: usize,
    sid: Option<SessionId>,
    done: bool,
    gave_up: bool,
    transfer_sent: bool,
    operational_serial: Option<u64>,
}

#[derive(Debug)]
pub(crate) struct Sp1Actor {
    pub op: OperatorState,
    credential: Credential,
    store: TrustStore,
    ep: Endpoint,
    ca1_name: Vec<u8>,
    device_ids: Vec<Vec<u8>>,
    last_update: bool,
    truststore_update: TruststoreUpdate,
    ra_refs: Vec<(Vec<u8>, Digest)>,
    fallback_ra: bool,
    list: Option<SignedEnvelope>,
    list_sid: Option<SessionId>,
    list_acked: bool,
    pushes: BTreeMap<u32, Push>,
    push_deadline_ms: u64,
    pending_revocations: BTreeSet<u64>,
    revocation_sid: Option<(SessionId, Vec<u64>)>,
    flush_scheduled: bool,
    fallback_nonces: BTreeMap<SessionId, ([u8; 16], Vec<u8>)>,
    pub fingerprints: Vec<Digest>,
    pub peer_keys: BTreeSet<PublicKey>,
    pub revoked: Vec<u64>,
    pub fallback_contacts: Vec<(String, Option<bool>)>,
    pub service_refusals: Vec<String>,
}

impl Sp1Actor {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        op: OperatorState,
        credential: Credential,
        store: TrustStore,
        ca1_name: Vec<u8>,
        device_ids: Vec<Vec<u8>>,
        last_update: bool,
        truststore_update: TruststoreUpdate,
        ra_refs: Vec<(Vec<u8>, Digest)>,
        fallback_ra: bool,
        push_deadline_ms: u64,
    ) -> Self {
        Sp1Actor {
            op,
            credential,
            store,
            ep: Endpoint::new(ActorId::Sp1),
            ca1_name,
            device_ids,
            last_update,
            truststore_update,
            ra_refs,
            fallback_ra,
            list: None,
            list_sid: None,
            list_acked: false,
            pushes: BTreeMap::new(),
            push_deadline_ms,
            pending_revocations: BTreeSet::new(),
            revocation_sid: None,
            flush_scheduled: false,
            fallback_nonces: BTreeMap::new(),
            fingerprints: Vec::new(),
            peer_keys: BTreeSet::new(),
            revoked: Vec::new(),
            fallback_contacts: Vec::new(),
            service_refusals: Vec::new(),
        }
    }

    fn record_sizes(&self, ctx: &mut Ctx) {
        let n = self.device_ids.len();
        for k in [0usize, 1, 2] {
            if k <= n {
                let list =
                    build_update_info_list(&self.op, &self.device_ids[..k]).expect("managed");
                ctx.record_size(
                    &format!("UpdateInfoList({k})"),
                    list.encode().expect("valid").len(),
                );
            }
        }
        let list = build_update_info_list(&self.op, &self.device_ids).expect("managed");
        ctx.record_size(
            &format!("UpdateInfoList(n={n})"),
            list.encode().expect("valid").len(),
        );
        if let Some(entry) = list.entries.first() {
            ctx.record_size("DeviceUpdateInfo", entry.encode().expect("valid").len());
        }
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx, timer: Timer) {
        match timer {
            Timer::TransferStart => {
                let envelope = sp1_build_update_info_list(&self.op, &self.device_ids)
                    .expect("all listed devices are managed");
                self.record_sizes(ctx);
                ctx.record_size(
                    &format!("UpdateInfoList(n={}).signed", self.device_ids.len()),
                    envelope.encode().expect("valid").len(),
                );
                self.list = Some(envelope);
                self.send_list(ctx);
            }
            Timer::Kick => self.send_list(ctx),
            Timer::Push(i) => self.push(ctx, i),
            Timer::FlushRevocations => {
                self.flush_scheduled = false;
                self.flush(ctx);
            }
            Timer::Timeout(sid) if self.ep.expire(sid) => {
                self.session_failed(ctx, sid, "timeout".into());
            }
            _ => {}
        }
    }

    fn send_list(&mut self, ctx: &mut Ctx) {
        if self.list_acked || self.list_sid.is_some() || self.list.is_none() {
            return;
        }
        if ctx.now >= ctx.horizon_ms() {
            return;
        }
        let sid = self.ep.connect(
            ctx,
            ActorId::Sp2,
            MessageClass::UpdateInfoList,
            &self.credential,
        );
        self.list_sid = Some(sid);
    }

    fn push(&mut self, ctx: &mut Ctx, index: u32) {
        let deadline = self.push_deadline_ms.min(ctx.horizon_ms());
        let Some(push) = self.pushes.get_mut(&index) else {
            return;
        };
        if push.done || push.gave_up || push.sid.is_some() {
            return;
        }
        if ctx.now >= deadline {
            push.gave_up = true;
            ctx.log("note", format!("sp1 gives up pushing to dev-{index:04}"));
            return;
        }
        let class = push.steps[push.next].0;
        let sid = self
            .ep
            .connect(ctx, ActorId::Device(index), class, &self.credential);
        push.sid = Some(sid);
    }

    fn push_for(&self, sid: SessionId) -> Option<u32> {
        self.pushes
            .iter()
            .find(|(_, p)| p.sid == Some(sid))
            .map(|(i, _)| *i)
    }

    fn session_failed(&mut self, ctx: &mut Ctx, sid: SessionId, reason: String) {
        let retry = ctx.timing.retry_delay_ms;
        if self.list_sid == Some(sid) {
            self.list_sid = None;
            ctx.timer(retry, ActorId::Sp1, Timer::Kick);
        } else if let Some(i) = self.push_for(sid) {
            let push = self.pushes.get_mut(&i).expect("found");
            push.sid = None;
            if push.transfer_sent && reason.contains("not accepting") {
                // The device has already reset.
                self.push_complete(ctx, i);
            } else {
                ctx.timer(retry, ActorId::Sp1, Timer::Push(i));
            }
        } else if self.revocation_sid.as_ref().map(|r| r.0) == Some(sid) {
            self.revocation_sid = None;
            self.schedule_flush(ctx, retry);
        }
    }

    fn push_complete(&mut self, ctx: &mut Ctx, index: u32) {
        let push = self.pushes.get_mut(&index).expect("push exists");
        push.done = true;
        if let Some(sid) = push.sid.take() {
            self.ep.close(sid);
        }
        ctx.log("note", format!("sp1 handed over dev-{index:04}"));
        if let Some(serial) = push.operational_serial {
            self.pending_revocations.insert(serial);
            self.schedule_flush(ctx, 100);
        }
    }

    fn schedule_flush(&mut self, ctx: &mut Ctx, delay: u64) {
        if !self.flush_scheduled {
            self.flush_scheduled = true;
            ctx.timer(delay, ActorId::Sp1, Timer::FlushRevocations);
        }
    }

    fn flush(&mut self, ctx: &mut Ctx) {
        if self.revocation_sid.is_some() || self.pending_revocations.is_empty() {
            return;
        }
        let serials: Vec<u64> = self.pending_revocations.iter().copied().collect();
        let sid = self.ep.connect(
            ctx,
            ActorId::Ca1,
            MessageClass::Revocation,
            &self.credential,
        );
        self.revocation_sid = Some((sid, serials));
    }

    pub fn on_packet(&mut self, ctx: &mut Ctx, d: Delivered) {
        let accepting = Accepting {
            credential: &self.credential,
            store: &self.store,
        };
        let event = self.ep.handle(ctx, d, Some(accepting), &self.store, true);
        match event {
            EpEvent::Established {
                sid,
                side,
                peer,
                peer_certificate,
                fingerprint,
                ..
            } => {
                self.fingerprints.push(fingerprint);
                self.peer_keys.insert(peer_certificate.subject_public_key);
                if side == Side::Initiator {
                    self.on_established(ctx, sid, peer, &peer_certificate);
                }
            }
            EpEvent::Message {
                sid, class, msg, ..
            } => self.on_message(ctx, sid, class, msg),
            EpEvent::Failed { sid, reason, .. } => self.session_failed(ctx, sid, reason),
            EpEvent::Nothing => {}
        }
    }

    fn on_established(
        &mut self,
        ctx: &mut Ctx,
        sid: SessionId,
        peer: ActorId,
        cert: &CompactCertificate,
    ) {
        if self.list_sid == Some(sid) {
            if cert.subject_name != b"sp2" || cert.profile != CertProfile::Server {
                self.ep.close(sid);
                self.session_failed(ctx, sid, "peer is not sp2".into());
                return;
            }
            let msg = AppMsg::UpdateInfoPush {
                list: self.list.clone().expect("list built"),
                ra_refs: self.ra_refs.clone(),
            };
            self.ep.send(ctx, sid, MessageClass::UpdateInfoList, &msg);
        } else if let Some((rsid, serials)) = &self.revocation_sid {
            if *rsid == sid {
                let msg = AppMsg::Revoke(serials.clone());
                self.ep.send(ctx, sid, MessageClass::Revocation, &msg);
                return;
            }
            self.established_push(ctx, sid, peer, cert);
        } else {
            self.established_push(ctx, sid, peer, cert);
        }
    }

    fn established_push(
        &mut self,
        ctx: &mut Ctx,
        sid: SessionId,
        peer: ActorId,
        cert: &CompactCertificate,
    ) {
        let Some(i) = self.push_for(sid) else {
            return;
        };
        let expected = &self.device_ids[i as usize];
        if &cert.subject_name != expected || peer != ActorId::Device(i) {
            self.ep.close(sid);
            self.session_failed(ctx, sid, "device identity mismatch".into());
            return;
        }
        let ca1 = self.ca1_name.clone();
        let push = self.pushes.get_mut(&i).expect("found");
        if cert.profile == CertProfile::Operational && cert.issuer_name == ca1 {
            push.operational_serial = Some(cert.serial);
        }
        let (class, msg) = push.steps[push.next].clone();
        if matches!(msg, AppMsg::TransferDelivery(_)) {
            push.transfer_sent = true;
        }
        self.ep.send(ctx, sid, class, &msg);
    }

    fn on_message(&mut self, ctx: &mut Ctx, sid: SessionId, class: MessageClass, msg: AppMsg) {
        if self.list_sid == Some(sid) {
            self.ep.close(sid);
            self.list_sid = None;
            match msg {
                AppMsg::Ack => self.list_acked = true,
                other => ctx.log("note", format!("sp2 refused device list: {other:?}")),
            }
            return;
        }
        if let Some((rsid, serials)) = self.revocation_sid.clone() {
            if rsid == sid {
                self.ep.close(sid);
                self.revocation_sid = None;
                if msg == AppMsg::Ack {
                    for s in &serials {
                        self.pending_revocations.remove(s);
                    }
                    self.revoked.extend(serials);
                } else {
                    ctx.log("note", format!("ca1 refused revocation: {msg:?}"));
                }
                if !self.pending_revocations.is_empty() {
                    let retry = ctx.timing.retry_delay_ms;
                    self.schedule_flush(ctx, retry);
                }
                return;
            }
        }
        if let Some(i) = self.push_for(sid) {
            match msg {
                AppMsg::Ack => {
                    let push = self.pushes.get_mut(&i).expect("found");
                    push.next += 1;
                    if push.next == push.steps.len() {
                        self.push_complete(ctx, i);
                    } else {
                        let (class, msg) = push.steps[push.next].clone();
                        if matches!(msg, AppMsg::TransferDelivery(_)) {
                            push.transfer_sent = true;
                        }
                        self.ep.send(ctx, sid, class, &msg);
                    }
                }
                other => {
                    let push = self.pushes.get_mut(&i).expect("found");
                    push.gave_up = true;
                    push.sid = None;
                    self.ep.close(sid);
                    ctx.log("note", format!("dev-{i:04} refused push: {other:?}"));
                }
            }
            return;
        }
        self.serve(ctx, sid, class, msg);
    }

    /// Requests from peers that opened a session to SP1.
    fn serve(&mut self, ctx: &mut Ctx, sid: SessionId, class: MessageClass, msg: AppMsg) {
        let Some(peer) = self.ep.peer_certificate(sid).cloned() else {
            return;
        };
        let reply = match msg {
            AppMsg::TransferCwt(envelope) => {
                if peer.subject_name != b"sp2" || peer.profile != CertProfile::Server {
                    AppMsg::Reject("not the agreed peer operator".into())
                } else {
                    self.on_transfer_cwt(ctx, &envelope)
                }
            }
            AppMsg::FallbackContact(reason) => {
                match self.op.device_for_factory_cert(&peer).map(<[u8]>::to_vec) {
                    Some(id) if peer.profile == CertProfile::Factory => {
                        let name = String::from_utf8_lossy(&id).into_owned();
                        ctx.log(
                            "note",
                            format!("sp1 fallback contact from {name}: {reason}"),
                        );
                        if self.fallback_ra {
                            let mut nonce = [0u8; 16];
                            rand::RngCore::fill_bytes(&mut ctx.rng, &mut nonce);
                            self.fallback_nonces.insert(sid, (nonce, id));
                            AppMsg::RaChallenge(nonce)
                        } else {
                            self.fallback_contacts.push((name, None));
                            self.ep
                                .send(ctx, sid, class, &AppMsg::FallbackAck { attested: None });
                            self.ep.close(sid);
                            return;
                        }
                    }
                    _ => AppMsg::Reject("unknown device".into()),
                }
            }
            AppMsg::RaEvidence { nonce, response } => match self.fallback_nonces.remove(&sid) {
                Some((issued, id)) => {
                    let expected = self.op.managed_devices.get(&id).map(|m| {
                        crate::device::firmware_measurement(
                            &m.version,
                            &crate::device::reference_code_digest(m.version.manifest_sequence),
                        )
                    });
                    let verdict = issued == nonce
                        && expected.is_some_and(|m| attestation_response(&m, &issued) == response);
                    self.fallback_contacts
                        .push((String::from_utf8_lossy(&id).into_owned(), Some(verdict)));
                    self.ep.send(
                        ctx,
                        sid,
                        class,
                        &AppMsg::FallbackAck {
                            attested: Some(verdict),
                        },
                    );
                    self.ep.close(sid);
                    return;
                }
                None => AppMsg::Reject("no challenge outstanding".into()),
            },
            AppMsg::ServiceRequest => {
                if peer.profile.permits(Capability::Operate) && peer.issuer_name == self.ca1_name {
                    AppMsg::ServiceResponse
                } else {
                    self.service_refusals.push(peer.subject());
                    AppMsg::Reject("operational certificate from ca1 required".into())
                }
            }
            other => AppMsg::Reject(format!("unexpected request {other:?}")),
        };
        let last = !matches!(reply, AppMsg::RaChallenge(_));
        self.ep.send(ctx, sid, class, &reply);
        if last {
            self.ep.close(sid);
        }
    }

    fn on_transfer_cwt(&mut self, ctx: &mut Ctx, envelope: &SignedEnvelope) -> AppMsg {
        let mut relayed = BTreeMap::new();
        for (i, id) in self.device_ids.iter().enumerate() {
            match sp1_relay_transfer(&self.op, b"sp2", envelope, id) {
                Ok(env) => {
                    relayed.insert(i as u32, env);
                }
                Err(e) => return AppMsg::Reject(e.to_string()),
            }
        }
        if !self.pushes.is_empty() {
            // Already relaying; SP2 retried after a lost acknowledgement.
            return AppMsg::Ack;
        }
        ctx.record_size("TransferMessage", envelope.payload.len());
        ctx.record_size(
            "TransferMessage.cwt",
            envelope.encode().expect("valid").len(),
        );
        if let Some(env) = relayed.values().next() {
            ctx.record_size(
                "TransferMessage.cwt_relayed",
                env.encode().expect("valid").len(),
            );
        }
        for (i, env) in relayed {
            let mut steps = Vec::new();
            if self.last_update {
                steps.push((
                    MessageClass::LastUpdate,
                    AppMsg::FirmwarePush(self.op.current_firmware.clone()),
                ));
            }
            steps.push((
                MessageClass::TruststoreUpdate,
                AppMsg::TruststorePush(self.truststore_update.clone()),
            ));
            steps.push((
                MessageClass::TransferDelivery,
                AppMsg::TransferDelivery(env),
            ));
            self.pushes.insert(
                i,
                Push {
                    steps,
                    ..Push::default()
                },
            );
            ctx.timer(u64::from(i % 50) * 5, ActorId::Sp1, Timer::Push(i));
        }
        AppMsg::Ack
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Sp2Stage {
    Waiting,
    Registering,
    Delivering,
    Done,
    Failed,
}

#[derive(Debug)]
pub(crate) struct Sp2Actor {
    pub op: OperatorState,
    credential: Credential,
    store: TrustStore,
    ep: Endpoint,
    ca2_name: Vec<u8>,
    default_enroll_uri: Uri,
    options: TransferOptions,
    omit_registration: bool,
    verifier: RaVerifier,
    list: Option<UpdateInfoList>,
    stage: Sp2Stage,
    sid: Option<SessionId>,
    cwt: Option<SignedEnvelope>,
    ra_sessions: BTreeMap<SessionId, Vec<u8>>,
    pub fingerprints: Vec<Digest>,
    pub attestations: Vec<(String, bool)>,
}

impl Sp2Actor {
    pub fn new(
        op: OperatorState,
        credential: Credential,
        store: TrustStore,
        ca2_name: Vec<u8>,
        default_enroll_uri: Uri,
        options: TransferOptions,
        omit_registration: bool,
    ) -> Self {
        Sp2Actor {
            op,
            credential,
            store,
            ep: Endpoint::new(ActorId::Sp2),
            ca2_name,
            default_enroll_uri,
            options,
            omit_registration,
            verifier: RaVerifier::new(),
            list: None,
            stage: Sp2Stage::Waiting,
            sid: None,
            cwt: None,
            ra_sessions: BTreeMap::new(),
            fingerprints: Vec::new(),
            attestations: Vec::new(),
        }
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx, timer: Timer) {
        match timer {
            Timer::Kick => self.advance(ctx),
            Timer::Timeout(sid) if self.ep.expire(sid) && self.sid == Some(sid) => {
                self.sid = None;
                let retry = ctx.timing.retry_delay_ms;
                ctx.timer(retry, ActorId::Sp2, Timer::Kick);
            }
            _ => {}
        }
    }

    fn advance(&mut self, ctx: &mut Ctx) {
        if self.sid.is_some() || ctx.now >= ctx.horizon_ms() {
            return;
        }
        let (peer, class) = match self.stage {
            Sp2Stage::Registering => (ActorId::Ca2, MessageClass::Registration),
            Sp2Stage::Delivering => (ActorId::Sp1, MessageClass::TransferToSp1),
            _ => return,
        };
        self.sid = Some(self.ep.connect(ctx, peer, class, &self.credential));
    }

    fn build_transfer(&mut self, ctx: &mut Ctx, enroll_uri: Uri) {
        let list = self.list.clone().expect("list verified");
        match sp2_build_transfer(&mut self.op, &list, enroll_uri, &self.options) {
            Ok((envelope, _)) => {
                ctx.leaks.sp2_cwt = Some(envelope.clone());
                self.cwt = Some(envelope);
                self.stage = Sp2Stage::Delivering;
                self.advance(ctx);
            }
            Err(e) => {
                ctx.log("note", format!("sp2 cannot build transfer: {e}"));
                self.stage = Sp2Stage::Failed;
            }
        }
    }

    pub fn on_packet(&mut self, ctx: &mut Ctx, d: Delivered) {
        let accepting = Accepting {
            credential: &self.credential,
            store: &self.store,
        };
        let event = self.ep.handle(ctx, d, Some(accepting), &self.store, true);
        match event {
            EpEvent::Established {
                sid,
                side,
                peer_certificate,
                fingerprint,
                ..
            } => {
                self.fingerprints.push(fingerprint);
                if side == Side::Initiator && self.sid == Some(sid) {
                    let (ok, class, msg) = match self.stage {
                        Sp2Stage::Registering => (
                            peer_certificate.profile.is_ca()
                                && peer_certificate.subject_name == self.ca2_name,
                            MessageClass::Registration,
                            AppMsg::Register(self.list.clone().expect("list verified")),
                        ),
                        _ => (
                            peer_certificate.subject_name == b"sp1"
                                && peer_certificate.profile == CertProfile::Server,
                            MessageClass::TransferToSp1,
                            AppMsg::TransferCwt(self.cwt.clone().expect("built")),
                        ),
                    };
                    if ok {
                        self.ep.send(ctx, sid, class, &msg);
                    } else {
                        self.ep.close(sid);
                        self.sid = None;
                        ctx.log("note", "sp2 talked to the wrong peer");
                    }
                }
            }
            EpEvent::Message {
                sid, class, msg, ..
            } => {
                if self.sid == Some(sid) {
                    self.on_reply(ctx, sid, msg);
                } else {
                    self.serve(ctx, sid, class, msg);
                }
            }
            EpEvent::Failed { sid, .. } => {
                if self.sid == Some(sid) {
                    self.sid = None;
                    let retry = ctx.timing.retry_delay_ms;
                    ctx.timer(retry, ActorId::Sp2, Timer::Kick);
                }
            }
            EpEvent::Nothing => {}
        }
    }

    fn on_reply(&mut self, ctx: &mut Ctx, sid: SessionId, msg: AppMsg) {
        self.ep.close(sid);
        self.sid = None;
        match (self.stage, msg) {
            (Sp2Stage::Registering, AppMsg::Registered(uri)) => self.build_transfer(ctx, uri),
            (Sp2Stage::Delivering, AppMsg::Ack) => self.stage = Sp2Stage::Done,
            (stage, other) => {
                ctx.log("note", format!("sp2 {stage:?} refused: {other:?}"));
                self.stage = Sp2Stage::Failed;
            }
        }
    }

    fn managed_id(&self, peer: &CompactCertificate) -> Option<Vec<u8>> {
        if peer.profile != CertProfile::Factory {
            return None;
        }
        self.op.device_for_factory_cert(peer).map(<[u8]>::to_vec)
    }

    fn serve(&mut self, ctx: &mut Ctx, sid: SessionId, class: MessageClass, msg: AppMsg) {
        let Some(peer) = self.ep.peer_certificate(sid).cloned() else {
            return;
        };
        let mut last = true;
        let reply = match msg {
            AppMsg::UpdateInfoPush { list, ra_refs } => {
                if peer.subject_name != b"sp1" || peer.profile != CertProfile::Server {
                    AppMsg::Reject("not the agreed peer operator".into())
                } else {
                    match sp2_verify_update_info_list(&self.op, b"sp1", &list) {
                        Ok(list) => {
                            if self.stage == Sp2Stage::Waiting {
                                for (id, m) in ra_refs {
                                    self.verifier.expect(&id, m);
                                }
                                self.list = Some(list);
                                if self.omit_registration {
                                    ctx.log("note", "sp2 skips registration with ca2");
                                    let uri = self.default_enroll_uri.clone();
                                    self.build_transfer(ctx, uri);
                                } else {
                                    self.stage = Sp2Stage::Registering;
                                    ctx.timer(0, ActorId::Sp2, Timer::Kick);
                                }
                            }
                            AppMsg::Ack
                        }
                        Err(e) => AppMsg::Reject(e.to_string()),
                    }
                }
            }
            AppMsg::RaHello => match self.managed_id(&peer) {
                Some(id) => match self.verifier.challenge(&id, &mut ctx.rng) {
                    Ok(nonce) => {
                        self.ra_sessions.insert(sid, id);
                        last = false;
                        AppMsg::RaChallenge(nonce)
                    }
                    Err(e) => AppMsg::Reject(e.to_string()),
                },
                None => AppMsg::Reject("not a managed device".into()),
            },
            AppMsg::RaEvidence { nonce, response } => match self.ra_sessions.remove(&sid) {
                Some(id) => match self.verifier.verify(&id, &nonce, response) {
                    Ok(exchange) => {
                        self.attestations
                            .push((String::from_utf8_lossy(&id).into_owned(), exchange.verdict));
                        AppMsg::RaVerdict(exchange.verdict)
                    }
                    Err(e) => AppMsg::Reject(e.to_string()),
                },
                None => AppMsg::Reject("no challenge outstanding".into()),
            },
            AppMsg::UpdateQuery(current) => match self.managed_id(&peer) {
                Some(_) => match self.ep.session(sid) {
                    Some(session) => match update_server_serve(&self.op, session, &current) {
                        Ok(offer) => AppMsg::UpdateOffer(offer),
                        Err(e) => AppMsg::Reject(e.to_string()),
                    },
                    None => return,
                },
                None => AppMsg::Reject("not a managed device".into()),
            },
            AppMsg::ServiceRequest => {
                if peer.profile.permits(Capability::Operate) && peer.issuer_name == self.ca2_name {
                    AppMsg::ServiceResponse
                } else {
                    AppMsg::Reject("operational certificate from ca2 required".into())
                }
            }
            other => AppMsg::Reject(format!("unexpected request {other:?}")),
        };
        self.ep.send(ctx, sid, class, &reply);
        if last {
            self.ep.close(sid);
        }
    }
}
