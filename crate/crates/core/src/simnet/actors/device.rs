// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;

use rand::RngCore;

use super::super::engine::{Accepting, Ctx, Delivered, Endpoint, EpEvent, Millis, Timer};
use super::super::wire::{ActorId, AppMsg, Frame, MessageClass};
use crate::codec::WireCodec;
use crate::crypto::{self, Digest, KeyPair};
use crate::device::{
    DeviceState, EnrollRequest, KeyGeneration, Phase, PostResetStep, ResetAgreement,
};
use crate::messages::{SignedEnvelope, TransferMessage, Uri, VersionInfo};
use crate::pki::CertProfile;
use crate::session::{SessionId, Side};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Task {
    InitialEnroll,
    Step(PostResetStep),
    Service,
    Fallback,
}

impl Task {
    fn class(self) -> MessageClass {
        match self {
            Task::InitialEnroll => MessageClass::InitialEnroll,
            Task::Step(PostResetStep::Attest) => MessageClass::Attestation,
            Task::Step(PostResetStep::Update) => MessageClass::FirmwareUpdate,
            Task::Step(PostResetStep::Enroll) => MessageClass::Reenroll,
            Task::Service => MessageClass::Service,
            Task::Fallback => MessageClass::Fallback,
        }
    }
}

#[derive(Debug)]
pub(crate) struct DeviceActor {
    pub index: u32,
    pub me: ActorId,
    pub state: DeviceState,
    ep: Endpoint,
    keygen: KeyGeneration,
    directory: BTreeMap<Uri, ActorId>,
    retry_budget: u32,
    tamper_at_reset: bool,
    agreement_roots: Vec<Digest>,
    agreed_firmware: VersionInfo,
    current: Option<(SessionId, Task)>,
    attempts: u32,
    pending_key: Option<KeyPair>,
    history_seen: usize,
    agreement: Option<ResetAgreement>,
    pub reset_audit: Option<Vec<String>>,
    pub pre_transfer_roots: Vec<String>,
    pub new_fingerprints: Vec<Digest>,
    pub step_log: Vec<String>,
    pub service_done: bool,
    pub fallback_attested: Option<bool>,
}

impl DeviceActor {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        index: u32,
        state: DeviceState,
        keygen: KeyGeneration,
        directory: BTreeMap<Uri, ActorId>,
        retry_budget: u32,
        tamper_at_reset: bool,
        agreement_roots: Vec<Digest>,
        agreed_firmware: VersionInfo,
    ) -> Self {
        let me = ActorId::Device(index);
        DeviceActor {
            index,
            me,
            history_seen: state.history().len(),
            state,
            ep: Endpoint::new(me),
            keygen,
            directory,
            retry_budget,
            tamper_at_reset,
            agreement_roots,
            agreed_firmware,
            current: None,
            attempts: 0,
            pending_key: None,
            agreement: None,
            reset_audit: None,
            pre_transfer_roots: Vec::new(),
            new_fingerprints: Vec::new(),
            step_log: Vec::new(),
            service_done: false,
            fallback_attested: None,
        }
    }

    /// Writes a trace line for every phase entered since the last call.
    fn sync_phases(&mut self, ctx: &mut Ctx) {
        let history = self.state.history();
        for pair in history[self.history_seen.saturating_sub(1)..].windows(2) {
            ctx.log("phase", format!("{} {}->{}", self.me, pair[0], pair[1]));
        }
        self.history_seen = history.len();
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx, timer: Timer) {
        match timer {
            Timer::Kick => self.kick(ctx),
            Timer::Timeout(sid) => {
                if self.ep.expire(sid) && self.current.map(|c| c.0) == Some(sid) {
                    self.fail(ctx, false, "timeout".into());
                }
            }
            Timer::Reset => self.reset(ctx),
            _ => {}
        }
        self.sync_phases(ctx);
    }

    fn kick(&mut self, ctx: &mut Ctx) {
        if self.current.is_some() {
            return;
        }
        let task = match self.state.phase() {
            Phase::Provisioned => Task::InitialEnroll,
            Phase::ResetDone | Phase::Attested | Phase::Updated => {
                match self.state.post_reset_plan().first() {
                    Some(step) => Task::Step(*step),
                    None => return,
                }
            }
            Phase::Reenrolled if !self.service_done => Task::Service,
            Phase::Fallback if !self.state.fallback_contacted() => Task::Fallback,
            _ => return,
        };
        let bounded = matches!(task, Task::InitialEnroll | Task::Fallback);
        if bounded && ctx.now >= ctx.horizon_ms() {
            ctx.log(
                "note",
                format!("{} gives up {:?} at horizon", self.me, task),
            );
            return;
        }
        let Some((target, uri)) = self.target(task) else {
            let reason = format!("no route for {task:?}");
            self.fail(ctx, true, reason);
            return;
        };
        let credential = match task {
            Task::InitialEnroll | Task::Service => self.state.credential(),
            _ => self.state.factory_credential(),
        }
        .expect("provisioned devices hold a factory credential");
        ctx.log("note", format!("{} starts {:?} at {uri}", self.me, task));
        let sid = self.ep.connect(ctx, target, task.class(), &credential);
        self.current = Some((sid, task));
    }

    fn target(&self, task: Task) -> Option<(ActorId, Uri)> {
        let endpoints = self.state.endpoints()?;
        let uri = match task {
            Task::InitialEnroll | Task::Step(PostResetStep::Enroll) => {
                Some(endpoints.ca_uri.clone())
            }
            Task::Step(PostResetStep::Attest) => endpoints.ra_uri.clone(),
            Task::Step(PostResetStep::Update) => endpoints.update_uri.clone(),
            // Regular traffic goes to the operator the device is enrolled with.
            Task::Service => endpoints.update_uri.clone(),
            Task::Fallback => endpoints.fallback_uri.clone().or_else(|| {
                self.state
                    .pending_transfer()
                    .map(|t| t.fallback_uri.clone())
            }),
        }?;
        let actor = *self.directory.get(&uri)?;
        Some((actor, uri))
    }

    fn fail(&mut self, ctx: &mut Ctx, permanent: bool, reason: String) {
        let Some((sid, task)) = self.current.take() else {
            // Failures without an exchange come from routing.
            if let Phase::ResetDone | Phase::Attested | Phase::Updated = self.state.phase() {
                self.state.enter_fallback(reason);
                ctx.timer(0, self.me, Timer::Kick);
            }
            return;
        };
        self.ep.close(sid);
        self.pending_key = None;
        let retry: Millis = ctx.timing.retry_delay_ms;
        ctx.log("note", format!("{} {:?} failed: {reason}", self.me, task));
        match task {
            Task::InitialEnroll | Task::Fallback => ctx.timer(retry, self.me, Timer::Kick),
            Task::Step(step) => {
                self.attempts += 1;
                self.step_log.push(format!("{step}:fail"));
                if permanent || self.attempts >= self.retry_budget {
                    self.state
                        .enter_fallback(format!("{step} failed: {reason}"));
                    self.attempts = 0;
                    ctx.timer(0, self.me, Timer::Kick);
                } else {
                    ctx.timer(retry, self.me, Timer::Kick);
                }
            }
            Task::Service => {
                self.attempts += 1;
                if self.attempts < self.retry_budget {
                    ctx.timer(retry, self.me, Timer::Kick);
                }
            }
        }
    }

    fn finish_task(&mut self, ctx: &mut Ctx) {
        if let Some((sid, task)) = self.current.take() {
            self.ep.close(sid);
            if let Task::Step(step) = task {
                self.step_log.push(format!("{step}:ok"));
            }
        }
        self.attempts = 0;
        ctx.timer(0, self.me, Timer::Kick);
    }

    pub fn on_packet(&mut self, ctx: &mut Ctx, d: Delivered) {
        let accepting_phase =
            matches!(self.state.phase(), Phase::Enrolled | Phase::TransferPending);
        let credential = match (&d.frame, accepting_phase) {
            (Frame::ClientHello(_), true) => self.state.credential(),
            _ => None,
        };
        let accepting = credential.as_ref().map(|c| Accepting {
            credential: c,
            store: self.state.trust_store(),
        });
        let event = self
            .ep
            .handle(ctx, d, accepting, self.state.trust_store(), false);
        match event {
            EpEvent::Established {
                sid,
                side: Side::Initiator,
                peer_certificate,
                fingerprint,
                ..
            } => self.on_established(ctx, sid, &peer_certificate, fingerprint),
            EpEvent::Established {
                sid,
                side: Side::Responder,
                peer,
                peer_certificate,
                ..
            } => {
                if peer_certificate.profile != CertProfile::Server {
                    ctx.log(
                        "note",
                        format!("{} refuses push session from {peer}", self.me),
                    );
                    self.ep.close(sid);
                }
            }
            EpEvent::Message {
                sid, class, msg, ..
            } => {
                if self.current.map(|c| c.0) == Some(sid) {
                    self.on_reply(ctx, msg);
                } else {
                    self.on_push(ctx, sid, class, msg);
                }
            }
            EpEvent::Failed { sid, reason, .. } => {
                if self.current.map(|c| c.0) == Some(sid) {
                    self.fail(ctx, false, reason);
                }
            }
            EpEvent::Nothing => {}
        }
        self.sync_phases(ctx);
    }

    fn on_established(
        &mut self,
        ctx: &mut Ctx,
        sid: SessionId,
        peer: &crate::pki::CompactCertificate,
        fingerprint: Digest,
    ) {
        let Some((current, task)) = self.current else {
            return;
        };
        if current != sid {
            return;
        }
        let wants_ca = matches!(
            task,
            Task::InitialEnroll | Task::Step(PostResetStep::Enroll)
        );
        if wants_ca != peer.profile.is_ca() || (!wants_ca && peer.profile != CertProfile::Server) {
            self.fail(
                ctx,
                false,
                format!("unexpected peer profile {:?}", peer.profile),
            );
            return;
        }
        if self.state.phase() == Phase::Reenrolled {
            self.new_fingerprints.push(fingerprint);
        }
        let msg = match task {
            Task::InitialEnroll | Task::Step(PostResetStep::Enroll) => match self.keygen {
                KeyGeneration::OnDevice => {
                    let mut seed = [0u8; 32];
                    ctx.rng.fill_bytes(&mut seed);
                    match self.state.prepare_enrollment(&seed) {
                        Ok((key, csr)) => {
                            self.pending_key = Some(key);
                            AppMsg::Enroll(EnrollRequest::Csr(csr))
                        }
                        Err(e) => {
                            self.fail(ctx, true, e.to_string());
                            return;
                        }
                    }
                }
                KeyGeneration::ServerGenerated => AppMsg::Enroll(EnrollRequest::ServerKeygen),
            },
            Task::Step(PostResetStep::Attest) => AppMsg::RaHello,
            Task::Step(PostResetStep::Update) => {
                AppMsg::UpdateQuery(self.state.firmware().version.clone())
            }
            Task::Service => AppMsg::ServiceRequest,
            Task::Fallback => AppMsg::FallbackContact(
                self.state
                    .fallback_reason()
                    .unwrap_or("unknown")
                    .to_string(),
            ),
        };
        self.ep.send(ctx, sid, task.class(), &msg);
    }

    fn on_reply(&mut self, ctx: &mut Ctx, msg: AppMsg) {
        let Some((sid, task)) = self.current else {
            return;
        };
        let now = ctx.now_ts();
        match (task, msg) {
            (
                Task::InitialEnroll | Task::Step(PostResetStep::Enroll),
                AppMsg::EnrollGranted(grant),
            ) => {
                let key = self.pending_key.take();
                match self.state.complete_enrollment(key, grant, now) {
                    Ok(()) => self.finish_task(ctx),
                    Err(e) => self.fail(ctx, true, e.to_string()),
                }
            }
            (Task::Step(PostResetStep::Attest), AppMsg::RaChallenge(nonce)) => {
                let response = self.state.ra_respond(&nonce);
                self.ep.send(
                    ctx,
                    sid,
                    task.class(),
                    &AppMsg::RaEvidence { nonce, response },
                );
            }
            (Task::Step(PostResetStep::Attest), AppMsg::RaVerdict(true)) => {
                match self.state.mark_attested() {
                    Ok(()) => self.finish_task(ctx),
                    Err(e) => self.fail(ctx, true, e.to_string()),
                }
            }
            (Task::Step(PostResetStep::Attest), AppMsg::RaVerdict(false)) => {
                self.fail(ctx, true, "attestation verdict negative".into())
            }
            (Task::Step(PostResetStep::Update), AppMsg::UpdateOffer(offer)) => {
                match self.state.complete_update(offer) {
                    Ok(()) => self.finish_task(ctx),
                    Err(e) => self.fail(ctx, true, e.to_string()),
                }
            }
            (Task::Service, AppMsg::ServiceResponse) => {
                self.service_done = true;
                self.finish_task(ctx);
            }
            (Task::Fallback, AppMsg::FallbackAck { attested }) => {
                self.state.mark_fallback_contacted();
                self.fallback_attested = attested;
                self.finish_task(ctx);
            }
            (Task::InitialEnroll | Task::Fallback, AppMsg::Reject(reason)) => {
                self.fail(ctx, false, format!("rejected: {reason}"))
            }
            (_, AppMsg::Reject(reason)) => self.fail(ctx, true, format!("rejected: {reason}")),
            (_, other) => self.fail(ctx, true, format!("unexpected reply {other:?}")),
        }
    }

    /// Requests pushed by an operator over a session it opened.
    fn on_push(&mut self, ctx: &mut Ctx, sid: SessionId, class: MessageClass, msg: AppMsg) {
        let now = ctx.now_ts();
        let pinned = self
            .ep
            .peer_certificate(sid)
            .is_some_and(|c| self.state.trust_store().is_pinned(&c.fingerprint()));
        let reply = match msg {
            AppMsg::FirmwarePush(version) if pinned => {
                if self.state.firmware().version == version {
                    AppMsg::Ack
                } else {
                    match self.state.apply_firmware(version) {
                        Ok(()) => AppMsg::Ack,
                        Err(e) => AppMsg::Reject(e.to_string()),
                    }
                }
            }
            AppMsg::TruststorePush(update) if pinned => {
                match self.state.apply_truststore_update(&update) {
                    Ok(()) => AppMsg::Ack,
                    Err(e) => AppMsg::Reject(e.to_string()),
                }
            }
            AppMsg::FirmwarePush(_) | AppMsg::TruststorePush(_) => {
                AppMsg::Reject("pushing server is not pinned".into())
            }
            AppMsg::TransferDelivery(envelope) => self.on_transfer(ctx, &envelope, now),
            other => AppMsg::Reject(format!("unexpected request {other:?}")),
        };
        self.ep.send(ctx, sid, class, &reply);
    }

    fn is_redelivery(&self, envelope: &SignedEnvelope) -> bool {
        self.state.phase() == Phase::TransferPending
            && self
                .state
                .operator_signer()
                .is_some_and(|k| crypto::verify_envelope(k, envelope))
            && TransferMessage::decode(&envelope.payload).ok().as_ref()
                == self.state.pending_transfer()
    }

    fn on_transfer(
        &mut self,
        ctx: &mut Ctx,
        envelope: &SignedEnvelope,
        now: crate::messages::TimeStamp,
    ) -> AppMsg {
        if self.is_redelivery(envelope) {
            return AppMsg::Ack;
        }
        let stale = self.state.operational().cloned();
        match self.state.handle_transfer_message(envelope, now) {
            Ok(()) => {
                self.pre_transfer_roots = self
                    .state
                    .trust_store()
                    .roots()
                    .map(|r| r.subject())
                    .collect();
                if let Some(credential) = stale {
                    ctx.leaks.stale.insert(self.index, credential);
                }
                let transfer = self
                    .state
                    .pending_transfer()
                    .cloned()
                    .expect("just accepted");
                self.agreement = Some(ResetAgreement {
                    factory_certificate: self
                        .state
                        .factory_certificate()
                        .cloned()
                        .expect("provisioned"),
                    firmware: self.agreed_firmware.clone(),
                    roots: self.agreement_roots.clone(),
                    transfer,
                });
                let delay = ctx.timing.reset_delay_ms;
                ctx.timer(delay, self.me, Timer::Reset);
                AppMsg::Ack
            }
            Err(e) => {
                ctx.log("note", format!("{} rejects transfer: {e}", self.me));
                AppMsg::Reject(e.to_string())
            }
        }
    }

    fn reset(&mut self, ctx: &mut Ctx) {
        let now = ctx.now_ts();
        match self.state.reset_to_agreed_state(now) {
            Ok(()) => {
                self.ep.clear();
                self.current = None;
                let mut audit = match &self.agreement {
                    Some(agreement) => self.state.audit_reset(agreement),
                    None => vec!["no agreement recorded".to_string()],
                };
                if !self.ep.is_empty() {
                    audit.push("session state retained".to_string());
                }
                if self.pending_key.is_some() {
                    audit.push("pending key retained".to_string());
                }
                for v in &audit {
                    ctx.log("note", format!("{} reset audit: {v}", self.me));
                }
                self.reset_audit = Some(audit);
                if self.tamper_at_reset {
                    self.state.tamper_firmware();
                    ctx.log("note", format!("{} firmware image corrupted", self.me));
                }
            }
            Err(e) => ctx.log("note", format!("{} reset refused: {e}", self.me)),
        }
        ctx.timer(0, self.me, Timer::Kick);
    }
}
