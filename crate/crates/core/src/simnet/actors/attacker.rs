// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;

use rand::RngCore;

use super::super::adversary::InjectKind;
use super::super::engine::{Ctx, Delivered, Endpoint, EpEvent, Timer};
use super::super::wire::{ActorId, AppMsg, Frame, MessageClass};
use crate::codec::WireCodec;
use crate::crypto::{generate_key_pair, sign_envelope, KeyPair};
use crate::device::EnrollRequest;
use crate::messages::{CertificateSigningRequest, EnvelopeProfile, TransferMessage, Uri};
use crate::pki::{CertProfile, TrustStore};
use crate::session::{Credential, SessionId, SessionRecord};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttemptOutcome {
    Accepted,
    Rejected(String),
    /// The exchange never completed.
    NoAnswer,
}

impl AttemptOutcome {
    pub fn is_rejected(&self) -> bool {
        matches!(self, AttemptOutcome::Rejected(_))
    }
}

/// Result of one impersonation attempt or stale-credential probe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attempt {
    pub kind: String,
    pub target: ActorId,
    pub outcome: AttemptOutcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Job {
    Transfer(InjectKind, u32),
    Csr(u32),
    Probe(u32),
}

impl Job {
    fn kind(self) -> String {
        match self {
            Job::Transfer(kind, _) => kind.name().to_string(),
            Job::Csr(_) => InjectKind::MismatchedCsr.name().to_string(),
            Job::Probe(_) => "stale_credential".to_string(),
        }
    }

    fn target(self) -> ActorId {
        match self {
            Job::Transfer(_, i) => ActorId::Device(i),
            Job::Csr(_) => ActorId::Ca1,
            Job::Probe(_) => ActorId::Sp1,
        }
    }
}

/// Insider with a CA1-issued server certificate, a registered factory
/// identity of its own, and its own signing key.
#[derive(Debug)]
pub(crate) struct AttackerActor {
    ep: Endpoint,
    server_credential: Credential,
    device_credential: Credential,
    signing_key: KeyPair,
    store: TrustStore,
    device_ids: Vec<Vec<u8>>,
    own_uri: Uri,
    jobs: BTreeMap<SessionId, Job>,
    pub attempts: Vec<Attempt>,
}

impl AttackerActor {
    pub fn new(
        server_credential: Credential,
        device_credential: Credential,
        signing_key: KeyPair,
        store: TrustStore,
        device_ids: Vec<Vec<u8>>,
    ) -> Self {
        AttackerActor {
            ep: Endpoint::new(ActorId::Adversary),
            server_credential,
            device_credential,
            signing_key,
            store,
            device_ids,
            own_uri: Uri::new("coaps://adv.example/x").expect("static uri"),
            jobs: BTreeMap::new(),
            attempts: Vec::new(),
        }
    }

    fn start(&mut self, ctx: &mut Ctx, job: Job) {
        let (peer, class, credential) = match job {
            Job::Transfer(_, i) => (
                ActorId::Device(i),
                MessageClass::TransferDelivery,
                &self.server_credential,
            ),
            Job::Csr(_) => (
                ActorId::Ca1,
                MessageClass::InitialEnroll,
                &self.device_credential,
            ),
            Job::Probe(i) => match ctx.leaks.stale.get(&i) {
                Some(c) => (ActorId::Sp1, MessageClass::Service, &c.clone()),
                None => return,
            },
        };
        let credential = credential.clone();
        ctx.log("adv", format!("starts {} against {peer}", job.kind()));
        let sid = self.ep.connect(ctx, peer, class, &credential);
        self.jobs.insert(sid, job);
    }

    fn finish(&mut self, ctx: &mut Ctx, sid: SessionId, outcome: AttemptOutcome) {
        if let Some(job) = self.jobs.remove(&sid) {
            self.ep.close(sid);
            ctx.log(
                "adv",
                format!("{} against {} -> {outcome:?}", job.kind(), job.target()),
            );
            self.attempts.push(Attempt {
                kind: job.kind(),
                target: job.target(),
                outcome,
            });
        }
    }

    fn targets(&self, device: Option<u32>) -> Vec<u32> {
        match device {
            Some(i) => vec![i],
            None => (0..self.device_ids.len() as u32).collect(),
        }
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx, timer: Timer) {
        match timer {
            Timer::Inject(inj) => match inj.kind {
                InjectKind::Garbage => {
                    let mut record = SessionRecord {
                        session_id: [0; 8],
                        seq: ctx.rng.next_u64() % 16,
                        payload: vec![0; 24],
                        tag: [0; 32],
                    };
                    ctx.rng.fill_bytes(&mut record.session_id);
                    ctx.rng.fill_bytes(&mut record.payload);
                    ctx.rng.fill_bytes(&mut record.tag);
                    ctx.send(
                        ActorId::Adversary,
                        inj.dst,
                        inj.class,
                        &Frame::Record(record),
                    );
                }
                InjectKind::Sp2SignedTransfer if ctx.leaks.sp2_cwt.is_none() => {
                    if ctx.now < ctx.horizon_ms() {
                        ctx.timer(500, ActorId::Adversary, Timer::Inject(inj));
                    }
                }
                InjectKind::ForgedTransfer | InjectKind::Sp2SignedTransfer => {
                    for i in self.targets(inj.device) {
                        self.start(ctx, Job::Transfer(inj.kind, i));
                    }
                }
                InjectKind::MismatchedCsr => {
                    for i in self.targets(inj.device) {
                        self.start(ctx, Job::Csr(i));
                    }
                }
            },
            Timer::Probe(i) => self.start(ctx, Job::Probe(i)),
            Timer::Timeout(sid) if self.ep.expire(sid) => {
                self.finish(ctx, sid, AttemptOutcome::NoAnswer);
            }
            _ => {}
        }
    }

    fn forged_transfer(&self, ctx: &Ctx) -> AppMsg {
        let now = ctx.now_ts();
        let transfer = TransferMessage {
            reset_not_before: now,
            reset_not_after: now.plus(3600),
            ra_uri: None,
            update_uri: self.own_uri.clone(),
            contact_update_before_enroll: false,
            enroll_uri: self.own_uri.clone(),
            fallback_uri: self.own_uri.clone(),
        };
        let payload = transfer.encode().expect("valid transfer");
        AppMsg::TransferDelivery(
            sign_envelope(&self.signing_key, EnvelopeProfile::Cwt, &payload).expect("non-empty"),
        )
    }

    pub fn on_packet(&mut self, ctx: &mut Ctx, d: Delivered) {
        match self.ep.handle(ctx, d, None, &self.store, false) {
            EpEvent::Established { sid, .. } => {
                let Some(job) = self.jobs.get(&sid).copied() else {
                    return;
                };
                let (class, msg) = match job {
                    Job::Transfer(InjectKind::Sp2SignedTransfer, _) => (
                        MessageClass::TransferDelivery,
                        AppMsg::TransferDelivery(
                            ctx.leaks.sp2_cwt.clone().expect("checked before start"),
                        ),
                    ),
                    Job::Transfer(_, _) => {
                        (MessageClass::TransferDelivery, self.forged_transfer(ctx))
                    }
                    Job::Csr(i) => {
                        let mut seed = [0u8; 32];
                        ctx.rng.fill_bytes(&mut seed);
                        let key = generate_key_pair(&seed).expect("seed is 32 bytes");
                        let csr = CertificateSigningRequest::new(
                            &key,
                            &self.device_ids[i as usize],
                            CertProfile::Operational,
                        );
                        (
                            MessageClass::InitialEnroll,
                            AppMsg::Enroll(EnrollRequest::Csr(csr)),
                        )
                    }
                    Job::Probe(_) => (MessageClass::Service, AppMsg::ServiceRequest),
                };
                self.ep.send(ctx, sid, class, &msg);
            }
            EpEvent::Message { sid, msg, .. } => {
                let outcome = match msg {
                    AppMsg::Reject(reason) => AttemptOutcome::Rejected(reason),
                    _ => AttemptOutcome::Accepted,
                };
                self.finish(ctx, sid, outcome);
            }
            EpEvent::Failed { sid, reason, .. } => self.finish(
                ctx,
                sid,
                AttemptOutcome::Rejected(format!("handshake: {reason}")),
            ),
            EpEvent::Nothing => {}
        }
    }
}
