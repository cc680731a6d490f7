// SPDX-License-Identifier: Apache-2.0

use rand::RngCore;

use super::super::engine::{Accepting, Ctx, Delivered, Endpoint, EpEvent, Timer};
use super::super::wire::{ActorId, AppMsg};
use crate::crypto::{Digest, PublicKey};
use crate::device::{EnrollGrant, EnrollRequest};
use crate::pki::{CertProfile, CertRef, CertificateAuthority, CompactCertificate, TrustStore};
use crate::session::{Credential, SessionId};

/// Extras an operator has its CA hand out with every certificate.
#[derive(Debug, Clone)]
pub(crate) struct GrantExtras {
    pub roots: Vec<(CompactCertificate, bool)>,
    pub pins: Vec<Digest>,
    pub operator_signer: PublicKey,
}

#[derive(Debug)]
pub(crate) struct CaActor {
    pub me: ActorId,
    pub ca: CertificateAuthority,
    credential: Credential,
    store: TrustStore,
    ep: Endpoint,
    /// The operator this CA serves; only it may register or revoke.
    operator: Vec<u8>,
    extras: GrantExtras,
    pub issued: Vec<(String, u64)>,
    pub refusals: Vec<String>,
}

impl CaActor {
    pub fn new(
        me: ActorId,
        ca: CertificateAuthority,
        store: TrustStore,
        operator: &[u8],
        extras: GrantExtras,
    ) -> Self {
        CaActor {
            me,
            credential: ca.session_credential(),
            ca,
            store,
            ep: Endpoint::new(me),
            operator: operator.to_vec(),
            extras,
            issued: Vec::new(),
            refusals: Vec::new(),
        }
    }

    pub fn on_timer(&mut self, _ctx: &mut Ctx, timer: Timer) {
        if let Timer::Timeout(sid) = timer {
            self.ep.expire(sid);
        }
    }

    pub fn on_packet(&mut self, ctx: &mut Ctx, d: Delivered) {
        let accepting = Accepting {
            credential: &self.credential,
            store: &self.store,
        };
        if let EpEvent::Message {
            sid, class, msg, ..
        } = self.ep.handle(ctx, d, Some(accepting), &self.store, true)
        {
            let reply = self.serve(ctx, sid, msg);
            if let AppMsg::Reject(reason) = &reply {
                ctx.log("note", format!("{} refuses: {reason}", self.me));
                self.refusals.push(reason.clone());
            }
            self.ep.send(ctx, sid, class, &reply);
            self.ep.close(sid);
        }
    }

    fn grant(&self, certificate: CompactCertificate, server_key_seed: Option<[u8; 32]>) -> AppMsg {
        AppMsg::EnrollGranted(EnrollGrant {
            certificate,
            chain: self.ca.issued_chain(),
            server_key_seed,
            roots: self.extras.roots.clone(),
            pins: self.extras.pins.clone(),
            operator_signer: Some(self.extras.operator_signer),
        })
    }

    fn serve(&mut self, ctx: &mut Ctx, sid: SessionId, msg: AppMsg) -> AppMsg {
        let now = ctx.now_ts();
        let Some(session) = self.ep.session(sid) else {
            return AppMsg::Reject("no session".into());
        };
        let peer = session.peer_certificate().clone();
        let is_operator = peer.subject_name == self.operator && peer.profile == CertProfile::Server;
        match msg {
            AppMsg::Enroll(EnrollRequest::Csr(csr)) => {
                match self.ca.enroll(session, &csr, now, &ctx.revocations) {
                    Ok(cert) => {
                        self.issued.push((cert.subject(), cert.serial));
                        self.grant(cert, None)
                    }
                    Err(e) => AppMsg::Reject(e.to_string()),
                }
            }
            AppMsg::Enroll(EnrollRequest::ServerKeygen) => {
                let mut seed = [0u8; 32];
                ctx.rng.fill_bytes(&mut seed);
                match self
                    .ca
                    .enroll_server_generated(session, &seed, now, &ctx.revocations)
                {
                    Ok((_, cert)) => {
                        self.issued.push((cert.subject(), cert.serial));
                        self.grant(cert, Some(seed))
                    }
                    Err(e) => AppMsg::Reject(e.to_string()),
                }
            }
            AppMsg::Register(list) if is_operator => {
                match self
                    .ca
                    .register_update_info_list(&list, now, &ctx.revocations)
                {
                    Ok(uri) => AppMsg::Registered(uri),
                    Err(e) => AppMsg::Reject(e.to_string()),
                }
            }
            AppMsg::Revoke(serials) if is_operator => {
                for &serial in &serials {
                    if let Err(e) = self.ca.revoke(serial) {
                        return AppMsg::Reject(e.to_string());
                    }
                }
                for &serial in &serials {
                    ctx.revocations.insert(CertRef {
                        issuer: self.ca.name().to_vec(),
                        serial,
                    });
                    ctx.log("note", format!("{} revoked serial {serial}", self.me));
                    if ctx.probe_stale {
                        let devices: Vec<u32> = ctx
                            .leaks
                            .stale
                            .iter()
                            .filter(|(_, c)| {
                                c.certificate.serial == serial
                                    && c.certificate.issuer_name == self.ca.name()
                            })
                            .map(|(i, _)| *i)
                            .collect();
                        for i in devices {
                            ctx.timer(200, ActorId::Adversary, Timer::Probe(i));
                        }
                    }
                }
                AppMsg::Ack
            }
            AppMsg::Register(_) | AppMsg::Revoke(_) => AppMsg::Reject(format!(
                "{} is not this authority's operator",
                peer.subject()
            )),
            other => AppMsg::Reject(format!("unexpected request {other:?}")),
        }
    }
}
