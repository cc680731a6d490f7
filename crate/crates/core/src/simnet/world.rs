// SPDX-License-Identifier: Apache-2.0

//! Builds the actors for a scenario, runs the event loop and summarises
//! the outcome.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::actors::{
    AttackerActor, Attempt, CaActor, DeviceActor, GrantExtras, Sp1Actor, Sp2Actor,
};
use super::adversary::Interceptor;
use super::engine::{Ctx, Item, NetStats, SimEvent, Timer};
use super::scenario::Scenario;
use super::trace::Trace;
use super::wire::ActorId;
use super::SimError;
use crate::crypto::{generate_key_pair, Digest, KeyPair, PublicKey};
use crate::device::{
    firmware_measurement, reference_code_digest, DeviceState, Firmware, KeyGeneration, Phase,
    TruststoreUpdate,
};
use crate::messages::{TimeStamp, Uri, VersionInfo};
use crate::operators::{ManagedDevice, OperatorState, TransferOptions};
use crate::pki::{
    build_hierarchy, CaRole, CertProfile, CompactCertificate, HierarchyParams, HierarchyVariant,
    RevocationView, TrustStore, TruststorePhase,
};
use crate::session::Credential;

const SP1_UPDATE_URI: &str = "coaps://update.sp1.example/fw";
const SP2_UPDATE_URI: &str = "coaps://update.sp2.example/fw";
const SP2_RA_URI: &str = "coaps://ra.sp2.example/attest";
const FALLBACK_PLACEHOLDER: &str = "coaps://fallback.invalid/";

fn uri(s: &str) -> Uri {
    Uri::new(s).expect("static uri")
}

fn key(rng: &mut impl RngCore) -> KeyPair {
    let mut seed = [0u8; 32];
    rng.fill_bytes(&mut seed);
    generate_key_pair(&seed).expect("seed is 32 bytes")
}

pub fn device_id(index: u32) -> Vec<u8> {
    ActorId::Device(index).to_string().into_bytes()
}

fn version(seq: u64, host: &str) -> VersionInfo {
    VersionInfo {
        manifest_sequence: seq,
        manifest_uri: uri(&format!("coaps://fw.{host}.example/{seq}")),
    }
}

/// Final state of one device.
#[derive(Debug, Clone)]
pub struct DeviceOutcome {
    pub index: u32,
    pub final_phase: Phase,
    pub history: Vec<Phase>,
    /// Issuer of the operational certificate, if the device holds one.
    pub issuer: Option<String>,
    pub operational: Option<CompactCertificate>,
    pub fallback_reason: Option<String>,
    pub fallback_contacted: bool,
    /// Violations found right after reset; `None` if the device never reset.
    pub reset_audit: Option<Vec<String>>,
    pub pre_transfer_roots: Vec<String>,
    /// Session fingerprints the device produced after its reset.
    pub new_fingerprints: Vec<Digest>,
    pub step_log: Vec<String>,
    pub service_done: bool,
    pub report: String,
}

impl DeviceOutcome {
    pub fn reenrolled_under(&self, issuer: &str) -> bool {
        self.final_phase == Phase::Reenrolled && self.issuer.as_deref() == Some(issuer)
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub seed: u64,
    pub variant: HierarchyVariant,
    pub trace_digest: Digest,
    pub events: u64,
    /// False when the event budget ran out before the queue drained.
    pub quiescent: bool,
    pub end_ms: u64,
    pub devices: Vec<DeviceOutcome>,
    pub false_acceptances: Vec<String>,
    pub stats: NetStats,
    pub attempts: Vec<Attempt>,
    pub sizes: BTreeMap<String, usize>,
    pub revoked: Vec<u64>,
    /// Devices whose post-reset sessions overlap with what SP1 observed, or
    /// whose new operational key SP1 has seen.
    pub unlinkability_violations: Vec<u32>,
    pub sp1_refusals: Vec<String>,
}

impl RunReport {
    pub fn count(&self, phase: Phase) -> usize {
        self.devices
            .iter()
            .filter(|d| d.final_phase == phase)
            .count()
    }

    pub fn all_reenrolled_under(&self, issuer: &str) -> bool {
        self.devices.iter().all(|d| d.reenrolled_under(issuer))
    }

    /// Every device ends reenrolled or in fallback with a contact attempt.
    pub fn is_total(&self) -> bool {
        self.devices.iter().all(|d| match d.final_phase {
            Phase::Reenrolled => true,
            Phase::Fallback => d.fallback_reason.is_some(),
            _ => false,
        })
    }

    /// Devices whose reset audit found anything.
    pub fn reset_violations(&self) -> Vec<(u32, Vec<String>)> {
        self.devices
            .iter()
            .filter_map(|d| match &d.reset_audit {
                Some(v) if !v.is_empty() => Some((d.index, v.clone())),
                _ => None,
            })
            .collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "seed={} variant={} devices={} events={} end={}ms quiescent={}",
            self.seed,
            self.variant,
            self.devices.len(),
            self.events,
            self.end_ms,
            self.quiescent
        );
        let _ = writeln!(out, "trace.digest={}", self.trace_digest);
        for d in &self.devices {
            let _ = write!(
                out,
                "{} phase={} issuer={}",
                ActorId::Device(d.index),
                d.final_phase,
                d.issuer.as_deref().unwrap_or("-")
            );
            if let Some(reason) = &d.fallback_reason {
                let _ = write!(
                    out,
                    " fallback={reason:?} contacted={}",
                    d.fallback_contacted
                );
            }
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "summary reenrolled={} fallback={} other={}",
            self.count(Phase::Reenrolled),
            self.count(Phase::Fallback),
            self.devices.len() - self.count(Phase::Reenrolled) - self.count(Phase::Fallback)
        );
        for (reason, n) in &self.stats.discards {
            let _ = writeln!(out, "discard {reason} {n}");
        }
        for a in &self.attempts {
            let _ = writeln!(out, "attempt {} {} {:?}", a.kind, a.target, a.outcome);
        }
        let _ = writeln!(out, "false_acceptances={}", self.false_acceptances.len());
        let _ = writeln!(
            out,
            "unlinkability_violations={}",
            self.unlinkability_violations.len()
        );
        out
    }
}

#[derive(Debug)]
pub struct SimOutcome {
    pub report: RunReport,
    pub trace: Trace,
}

struct World {
    ctx: Ctx,
    devices: Vec<DeviceActor>,
    sp1: Sp1Actor,
    sp2: Sp2Actor,
    ca1: CaActor,
    ca2: CaActor,
    attacker: AttackerActor,
}

impl World {
    fn build(scenario: &Scenario, seed: u64) -> World {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let t = &scenario.timing;
        let epoch = TimeStamp(t.start_epoch);
        let n = scenario.device_count;
        let params = HierarchyParams::new(epoch);
        let mut h = build_hierarchy(scenario.variant, &mut rng, &params);
        h.authority_mut(CaRole::Ca1)
            .set_operational_lifetime(t.operational_lifetime_s);
        h.authority_mut(CaRole::Ca2)
            .set_operational_lifetime(t.operational_lifetime_s);
        let lifetime = (epoch, epoch.plus(t.device_lifetime_s));

        // Every distinct root, for servers that must accept any party.
        let mut all_roots: Vec<CompactCertificate> = Vec::new();
        for role in [CaRole::Permanent, CaRole::Ca1, CaRole::Ca2] {
            if let Some(root) = h.root_certificate(role) {
                if !all_roots.contains(root) {
                    all_roots.push(root.clone());
                }
            }
        }
        let server_store = || TrustStore::with_roots(&all_roots, true).expect("roots");

        // Factory identities.
        let mut factory = Vec::new();
        for i in 0..n {
            let k = key(&mut rng);
            let cert = h
                .authority_mut(CaRole::Permanent)
                .certify_key(
                    &device_id(i),
                    k.public_key(),
                    CertProfile::Factory,
                    lifetime,
                )
                .expect("ordered validity");
            factory.push((k, cert));
        }
        let adv_dev_key = key(&mut rng);
        let adv_dev_cert = h
            .authority_mut(CaRole::Permanent)
            .certify_key(
                b"adv-dev",
                adv_dev_key.public_key(),
                CertProfile::Factory,
                lifetime,
            )
            .expect("ordered validity");

        // Server identities.
        let mut server = |role: CaRole, name: &[u8], rng: &mut ChaCha20Rng| {
            let k = key(rng);
            let ca = h.authority_mut(role);
            let cert = ca
                .certify_key(name, k.public_key(), CertProfile::Server, lifetime)
                .expect("ordered validity");
            Credential {
                key: k,
                certificate: cert,
                chain: ca.issued_chain(),
            }
        };
        let sp1_cred = server(CaRole::Ca1, b"sp1", &mut rng);
        let sp2_cred = server(CaRole::Ca2, b"sp2", &mut rng);
        let maint_cred = server(CaRole::Ca1, b"sp1-maint", &mut rng);

        // CA1 learns the factory certificates it may enroll.
        let mut shared: Vec<CompactCertificate> = factory
            .iter()
            .enumerate()
            .filter(|(i, _)| !scenario.faults.unregistered_at_ca1.contains(&(*i as u32)))
            .map(|(_, (_, c))| c.clone())
            .collect();
        shared.push(adv_dev_cert.clone());
        h.authority_mut(CaRole::Ca1)
            .register_factory_certs(&shared, epoch, &RevocationView::new())
            .expect("factory certificates chain to the permanent root");

        // Trust stores and the roots handed over before transfer.
        let pre_enroll = h.minimal_truststore_roots(TruststorePhase::PreEnroll);
        let pre_transfer = h.minimal_truststore_roots(TruststorePhase::PreTransfer);
        let pruned: BTreeSet<Vec<u8>> = scenario
            .faults
            .truststore_prune
            .iter()
            .filter_map(|&role| h.root_certificate(role).map(|c| c.subject_name.clone()))
            .collect();
        let truststore_update = TruststoreUpdate {
            add: pre_transfer
                .iter()
                .filter(|c| !pruned.contains(&c.subject_name))
                .cloned()
                .collect(),
            persist: true,
            remove: pruned.iter().cloned().collect(),
        };
        let agreement_roots: Vec<Digest> = pre_enroll
            .iter()
            .chain(&pre_transfer)
            .map(CompactCertificate::fingerprint)
            .collect();

        // Firmware.
        let v1 = version(1, "sp1");
        let sp1_current = if scenario.options.last_sp1_update {
            version(2, "sp1")
        } else {
            v1.clone()
        };
        let sp2_current = version(3, "sp2");

        // Operators.
        let sp1_signing = key(&mut rng);
        let sp2_signing = key(&mut rng);
        let mut sp1_op = OperatorState::new(
            b"sp1",
            sp1_signing.clone(),
            uri(SP1_UPDATE_URI),
            sp1_current.clone(),
        );
        let mut sp2_op = OperatorState::new(
            b"sp2",
            sp2_signing.clone(),
            uri(SP2_UPDATE_URI),
            sp2_current,
        );
        sp1_op.agree_signer(b"sp2", sp2_signing.public_key());
        sp2_op.agree_signer(b"sp1", sp1_signing.public_key());
        let window_start = t.transfer_start_s;
        let window_end = t.transfer_start_s + t.reset_window_s;
        let device_ids: Vec<Vec<u8>> = (0..n).map(device_id).collect();
        for (i, (_, cert)) in factory.iter().enumerate() {
            sp1_op.manage(
                &device_ids[i],
                ManagedDevice {
                    factory_certificate: cert.clone(),
                    version: sp1_current.clone(),
                    transfer_window: (epoch.plus(window_start), epoch.plus(window_end)),
                },
            );
        }
        let ra_refs: Vec<(Vec<u8>, Digest)> = device_ids
            .iter()
            .map(|id| {
                let m = firmware_measurement(
                    &sp1_current,
                    &reference_code_digest(sp1_current.manifest_sequence),
                );
                (id.clone(), m)
            })
            .collect();
        let options = TransferOptions {
            ra_uri: scenario.options.use_ra.then(|| uri(SP2_RA_URI)),
            contact_update_before_enroll: scenario.options.contact_update_before_enroll,
            fallback_uri: uri(FALLBACK_PLACEHOLDER),
        };

        let directory: BTreeMap<Uri, ActorId> = [
            (params.ca1_enroll_uri.clone(), ActorId::Ca1),
            (params.ca2_enroll_uri.clone(), ActorId::Ca2),
            (uri(SP1_UPDATE_URI), ActorId::Sp1),
            (uri(SP2_UPDATE_URI), ActorId::Sp2),
            (uri(SP2_RA_URI), ActorId::Sp2),
        ]
        .into_iter()
        .collect();

        // Devices.
        let keygen = if scenario.options.server_side_keygen {
            KeyGeneration::ServerGenerated
        } else {
            KeyGeneration::OnDevice
        };
        let ca1_uri = h.authority(CaRole::Ca1).enroll_uri().clone();
        let mut devices = Vec::new();
        for (i, (k, cert)) in factory.into_iter().enumerate() {
            let i = i as u32;
            let mut state =
                DeviceState::new(&device_ids[i as usize], Firmware::genuine(v1.clone()));
            let store = TrustStore::with_roots(&pre_enroll, true).expect("roots");
            state
                .provision_factory(k, cert, store, ca1_uri.clone())
                .expect("fresh device");
            devices.push(DeviceActor::new(
                i,
                state,
                keygen,
                directory.clone(),
                t.post_reset_retry_budget,
                scenario.faults.ra_tamper.contains(&i),
                agreement_roots.clone(),
                sp1_current.clone(),
            ));
        }

        let ca2_uri = h.authority(CaRole::Ca2).enroll_uri().clone();
        let (_, ca1, ca2) = h.into_authorities();
        let ca1 = CaActor::new(
            ActorId::Ca1,
            ca1,
            server_store(),
            b"sp1",
            GrantExtras {
                roots: Vec::new(),
                pins: vec![sp1_cred.certificate.fingerprint()],
                operator_signer: sp1_signing.public_key(),
            },
        );
        let ca2 = CaActor::new(
            ActorId::Ca2,
            ca2,
            server_store(),
            b"sp2",
            GrantExtras {
                roots: Vec::new(),
                pins: vec![sp2_cred.certificate.fingerprint()],
                operator_signer: sp2_signing.public_key(),
            },
        );
        let ca1_name = ca1.ca.name().to_vec();
        let ca2_name = ca2.ca.name().to_vec();
        let sp1 = Sp1Actor::new(
            sp1_op,
            sp1_cred,
            server_store(),
            ca1_name,
            device_ids.clone(),
            scenario.options.last_sp1_update,
            truststore_update,
            ra_refs,
            scenario.options.fallback_ra,
            window_end * 1000,
        );
        let sp2 = Sp2Actor::new(
            sp2_op,
            sp2_cred,
            server_store(),
            ca2_name,
            ca2_uri,
            options,
            scenario.faults.ca2_registration_omit,
        );
        let attacker = AttackerActor::new(
            maint_cred,
            Credential {
                key: adv_dev_key,
                certificate: adv_dev_cert,
                chain: Vec::new(),
            },
            key(&mut rng),
            server_store(),
            device_ids,
        );

        let mut ctx = Ctx::new(
            rng,
            t.clone(),
            Interceptor::new(scenario.adversary.clone()),
            scenario.options.stale_credential_probe,
        );
        ctx.log(
            "setup",
            format!(
                "variant={} devices={n} adversary={} seed={seed}",
                scenario.variant, scenario.adversary.name
            ),
        );
        for i in 0..n {
            let delay = ctx.rng.gen_range(0..1000);
            ctx.timer(delay, ActorId::Device(i), Timer::Kick);
        }
        ctx.timer(
            t.transfer_start_s * 1000,
            ActorId::Sp1,
            Timer::TransferStart,
        );

        World {
            ctx,
            devices,
            sp1,
            sp2,
            ca1,
            ca2,
            attacker,
        }
    }

    fn dispatch(&mut self, event: &SimEvent, item: Item) {
        let ctx = &mut self.ctx;
        match item {
            Item::Deliver(packet) => {
                let Some(d) = ctx.open(packet) else {
                    return;
                };
                match event.dst {
                    ActorId::Device(i) => self.devices[i as usize].on_packet(ctx, d),
                    ActorId::Sp1 => self.sp1.on_packet(ctx, d),
                    ActorId::Sp2 => self.sp2.on_packet(ctx, d),
                    ActorId::Ca1 => self.ca1.on_packet(ctx, d),
                    ActorId::Ca2 => self.ca2.on_packet(ctx, d),
                    ActorId::Adversary => self.attacker.on_packet(ctx, d),
                }
            }
            Item::Timer(actor, timer) => {
                ctx.log("timer", format!("{actor} {}", timer.name()));
                match actor {
                    ActorId::Device(i) => self.devices[i as usize].on_timer(ctx, timer),
                    ActorId::Sp1 => self.sp1.on_timer(ctx, timer),
                    ActorId::Sp2 => self.sp2.on_timer(ctx, timer),
                    ActorId::Ca1 => self.ca1.on_timer(ctx, timer),
                    ActorId::Ca2 => self.ca2.on_timer(ctx, timer),
                    ActorId::Adversary => self.attacker.on_timer(ctx, timer),
                }
            }
        }
    }

    fn report(self, scenario: &Scenario, seed: u64, events: u64, quiescent: bool) -> SimOutcome {
        let World {
            ctx,
            devices,
            sp1,
            attacker,
            ..
        } = self;
        let sp1_seen: BTreeSet<Digest> = sp1.fingerprints.iter().copied().collect();
        let mut unlinkability_violations = Vec::new();
        let outcomes: Vec<DeviceOutcome> = devices
            .into_iter()
            .map(|d| {
                let operational = d.state.operational_certificate().cloned();
                let new_key: Option<PublicKey> = operational.as_ref().map(|c| c.subject_public_key);
                let linked = d.new_fingerprints.iter().any(|f| sp1_seen.contains(f))
                    || new_key.is_some_and(|k| sp1.peer_keys.contains(&k));
                if linked {
                    unlinkability_violations.push(d.index);
                }
                DeviceOutcome {
                    index: d.index,
                    final_phase: d.state.phase(),
                    history: d.state.history().to_vec(),
                    issuer: operational.as_ref().map(CompactCertificate::issuer),
                    operational,
                    fallback_reason: d.state.fallback_reason().map(str::to_string),
                    fallback_contacted: d.state.fallback_contacted(),
                    reset_audit: d.reset_audit,
                    pre_transfer_roots: d.pre_transfer_roots,
                    new_fingerprints: d.new_fingerprints,
                    step_log: d.step_log,
                    service_done: d.service_done,
                    report: d.state.report(),
                }
            })
            .collect();
        let report = RunReport {
            seed,
            variant: scenario.variant,
            trace_digest: ctx.trace.digest(),
            events,
            quiescent,
            end_ms: ctx.now,
            devices: outcomes,
            false_acceptances: ctx.oracle.false_acceptances.clone(),
            stats: ctx.stats.clone(),
            attempts: attacker.attempts,
            sizes: ctx.sizes.clone(),
            revoked: sp1.revoked.clone(),
            unlinkability_violations,
            sp1_refusals: sp1.service_refusals.clone(),
        };
        SimOutcome {
            report,
            trace: ctx.trace,
        }
    }
}

/// Runs `scenario` to completion. The result depends only on the scenario
/// and the seed.
pub fn run(scenario: &Scenario, seed: u64) -> Result<SimOutcome, SimError> {
    scenario.validate()?;
    let mut world = World::build(scenario, seed);
    let mut events = 0u64;
    let mut quiescent = true;
    while let Some((event, item)) = world.ctx.pop() {
        events += 1;
        if events > scenario.timing.event_budget {
            quiescent = false;
            world.ctx.log("engine", "event budget exhausted");
            break;
        }
        world.dispatch(&event, item);
    }
    Ok(world.report(scenario, seed, events, quiescent))
}

/// Encoded sizes of the hand-over messages for `scenario`'s device count.
pub fn size_table(scenario: &Scenario, seed: u64) -> Result<BTreeMap<String, usize>, SimError> {
    let mut quiet = scenario.clone();
    quiet.adversary = super::adversary::AdversarySchedule::none();
    Ok(run(&quiet, seed)?.report.sizes)
}
