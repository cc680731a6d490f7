// SPDX-License-Identifier: Apache-2.0

//! Virtual clock, event queue, links and per-actor session bookkeeping.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use super::adversary::{Injection, Interceptor, PacketView};
use super::scenario::Timing;
use super::trace::Trace;
use super::wire::{ActorId, AppMsg, Frame, FrameKind, MessageClass};
use crate::codec::WireCodec;
use crate::crypto::{digest, Digest};
use crate::messages::{SignedEnvelope, TimeStamp};
use crate::pki::{CompactCertificate, RevocationView, TrustStore};
use crate::session::{
    self, AuthenticatedSession, Credential, InitiatorHandshake, ResponderHandshake, SessionId, Side,
};

pub type Millis = u64;

mod opaque {
    /// Packet bytes as the network carries them. Outside the engine they
    /// can be copied, measured and bit-flipped, never read.
    pub struct OpaqueBytes(Vec<u8>);

    impl OpaqueBytes {
        pub(in crate::simnet::engine) fn seal(bytes: Vec<u8>) -> Self {
            OpaqueBytes(bytes)
        }

        pub(in crate::simnet::engine) fn open(&self) -> &[u8] {
            &self.0
        }

        pub fn len(&self) -> usize {
            self.0.len()
        }

        pub fn duplicate(&self) -> Self {
            OpaqueBytes(self.0.clone())
        }

        /// A copy with the byte at `offset` XORed with `mask`.
        pub fn flipped(&self, offset: usize, mask: u8) -> Self {
            let mut bytes = self.0.clone();
            if let Some(b) = bytes.get_mut(offset) {
                *b ^= mask;
            }
            OpaqueBytes(bytes)
        }
    }

    impl std::fmt::Debug for OpaqueBytes {
        fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
            write!(f, "OpaqueBytes({} bytes)", self.0.len())
        }
    }
}

pub use opaque::OpaqueBytes;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimEventKind {
    Deliver,
    Drop,
    TimerFire,
    AdversaryAction,
}

impl SimEventKind {
    pub fn name(self) -> &'static str {
        match self {
            SimEventKind::Deliver => "deliver",
            SimEventKind::Drop => "drop",
            SimEventKind::TimerFire => "timer",
            SimEventKind::AdversaryAction => "adv",
        }
    }
}

/// One processed event. Events run in `(time, seq_within_time)` order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimEvent {
    pub time: Millis,
    pub seq_within_time: u64,
    pub kind: SimEventKind,
    pub src: ActorId,
    pub dst: ActorId,
    pub payload_len: usize,
}

/// Where the bytes of a delivered packet came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Origin {
    Honest,
    /// Sent by the adversary actor with its own keys.
    Injected,
    Replayed,
    Modified,
}

impl Origin {
    pub fn name(&self) -> &'static str {
        match self {
            Origin::Honest => "honest",
            Origin::Injected => "injected",
            Origin::Replayed => "replayed",
            Origin::Modified => "modified",
        }
    }

    pub fn is_adversarial(&self) -> bool {
        matches!(self, Origin::Replayed | Origin::Modified)
    }
}

#[derive(Debug)]
pub(crate) struct Packet {
    pub id: u64,
    pub src: ActorId,
    pub dst: ActorId,
    pub class: MessageClass,
    pub frame: FrameKind,
    pub bytes: OpaqueBytes,
    pub origin: Origin,
}

/// A packet as handed to its destination actor.
#[derive(Debug, Clone)]
pub(crate) struct Delivered {
    pub id: u64,
    pub src: ActorId,
    pub dst: ActorId,
    pub class: MessageClass,
    pub frame: Frame,
    pub digest: Digest,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Timer {
    Kick,
    Timeout(SessionId),
    Reset,
    TransferStart,
    FlushRevocations,
    Push(u32),
    Probe(u32),
    Inject(Injection),
}

impl Timer {
    pub fn name(&self) -> String {
        match self {
            Timer::Kick => "kick".into(),
            Timer::Timeout(sid) => format!("timeout {}", hex::encode(sid)),
            Timer::Reset => "reset".into(),
            Timer::TransferStart => "transfer_start".into(),
            Timer::FlushRevocations => "flush_revocations".into(),
            Timer::Push(i) => format!("push {i}"),
            Timer::Probe(i) => format!("probe {i}"),
            Timer::Inject(inj) => format!("inject {} {}", inj.kind, inj.dst),
        }
    }
}

#[derive(Debug)]
pub(crate) enum Item {
    Deliver(Packet),
    Timer(ActorId, Timer),
}

/// Accepted-bytes bookkeeping. A false acceptance is an actor accepting
/// bytes nobody honestly sent, or accepting the same bytes twice.
#[derive(Debug, Default)]
pub struct Oracle {
    sent: BTreeSet<Digest>,
    accepted: BTreeMap<(ActorId, Digest), u32>,
    pub false_acceptances: Vec<String>,
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct NetStats {
    pub packets_sent: u64,
    pub bytes_sent: u64,
    pub discards: BTreeMap<String, u64>,
    pub dropped: BTreeMap<MessageClass, u64>,
    /// Replayed or modified packets that reached their destination.
    pub adversarial_delivered: BTreeMap<MessageClass, u64>,
    pub adversarial_discarded: BTreeMap<MessageClass, u64>,
    pub adversarial_accepted: BTreeMap<MessageClass, u64>,
    pub injected_delivered: BTreeMap<MessageClass, u64>,
}

/// Things insiders and the environment hand the adversary.
#[derive(Debug, Default)]
pub(crate) struct Leaks {
    pub sp2_cwt: Option<SignedEnvelope>,
    /// Operational credentials devices held when they accepted a transfer.
    pub stale: BTreeMap<u32, Credential>,
}

pub(crate) struct Ctx {
    pub now: Millis,
    pub rng: ChaCha20Rng,
    pub trace: Trace,
    pub timing: Timing,
    pub revocations: RevocationView,
    pub no_revocations: RevocationView,
    pub oracle: Oracle,
    pub stats: NetStats,
    pub leaks: Leaks,
    pub probe_stale: bool,
    pub sizes: BTreeMap<String, usize>,
    queue: BTreeMap<(Millis, u64), Item>,
    next_seq: u64,
    next_packet: u64,
    link_clock: BTreeMap<(ActorId, ActorId), Millis>,
    interceptor: Interceptor,
}

impl Ctx {
    pub fn new(
        rng: ChaCha20Rng,
        timing: Timing,
        interceptor: Interceptor,
        probe_stale: bool,
    ) -> Self {
        Ctx {
            now: 0,
            rng,
            trace: Trace::new(),
            timing,
            revocations: RevocationView::new(),
            no_revocations: RevocationView::new(),
            oracle: Oracle::default(),
            stats: NetStats::default(),
            leaks: Leaks::default(),
            probe_stale,
            sizes: BTreeMap::new(),
            queue: BTreeMap::new(),
            next_seq: 0,
            next_packet: 0,
            link_clock: BTreeMap::new(),
            interceptor,
        }
    }

    pub fn now_ts(&self) -> TimeStamp {
        TimeStamp(self.timing.start_epoch + self.now / 1000)
    }

    pub fn horizon_ms(&self) -> Millis {
        self.timing.horizon_s * 1000
    }

    pub fn log(&mut self, category: &str, detail: impl AsRef<str>) {
        self.trace.push(self.now, category, detail);
    }

    pub fn record_size(&mut self, name: &str, bytes: usize) {
        self.sizes.insert(name.to_string(), bytes);
        self.log("size", format!("{name} {bytes}"));
    }

    fn enqueue(&mut self, at: Millis, item: Item) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.insert((at, seq), item);
    }

    pub fn pop(&mut self) -> Option<(SimEvent, Item)> {
        let ((time, seq), item) = self.queue.pop_first()?;
        self.now = time;
        let (kind, src, dst, payload_len) = match &item {
            Item::Deliver(p) => (SimEventKind::Deliver, p.src, p.dst, p.bytes.len()),
            Item::Timer(actor, Timer::Inject(_)) => {
                (SimEventKind::AdversaryAction, *actor, *actor, 0)
            }
            Item::Timer(actor, _) => (SimEventKind::TimerFire, *actor, *actor, 0),
        };
        Some((
            SimEvent {
                time,
                seq_within_time: seq,
                kind,
                src,
                dst,
                payload_len,
            },
            item,
        ))
    }

    pub fn timer(&mut self, delay: Millis, actor: ActorId, timer: Timer) {
        self.enqueue(self.now + delay, Item::Timer(actor, timer));
    }

    fn link_delay(&mut self) -> Millis {
        self.timing.latency_ms + self.rng.gen_range(0..=self.timing.jitter_ms)
    }

    /// Encodes and sends a frame. Everything not sent by the adversary
    /// passes the interceptor first.
    pub fn send(&mut self, src: ActorId, dst: ActorId, class: MessageClass, frame: &Frame) {
        let bytes = frame.encode().expect("frames built by actors encode");
        let id = self.next_packet;
        self.next_packet += 1;
        self.oracle.sent.insert(digest(&bytes));
        self.stats.packets_sent += 1;
        self.stats.bytes_sent += bytes.len() as u64;
        let kind = frame.kind();
        self.log(
            "send",
            format!(
                "{id} {src}->{dst} {class} {} len={}",
                kind.name(),
                bytes.len()
            ),
        );
        let view = PacketView {
            src,
            dst,
            class,
            frame: kind,
            len: bytes.len(),
        };
        let bytes = OpaqueBytes::seal(bytes);
        if src == ActorId::Adversary {
            self.transmit(id, view, bytes, Origin::Injected, 0, 0);
            return;
        }
        let verdict = self.interceptor.intercept(&view, bytes, &mut self.rng);
        for line in &verdict.log {
            self.log("adv", format!("{id} {line}"));
        }
        let mut floor = 0;
        match verdict.original {
            Some(bytes) => {
                let origin = if verdict.modified.is_some() {
                    Origin::Modified
                } else {
                    Origin::Honest
                };
                floor = self.transmit(id, view, bytes, origin, 0, 0);
            }
            None => {
                *self.stats.dropped.entry(class).or_default() += 1;
                self.log("drop", format!("{id} {src}->{dst} {class} {}", kind.name()));
            }
        }
        for extra in verdict.extra {
            let copy = self.next_packet;
            self.next_packet += 1;
            self.log("adv", format!("{id} emits {copy} ({})", extra.origin));
            self.transmit(
                copy,
                extra.view,
                extra.bytes,
                Origin::Replayed,
                extra.delay_ms,
                floor + 1,
            );
        }
        for injection in verdict.injections {
            let delay = injection.delay_ms;
            self.timer(delay, ActorId::Adversary, Timer::Inject(injection));
        }
    }

    /// Schedules delivery and returns the delivery time. Honest packets are
    /// FIFO per link.
    fn transmit(
        &mut self,
        id: u64,
        view: PacketView,
        bytes: OpaqueBytes,
        origin: Origin,
        delay: Millis,
        floor: Millis,
    ) -> Millis {
        let mut at = (self.now + delay + self.link_delay()).max(floor);
        if origin == Origin::Honest || origin == Origin::Injected {
            let last = self.link_clock.entry((view.src, view.dst)).or_default();
            at = at.max(*last);
            *last = at;
        }
        self.enqueue(
            at,
            Item::Deliver(Packet {
                id,
                src: view.src,
                dst: view.dst,
                class: view.class,
                frame: view.frame,
                bytes,
                origin,
            }),
        );
        at
    }

    /// Opens a packet for its destination. `None` when it does not parse.
    pub fn open(&mut self, packet: Packet) -> Option<Delivered> {
        let Packet {
            id,
            src,
            dst,
            class,
            frame,
            bytes,
            origin,
        } = packet;
        self.log(
            "deliver",
            format!(
                "{id} {src}->{dst} {class} {} origin={}",
                frame.name(),
                origin.name()
            ),
        );
        match origin {
            Origin::Replayed | Origin::Modified => {
                *self.stats.adversarial_delivered.entry(class).or_default() += 1
            }
            Origin::Injected => *self.stats.injected_delivered.entry(class).or_default() += 1,
            Origin::Honest => {}
        }
        let digest = digest(bytes.open());
        match Frame::decode(bytes.open()) {
            Ok(decoded) => Some(Delivered {
                id,
                src,
                dst,
                class,
                frame: decoded,
                digest,
                origin,
            }),
            Err(e) => {
                self.discard_parts(id, dst, class, frame, &origin, &format!("Malformed({e})"));
                None
            }
        }
    }

    pub fn accept(&mut self, d: &Delivered) {
        let count = self.oracle.accepted.entry((d.dst, d.digest)).or_default();
        *count += 1;
        let duplicate = *count > 1;
        let unsent = !self.oracle.sent.contains(&d.digest);
        if duplicate || unsent {
            let what = if duplicate { "duplicate" } else { "unsent" };
            self.oracle.false_acceptances.push(format!(
                "t={} packet {} at {} {} {} ({what}, {})",
                self.now,
                d.id,
                d.dst,
                d.class,
                d.frame.kind().name(),
                d.origin.name()
            ));
        }
        if d.origin.is_adversarial() {
            *self.stats.adversarial_accepted.entry(d.class).or_default() += 1;
        }
        self.log(
            "accept",
            format!("{} {} {} {}", d.id, d.dst, d.class, d.frame.kind().name()),
        );
    }

    pub fn discard(&mut self, d: &Delivered, reason: &str) {
        self.discard_parts(d.id, d.dst, d.class, d.frame.kind(), &d.origin, reason);
    }

    fn discard_parts(
        &mut self,
        id: u64,
        at: ActorId,
        class: MessageClass,
        frame: FrameKind,
        origin: &Origin,
        reason: &str,
    ) {
        let key = reason
            .split('(')
            .next()
            .unwrap_or(reason)
            .split(' ')
            .next()
            .unwrap_or(reason);
        *self.stats.discards.entry(key.to_string()).or_default() += 1;
        if origin.is_adversarial() {
            *self.stats.adversarial_discarded.entry(class).or_default() += 1;
        }
        self.log(
            "discard",
            format!(
                "{id} {at} {class} {} reason={reason} origin={}",
                frame.name(),
                origin.name()
            ),
        );
    }
}

impl fmt::Debug for Ctx {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Ctx")
            .field("now", &self.now)
            .field("queued", &self.queue.len())
            .finish()
    }
}

/// What a responder needs to accept incoming handshakes.
pub(crate) struct Accepting<'a> {
    pub credential: &'a Credential,
    pub store: &'a TrustStore,
}

#[derive(Debug)]
pub(crate) enum EpEvent {
    Established {
        sid: SessionId,
        peer: ActorId,
        side: Side,
        peer_certificate: CompactCertificate,
        fingerprint: Digest,
    },
    Message {
        sid: SessionId,
        class: MessageClass,
        msg: AppMsg,
    },
    /// A handshake this actor started did not complete.
    Failed {
        sid: SessionId,
        reason: String,
    },
    Nothing,
}

#[derive(Debug)]
struct Slot {
    session: AuthenticatedSession,
    peer: ActorId,
}

#[derive(Debug)]
struct Dialing {
    handshake: InitiatorHandshake,
    credential: Credential,
    peer: ActorId,
    class: MessageClass,
}

#[derive(Debug)]
struct Answering {
    handshake: ResponderHandshake,
    peer: ActorId,
}

/// One actor's sessions: handshakes in flight and established channels.
#[derive(Debug)]
pub(crate) struct Endpoint {
    me: ActorId,
    sessions: BTreeMap<SessionId, Slot>,
    dialing: BTreeMap<SessionId, Dialing>,
    answering: BTreeMap<SessionId, Answering>,
    seen_hellos: BTreeSet<SessionId>,
}

impl Endpoint {
    pub fn new(me: ActorId) -> Self {
        Endpoint {
            me,
            sessions: BTreeMap::new(),
            dialing: BTreeMap::new(),
            answering: BTreeMap::new(),
            seen_hellos: BTreeSet::new(),
        }
    }

    /// Starts a handshake and arms its timeout.
    pub fn connect(
        &mut self,
        ctx: &mut Ctx,
        peer: ActorId,
        class: MessageClass,
        credential: &Credential,
    ) -> SessionId {
        let (handshake, hello) = session::initiate(credential, &mut ctx.rng);
        let sid = hello.session_id;
        self.dialing.insert(
            sid,
            Dialing {
                handshake,
                credential: credential.clone(),
                peer,
                class,
            },
        );
        ctx.send(self.me, peer, class, &Frame::ClientHello(hello));
        let timeout = ctx.timing.exchange_timeout_ms;
        ctx.timer(timeout, self.me, Timer::Timeout(sid));
        sid
    }

    pub fn send(
        &mut self,
        ctx: &mut Ctx,
        sid: SessionId,
        class: MessageClass,
        msg: &AppMsg,
    ) -> bool {
        let Some(slot) = self.sessions.get_mut(&sid) else {
            return false;
        };
        let payload = msg.encode().expect("app messages encode");
        match slot.session.send(&payload) {
            Ok(record) => {
                let peer = slot.peer;
                ctx.send(self.me, peer, class, &Frame::Record(record));
                true
            }
            Err(_) => false,
        }
    }

    pub fn close(&mut self, sid: SessionId) {
        self.sessions.remove(&sid);
        self.dialing.remove(&sid);
    }

    /// Drops a session or handshake on timeout. True if it was still live.
    pub fn expire(&mut self, sid: SessionId) -> bool {
        let dialing = self.dialing.remove(&sid).is_some();
        let open = self.sessions.remove(&sid).is_some();
        dialing || open
    }

    pub fn session(&self, sid: SessionId) -> Option<&AuthenticatedSession> {
        self.sessions.get(&sid).map(|s| &s.session)
    }

    pub fn peer_certificate(&self, sid: SessionId) -> Option<&CompactCertificate> {
        self.session(sid)
            .map(AuthenticatedSession::peer_certificate)
    }

    /// Forgets everything, as on a device reset.
    pub fn clear(&mut self) {
        self.sessions.clear();
        self.dialing.clear();
        self.answering.clear();
        self.seen_hellos.clear();
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
            && self.dialing.is_empty()
            && self.answering.is_empty()
            && self.seen_hellos.is_empty()
    }

    fn alert(
        &self,
        ctx: &mut Ctx,
        to: ActorId,
        class: MessageClass,
        session_id: SessionId,
        reason: String,
    ) {
        ctx.send(self.me, to, class, &Frame::Alert { session_id, reason });
    }

    /// Processes one delivered packet. Decisions depend only on the bytes,
    /// never on where the simulator says they came from.
    pub fn handle(
        &mut self,
        ctx: &mut Ctx,
        d: Delivered,
        accepting: Option<Accepting<'_>>,
        store: &TrustStore,
        check_revocations: bool,
    ) -> EpEvent {
        let now = ctx.now_ts();
        match &d.frame {
            Frame::ClientHello(hello) => {
                let sid = hello.session_id;
                let Some(acc) = accepting else {
                    ctx.discard(&d, "NotAccepting");
                    self.alert(ctx, d.src, d.class, sid, "not accepting".into());
                    return EpEvent::Nothing;
                };
                if !self.seen_hellos.insert(sid) {
                    ctx.discard(&d, "DuplicateHello");
                    return EpEvent::Nothing;
                }
                let rev = if check_revocations {
                    &ctx.revocations
                } else {
                    &ctx.no_revocations
                };
                let outcome =
                    session::respond(acc.credential, acc.store, now, rev, hello, &mut ctx.rng);
                match outcome {
                    Ok((handshake, server)) => {
                        ctx.accept(&d);
                        self.answering.insert(
                            sid,
                            Answering {
                                handshake,
                                peer: d.src,
                            },
                        );
                        ctx.send(self.me, d.src, d.class, &Frame::ServerHello(server));
                    }
                    Err(e) => {
                        let reason = e.to_string();
                        ctx.discard(&d, &reason);
                        self.alert(ctx, d.src, d.class, sid, reason);
                    }
                }
                EpEvent::Nothing
            }
            Frame::ServerHello(server) => {
                let sid = server.session_id;
                let Some(dial) = self.dialing.remove(&sid) else {
                    ctx.discard(&d, "UnexpectedServerHello");
                    return EpEvent::Nothing;
                };
                let rev = if check_revocations {
                    &ctx.revocations
                } else {
                    &ctx.no_revocations
                };
                match dial
                    .handshake
                    .finish(&dial.credential, store, now, rev, server)
                {
                    Ok((session, finished)) => {
                        ctx.accept(&d);
                        ctx.send(self.me, dial.peer, dial.class, &Frame::Finished(finished));
                        let event = EpEvent::Established {
                            sid,
                            peer: dial.peer,
                            side: Side::Initiator,
                            peer_certificate: session.peer_certificate().clone(),
                            fingerprint: session.key_fingerprint(),
                        };
                        self.sessions.insert(
                            sid,
                            Slot {
                                session,
                                peer: dial.peer,
                            },
                        );
                        event
                    }
                    Err(e) => {
                        let reason = e.to_string();
                        ctx.discard(&d, &reason);
                        EpEvent::Failed { sid, reason }
                    }
                }
            }
            Frame::Finished(finished) => {
                let sid = finished.session_id;
                let Some(answer) = self.answering.remove(&sid) else {
                    ctx.discard(&d, "UnexpectedFinished");
                    return EpEvent::Nothing;
                };
                match answer.handshake.complete(finished) {
                    Ok(session) => {
                        ctx.accept(&d);
                        let event = EpEvent::Established {
                            sid,
                            peer: answer.peer,
                            side: Side::Responder,
                            peer_certificate: session.peer_certificate().clone(),
                            fingerprint: session.key_fingerprint(),
                        };
                        self.sessions.insert(
                            sid,
                            Slot {
                                session,
                                peer: answer.peer,
                            },
                        );
                        event
                    }
                    Err(e) => {
                        ctx.discard(&d, &e.to_string());
                        EpEvent::Nothing
                    }
                }
            }
            Frame::Record(record) => {
                let sid = record.session_id;
                let Some(slot) = self.sessions.get_mut(&sid) else {
                    ctx.discard(&d, "WrongSession");
                    return EpEvent::Nothing;
                };
                match slot.session.receive(record) {
                    Ok(payload) => match AppMsg::decode(&payload) {
                        Ok(msg) => {
                            ctx.accept(&d);
                            EpEvent::Message {
                                sid,
                                class: d.class,
                                msg,
                            }
                        }
                        Err(e) => {
                            ctx.discard(&d, &format!("Malformed({e})"));
                            EpEvent::Nothing
                        }
                    },
                    Err(e) => {
                        let reason = format!("{e:?}");
                        ctx.discard(&d, &reason);
                        EpEvent::Nothing
                    }
                }
            }
            Frame::Alert { session_id, reason } => {
                let sid = *session_id;
                match self.dialing.remove(&sid) {
                    Some(_) => {
                        ctx.log(
                            "note",
                            format!(
                                "{} alert from {} for {}: {reason}",
                                self.me,
                                d.src,
                                hex::encode(sid)
                            ),
                        );
                        EpEvent::Failed {
                            sid,
                            reason: format!("alert: {reason}"),
                        }
                    }
                    None => {
                        ctx.discard(&d, "StrayAlert");
                        EpEvent::Nothing
                    }
                }
            }
        }
    }
}
