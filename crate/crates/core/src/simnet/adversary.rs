// SPDX-License-Identifier: Apache-2.0

//! On-path attacker.
//!
//! The interceptor sees every packet's endpoints, class, frame kind and
//! length, and holds its bytes only as [`OpaqueBytes`]: it can copy, delay,
//! drop or flip bits in them but never read them. Injections are carried
//! out by the adversary actor using its own keys and insider credentials.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;

use super::engine::OpaqueBytes;
use super::wire::{ActorId, FrameKind, MessageClass};
use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Peer {
    #[default]
    Any,
    AnyDevice,
    Actor(ActorId),
}

impl Peer {
    fn matches(self, actor: ActorId) -> bool {
        match self {
            Peer::Any => true,
            Peer::AnyDevice => matches!(actor, ActorId::Device(_)),
            Peer::Actor(a) => a == actor,
        }
    }
}

impl std::str::FromStr for Peer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "any" => Ok(Peer::Any),
            "any_device" => Ok(Peer::AnyDevice),
            other => other.parse().map(Peer::Actor),
        }
    }
}

/// Which packets a rule applies to. Unset fields match everything.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Predicate {
    pub class: Option<MessageClass>,
    pub frame: Option<FrameKind>,
    pub src: Peer,
    pub dst: Peer,
}

impl Predicate {
    pub fn class(class: MessageClass) -> Self {
        Predicate {
            class: Some(class),
            ..Predicate::default()
        }
    }

    pub fn frame(mut self, frame: FrameKind) -> Self {
        self.frame = Some(frame);
        self
    }

    pub fn src(mut self, src: Peer) -> Self {
        self.src = src;
        self
    }

    pub fn dst(mut self, dst: Peer) -> Self {
        self.dst = dst;
        self
    }

    pub fn matches(&self, view: &PacketView) -> bool {
        self.class.is_none_or(|c| c == view.class)
            && self.frame.is_none_or(|f| f == view.frame)
            && self.src.matches(view.src)
            && self.dst.matches(view.dst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum InjectKind {
    /// Transfer message signed with the adversary's own key, delivered over
    /// a session authenticated with an insider server certificate.
    ForgedTransfer,
    /// The new operator's transfer message sent straight to a device.
    Sp2SignedTransfer,
    /// Enrollment by an insider device asking for another device's name.
    MismatchedCsr,
    /// A record with random contents, sent to the destination of the
    /// triggering packet under its class.
    Garbage,
}

impl InjectKind {
    pub fn name(self) -> &'static str {
        match self {
            InjectKind::ForgedTransfer => "forged_transfer",
            InjectKind::Sp2SignedTransfer => "sp2_signed_transfer",
            InjectKind::MismatchedCsr => "mismatched_csr",
            InjectKind::Garbage => "garbage",
        }
    }
}

impl fmt::Display for InjectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for InjectKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            InjectKind::ForgedTransfer,
            InjectKind::Sp2SignedTransfer,
            InjectKind::MismatchedCsr,
            InjectKind::Garbage,
        ]
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| format!("unknown injection {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    /// Keep a copy under `tag` for a later `ReplayRecorded`.
    Record {
        tag: String,
    },
    /// Deliver `copies` extra copies, the first after `delay_ms`.
    Replay {
        delay_ms: u64,
        copies: u32,
    },
    /// Replay everything recorded under `tag` that involved the same device
    /// as the triggering packet. Each recording is replayed once.
    ReplayRecorded {
        tag: String,
        delay_ms: u64,
    },
    /// Replace the packet with a copy whose byte at `offset` (random when
    /// unset) is XORed with `mask`.
    Modify {
        offset: Option<usize>,
        mask: u8,
    },
    Drop {
        per_mille: u16,
    },
    /// Start an injection. Impersonation kinds target the device the
    /// packet involves, or every device if it involves none.
    Inject {
        kind: InjectKind,
        delay_ms: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule {
    pub when: Predicate,
    pub action: Action,
    /// Maximum number of packets the rule fires on.
    pub limit: Option<u32>,
}

impl Rule {
    pub fn new(when: Predicate, action: Action) -> Self {
        Rule {
            when,
            action,
            limit: None,
        }
    }

    pub fn limit(mut self, limit: u32) -> Self {
        self.limit = Some(limit);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdversarySchedule {
    pub name: String,
    pub rules: Vec<Rule>,
}

impl AdversarySchedule {
    pub const NAMES: [&'static str; 8] = [
        "none",
        "replay_transfer",
        "modify_transfer",
        "forge_transfer",
        "drop_enroll",
        "cross_session_replay",
        "impersonation",
        "lossy",
    ];

    pub fn none() -> Self {
        AdversarySchedule {
            name: "none".into(),
            rules: Vec::new(),
        }
    }

    pub fn named(name: &str) -> Option<Self> {
        use MessageClass::*;
        let rules = match name {
            "none" => vec![],
            "replay_transfer" => vec![Rule::new(
                Predicate::class(TransferDelivery).frame(FrameKind::Record),
                Action::Replay {
                    delay_ms: 300,
                    copies: 2,
                },
            )],
            "modify_transfer" => vec![Rule::new(
                Predicate::class(TransferDelivery)
                    .frame(FrameKind::Record)
                    .src(Peer::Actor(ActorId::Sp1)),
                Action::Modify {
                    offset: None,
                    mask: 0x01,
                },
            )
            .limit(5)],
            "forge_transfer" => vec![Rule::new(
                Predicate::class(UpdateInfoList).frame(FrameKind::ClientHello),
                Action::Inject {
                    kind: InjectKind::ForgedTransfer,
                    delay_ms: 0,
                },
            )
            .limit(1)],
            "drop_enroll" => vec![Rule::new(
                Predicate::class(Reenroll),
                Action::Drop { per_mille: 1000 },
            )],
            "cross_session_replay" => vec![
                Rule::new(
                    Predicate::class(TransferDelivery)
                        .frame(FrameKind::Record)
                        .dst(Peer::AnyDevice),
                    Action::Record { tag: "xfer".into() },
                ),
                Rule::new(
                    Predicate::class(Reenroll)
                        .frame(FrameKind::ClientHello)
                        .src(Peer::AnyDevice),
                    Action::ReplayRecorded {
                        tag: "xfer".into(),
                        delay_ms: 0,
                    },
                ),
            ],
            // The SP2-signed message is taken the moment SP2 starts handing
            // it to SP1, so it reaches devices before the relayed one.
            "impersonation" => [
                (InjectKind::ForgedTransfer, UpdateInfoList),
                (InjectKind::Sp2SignedTransfer, TransferToSp1),
                (InjectKind::MismatchedCsr, UpdateInfoList),
            ]
            .into_iter()
            .map(|(kind, trigger)| {
                Rule::new(
                    Predicate::class(trigger).frame(FrameKind::ClientHello),
                    Action::Inject { kind, delay_ms: 0 },
                )
                .limit(1)
            })
            .collect(),
            "lossy" => vec![Rule::new(
                Predicate::default(),
                Action::Drop { per_mille: 100 },
            )],
            _ => return None,
        };
        Some(AdversarySchedule {
            name: name.into(),
            rules,
        })
    }

    /// A random mix of replays over the transfer flow: per class a replay
    /// rule with random frame filter, delay and copy count, plus recordings
    /// replayed into later sessions.
    pub fn random_replays(rng: &mut impl Rng) -> Self {
        let frames = [
            None,
            Some(FrameKind::Record),
            Some(FrameKind::ClientHello),
            Some(FrameKind::ServerHello),
            Some(FrameKind::Finished),
        ];
        let mut rules = Vec::new();
        for class in MessageClass::TRANSFER_FLOW {
            if rng.gen_bool(0.75) {
                let mut when = Predicate::class(class);
                when.frame = frames[rng.gen_range(0..frames.len())];
                let mut rule = Rule::new(
                    when,
                    Action::Replay {
                        delay_ms: rng.gen_range(0..4000),
                        copies: rng.gen_range(1..=3),
                    },
                );
                if rng.gen_bool(0.5) {
                    rule = rule.limit(rng.gen_range(1..=4));
                }
                rules.push(rule);
            }
            if rng.gen_bool(0.3) {
                let tag = format!("rec-{}", class.name());
                rules.push(Rule::new(
                    Predicate::class(class).frame(FrameKind::Record),
                    Action::Record { tag: tag.clone() },
                ));
                let trigger = MessageClass::TRANSFER_FLOW
                    [rng.gen_range(0..MessageClass::TRANSFER_FLOW.len())];
                rules.push(Rule::new(
                    Predicate::class(trigger).frame(FrameKind::ClientHello),
                    Action::ReplayRecorded {
                        tag,
                        delay_ms: rng.gen_range(0..2000),
                    },
                ));
            }
        }
        AdversarySchedule {
            name: "random_replays".into(),
            rules,
        }
    }

    /// One attack of the given kind against every packet of `class`.
    pub fn class_attack(class: MessageClass, attack: ClassAttack) -> Self {
        let when = Predicate::class(class);
        let rules = match attack {
            ClassAttack::Replay => vec![Rule::new(
                when,
                Action::Replay {
                    delay_ms: 150,
                    copies: 1,
                },
            )],
            ClassAttack::RecordReplay => vec![
                Rule::new(
                    when.clone().frame(FrameKind::Record),
                    Action::Record { tag: "r".into() },
                ),
                Rule::new(
                    Predicate::default().frame(FrameKind::ClientHello),
                    Action::ReplayRecorded {
                        tag: "r".into(),
                        delay_ms: 0,
                    },
                ),
            ],
            ClassAttack::Modify => vec![Rule::new(
                when,
                Action::Modify {
                    offset: None,
                    mask: 0x80,
                },
            )
            .limit(3)],
            ClassAttack::Inject => vec![Rule::new(
                when,
                Action::Inject {
                    kind: InjectKind::Garbage,
                    delay_ms: 5,
                },
            )
            .limit(3)],
            ClassAttack::Drop => vec![Rule::new(when, Action::Drop { per_mille: 1000 }).limit(2)],
        };
        AdversarySchedule {
            name: format!("{}_{}", attack.name(), class.name()),
            rules,
        }
    }

    pub fn validate(&self, device_count: u32) -> Result<(), SimError> {
        let recorded: BTreeSet<&str> = self
            .rules
            .iter()
            .filter_map(|r| match &r.action {
                Action::Record { tag } => Some(tag.as_str()),
                _ => None,
            })
            .collect();
        for rule in &self.rules {
            for peer in [rule.when.src, rule.when.dst] {
                if let Peer::Actor(ActorId::Device(i)) = peer {
                    if i >= device_count {
                        return Err(SimError::ScenarioInvalid(format!(
                            "adversary rule names device {i} of {device_count}"
                        )));
                    }
                }
            }
            match &rule.action {
                Action::ReplayRecorded { tag, .. } if !recorded.contains(tag.as_str()) => {
                    return Err(SimError::ScenarioInvalid(format!(
                        "replay of unrecorded tag {tag:?}"
                    )))
                }
                Action::Drop { per_mille } if *per_mille > 1000 => {
                    return Err(SimError::ScenarioInvalid(
                        "drop rate above 1000 per mille".into(),
                    ))
                }
                Action::Replay { copies: 0, .. } => {
                    return Err(SimError::ScenarioInvalid("replay with zero copies".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ClassAttack {
    Replay,
    RecordReplay,
    Modify,
    Inject,
    Drop,
}

impl ClassAttack {
    pub const ALL: [ClassAttack; 5] = [
        ClassAttack::Replay,
        ClassAttack::RecordReplay,
        ClassAttack::Modify,
        ClassAttack::Inject,
        ClassAttack::Drop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ClassAttack::Replay => "replay",
            ClassAttack::RecordReplay => "record_replay",
            ClassAttack::Modify => "modify",
            ClassAttack::Inject => "inject",
            ClassAttack::Drop => "drop",
        }
    }
}

/// What the attacker can tell about a packet without reading it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketView {
    pub src: ActorId,
    pub dst: ActorId,
    pub class: MessageClass,
    pub frame: FrameKind,
    pub len: usize,
}

impl PacketView {
    fn device(&self) -> Option<ActorId> {
        [self.dst, self.src]
            .into_iter()
            .find(|a| matches!(a, ActorId::Device(_)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Injection {
    pub kind: InjectKind,
    /// Device involved in the trigger packet, if any.
    pub device: Option<u32>,
    pub dst: ActorId,
    pub class: MessageClass,
    pub delay_ms: u64,
}

/// A packet the attacker sends on its own account.
#[derive(Debug)]
pub(crate) struct Emission {
    pub view: PacketView,
    pub bytes: OpaqueBytes,
    pub delay_ms: u64,
    pub origin: String,
}

#[derive(Debug)]
pub(crate) struct Verdict {
    /// The packet as it continues on its way; `None` when dropped.
    pub original: Option<OpaqueBytes>,
    /// Set when `original` was altered.
    pub modified: Option<String>,
    pub extra: Vec<Emission>,
    pub injections: Vec<Injection>,
    pub log: Vec<String>,
}

#[derive(Debug)]
struct Capture {
    tag: String,
    view: PacketView,
    bytes: OpaqueBytes,
    replayed: bool,
}

#[derive(Debug)]
pub(crate) struct Interceptor {
    schedule: AdversarySchedule,
    hits: Vec<u32>,
    captures: Vec<Capture>,
}

impl Interceptor {
    pub fn new(schedule: AdversarySchedule) -> Self {
        Interceptor {
            hits: vec![0; schedule.rules.len()],
            schedule,
            captures: Vec::new(),
        }
    }

    pub fn intercept(
        &mut self,
        view: &PacketView,
        bytes: OpaqueBytes,
        rng: &mut impl Rng,
    ) -> Verdict {
        let mut verdict = Verdict {
            original: Some(bytes),
            modified: None,
            extra: Vec::new(),
            injections: Vec::new(),
            log: Vec::new(),
        };
        for (i, rule) in self.schedule.rules.iter().enumerate() {
            if !rule.when.matches(view) || rule.limit.is_some_and(|l| self.hits[i] >= l) {
                continue;
            }
            let Some(current) = verdict.original.as_ref() else {
                break;
            };
            match &rule.action {
                Action::Record { tag } => {
                    self.captures.push(Capture {
                        tag: tag.clone(),
                        view: *view,
                        bytes: current.duplicate(),
                        replayed: false,
                    });
                    verdict.log.push(format!("record rule={i} tag={tag}"));
                }
                Action::Replay { delay_ms, copies } => {
                    for k in 0..*copies {
                        verdict.extra.push(Emission {
                            view: *view,
                            bytes: current.duplicate(),
                            delay_ms: delay_ms + u64::from(k) * 50,
                            origin: format!("replay rule={i}"),
                        });
                    }
                    verdict
                        .log
                        .push(format!("replay rule={i} copies={copies} delay={delay_ms}"));
                }
                Action::ReplayRecorded { tag, delay_ms } => {
                    let device = view.device();
                    let mut n = 0;
                    for cap in self.captures.iter_mut().filter(|c| {
                        &c.tag == tag
                            && !c.replayed
                            && (device.is_none() || c.view.device() == device)
                    }) {
                        cap.replayed = true;
                        n += 1;
                        verdict.extra.push(Emission {
                            view: cap.view,
                            bytes: cap.bytes.duplicate(),
                            delay_ms: *delay_ms,
                            origin: format!("replay-recorded rule={i} tag={tag}"),
                        });
                    }
                    verdict
                        .log
                        .push(format!("replay-recorded rule={i} tag={tag} n={n}"));
                }
                Action::Modify { offset, mask } => {
                    let len = current.len().max(1);
                    let at = offset.map_or_else(|| rng.gen_range(0..len), |o| o % len);
                    let mask = if *mask == 0 { 1 } else { *mask };
                    verdict.original = Some(current.flipped(at, mask));
                    verdict.modified =
                        Some(format!("modify rule={i} offset={at} mask={mask:#04x}"));
                    verdict
                        .log
                        .push(format!("modify rule={i} offset={at} mask={mask:#04x}"));
                }
                Action::Drop { per_mille } => {
                    if rng.gen_range(0..1000) < u32::from(*per_mille) {
                        verdict.original = None;
                        verdict.log.push(format!("drop rule={i}"));
                    } else {
                        // The rule only counts packets it actually dropped.
                        continue;
                    }
                }
                Action::Inject { kind, delay_ms } => {
                    verdict.injections.push(Injection {
                        kind: *kind,
                        device: view.device().and_then(ActorId::device_index),
                        dst: view.dst,
                        class: view.class,
                        delay_ms: *delay_ms,
                    });
                    verdict.log.push(format!("inject rule={i} kind={kind}"));
                }
            }
            self.hits[i] += 1;
        }
        verdict
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_named_schedule_resolves_and_validates() {
        for name in AdversarySchedule::NAMES {
            let s = AdversarySchedule::named(name).unwrap();
            assert_eq!(s.name, name);
            s.validate(1).unwrap();
        }
        assert!(AdversarySchedule::named("nope").is_none());
    }

    #[test]
    fn replay_of_unknown_tag_is_invalid() {
        let s = AdversarySchedule {
            name: "x".into(),
            rules: vec![Rule::new(
                Predicate::default(),
                Action::ReplayRecorded {
                    tag: "missing".into(),
                    delay_ms: 0,
                },
            )],
        };
        assert!(s.validate(1).is_err());
    }

    #[test]
    fn class_attacks_validate_and_random_replays_reference_recorded_tags() {
        for class in MessageClass::ALL {
            for attack in ClassAttack::ALL {
                let s = AdversarySchedule::class_attack(class, attack);
                s.validate(1).unwrap();
                assert_eq!(s.name, format!("{}_{}", attack.name(), class.name()));
            }
        }
        let mut rng = <rand_chacha::ChaCha20Rng as rand::SeedableRng>::seed_from_u64(0);
        for _ in 0..200 {
            AdversarySchedule::random_replays(&mut rng)
                .validate(1)
                .unwrap();
        }
    }

    #[test]
    fn predicate_matching() {
        let view = PacketView {
            src: ActorId::Sp1,
            dst: ActorId::Device(3),
            class: MessageClass::TransferDelivery,
            frame: FrameKind::Record,
            len: 10,
        };
        assert!(Predicate::class(MessageClass::TransferDelivery).matches(&view));
        assert!(Predicate::default().dst(Peer::AnyDevice).matches(&view));
        assert!(!Predicate::default().src(Peer::AnyDevice).matches(&view));
        assert!(!Predicate::class(MessageClass::TransferDelivery)
            .frame(FrameKind::ClientHello)
            .matches(&view));
        assert_eq!(view.device(), Some(ActorId::Device(3)));
    }
}
