// SPDX-License-Identifier: Apache-2.0

//! Deterministic discrete-event simulation of a fleet hand-over, with an
//! on-path adversary.

mod actors;
pub mod adversary;
mod engine;
pub mod scenario;
pub mod trace;
pub mod wire;
mod world;

use thiserror::Error;

pub use actors::{Attempt, AttemptOutcome};
pub use adversary::{Action, AdversarySchedule, ClassAttack, InjectKind, Peer, Predicate, Rule};
pub use engine::{Millis, NetStats, Origin, SimEvent, SimEventKind};
pub use scenario::{Faults, Scenario, ScenarioOptions, Timing};
pub use trace::Trace;
pub use wire::{ActorId, FrameKind, MessageClass};
pub use world::{device_id, run, size_table, DeviceOutcome, RunReport, SimOutcome};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    ScenarioInvalid(String),
}
