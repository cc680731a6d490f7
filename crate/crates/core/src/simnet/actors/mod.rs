// SPDX-License-Identifier: Apache-2.0

mod attacker;
mod authority;
mod device;
mod operator;

pub(crate) use attacker::AttackerActor;
pub use attacker::{Attempt, AttemptOutcome};
pub(crate) use authority::{CaActor, GrantExtras};
pub(crate) use device::DeviceActor;
pub(crate) use operator::{Sp1Actor, Sp2Actor};
