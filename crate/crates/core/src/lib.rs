// SPDX-License-Identifier: Apache-2.0

pub mod codec;
pub mod crypto;
pub mod device;
pub mod messages;
pub mod operators;
pub mod pki;
pub mod session;
pub mod simnet;
