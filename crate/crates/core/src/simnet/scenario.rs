// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeSet;

use super::adversary::AdversarySchedule;
use super::SimError;
use crate::pki::{CaRole, HierarchyVariant};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScenarioOptions {
    /// The new operator asks devices to attest before anything else.
    pub use_ra: bool,
    pub contact_update_before_enroll: bool,
    pub server_side_keygen: bool,
    /// The original operator pushes one more firmware update before handing
    /// devices over.
    pub last_sp1_update: bool,
    /// The fallback endpoint attests devices that come back.
    pub fallback_ra: bool,
    /// After revocation, replay each device's old operational credential
    /// against the original operator's service endpoint.
    pub stale_credential_probe: bool,
}

/// Deliberate misconfigurations.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Faults {
    /// Devices whose firmware image is corrupted at reset.
    pub ra_tamper: BTreeSet<u32>,
    /// The new operator never registers factory certificates with CA2.
    pub ca2_registration_omit: bool,
    /// Roots withheld from (or removed from) the pre-transfer trust store.
    pub truststore_prune: BTreeSet<CaRole>,
    /// Devices whose factory certificate is not shared with CA1.
    pub unregistered_at_ca1: BTreeSet<u32>,
}

/// Clock, network and retry parameters. Times are virtual.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Timing {
    /// Simulation epoch in seconds.
    pub start_epoch: u64,
    /// When the original operator starts the hand-over, seconds after start.
    pub transfer_start_s: u64,
    /// Length of every device's transfer window, seconds.
    pub reset_window_s: u64,
    pub device_lifetime_s: u64,
    pub operational_lifetime_s: u64,
    pub latency_ms: u64,
    pub jitter_ms: u64,
    pub exchange_timeout_ms: u64,
    pub retry_delay_ms: u64,
    /// Delay between accepting a transfer message and resetting.
    pub reset_delay_ms: u64,
    /// Attempts per post-reset step before falling back.
    pub post_reset_retry_budget: u32,
    /// No actor starts new work after this many seconds.
    pub horizon_s: u64,
    pub event_budget: u64,
}

impl Default for Timing {
    fn default() -> Self {
        Timing {
            start_epoch: 1_700_000_000,
            transfer_start_s: 60,
            reset_window_s: 3600,
            device_lifetime_s: 10 * 365 * 24 * 3600,
            operational_lifetime_s: 30 * 24 * 3600,
            latency_ms: 20,
            jitter_ms: 10,
            exchange_timeout_ms: 2000,
            retry_delay_ms: 1000,
            reset_delay_ms: 500,
            post_reset_retry_budget: 4,
            horizon_s: 1800,
            event_budget: 5_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub variant: HierarchyVariant,
    pub device_count: u32,
    pub options: ScenarioOptions,
    pub faults: Faults,
    pub adversary: AdversarySchedule,
    pub timing: Timing,
}

impl Scenario {
    pub fn new(variant: HierarchyVariant, device_count: u32) -> Self {
        Scenario {
            variant,
            device_count,
            options: ScenarioOptions::default(),
            faults: Faults::default(),
            adversary: AdversarySchedule::none(),
            timing: Timing::default(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let invalid = |msg: String| Err(SimError::ScenarioInvalid(msg));
        if self.device_count == 0 {
            return invalid("device_count must be at least 1".into());
        }
        for set in [&self.faults.ra_tamper, &self.faults.unregistered_at_ca1] {
            if let Some(&i) = set.iter().find(|&&i| i >= self.device_count) {
                return invalid(format!("device index {i} out of range"));
            }
        }
        if !self.faults.ra_tamper.is_empty() && !self.options.use_ra {
            return invalid("ra_tamper needs use_ra".into());
        }
        let t = &self.timing;
        if t.exchange_timeout_ms <= 6 * (t.latency_ms + t.jitter_ms) {
            return invalid("exchange timeout shorter than a handshake round trip".into());
        }
        if t.transfer_start_s >= t.horizon_s {
            return invalid("transfer starts after the horizon".into());
        }
        if t.post_reset_retry_budget == 0 {
            return invalid("post-reset retry budget must be at least 1".into());
        }
        if t.retry_delay_ms == 0 || t.latency_ms == 0 {
            return invalid("latency and retry delay must be positive".into());
        }
        self.adversary.validate(self.device_count)
    }
}
