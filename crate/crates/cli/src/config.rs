// SPDX-License-Identifier: Apache-2.0

//! Scenario configuration files (TOML).

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use trust_transfer::device::Phase;
use trust_transfer::pki::{CaRole, HierarchyVariant};
use trust_transfer::simnet::{
    Action, AdversarySchedule, InjectKind, Predicate, Rule, Scenario, Timing,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("{0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    schema: u32,
    #[serde(default)]
    name: Option<String>,
    variant: String,
    device_count: u32,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    adversary: RawAdversary,
    #[serde(default)]
    options: RawOptions,
    #[serde(default)]
    faults: RawFaults,
    #[serde(default)]
    timing: RawTiming,
    #[serde(default)]
    expect: RawExpect,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAdversary {
    name: Option<String>,
    #[serde(default)]
    rules: Vec<RawRule>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRule {
    class: Option<String>,
    frame: Option<String>,
    src: Option<String>,
    dst: Option<String>,
    action: String,
    limit: Option<u32>,
    tag: Option<String>,
    #[serde(default)]
    delay_ms: u64,
    copies: Option<u32>,
    offset: Option<usize>,
    mask: Option<u8>,
    per_mille: Option<u16>,
    kind: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOptions {
    #[serde(default)]
    use_ra: bool,
    #[serde(default)]
    contact_update_before_enroll: bool,
    #[serde(default)]
    server_side_keygen: bool,
    #[serde(default)]
    last_sp1_update: bool,
    #[serde(default)]
    fallback_ra: bool,
    #[serde(default)]
    stale_credential_probe: bool,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFaults {
    #[serde(default)]
    ra_tamper: Vec<u32>,
    #[serde(default)]
    ca2_registration_omit: bool,
    #[serde(default)]
    truststore_prune: Vec<String>,
    #[serde(default)]
    unregistered_at_ca1: Vec<u32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTiming {
    start_epoch: Option<u64>,
    transfer_start_s: Option<u64>,
    reset_window_s: Option<u64>,
    device_lifetime_s: Option<u64>,
    operational_lifetime_s: Option<u64>,
    latency_ms: Option<u64>,
    jitter_ms: Option<u64>,
    exchange_timeout_ms: Option<u64>,
    retry_delay_ms: Option<u64>,
    reset_delay_ms: Option<u64>,
    post_reset_retry_budget: Option<u32>,
    horizon_s: Option<u64>,
    event_budget: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExpect {
    #[serde(default = "default_phase")]
    phase: String,
    #[serde(default = "default_issuer")]
    issuer: Option<String>,
    #[serde(default)]
    devices: BTreeMap<String, String>,
    #[serde(default)]
    trace_contains: Vec<String>,
}

impl Default for RawExpect {
    fn default() -> Self {
        RawExpect {
            phase: default_phase(),
            issuer: default_issuer(),
            devices: BTreeMap::new(),
            trace_contains: Vec::new(),
        }
    }
}

fn default_phase() -> String {
    "reenrolled".into()
}

fn default_issuer() -> Option<String> {
    Some("ca2".into())
}

/// What a run must produce for the scenario to pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Expectation {
    pub phase: Phase,
    /// Issuer required of devices that end reenrolled.
    pub issuer: Option<String>,
    pub overrides: BTreeMap<u32, Phase>,
    pub trace_contains: Vec<String>,
}

impl Expectation {
    pub fn phase_for(&self, device: u32) -> Phase {
        self.overrides.get(&device).copied().unwrap_or(self.phase)
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub name: String,
    pub scenario: Scenario,
    pub seed: u64,
    pub expect: Expectation,
}

fn parse<T: std::str::FromStr<Err = String>>(what: &str, s: &str) -> Result<T, ConfigError> {
    s.parse()
        .map_err(|e| ConfigError::Invalid(format!("{what}: {e}")))
}

fn rule(raw: RawRule, index: usize) -> Result<Rule, ConfigError> {
    let ctx = |field: &str| format!("adversary.rules[{index}].{field}");
    let mut when = Predicate::default();
    if let Some(c) = &raw.class {
        when.class = Some(parse(&ctx("class"), c)?);
    }
    if let Some(f) = &raw.frame {
        when.frame = Some(parse(&ctx("frame"), f)?);
    }
    if let Some(p) = &raw.src {
        when.src = parse(&ctx("src"), p)?;
    }
    if let Some(p) = &raw.dst {
        when.dst = parse(&ctx("dst"), p)?;
    }
    let need_tag = || {
        raw.tag
            .clone()
            .ok_or_else(|| ConfigError::Invalid(format!("{} is required", ctx("tag"))))
    };
    let action = match raw.action.as_str() {
        "record" => Action::Record { tag: need_tag()? },
        "replay" => Action::Replay {
            delay_ms: raw.delay_ms,
            copies: raw.copies.unwrap_or(1),
        },
        "replay_recorded" => Action::ReplayRecorded {
            tag: need_tag()?,
            delay_ms: raw.delay_ms,
        },
        "modify" => Action::Modify {
            offset: raw.offset,
            mask: raw.mask.unwrap_or(0x01),
        },
        "drop" => Action::Drop {
            per_mille: raw.per_mille.unwrap_or(1000),
        },
        "inject" => {
            let kind = raw
                .kind
                .as_deref()
                .ok_or_else(|| ConfigError::Invalid(format!("{} is required", ctx("kind"))))?;
            Action::Inject {
                kind: parse::<InjectKind>(&ctx("kind"), kind)?,
                delay_ms: raw.delay_ms,
            }
        }
        other => return invalid(format!("{}: unknown action {other:?}", ctx("action"))),
    };
    Ok(Rule {
        when,
        action,
        limit: raw.limit,
    })
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text)?;
        if raw.schema != SCHEMA_VERSION {
            return invalid(format!(
                "schema {} is not supported (expected {SCHEMA_VERSION})",
                raw.schema
            ));
        }
        let variant: HierarchyVariant = parse("variant", &raw.variant)?;
        let mut scenario = Scenario::new(variant, raw.device_count);

        let adversary = match (raw.adversary.name, raw.adversary.rules.is_empty()) {
            (Some(_), false) => return invalid("adversary: give either a name or rules, not both"),
            (Some(name), true) => AdversarySchedule::named(&name).ok_or_else(|| {
                ConfigError::Invalid(format!(
                    "unknown adversary schedule {name:?}; known: {}",
                    AdversarySchedule::NAMES.join(", ")
                ))
            })?,
            (None, false) => AdversarySchedule {
                name: "inline".into(),
                rules: raw
                    .adversary
                    .rules
                    .into_iter()
                    .enumerate()
                    .map(|(i, r)| rule(r, i))
                    .collect::<Result<_, _>>()?,
            },
            (None, true) => AdversarySchedule::none(),
        };
        scenario.adversary = adversary;

        let o = raw.options;
        scenario.options.use_ra = o.use_ra;
        scenario.options.contact_update_before_enroll = o.contact_update_before_enroll;
        scenario.options.server_side_keygen = o.server_side_keygen;
        scenario.options.last_sp1_update = o.last_sp1_update;
        scenario.options.fallback_ra = o.fallback_ra;
        scenario.options.stale_credential_probe = o.stale_credential_probe;

        let f = raw.faults;
        scenario.faults.ra_tamper = f.ra_tamper.into_iter().collect();
        scenario.faults.ca2_registration_omit = f.ca2_registration_omit;
        scenario.faults.unregistered_at_ca1 = f.unregistered_at_ca1.into_iter().collect();
        scenario.faults.truststore_prune = f
            .truststore_prune
            .iter()
            .map(|r| parse::<CaRole>("faults.truststore_prune", r))
            .collect::<Result<_, _>>()?;

        let t = raw.timing;
        let d = Timing::default();
        scenario.timing = Timing {
            start_epoch: t.start_epoch.unwrap_or(d.start_epoch),
            transfer_start_s: t.transfer_start_s.unwrap_or(d.transfer_start_s),
            reset_window_s: t.reset_window_s.unwrap_or(d.reset_window_s),
            device_lifetime_s: t.device_lifetime_s.unwrap_or(d.device_lifetime_s),
            operational_lifetime_s: t.operational_lifetime_s.unwrap_or(d.operational_lifetime_s),
            latency_ms: t.latency_ms.unwrap_or(d.latency_ms),
            jitter_ms: t.jitter_ms.unwrap_or(d.jitter_ms),
            exchange_timeout_ms: t.exchange_timeout_ms.unwrap_or(d.exchange_timeout_ms),
            retry_delay_ms: t.retry_delay_ms.unwrap_or(d.retry_delay_ms),
            reset_delay_ms: t.reset_delay_ms.unwrap_or(d.reset_delay_ms),
            post_reset_retry_budget: t
                .post_reset_retry_budget
                .unwrap_or(d.post_reset_retry_budget),
            horizon_s: t.horizon_s.unwrap_or(d.horizon_s),
            event_budget: t.event_budget.unwrap_or(d.event_budget),
        };

        let e = raw.expect;
        let mut overrides = BTreeMap::new();
        for (k, v) in &e.devices {
            let index: u32 = k.parse().map_err(|_| {
                ConfigError::Invalid(format!("expect.devices: bad device index {k:?}"))
            })?;
            if index >= raw.device_count {
                return invalid(format!("expect.devices: device {index} out of range"));
            }
            overrides.insert(index, parse::<Phase>("expect.devices", v)?);
        }
        let expect = Expectation {
            phase: parse("expect.phase", &e.phase)?,
            issuer: e.issuer.filter(|s| !s.is_empty()),
            overrides,
            trace_contains: e.trace_contains,
        };

        scenario
            .validate()
            .map_err(|err| ConfigError::Invalid(err.to_string()))?;
        Ok(ScenarioConfig {
            name: raw.name.unwrap_or_else(|| "scenario".into()),
            scenario,
            seed: raw.seed,
            expect,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut config = Self::from_toml(&text)?;
        if config.name == "scenario" {
            if let Some(stem) = path.file_stem() {
                config.name = stem.to_string_lossy().into_owned();
            }
        }
        Ok(config)
    }
}
