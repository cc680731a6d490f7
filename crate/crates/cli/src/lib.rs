// SPDX-License-Identifier: Apache-2.0

//! Scenario runner behind the `trust-transfer` command.

pub mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use trust_transfer::device::Phase;
use trust_transfer::simnet::{self, RunReport, SimError, Trace};

pub use config::{ConfigError, Expectation, ScenarioConfig};

/// Exit codes.
pub const EXIT_PASS: i32 = 0;
pub const EXIT_EXPECTATION: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug)]
pub struct Evaluation {
    pub report: RunReport,
    pub trace: Trace,
    /// Empty when the run met every expectation.
    pub failures: Vec<String>,
}

impl Evaluation {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Checks `report` and `trace` against `expect`.
pub fn check(expect: &Expectation, report: &RunReport, trace: &Trace) -> Vec<String> {
    let mut failures = Vec::new();
    for d in &report.devices {
        let want = expect.phase_for(d.index);
        if d.final_phase != want {
            failures.push(format!(
                "dev-{:04}: phase {} (expected {want})",
                d.index, d.final_phase
            ));
            continue;
        }
        if want == Phase::Reenrolled {
            if let Some(issuer) = &expect.issuer {
                if d.issuer.as_deref() != Some(issuer.as_str()) {
                    failures.push(format!(
                        "dev-{:04}: issuer {} (expected {issuer})",
                        d.index,
                        d.issuer.as_deref().unwrap_or("none")
                    ));
                }
            }
        }
    }
    let text = trace.to_text();
    for needle in &expect.trace_contains {
        if !text.contains(needle.as_str()) {
            failures.push(format!("trace lacks {needle:?}"));
        }
    }
    if !report.false_acceptances.is_empty() {
        failures.push(format!(
            "{} false acceptances",
            report.false_acceptances.len()
        ));
    }
    if !report.quiescent {
        failures.push("event budget exhausted".into());
    }
    failures
}

pub fn evaluate(config: &ScenarioConfig, seed: u64) -> Result<Evaluation, SimError> {
    let out = simnet::run(&config.scenario, seed)?;
    let failures = check(&config.expect, &out.report, &out.trace);
    Ok(Evaluation {
        report: out.report,
        trace: out.trace,
        failures,
    })
}

/// Sizes of the hand-over messages as recorded in the trace.
pub fn size_rows(config: &ScenarioConfig) -> Result<Vec<(String, usize)>, SimError> {
    let sizes: BTreeMap<String, usize> = simnet::size_table(&config.scenario, config.seed)?;
    let n = config.scenario.device_count;
    let order = [
        "TransferMessage".to_string(),
        "TransferMessage.cwt".to_string(),
        "TransferMessage.cwt_relayed".to_string(),
        "DeviceUpdateInfo".to_string(),
        "UpdateInfoList(0)".to_string(),
        "UpdateInfoList(1)".to_string(),
        "UpdateInfoList(2)".to_string(),
        format!("UpdateInfoList(n={n})"),
        format!("UpdateInfoList(n={n}).signed"),
    ];
    Ok(order
        .into_iter()
        .filter_map(|k| sizes.get(&k).map(|&v| (k, v)))
        .collect())
}

pub fn render_sizes(rows: &[(String, usize)]) -> String {
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::new();
    let _ = writeln!(out, "{:width$}  bytes", "message");
    for (k, v) in rows {
        let _ = writeln!(out, "{k:width$}  {v:>5}");
    }
    out
}
