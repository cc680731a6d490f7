// SPDX-License-Identifier: Apache-2.0

use std::fmt::Write as _;

use crate::crypto::{digest, Digest};

/// Line-oriented record of a run. Each line starts with the virtual time in
/// milliseconds followed by a category word:
///
/// ```text
/// 1000 send 17 dev-0000->ca1 initial_enroll client_hello len=412
/// 1025 deliver 17 dev-0000->ca1 initial_enroll client_hello
/// 1025 discard ca1 reason=ReplayDetected
/// 1050 phase dev-0000 provisioned->enrolled
/// ```
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    lines: Vec<String>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, time_ms: u64, category: &str, detail: impl AsRef<str>) {
        self.lines
            .push(format!("{time_ms} {category} {}", detail.as_ref()));
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    /// Lines of one category, without the time and category prefix.
    pub fn category<'a>(&'a self, category: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.lines.iter().filter_map(move |l| {
            let mut parts = l.splitn(3, ' ');
            let _time = parts.next()?;
            (parts.next()? == category).then(|| parts.next().unwrap_or(""))
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.lines.len() * 48);
        for line in &self.lines {
            let _ = writeln!(out, "{line}");
        }
        out
    }

    /// SHA-256 over the text form.
    pub fn digest(&self) -> Digest {
        digest(self.to_text().as_bytes())
    }
}
