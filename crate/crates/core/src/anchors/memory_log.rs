//! MEMORY.md entry grammar.
//!
//! ```text
//! ## [2026-10-16T09:30:00.000000Z] user (session=s1, entry=1)
//! content line
//! content line
//!
//! ## [2026-10-16T09:30:01.000000Z] agent (session=s1, entry=2)
//! ...
//! ```
//!
//! Content lines that would read as a header (or that start with a
//! backslash) are written with one leading `\`, removed again on parse.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use chrono::{DateTime, SecondsFormat, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::AnchorError;

const HEADER_START: &str = "## [";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Agent,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::User => "user",
            Role::Agent => "agent",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = AnchorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "user" => Ok(Role::User),
            "agent" => Ok(Role::Agent),
            other => Err(AnchorError::InvalidRole(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub entry_id: u64,
    pub timestamp: DateTime<Utc>,
    pub role: Role,
    pub content: String,
    pub session_id: String,
}

impl MemoryEntry {
    pub fn header(&self) -> String {
        format!(
            "## [{}] {} (session={}, entry={})",
            format_timestamp(&self.timestamp),
            self.role,
            self.session_id,
            self.entry_id
        )
    }

    /// The entry exactly as it appears in MEMORY.md, including the blank
    /// separator line.
    pub fn render(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for (i, line) in self.content.split('\n').enumerate() {
            if i > 0 {
                out.push('\n');
            }
            if line.starts_with(HEADER_START) || line.starts_with('\\') {
                out.push('\\');
            }
            out.push_str(line);
        }
        out.push_str("\n\n");
        out
    }
}

pub fn format_timestamp(ts: &DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::Micros, true)
}

/// Current time truncated to the microsecond precision MEMORY.md stores.
pub(crate) fn now_micros() -> DateTime<Utc> {
    let now = Utc::now();
    DateTime::from_timestamp_micros(now.timestamp_micros()).unwrap_or(now)
}

pub(crate) fn valid_session_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.' | ':'))
}

fn header_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^## \[([^\]]+)\] ([A-Za-z]+) \(session=([A-Za-z0-9_.:-]+), entry=(\d+)\)\s*$")
            .expect("static regex")
    })
}

/// Parsed MEMORY.md: free text before the first header, then entries.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MemoryLog {
    pub preamble: String,
    pub entries: Vec<MemoryEntry>,
}

impl MemoryLog {
    pub fn render(&self) -> String {
        let mut out = self.preamble.clone();
        for e in &self.entries {
            out.push_str(&e.render());
        }
        out
    }
}

fn unescape(body: &str) -> String {
    body.split('\n')
        .map(|l| l.strip_prefix('\\').unwrap_or(l))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn parse_memory_log(text: &str) -> Result<MemoryLog, AnchorError> {
    struct Header {
        line: usize,
        start: usize,
        body_start: usize,
        entry: MemoryEntry,
    }

    let mut headers: Vec<Header> = Vec::new();
    let mut offset = 0usize;
    for (idx, raw_line) in text.split_inclusive('\n').enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim_end_matches(['\n', '\r']);
        if line.starts_with(HEADER_START) {
            let caps = header_regex()
                .captures(line)
                .ok_or_else(|| AnchorError::MalformedEntry {
                    line: line_no,
                    reason: format!("header does not match the entry grammar: {line:?}"),
                })?;
            let timestamp = DateTime::parse_from_rfc3339(&caps[1])
                .map_err(|e| AnchorError::MalformedEntry {
                    line: line_no,
                    reason: format!("bad timestamp {:?}: {e}", &caps[1]),
                })?
                .with_timezone(&Utc);
            let role: Role = caps[2].parse().map_err(|_| AnchorError::MalformedEntry {
                line: line_no,
                reason: format!("unknown role {:?}", &caps[2]),
            })?;
            let entry_id: u64 = caps[4].parse().map_err(|_| AnchorError::MalformedEntry {
                line: line_no,
                reason: "entry id out of range".into(),
            })?;
            if let Some(prev) = headers.last() {
                if entry_id <= prev.entry.entry_id {
                    return Err(AnchorError::MalformedEntry {
                        line: line_no,
                        reason: format!(
                            "entry id {entry_id} does not increase (previous {})",
                            prev.entry.entry_id
                        ),
                    });
                }
                if timestamp < prev.entry.timestamp {
                    return Err(AnchorError::MalformedEntry {
                        line: line_no,
                        reason: "timestamp earlier than previous entry".into(),
                    });
                }
            }
            headers.push(Header {
                line: line_no,
                start: offset,
                body_start: offset + raw_line.len(),
                entry: MemoryEntry {
                    entry_id,
                    timestamp,
                    role,
                    content: String::new(),
                    session_id: caps[3].to_string(),
                },
            });
        }
        offset += raw_line.len();
    }

    let preamble = match headers.first() {
        Some(h) => text[..h.start].to_string(),
        None => text.to_string(),
    };
    let mut entries = Vec::with_capacity(headers.len());
    for i in 0..headers.len() {
        let end = headers.get(i + 1).map_or(text.len(), |h| h.start);
        let block = &text[headers[i].body_start.min(end)..end];
        let body = block
            .strip_suffix("\n\n")
            .or_else(|| block.strip_suffix('\n'))
            .unwrap_or(block);
        let content = unescape(body);
        if content.trim().is_empty() {
            return Err(AnchorError::MalformedEntry {
                line: headers[i].line,
                reason: "entry has no content".into(),
            });
        }
        let mut entry = headers[i].entry.clone();
        entry.content = content;
        entries.push(entry);
    }
    Ok(MemoryLog { preamble, entries })
}
