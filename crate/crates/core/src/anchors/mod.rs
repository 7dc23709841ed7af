//! The six identity anchors of an agent and its append-only memory log.
//!
//! On disk an agent is a directory:
//!
//! ```text
//! <root>/<agent_id>/SOUL.md
//!                   MEMORY.md
//!                   PROCEDURES.md
//!                   SALIENCE.md
//!                   RELATIONS.md
//!                   IDENTITY_HASH.md
//!                   anchor_state.json   (which anchors are failure-injected)
//! ```

mod document;
mod memory_log;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use document::{parse_salience, AnchorItem, SalienceLevel, Valence, UNPARSED_FLAG};
pub use memory_log::{format_timestamp, parse_memory_log, MemoryEntry, MemoryLog, Role};

use document::Document;

pub const STATE_FILE: &str = "anchor_state.json";
const DEFAULT_MEMORY_PREAMBLE: &str = "# MEMORY\n\n";

#[derive(Debug, Error)]
pub enum AnchorError {
    #[error("malformed memory entry at line {line}: {reason}")]
    MalformedEntry { line: usize, reason: String },
    #[error("cannot parse {kind} at line {line}: {reason}")]
    Parse {
        kind: AnchorKind,
        line: usize,
        reason: String,
    },
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    StorageWrite {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("memory content must not be empty")]
    EmptyContent,
    #[error("invalid session id {0:?}")]
    InvalidSessionId(String),
    #[error("invalid agent id {0:?}")]
    InvalidAgentId(String),
    #[error("unknown role {0:?}")]
    InvalidRole(String),
    #[error("unknown anchor kind {0:?}")]
    UnknownKind(String),
    #[error("agent id {0:?} already in use")]
    IdCollision(String),
    #[error("MEMORY.md is append-only")]
    AppendOnly,
    #[error("anchor weight {0} outside [0, 1]")]
    InvalidWeight(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AnchorKind {
    Soul,
    Memory,
    Procedures,
    Salience,
    Relations,
    IdentityHashFile,
}

impl AnchorKind {
    pub const ALL: [AnchorKind; 6] = [
        AnchorKind::Soul,
        AnchorKind::Memory,
        AnchorKind::Procedures,
        AnchorKind::Salience,
        AnchorKind::Relations,
        AnchorKind::IdentityHashFile,
    ];

    pub fn filename(self) -> &'static str {
        match self {
            AnchorKind::Soul => "SOUL.md",
            AnchorKind::Memory => "MEMORY.md",
            AnchorKind::Procedures => "PROCEDURES.md",
            AnchorKind::Salience => "SALIENCE.md",
            AnchorKind::Relations => "RELATIONS.md",
            AnchorKind::IdentityHashFile => "IDENTITY_HASH.md",
        }
    }

    /// Short lowercase name used in URLs and on the command line.
    pub fn slug(self) -> &'static str {
        match self {
            AnchorKind::Soul => "soul",
            AnchorKind::Memory => "memory",
            AnchorKind::Procedures => "procedures",
            AnchorKind::Salience => "salience",
            AnchorKind::Relations => "relations",
            AnchorKind::IdentityHashFile => "identity_hash",
        }
    }

    pub fn default_weight(self) -> f64 {
        match self {
            AnchorKind::Soul => 0.30,
            AnchorKind::Memory => 0.30,
            AnchorKind::Procedures => 0.15,
            AnchorKind::Salience => 0.10,
            AnchorKind::Relations => 0.10,
            AnchorKind::IdentityHashFile => 0.05,
        }
    }
}

impl fmt::Display for AnchorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.filename())
    }
}

impl FromStr for AnchorKind {
    type Err = AnchorError;

    /// Accepts the slug, the variant name, or the filename, case-insensitively.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let needle = s.trim().to_ascii_lowercase();
        AnchorKind::ALL
            .into_iter()
            .find(|k| {
                needle == k.slug()
                    || needle == k.filename().to_ascii_lowercase()
                    || needle == format!("{k:?}").to_ascii_lowercase()
                    || needle == k.slug().replace('_', "")
            })
            .ok_or_else(|| AnchorError::UnknownKind(s.to_string()))
    }
}

/// One identity anchor.
///
/// For [`AnchorKind::Memory`], `raw_text` is only the preamble of MEMORY.md;
/// the entries live in [`AnchorSet::memory_log`].
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub kind: AnchorKind,
    pub raw_text: String,
    pub items: Vec<AnchorItem>,
    pub enabled: bool,
    pub weight: f64,
    document: Document,
}

impl Anchor {
    pub fn parse(kind: AnchorKind, text: &str) -> Result<Self, AnchorError> {
        let document = if kind == AnchorKind::Memory {
            Document::default()
        } else {
            document::parse(kind, text)?
        };
        Ok(Self {
            kind,
            raw_text: text.to_string(),
            items: document.items.clone(),
            enabled: true,
            weight: kind.default_weight(),
            document,
        })
    }

    pub fn empty(kind: AnchorKind) -> Self {
        Self::parse(kind, "").expect("empty anchor always parses")
    }

    /// Regenerate the file text from the parsed lines.
    pub fn serialize(&self) -> String {
        if self.kind == AnchorKind::Memory {
            return self.raw_text.clone();
        }
        let mut out = self.document.serialize();
        if self.raw_text.ends_with('\n') {
            out.push('\n');
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.raw_text.trim().is_empty()
    }

    /// Non-blank lines of the anchor, in file order, tagged with the salience
    /// level of the item on that line (if any).
    pub fn content_lines(&self) -> Vec<(String, Option<SalienceLevel>, bool)> {
        use document::Line;
        self.document
            .lines
            .iter()
            .filter_map(|line| match line {
                Line::Item { prefix, index } => {
                    let item = &self.items[*index];
                    Some((format!("{prefix}{}", item.text), item.salience_level, true))
                }
                Line::Marker { index } => Some((self.items[*index].text.clone(), None, true)),
                Line::Text(t) if !t.trim().is_empty() => Some((t.clone(), None, false)),
                Line::Text(_) => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct AnchorState {
    #[serde(default)]
    disabled: Vec<AnchorKind>,
}

/// Summary row for listings and the service API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSummary {
    pub kind: AnchorKind,
    pub slug: String,
    pub filename: String,
    pub enabled: bool,
    pub weight: f64,
    pub items: usize,
    pub bytes: usize,
}

pub fn valid_agent_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 64
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

/// All six anchors of one agent plus its memory log.
///
/// A set either lives in a directory (every mutation is persisted before the
/// call returns) or purely in memory (`dir == None`), as used by simulations.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    agent_id: String,
    dir: Option<PathBuf>,
    anchors: BTreeMap<AnchorKind, Anchor>,
    memory_log: Vec<MemoryEntry>,
}

impl AnchorSet {
    pub fn in_memory(agent_id: impl Into<String>) -> Self {
        Self {
            agent_id: agent_id.into(),
            dir: None,
            anchors: AnchorKind::ALL
                .into_iter()
                .map(|k| (k, Anchor::empty(k)))
                .collect(),
            memory_log: Vec::new(),
        }
    }

    /// Create `<root>/<agent_id>/` with all six files.
    pub fn create(
        root: &Path,
        agent_id: &str,
        texts: &BTreeMap<AnchorKind, String>,
    ) -> Result<Self, AnchorError> {
        if !valid_agent_id(agent_id) {
            return Err(AnchorError::InvalidAgentId(agent_id.to_string()));
        }
        let dir = root.join(agent_id);
        if dir.exists() {
            return Err(AnchorError::IdCollision(agent_id.to_string()));
        }
        let mut set = Self::in_memory(agent_id);
        for (kind, text) in texts {
            if *kind == AnchorKind::Memory {
                continue;
            }
            set.anchors.insert(*kind, Anchor::parse(*kind, text)?);
        }
        set.anchors.get_mut(&AnchorKind::Memory).expect("memory").raw_text =
            DEFAULT_MEMORY_PREAMBLE.to_string();
        fs::create_dir_all(&dir).map_err(|source| AnchorError::StorageWrite {
            path: dir.clone(),
            source,
        })?;
        for kind in AnchorKind::ALL {
            write_atomic(&dir.join(kind.filename()), &set.anchor_text(kind))?;
        }
        set.dir = Some(dir);
        Ok(set)
    }

    /// Load the agent stored in `dir`. Missing anchor files yield empty,
    /// enabled anchors with default weights.
    pub fn load(dir: &Path) -> Result<Self, AnchorError> {
        let agent_id = dir
            .file_name()
            .and_then(|n| n.to_str())
            .filter(|n| valid_agent_id(n))
            .ok_or_else(|| AnchorError::InvalidAgentId(dir.display().to_string()))?
            .to_string();
        if !dir.is_dir() {
            return Err(AnchorError::Unreadable {
                path: dir.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
            });
        }
        let mut set = Self::in_memory(agent_id);
        for kind in AnchorKind::ALL {
            let path = dir.join(kind.filename());
            let text = match fs::read_to_string(&path) {
                Ok(t) => t,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => continue,
                Err(source) => return Err(AnchorError::Unreadable { path, source }),
            };
            if kind == AnchorKind::Memory {
                let log = parse_memory_log(&text)?;
                set.anchors.get_mut(&kind).expect("memory").raw_text = log.preamble;
                set.memory_log = log.entries;
            } else {
                set.anchors.insert(kind, Anchor::parse(kind, &text)?);
            }
        }
        let state_path = dir.join(STATE_FILE);
        if let Ok(text) = fs::read_to_string(&state_path) {
            let state: AnchorState = serde_json::from_str(&text).map_err(|e| {
                AnchorError::Unreadable {
                    path: state_path.clone(),
                    source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
                }
            })?;
            for kind in state.disabled {
                set.anchors.get_mut(&kind).expect("all kinds present").enabled = false;
            }
        }
        set.dir = Some(dir.to_path_buf());
        Ok(set)
    }

    pub fn agent_id(&self) -> &str {
        &self.agent_id
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn anchor(&self, kind: AnchorKind) -> &Anchor {
        &self.anchors[&kind]
    }

    pub fn anchors(&self) -> impl Iterator<Item = &Anchor> {
        self.anchors.values()
    }

    pub fn memory_log(&self) -> &[MemoryEntry] {
        &self.memory_log
    }

    pub fn is_enabled(&self, kind: AnchorKind) -> bool {
        self.anchors[&kind].enabled
    }

    /// Full file text of an anchor (for MEMORY.md: preamble plus all entries).
    pub fn anchor_text(&self, kind: AnchorKind) -> String {
        if kind == AnchorKind::Memory {
            MemoryLog {
                preamble: self.anchors[&kind].raw_text.clone(),
                entries: self.memory_log.clone(),
            }
            .render()
        } else {
            self.anchors[&kind].raw_text.clone()
        }
    }

    pub fn summaries(&self) -> Vec<AnchorSummary> {
        self.anchors
            .values()
            .map(|a| AnchorSummary {
                kind: a.kind,
                slug: a.kind.slug().to_string(),
                filename: a.kind.filename().to_string(),
                enabled: a.enabled,
                weight: a.weight,
                items: if a.kind == AnchorKind::Memory {
                    self.memory_log.len()
                } else {
                    a.items.len()
                },
                bytes: self.anchor_text(a.kind).len(),
            })
            .collect()
    }

    /// Append one exchange turn to MEMORY.md and the in-memory log.
    ///
    /// The entry is flushed to disk before this returns.
    pub fn append_memory(
        &mut self,
        role: Role,
        content: &str,
        session_id: &str,
    ) -> Result<MemoryEntry, AnchorError> {
        if content.trim().is_empty() {
            return Err(AnchorError::EmptyContent);
        }
        if !memory_log::valid_session_id(session_id) {
            return Err(AnchorError::InvalidSessionId(session_id.to_string()));
        }
        let previous = self.memory_log.last();
        let mut timestamp = memory_log::now_micros();
        if let Some(prev) = previous {
            timestamp = timestamp.max(prev.timestamp);
        }
        let entry = MemoryEntry {
            entry_id: previous.map_or(1, |e| e.entry_id + 1),
            timestamp,
            role,
            content: content.to_string(),
            session_id: session_id.to_string(),
        };
        if let Some(dir) = &self.dir {
            let preamble = &self.anchors[&AnchorKind::Memory].raw_text;
            append_block(&dir.join(AnchorKind::Memory.filename()), preamble, &entry.render())?;
        }
        self.memory_log.push(entry.clone());
        Ok(entry)
    }

    /// Failure injection: a disabled anchor contributes nothing to context
    /// assembly. The anchor's text is untouched.
    pub fn set_enabled(&mut self, kind: AnchorKind, enabled: bool) -> Result<(), AnchorError> {
        self.anchors.get_mut(&kind).expect("all kinds present").enabled = enabled;
        self.persist_state()
    }

    pub fn set_weight(&mut self, kind: AnchorKind, weight: f64) -> Result<(), AnchorError> {
        if !(0.0..=1.0).contains(&weight) {
            return Err(AnchorError::InvalidWeight(weight));
        }
        self.anchors.get_mut(&kind).expect("all kinds present").weight = weight;
        Ok(())
    }

    /// Weights of enabled anchors renormalized to sum to 1. Empty when every
    /// enabled anchor has zero weight or nothing is enabled.
    pub fn normalized_weights(&self) -> BTreeMap<AnchorKind, f64> {
        let total: f64 = self
            .anchors
            .values()
            .filter(|a| a.enabled)
            .map(|a| a.weight)
            .sum();
        if total <= 0.0 {
            return BTreeMap::new();
        }
        self.anchors
            .values()
            .filter(|a| a.enabled)
            .map(|a| (a.kind, a.weight / total))
            .collect()
    }

    /// Replace a non-memory anchor's text, writing the file atomically.
    pub fn replace_anchor(&mut self, kind: AnchorKind, text: &str) -> Result<&Anchor, AnchorError> {
        if kind == AnchorKind::Memory {
            return Err(AnchorError::AppendOnly);
        }
        let mut anchor = Anchor::parse(kind, text)?;
        let old = &self.anchors[&kind];
        anchor.enabled = old.enabled;
        anchor.weight = old.weight;
        if let Some(dir) = &self.dir {
            write_atomic(&dir.join(kind.filename()), text)?;
        }
        self.anchors.insert(kind, anchor);
        Ok(&self.anchors[&kind])
    }

    /// Fork the lineage: a deep copy of every anchor and the memory log under
    /// `new_agent_id`. On-disk sets are copied to a sibling directory.
    pub fn fork(&self, new_agent_id: &str) -> Result<AnchorSet, AnchorError> {
        if new_agent_id == self.agent_id {
            return Err(AnchorError::IdCollision(new_agent_id.to_string()));
        }
        if !valid_agent_id(new_agent_id) {
            return Err(AnchorError::InvalidAgentId(new_agent_id.to_string()));
        }
        let mut child = self.clone();
        child.agent_id = new_agent_id.to_string();
        child.dir = None;
        if let Some(dir) = &self.dir {
            let parent = dir.parent().unwrap_or(Path::new("."));
            let child_dir = parent.join(new_agent_id);
            if child_dir.exists() {
                return Err(AnchorError::IdCollision(new_agent_id.to_string()));
            }
            fs::create_dir_all(&child_dir).map_err(|source| AnchorError::StorageWrite {
                path: child_dir.clone(),
                source,
            })?;
            for kind in AnchorKind::ALL {
                write_atomic(&child_dir.join(kind.filename()), &self.anchor_text(kind))?;
            }
            child.dir = Some(child_dir);
            child.persist_state()?;
        }
        Ok(child)
    }

    fn persist_state(&self) -> Result<(), AnchorError> {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let state = AnchorState {
            disabled: self
                .anchors
                .values()
                .filter(|a| !a.enabled)
                .map(|a| a.kind)
                .collect(),
        };
        let text = serde_json::to_string_pretty(&state).expect("state serializes");
        write_atomic(&dir.join(STATE_FILE), &text)
    }
}

/// Write `text` to a temporary sibling and rename it over `path`.
pub fn write_atomic(path: &Path, text: &str) -> Result<(), AnchorError> {
    let wrap = |source| AnchorError::StorageWrite {
        path: path.to_path_buf(),
        source,
    };
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(wrap)?;
        f.write_all(text.as_bytes()).map_err(wrap)?;
        f.sync_all().map_err(wrap)?;
    }
    fs::rename(&tmp, path).map_err(wrap)
}

/// Append `block` to the log file, creating it with `preamble` when absent
/// and making sure the block starts on a fresh line.
fn append_block(path: &Path, preamble: &str, block: &str) -> Result<(), AnchorError> {
    let wrap = |source| AnchorError::StorageWrite {
        path: path.to_path_buf(),
        source,
    };
    let mut file = OpenOptions::new()
        .read(true)
        .append(true)
        .create(true)
        .open(path)
        .map_err(wrap)?;
    let len = file.metadata().map_err(wrap)?.len();
    let mut payload = String::new();
    if len == 0 {
        payload.push_str(preamble);
        if !preamble.is_empty() && !preamble.ends_with('\n') {
            payload.push('\n');
        }
    } else {
        let mut last = [0u8; 1];
        file.seek(SeekFrom::Start(len - 1)).map_err(wrap)?;
        file.read_exact(&mut last).map_err(wrap)?;
        if last[0] != b'\n' {
            payload.push('\n');
        }
    }
    payload.push_str(block);
    file.write_all(payload.as_bytes()).map_err(wrap)?;
    file.sync_data().map_err(wrap)
}
