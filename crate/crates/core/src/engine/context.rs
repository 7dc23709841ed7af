//! Salience-aware context assembly under a token budget.

use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorKind, AnchorSet, MemoryEntry, SalienceLevel};
use crate::text::{tokens_for_words, word_count};

/// Order in which enabled identity anchors appear in the context.
pub const IDENTITY_ORDER: [AnchorKind; 5] = [
    AnchorKind::Soul,
    AnchorKind::IdentityHashFile,
    AnchorKind::Relations,
    AnchorKind::Procedures,
    AnchorKind::Salience,
];

pub const DEGRADED_MARKER: &str = "[degraded mode: no identity anchors available]";

/// One unit of memory evidence: a retrieved entry or a synthesized summary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvidenceItem {
    pub text: String,
    pub entry_ids: Vec<u64>,
}

impl EvidenceItem {
    pub fn from_entry(entry: &MemoryEntry) -> Self {
        Self {
            text: entry.render().trim_end().to_string(),
            entry_ids: vec![entry.entry_id],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct AssembledContext {
    pub identity_section: String,
    pub evidence_section: String,
    pub token_estimate: usize,
    pub truncated: bool,
    /// Entry ids backing the evidence that survived truncation.
    pub provenance: Vec<u64>,
    /// No identity anchor contributed anything.
    pub degraded: bool,
}

impl AssembledContext {
    /// Prompt handed to the generator.
    pub fn render_prompt(&self, query: &str) -> String {
        let mut prompt = String::new();
        if self.degraded {
            prompt.push_str(DEGRADED_MARKER);
        } else {
            prompt.push_str(&self.identity_section);
        }
        prompt.push_str("\n\n");
        if !self.evidence_section.is_empty() {
            prompt.push_str("Relevant memory:\n");
            prompt.push_str(&self.evidence_section);
            prompt.push_str("\n\n");
        }
        prompt.push_str("User: ");
        prompt.push_str(query);
        prompt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum DropClass {
    Salience,
    Evidence,
    Identity,
}

struct Unit {
    words: usize,
    kept: bool,
}

fn salience_rank(level: Option<SalienceLevel>) -> u8 {
    match level {
        None => 0,
        Some(SalienceLevel::Low) => 1,
        Some(SalienceLevel::Medium) => 2,
        Some(SalienceLevel::High) => 3,
    }
}

/// Build the context from the enabled identity anchors and `evidence`
/// (oldest first), dropping material until the estimate fits `budget`:
/// salience lines lowest level first, then evidence oldest first, then the
/// remaining identity lines from the end. Disabled anchors contribute
/// nothing; a disabled Memory anchor suppresses all evidence.
pub fn assemble_context(set: &AnchorSet, evidence: &[EvidenceItem], budget: usize) -> AssembledContext {
    let mut identity: Vec<(AnchorKind, Vec<String>)> = Vec::new();
    let mut units: Vec<Unit> = Vec::new();
    // (class, primary key, secondary key, unit index); sorted ascending = drop first
    let mut drop_order: Vec<(DropClass, i64, i64, usize)> = Vec::new();

    let mut identity_pos = 0i64;
    for kind in IDENTITY_ORDER {
        let anchor = set.anchor(kind);
        if !anchor.enabled {
            continue;
        }
        let mut lines = Vec::new();
        for (line_no, (text, level, _is_item)) in anchor.content_lines().into_iter().enumerate() {
            let idx = units.len();
            units.push(Unit {
                words: word_count(&text),
                kept: true,
            });
            if kind == AnchorKind::Salience {
                drop_order.push((
                    DropClass::Salience,
                    i64::from(salience_rank(level)),
                    -(line_no as i64),
                    idx,
                ));
            } else {
                drop_order.push((DropClass::Identity, -identity_pos, 0, idx));
            }
            identity_pos += 1;
            lines.push(text);
        }
        if !lines.is_empty() {
            identity.push((kind, lines));
        }
    }

    let evidence_enabled = set.is_enabled(AnchorKind::Memory);
    let evidence: &[EvidenceItem] = if evidence_enabled { evidence } else { &[] };
    let evidence_start = units.len();
    for (i, item) in evidence.iter().enumerate() {
        let idx = units.len();
        units.push(Unit {
            words: word_count(&item.text),
            kept: true,
        });
        drop_order.push((DropClass::Evidence, i as i64, 0, idx));
    }

    drop_order.sort();
    let mut words: usize = units.iter().map(|u| u.words).sum();
    let mut truncated = false;
    for (_, _, _, idx) in &drop_order {
        if tokens_for_words(words) <= budget {
            break;
        }
        units[*idx].kept = false;
        words -= units[*idx].words;
        truncated = true;
    }

    let mut cursor = 0usize;
    let mut blocks = Vec::new();
    for (_, lines) in &identity {
        let kept: Vec<&str> = lines
            .iter()
            .enumerate()
            .filter(|(i, _)| units[cursor + i].kept)
            .map(|(_, l)| l.as_str())
            .collect();
        cursor += lines.len();
        if !kept.is_empty() {
            blocks.push(kept.join("\n"));
        }
    }
    let identity_section = blocks.join("\n\n");

    let mut provenance = Vec::new();
    let mut evidence_blocks = Vec::new();
    for (i, item) in evidence.iter().enumerate() {
        if units[evidence_start + i].kept {
            evidence_blocks.push(item.text.as_str());
            provenance.extend_from_slice(&item.entry_ids);
        }
    }
    let evidence_section = evidence_blocks.join("\n\n");

    AssembledContext {
        degraded: identity_section.is_empty(),
        token_estimate: tokens_for_words(words),
        identity_section,
        evidence_section,
        truncated,
        provenance,
    }
}
