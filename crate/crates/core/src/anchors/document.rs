//! Line-preserving parse/serialize for the markdown anchor files.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{AnchorError, AnchorKind};

pub const UNPARSED_FLAG: &str = "UNPARSED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SalienceLevel {
    Low,
    Medium,
    High,
}

impl SalienceLevel {
    fn parse(word: &str) -> Option<Self> {
        match word.to_ascii_uppercase().as_str() {
            "LOW" => Some(Self::Low),
            "MEDIUM" => Some(Self::Medium),
            "HIGH" => Some(Self::High),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Valence {
    Negative,
    Neutral,
    Positive,
}

impl Valence {
    fn parse(word: &str) -> Option<Self> {
        match word.to_ascii_lowercase().as_str() {
            "negative" => Some(Self::Negative),
            "neutral" => Some(Self::Neutral),
            "positive" => Some(Self::Positive),
            _ => None,
        }
    }
}

/// One bullet (or marker line) of an anchor file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorItem {
    pub text: String,
    pub salience_level: Option<SalienceLevel>,
    pub valence: Option<Valence>,
    pub flags: BTreeSet<String>,
}

impl AnchorItem {
    pub fn plain(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            salience_level: None,
            valence: None,
            flags: BTreeSet::new(),
        }
    }

    pub fn is_unparsed(&self) -> bool {
        self.flags.contains(UNPARSED_FLAG)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Line {
    /// Bullet item; `prefix` is everything before the item text (indent + marker).
    Item { prefix: String, index: usize },
    /// Marker line (`Label: [a, b]`) in IDENTITY_HASH.md.
    Marker { index: usize },
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub(crate) struct Document {
    pub lines: Vec<Line>,
    pub items: Vec<AnchorItem>,
}

impl Document {
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (i, line) in self.lines.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            match line {
                Line::Item { prefix, index } => {
                    out.push_str(prefix);
                    out.push_str(&self.items[*index].text);
                }
                Line::Marker { index } => out.push_str(&self.items[*index].text),
                Line::Text(t) => out.push_str(t),
            }
        }
        out
    }
}

fn bullet_split(line: &str) -> Option<(&str, &str)> {
    let body = line.trim_start();
    let indent = line.len() - body.len();
    for marker in ["- ", "* ", "+ "] {
        if let Some(rest) = body.strip_prefix(marker) {
            return Some((&line[..indent + marker.len()], rest));
        }
    }
    None
}

fn is_marker_line(line: &str) -> bool {
    match line.split_once(':') {
        Some((label, rest)) => {
            let rest = rest.trim();
            !label.trim().is_empty() && rest.starts_with('[') && rest.ends_with(']')
        }
        None => false,
    }
}

/// Parse an anchor file of the given kind.
///
/// Only IDENTITY_HASH.md is strict: every non-blank line must be a heading,
/// a bullet, or a `Label: [value, ...]` marker line. MEMORY.md is handled by
/// the memory-log grammar, not here.
pub(crate) fn parse(kind: AnchorKind, text: &str) -> Result<Document, AnchorError> {
    let mut doc = Document::default();
    for (lineno, line) in text.lines().enumerate() {
        if let Some((prefix, body)) = bullet_split(line) {
            let item = if kind == AnchorKind::Salience {
                parse_salience_item(body)
            } else {
                AnchorItem::plain(body)
            };
            doc.items.push(item);
            doc.lines.push(Line::Item {
                prefix: prefix.to_string(),
                index: doc.items.len() - 1,
            });
            continue;
        }
        if kind == AnchorKind::IdentityHashFile {
            let trimmed = line.trim();
            if is_marker_line(trimmed) {
                doc.items.push(AnchorItem::plain(line));
                doc.lines.push(Line::Marker {
                    index: doc.items.len() - 1,
                });
                continue;
            }
            if !(trimmed.is_empty() || trimmed.starts_with('#')) {
                return Err(AnchorError::Parse {
                    kind,
                    line: lineno + 1,
                    reason: format!("expected `Label: [value, ...]`, found {trimmed:?}"),
                });
            }
        }
        doc.lines.push(Line::Text(line.to_string()));
    }
    Ok(doc)
}

/// Items of a SALIENCE.md file. Never fails: lines that do not follow
/// `- <subject>: <LEVEL> importance[, <valence> valence][, <FLAG> flag]`
/// become items carrying the `UNPARSED` flag.
pub fn parse_salience(anchor_text: &str) -> Vec<AnchorItem> {
    parse(AnchorKind::Salience, anchor_text)
        .map(|doc| doc.items)
        .unwrap_or_default()
}

fn parse_salience_item(body: &str) -> AnchorItem {
    let unparsed = || {
        let mut item = AnchorItem::plain(body);
        item.flags.insert(UNPARSED_FLAG.to_string());
        item
    };
    let Some((subject, attrs)) = body.rsplit_once(':') else {
        return unparsed();
    };
    if subject.trim().is_empty() || attrs.trim().is_empty() {
        return unparsed();
    }
    let mut item = AnchorItem::plain(body);
    for clause in attrs.split(',') {
        let words: Vec<&str> = clause.split_whitespace().collect();
        let [value, keyword] = words.as_slice() else {
            return unparsed();
        };
        match keyword.to_ascii_lowercase().as_str() {
            "importance" if item.salience_level.is_none() => match SalienceLevel::parse(value) {
                Some(level) => item.salience_level = Some(level),
                None => return unparsed(),
            },
            "valence" if item.valence.is_none() => match Valence::parse(value) {
                Some(v) => item.valence = Some(v),
                None => return unparsed(),
            },
            "flag" => {
                item.flags.insert(value.to_ascii_uppercase());
            }
            _ => return unparsed(),
        }
    }
    item
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn salience_listing_examples() {
        let items = parse_salience(
            "# SALIENCE.md\n\
             - Project X: HIGH importance, positive valence\n\
             - User preference for concise responses: STRONG signal\n\
             - Previous failure on financial advice: CAUTION flag\n",
        );
        assert_eq!(items.len(), 3);
        assert_eq!(items[0].salience_level, Some(SalienceLevel::High));
        assert_eq!(items[0].valence, Some(Valence::Positive));
        assert!(items[0].flags.is_empty());

        assert!(items[1].is_unparsed());
        assert_eq!(items[1].salience_level, None);

        assert_eq!(items[2].salience_level, None);
        assert_eq!(
            items[2].flags,
            BTreeSet::from(["CAUTION".to_string()])
        );
    }

    #[test]
    fn salience_empty_and_full_grammar() {
        assert!(parse_salience("").is_empty());
        let items = parse_salience("- Deadline: medium importance, negative valence, URGENT flag");
        assert_eq!(items[0].salience_level, Some(SalienceLevel::Medium));
        assert_eq!(items[0].valence, Some(Valence::Negative));
        assert!(items[0].flags.contains("URGENT"));
        let items = parse_salience("- no colon here\n- X: EXTREME importance");
        assert!(items.iter().all(AnchorItem::is_unparsed));
    }

    #[test]
    fn non_salience_anchors_never_carry_levels() {
        let doc = parse(AnchorKind::Procedures, "- Alpha: HIGH importance").unwrap();
        assert_eq!(doc.items[0].salience_level, None);
        assert!(doc.items[0].flags.is_empty());
    }

    #[test]
    fn identity_markers_are_strict() {
        let text = "# IDENTITY_HASH.md\nCore values: [honesty, helpfulness, curiosity]\n\
                    Style markers: [concise, technical, warm]\n\
                    Red lines: [no deception, no harm, acknowledge uncertainty]\n";
        let doc = parse(AnchorKind::IdentityHashFile, text).unwrap();
        assert_eq!(doc.items.len(), 3);
        let err = parse(AnchorKind::IdentityHashFile, "Core values: [honesty\n").unwrap_err();
        assert!(matches!(err, AnchorError::Parse { line: 1, .. }));
        let err = parse(AnchorKind::IdentityHashFile, "# ok\n\nfree prose\n").unwrap_err();
        assert!(matches!(err, AnchorError::Parse { line: 3, .. }));
    }

    fn line_strategy() -> impl Strategy<Value = String> {
        prop_oneof![
            "[A-Za-z ]{0,20}".prop_map(|s| s),
            "[A-Za-z ]{1,12}".prop_map(|s| format!("# {s}")),
            "[A-Za-z ]{1,12}".prop_map(|s| format!("- {s}: HIGH importance, positive valence")),
            "[A-Za-z ]{1,12}".prop_map(|s| format!("  * {s}: CAUTION flag")),
            "[A-Za-z ]{1,12}".prop_map(|s| format!("Core values: [{s}]")),
        ]
    }

    proptest! {
        #[test]
        fn serialize_parse_round_trip(
            lines in proptest::collection::vec(line_strategy(), 0..20),
            trailing_newline in any::<bool>(),
        ) {
            let mut text = lines.join("\n");
            if trailing_newline {
                text.push('\n');
            }
            for kind in [
                AnchorKind::Soul,
                AnchorKind::Procedures,
                AnchorKind::Salience,
                AnchorKind::Relations,
            ] {
                let doc = parse(kind, &text).unwrap();
                let out = doc.serialize();
            prop_assert_eq!(out.trim_end(), text.trim_end());
            }
            let marker_only: Vec<_> = lines
                .iter()
                .filter(|l| l.starts_with('#') || is_marker_line(l.trim()) || l.trim().is_empty()
                    || bullet_split(l).is_some())
                .cloned()
                .collect();
            let text = marker_only.join("\n");
            let doc = parse(AnchorKind::IdentityHashFile, &text).unwrap();
            let out = doc.serialize();
            prop_assert_eq!(out.trim_end(), text.trim_end());
        }
    }
}
