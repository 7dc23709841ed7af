use std::sync::OnceLock;

use regex::Regex;

use super::{first_basis, normalize_or_first_basis, BackendError, LlmBackend};
use crate::text::normalized_tokens;

pub const DEFAULT_MOCK_SEED: u64 = 0x5EED_A9C4_0B5E_D001;

/// Substrings (matched lowercase) that make the mock classifier call a query
/// exhaustive.
pub const EXHAUSTIVE_KEYWORDS: [&str; 6] = [
    "everything",
    "all of",
    "patterns",
    "summarize",
    "across our",
    "overall",
];

const ECHO_MARKER: &str = "ECHO:";
const MOCK_PREFIX_CHARS: usize = 64;

/// Deterministic offline backend.
///
/// * `generate`: text after the first `ECHO:` marker, otherwise
///   `MOCK(<first 64 chars of prompt>)`.
/// * `classify_exhaustive`: 1.0 if any of [`EXHAUSTIVE_KEYWORDS`] occurs.
/// * `summarize`: `SUM[<ids>]` listing every entry id found in the chunk.
/// * `embed`: signed random projection of hashed tokens, L2-normalized.
///
/// Holds no mutable state; every method is a pure function of its inputs.
#[derive(Debug, Clone)]
pub struct MockBackend {
    embed_dim: usize,
    seed: u64,
}

impl MockBackend {
    pub fn new(embed_dim: usize) -> Self {
        Self::with_seed(embed_dim, DEFAULT_MOCK_SEED)
    }

    pub fn with_seed(embed_dim: usize, seed: u64) -> Self {
        assert!(embed_dim >= super::MIN_EMBED_DIM, "embed_dim too small");
        Self { embed_dim, seed }
    }

    fn token_axis_signs(&self, token: &str, out: &mut [f64]) {
        let mut state = fnv1a64(token.as_bytes()) ^ self.seed;
        let mut word = 0u64;
        for (i, slot) in out.iter_mut().enumerate() {
            if i % 64 == 0 {
                word = splitmix64(&mut state);
            }
            let bit = (word >> (i % 64)) & 1;
            *slot += if bit == 1 { 1.0 } else { -1.0 };
        }
    }
}

impl LlmBackend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn generate(&self, prompt: &str, _max_tokens: usize) -> Result<String, BackendError> {
        if prompt.is_empty() {
            return Err(BackendError::EmptyPrompt);
        }
        if let Some(pos) = prompt.find(ECHO_MARKER) {
            let suffix = prompt[pos + ECHO_MARKER.len()..].trim();
            if !suffix.is_empty() {
                return Ok(suffix.to_string());
            }
        }
        let head: String = prompt.chars().take(MOCK_PREFIX_CHARS).collect();
        Ok(format!("MOCK({head})"))
    }

    fn classify_exhaustive(&self, query: &str) -> Result<f64, BackendError> {
        if query.is_empty() {
            return Err(BackendError::EmptyPrompt);
        }
        let lower = query.to_lowercase();
        let hit = EXHAUSTIVE_KEYWORDS.iter().any(|kw| lower.contains(kw));
        Ok(if hit { 1.0 } else { 0.0 })
    }

    fn summarize(&self, query: &str, chunk: &str) -> Result<String, BackendError> {
        if query.is_empty() {
            return Err(BackendError::EmptyPrompt);
        }
        let ids = entry_ids_in(chunk);
        let joined = ids
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(",");
        Ok(format!("SUM[{joined}]"))
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let mut acc = vec![0.0; self.embed_dim];
        let mut any = false;
        for token in normalized_tokens(text) {
            self.token_axis_signs(&token, &mut acc);
            any = true;
        }
        if !any {
            return Ok(first_basis(self.embed_dim));
        }
        Ok(normalize_or_first_basis(acc))
    }
}

/// Entry ids mentioned in a chunk, in order of first appearance.
///
/// Recognizes memory-log headers (`entry=<n>`) and prior summaries
/// (`SUM[<n>,<n>,...]`).
pub(crate) fn entry_ids_in(chunk: &str) -> Vec<u64> {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    let re = PATTERN.get_or_init(|| {
        Regex::new(r"entry=(\d+)|SUM\[([0-9,]*)\]").expect("static regex")
    });
    let mut seen = std::collections::HashSet::new();
    let mut ids = Vec::new();
    let mut push = |id: u64| {
        if seen.insert(id) {
            ids.push(id);
        }
    };
    for caps in re.captures_iter(chunk) {
        if let Some(single) = caps.get(1) {
            if let Ok(id) = single.as_str().parse() {
                push(id);
            }
        } else if let Some(list) = caps.get(2) {
            for part in list.as_str().split(',').filter(|p| !p.is_empty()) {
                if let Ok(id) = part.parse() {
                    push(id);
                }
            }
        }
    }
    ids
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
