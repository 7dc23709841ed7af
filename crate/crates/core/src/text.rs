//! Tokenization and token-budget estimation shared by the embedder,
//! the context assembler, and the divergence estimator.

/// Multiplier applied to whitespace-token counts when estimating model tokens.
pub const TOKENS_PER_WORD: f64 = 1.3;

/// Whitespace tokens, lowercased and stripped of surrounding punctuation.
/// Tokens that are pure punctuation are dropped.
pub fn normalized_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().filter_map(|raw| {
        let trimmed = raw.trim_matches(|c: char| !c.is_alphanumeric());
        if trimmed.is_empty() {
            None
        } else {
            Some(trimmed.to_lowercase())
        }
    })
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Estimated model tokens for `words` whitespace tokens: `ceil(words * 1.3)`.
pub fn tokens_for_words(words: usize) -> usize {
    // integer form of ceil(words * 13 / 10)
    (words * 13).div_ceil(10)
}

pub fn estimate_tokens(text: &str) -> usize {
    tokens_for_words(word_count(text))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_strips_punctuation_and_case() {
        let toks: Vec<_> = normalized_tokens("What's my NAME? -- ok.").collect();
        assert_eq!(toks, vec!["what's", "my", "name", "ok"]);
    }

    #[test]
    fn token_estimate_rounds_up() {
        assert_eq!(tokens_for_words(0), 0);
        assert_eq!(tokens_for_words(1), 2);
        assert_eq!(tokens_for_words(10), 13);
        assert_eq!(estimate_tokens("a b c"), 4);
        assert!((tokens_for_words(7) as f64) >= 7.0 * TOKENS_PER_WORD);
    }
}
