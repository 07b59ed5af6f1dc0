//! Shared text utilities: the single whitespace tokenizer, sentence
//! splitting, and the normalization used for deduplication.
//!
//! Every component that compares or hashes text goes through these
//! functions so that tokenization differences can never skew a metric
//! or a reward against its oracle.

/// Lowercased word tokens. Splits on whitespace, then trims any
/// non-alphanumeric characters from both ends of each piece.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// Splits text into sentences on '.', '!' or '?' followed by whitespace
/// or end of input. The terminator is dropped; sentences are trimmed and
/// empty pieces are skipped. "1.5 cm" stays intact because the period is
/// followed by a digit.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut current = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let at_boundary = match chars.peek() {
                None => true,
                Some(next) => next.is_whitespace(),
            };
            if at_boundary {
                push_sentence(&mut sentences, &mut current);
                continue;
            }
        }
        current.push(c);
    }
    push_sentence(&mut sentences, &mut current);
    sentences
}

fn push_sentence(out: &mut Vec<String>, buf: &mut String) {
    let trimmed = buf.trim();
    if !trimmed.is_empty() {
        out.push(trimmed.to_string());
    }
    buf.clear();
}

/// Normalization used for duplicate detection and fingerprinting:
/// casefold, collapse internal whitespace, strip terminal punctuation.
pub fn normalize_for_dedup(text: &str) -> String {
    let lowered = text.to_lowercase();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_end_matches(|c: char| matches!(c, '.' | '!' | '?'))
        .trim_end()
        .to_string()
}

/// Sentence terminator token used in policy sequences.
pub const PERIOD_TOKEN: &str = ".";

/// Tokens for the generation policy: the words of each sentence followed
/// by an explicit "." terminator token. A report without a final period
/// still gets one, so token-level and text-level sentence counts agree.
pub fn policy_tokens(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for sentence in split_sentences(text) {
        let words = tokenize(&sentence);
        if words.is_empty() {
            continue;
        }
        tokens.extend(words);
        tokens.push(PERIOD_TOKEN.to_string());
    }
    tokens
}

/// Inverse of [`policy_tokens`] up to casing: words joined by single
/// spaces, "." attached to the preceding word.
pub fn detokenize(tokens: &[String]) -> String {
    let mut out = String::new();
    for token in tokens {
        if token == PERIOD_TOKEN {
            out.push('.');
        } else {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(token);
        }
    }
    out
}
