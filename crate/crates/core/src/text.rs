//! Text normalization and token-sort similarity.
//!
//! Normalization casefolds, replaces every non-alphanumeric character with a
//! separator and collapses runs of separators. Similarity between two strings
//! is `1 - levenshtein / max_len` computed over their sorted-token forms.

/// A normalized token with its character span in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Splits `text` into normalized tokens, tracking character offsets.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut start = 0;
    let mut pos = 0;
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            if current.is_empty() {
                start = pos;
            }
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(Token {
                text: std::mem::take(&mut current),
                start,
                end: pos,
            });
        }
        pos += 1;
    }
    if !current.is_empty() {
        tokens.push(Token {
            text: current,
            start,
            end: pos,
        });
    }
    tokens
}

pub fn normalize(text: &str) -> String {
    tokenize(text).into_iter().map(|t| t.text).collect::<Vec<_>>().join(" ")
}

/// Sorted-token form of a token sequence.
pub fn sort_key<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut sorted: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
    sorted.sort_unstable();
    sorted.join(" ")
}

/// Sorted-token form of raw text.
pub fn token_sort_key(text: &str) -> String {
    let tokens: Vec<String> = tokenize(text).into_iter().map(|t| t.text).collect();
    sort_key(&tokens)
}

/// Parses a release-year token.
pub fn parse_year(token: &str) -> Option<u16> {
    if token.len() != 4 || !token.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let year: u16 = token.parse().ok()?;
    (1870..=2100).contains(&year).then_some(year)
}

/// Splits a trailing year token off a normalized token list. The list must
/// keep at least one other token for the year to be treated as such.
pub fn split_trailing_year<S: AsRef<str>>(tokens: &[S]) -> (&[S], Option<u16>) {
    match tokens.split_last() {
        Some((last, rest)) if !rest.is_empty() => match parse_year(last.as_ref()) {
            Some(year) => (rest, Some(year)),
            None => (tokens, None),
        },
        _ => (tokens, None),
    }
}

/// Finds any year token in normalized text.
pub fn find_year(text: &str) -> Option<u16> {
    tokenize(text).iter().rev().find_map(|t| parse_year(&t.text))
}

/// Levenshtein distance over Unicode scalar values, two-row dynamic program.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let substitution = prev[j] + usize::from(ca != cb);
            curr[j + 1] = substitution.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Hashed character histogram; gives a cheap lower bound on edit distance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharProfile {
    counts: [u16; 64],
    len: usize,
}

impl CharProfile {
    pub fn new(s: &str) -> Self {
        let mut counts = [0u16; 64];
        let mut len = 0;
        for c in s.chars() {
            let slot = &mut counts[(c as u32 % 64) as usize];
            *slot = slot.saturating_add(1);
            len += 1;
        }
        Self { counts, len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Each edit changes at most one surplus and one deficit count, so the
    /// larger of the two totals never exceeds the Levenshtein distance.
    pub fn distance_lower_bound(&self, other: &CharProfile) -> usize {
        let (mut surplus, mut deficit) = (0usize, 0usize);
        for (&a, &b) in self.counts.iter().zip(&other.counts) {
            if a > b {
                surplus += (a - b) as usize;
            } else {
                deficit += (b - a) as usize;
            }
        }
        surplus.max(deficit)
    }

    /// Upper bound on [`key_similarity`] of the two profiled strings.
    pub fn similarity_upper_bound(&self, other: &CharProfile) -> f64 {
        let max_len = self.len.max(other.len);
        if max_len == 0 {
            return 0.0;
        }
        1.0 - self.distance_lower_bound(other) as f64 / max_len as f64
    }
}

/// Similarity of two already sorted-token keys in `[0, 1]`.
pub fn key_similarity(a: &str, b: &str) -> f64 {
    if a == b {
        return if a.is_empty() { 0.0 } else { 1.0 };
    }
    let max_len = a.chars().count().max(b.chars().count());
    if max_len == 0 {
        return 0.0;
    }
    1.0 - levenshtein(a, b) as f64 / max_len as f64
}

/// Token-sort similarity of two raw strings.
pub fn token_sort_similarity(a: &str, b: &str) -> f64 {
    key_similarity(&token_sort_key(a), &token_sort_key(b))
}
