//! Rule-based sentence segmentation and the hashing tokenizer.
//!
//! A boundary is a terminator (`.`, `!` or `?`), optionally followed by
//! closing quotes or brackets, then whitespace, then an uppercase letter or a
//! digit. Known abbreviations and terminators between two digits never end a
//! sentence.

use serde::Serialize;
use thiserror::Error;

use crate::hash::fnv1a64;

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
/// Reserved; the hashing tokenizer never emits it.
pub const UNK: u32 = 3;
/// First id available to hashed tokens.
pub const FIRST_TOKEN_ID: u32 = 4;

pub const DEFAULT_K_MAX: usize = 128;
pub const DEFAULT_T_MAX: usize = 64;
pub const DEFAULT_V_BUCKETS: usize = 32_768;

const ABBREVIATIONS: &[&str] = &[
    "Fig.", "No.", "U.S.", "e.g.", "i.e.", "et al.", "vs.", "etc.",
];

const CLOSERS: &[char] = &['"', '\'', ')', ']', '}', '\u{201d}', '\u{2019}', '\u{bb}'];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SegmentError {
    #[error("text has no non-whitespace character")]
    EmptyText,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Sentence {
    pub text: String,
    /// Byte offsets `[start, end)` into the source text.
    pub span: (usize, usize),
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

fn ends_with_abbreviation(prefix: &str) -> bool {
    ABBREVIATIONS.iter().any(|abbr| {
        prefix.strip_suffix(abbr).is_some_and(|before| {
            before
                .chars()
                .next_back()
                .is_none_or(|c| !c.is_alphanumeric())
        })
    })
}

/// Byte offset just past the boundary starting at terminator `i`, if any.
fn boundary_end(text: &str, chars: &[(usize, char)], i: usize) -> Option<usize> {
    let (pos, c) = chars[i];
    if !is_terminator(c) {
        return None;
    }
    let prev_digit = i > 0 && chars[i - 1].1.is_ascii_digit();
    let next_digit = chars.get(i + 1).is_some_and(|&(_, n)| n.is_ascii_digit());
    if prev_digit && next_digit {
        return None;
    }
    if c == '.' && ends_with_abbreviation(&text[..pos + 1]) {
        return None;
    }
    let mut j = i + 1;
    while chars.get(j).is_some_and(|&(_, n)| CLOSERS.contains(&n)) {
        j += 1;
    }
    let end = chars.get(j).map_or(text.len(), |&(p, _)| p);
    let mut ws = j;
    while chars.get(ws).is_some_and(|&(_, n)| n.is_whitespace()) {
        ws += 1;
    }
    if ws == j {
        return None;
    }
    let (_, next) = *chars.get(ws)?;
    (next.is_uppercase() || next.is_ascii_digit()).then_some(end)
}

fn push_trimmed(text: &str, start: usize, end: usize, out: &mut Vec<Sentence>) {
    let piece = &text[start..end];
    let trimmed = piece.trim();
    if trimmed.is_empty() {
        return;
    }
    let lead = piece.len() - piece.trim_start().len();
    let s = start + lead;
    out.push(Sentence {
        text: trimmed.to_string(),
        span: (s, s + trimmed.len()),
    });
}

/// Splits `text` into at most `k_max` sentences.
pub fn segment(text: &str, k_max: usize) -> Result<Vec<Sentence>, SegmentError> {
    if text.trim().is_empty() {
        return Err(SegmentError::EmptyText);
    }
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut sentences = Vec::new();
    let mut start = 0;
    for i in 0..chars.len() {
        if chars[i].0 < start {
            continue;
        }
        if let Some(end) = boundary_end(text, &chars, i) {
            push_trimmed(text, start, end, &mut sentences);
            start = end;
            if sentences.len() >= k_max {
                break;
            }
        }
    }
    if sentences.len() < k_max {
        push_trimmed(text, start, text.len(), &mut sentences);
    }
    sentences.truncate(k_max);
    Ok(sentences)
}

/// Token ids of one sentence: `[CLS, interior.., SEP]`, never padded.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    /// Wraps raw ids, checking the CLS/SEP framing and the interior range.
    pub fn from_ids(ids: Vec<u32>) -> Option<Self> {
        let framed = ids.len() >= 3 && ids[0] == CLS && ids[ids.len() - 1] == SEP;
        let interior_ok = framed && ids[1..ids.len() - 1].iter().all(|&t| t >= FIRST_TOKEN_ID);
        (framed && interior_ok).then_some(Self(ids))
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Maps a lowercased word piece to its hashed id.
pub fn token_id(token: &str, v_buckets: usize) -> u32 {
    FIRST_TOKEN_ID + (fnv1a64(token.as_bytes()) % v_buckets as u64) as u32
}

/// Whitespace split with leading and trailing punctuation detached, one
/// character per punctuation token.
pub fn word_pieces(sentence: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in sentence.to_lowercase().split_whitespace() {
        let chars: Vec<char> = word.chars().collect();
        let lead = chars.iter().take_while(|c| !c.is_alphanumeric()).count();
        if lead == chars.len() {
            out.extend(chars.iter().map(|c| c.to_string()));
            continue;
        }
        let trail = chars
            .iter()
            .rev()
            .take_while(|c| !c.is_alphanumeric())
            .count();
        out.extend(chars[..lead].iter().map(|c| c.to_string()));
        out.push(chars[lead..chars.len() - trail].iter().collect());
        out.extend(chars[chars.len() - trail..].iter().map(|c| c.to_string()));
    }
    out
}

pub fn tokenize(sentence: &str, t_max: usize, v_buckets: usize) -> TokenSequence {
    assert!(
        t_max >= 3 && v_buckets >= 1,
        "t_max >= 3 and v_buckets >= 1"
    );
    let mut ids = Vec::with_capacity(t_max);
    ids.push(CLS);
    ids.extend(
        word_pieces(sentence)
            .iter()
            .take(t_max - 2)
            .map(|t| token_id(t, v_buckets)),
    );
    ids.push(SEP);
    TokenSequence(ids)
}

/// Segments and tokenizes a whole document.
pub fn tokenize_document(
    text: &str,
    k_max: usize,
    t_max: usize,
    v_buckets: usize,
) -> Result<Vec<TokenSequence>, SegmentError> {
    Ok(segment(text, k_max)?
        .iter()
        .map(|s| tokenize(&s.text, t_max, v_buckets))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn texts(text: &str) -> Vec<String> {
        segment(text, DEFAULT_K_MAX)
            .unwrap()
            .into_iter()
            .map(|s| s.text)
            .collect()
    }

    #[test]
    fn basic_boundary() {
        assert_eq!(texts("This is A. This is B."), ["This is A.", "This is B."]);
    }

    #[test]
    fn abbreviations_do_not_split() {
        assert_eq!(texts("See Fig. 2 for details.").len(), 1);
        assert_eq!(texts("Filed in the U.S. Patent Office.").len(), 1);
        assert_eq!(texts("Smith et al. Showed it.").len(), 1);
        // "Config." is not "Fig." because the abbreviation must start a word.
        assert_eq!(texts("See Config. Then go.").len(), 2);
    }

    #[test]
    fn decimals_do_not_split() {
        assert_eq!(
            texts("Accuracy was 3.14 percent."),
            ["Accuracy was 3.14 percent."]
        );
    }

    #[test]
    fn closing_quote_stays_with_sentence() {
        assert_eq!(
            texts("He said \"stop.\" Then left."),
            ["He said \"stop.\"", "Then left."]
        );
    }

    #[test]
    fn lowercase_continuation_does_not_split() {
        assert_eq!(
            texts("It ends. then continues."),
            ["It ends. then continues."]
        );
    }

    #[test]
    fn k_max_truncates_tail() {
        let s = segment("A. B. C. D.", 2).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].text, "B.");
    }

    #[test]
    fn empty_text_is_an_error() {
        assert_eq!(segment("  \n\t", 4), Err(SegmentError::EmptyText));
    }

    #[test]
    fn spans_index_source() {
        let text = "  First one!  Second?  ";
        for s in segment(text, 8).unwrap() {
            assert_eq!(&text[s.span.0..s.span.1], s.text);
        }
    }

    #[test]
    fn tokenize_examples() {
        let seq = tokenize("A cat.", 64, DEFAULT_V_BUCKETS);
        assert_eq!(seq.ids(), &[CLS, 27_792, 9_003, 2_997, SEP]);
        assert_eq!(
            seq.ids(),
            &[
                CLS,
                token_id("a", DEFAULT_V_BUCKETS),
                token_id("cat", DEFAULT_V_BUCKETS),
                token_id(".", DEFAULT_V_BUCKETS),
                SEP
            ]
        );
        let seq = tokenize("cat cat", 64, 7);
        assert_eq!(seq.ids()[1], seq.ids()[2]);

        let long: Vec<String> = (0..100).map(|i| format!("w{i}")).collect();
        let seq = tokenize(&long.join(" "), 10, 97);
        assert_eq!(seq.len(), 10);
        assert_eq!(seq.ids()[8], token_id("w7", 97));
        assert_eq!(seq.ids()[9], SEP);
    }

    #[test]
    fn word_pieces_detach_edge_punctuation() {
        assert_eq!(
            word_pieces("(Hello), 3.14 -- e.g."),
            ["(", "hello", ")", ",", "3.14", "-", "-", "e.g", "."]
        );
    }

    proptest! {
        #[test]
        fn segment_bounds_and_stability(text in "[A-Za-z0-9 .!?\"()]{1,200}", k_max in 1usize..6) {
            prop_assume!(!text.trim().is_empty());
            let sentences = segment(&text, k_max).unwrap();
            prop_assert!(!sentences.is_empty() && sentences.len() <= k_max);
            let mut last_end = 0;
            for s in &sentences {
                prop_assert!(s.span.0 >= last_end);
                last_end = s.span.1;
                prop_assert_eq!(&text[s.span.0..s.span.1], s.text.as_str());
                let again = segment(&s.text, k_max).unwrap();
                prop_assert_eq!(again.len(), 1);
                prop_assert_eq!(&again[0].text, &s.text);
            }
        }

        #[test]
        fn token_sequence_bounds(text in "\\PC{1,120}", t_max in 3usize..20, v in 1usize..50) {
            prop_assume!(!text.trim().is_empty());
            let seq = tokenize(&text, t_max, v);
            prop_assert!(seq.len() >= 3 && seq.len() <= t_max);
            prop_assert!(TokenSequence::from_ids(seq.ids().to_vec()).is_some());
        }
    }
}
