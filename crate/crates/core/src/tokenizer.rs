//! Text tokenization.
//!
//! Token positions index the columns of cross-attention maps, so every
//! component that reasons about "the word w" does so through the tokenizer of
//! the backend that produced the maps.

use serde::{Deserialize, Serialize};

/// One token of an encoded prompt, with its byte span in the source text.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub id: u32,
    pub piece: String,
    pub start: usize,
    pub end: usize,
}

pub trait Tokenizer: Send + Sync {
    /// Encodes `text` without special (start/end/padding) tokens.
    fn encode(&self, text: &str) -> Vec<Token>;

    /// Maximum number of content tokens a prompt may hold.
    fn context_length(&self) -> usize {
        75
    }
}

/// Lower-cased word-level tokenizer: runs of alphanumerics (and apostrophes)
/// form one token, any other non-space character is a token of its own.
#[derive(Clone, Copy, Debug, Default)]
pub struct WordTokenizer;

impl WordTokenizer {
    pub fn token_id(piece: &str) -> u32 {
        // FNV-1a, masked to keep ids positive in every consumer.
        let mut hash: u32 = 0x811c_9dc5;
        for b in piece.bytes() {
            hash ^= u32::from(b);
            hash = hash.wrapping_mul(0x0100_0193);
        }
        hash & 0x7fff_ffff
    }
}

impl Tokenizer for WordTokenizer {
    fn encode(&self, text: &str) -> Vec<Token> {
        let mut tokens = Vec::new();
        let mut word_start: Option<usize> = None;
        let is_word = |c: char| c.is_alphanumeric() || c == '\'';

        let push = |start: usize, end: usize, tokens: &mut Vec<Token>| {
            let piece = text[start..end].to_lowercase();
            tokens.push(Token {
                id: Self::token_id(&piece),
                piece,
                start,
                end,
            });
        };

        for (i, c) in text.char_indices() {
            if is_word(c) {
                word_start.get_or_insert(i);
                continue;
            }
            if let Some(s) = word_start.take() {
                push(s, i, &mut tokens);
            }
            if !c.is_whitespace() {
                push(i, i + c.len_utf8(), &mut tokens);
            }
        }
        if let Some(s) = word_start {
            push(s, text.len(), &mut tokens);
        }
        tokens
    }
}

const NON_NOUNS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "some", "any", "two", "three", "four",
    "one", "several", "many", "with", "on", "in", "at", "of", "by", "for", "from", "to", "into",
    "onto", "under", "over", "near", "next", "behind", "beside", "and", "or", "but", "it", "its",
    "is", "are", "was", "be", "being", "has", "have", "sitting", "standing", "lying", "full",
    "big", "small", "large", "little", "red", "green", "blue", "yellow", "black", "white", "brown",
    "orange", "pink", "purple", "gray", "grey", "golden", "wooden", "luxury", "old", "new",
    "photo", "picture", "image", "top", "front",
];

/// Guesses which tokens are nouns. Intentionally naive: it only filters out
/// punctuation and a fixed list of function words and adjectives. Callers that
/// know the nouns should pass them explicitly.
pub fn guess_nouns(tokens: &[Token]) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| t.piece.chars().all(char::is_alphabetic))
        .filter(|(_, t)| !NON_NOUNS.contains(&t.piece.as_str()))
        .map(|(i, _)| i)
        .collect()
}
