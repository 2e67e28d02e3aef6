use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{guess_nouns, Token, Tokenizer};

/// An encoded prompt together with the nouns the pipeline reasons about.
///
/// The object of interest may span several tokens after a proxy word has been
/// substituted in; `object_token_pos` is the first of them and
/// `object_token_len` their count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub text: String,
    pub tokens: Vec<Token>,
    pub object_token_pos: usize,
    #[serde(default = "one")]
    pub object_token_len: usize,
    pub noun_positions: Vec<usize>,
    #[serde(default)]
    pub preserve_nouns: Vec<usize>,
}

fn one() -> usize {
    1
}

impl PromptSpec {
    pub fn new(
        text: impl Into<String>,
        tokens: Vec<Token>,
        object_token_pos: usize,
        mut noun_positions: Vec<usize>,
        mut preserve_nouns: Vec<usize>,
    ) -> Result<Self> {
        noun_positions.sort_unstable();
        noun_positions.dedup();
        preserve_nouns.sort_unstable();
        preserve_nouns.dedup();
        let spec = Self {
            text: text.into(),
            tokens,
            object_token_pos,
            object_token_len: 1,
            noun_positions,
            preserve_nouns,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Encodes `text` and locates the object word, the nouns and the nouns to
    /// preserve. When `nouns` is `None` the naive tagger from
    /// [`guess_nouns`] is used and the object word is added if it missed it.
    pub fn parse(
        tokenizer: &dyn Tokenizer,
        text: &str,
        object_word: &str,
        nouns: Option<&[&str]>,
        preserve: &[&str],
    ) -> Result<Self> {
        let tokens = tokenizer.encode(text);
        if tokens.len() > tokenizer.context_length() {
            return Err(Error::InvalidPrompt(format!(
                "{} tokens exceed the context length {}",
                tokens.len(),
                tokenizer.context_length()
            )));
        }
        let locate = |word: &str| {
            find_word(text, &tokens, word)
                .ok_or_else(|| Error::InvalidPrompt(format!("word {word:?} not found in {text:?}")))
        };
        let (object_pos, object_len) = locate(object_word)?;
        let mut noun_positions = match nouns {
            Some(words) => words
                .iter()
                .map(|w| locate(w).map(|(p, _)| p))
                .collect::<Result<Vec<_>>>()?,
            None => guess_nouns(&tokens),
        };
        // The tagger (or the caller) may list a token inside a multi-token object span.
        noun_positions.retain(|&p| p < object_pos || p >= object_pos + object_len);
        noun_positions.push(object_pos);
        let preserve_nouns = preserve
            .iter()
            .map(|w| locate(w).map(|(p, _)| p))
            .collect::<Result<Vec<_>>>()?;
        for p in &preserve_nouns {
            if !noun_positions.contains(p) {
                noun_positions.push(*p);
            }
        }
        noun_positions.sort_unstable();
        noun_positions.dedup();

        let mut spec = Self {
            text: text.to_string(),
            tokens,
            object_token_pos: object_pos,
            object_token_len: object_len,
            noun_positions,
            preserve_nouns,
        };
        spec.preserve_nouns.sort_unstable();
        spec.preserve_nouns.dedup();
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidPrompt(msg));
        let n = self.tokens.len();
        if n == 0 {
            return bad("prompt has no tokens".into());
        }
        if self.object_token_len == 0 || self.object_token_pos + self.object_token_len > n {
            return bad(format!(
                "object span {}+{} exceeds {} tokens",
                self.object_token_pos, self.object_token_len, n
            ));
        }
        if let Some(p) = self
            .noun_positions
            .iter()
            .chain(&self.preserve_nouns)
            .find(|&&p| p >= n)
        {
            return bad(format!("token position {p} out of range ({n} tokens)"));
        }
        if !self.noun_positions.contains(&self.object_token_pos) {
            return bad("object token is not among the nouns".into());
        }
        if let Some(p) = self
            .preserve_nouns
            .iter()
            .find(|p| !self.noun_positions.contains(p))
        {
            return bad(format!("preserved token {p} is not a noun"));
        }
        if self.preserve_nouns.contains(&self.object_token_pos) {
            return bad("the object of interest cannot also be preserved".into());
        }
        Ok(())
    }

    pub fn token_ids(&self) -> Vec<u32> {
        self.tokens.iter().map(|t| t.id).collect()
    }

    pub fn object_span(&self) -> std::ops::Range<usize> {
        self.object_token_pos..self.object_token_pos + self.object_token_len
    }

    /// Source text of the object of interest.
    pub fn object_word(&self) -> &str {
        let span = self.object_span();
        &self.text[self.tokens[span.start].start..self.tokens[span.end - 1].end]
    }

    /// Index of `pos` within `noun_positions`.
    pub fn noun_slot(&self, pos: usize) -> Option<usize> {
        self.noun_positions.iter().position(|&p| p == pos)
    }

    /// Text of the noun in `slot`, covering the whole object span for the
    /// object of interest.
    pub fn slot_word(&self, slot: usize) -> Option<String> {
        let pos = *self.noun_positions.get(slot)?;
        if pos == self.object_token_pos {
            Some(self.object_word().to_lowercase())
        } else {
            Some(self.tokens[pos].piece.clone())
        }
    }

    /// Token positions belonging to the noun in `slot`.
    pub fn slot_tokens(&self, slot: usize) -> Option<std::ops::Range<usize>> {
        let pos = *self.noun_positions.get(slot)?;
        Some(if pos == self.object_token_pos {
            self.object_span()
        } else {
            pos..pos + 1
        })
    }

    /// Replaces the object word with `replacement` and re-tokenizes, keeping
    /// every other noun pointed at the same word.
    pub fn with_object_replaced(
        &self,
        tokenizer: &dyn Tokenizer,
        replacement: &str,
    ) -> Result<Self> {
        let replacement = replacement.trim();
        if replacement.is_empty() {
            return Err(Error::UnknownWord(replacement.to_string()));
        }
        let span = self.object_span();
        let start = self.tokens[span.start].start;
        let end = self.tokens[span.end - 1].end;
        let text = format!(
            "{}{}{}",
            &self.text[..start],
            replacement,
            &self.text[end..]
        );
        let tokens = tokenizer.encode(&text);
        let repl_end = start + replacement.len();
        let new_len = tokens
            .iter()
            .filter(|t| t.start >= start && t.end <= repl_end)
            .count();
        if new_len == 0 {
            return Err(Error::UnknownWord(replacement.to_string()));
        }
        let prefix_ok = tokens.len() >= span.start
            && tokens[..span.start]
                .iter()
                .zip(&self.tokens[..span.start])
                .all(|(a, b)| a.id == b.id);
        let suffix_old = &self.tokens[span.end..];
        let suffix_ok = tokens.len() == span.start + new_len + suffix_old.len()
            && tokens[span.start + new_len..]
                .iter()
                .zip(suffix_old)
                .all(|(a, b)| a.id == b.id);
        if !prefix_ok || !suffix_ok {
            return Err(Error::InvalidPrompt(format!(
                "substituting {replacement:?} changed the surrounding tokens of {:?}",
                self.text
            )));
        }
        if tokens.len() > tokenizer.context_length() {
            return Err(Error::InvalidPrompt(
                "substituted prompt exceeds the context length".into(),
            ));
        }
        let shift = |p: usize| {
            if p < span.start {
                p
            } else if p == span.start {
                p
            } else {
                p + new_len - span.len()
            }
        };
        let spec = Self {
            text,
            tokens,
            object_token_pos: span.start,
            object_token_len: new_len,
            noun_positions: self.noun_positions.iter().map(|&p| shift(p)).collect(),
            preserve_nouns: self.preserve_nouns.iter().map(|&p| shift(p)).collect(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Makes the noun at token position `pos` the object of interest. It is
    /// removed from the preserved set if it was there.
    pub fn with_object_at(&self, pos: usize) -> Result<Self> {
        if !self.noun_positions.contains(&pos) {
            return Err(Error::UnknownNoun(pos));
        }
        let mut spec = self.clone();
        if pos != self.object_token_pos {
            spec.object_token_pos = pos;
            spec.object_token_len = 1;
        }
        spec.preserve_nouns.retain(|&p| p != pos);
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_preserved(&self, preserve: Vec<usize>) -> Result<Self> {
        let mut spec = self.clone();
        spec.preserve_nouns = preserve;
        spec.preserve_nouns.sort_unstable();
        spec.preserve_nouns.dedup();
        spec.validate()?;
        Ok(spec)
    }
}

/// Finds the first whole-word, case-insensitive occurrence of `word` whose
/// bytes are exactly covered by consecutive tokens. Returns (first token, count).
pub fn find_word(text: &str, tokens: &[Token], word: &str) -> Option<(usize, usize)> {
    let needle = word.trim().to_lowercase();
    if needle.is_empty() {
        return None;
    }
    let haystack = text.to_lowercase();
    // Lower-casing can change byte lengths for some scripts; fall back to token pieces then.
    if haystack.len() == text.len() {
        let mut from = 0;
        while let Some(off) = haystack[from..].find(&needle) {
            let s = from + off;
            let e = s + needle.len();
            if let Some(first) = tokens.iter().position(|t| t.start == s) {
                if let Some(last) = tokens[first..].iter().position(|t| t.end == e) {
                    return Some((first, last + 1));
                }
            }
            from = s + 1;
        }
    }
    tokens
        .iter()
        .position(|t| t.piece == needle)
        .map(|p| (p, 1))
}
