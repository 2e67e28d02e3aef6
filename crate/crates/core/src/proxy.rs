//! Proxy words: vocabulary tokens close to the object word in a text
//! embedding space, re-ranked by how little they move the whole prompt.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::prompt::PromptSpec;
use crate::tokenizer::{Tokenizer, WordTokenizer};

pub const DEFAULT_TEMPLATE: &str = "A photo of a {t}";
pub const DEFAULT_CANDIDATES: usize = 100;
pub const DEFAULT_PROXIES: usize = 6;
pub const NORM_TOLERANCE: f64 = 1e-4;

const INDEX_MAGIC: &[u8; 8] = b"PMEIDX01";

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VocabEntry {
    pub token: u32,
    pub display: String,
}

/// A text embedding model with a token vocabulary.
pub trait EmbeddingProvider: Send + Sync {
    /// Unit-norm embedding of `text`.
    fn embed_text(&self, text: &str) -> Result<Vec<f32>>;

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        texts.iter().map(|t| self.embed_text(t)).collect()
    }

    fn vocabulary(&self) -> Result<Vec<VocabEntry>>;

    /// Token ids `word` encodes to; empty when it cannot be encoded.
    fn tokenize(&self, word: &str) -> Result<Vec<u32>>;

    /// Identifies the model and its weights; keys the index cache.
    fn fingerprint(&self) -> String;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyCandidate {
    pub token: u32,
    pub display: String,
    pub context_free_distance: f64,
    /// Set by [`rerank_in_context`].
    pub in_context_distance: Option<f64>,
    pub rank: usize,
}

/// Every vocabulary token embedded through the template.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenIndex {
    fingerprint: String,
    template: String,
    dim: usize,
    entries: Vec<VocabEntry>,
    vectors: Vec<f32>,
}

impl TokenIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn template(&self) -> &str {
        &self.template
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let key = cache_key(&self.fingerprint, &self.template);
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&(key.len() as u32).to_le_bytes())?;
        w.write_all(key.as_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&e.token.to_le_bytes())?;
            w.write_all(&(e.display.len() as u32).to_le_bytes())?;
            w.write_all(e.display.as_bytes())?;
        }
        let block: Vec<u8> = self.vectors.iter().flat_map(|v| v.to_le_bytes()).collect();
        w.write_all(&block)?;
        Ok(())
    }

    /// Reads an index file; `None` when it was built for another provider or template.
    pub fn read_from(r: &mut impl Read, fingerprint: &str, template: &str) -> Result<Option<Self>> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(Error::Format("not a token index".into()));
        }
        let key = String::from_utf8(read_bytes(r)?).map_err(|e| Error::Format(e.to_string()))?;
        if key != cache_key(fingerprint, template) {
            return Ok(None);
        }
        let dim = read_u32(r)? as usize;
        let count = read_u32(r)? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let token = read_u32(r)?;
            let display =
                String::from_utf8(read_bytes(r)?).map_err(|e| Error::Format(e.to_string()))?;
            entries.push(VocabEntry { token, display });
        }
        let mut block = vec![0u8; dim * count * 4];
        r.read_exact(&mut block)?;
        let vectors = block
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Some(Self {
            fingerprint: fingerprint.to_string(),
            template: template.to_string(),
            dim,
            entries,
            vectors,
        }))
    }
}

fn cache_key(fingerprint: &str, template: &str) -> String {
    format!("{fingerprint}\n{template}")
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read) -> Result<Vec<u8>> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(Error::Format("string field too long".into()));
    }
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub fn fill_template(template: &str, word: &str) -> String {
    template.replace("{t}", word)
}

/// Path of the cache file for a provider and template inside `dir`.
pub fn index_cache_path(dir: &Path, fingerprint: &str, template: &str) -> PathBuf {
    let digest = Sha256::digest(cache_key(fingerprint, template).as_bytes());
    let name: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
    dir.join(format!("{name}.idx"))
}

/// Embeds the vocabulary through `template`, reusing the cache in
/// `cache_dir` when it was written for the same provider fingerprint.
pub fn build_token_index(
    provider: &dyn EmbeddingProvider,
    template: &str,
    cache_dir: Option<&Path>,
) -> Result<TokenIndex> {
    let fingerprint = provider.fingerprint();
    let cache = cache_dir.map(|d| index_cache_path(d, &fingerprint, template));
    if let Some(path) = cache.as_ref().filter(|p| p.exists()) {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        match TokenIndex::read_from(&mut file, &fingerprint, template) {
            Ok(Some(index)) => return Ok(index),
            Ok(None) => tracing::info!(path = %path.display(), "index cache is stale, rebuilding"),
            Err(e) => {
                tracing::warn!(path = %path.display(), error = %e, "index cache unreadable, rebuilding")
            }
        }
    }
    let entries = provider.vocabulary()?;
    if entries.is_empty() {
        return Err(Error::Provider("empty vocabulary".into()));
    }
    let texts: Vec<String> = entries
        .iter()
        .map(|e| fill_template(template, &e.display))
        .collect();
    let embedded = provider.embed_batch(&texts)?;
    let dim = embedded.first().map_or(0, Vec::len);
    let mut vectors = Vec::with_capacity(dim * entries.len());
    for v in &embedded {
        check_unit(v, dim)?;
        vectors.extend_from_slice(v);
    }
    let index = TokenIndex {
        fingerprint,
        template: template.to_string(),
        dim,
        entries,
        vectors,
    };
    if let Some(path) = cache {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("idx.tmp");
        let mut file = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        index.write_to(&mut file)?;
        file.into_inner()
            .map_err(|e| Error::Io(e.into_error()))?
            .sync_all()?;
        std::fs::rename(&tmp, &path)?;
    }
    Ok(index)
}

fn check_unit(v: &[f32], dim: usize) -> Result<()> {
    if v.len() != dim || dim == 0 {
        return Err(Error::Provider(format!(
            "embedding of dimension {} (expected {dim})",
            v.len()
        )));
    }
    let norm = v
        .iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt();
    if (norm - 1.0).abs() > NORM_TOLERANCE {
        return Err(Error::Provider(format!("embedding norm {norm} is not 1")));
    }
    Ok(())
}

/// Cosine distance of unit vectors.
pub fn distance(a: &[f32], b: &[f32]) -> f64 {
    1.0 - a
        .iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum::<f64>()
}

/// The `k` vocabulary tokens closest to `template(word)`, excluding the
/// tokens of `word` itself. Ties go to the smaller token id.
pub fn nearest_tokens(
    index: &TokenIndex,
    provider: &dyn EmbeddingProvider,
    word: &str,
    k: usize,
) -> Result<Vec<ProxyCandidate>> {
    if k == 0 {
        return Err(Error::InvalidValue("k must be at least 1".into()));
    }
    let own: HashSet<u32> = provider.tokenize(word)?.into_iter().collect();
    if own.is_empty() {
        return Err(Error::UnknownWord(word.to_string()));
    }
    let query = provider.embed_text(&fill_template(&index.template, word))?;
    check_unit(&query, index.dim)?;
    let mut scored: Vec<(f64, u32, usize)> = index
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| !own.contains(&e.token))
        .map(|(i, e)| (distance(&query, index.vector(i)).max(0.0), e.token, i))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(r, (d, token, i))| ProxyCandidate {
            token,
            display: index.entries[i].display.clone(),
            context_free_distance: d,
            in_context_distance: None,
            rank: r + 1,
        })
        .collect())
}

/// Scores every candidate by the distance between the prompt with the object
/// word replaced by the candidate and the original prompt, and keeps the `m`
/// closest (all of them if there are fewer).
pub fn rerank_in_context(
    provider: &dyn EmbeddingProvider,
    candidates: &[ProxyCandidate],
    prompt: &PromptSpec,
    m: usize,
) -> Result<Vec<ProxyCandidate>> {
    if m == 0 || candidates.is_empty() {
        return Ok(vec![]);
    }
    let original = provider.embed_text(&prompt.text)?;
    let texts: Vec<String> = candidates
        .iter()
        .map(|c| text_with_object(prompt, &c.display))
        .collect();
    let embedded = provider.embed_batch(&texts)?;
    let mut scored: Vec<(f64, &ProxyCandidate)> = embedded
        .iter()
        .zip(candidates)
        .map(|(v, c)| (distance(v, &original).max(0.0), c))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.token.cmp(&b.1.token)));
    Ok(scored
        .into_iter()
        .take(m)
        .enumerate()
        .map(|(r, (d, c))| ProxyCandidate {
            in_context_distance: Some(d),
            rank: r + 1,
            ..c.clone()
        })
        .collect())
}

/// The prompt text with the object word's characters replaced.
pub fn text_with_object(prompt: &PromptSpec, replacement: &str) -> String {
    let span = prompt.object_span();
    let start = prompt.tokens[span.start].start;
    let end = prompt.tokens[span.end - 1].end;
    format!(
        "{}{}{}",
        &prompt.text[..start],
        replacement,
        &prompt.text[end..]
    )
}

/// `nearest_tokens` followed by `rerank_in_context` for the prompt's object word.
pub fn find_proxies(
    index: &TokenIndex,
    provider: &dyn EmbeddingProvider,
    prompt: &PromptSpec,
    k: usize,
    m: usize,
) -> Result<Vec<ProxyCandidate>> {
    let word = prompt.object_word().to_lowercase();
    let candidates = nearest_tokens(index, provider, &word, k)?;
    rerank_in_context(provider, &candidates, prompt, m)
}

/// Deterministic stand-in for a text embedding model.
///
/// Each word gets a seeded Gaussian vector; a text embeds as the normalized
/// sum of its word vectors. Planted words are placed next to an anchor word
/// so tests can predict neighbours.
#[derive(Clone, Debug)]
pub struct FakeEmbedder {
    seed: u64,
    dim: usize,
    vocabulary: Vec<String>,
    planted: BTreeMap<String, Vec<f64>>,
}

impl FakeEmbedder {
    pub fn new(seed: u64, dim: usize, vocabulary: Vec<String>) -> Self {
        Self {
            seed,
            dim,
            vocabulary,
            planted: BTreeMap::new(),
        }
    }

    /// A vocabulary of `size` synthetic words `w0000, w0001, ...` followed by `extra`.
    pub fn generated(seed: u64, dim: usize, size: usize, extra: &[&str]) -> Self {
        let mut vocabulary: Vec<String> = (0..size).map(|i| format!("w{i:04}")).collect();
        vocabulary.extend(extra.iter().map(|s| s.to_string()));
        Self::new(seed, dim, vocabulary)
    }

    /// Places `word` at `(1 - mix)·anchor + mix·own`, renormalized, so small
    /// `mix` makes it a close neighbour of `anchor`.
    pub fn plant(&mut self, word: &str, anchor: &str, mix: f64) {
        let a = self.word_vector(anchor);
        let own = normalized(&raw_vector(self.seed, self.dim, word));
        let v: Vec<f64> = a
            .iter()
            .zip(&own)
            .map(|(x, y)| (1.0 - mix) * x + mix * y)
            .collect();
        self.planted.insert(word.to_lowercase(), normalized(&v));
    }

    pub fn word_vector(&self, word: &str) -> Vec<f64> {
        let w = word.to_lowercase();
        self.planted
            .get(&w)
            .cloned()
            .unwrap_or_else(|| normalized(&raw_vector(self.seed, self.dim, &w)))
    }
}

fn raw_vector(seed: u64, dim: usize, word: &str) -> Vec<f64> {
    let digest = Sha256::digest(format!("{seed}:{word}").as_bytes());
    let mut rng = ChaCha8Rng::from_seed(digest.into());
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

impl EmbeddingProvider for FakeEmbedder {
    fn embed_text(&self, text: &str) -> Result<Vec<f32>> {
        let tokens = WordTokenizer.encode(text);
        if tokens.is_empty() {
            return Err(Error::Provider("cannot embed empty text".into()));
        }
        let mut sum = vec![0.0; self.dim];
        for t in &tokens {
            sum.iter_mut()
                .zip(self.word_vector(&t.piece))
                .for_each(|(s, v)| *s += v);
        }
        Ok(normalized(&sum).into_iter().map(|v| v as f32).collect())
    }

    fn vocabulary(&self) -> Result<Vec<VocabEntry>> {
        Ok(self
            .vocabulary
            .iter()
            .map(|w| VocabEntry {
                token: WordTokenizer::token_id(&w.to_lowercase()),
                display: w.clone(),
            })
            .collect())
    }

    fn tokenize(&self, word: &str) -> Result<Vec<u32>> {
        Ok(WordTokenizer
            .encode(word)
            .into_iter()
            .map(|t| t.id)
            .collect())
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.vocabulary {
            h.update(w.as_bytes());
            h.update([0]);
        }
        for (w, v) in &self.planted {
            h.update(w.as_bytes());
            v.iter().for_each(|x| h.update(x.to_le_bytes()));
        }
        let digest: String = h.finalize()[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        format!("fake:{}:{}:{digest}", self.seed, self.dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> FakeEmbedder {
        let mut f = FakeEmbedder::generated(3, 16, 20, &["chair", "stool", "bench"]);
        f.plant("stool", "chair", 0.05);
        f
    }

    #[test]
    fn planting_mixes_unit_vectors() {
        let mut f = FakeEmbedder::generated(9, 64, 0, &[]);
        f.plant("stool", "chair", 0.3);
        let (a, b) = (f.word_vector("chair"), f.word_vector("stool"));
        let own = normalized(&raw_vector(9, 64, "stool"));
        let mixed: Vec<f64> = a.iter().zip(&own).map(|(x, y)| 0.7 * x + 0.3 * y).collect();
        let n = mixed.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (got, want) in b.iter().zip(&mixed) {
            assert!((got - want / n).abs() < 1e-12);
        }
        let cos: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!(cos > 0.85, "{cos}");
    }

    #[test]
    fn three_token_vocabulary_gives_three_entries() {
        let f = FakeEmbedder::new(1, 8, vec!["a".into(), "b".into(), "c".into()]);
        let index = build_token_index(&f, DEFAULT_TEMPLATE, None).unwrap();
        assert_eq!(index.len(), 3);
        for i in 0..3 {
            check_unit(index.vector(i), 8).unwrap();
        }
    }

    #[test]
    fn planted_neighbour_ranks_first_and_word_is_excluded() {
        let f = small();
        let index = build_token_index(&f, DEFAULT_TEMPLATE, None).unwrap();
        let all = nearest_tokens(&index, &f, "chair", index.len() - 1).unwrap();
        assert_eq!(all[0].display, "stool");
        assert_eq!(all.len(), index.len() - 1);
        assert!(all.iter().all(|c| c.display != "chair"));
        assert!(all
            .windows(2)
            .all(|w| w[0].context_free_distance <= w[1].context_free_distance));
    }

    #[test]
    fn cache_is_reused_and_invalidated() {
        let dir = tempfile::tempdir().unwrap();
        let f = small();
        let a = build_token_index(&f, DEFAULT_TEMPLATE, Some(dir.path())).unwrap();
        let path = index_cache_path(dir.path(), &f.fingerprint(), DEFAULT_TEMPLATE);
        let bytes = std::fs::read(&path).unwrap();
        let b = build_token_index(&f, DEFAULT_TEMPLATE, Some(dir.path())).unwrap();
        assert_eq!(a, b);
        assert_eq!(std::fs::read(&path).unwrap(), bytes);

        let other = FakeEmbedder::generated(4, 16, 5, &[]);
        let stale = path.clone();
        std::fs::copy(
            &path,
            index_cache_path(dir.path(), &other.fingerprint(), DEFAULT_TEMPLATE),
        )
        .unwrap();
        let rebuilt = build_token_index(&other, DEFAULT_TEMPLATE, Some(dir.path())).unwrap();
        assert_eq!(rebuilt.len(), 5);
        assert!(stale.exists());
    }

    #[test]
    fn rerank_zero_is_empty_and_ranks_are_contiguous() {
        let f = small();
        let index = build_token_index(&f, DEFAULT_TEMPLATE, None).unwrap();
        let prompt = PromptSpec::parse(
            &WordTokenizer,
            "A chair with a dog on it",
            "chair",
            None,
            &[],
        )
        .unwrap();
        let cands = nearest_tokens(&index, &f, "chair", 10).unwrap();
        assert!(rerank_in_context(&f, &cands, &prompt, 0)
            .unwrap()
            .is_empty());
        let top = rerank_in_context(&f, &cands, &prompt, 4).unwrap();
        assert_eq!(
            top.iter().map(|c| c.rank).collect::<Vec<_>>(),
            vec![1, 2, 3, 4]
        );
        assert_eq!(top[0].display, "stool");
        let d: Vec<f64> = top.iter().map(|c| c.in_context_distance.unwrap()).collect();
        assert!(d.windows(2).all(|w| w[0] <= w[1]) && d[0] >= 0.0);
    }

    #[test]
    fn untokenizable_word_is_rejected() {
        let f = small();
        let index = build_token_index(&f, DEFAULT_TEMPLATE, None).unwrap();
        assert!(matches!(
            nearest_tokens(&index, &f, "  ", 3),
            Err(Error::UnknownWord(_))
        ));
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let f = small();
        let a = f.embed_text("A photo of a chair").unwrap();
        assert_eq!(a, f.embed_text("A photo of a chair").unwrap());
        check_unit(&a, 16).unwrap();
    }
}
