#![allow(dead_code)]

use std::collections::HashSet;
use std::path::Path;
use std::process::{Command, Output};

use pme_core::proxy::EmbeddingProvider;

pub const PROMPT: &str = "A basket on a table next to a mug";

/// `pme` with every `PME_*` variable of the caller's environment removed.
pub fn pme(dir: &Path) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pme"));
    c.current_dir(dir);
    for (k, _) in std::env::vars() {
        if k.starts_with("PME_") {
            c.env_remove(k);
        }
    }
    c
}

pub fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout)
        .unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn dot_distance(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for i in 0..a.len() {
        s += f64::from(a[i]) * f64::from(b[i]);
    }
    (1.0 - s).max(0.0)
}

/// A proxy found by scanning the whole vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleProxy {
    pub token: u32,
    pub display: String,
    pub context_free: f64,
    pub in_context: f64,
}

/// Scans every vocabulary entry: the `k` closest to the templated word
/// (excluding the word's own tokens), then the `m` of those whose prompt
/// with the word swapped out lands closest to the original prompt.
pub fn brute_force_proxies(
    provider: &dyn EmbeddingProvider,
    template: &str,
    prompt: &str,
    word: &str,
    k: usize,
    m: usize,
) -> Vec<OracleProxy> {
    let own: HashSet<u32> = provider.tokenize(word).unwrap().into_iter().collect();
    let query = provider.embed_text(&template.replace("{t}", word)).unwrap();
    let mut first: Vec<(f64, u32, String)> = Vec::new();
    for entry in provider.vocabulary().unwrap() {
        if own.contains(&entry.token) {
            continue;
        }
        let v = provider
            .embed_text(&template.replace("{t}", &entry.display))
            .unwrap();
        first.push((dot_distance(&query, &v), entry.token, entry.display));
    }
    first.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    first.truncate(k);

    let original = provider.embed_text(prompt).unwrap();
    let start = prompt.find(word).expect("word occurs in the prompt");
    let mut second: Vec<OracleProxy> = first
        .into_iter()
        .map(|(d, token, display)| {
            let swapped = format!(
                "{}{}{}",
                &prompt[..start],
                display,
                &prompt[start + word.len()..]
            );
            OracleProxy {
                token,
                in_context: dot_distance(&provider.embed_text(&swapped).unwrap(), &original),
                display,
                context_free: d,
            }
        })
        .collect();
    second.sort_by(|a, b| {
        a.in_context
            .partial_cmp(&b.in_context)
            .unwrap()
            .then(a.token.cmp(&b.token))
    });
    second.truncate(m);
    second
}
