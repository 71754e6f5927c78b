//! Deterministic word embeddings with synonym clusters.
//!
//! Each cluster gets a random unit "center"; each member word is the
//! normalized center plus a small seeded perturbation. Centers are drawn by
//! rejection so that words of different clusters stay below the separation
//! margin, while members of one cluster stay above the cohesion margin.
//! Out-of-lexicon words get a unit vector seeded from a hash of the word.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const EMBED_DIM: usize = 32;
pub const DEFAULT_EMBED_SEED: u64 = 0x05ee_de3b;
/// Minimum cosine between two words of the same cluster.
pub const SAME_CLUSTER_MIN: f64 = 0.9;
/// Maximum cosine between words of different clusters.
pub const CROSS_CLUSTER_MAX: f64 = 0.3;
const PERTURBATION: f64 = 0.05;
const CENTER_MAX_COS: f64 = 0.2;

/// Paraphrase groups; every other lexicon word is its own cluster.
const SYNONYMS: &[(&str, &[&str])] = &[
    ("halt", &["stop", "halt", "wait", "pause"]),
    ("slow", &["slow", "slowly", "gently", "cautious"]),
    ("moderate", &["moderate", "medium", "normal", "steady"]),
    ("speed", &["speed", "pace", "velocity"]),
    ("slight", &["slight", "gentle", "small", "mild"]),
    ("turn", &["turn", "veer", "steer"]),
    ("continue", &["continue", "proceed", "keep", "go"]),
    ("straight", &["straight", "forward", "onward"]),
    ("left", &["left", "leftward", "port"]),
    ("right", &["right", "rightward", "starboard"]),
    ("at", &["at", "with"]),
    ("crowd", &["crowd", "group", "throng"]),
    ("person", &["person", "pedestrian", "walker"]),
    ("blocked", &["blocked", "obstructed", "occupied"]),
    ("clear", &["clear", "open", "free"]),
];

/// Words and their cluster names.
pub fn builtin_lexicon() -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (cluster, words) in SYNONYMS {
        for w in *words {
            out.push((w.to_string(), cluster.to_string()));
        }
    }
    for w in crate::navsim::lexicon() {
        if !out.iter().any(|(x, _)| *x == w) {
            out.push((w.clone(), w));
        }
    }
    out
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

fn gaussian_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    normalize(&mut v);
    v
}

/// Cosine similarity. Exactly 1 for identical nonzero vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone)]
pub struct EmbeddingProvider {
    dim: usize,
    seed: u64,
    clusters: BTreeMap<String, Vec<String>>,
    vectors: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingProvider {
    pub fn builtin() -> Self {
        Self::from_lexicon(&builtin_lexicon(), DEFAULT_EMBED_SEED)
            .expect("built-in lexicon satisfies the cluster margins")
    }

    /// Builds vectors for `(word, cluster)` pairs and verifies the margins.
    pub fn from_lexicon(entries: &[(String, String)], seed: u64) -> Result<Self> {
        let mut clusters: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (word, cluster) in entries {
            let members = clusters.entry(cluster.clone()).or_default();
            if !members.contains(word) {
                members.push(word.clone());
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centers: Vec<Vec<f64>> = Vec::new();
        let mut vectors = BTreeMap::new();
        for (name, members) in &clusters {
            let center = (0..100_000)
                .map(|_| gaussian_unit(&mut rng, EMBED_DIM))
                .find(|c| centers.iter().all(|o| cosine(c, o) <= CENTER_MAX_COS))
                .ok_or_else(|| {
                    Error::Config(format!("could not place cluster {name}: lexicon too large"))
                })?;
            for word in members {
                let mut wrng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(word));
                let p = gaussian_unit(&mut wrng, EMBED_DIM);
                let mut v: Vec<f64> = center
                    .iter()
                    .zip(&p)
                    .map(|(c, d)| c + PERTURBATION * d)
                    .collect();
                normalize(&mut v);
                if vectors.insert(word.clone(), v).is_some() {
                    return Err(Error::Config(format!("word {word} listed in two clusters")));
                }
            }
            centers.push(center);
        }
        let provider = Self {
            dim: EMBED_DIM,
            seed,
            clusters,
            vectors,
        };
        provider.check_margins()?;
        Ok(provider)
    }

    /// Reads `word<TAB>cluster` lines (blank lines and `#` comments ignored).
    pub fn from_file(path: &Path, seed: u64) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, cluster) = line.split_once('\t').ok_or_else(|| {
                Error::format(
                    format!("{} line {}", path.display(), i + 1),
                    "expected word<TAB>cluster",
                )
            })?;
            entries.push((word.trim().to_string(), cluster.trim().to_string()));
        }
        Self::from_lexicon(&entries, seed)
    }

    fn check_margins(&self) -> Result<()> {
        let words: Vec<(&String, &String)> = self
            .clusters
            .iter()
            .flat_map(|(c, ws)| ws.iter().map(move |w| (w, c)))
            .collect();
        for (i, (wa, ca)) in words.iter().enumerate() {
            for (wb, cb) in &words[i + 1..] {
                let c = cosine(&self.vectors[*wa], &self.vectors[*wb]);
                let ok = if ca == cb {
                    c >= SAME_CLUSTER_MIN
                } else {
                    c <= CROSS_CLUSTER_MAX
                };
                if !ok {
                    return Err(Error::Config(format!(
                        "embedding margin violated for {wa}/{wb}: cosine {c}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn clusters(&self) -> &BTreeMap<String, Vec<String>> {
        &self.clusters
    }

    pub fn cluster_of(&self, word: &str) -> Option<&str> {
        self.clusters
            .iter()
            .find(|(_, ws)| ws.iter().any(|w| w == word))
            .map(|(c, _)| c.as_str())
    }

    pub fn contains(&self, word: &str) -> bool {
        self.vectors.contains_key(word)
    }

    /// Unit vector for one word.
    pub fn embed_word(&self, word: &str) -> Vec<f64> {
        match self.vectors.get(word) {
            Some(v) => v.clone(),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed.rotate_left(17) ^ fnv1a(word));
                gaussian_unit(&mut rng, self.dim)
            }
        }
    }

    /// One row per word.
    pub fn embed_tokens<S: AsRef<str>>(&self, words: &[S]) -> Vec<Vec<f64>> {
        words.iter().map(|w| self.embed_word(w.as_ref())).collect()
    }

    /// Normalized mean of the word vectors. Words are summed in sorted
    /// order, so the result is exactly invariant to word order.
    pub fn embed_sentence<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<f64>> {
        if words.is_empty() {
            return Err(Error::Contract("cannot embed an empty sentence".into()));
        }
        let mut sorted: Vec<&str> = words.iter().map(AsRef::as_ref).collect();
        sorted.sort_unstable();
        let mut acc = vec![0.0; self.dim];
        for row in self.embed_tokens(&sorted) {
            acc.iter_mut().zip(&row).for_each(|(a, r)| *a += r);
        }
        acc.iter_mut().for_each(|a| *a /= words.len() as f64);
        let n = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::Contract("sentence vectors cancel out".into()));
        }
        acc.iter_mut().for_each(|x| *x /= n);
        Ok(acc)
    }
}
