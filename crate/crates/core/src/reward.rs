//! Text rewards comparing a generated response with the reference action:
//! exact match, unique-character recall, and the semantic similarity reward
//! (token-alignment F1 over word embeddings).

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::embedder::{cosine, EmbeddingProvider};
use crate::error::{Error, Result};

/// Trim, lowercase and collapse internal whitespace.
pub fn normalize_text(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// 1 when the normalized texts are identical, else 0.
pub fn hard_reward(generated: &str, reference: &str) -> f64 {
    if normalize_text(generated) == normalize_text(reference) {
        1.0
    } else {
        0.0
    }
}

fn char_set(s: &str) -> BTreeSet<char> {
    normalize_text(s)
        .chars()
        .filter(|c| !c.is_whitespace())
        .collect()
}

/// `|C_y ∩ C_g| / max(1, |C_g|)` over the unique non-whitespace characters
/// of the normalized texts.
pub fn character_reward(generated: &str, reference: &str) -> f64 {
    let cy = char_set(generated);
    let cg = char_set(reference);
    cy.intersection(&cg).count() as f64 / cg.len().max(1) as f64
}

/// Cosine matrix between generated tokens (rows) and reference tokens (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub generated: Vec<String>,
    pub reference: Vec<String>,
    /// Row-major, `generated.len() x reference.len()`.
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(generated: &str, reference: &str, embedder: &EmbeddingProvider) -> Self {
        let tok = |s: &str| -> Vec<String> {
            normalize_text(s)
                .split(' ')
                .filter(|w| !w.is_empty())
                .map(String::from)
                .collect()
        };
        let generated = tok(generated);
        let reference = tok(reference);
        let gy = embedder.embed_tokens(&generated);
        let gr = embedder.embed_tokens(&reference);
        let values = gy
            .iter()
            .flat_map(|a| gr.iter().map(move |b| cosine(a, b)))
            .collect();
        Self {
            generated,
            reference,
            values,
        }
    }

    pub fn get(&self, gen: usize, reference: usize) -> f64 {
        self.values[gen * self.reference.len() + reference]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BertScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when either text had no tokens; all scores are then 0.
    pub degenerate: bool,
}

/// Greedy-matching precision, recall and F1. Recall averages each reference
/// token's best match among generated tokens; precision averages each
/// generated token's best match among reference tokens.
pub fn bertscore(generated: &str, reference: &str, embedder: &EmbeddingProvider) -> BertScore {
    let s = SimilarityMatrix::new(generated, reference, embedder);
    let (n, m) = (s.generated.len(), s.reference.len());
    if n == 0 || m == 0 {
        return BertScore {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
            degenerate: true,
        };
    }
    let recall = (0..m)
        .map(|k| {
            (0..n)
                .map(|j| s.get(j, k))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum::<f64>()
        / m as f64;
    let precision = (0..n)
        .map(|j| {
            (0..m)
                .map(|k| s.get(j, k))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum::<f64>()
        / n as f64;
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    BertScore {
        precision,
        recall,
        f1,
        degenerate: false,
    }
}

/// Semantic similarity reward: the alignment F1 clamped to `[0, 1]`.
pub fn ssr(generated: &str, reference: &str, embedder: &EmbeddingProvider) -> f64 {
    bertscore(generated, reference, embedder).f1.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardKind {
    Hard,
    Character,
    Ssr,
}

impl RewardKind {
    pub const ALL: [RewardKind; 3] = [RewardKind::Hard, RewardKind::Character, RewardKind::Ssr];
}

impl fmt::Display for RewardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RewardKind::Hard => "hard",
            RewardKind::Character => "character",
            RewardKind::Ssr => "ssr",
        })
    }
}

impl FromStr for RewardKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(RewardKind::Hard),
            "character" => Ok(RewardKind::Character),
            "ssr" => Ok(RewardKind::Ssr),
            other => Err(Error::Config(format!(
                "unknown reward kind {other:?} (expected hard, character or ssr)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RewardSpec {
    kind: RewardKind,
    embedder: Option<Arc<EmbeddingProvider>>,
}

impl RewardSpec {
    pub fn new(kind: RewardKind, embedder: Option<Arc<EmbeddingProvider>>) -> Result<Self> {
        if kind == RewardKind::Ssr && embedder.is_none() {
            return Err(Error::Config("the ssr reward needs an embedder".into()));
        }
        Ok(Self { kind, embedder })
    }

    pub fn hard() -> Self {
        Self {
            kind: RewardKind::Hard,
            embedder: None,
        }
    }

    pub fn character() -> Self {
        Self {
            kind: RewardKind::Character,
            embedder: None,
        }
    }

    pub fn ssr(embedder: Arc<EmbeddingProvider>) -> Self {
        Self {
            kind: RewardKind::Ssr,
            embedder: Some(embedder),
        }
    }

    pub fn kind(&self) -> RewardKind {
        self.kind
    }

    pub fn score(&self, generated: &str, reference: &str) -> f64 {
        match self.kind {
            RewardKind::Hard => hard_reward(generated, reference),
            RewardKind::Character => character_reward(generated, reference),
            RewardKind::Ssr => ssr(
                generated,
                reference,
                self.embedder.as_ref().expect("checked at construction"),
            ),
        }
    }
}

/// One row of batch scoring output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairScore {
    pub index: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub hard: f64,
    pub character: f64,
    pub ssr: f64,
}

/// Scores tab-separated `generated<TAB>reference` lines and writes CSV with
/// columns `index,precision,recall,f1,hard,character,ssr`.
pub fn score_pairs_tsv<R: std::io::BufRead, W: std::io::Write>(
    input: R,
    output: W,
    embedder: &EmbeddingProvider,
) -> Result<Vec<PairScore>> {
    let mut scores = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<pairs input>", e))?;
        if line.is_empty() {
            continue;
        }
        let (y, g) = line.split_once('\t').ok_or_else(|| {
            Error::format(
                format!("pair line {}", i + 1),
                "expected generated<TAB>reference",
            )
        })?;
        let b = bertscore(y, g, embedder);
        scores.push(PairScore {
            index: scores.len(),
            precision: b.precision,
            recall: b.recall,
            f1: b.f1,
            hard: hard_reward(y, g),
            character: character_reward(y, g),
            ssr: b.f1.clamp(0.0, 1.0),
        });
    }
    let mut w = csv::Writer::from_writer(output);
    for s in &scores {
        w.serialize(s).map_err(|e| Error::format("score csv", e))?;
    }
    w.flush().map_err(|e| Error::io("<scores output>", e))?;
    Ok(scores)
}
