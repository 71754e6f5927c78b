//! Word-level vocabulary and conversation encoding.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::navsim::{Conversation, Role};

pub const EOS: usize = 0;
pub const PAD: usize = 1;
pub const USER: usize = 2;
pub const BOT: usize = 3;
pub const UNK: usize = 4;

const SPECIALS: [&str; 5] = ["<eos>", "<pad>", "<user>", "<bot>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary with the reserved tokens first, then `words` in
    /// sorted order with duplicates removed.
    pub fn new<S: AsRef<str>>(words: &[S]) -> Self {
        let mut extra: Vec<String> = words
            .iter()
            .map(|w| w.as_ref().to_string())
            .filter(|w| !SPECIALS.contains(&w.as_str()))
            .collect();
        extra.sort();
        extra.dedup();
        let words: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(extra)
            .collect();
        Self::from_words(words)
    }

    /// Vocabulary with exactly the given id order (no reserved tokens added).
    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self { words, index }
    }

    /// Vocabulary covering every word the scene generator can emit.
    pub fn navigation() -> Self {
        Self::new(&crate::navsim::lexicon())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    /// Words in id order.
    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Whitespace tokenization; unknown words map to `<unk>`.
    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    /// Joins the words for `ids`, stopping at the first end-of-sequence token.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .map(|&id| self.word(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Token sequence of a conversation plus the positions scored by the
/// language-modeling loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedConversation {
    pub tokens: Vec<usize>,
    /// `targets[i]` is true when `tokens[i]` belongs to a response and is
    /// predicted from `tokens[..i]`.
    pub targets: Vec<bool>,
}

impl EncodedConversation {
    pub fn num_targets(&self) -> usize {
        self.targets.iter().filter(|&&t| t).count()
    }
}

/// Encodes `<user> prompt ... <bot> response ... <eos>` for every turn pair.
pub fn encode_conversation(vocab: &Vocab, conv: &Conversation) -> EncodedConversation {
    let mut tokens = Vec::new();
    let mut targets = Vec::new();
    for turn in conv.turns() {
        match turn.role {
            Role::Prompt => {
                tokens.push(USER);
                targets.push(false);
                for id in vocab.encode_text(&turn.text) {
                    tokens.push(id);
                    targets.push(false);
                }
            }
            Role::Response => {
                tokens.push(BOT);
                targets.push(false);
                for id in vocab.encode_text(&turn.text) {
                    tokens.push(id);
                    targets.push(true);
                }
                tokens.push(EOS);
                targets.push(true);
            }
        }
    }
    EncodedConversation { tokens, targets }
}

/// Context for generating the final response: every earlier turn teacher
/// forced, ending with the `<bot>` marker of the last response.
pub fn encode_final_prompt(vocab: &Vocab, conv: &Conversation) -> Vec<usize> {
    let mut prefix = conv.clone();
    prefix.pop_final_response();
    let mut tokens = encode_conversation(vocab, &prefix).tokens;
    tokens.push(BOT);
    tokens
}
