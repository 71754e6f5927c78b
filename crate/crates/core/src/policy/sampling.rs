use rand::Rng;

use super::PolicyModel;
use crate::autodiff::{log_softmax, softmax};
use crate::error::{Error, Result};
use crate::tokenizer::EOS;

/// How the next token is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    /// Argmax with ties to the lowest id (the zero-temperature limit).
    Greedy,
    /// Sample from `softmax(logits / temperature)`.
    Sample { temperature: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledResponse {
    /// Generated ids, including the final end-of-sequence token if one was produced.
    pub tokens: Vec<usize>,
    /// `log pi(token | prefix)` under the sampling model, one per token.
    pub logprobs: Vec<f64>,
}

impl SampledResponse {
    pub fn total_logprob(&self) -> f64 {
        self.logprobs.iter().sum()
    }
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `acc` just below 1: take the last token with mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Autoregressive generation from `prompt` until end-of-sequence, `max_len`
/// tokens, or the context limit. The returned log-probabilities are the
/// model's untempered `log pi(token | prefix)`.
pub fn sample_response<R: Rng>(
    model: &PolicyModel,
    prompt: &[usize],
    max_len: usize,
    decoding: Decoding,
    rng: &mut R,
) -> Result<SampledResponse> {
    if let Decoding::Sample { temperature } = decoding {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Contract(format!(
                "sampling temperature must be positive, got {temperature}"
            )));
        }
    }
    let mut seq = prompt.to_vec();
    let mut out = SampledResponse {
        tokens: Vec::new(),
        logprobs: Vec::new(),
    };
    while out.tokens.len() < max_len && seq.len() < model.config().max_context {
        let logits = model.last_logits(&seq)?;
        let lp = log_softmax(&logits);
        let token = match decoding {
            Decoding::Greedy => argmax(&logits),
            Decoding::Sample { temperature } => {
                let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
                sample_index(&softmax(&scaled), rng)
            }
        };
        out.tokens.push(token);
        out.logprobs.push(lp[token]);
        seq.push(token);
        if token == EOS {
            break;
        }
    }
    Ok(out)
}
