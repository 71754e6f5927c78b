//! Group-based reinforcement fine-tuning: the sequence-level GSPO objective
//! and its token-level GRPO sibling.
//!
//! For a prompt `x` and `G` sampled responses `y_i`:
//!
//! ```text
//! s_i  = exp((log pi(y_i|x) - log pi_old(y_i|x)) / |y_i|)
//! A_i  = (R_i - mean R) / (std R + eps_std)          (population std)
//! KL_i = r - ln r - 1,  r = pi_ref(y_i|x) / pi(y_i|x)
//! J    = 1/G sum_i min(s_i A_i, clip(s_i, 1-eps, 1+eps) A_i) - beta/G sum_i KL_i
//! ```
//!
//! `pi_old` is a snapshot taken at the start of each batch and `pi_ref` is a
//! snapshot frozen for the whole stage; neither carries gradients.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::policy::{sample_response, Decoding, PolicyModel, PolicySnapshot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RftAlgorithm {
    Gspo,
    Grpo,
}

impl fmt::Display for RftAlgorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RftAlgorithm::Gspo => "gspo",
            RftAlgorithm::Grpo => "grpo",
        })
    }
}

impl FromStr for RftAlgorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gspo" => Ok(RftAlgorithm::Gspo),
            "grpo" => Ok(RftAlgorithm::Grpo),
            other => Err(Error::Config(format!(
                "unknown rft algorithm {other:?} (expected gspo or grpo)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RftConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Prompts per optimizer step.
    pub batch_size: usize,
    pub temperature: f64,
    pub max_response_len: usize,
    pub algorithm: RftAlgorithm,
    pub std_floor: f64,
}

impl Default for RftConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_eps: 0.2,
            kl_beta: 0.04,
            lr: 2e-6,
            momentum: 0.0,
            epochs: 3,
            batch_size: 8,
            temperature: 1.0,
            max_response_len: 12,
            algorithm: RftAlgorithm::Gspo,
            std_floor: 1e-8,
        }
    }
}

impl RftConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.group_size < 2 {
            return fail(format!(
                "rft.group_size must be at least 2, got {}",
                self.group_size
            ));
        }
        if !(self.clip_eps > 0.0) {
            return fail(format!(
                "rft.clip_eps must be positive, got {}",
                self.clip_eps
            ));
        }
        if !(self.kl_beta >= 0.0) {
            return fail(format!(
                "rft.kl_beta must be non-negative, got {}",
                self.kl_beta
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("rft.lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!(
                "rft.momentum must be in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!(
                "rft.temperature must be positive, got {}",
                self.temperature
            ));
        }
        if self.max_response_len == 0 || self.batch_size == 0 {
            return fail("rft.max_response_len and rft.batch_size must be positive".into());
        }
        if !(self.std_floor >= 0.0) {
            return fail(format!(
                "rft.std_floor must be non-negative, got {}",
                self.std_floor
            ));
        }
        Ok(())
    }
}

/// `G` responses to one prompt with everything the objective needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseGroup {
    pub prompt: Vec<usize>,
    pub responses: Vec<Vec<usize>>,
    /// Per-token log-probs under the current policy.
    pub logprobs: Vec<Vec<f64>>,
    /// Per-token log-probs under the rollout snapshot.
    pub old_logprobs: Vec<Vec<f64>>,
    /// Sequence log-probs under the reference policy.
    pub ref_logprobs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl ResponseGroup {
    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.responses.len();
        if g < 2 {
            return Err(Error::Contract(format!(
                "a response group needs G >= 2, got {g}"
            )));
        }
        let ok = self.logprobs.len() == g
            && self.old_logprobs.len() == g
            && self.ref_logprobs.len() == g
            && self.rewards.len() == g
            && self.advantages.len() == g
            && (0..g).all(|i| {
                let n = self.responses[i].len();
                n > 0 && self.logprobs[i].len() == n && self.old_logprobs[i].len() == n
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Contract(
                "response group fields have inconsistent lengths".into(),
            ))
        }
    }
}

/// Length-normalized sequence ratio, evaluated in log space.
pub fn importance_ratio_gspo(group: &ResponseGroup, i: usize) -> f64 {
    let n = group.responses[i].len() as f64;
    let lp: f64 = group.logprobs[i].iter().sum();
    let old: f64 = group.old_logprobs[i].iter().sum();
    ((lp - old) / n).exp()
}

/// Group-normalized advantages with the population standard deviation.
/// A group whose rewards are all equal gets all-zero advantages.
pub fn advantages(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Contract(format!(
            "advantages need at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards
        .iter()
        .map(|r| (r - mean) / (std + std_floor))
        .collect())
}

/// `r - ln r - 1` with `ln r = ref_logprob - logprob`.
pub fn kl_from_logprobs(ref_logprob: f64, logprob: f64) -> f64 {
    let u = ref_logprob - logprob;
    // exp_m1 keeps precision near r = 1 and never rounds below u.
    (u.exp_m1() - u).max(0.0)
}

pub fn kl_penalty(group: &ResponseGroup, i: usize) -> f64 {
    kl_from_logprobs(group.ref_logprobs[i], group.logprobs[i].iter().sum())
}

/// `min(s A, clip(s, 1 - eps, 1 + eps) A)`.
pub fn clipped_term(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

pub fn gspo_objective(group: &ResponseGroup, clip_eps: f64, kl_beta: f64) -> f64 {
    let g = group.len() as f64;
    let surrogate: f64 = (0..group.len())
        .map(|i| {
            clipped_term(
                importance_ratio_gspo(group, i),
                group.advantages[i],
                clip_eps,
            )
        })
        .sum();
    let kl: f64 = (0..group.len()).map(|i| kl_penalty(group, i)).sum();
    surrogate / g - kl_beta * kl / g
}

/// Token-level variant: each token's ratio is clipped separately against
/// the response's advantage, averaged over tokens and then responses.
pub fn grpo_objective(group: &ResponseGroup, clip_eps: f64, kl_beta: f64) -> f64 {
    let g = group.len() as f64;
    let surrogate: f64 = (0..group.len())
        .map(|i| {
            let a = group.advantages[i];
            let terms: f64 = group.logprobs[i]
                .iter()
                .zip(&group.old_logprobs[i])
                .map(|(lp, old)| clipped_term((lp - old).exp(), a, clip_eps))
                .sum();
            terms / group.responses[i].len() as f64
        })
        .sum();
    let kl: f64 = (0..group.len()).map(|i| kl_penalty(group, i)).sum();
    surrogate / g - kl_beta * kl / g
}

pub fn objective(group: &ResponseGroup, cfg: &RftConfig) -> f64 {
    match cfg.algorithm {
        RftAlgorithm::Gspo => gspo_objective(group, cfg.clip_eps, cfg.kl_beta),
        RftAlgorithm::Grpo => grpo_objective(group, cfg.clip_eps, cfg.kl_beta),
    }
}

/// Fraction of clipped ratios: sequence ratios for GSPO, token ratios for GRPO.
pub fn clip_fraction(group: &ResponseGroup, cfg: &RftConfig) -> (usize, usize) {
    let outside = |r: f64| (r - 1.0).abs() > cfg.clip_eps;
    match cfg.algorithm {
        RftAlgorithm::Gspo => (
            (0..group.len())
                .filter(|&i| outside(importance_ratio_gspo(group, i)))
                .count(),
            group.len(),
        ),
        RftAlgorithm::Grpo => {
            let mut hit = 0;
            let mut total = 0;
            for (lp, old) in group.logprobs.iter().zip(&group.old_logprobs) {
                for (a, b) in lp.iter().zip(old) {
                    total += 1;
                    hit += usize::from(outside((a - b).exp()));
                }
            }
            (hit, total)
        }
    }
}

/// Graph for one response's contribution `surrogate_i - beta KL_i`.
/// Returns the scalar term and the per-token log-probs under the model.
fn response_term<'a>(
    g: &mut Graph<'a>,
    model: &'a PolicyModel,
    group: &ResponseGroup,
    i: usize,
    cfg: &RftConfig,
) -> Result<(Var, Vec<f64>)> {
    let vars = model.bind(g, true);
    let response = &group.responses[i];
    let n = response.len();
    let a = group.advantages[i];
    let (lp, _) = model.response_logprobs(g, &vars, &group.prompt, response)?;
    let per_token = g.value(lp).to_vec();
    let lp_sum = g.sum(lp);
    let surrogate = match cfg.algorithm {
        RftAlgorithm::Gspo => {
            let old: f64 = group.old_logprobs[i].iter().sum();
            let d = g.add_scalar(lp_sum, -old);
            let d = g.scale(d, 1.0 / n as f64);
            let s = g.exp(d);
            g.clipped_surrogate(s, &[a], cfg.clip_eps)?
        }
        RftAlgorithm::Grpo => {
            let old = g.constant(vec![n, 1], group.old_logprobs[i].clone())?;
            let d = g.sub(lp, old)?;
            let rho = g.exp(d);
            let terms = g.clipped_surrogate(rho, &vec![a; n], cfg.clip_eps)?;
            g.mean(terms)
        }
    };
    if cfg.kl_beta == 0.0 {
        return Ok((surrogate, per_token));
    }
    // u = ln r; KL = exp(u) - u - 1
    let neg = g.scale(lp_sum, -1.0);
    let u = g.add_scalar(neg, group.ref_logprobs[i]);
    let r = g.exp(u);
    let r_minus_u = g.sub(r, u)?;
    let kl = g.add_scalar(r_minus_u, -1.0);
    let kl = g.scale(kl, cfg.kl_beta);
    Ok((g.sub(surrogate, kl)?, per_token))
}

/// Loss `-mean_p J_p` over the groups and its parameter gradients. The
/// rollout and reference log-probs are plain numbers, so no gradient can
/// reach either snapshot. Per-response backward passes may run in
/// parallel; gradients are summed in response order.
pub fn rft_loss(
    model: &PolicyModel,
    groups: &[ResponseGroup],
    cfg: &RftConfig,
) -> Result<(f64, Gradients)> {
    let tasks: Vec<(usize, usize)> = groups
        .iter()
        .enumerate()
        .flat_map(|(p, grp)| (0..grp.len()).map(move |i| (p, i)))
        .collect();
    let parts: Vec<(f64, Gradients)> = tasks
        .par_iter()
        .map(|&(p, i)| {
            let grp = &groups[p];
            let weight = -1.0 / (groups.len() * grp.len()) as f64;
            let mut g = Graph::new();
            let (term, _) = response_term(&mut g, model, grp, i, cfg)?;
            let value = g.scalar(term) * weight;
            Ok((value, g.backward_scaled(term, weight)?))
        })
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut grads = Gradients::default();
    for (v, gr) in &parts {
        loss += v;
        grads.merge(gr);
    }
    Ok((loss, grads))
}

/// Scores a sampled response. Arguments are the prompt's index within the
/// batch and the generated ids (including end-of-sequence when produced).
pub type RewardFn<'r> = dyn Fn(usize, &[usize]) -> f64 + Sync + 'r;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct StepReport {
    /// Objective `J` averaged over the batch's prompts (before the update).
    pub objective: f64,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

/// Samples `G` responses per prompt from the current policy, builds the
/// groups, and returns them with the rollout snapshot's log-probs.
pub fn collect_groups<R: Rng>(
    model: &PolicyModel,
    prompts: &[Vec<usize>],
    reward: &RewardFn<'_>,
    cfg: &RftConfig,
    reference: &PolicySnapshot,
    rng: &mut R,
) -> Result<Vec<ResponseGroup>> {
    cfg.validate()?;
    let base: u64 = rng.gen();
    let gsize = cfg.group_size;
    let decoding = Decoding::Sample {
        temperature: cfg.temperature,
    };
    for p in prompts {
        if p.len() >= model.config().max_context {
            return Err(Error::Contract(format!(
                "prompt of {} tokens leaves no room to respond (max context {})",
                p.len(),
                model.config().max_context
            )));
        }
    }
    let tasks: Vec<(usize, usize)> = (0..prompts.len())
        .flat_map(|p| (0..gsize).map(move |i| (p, i)))
        .collect();
    let rollouts: Vec<(Vec<usize>, Vec<f64>, f64, f64)> = tasks
        .par_iter()
        .map(|&(p, i)| {
            let mut trng = ChaCha8Rng::seed_from_u64(base);
            trng.set_stream((p * gsize + i) as u64);
            let s = sample_response(
                model,
                &prompts[p],
                cfg.max_response_len,
                decoding,
                &mut trng,
            )?;
            let (lref, _) = reference.sequence_logprob(&prompts[p], &s.tokens)?;
            let r = reward(p, &s.tokens);
            Ok((s.tokens, s.logprobs, lref, r))
        })
        .collect::<Result<_>>()?;
    let mut groups = Vec::with_capacity(prompts.len());
    for (p, chunk) in rollouts.chunks(gsize).enumerate() {
        let rewards: Vec<f64> = chunk.iter().map(|c| c.3).collect();
        groups.push(ResponseGroup {
            prompt: prompts[p].clone(),
            responses: chunk.iter().map(|c| c.0.clone()).collect(),
            logprobs: chunk.iter().map(|c| c.1.clone()).collect(),
            old_logprobs: chunk.iter().map(|c| c.1.clone()).collect(),
            ref_logprobs: chunk.iter().map(|c| c.2).collect(),
            advantages: advantages(&rewards, cfg.std_floor)?,
            rewards,
        });
    }
    Ok(groups)
}

/// One on-policy update: roll out from a snapshot of the current policy,
/// score, and take one optimizer step on `-J`.
pub fn rft_step<R: Rng>(
    model: &mut PolicyModel,
    prompts: &[Vec<usize>],
    reward: &RewardFn<'_>,
    cfg: &RftConfig,
    reference: &PolicySnapshot,
    optimizer: &mut Optimizer,
    rng: &mut R,
) -> Result<StepReport> {
    if prompts.is_empty() {
        return Err(Error::Contract("rft_step needs at least one prompt".into()));
    }
    let groups = collect_groups(model, prompts, reward, cfg, reference, rng)?;
    let (_, grads) = rft_loss(model, &groups, cfg)?;
    let n_prompts = groups.len() as f64;
    let mut report = StepReport::default();
    let (mut clipped, mut counted) = (0, 0);
    let mut n_responses = 0.0;
    for grp in &groups {
        report.objective += objective(grp, cfg) / n_prompts;
        report.mean_reward += grp.rewards.iter().sum::<f64>();
        report.mean_kl += (0..grp.len()).map(|i| kl_penalty(grp, i)).sum::<f64>();
        n_responses += grp.len() as f64;
        let (c, t) = clip_fraction(grp, cfg);
        clipped += c;
        counted += t;
    }
    report.mean_reward /= n_responses;
    report.mean_kl /= n_responses;
    report.clip_fraction = clipped as f64 / counted.max(1) as f64;
    report.grad_norm = optimizer.step(model.params_mut().tensors_mut(), &grads);
    Ok(report)
}
