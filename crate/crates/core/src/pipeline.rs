//! The three training stages: supervised fine-tuning, reinforcement
//! fine-tuning, and multi-turn MoE fine-tuning.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph};
use crate::error::{Error, Result};
use crate::navsim::{Conversation, DatasetRecord};
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::policy::{PolicyModel, RoutingStats};
use crate::reward::RewardSpec;
use crate::rft::{rft_step, RftConfig, StepReport};
use crate::tokenizer::{encode_conversation, encode_final_prompt, EncodedConversation, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Sft,
    Rft,
    Moeft,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Sft, Stage::Rft, Stage::Moeft];

    /// Stage that must have been applied before this one, if any.
    pub fn previous(self) -> Option<Stage> {
        match self {
            Stage::Sft => None,
            Stage::Rft => Some(Stage::Sft),
            Stage::Moeft => Some(Stage::Rft),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Sft => "sft",
            Stage::Rft => "rft",
            Stage::Moeft => "moeft",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sft" => Ok(Stage::Sft),
            "rft" => Ok(Stage::Rft),
            "moeft" => Ok(Stage::Moeft),
            other => Err(Error::Config(format!("unknown stage {other:?}"))),
        }
    }
}

/// Conversation format used for training and inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TurnMode {
    /// Scene summary turn followed by the action turn.
    Multi,
    /// One prompt (scene plus action question) answered by the action.
    Single,
}

impl fmt::Display for TurnMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TurnMode::Multi => "multi",
            TurnMode::Single => "single",
        })
    }
}

impl FromStr for TurnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi" => Ok(TurnMode::Multi),
            "single" => Ok(TurnMode::Single),
            other => Err(Error::Config(format!(
                "unknown turn mode {other:?} (expected multi or single)"
            ))),
        }
    }
}

pub fn conversation_for(record: &DatasetRecord, mode: TurnMode) -> Conversation {
    match mode {
        TurnMode::Multi => record.turns.clone(),
        TurnMode::Single => record.turns.single_turn(),
    }
}

/// Hyperparameters of one supervised stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub turns: TurnMode,
    pub seed: u64,
}

impl StagePlan {
    /// Adam with global-norm clipping at 1.0.
    pub fn new(stage: Stage, epochs: usize, lr: f64, seed: u64) -> Self {
        Self {
            stage,
            epochs,
            batch_size: 8,
            optimizer: OptimizerConfig {
                kind: OptimizerKind::adam(),
                lr,
                max_grad_norm: Some(1.0),
            },
            turns: TurnMode::Multi,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "{}: epochs and batch_size must be positive",
                self.stage
            )));
        }
        self.optimizer.validate()
    }
}

/// Summed negative log-likelihood of the response tokens, with its graph
/// gradients. Prompt positions never contribute a loss row.
pub fn sft_loss_and_grad(
    model: &PolicyModel,
    enc: &EncodedConversation,
) -> Result<(f64, Gradients, RoutingStats)> {
    let rows: Vec<usize> = (1..enc.tokens.len())
        .filter(|&i| enc.targets[i])
        .map(|i| i - 1)
        .collect();
    if rows.is_empty() {
        return Err(Error::Contract(
            "conversation has no response tokens".into(),
        ));
    }
    if enc.targets[0] {
        return Err(Error::Contract("the first token cannot be a target".into()));
    }
    let targets: Vec<usize> = rows.iter().map(|&r| enc.tokens[r + 1]).collect();
    let input = &enc.tokens[..enc.tokens.len() - 1];
    let mut g = Graph::new();
    let vars = model.bind(&mut g, true);
    let fwd = model.forward_hidden(&mut g, &vars, input)?;
    let logits = model.head(&mut g, &vars, fwd.hidden, &rows)?;
    let loss = g.cross_entropy(logits, &targets)?;
    let value = g.scalar(loss);
    Ok((value, g.backward(loss)?, fwd.stats))
}

pub fn sft_loss(model: &PolicyModel, enc: &EncodedConversation) -> Result<f64> {
    sft_loss_and_grad(model, enc).map(|(l, _, _)| l)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-conversation loss over the epoch, each measured before
    /// the update of its batch.
    pub loss: f64,
    pub wall_ms: u64,
    pub routing: RoutingStats,
}

fn encode_all(
    records: &[DatasetRecord],
    vocab: &Vocab,
    mode: TurnMode,
) -> Vec<EncodedConversation> {
    records
        .iter()
        .map(|r| encode_conversation(vocab, &conversation_for(r, mode)))
        .collect()
}

fn supervised(
    model: &mut PolicyModel,
    records: &[DatasetRecord],
    vocab: &Vocab,
    plan: &StagePlan,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    plan.validate()?;
    if records.is_empty() {
        return Err(Error::Contract(format!(
            "{}: empty training set",
            plan.stage
        )));
    }
    let data = encode_all(records, vocab, plan.turns);
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut opt = Optimizer::new(plan.optimizer)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut logs = Vec::with_capacity(plan.epochs);
    for epoch in 1..=plan.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut routing = RoutingStats::default();
        for batch in order.chunks(plan.batch_size) {
            let shared: &PolicyModel = model;
            let parts: Vec<(f64, Gradients, RoutingStats)> = batch
                .par_iter()
                .map(|&i| sft_loss_and_grad(shared, &data[i]))
                .collect::<Result<_>>()?;
            let mut grads = Gradients::default();
            for (loss, g, stats) in &parts {
                total += loss;
                grads.merge(g);
                routing.merge(stats);
            }
            grads.scale(1.0 / batch.len() as f64);
            opt.step(model.params_mut().tensors_mut(), &grads);
        }
        let log = EpochLog {
            epoch,
            loss: total / data.len() as f64,
            wall_ms: start.elapsed().as_millis() as u64,
            routing,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Minibatch training on the response-token likelihood.
pub fn run_sft(
    model: &mut PolicyModel,
    records: &[DatasetRecord],
    vocab: &Vocab,
    plan: &StagePlan,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    supervised(model, records, vocab, plan, on_epoch)
}

/// Same objective as [`run_sft`]; requires MoE layers and records the
/// per-epoch expert histogram.
pub fn run_moeft(
    model: &mut PolicyModel,
    records: &[DatasetRecord],
    vocab: &Vocab,
    plan: &StagePlan,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if !model.has_moe() {
        return Err(Error::Config(
            "moeft needs a model with MoE layers (set moe = true and n_layers >= 2)".into(),
        ));
    }
    supervised(model, records, vocab, plan, on_epoch)
}

/// Prompt ids (everything before the final response, earlier responses
/// teacher-forced) and the reference action of each record.
pub fn rft_prompts(
    records: &[DatasetRecord],
    vocab: &Vocab,
    mode: TurnMode,
) -> Vec<(Vec<usize>, String)> {
    records
        .iter()
        .map(|r| {
            let conv = conversation_for(r, mode);
            (
                encode_final_prompt(vocab, &conv),
                conv.final_response().to_string(),
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RftLogRow {
    pub step: usize,
    #[serde(rename = "J")]
    pub objective: f64,
    pub mean_reward: f64,
    #[serde(rename = "mean_KL")]
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub wall_ms: u64,
}

/// Iterates [`rft_step`] over shuffled prompt batches for `cfg.epochs`
/// epochs. The reference policy is the model as passed in.
pub fn run_rft(
    model: &mut PolicyModel,
    records: &[DatasetRecord],
    vocab: &Vocab,
    reward: &RewardSpec,
    cfg: &RftConfig,
    turns: TurnMode,
    seed: u64,
    mut on_step: impl FnMut(&RftLogRow, &StepReport),
) -> Result<Vec<RftLogRow>> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::Contract("rft: empty training set".into()));
    }
    let prompts = rft_prompts(records, vocab, turns);
    let reference = model.snapshot();
    let mut opt = Optimizer::new(OptimizerConfig {
        kind: OptimizerKind::Sgd {
            momentum: cfg.momentum,
        },
        lr: cfg.lr,
        max_grad_norm: Some(1.0),
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..prompts.len()).collect();
    let mut log = Vec::new();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let start = Instant::now();
            let ids: Vec<Vec<usize>> = batch.iter().map(|&i| prompts[i].0.clone()).collect();
            let score = |p: usize, tokens: &[usize]| {
                reward.score(&vocab.decode(tokens), &prompts[batch[p]].1)
            };
            let report = rft_step(model, &ids, &score, cfg, &reference, &mut opt, &mut rng)?;
            let row = RftLogRow {
                step: log.len() + 1,
                objective: report.objective,
                mean_reward: report.mean_reward,
                mean_kl: report.mean_kl,
                clip_fraction: report.clip_fraction,
                wall_ms: start.elapsed().as_millis() as u64,
            };
            on_step(&row, &report);
            log.push(row);
        }
    }
    Ok(log)
}

/// Number of optimizer steps per RFT epoch.
pub fn rft_steps_per_epoch(n_prompts: usize, cfg: &RftConfig) -> usize {
    n_prompts.div_ceil(cfg.batch_size)
}

/// Writes `epoch,loss,wall_ms[,routed_tokens,l{layer}_e{expert}...]` after
/// a `# config_hash=` comment line.
pub fn write_epoch_log(
    path: &Path,
    config_hash: &str,
    logs: &[EpochLog],
    with_routing: bool,
) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "# config_hash={config_hash}").expect("in-memory write");
    let hist_cols: Vec<(usize, usize)> = logs
        .first()
        .map(|l| {
            l.routing
                .histogram
                .iter()
                .enumerate()
                .flat_map(|(layer, h)| (0..h.len()).map(move |e| (layer, e)))
                .collect()
        })
        .unwrap_or_default();
    let mut header = String::from("epoch,loss,wall_ms");
    if with_routing {
        header.push_str(",routed_tokens");
        for (l, e) in &hist_cols {
            header.push_str(&format!(",l{l}_e{e}"));
        }
    }
    writeln!(out, "{header}").expect("in-memory write");
    for log in logs {
        let mut line = format!("{},{},{}", log.epoch, log.loss, log.wall_ms);
        if with_routing {
            line.push_str(&format!(",{}", log.routing.routed_tokens));
            for &(l, e) in &hist_cols {
                line.push_str(&format!(",{}", log.routing.histogram[l][e]));
            }
        }
        writeln!(out, "{line}").expect("in-memory write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes the RFT step log as CSV after a `# config_hash=` comment line.
pub fn write_rft_log(path: &Path, config_hash: &str, rows: &[RftLogRow]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "# config_hash={config_hash}").expect("in-memory write");
    {
        let mut w = csv::Writer::from_writer(&mut out);
        for r in rows {
            w.serialize(r).map_err(|e| Error::format("rft log", e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
