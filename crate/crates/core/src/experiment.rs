//! Runs stages and ablation sweeps from a [`RunConfig`].

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::Serialize;

use crate::config::{stage_seed, RunConfig};
use crate::embedder::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, write_csv, MetricReport};
use crate::navsim::{build_dataset, Dataset};
use crate::pipeline::{run_moeft, run_rft, run_sft, EpochLog, RftLogRow, Stage, TurnMode};
use crate::policy::{Checkpoint, CheckpointMeta, PolicyModel};
use crate::reward::{RewardKind, RewardSpec};
use crate::tokenizer::Vocab;

/// Stage log returned by [`Experiment::run_stage`].
#[derive(Debug, Clone, PartialEq)]
pub enum StageLog {
    Supervised(Vec<EpochLog>),
    Rft(Vec<RftLogRow>),
}

impl StageLog {
    /// Last epoch loss, or the last step's objective for RFT.
    pub fn final_value(&self) -> Option<f64> {
        match self {
            StageLog::Supervised(l) => l.last().map(|e| e.loss),
            StageLog::Rft(r) => r.last().map(|s| s.objective),
        }
    }
}

/// Fails unless `stage` directly follows the checkpoint's last stage.
pub fn check_stage_order(meta: &CheckpointMeta, stage: Stage) -> Result<()> {
    let expected = stage
        .previous()
        .map(|s| s.to_string())
        .unwrap_or_else(|| "init".into());
    if meta.stage == expected {
        return Ok(());
    }
    Err(Error::Config(format!(
        "stage order: {stage} expects a checkpoint from {expected}, got one from {}",
        if meta.stage.is_empty() {
            "an unknown stage"
        } else {
            meta.stage.as_str()
        }
    )))
}

pub struct Experiment {
    cfg: RunConfig,
    hash: String,
    vocab: Vocab,
    embedder: Arc<EmbeddingProvider>,
}

impl Experiment {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let embedder = Arc::new(cfg.embedder()?);
        Ok(Self {
            hash: cfg.hash(),
            cfg,
            vocab: Vocab::navigation(),
            embedder,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn embedder(&self) -> &Arc<EmbeddingProvider> {
        &self.embedder
    }

    pub fn dataset(&self) -> Result<Dataset> {
        build_dataset(
            self.cfg.data.train_n,
            self.cfg.data.test_n,
            self.cfg.run.seed,
        )
    }

    pub fn initial_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            model: PolicyModel::new(self.cfg.initial_policy_config())?,
            meta: CheckpointMeta {
                stage: "init".into(),
                config_hash: self.hash.clone(),
                seed: self.cfg.run.seed,
                history: Vec::new(),
            },
        })
    }

    pub fn reward_spec(&self, kind: RewardKind) -> RewardSpec {
        match kind {
            RewardKind::Hard => RewardSpec::hard(),
            RewardKind::Character => RewardSpec::character(),
            RewardKind::Ssr => RewardSpec::ssr(self.embedder.clone()),
        }
    }

    /// Applies one stage. SFT and MoEFT train on the augmented training
    /// set; RFT rolls out on the original training prompts.
    pub fn run_stage(
        &self,
        input: &Checkpoint,
        stage: Stage,
        data: &Dataset,
        allow_out_of_order: bool,
        mut progress: impl FnMut(&str),
    ) -> Result<(Checkpoint, StageLog)> {
        if !allow_out_of_order {
            check_stage_order(&input.meta, stage)?;
        }
        let mut model = input.model.clone();
        let log = match stage {
            Stage::Sft | Stage::Moeft => {
                let plan = self.cfg.stage_plan(stage);
                let report = |l: &EpochLog| {
                    progress(&format!("{stage} epoch {} loss {:.6}", l.epoch, l.loss))
                };
                let logs = if stage == Stage::Sft {
                    run_sft(
                        &mut model,
                        &data.train_augmented,
                        &self.vocab,
                        &plan,
                        report,
                    )?
                } else {
                    run_moeft(
                        &mut model,
                        &data.train_augmented,
                        &self.vocab,
                        &plan,
                        report,
                    )?
                };
                StageLog::Supervised(logs)
            }
            Stage::Rft => {
                let reward = self.reward_spec(self.cfg.rft.reward);
                let rows = run_rft(
                    &mut model,
                    &data.train,
                    &self.vocab,
                    &reward,
                    &self.cfg.rft_config(),
                    self.cfg.run.turns,
                    stage_seed(self.cfg.run.seed, Stage::Rft),
                    |r, _| {
                        progress(&format!(
                            "rft step {} J {:.6} reward {:.4} kl {:.6}",
                            r.step, r.objective, r.mean_reward, r.mean_kl
                        ))
                    },
                )?;
                StageLog::Rft(rows)
            }
        };
        let mut history = input.meta.history.clone();
        history.push(stage.to_string());
        let out = Checkpoint {
            model,
            meta: CheckpointMeta {
                stage: stage.to_string(),
                config_hash: self.hash.clone(),
                seed: self.cfg.run.seed,
                history,
            },
        };
        Ok((out, log))
    }

    pub fn evaluate(&self, model: &PolicyModel, data: &Dataset) -> Result<MetricReport> {
        evaluate(
            model,
            &self.vocab,
            &data.test,
            &self.embedder,
            &self.cfg.eval_config(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SweepAxis {
    /// Experts K in 1..=4 with every top-k <= K.
    Experts,
    /// Every top-k for the configured K.
    Topk,
    Reward,
    Turns,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Experts => "experts",
            SweepAxis::Topk => "topk",
            SweepAxis::Reward => "reward",
            SweepAxis::Turns => "turns",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "experts" => Ok(SweepAxis::Experts),
            "topk" => Ok(SweepAxis::Topk),
            "reward" => Ok(SweepAxis::Reward),
            "turns" => Ok(SweepAxis::Turns),
            other => Err(Error::Config(format!(
                "unknown sweep axis {other:?} (expected experts, topk, reward or turns)"
            ))),
        }
    }
}

/// One configuration of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub label: String,
    pub config: RunConfig,
    pub with_rft: bool,
}

pub fn sweep_points(base: &RunConfig, axis: SweepAxis) -> Vec<SweepPoint> {
    let with = |label: String, f: &dyn Fn(&mut RunConfig), with_rft: bool| {
        let mut config = base.clone();
        f(&mut config);
        SweepPoint {
            label,
            config,
            with_rft,
        }
    };
    match axis {
        SweepAxis::Experts => (1..=4)
            .flat_map(|k_total| (1..=k_total).map(move |k| (k_total, k)))
            .map(|(kt, k)| {
                with(
                    format!("{kt} & {k}"),
                    &|c| {
                        c.model.moe = true;
                        c.model.num_experts = kt;
                        c.model.top_k = k;
                    },
                    true,
                )
            })
            .collect(),
        SweepAxis::Topk => (1..=base.model.num_experts)
            .map(|k| with(format!("top-{k}"), &|c| c.model.top_k = k, true))
            .collect(),
        SweepAxis::Reward => RewardKind::ALL
            .iter()
            .map(|&r| with(r.to_string(), &|c| c.rft.reward = r, true))
            .collect(),
        SweepAxis::Turns => [TurnMode::Single, TurnMode::Multi]
            .iter()
            .flat_map(|&t| {
                [false, true].map(|rft| {
                    with(
                        format!("{t} {}", if rft { "w/ RFT" } else { "w/o RFT" }),
                        &|c| c.run.turns = t,
                        rft,
                    )
                })
            })
            .collect(),
    }
}

/// Columns follow [`SweepRow`]; the first line records the base config hash.
pub fn write_sweep_csv(path: &std::path::Path, base: &RunConfig, rows: &[SweepRow]) -> Result<()> {
    write_csv(path, &base.hash(), base.run.seed, rows)
}

/// One line of a sweep summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: String,
    pub label: String,
    pub experts: usize,
    pub top_k: usize,
    pub reward: String,
    pub turns: String,
    pub rft: bool,
    pub parameters: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub sent_cos: f64,
    pub sms: f64,
    pub exact: f64,
    pub config_hash: String,
}

/// Runs SFT, optionally RFT, then MoEFT for one point and evaluates it.
/// `sft` may supply an already trained SFT checkpoint to share.
pub fn run_point(
    point: &SweepPoint,
    axis: SweepAxis,
    data: &Dataset,
    sft: Option<&Checkpoint>,
    mut progress: impl FnMut(&str),
) -> Result<SweepRow> {
    let exp = Experiment::new(point.config.clone())?;
    let mut ckpt = match sft {
        Some(c) => c.clone(),
        None => {
            let init = exp.initial_checkpoint()?;
            exp.run_stage(&init, Stage::Sft, data, false, &mut progress)?
                .0
        }
    };
    if point.with_rft {
        ckpt = exp
            .run_stage(&ckpt, Stage::Rft, data, false, &mut progress)?
            .0;
    }
    if ckpt.model.has_moe() {
        ckpt = exp
            .run_stage(&ckpt, Stage::Moeft, data, true, &mut progress)?
            .0;
    }
    let report = exp.evaluate(&ckpt.model, data)?;
    let a = report.aggregate;
    let c = exp.config();
    Ok(SweepRow {
        axis: axis.to_string(),
        label: point.label.clone(),
        experts: c.model.num_experts,
        top_k: c.model.top_k,
        reward: c.rft.reward.to_string(),
        turns: c.run.turns.to_string(),
        rft: point.with_rft,
        parameters: a.parameter_count,
        precision: a.precision,
        recall: a.recall,
        f1: a.f1,
        sent_cos: a.sent_cos,
        sms: a.sms,
        exact: a.exact,
        config_hash: exp.config_hash().to_string(),
    })
}

/// Runs every point of `axis`. Reward and turn sweeps share one SFT
/// checkpoint per turn mode so only the varied factor changes. With
/// `threads > 1` points run concurrently; rows keep sweep order.
pub fn run_sweep(
    base: &RunConfig,
    axis: SweepAxis,
    data: &Dataset,
    threads: usize,
    progress: impl Fn(&str) + Sync,
) -> Result<Vec<SweepRow>> {
    use rayon::prelude::*;
    let points = sweep_points(base, axis);
    let mut shared: Vec<(TurnMode, Checkpoint)> = Vec::new();
    if matches!(axis, SweepAxis::Reward | SweepAxis::Turns) {
        for p in &points {
            let t = p.config.run.turns;
            if shared.iter().any(|(m, _)| *m == t) {
                continue;
            }
            let mut cfg = base.clone();
            cfg.run.turns = t;
            let exp = Experiment::new(cfg)?;
            let init = exp.initial_checkpoint()?;
            let (ckpt, _) = exp.run_stage(&init, Stage::Sft, data, false, |m| progress(m))?;
            shared.push((t, ckpt));
        }
    }
    let run = |p: &SweepPoint| {
        let sft = shared
            .iter()
            .find(|(m, _)| *m == p.config.run.turns)
            .map(|(_, c)| c);
        progress(&format!("sweep {axis}: {}", p.label));
        run_point(p, axis, data, sft, |m| progress(m))
    };
    if threads <= 1 {
        return points.iter().map(run).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| points.par_iter().map(run).collect())
}
