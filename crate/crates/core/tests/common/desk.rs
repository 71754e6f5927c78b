//! Desk-scale pipeline with the default configuration over three seeds.

use socialnav_core::config::RunConfig;
use socialnav_core::experiment::Experiment;
use socialnav_core::navsim::Dataset;
use socialnav_core::pipeline::{Stage, TurnMode};
use socialnav_core::policy::Checkpoint;
use socialnav_core::reward::RewardKind;

use super::Check;

/// The default run seed and the next two.
pub const SEEDS: [u64; 3] = [7, 8, 9];

/// Held-out mean F1 of every variant for one seed.
#[derive(Debug, Clone, Copy, Default)]
pub struct SeedResult {
    pub seed: u64,
    pub sft_train_exact: f64,
    pub sft: f64,
    pub ssr: f64,
    pub character: f64,
    pub single_ssr: f64,
}

fn experiment(seed: u64, turns: TurnMode, reward: RewardKind) -> Experiment {
    let mut cfg = RunConfig::default();
    cfg.run.seed = seed;
    cfg.run.turns = turns;
    cfg.rft.reward = reward;
    Experiment::new(cfg).unwrap()
}

fn sft(exp: &Experiment, data: &Dataset) -> Checkpoint {
    let init = exp.initial_checkpoint().unwrap();
    exp.run_stage(&init, Stage::Sft, data, false, |_| {})
        .unwrap()
        .0
}

fn rft_f1(exp: &Experiment, sft: &Checkpoint, data: &Dataset) -> f64 {
    let (ckpt, _) = exp.run_stage(sft, Stage::Rft, data, false, |_| {}).unwrap();
    exp.evaluate(&ckpt.model, data).unwrap().aggregate.f1
}

/// SFT, then RFT with each reward from the same SFT checkpoint, plus the
/// single-turn SFT and RFT with SSR. Evaluation uses each run's turn mode.
pub fn run_seed(seed: u64) -> SeedResult {
    let multi = experiment(seed, TurnMode::Multi, RewardKind::Ssr);
    let data = multi.dataset().unwrap();
    let base = sft(&multi, &data);
    let on_train = Dataset {
        test: data.train.clone(),
        ..data.clone()
    };
    let sft_train_exact = multi
        .evaluate(&base.model, &on_train)
        .unwrap()
        .aggregate
        .exact;
    let sft_f1 = multi.evaluate(&base.model, &data).unwrap().aggregate.f1;
    let ssr = rft_f1(&multi, &base, &data);
    let character = rft_f1(
        &experiment(seed, TurnMode::Multi, RewardKind::Character),
        &base,
        &data,
    );
    let single = experiment(seed, TurnMode::Single, RewardKind::Ssr);
    let single_base = sft(&single, &data);
    let single_ssr = rft_f1(&single, &single_base, &data);
    SeedResult {
        seed,
        sft_train_exact,
        sft: sft_f1,
        ssr,
        character,
        single_ssr,
    }
}

pub fn mean(rs: &[SeedResult], f: fn(&SeedResult) -> f64) -> f64 {
    rs.iter().map(f).sum::<f64>() / rs.len() as f64
}

/// Sub-checks (a) to (d) from per-seed results.
pub fn judge(rs: &[SeedResult]) -> Check {
    let exact = rs
        .iter()
        .map(|r| r.sft_train_exact)
        .fold(f64::INFINITY, f64::min);
    let (sft, ssr, character, single) = (
        mean(rs, |r| r.sft),
        mean(rs, |r| r.ssr),
        mean(rs, |r| r.character),
        mean(rs, |r| r.single_ssr),
    );
    Check::all(vec![
        (
            "(a) sft train exact",
            Check::new(
                exact >= 0.95,
                format!("min over seeds {exact:.3} (>= 0.95)"),
            ),
        ),
        (
            "(b) rft over sft",
            Check::new(
                ssr > sft,
                format!("mean F1 {ssr:.4} vs {sft:.4} (strictly greater)"),
            ),
        ),
        (
            "(c) ssr over character",
            Check::new(
                ssr > character,
                format!("mean F1 {ssr:.4} vs {character:.4} (strictly greater)"),
            ),
        ),
        (
            "(d) multi over single turn",
            Check::new(
                ssr >= single,
                format!("mean F1 {ssr:.4} vs {single:.4} (>=)"),
            ),
        ),
    ])
}

pub fn check() -> Check {
    let rs: Vec<SeedResult> = SEEDS.iter().map(|&s| run_seed(s)).collect();
    for r in &rs {
        println!(
            "  seed {}: sft train exact {:.3}, test F1 sft {:.4}, rft ssr {:.4}, rft character {:.4}, single-turn rft ssr {:.4}",
            r.seed, r.sft_train_exact, r.sft, r.ssr, r.character, r.single_ssr
        );
    }
    judge(&rs)
}
