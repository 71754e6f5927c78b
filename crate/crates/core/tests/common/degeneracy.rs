//! A single-expert MoE model is the dense model.

use socialnav_core::experiment::{Experiment, StageLog};
use socialnav_core::navsim::build_dataset;
use socialnav_core::pipeline::{run_moeft, run_sft, Stage, StagePlan};
use socialnav_core::policy::{PolicyConfig, PolicyModel, RouterConfig};
use socialnav_core::tokenizer::Vocab;

use super::determinism::tiny_config;
use super::Check;

fn config(moe: bool) -> PolicyConfig {
    PolicyConfig {
        vocab_size: Vocab::navigation().len(),
        d_model: 16,
        n_layers: 4,
        n_heads: 2,
        d_ff: 16,
        max_context: 256,
        moe,
        router: RouterConfig::new(1, 1).unwrap(),
        init_seed: 21,
    }
}

/// Loss trajectories of dense SFT and single-expert MoEFT (and SFT) under
/// one seed and plan, then the final logits on a training conversation.
pub fn check_stage_functions() -> Check {
    let data = build_dataset(12, 2, 5).unwrap();
    let vocab = Vocab::navigation();
    let mut plan = StagePlan::new(Stage::Sft, 4, 3e-3, 99);
    plan.batch_size = 4;
    let mut dense = PolicyModel::new(config(false)).unwrap();
    let mut single = PolicyModel::new(config(true)).unwrap();
    let mut single_sft = single.clone();
    let dense_log = run_sft(&mut dense, &data.train_augmented, &vocab, &plan, |_| {}).unwrap();
    let moe_log = run_moeft(&mut single, &data.train_augmented, &vocab, &plan, |_| {}).unwrap();
    let sft_log = run_sft(
        &mut single_sft,
        &data.train_augmented,
        &vocab,
        &plan,
        |_| {},
    )
    .unwrap();
    let losses =
        |l: &[socialnav_core::pipeline::EpochLog]| l.iter().map(|e| e.loss).collect::<Vec<_>>();
    let (d, m, s) = (losses(&dense_log), losses(&moe_log), losses(&sft_log));
    let probe = [2, 30, 31, 32, 3];
    let probe: Vec<usize> = probe.iter().map(|&t| t % vocab.len()).collect();
    let same_logits = dense.logits(&probe).unwrap() == single.logits(&probe).unwrap();
    let calls: usize = moe_log.iter().map(|e| e.routing.expert_calls).sum();
    let routed: usize = moe_log.iter().map(|e| e.routing.routed_tokens).sum();
    let pass = d == m && d == s && same_logits && calls == routed && routed > 0;
    Check::new(
        pass,
        format!(
            "dense {d:.6?}; single-expert moeft {}; final logits identical: {same_logits}",
            if d == m { "bit-identical" } else { "DIFFERENT" }
        ),
    )
}

fn trajectory(log: &StageLog) -> Vec<f64> {
    match log {
        StageLog::Supervised(l) => l.iter().map(|e| e.loss).collect(),
        StageLog::Rft(r) => r.iter().map(|s| s.objective).collect(),
    }
}

/// The staged pipeline from config: dense SFT then RFT against the
/// single-expert model's SFT, RFT and MoEFT, where the dense model's last
/// stage is SFT with the MoEFT plan.
pub fn check_pipeline() -> Check {
    let mut dense_cfg = tiny_config();
    dense_cfg.model.moe = false;
    let mut single_cfg = tiny_config();
    single_cfg.model.num_experts = 1;
    single_cfg.model.top_k = 1;
    let dense = Experiment::new(dense_cfg.clone()).unwrap();
    let single = Experiment::new(single_cfg).unwrap();
    let data = dense.dataset().unwrap();
    let mut ok = true;
    let mut trajectories = Vec::new();
    let (mut d, mut s) = (
        dense.initial_checkpoint().unwrap(),
        single.initial_checkpoint().unwrap(),
    );
    for stage in [Stage::Sft, Stage::Rft] {
        let (dn, dl) = dense.run_stage(&d, stage, &data, false, |_| {}).unwrap();
        let (sn, sl) = single.run_stage(&s, stage, &data, false, |_| {}).unwrap();
        ok &= trajectory(&dl) == trajectory(&sl);
        trajectories.push(format!("{stage} {:.4?}", trajectory(&dl)));
        (d, s) = (dn, sn);
    }
    let (_, moe_log) = single
        .run_stage(&s, Stage::Moeft, &data, false, |_| {})
        .unwrap();
    let mut dense_model = d.model.clone();
    let plan = dense_cfg.stage_plan(Stage::Moeft);
    let dense_log = run_sft(
        &mut dense_model,
        &data.train_augmented,
        dense.vocab(),
        &plan,
        |_| {},
    )
    .unwrap();
    let dense_losses: Vec<f64> = dense_log.iter().map(|e| e.loss).collect();
    ok &= trajectory(&moe_log) == dense_losses;
    trajectories.push(format!("moeft {dense_losses:.4?}"));
    Check::new(
        ok,
        format!(
            "sft, rft and moeft trajectories bit-identical: {ok} ({})",
            trajectories.join("; ")
        ),
    )
}

pub fn check() -> Check {
    Check::all(vec![
        ("stage functions", check_stage_functions()),
        ("pipeline", check_pipeline()),
    ])
}
