//! Three-token bandit: one-token responses, reward 1 for token 2.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use socialnav_core::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use socialnav_core::policy::{PolicyConfig, PolicyModel, RouterConfig};
use socialnav_core::rft::{rft_step, RftAlgorithm, RftConfig};

use super::Check;

pub const REWARDED: usize = 2;
pub const STEPS: usize = 50;
pub const LR: f64 = 0.5;

pub fn bandit_model() -> PolicyModel {
    PolicyModel::new(PolicyConfig {
        vocab_size: 3,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 8,
        max_context: 4,
        moe: true,
        router: RouterConfig::new(2, 1).unwrap(),
        init_seed: 1,
    })
    .unwrap()
}

/// Probability of `token` after `prompt`, from the raw logits with an
/// explicitly written softmax.
pub fn exact_probability(model: &PolicyModel, prompt: &[usize], token: usize) -> f64 {
    let logits = model.last_logits(prompt).unwrap();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    (logits[token] - max).exp() / z
}

pub struct BanditRun {
    /// Per prompt: probability of the rewarded token before and after.
    pub before: Vec<f64>,
    pub after: Vec<f64>,
    /// Largest gap between the explicit softmax and the model's own
    /// sequence log-probability, over every step.
    pub oracle_gap: f64,
}

pub fn run(algorithm: RftAlgorithm) -> BanditRun {
    let mut model = bandit_model();
    let prompts = vec![vec![1], vec![2]];
    let reference = model.snapshot();
    let cfg = RftConfig {
        group_size: 8,
        batch_size: 2,
        max_response_len: 1,
        kl_beta: 0.0,
        lr: LR,
        algorithm,
        ..RftConfig::default()
    };
    let mut opt = Optimizer::new(OptimizerConfig {
        kind: OptimizerKind::Sgd { momentum: 0.0 },
        lr: LR,
        max_grad_norm: Some(1.0),
    })
    .unwrap();
    let reward = |_p: usize, y: &[usize]| if y == [REWARDED] { 1.0 } else { 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let probs = |m: &PolicyModel| -> Vec<f64> {
        prompts
            .iter()
            .map(|p| exact_probability(m, p, REWARDED))
            .collect()
    };
    let before = probs(&model);
    let mut oracle_gap: f64 = 0.0;
    for _ in 0..STEPS {
        rft_step(
            &mut model, &prompts, &reward, &cfg, &reference, &mut opt, &mut rng,
        )
        .unwrap();
        for p in &prompts {
            let via_model = model.sequence_logprob(p, &[REWARDED]).unwrap().0.exp();
            oracle_gap = oracle_gap.max((via_model - exact_probability(&model, p, REWARDED)).abs());
        }
    }
    BanditRun {
        before,
        after: probs(&model),
        oracle_gap,
    }
}

pub fn check() -> Check {
    let r = run(RftAlgorithm::Gspo);
    let gains: Vec<f64> = r.after.iter().zip(&r.before).map(|(a, b)| a - b).collect();
    let pass = gains.iter().all(|&g| g >= 0.3) && r.oracle_gap < 1e-12;
    Check::new(
        pass,
        format!(
            "p(rewarded) {:.3?} -> {:.3?} after {STEPS} steps (gain {:.3?}); softmax oracle gap {:.1e}",
            r.before, r.after, gains, r.oracle_gap
        ),
    )
}
