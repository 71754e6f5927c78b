//! Algebraic properties of the sequence-level objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use socialnav_core::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use socialnav_core::rft::{
    advantages, collect_groups, gspo_objective, importance_ratio_gspo, kl_from_logprobs,
    kl_penalty, rft_step, ResponseGroup, RftAlgorithm, RftConfig,
};

use super::gradients::fd_model;
use super::Check;

fn small_cfg(algorithm: RftAlgorithm, kl_beta: f64) -> RftConfig {
    RftConfig {
        group_size: 4,
        batch_size: 2,
        max_response_len: 5,
        kl_beta,
        algorithm,
        ..RftConfig::default()
    }
}

const PROMPTS: [&[usize]; 3] = [&[2, 5, 6, 3], &[2, 7, 3], &[2, 9, 10, 11, 3]];

fn prompts() -> Vec<Vec<usize>> {
    PROMPTS.iter().map(|p| p.to_vec()).collect()
}

/// Groups sampled from a model whose rollout snapshot is itself.
pub fn check_on_policy_ratio() -> Check {
    let model = fd_model(1);
    let reference = model.snapshot();
    let reward = |_p: usize, y: &[usize]| y.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let groups = collect_groups(
        &model,
        &prompts(),
        &reward,
        &small_cfg(RftAlgorithm::Gspo, 0.04),
        &reference,
        &mut rng,
    )
    .unwrap();
    let mut n = 0;
    for grp in &groups {
        for i in 0..grp.len() {
            n += 1;
            let s = importance_ratio_gspo(grp, i);
            if s != 1.0 || kl_penalty(grp, i) != 0.0 || grp.logprobs[i] != grp.old_logprobs[i] {
                return Check::new(false, format!("response {i}: s = {s:e}"));
            }
        }
    }
    Check::new(true, format!("s = 1 exactly for {n} sampled responses"))
}

fn constant_ratio_group(c: f64, lengths: &[usize]) -> ResponseGroup {
    let mut rng = ChaCha8Rng::seed_from_u64(lengths.len() as u64);
    let mut grp = ResponseGroup {
        prompt: vec![2],
        responses: Vec::new(),
        logprobs: Vec::new(),
        old_logprobs: Vec::new(),
        ref_logprobs: Vec::new(),
        rewards: Vec::new(),
        advantages: Vec::new(),
    };
    for &n in lengths {
        let old: Vec<f64> = (0..n).map(|_| -rng.gen_range(0.1..3.0)).collect();
        grp.responses.push(vec![0; n]);
        grp.logprobs.push(old.iter().map(|o| o + c.ln()).collect());
        grp.old_logprobs.push(old);
        grp.ref_logprobs.push(0.0);
        grp.rewards.push(0.0);
        grp.advantages.push(0.0);
    }
    grp
}

pub fn check_length_invariance() -> Check {
    let lengths: Vec<usize> = (1..=24).collect();
    let mut worst: f64 = 0.0;
    for c in [0.5, 0.9, 1.0, 1.1, 1.7] {
        let grp = constant_ratio_group(c, &lengths);
        for i in 0..grp.len() {
            worst = worst.max((importance_ratio_gspo(&grp, i) - c).abs());
        }
    }
    Check::new(
        worst < 1e-12,
        format!("max |s - c| = {worst:.1e} over lengths 1..=24"),
    )
}

pub fn check_advantages() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst_mean: f64 = 0.0;
    let mut worst_std: f64 = 0.0;
    for trial in 0..200 {
        let g = 2 + trial % 15;
        let rewards: Vec<f64> = (0..g).map(|_| rng.gen_range(0.0..1.0)).collect();
        let a = advantages(&rewards, 1e-8).unwrap();
        let mean = a.iter().sum::<f64>() / g as f64;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / g as f64).sqrt();
        worst_mean = worst_mean.max(mean.abs());
        worst_std = worst_std.max((std - 1.0).abs());
    }
    let constant_ok = [0.0, 0.5, 1.0]
        .iter()
        .all(|&r| advantages(&[r; 6], 1e-8).unwrap().iter().all(|&a| a == 0.0));
    Check::new(
        worst_mean < 1e-12 && worst_std < 1e-6 && constant_ok,
        format!("|mean| <= {worst_mean:.1e}, |std - 1| <= {worst_std:.1e}, constant groups -> 0: {constant_ok}"),
    )
}

pub fn check_kl() -> Check {
    let mut min_nonzero = f64::INFINITY;
    let mut ok = true;
    for k in -4000..=4000 {
        let u = k as f64 * 1e-3;
        for base in [-7.5, -1.0, 0.0] {
            let kl = kl_from_logprobs(base + u, base);
            if k == 0 {
                ok &= kl == 0.0;
            } else {
                ok &= kl > 0.0;
                min_nonzero = min_nonzero.min(kl);
            }
        }
    }
    for u in [1e-6, -1e-6, 1e-3] {
        ok &= kl_from_logprobs(u, 0.0) > 0.0;
    }
    Check::new(
        ok,
        format!("KL >= 0 with equality only at ratio 1 (smallest nonzero {min_nonzero:.1e})"),
    )
}

/// Two single-token responses with ratios 1.3 and 0.9 and advantages +1
/// and -1: the first is clipped to 1.2, the second is not, so
/// J = (1.2 - 0.9) / 2 = 0.15.
pub fn worked_example() -> ResponseGroup {
    ResponseGroup {
        prompt: vec![2],
        responses: vec![vec![0], vec![0]],
        logprobs: vec![vec![1.3f64.ln()], vec![0.9f64.ln()]],
        old_logprobs: vec![vec![0.0], vec![0.0]],
        ref_logprobs: vec![1.3f64.ln(), 0.9f64.ln()],
        rewards: vec![1.0, 0.0],
        advantages: vec![1.0, -1.0],
    }
}

pub fn check_worked_example() -> Check {
    let j = gspo_objective(&worked_example(), 0.2, 0.0);
    let adv = advantages(&[1.0, 0.0], 1e-8).unwrap();
    let pass = (j - 0.15).abs() < 1e-12
        && adv
            .iter()
            .zip([1.0, -1.0])
            .all(|(a, b)| (a - b).abs() < 1e-7);
    Check::new(pass, format!("J = {j:.15}"))
}

/// All-equal rewards give zero advantages; at the reference policy the KL
/// gradient also vanishes, so the step must leave every parameter as is.
pub fn zero_update(algorithm: RftAlgorithm, kl_beta: f64, drift: bool) -> (bool, f64) {
    let mut model = fd_model(1);
    let reference = model.snapshot();
    if drift {
        for t in model.params_mut().tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= 1.01);
        }
    }
    let before = model.clone();
    let mut opt = Optimizer::new(OptimizerConfig {
        kind: OptimizerKind::Sgd { momentum: 0.9 },
        lr: 0.5,
        max_grad_norm: Some(1.0),
    })
    .unwrap();
    let reward = |_p: usize, _y: &[usize]| 0.7;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = small_cfg(algorithm, kl_beta);
    let mut norm: f64 = 0.0;
    for _ in 0..3 {
        let report = rft_step(
            &mut model,
            &prompts(),
            &reward,
            &cfg,
            &reference,
            &mut opt,
            &mut rng,
        )
        .unwrap();
        norm = norm.max(report.grad_norm);
    }
    let same = model
        .params()
        .tensors()
        .iter()
        .zip(before.params().tensors())
        .all(|(a, b)| a.data() == b.data());
    (same, norm)
}

pub fn check_zero_update() -> Check {
    let cases = [
        (
            "gspo at reference, beta 0.04",
            RftAlgorithm::Gspo,
            0.04,
            false,
        ),
        (
            "grpo at reference, beta 0.04",
            RftAlgorithm::Grpo,
            0.04,
            false,
        ),
        ("gspo off reference, beta 0", RftAlgorithm::Gspo, 0.0, true),
    ];
    Check::all(
        cases
            .iter()
            .map(|&(name, alg, beta, drift)| {
                let (same, norm) = zero_update(alg, beta, drift);
                (
                    name,
                    Check::new(
                        same && norm == 0.0,
                        format!("unchanged {same}, grad norm {norm:e}"),
                    ),
                )
            })
            .collect(),
    )
}

pub fn check_all() -> Check {
    Check::all(vec![
        ("on-policy ratio", check_on_policy_ratio()),
        ("length invariance", check_length_invariance()),
        ("advantages", check_advantages()),
        ("kl", check_kl()),
        ("worked example", check_worked_example()),
        ("zero update", check_zero_update()),
    ])
}
