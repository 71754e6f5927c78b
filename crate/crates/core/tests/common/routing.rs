//! Top-k routing invariants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use socialnav_core::autodiff::{softmax, Graph, Tensor, Var};
use socialnav_core::policy::{
    route, top_k_indices, FfnVars, MoeVars, PolicyConfig, PolicyModel, RouterConfig, RoutingStats,
};

use super::Check;

const D: usize = 6;
const F: usize = 5;
const K: usize = 4;
const T: usize = 7;

/// Tensors for a standalone MoE layer: input, router weight and bias, and
/// four parameters per expert.
pub fn layer_tensors(seed: u64, router_bias: [f64; K]) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: Vec<usize>| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
            .with_grad()
    };
    let mut ts = vec![r(vec![T, D]), r(vec![D, K])];
    ts.push(
        Tensor::new(vec![K], router_bias.to_vec())
            .unwrap()
            .with_grad(),
    );
    for _ in 0..K {
        ts.extend([r(vec![D, F]), r(vec![F]), r(vec![F, D]), r(vec![D])]);
    }
    ts
}

fn bind(vars: &[Var]) -> MoeVars {
    MoeVars {
        router_w: vars[1],
        router_b: vars[2],
        experts: (0..K)
            .map(|e| FfnVars {
                w1: vars[3 + 4 * e],
                b1: vars[4 + 4 * e],
                w2: vars[5 + 4 * e],
                b2: vars[6 + 4 * e],
            })
            .collect(),
    }
}

fn router_weights(ts: &[Tensor]) -> Vec<Vec<f64>> {
    let (x, w, b) = (ts[0].data(), ts[1].data(), ts[2].data());
    (0..T)
        .map(|t| {
            let logits: Vec<f64> = (0..K)
                .map(|e| b[e] + (0..D).map(|i| x[t * D + i] * w[i * K + e]).sum::<f64>())
                .collect();
            softmax(&logits)
        })
        .collect()
}

pub fn check_weights_sum_to_one() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k = rng.gen_range(1..=8);
        let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let (w, _) = route(&logits, 1);
        worst = worst.max((w.iter().sum::<f64>() - 1.0).abs());
    }
    let ts = layer_tensors(2, [0.0; K]);
    for row in router_weights(&ts) {
        worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
    }
    Check::new(worst <= 1e-12, format!("max |sum - 1| = {worst:.1e}"))
}

/// Expert calls counted by the layer and by the whole model.
pub fn check_expert_calls() -> Check {
    let mut ok = true;
    let mut detail = Vec::new();
    for k in 1..=K {
        let ts = layer_tensors(3, [0.0; K]);
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().enumerate().map(|(i, t)| g.param(i, t)).collect();
        let moe = bind(&vars);
        let mut stats = RoutingStats::default();
        moe.forward(
            &mut g,
            vars[0],
            RouterConfig::new(K, k).unwrap(),
            0,
            &mut stats,
        )
        .unwrap();
        ok &= stats.expert_calls == T * k && stats.routed_tokens == T;
        ok &= stats.histogram[0].iter().sum::<usize>() == T * k;

        let model = PolicyModel::new(PolicyConfig {
            vocab_size: 10,
            d_model: 8,
            n_layers: 4,
            n_heads: 2,
            d_ff: 8,
            max_context: 32,
            moe: true,
            router: RouterConfig::new(K, k).unwrap(),
            init_seed: 7,
        })
        .unwrap();
        let tokens = [2, 5, 7, 9, 3, 4, 4, 8, 0];
        let mut g = Graph::new();
        let vars = model.bind(&mut g, true);
        let (_, stats) = model.forward_logits(&mut g, &vars, &tokens).unwrap();
        let moe_layers = model.config().num_moe_blocks();
        ok &= stats.routed_tokens == tokens.len() * moe_layers;
        ok &= stats.expert_calls == tokens.len() * moe_layers * k;
        detail.push(format!(
            "k={k}: {} calls for {} tokens",
            stats.expert_calls, stats.routed_tokens
        ));
    }
    Check::new(ok, detail.join(", "))
}

/// With k = K the layer equals the softmax-weighted sum of every expert
/// evaluated on every token.
pub fn check_dense_equivalence() -> Check {
    let ts = layer_tensors(4, [0.3, -0.2, 0.0, 0.1]);
    let mut g = Graph::new();
    let vars: Vec<Var> = ts.iter().enumerate().map(|(i, t)| g.param(i, t)).collect();
    let moe = bind(&vars);
    let mut stats = RoutingStats::default();
    let out = moe
        .forward(
            &mut g,
            vars[0],
            RouterConfig::new(K, K).unwrap(),
            0,
            &mut stats,
        )
        .unwrap();
    let sparse = g.value(out).to_vec();
    let weights = router_weights(&ts);
    let mut dense = vec![0.0; T * D];
    for (e, expert) in moe.experts.iter().enumerate() {
        let y = expert.forward(&mut g, vars[0]).unwrap();
        let y = g.value(y);
        for t in 0..T {
            for j in 0..D {
                dense[t * D + j] += weights[t][e] * y[t * D + j];
            }
        }
    }
    let worst = sparse
        .iter()
        .zip(&dense)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Check::new(
        worst <= 1e-12,
        format!("max |sparse - dense| = {worst:.1e}"),
    )
}

/// Experts 2 and 3 carry a large negative router bias, so top-1 never
/// selects them and no gradient may reach their weights.
pub fn check_unselected_gradients() -> Check {
    let ts = layer_tensors(5, [2.0, 2.0, -20.0, -20.0]);
    let mut g = Graph::new();
    let vars: Vec<Var> = ts.iter().enumerate().map(|(i, t)| g.param(i, t)).collect();
    let moe = bind(&vars);
    let mut stats = RoutingStats::default();
    let out = moe
        .forward(
            &mut g,
            vars[0],
            RouterConfig::new(K, 1).unwrap(),
            0,
            &mut stats,
        )
        .unwrap();
    let sq = g.mul(out, out).unwrap();
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    let used = &stats.histogram[0];
    let mut ok = used[2] == 0 && used[3] == 0 && used[0] + used[1] == T;
    for e in 0..K {
        let touched = (3 + 4 * e..7 + 4 * e)
            .any(|slot| grads.get(slot).is_some_and(|g| g.iter().any(|&v| v != 0.0)));
        ok &= touched == (used[e] > 0);
    }
    Check::new(
        ok,
        format!("histogram {used:?}; gradients only on selected experts"),
    )
}

pub fn check_tie_breaking() -> Check {
    let mut ok = true;
    for k in 1..=K {
        ok &= top_k_indices(&[0.25; K], k) == (0..k).collect::<Vec<_>>();
    }
    ok &= route(&[1.0, 3.0, 3.0, 0.0], 1).1 == vec![1];
    ok &= route(&[1.0, 3.0, 3.0, 0.0], 2).1 == vec![1, 2];
    ok &= route(&[0.0, 2.0, 2.0, 2.0], 2).1 == vec![1, 2];
    // repeated runs route identically
    let ts = layer_tensors(6, [0.0; K]);
    let run = || {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().enumerate().map(|(i, t)| g.param(i, t)).collect();
        let moe = bind(&vars);
        let mut stats = RoutingStats::default();
        let out = moe
            .forward(
                &mut g,
                vars[0],
                RouterConfig::new(K, 2).unwrap(),
                0,
                &mut stats,
            )
            .unwrap();
        (g.value(out).to_vec(), stats)
    };
    ok &= run() == run();
    Check::new(ok, "ties resolve to the lowest expert index")
}

pub fn check_all() -> Check {
    Check::all(vec![
        ("weights", check_weights_sum_to_one()),
        ("expert calls", check_expert_calls()),
        ("k = K", check_dense_equivalence()),
        ("unselected experts", check_unselected_gradients()),
        ("tie-breaking", check_tie_breaking()),
    ])
}
