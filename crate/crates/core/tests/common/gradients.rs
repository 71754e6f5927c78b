//! Central finite differences against reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use socialnav_core::autodiff::{Graph, Tensor, Var};
use socialnav_core::policy::{PolicyConfig, PolicyModel, RouterConfig};
use socialnav_core::rft::{advantages, rft_loss, ResponseGroup, RftAlgorithm, RftConfig};
use socialnav_core::Result;

use super::Check;

pub const H: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Gradients below this magnitude are compared absolutely: the finite
/// difference itself carries roughly `1e-16 * |f| / H` of rounding noise.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

type Build = Box<dyn for<'a> Fn(&mut Graph<'a>, &[Var]) -> Result<Var>>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
    Tensor::new(shape.to_vec(), data).unwrap().with_grad()
}

/// Fixed, irregular weights so a non-scalar output reduces to a scalar
/// whose gradient touches every element differently.
fn project(g: &mut Graph<'_>, out: Var) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w = (0..n)
        .map(|i| ((i as f64 + 1.0) * 0.754_877_666).fract() - 0.4)
        .collect();
    let w = g.constant(shape, w)?;
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn eval(params: &[Tensor], build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, t)| g.param(i, t))
        .collect();
    let out = build(&mut g, &vars).unwrap();
    g.scalar(out)
}

/// Worst relative error over every input element.
pub fn max_op_error(params: &[Tensor], build: &Build) -> f64 {
    let grads = {
        let mut g = Graph::new();
        let vars: Vec<Var> = params
            .iter()
            .enumerate()
            .map(|(i, t)| g.param(i, t))
            .collect();
        let out = build(&mut g, &vars).unwrap();
        g.backward(out).unwrap()
    };
    let mut ps = params.to_vec();
    let mut worst: f64 = 0.0;
    for p in 0..ps.len() {
        for j in 0..ps[p].numel() {
            let x = ps[p].data()[j];
            ps[p].data_mut()[j] = x + H;
            let plus = eval(&ps, build);
            ps[p].data_mut()[j] = x - H;
            let minus = eval(&ps, build);
            ps[p].data_mut()[j] = x;
            let numeric = (plus - minus) / (2.0 * H);
            let analytic = grads.get(p).map_or(0.0, |g| g[j]);
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    worst
}

/// Every differentiable graph op with small random inputs, each reduced to
/// a scalar loss.
pub fn op_cases() -> Vec<(&'static str, Vec<Tensor>, Build)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut r = |shape: &[usize]| random(&mut rng, shape, 1.0);
    let mut cases: Vec<(&'static str, Vec<Tensor>, Build)> = Vec::new();
    cases.push((
        "matmul",
        vec![r(&[3, 4]), r(&[4, 2])],
        Box::new(|g, v| {
            let o = g.matmul(v[0], v[1])?;
            project(g, o)
        }),
    ));
    cases.push((
        "add",
        vec![r(&[3, 4]), r(&[3, 4])],
        Box::new(|g, v| {
            let o = g.add(v[0], v[1])?;
            project(g, o)
        }),
    ));
    cases.push((
        "sub",
        vec![r(&[3, 4]), r(&[3, 4])],
        Box::new(|g, v| {
            let o = g.sub(v[0], v[1])?;
            project(g, o)
        }),
    ));
    cases.push((
        "mul",
        vec![r(&[3, 4]), r(&[3, 4])],
        Box::new(|g, v| {
            let o = g.mul(v[0], v[1])?;
            project(g, o)
        }),
    ));
    cases.push((
        "add_row",
        vec![r(&[3, 4]), r(&[4])],
        Box::new(|g, v| {
            let o = g.add_row(v[0], v[1])?;
            project(g, o)
        }),
    ));
    cases.push((
        "mul_col",
        vec![r(&[3, 4]), r(&[3, 1])],
        Box::new(|g, v| {
            let o = g.mul_col(v[0], v[1])?;
            project(g, o)
        }),
    ));
    cases.push((
        "scale",
        vec![r(&[2, 3])],
        Box::new(|g, v| {
            let o = g.scale(v[0], -1.7);
            project(g, o)
        }),
    ));
    cases.push((
        "add_scalar",
        vec![r(&[2, 3])],
        Box::new(|g, v| {
            let o = g.add_scalar(v[0], 0.3);
            let o = g.mul(o, o)?;
            project(g, o)
        }),
    ));
    cases.push((
        "exp",
        vec![r(&[2, 3])],
        Box::new(|g, v| {
            let o = g.exp(v[0]);
            project(g, o)
        }),
    ));
    cases.push((
        "gelu",
        vec![random(&mut ChaCha8Rng::seed_from_u64(12), &[3, 4], 3.0)],
        Box::new(|g, v| {
            let o = g.gelu(v[0]);
            project(g, o)
        }),
    ));
    cases.push((
        "softmax",
        vec![r(&[3, 5])],
        Box::new(|g, v| {
            let o = g.softmax(v[0]);
            project(g, o)
        }),
    ));
    cases.push((
        "log_softmax",
        vec![r(&[3, 5])],
        Box::new(|g, v| {
            let o = g.log_softmax(v[0]);
            project(g, o)
        }),
    ));
    cases.push((
        "layer_norm",
        vec![r(&[3, 5]), r(&[5]), r(&[5])],
        Box::new(|g, v| {
            let o = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(g, o)
        }),
    ));
    cases.push((
        "sum",
        vec![r(&[2, 3])],
        Box::new(|g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum(sq))
        }),
    ));
    cases.push((
        "mean",
        vec![r(&[2, 3])],
        Box::new(|g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.mean(sq))
        }),
    ));
    cases.push((
        "gather_rows",
        vec![r(&[4, 3])],
        Box::new(|g, v| {
            let o = g.gather_rows(v[0], &[2, 0, 2, 3])?;
            project(g, o)
        }),
    ));
    cases.push((
        "embedding",
        vec![r(&[5, 3])],
        Box::new(|g, v| {
            let o = g.embedding(v[0], &[4, 1, 1])?;
            project(g, o)
        }),
    ));
    cases.push((
        "scatter_rows",
        vec![r(&[3, 2])],
        Box::new(|g, v| {
            let o = g.scatter_rows(v[0], &[3, 0, 3], 5)?;
            project(g, o)
        }),
    ));
    cases.push((
        "pick",
        vec![r(&[3, 4])],
        Box::new(|g, v| {
            let o = g.pick(v[0], &[(0, 1), (2, 3), (0, 1)])?;
            project(g, o)
        }),
    ));
    cases.push((
        "cross_entropy",
        vec![r(&[4, 5])],
        Box::new(|g, v| g.cross_entropy(v[0], &[0, 4, 2, 2])),
    ));
    cases.push((
        "causal_attention",
        vec![r(&[4, 6]), r(&[4, 6]), r(&[4, 6])],
        Box::new(|g, v| {
            let o = g.causal_attention(v[0], v[1], v[2], 2)?;
            project(g, o)
        }),
    ));
    // Ratios sit away from the clip boundaries 0.8 and 1.2: inside, above
    // with a positive advantage, below with a negative one.
    cases.push((
        "clipped_surrogate",
        vec![Tensor::new(vec![5, 1], vec![1.05, 1.4, 0.6, 0.93, 1.3])
            .unwrap()
            .with_grad()],
        Box::new(|g, v| {
            let o = g.clipped_surrogate(v[0], &[1.0, 0.7, -0.5, -1.2, -0.4], 0.2)?;
            project(g, o)
        }),
    ));
    cases
}

pub fn check_ops() -> Check {
    let parts = op_cases()
        .into_iter()
        .map(|(name, params, build)| {
            let err = max_op_error(&params, &build);
            (name, Check::new(err < TOLERANCE, format!("{err:.1e}")))
        })
        .collect();
    Check::all(parts)
}

/// A MoE model small enough for a full finite-difference sweep.
pub fn fd_model(top_k: usize) -> PolicyModel {
    PolicyModel::new(PolicyConfig {
        vocab_size: 12,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 8,
        max_context: 16,
        moe: true,
        router: RouterConfig::new(2, top_k).unwrap(),
        init_seed: 5,
    })
    .unwrap()
}

/// Two groups of four responses whose ratios land inside the clip range,
/// above it with a positive advantage, and below it with a negative one.
pub fn fd_groups(model: &PolicyModel) -> Vec<ResponseGroup> {
    let prompts = [vec![2, 5, 6, 3], vec![2, 7, 3]];
    let responses = [
        vec![vec![8, 9, 0], vec![10, 0], vec![5, 11, 4, 0], vec![0]],
        vec![vec![6, 0], vec![9, 9, 0], vec![0], vec![11, 7, 0]],
    ];
    let rewards = [1.0, 0.0, 0.5, 0.25];
    let ratios = [1.1, 0.9, 1.35, 0.7];
    let ref_offsets = [0.3, -0.2, 0.1, -0.4];
    prompts
        .iter()
        .zip(&responses)
        .map(|(prompt, resp)| {
            let mut grp = ResponseGroup {
                prompt: prompt.clone(),
                responses: resp.clone(),
                logprobs: Vec::new(),
                old_logprobs: Vec::new(),
                ref_logprobs: Vec::new(),
                rewards: rewards.to_vec(),
                advantages: advantages(&rewards, 1e-8).unwrap(),
            };
            for (i, y) in resp.iter().enumerate() {
                let (total, per_token) = model.sequence_logprob(prompt, y).unwrap();
                grp.old_logprobs
                    .push(per_token.iter().map(|lp| lp - f64::ln(ratios[i])).collect());
                grp.logprobs.push(per_token);
                grp.ref_logprobs.push(total + ref_offsets[i]);
            }
            grp
        })
        .collect()
}

/// Finite differences of the full policy-gradient loss over every model
/// parameter. Returns the worst relative error.
pub fn model_loss_error(algorithm: RftAlgorithm, top_k: usize) -> f64 {
    let mut model = fd_model(top_k);
    let groups = fd_groups(&model);
    let cfg = RftConfig {
        group_size: 4,
        kl_beta: 0.1,
        algorithm,
        ..RftConfig::default()
    };
    let (_, grads) = rft_loss(&model, &groups, &cfg).unwrap();
    let n_params = model.params().len();
    let mut worst: f64 = 0.0;
    for p in 0..n_params {
        for j in 0..model.params().tensors()[p].numel() {
            let t = &mut model.params_mut().tensors_mut()[p];
            let x = t.data()[j];
            t.data_mut()[j] = x + H;
            let plus = rft_loss(&model, &groups, &cfg).unwrap().0;
            model.params_mut().tensors_mut()[p].data_mut()[j] = x - H;
            let minus = rft_loss(&model, &groups, &cfg).unwrap().0;
            model.params_mut().tensors_mut()[p].data_mut()[j] = x;
            let numeric = (plus - minus) / (2.0 * H);
            let analytic = grads.get(p).map_or(0.0, |g| g[j]);
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    worst
}

pub fn check_model_loss() -> Check {
    let params = fd_model(1).parameter_count();
    let parts = vec![
        ("gspo top-1", model_loss_error(RftAlgorithm::Gspo, 1)),
        ("gspo top-2", model_loss_error(RftAlgorithm::Gspo, 2)),
        ("grpo top-1", model_loss_error(RftAlgorithm::Grpo, 1)),
    ]
    .into_iter()
    .map(|(name, err)| (name, Check::new(err < TOLERANCE, format!("{err:.1e}"))))
    .collect();
    let mut c = Check::all(parts);
    c.pass &= params <= 5000;
    c.detail = format!("{params} params; {}", c.detail);
    c
}
