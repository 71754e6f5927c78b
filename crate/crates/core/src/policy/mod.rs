//! Autoregressive token policy with alternating dense and sparse-MoE
//! feed-forward blocks.

mod checkpoint;
mod moe;
mod sampling;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use moe::{route, top_k_indices, FfnVars, MoeVars, RouterConfig, RoutingStats};
pub use sampling::{sample_response, Decoding, SampledResponse};

use crate::autodiff::{log_softmax, Graph, Tensor, Var, LAYER_NORM_EPS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Hidden width of every feed-forward network (dense or expert).
    pub d_ff: usize,
    pub max_context: usize,
    /// When false, every block uses a dense feed-forward network.
    pub moe: bool,
    pub router: RouterConfig,
    pub init_seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            vocab_size: crate::tokenizer::Vocab::navigation().len(),
            d_model: 64,
            n_layers: 4,
            n_heads: 2,
            d_ff: 128,
            max_context: 256,
            moe: true,
            router: RouterConfig {
                num_experts: 4,
                top_k: 1,
            },
            init_seed: 0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_context", self.max_context),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "n_heads ({}) must divide d_model ({})",
                self.n_heads, self.d_model
            )));
        }
        self.router.validate()
    }

    /// Blocks with odd index carry an MoE feed-forward when `moe` is set.
    pub fn is_moe_block(&self, block: usize) -> bool {
        self.moe && block % 2 == 1
    }

    pub fn num_moe_blocks(&self) -> usize {
        (0..self.n_layers).filter(|&b| self.is_moe_block(b)).count()
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// Named parameter registry in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamRegistry {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamRegistry {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(|i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// One line per parameter: name, shape and element count, then the total.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            out.push_str(&format!("{n}\t{:?}\t{}\n", t.shape(), t.numel()));
        }
        out.push_str(&format!("total\t{}\n", self.count()));
        out
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }
}

/// Per-tensor initialization seed. Expert 0 of an MoE block shares its key
/// with the dense feed-forward the block would otherwise carry, so a
/// single-expert model starts from the same weights as its dense twin.
fn init_key(name: &str) -> String {
    name.replace(".moe.experts.0.", ".ffn.")
}

fn init_seed(seed: u64, name: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(init_key(name).as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn build_tensor(seed: u64, name: &str, shape: Vec<usize>, init: Init) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = match init {
        Init::Zeros => vec![0.0; numel],
        Init::Ones => vec![1.0; numel],
        Init::Normal(std) => {
            let mut rng = ChaCha8Rng::seed_from_u64(init_seed(seed, name));
            let normal = Normal::new(0.0, std).expect("finite std");
            (0..numel).map(|_| normal.sample(&mut rng)).collect()
        }
    };
    Tensor::new(shape, data).expect("init shape").with_grad()
}

fn param_specs(cfg: &PolicyConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let f = cfg.d_ff;
    let w_std = 1.0 / (d as f64).sqrt();
    let out_std = w_std / (2.0 * cfg.n_layers as f64).sqrt();
    let mut specs = vec![
        (
            "embed.tokens".to_string(),
            vec![cfg.vocab_size, d],
            Init::Normal(0.1),
        ),
        (
            "embed.positions".to_string(),
            vec![cfg.max_context, d],
            Init::Normal(0.1),
        ),
    ];
    let ffn = |prefix: &str| {
        vec![
            (format!("{prefix}.w1"), vec![d, f], Init::Normal(w_std)),
            (format!("{prefix}.b1"), vec![f], Init::Zeros),
            (
                format!("{prefix}.w2"),
                vec![f, d],
                Init::Normal(out_std * (d as f64 / f as f64).sqrt()),
            ),
            (format!("{prefix}.b2"), vec![d], Init::Zeros),
        ]
    };
    for b in 0..cfg.n_layers {
        let p = format!("blocks.{b}");
        specs.push((format!("{p}.ln1.gain"), vec![d], Init::Ones));
        specs.push((format!("{p}.ln1.bias"), vec![d], Init::Zeros));
        for m in ["wq", "wk", "wv"] {
            specs.push((format!("{p}.attn.{m}"), vec![d, d], Init::Normal(w_std)));
        }
        specs.push((format!("{p}.attn.wo"), vec![d, d], Init::Normal(out_std)));
        for bias in ["bq", "bk", "bv", "bo"] {
            specs.push((format!("{p}.attn.{bias}"), vec![d], Init::Zeros));
        }
        specs.push((format!("{p}.ln2.gain"), vec![d], Init::Ones));
        specs.push((format!("{p}.ln2.bias"), vec![d], Init::Zeros));
        if cfg.is_moe_block(b) {
            let k = cfg.router.num_experts;
            specs.push((format!("{p}.moe.router.w"), vec![d, k], Init::Normal(w_std)));
            specs.push((format!("{p}.moe.router.b"), vec![k], Init::Zeros));
            for e in 0..k {
                specs.extend(ffn(&format!("{p}.moe.experts.{e}")));
            }
        } else {
            specs.extend(ffn(&format!("{p}.ffn")));
        }
    }
    specs.push(("final_ln.gain".into(), vec![d], Init::Ones));
    specs.push(("final_ln.bias".into(), vec![d], Init::Zeros));
    specs.push((
        "head.w".into(),
        vec![d, cfg.vocab_size],
        Init::Normal(w_std),
    ));
    specs.push(("head.b".into(), vec![cfg.vocab_size], Init::Zeros));
    specs
}

#[derive(Debug, Clone)]
struct AttnVars {
    ln_g: Var,
    ln_b: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    bq: Var,
    bk: Var,
    bv: Var,
    bo: Var,
}

#[derive(Debug, Clone)]
enum FfnKind {
    Dense(FfnVars),
    Moe(MoeVars),
}

#[derive(Debug, Clone)]
struct BlockVars {
    attn: AttnVars,
    ln2_g: Var,
    ln2_b: Var,
    ffn: FfnKind,
}

/// Graph handles for every parameter of a model.
#[derive(Debug, Clone)]
pub struct ModelVars {
    tok: Var,
    pos: Var,
    blocks: Vec<BlockVars>,
    lnf_g: Var,
    lnf_b: Var,
    head_w: Var,
    head_b: Var,
}

/// Output of a forward pass: hidden states and routing counters.
#[derive(Debug)]
pub struct Forward {
    /// Final (post layer-norm) hidden states, `T x d_model`.
    pub hidden: Var,
    pub stats: RoutingStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    config: PolicyConfig,
    params: ParamRegistry,
}

impl PolicyModel {
    pub fn new(config: PolicyConfig) -> Result<Self> {
        config.validate()?;
        let (names, tensors) = param_specs(&config)
            .into_iter()
            .map(|(name, shape, init)| {
                let t = build_tensor(config.init_seed, &name, shape, init);
                (name, t)
            })
            .unzip();
        Ok(Self {
            config,
            params: ParamRegistry { names, tensors },
        })
    }

    /// Builds a model from explicit named tensors, checking them against
    /// the layout `config` implies.
    pub fn from_parts(config: PolicyConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != named.len() {
            return Err(Error::format(
                "parameter set",
                format!("expected {} tensors, got {}", specs.len(), named.len()),
            ));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        for ((spec_name, spec_shape, _), (name, t)) in specs.into_iter().zip(named) {
            if spec_name != name || spec_shape != t.shape() {
                return Err(Error::format(
                    "parameter set",
                    format!(
                        "expected {spec_name} {spec_shape:?}, got {name} {:?}",
                        t.shape()
                    ),
                ));
            }
            names.push(name);
            tensors.push(t.with_grad());
        }
        Ok(Self {
            config,
            params: ParamRegistry { names, tensors },
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamRegistry {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamRegistry {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub fn has_moe(&self) -> bool {
        self.config.num_moe_blocks() > 0
    }

    /// Registers every parameter in `g`, as trainable leaves or as constants.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> ModelVars {
        let vars: Vec<Var> = self
            .params
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if trainable {
                    g.param(i, t)
                } else {
                    g.frozen(t)
                }
            })
            .collect();
        let get = |name: &str| {
            vars[self
                .params
                .index_of(name)
                .unwrap_or_else(|| panic!("parameter {name} missing"))]
        };
        let ffn_vars = |p: &str| FfnVars {
            w1: get(&format!("{p}.w1")),
            b1: get(&format!("{p}.b1")),
            w2: get(&format!("{p}.w2")),
            b2: get(&format!("{p}.b2")),
        };
        let blocks = (0..self.config.n_layers)
            .map(|b| {
                let p = format!("blocks.{b}");
                let a = |s: &str| get(&format!("{p}.{s}"));
                let ffn = if self.config.is_moe_block(b) {
                    FfnKind::Moe(MoeVars {
                        router_w: a("moe.router.w"),
                        router_b: a("moe.router.b"),
                        experts: (0..self.config.router.num_experts)
                            .map(|e| ffn_vars(&format!("{p}.moe.experts.{e}")))
                            .collect(),
                    })
                } else {
                    FfnKind::Dense(ffn_vars(&format!("{p}.ffn")))
                };
                BlockVars {
                    attn: AttnVars {
                        ln_g: a("ln1.gain"),
                        ln_b: a("ln1.bias"),
                        wq: a("attn.wq"),
                        wk: a("attn.wk"),
                        wv: a("attn.wv"),
                        wo: a("attn.wo"),
                        bq: a("attn.bq"),
                        bk: a("attn.bk"),
                        bv: a("attn.bv"),
                        bo: a("attn.bo"),
                    },
                    ln2_g: a("ln2.gain"),
                    ln2_b: a("ln2.bias"),
                    ffn,
                }
            })
            .collect();
        ModelVars {
            tok: get("embed.tokens"),
            pos: get("embed.positions"),
            blocks,
            lnf_g: get("final_ln.gain"),
            lnf_b: get("final_ln.bias"),
            head_w: get("head.w"),
            head_b: get("head.b"),
        }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Contract("forward needs at least one token".into()));
        }
        if tokens.len() > self.config.max_context {
            return Err(Error::Contract(format!(
                "sequence of {} tokens exceeds max context {}",
                tokens.len(),
                self.config.max_context
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Vocabulary {
                id: bad,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Runs the blocks and the final layer norm.
    pub fn forward_hidden(
        &self,
        g: &mut Graph<'_>,
        vars: &ModelVars,
        tokens: &[usize],
    ) -> Result<Forward> {
        self.check_tokens(tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let tok = g.embedding(vars.tok, tokens)?;
        let pos = g.gather_rows(vars.pos, &positions)?;
        let mut x = g.add(tok, pos)?;
        let mut stats = RoutingStats::default();
        let mut moe_layer = 0;
        for block in &vars.blocks {
            let a = &block.attn;
            let h = g.layer_norm(x, a.ln_g, a.ln_b, LAYER_NORM_EPS)?;
            let q = g.matmul(h, a.wq)?;
            let q = g.add_row(q, a.bq)?;
            let k = g.matmul(h, a.wk)?;
            let k = g.add_row(k, a.bk)?;
            let v = g.matmul(h, a.wv)?;
            let v = g.add_row(v, a.bv)?;
            let att = g.causal_attention(q, k, v, self.config.n_heads)?;
            let o = g.matmul(att, a.wo)?;
            let o = g.add_row(o, a.bo)?;
            x = g.add(x, o)?;
            let h = g.layer_norm(x, block.ln2_g, block.ln2_b, LAYER_NORM_EPS)?;
            let f = match &block.ffn {
                FfnKind::Dense(ffn) => ffn.forward(g, h)?,
                FfnKind::Moe(moe) => {
                    let out = moe.forward(g, h, self.config.router, moe_layer, &mut stats)?;
                    moe_layer += 1;
                    out
                }
            };
            x = g.add(x, f)?;
        }
        let hidden = g.layer_norm(x, vars.lnf_g, vars.lnf_b, LAYER_NORM_EPS)?;
        Ok(Forward { hidden, stats })
    }

    /// Vocabulary logits for the given rows of the hidden states.
    pub fn head(
        &self,
        g: &mut Graph<'_>,
        vars: &ModelVars,
        hidden: Var,
        rows: &[usize],
    ) -> Result<Var> {
        let h = g.gather_rows(hidden, rows)?;
        let logits = g.matmul(h, vars.head_w)?;
        g.add_row(logits, vars.head_b)
    }

    /// Next-token logits for every position, `T x V`.
    pub fn forward_logits<'a>(
        &'a self,
        g: &mut Graph<'a>,
        vars: &ModelVars,
        tokens: &[usize],
    ) -> Result<(Var, RoutingStats)> {
        let fwd = self.forward_hidden(g, vars, tokens)?;
        let rows: Vec<usize> = (0..tokens.len()).collect();
        let logits = self.head(g, vars, fwd.hidden, &rows)?;
        Ok((logits, fwd.stats))
    }

    /// Logits as plain rows (no gradients).
    pub fn logits(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let (logits, _) = self.forward_logits(&mut g, &vars, tokens)?;
        let v = self.config.vocab_size;
        Ok(g.value(logits).chunks(v).map(<[f64]>::to_vec).collect())
    }

    /// Logits for the last position only.
    pub fn last_logits(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let fwd = self.forward_hidden(&mut g, &vars, tokens)?;
        let logits = self.head(&mut g, &vars, fwd.hidden, &[tokens.len() - 1])?;
        Ok(g.value(logits).to_vec())
    }

    /// Builds the per-token log-probabilities of `response` given `prompt`
    /// as an `n x 1` graph value.
    pub fn response_logprobs<'a>(
        &'a self,
        g: &mut Graph<'a>,
        vars: &ModelVars,
        prompt: &[usize],
        response: &[usize],
    ) -> Result<(Var, RoutingStats)> {
        if response.is_empty() {
            return Err(Error::Contract("response must be non-empty".into()));
        }
        if prompt.is_empty() {
            return Err(Error::Contract("prompt must be non-empty".into()));
        }
        let mut seq = prompt.to_vec();
        seq.extend_from_slice(&response[..response.len() - 1]);
        let fwd = self.forward_hidden(g, vars, &seq)?;
        let rows: Vec<usize> = (prompt.len() - 1..seq.len()).collect();
        let logits = self.head(g, vars, fwd.hidden, &rows)?;
        let lp = g.log_softmax(logits);
        let at: Vec<(usize, usize)> = response.iter().copied().enumerate().collect();
        Ok((g.pick(lp, &at)?, fwd.stats))
    }

    /// `log pi(y | x)` and its per-token terms.
    pub fn sequence_logprob(
        &self,
        prompt: &[usize],
        response: &[usize],
    ) -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let (lp, _) = self.response_logprobs(&mut g, &vars, prompt, response)?;
        let per_token = g.value(lp).to_vec();
        Ok((per_token.iter().sum(), per_token))
    }

    pub fn snapshot(&self) -> PolicySnapshot {
        let mut frozen = self.clone();
        frozen.params.zero_grad();
        PolicySnapshot(Arc::new(frozen))
    }
}

/// Frozen deep copy of a model, used for the rollout and reference policies.
#[derive(Debug, Clone)]
pub struct PolicySnapshot(Arc<PolicyModel>);

impl PolicySnapshot {
    pub fn model(&self) -> &PolicyModel {
        &self.0
    }

    pub fn sequence_logprob(
        &self,
        prompt: &[usize],
        response: &[usize],
    ) -> Result<(f64, Vec<f64>)> {
        self.0.sequence_logprob(prompt, response)
    }

    pub fn logits(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        self.0.logits(tokens)
    }

    /// Restores a trainable model with the snapshot's parameters.
    pub fn to_model(&self) -> PolicyModel {
        (*self.0).clone()
    }
}

/// Log-softmax entry of `token` for a plain logit row.
pub fn token_logprob(logits: &[f64], token: usize) -> f64 {
    log_softmax(logits)[token]
}
