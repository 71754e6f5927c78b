//! Run configuration: a TOML file of flat keys grouped in sections.
//!
//! ```toml
//! [run]
//! seed = 7
//!
//! [model]
//! d_model = 64
//! num_experts = 4
//! top_k = 1
//!
//! [sft]
//! epochs = 20
//! lr = 0.003
//! ```
//!
//! Missing keys take the defaults below; unknown keys are rejected. The
//! config hash is the SHA-256 of the canonical serialization, so two files
//! that parse to the same settings share a hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{EvalConfig, SinkhornConfig};
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::pipeline::{Stage, StagePlan, TurnMode};
use crate::policy::{PolicyConfig, RouterConfig};
use crate::reward::RewardKind;
use crate::rft::{RftAlgorithm, RftConfig};
use crate::tokenizer::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Base seed; stage seeds are derived from it.
    pub seed: u64,
    /// Conversation format for every stage and for evaluation.
    pub turns: TurnMode,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 7,
            turns: TurnMode::Multi,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_n: usize,
    pub test_n: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train_n: 64,
            test_n: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_context: usize,
    pub moe: bool,
    pub num_experts: usize,
    pub top_k: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let p = PolicyConfig::default();
        Self {
            d_model: p.d_model,
            n_layers: p.n_layers,
            n_heads: p.n_heads,
            d_ff: p.d_ff,
            max_context: p.max_context,
            moe: p.moe,
            num_experts: p.router.num_experts,
            top_k: p.router.top_k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerName {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisedSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerName,
    pub momentum: f64,
    pub max_grad_norm: f64,
}

impl SupervisedSection {
    fn desk(lr: f64) -> Self {
        Self {
            epochs: 20,
            lr,
            batch_size: 8,
            optimizer: OptimizerName::Adam,
            momentum: 0.0,
            max_grad_norm: 1.0,
        }
    }
}

impl Default for SupervisedSection {
    fn default() -> Self {
        Self::desk(3e-3)
    }
}

/// Same keys as [`SupervisedSection`] with a smaller default learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "MoeftKeys", into = "MoeftKeys")]
pub struct MoeftSection(pub SupervisedSection);

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct MoeftKeys {
    epochs: usize,
    lr: f64,
    batch_size: usize,
    optimizer: OptimizerName,
    momentum: f64,
    max_grad_norm: f64,
}

impl Default for MoeftKeys {
    fn default() -> Self {
        MoeftSection::default().into()
    }
}

impl From<MoeftKeys> for MoeftSection {
    fn from(k: MoeftKeys) -> Self {
        MoeftSection(SupervisedSection {
            epochs: k.epochs,
            lr: k.lr,
            batch_size: k.batch_size,
            optimizer: k.optimizer,
            momentum: k.momentum,
            max_grad_norm: k.max_grad_norm,
        })
    }
}

impl From<MoeftSection> for MoeftKeys {
    fn from(MoeftSection(s): MoeftSection) -> Self {
        MoeftKeys {
            epochs: s.epochs,
            lr: s.lr,
            batch_size: s.batch_size,
            optimizer: s.optimizer,
            momentum: s.momentum,
            max_grad_norm: s.max_grad_norm,
        }
    }
}

impl Default for MoeftSection {
    fn default() -> Self {
        MoeftSection(SupervisedSection::desk(3e-4))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RftSection {
    pub reward: RewardKind,
    pub algorithm: RftAlgorithm,
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub max_response_len: usize,
    pub std_floor: f64,
}

impl Default for RftSection {
    fn default() -> Self {
        let r = RftConfig::default();
        Self {
            reward: RewardKind::Ssr,
            algorithm: r.algorithm,
            group_size: r.group_size,
            clip_eps: r.clip_eps,
            kl_beta: r.kl_beta,
            // The reference learning rate is far too small to move a
            // randomly initialized desk model within three epochs.
            lr: 0.1,
            momentum: r.momentum,
            epochs: r.epochs,
            batch_size: r.batch_size,
            temperature: r.temperature,
            max_response_len: r.max_response_len,
            std_floor: r.std_floor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub max_response_len: usize,
    pub warmup: usize,
    pub sinkhorn_lambda: f64,
    pub sinkhorn_tolerance: f64,
    pub sinkhorn_max_iterations: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self {
            max_response_len: e.max_response_len,
            warmup: e.warmup,
            sinkhorn_lambda: e.sinkhorn.lambda,
            sinkhorn_tolerance: e.sinkhorn.tolerance,
            sinkhorn_max_iterations: e.sinkhorn.max_iterations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderSection {
    pub seed: u64,
    /// Optional `word<TAB>cluster` lexicon replacing the built-in one.
    pub lexicon: String,
}

impl Default for EmbedderSection {
    fn default() -> Self {
        Self {
            seed: crate::embedder::DEFAULT_EMBED_SEED,
            lexicon: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub sft: SupervisedSection,
    pub rft: RftSection,
    pub moeft: MoeftSection,
    pub eval: EvalSection,
    pub embedder: EmbedderSection,
}

/// Seed of one stage, derived from the run seed.
pub fn stage_seed(base: u64, stage: Stage) -> u64 {
    crate::navsim::derive_seed(base, &stage.to_string(), 0)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Canonical TOML text: every key, defaults filled in.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.train_n == 0 || self.data.test_n == 0 {
            return Err(Error::Config(
                "data.train_n and data.test_n must be positive".into(),
            ));
        }
        self.policy_config(0).validate()?;
        for stage in [Stage::Sft, Stage::Moeft] {
            self.stage_plan(stage).validate()?;
        }
        self.rft_config().validate()?;
        self.eval_config().sinkhorn.validate()?;
        if self.rft.reward == RewardKind::Ssr && !self.embedder.lexicon.is_empty() {
            let p = Path::new(&self.embedder.lexicon);
            if !p.exists() {
                return Err(Error::Config(format!(
                    "embedder.lexicon: file {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    pub fn policy_config(&self, init_seed: u64) -> PolicyConfig {
        let m = &self.model;
        PolicyConfig {
            vocab_size: Vocab::navigation().len(),
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            max_context: m.max_context,
            moe: m.moe,
            router: RouterConfig {
                num_experts: m.num_experts,
                top_k: m.top_k,
            },
            init_seed,
        }
    }

    /// Policy for this run, initialized from the run seed.
    pub fn initial_policy_config(&self) -> PolicyConfig {
        self.policy_config(self.run.seed)
    }

    pub fn stage_plan(&self, stage: Stage) -> StagePlan {
        let s = match stage {
            Stage::Moeft => &self.moeft.0,
            _ => &self.sft,
        };
        StagePlan {
            stage,
            epochs: s.epochs,
            batch_size: s.batch_size,
            optimizer: OptimizerConfig {
                kind: match s.optimizer {
                    OptimizerName::Adam => OptimizerKind::adam(),
                    OptimizerName::Sgd => OptimizerKind::Sgd {
                        momentum: s.momentum,
                    },
                },
                lr: s.lr,
                max_grad_norm: Some(s.max_grad_norm),
            },
            turns: self.run.turns,
            seed: stage_seed(self.run.seed, stage),
        }
    }

    pub fn rft_config(&self) -> RftConfig {
        let r = &self.rft;
        RftConfig {
            group_size: r.group_size,
            clip_eps: r.clip_eps,
            kl_beta: r.kl_beta,
            lr: r.lr,
            momentum: r.momentum,
            epochs: r.epochs,
            batch_size: r.batch_size,
            temperature: r.temperature,
            max_response_len: r.max_response_len,
            algorithm: r.algorithm,
            std_floor: r.std_floor,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        let e = &self.eval;
        EvalConfig {
            turns: self.run.turns,
            max_response_len: e.max_response_len,
            warmup: e.warmup,
            sinkhorn: SinkhornConfig {
                lambda: e.sinkhorn_lambda,
                tolerance: e.sinkhorn_tolerance,
                max_iterations: e.sinkhorn_max_iterations,
            },
        }
    }

    pub fn embedder(&self) -> Result<crate::embedder::EmbeddingProvider> {
        use crate::embedder::{builtin_lexicon, EmbeddingProvider};
        if self.embedder.lexicon.is_empty() {
            EmbeddingProvider::from_lexicon(&builtin_lexicon(), self.embedder.seed)
        } else {
            EmbeddingProvider::from_file(Path::new(&self.embedder.lexicon), self.embedder.seed)
        }
    }
}
