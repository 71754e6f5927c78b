//! Desk-scale social-navigation instruction policy: a sparse mixture-of-experts
//! token model trained with supervised fine-tuning, GSPO/GRPO reinforcement
//! fine-tuning against text-similarity rewards, and multi-turn MoE fine-tuning.

pub mod autodiff;
pub mod error;

pub use error::{Error, Result};
pub mod config;
pub mod embedder;
pub mod experiment;
pub mod metrics;
pub mod navsim;
pub mod optim;
pub mod pipeline;
pub mod policy;
pub mod reward;
pub mod rft;
pub mod tokenizer;
