//! Byte-identical artifacts from identical seeds and configs.

use std::path::Path;

use socialnav_core::config::RunConfig;
use socialnav_core::experiment::{Experiment, StageLog};
use socialnav_core::metrics::{write_examples_csv, write_summary_csv, write_timing_csv};
use socialnav_core::navsim::Dataset;
use socialnav_core::pipeline::{write_epoch_log, write_rft_log, Stage};
use socialnav_core::policy::{load_checkpoint, save_checkpoint};

use super::Check;

pub const TINY: &str = r#"
[run]
seed = 3
[data]
train_n = 8
test_n = 4
[model]
d_model = 16
n_layers = 2
n_heads = 2
d_ff = 16
num_experts = 2
top_k = 1
[sft]
epochs = 2
[rft]
epochs = 1
group_size = 4
batch_size = 4
[moeft]
epochs = 1
"#;

pub fn tiny_config() -> RunConfig {
    RunConfig::from_toml(TINY).unwrap()
}

const FILES: [&str; 13] = [
    Dataset::TRAIN_FILE,
    Dataset::TEST_FILE,
    Dataset::TRAIN_AUGMENTED_FILE,
    "sft.ckpt",
    "rft.ckpt",
    "moeft.ckpt",
    "examples.csv",
    "summary.csv",
    "timing.csv",
    "sft.log.csv",
    "rft.log.csv",
    "moeft.log.csv",
    "config.toml",
];

/// Runs generation, all three stages and evaluation, writing every
/// artifact into `dir`.
pub fn run_all(cfg: &RunConfig, dir: &Path) {
    let exp = Experiment::new(cfg.clone()).unwrap();
    let hash = exp.config_hash();
    let data = exp.dataset().unwrap();
    data.write(dir, hash).unwrap();
    let data = Dataset::read(dir).unwrap();
    let mut ckpt = exp.initial_checkpoint().unwrap();
    for stage in Stage::ALL {
        let (next, log) = exp.run_stage(&ckpt, stage, &data, false, |_| {}).unwrap();
        save_checkpoint(&dir.join(format!("{stage}.ckpt")), &next).unwrap();
        let log_path = dir.join(format!("{stage}.log.csv"));
        match log {
            StageLog::Supervised(l) => {
                write_epoch_log(&log_path, hash, &l, stage == Stage::Moeft).unwrap()
            }
            StageLog::Rft(r) => write_rft_log(&log_path, hash, &r).unwrap(),
        }
        ckpt = next;
    }
    let report = exp.evaluate(&ckpt.model, &data).unwrap();
    let seed = cfg.run.seed;
    write_examples_csv(&dir.join("examples.csv"), hash, seed, &report.rows).unwrap();
    write_summary_csv(&dir.join("summary.csv"), hash, seed, &report.aggregate).unwrap();
    write_timing_csv(&dir.join("timing.csv"), hash, seed, &report.timing).unwrap();
    std::fs::write(dir.join("config.toml"), cfg.to_toml()).unwrap();
}

/// Files whose content includes wall-clock time and so may differ.
fn timed(name: &str) -> bool {
    name == "timing.csv" || name.ends_with(".log.csv")
}

pub fn check() -> Check {
    let cfg = tiny_config();
    let hash = cfg.hash();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_all(&cfg, a.path());
    run_all(&cfg, b.path());
    let mut identical = 0;
    let mut problems = Vec::new();
    for f in FILES {
        let (x, y) = (
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
        );
        if !timed(f) {
            if x == y {
                identical += 1;
            } else {
                problems.push(format!("{f} differs"));
            }
        }
        let text = String::from_utf8_lossy(&x);
        let carries_hash = if f == "config.toml" {
            RunConfig::from_toml(&text).unwrap().hash() == hash
        } else if f.ends_with(".ckpt") {
            load_checkpoint(&a.path().join(f)).unwrap().meta.config_hash == hash
        } else {
            text.contains(&hash)
        };
        if !carries_hash {
            problems.push(format!("{f} lacks the config hash"));
        }
    }
    // A different seed must change the artifacts.
    let mut other = cfg.clone();
    other.run.seed += 1;
    let c = tempfile::tempdir().unwrap();
    let exp = Experiment::new(other).unwrap();
    exp.dataset()
        .unwrap()
        .write(c.path(), exp.config_hash())
        .unwrap();
    if std::fs::read(c.path().join(Dataset::TRAIN_FILE)).unwrap()
        == std::fs::read(a.path().join(Dataset::TRAIN_FILE)).unwrap()
    {
        problems.push("a different seed produced the same dataset".into());
    }
    let untimed = FILES.iter().filter(|f| !timed(f)).count();
    Check::new(
        problems.is_empty(),
        if problems.is_empty() {
            format!("{identical}/{untimed} artifacts byte-identical across runs; all {} embed the config hash", FILES.len())
        } else {
            problems.join(", ")
        },
    )
}
