//! Line-delimited JSON dataset files.
//!
//! Each file starts with one header object followed by one record per line:
//!
//! ```text
//! {"version":1,"split":"train","seed":7,"config_hash":"…","records":64}
//! {"version":1,"id":"train-0000","seed":…,"difficulty":"clear","turns":[{"role":"prompt","text":"…"},…],"action":"…"}
//! ```

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{describe_scene, generate_scene, ground_truth_action, Conversation, Difficulty, Style};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub split: String,
    pub seed: u64,
    pub config_hash: String,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub version: u32,
    pub id: String,
    pub seed: u64,
    pub difficulty: Difficulty,
    pub turns: Conversation,
    pub action: String,
}

/// Train/test split plus the style-augmented training set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub seed: u64,
    pub train: Vec<DatasetRecord>,
    pub test: Vec<DatasetRecord>,
    pub train_augmented: Vec<DatasetRecord>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Stable per-item seed derived from a base seed, a tag and an index.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    splitmix64(splitmix64(base ^ fnv1a(tag)).wrapping_add(index))
}

fn make_record(split: &str, index: usize, seed: u64, difficulty: Difficulty) -> DatasetRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = generate_scene(&mut rng, difficulty);
    let style = Style::random(&mut rng);
    let action = ground_truth_action(&scene);
    DatasetRecord {
        version: FORMAT_VERSION,
        id: format!("{split}-{index:04}"),
        seed,
        difficulty,
        turns: Conversation::multi_turn(&describe_scene(&scene, style), &action),
        action: action.render(),
    }
}

/// Appends one style-augmented copy of every record (same seed, same action).
pub fn augment_records(records: &[DatasetRecord], seed: u64) -> Vec<DatasetRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "augment", 0));
    let mut out = records.to_vec();
    out.extend(records.iter().map(|r| DatasetRecord {
        id: format!("{}-aug", r.id),
        turns: r.turns.augment(&mut rng),
        ..r.clone()
    }));
    out
}

/// Generates disjoint train/test splits balanced over the difficulties.
pub fn build_dataset(n_train: usize, n_test: usize, seed: u64) -> Result<Dataset> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::Config(
            "dataset splits must each hold at least one scene".into(),
        ));
    }
    let mut used = HashSet::new();
    let mut split = |name: &str, n: usize| -> Vec<DatasetRecord> {
        (0..n)
            .map(|i| {
                let mut attempt = 0u64;
                let scene_seed = loop {
                    let s = derive_seed(seed, name, (i as u64) | (attempt << 32));
                    if used.insert(s) {
                        break s;
                    }
                    attempt += 1;
                };
                make_record(name, i, scene_seed, Difficulty::ALL[i % 3])
            })
            .collect()
    };
    let train = split("train", n_train);
    let test = split("test", n_test);
    let train_augmented = augment_records(&train, seed);
    Ok(Dataset {
        seed,
        train,
        test,
        train_augmented,
    })
}

pub fn write_records(path: &Path, header: &DatasetHeader, records: &[DatasetRecord]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let line = serde_json::to_string(header).map_err(|e| Error::format("dataset header", e))?;
    writeln!(w, "{line}").map_err(io)?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::format("dataset record", e))?;
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_records(path: &Path) -> Result<(DatasetHeader, Vec<DatasetRecord>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let what = |line: usize| format!("{} line {line}", path.display());
    let first = lines
        .next()
        .ok_or_else(|| Error::format(what(1), "missing header"))?
        .map_err(|e| Error::io(path, e))?;
    let header: DatasetHeader =
        serde_json::from_str(&first).map_err(|e| Error::format(what(1), e))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::format(
            what(1),
            format!("unsupported version {}", header.version),
        ));
    }
    let mut records = Vec::with_capacity(header.records);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: DatasetRecord =
            serde_json::from_str(&line).map_err(|e| Error::format(what(i + 2), e))?;
        if r.version != FORMAT_VERSION {
            return Err(Error::format(
                format!("record {}", r.id),
                format!("unsupported version {}", r.version),
            ));
        }
        records.push(r);
    }
    if records.len() != header.records {
        return Err(Error::format(
            path.display().to_string(),
            format!(
                "header declares {} records, found {}",
                header.records,
                records.len()
            ),
        ));
    }
    Ok((header, records))
}

impl Dataset {
    pub const TRAIN_FILE: &'static str = "train.jsonl";
    pub const TEST_FILE: &'static str = "test.jsonl";
    pub const TRAIN_AUGMENTED_FILE: &'static str = "train_augmented.jsonl";

    fn header(&self, split: &str, records: usize, config_hash: &str) -> DatasetHeader {
        DatasetHeader {
            version: FORMAT_VERSION,
            split: split.into(),
            seed: self.seed,
            config_hash: config_hash.into(),
            records,
        }
    }

    pub fn write(&self, dir: &Path, config_hash: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (file, split, recs) in [
            (Self::TRAIN_FILE, "train", &self.train),
            (Self::TEST_FILE, "test", &self.test),
            (
                Self::TRAIN_AUGMENTED_FILE,
                "train_augmented",
                &self.train_augmented,
            ),
        ] {
            write_records(
                &dir.join(file),
                &self.header(split, recs.len(), config_hash),
                recs,
            )?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let (h, train) = read_records(&dir.join(Self::TRAIN_FILE))?;
        let (_, test) = read_records(&dir.join(Self::TEST_FILE))?;
        let (_, train_augmented) = read_records(&dir.join(Self::TRAIN_AUGMENTED_FILE))?;
        Ok(Self {
            seed: h.seed,
            train,
            test,
            train_augmented,
        })
    }
}
