//! Evaluation battery: token-alignment scores, sentence cosine, mover's
//! similarity via entropic optimal transport, exact match, and the timing
//! of action generation.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::embedder::{cosine, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::navsim::{DatasetRecord, Role};
use crate::pipeline::{conversation_for, TurnMode};
use crate::policy::{sample_response, Decoding, PolicyModel};
use crate::reward::{bertscore, hard_reward, normalize_text, BertScore};
use crate::tokenizer::{Vocab, BOT, EOS, USER};

/// Same computation as the semantic similarity reward, before clamping.
pub fn bertscore_metric(
    generated: &str,
    reference: &str,
    embedder: &EmbeddingProvider,
) -> BertScore {
    bertscore(generated, reference, embedder)
}

fn tokens(s: &str) -> Vec<String> {
    normalize_text(s)
        .split(' ')
        .filter(|w| !w.is_empty())
        .map(String::from)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SentenceCosine {
    pub value: f64,
    /// Either text was empty; `value` is then 0.
    pub degenerate: bool,
}

pub fn sentence_cosine(a: &str, b: &str, embedder: &EmbeddingProvider) -> SentenceCosine {
    let (ta, tb) = (tokens(a), tokens(b));
    match (embedder.embed_sentence(&ta), embedder.embed_sentence(&tb)) {
        (Ok(x), Ok(y)) => SentenceCosine {
            value: cosine(&x, &y),
            degenerate: false,
        },
        _ => SentenceCosine {
            value: 0.0,
            degenerate: true,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornConfig {
    /// Entropic regularization strength.
    pub lambda: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            tolerance: 1e-9,
            max_iterations: 1000,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.tolerance > 0.0 && self.max_iterations > 0) {
            return Err(Error::Config(
                "sinkhorn lambda, tolerance and max_iterations must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub rows: usize,
    pub cols: usize,
    /// Row-major plan.
    pub plan: Vec<f64>,
    /// `sum_ij P_ij C_ij`.
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Largest absolute deviation of a row or column sum from its target.
    pub marginal_error: f64,
}

impl TransportPlan {
    pub fn row_sums(&self) -> Vec<f64> {
        self.plan
            .chunks(self.cols)
            .map(|r| r.iter().sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self.plan[i * self.cols + j]).sum())
            .collect()
    }
}

/// Plain scaling iterations before switching to Newton steps.
const SCALING_ITERATIONS: usize = 50;

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Gaussian elimination with partial pivoting; `None` if singular.
fn solve_dense(mut a: Vec<f64>, mut rhs: Vec<f64>) -> Option<Vec<f64>> {
    let n = rhs.len();
    for col in 0..n {
        let piv =
            (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        if a[piv * n + col].abs() < 1e-300 {
            return None;
        }
        if piv != col {
            for k in 0..n {
                a.swap(piv * n + k, col * n + k);
            }
            rhs.swap(piv, col);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            if f != 0.0 {
                for k in col..n {
                    a[row * n + k] -= f * a[col * n + k];
                }
                rhs[row] -= f * rhs[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row * n + k] * x[k]).sum();
        x[row] = (rhs[row] - s) / a[row * n + row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Dual potentials `(f, g)` with plan `P_ij = exp((f_i + g_j - C_ij) / lambda)`.
struct Dual<'c> {
    cost: &'c [f64],
    n: usize,
    m: usize,
    lambda: f64,
}

impl Dual<'_> {
    fn plan(&self, f: &[f64], g: &[f64]) -> Vec<f64> {
        (0..self.n * self.m)
            .map(|idx| ((f[idx / self.m] + g[idx % self.m] - self.cost[idx]) / self.lambda).exp())
            .collect()
    }

    fn sums(&self, p: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let rows = p.chunks(self.m).map(|r| r.iter().sum()).collect();
        let cols = (0..self.m)
            .map(|j| (0..self.n).map(|i| p[i * self.m + j]).sum())
            .collect();
        (rows, cols)
    }

    fn marginal_error(&self, p: &[f64]) -> f64 {
        let (a, b) = (1.0 / self.n as f64, 1.0 / self.m as f64);
        let (rows, cols) = self.sums(p);
        let r = rows.iter().map(|s| (s - a).abs());
        let c = cols.iter().map(|s| (s - b).abs());
        r.chain(c).fold(0.0, f64::max)
    }

    /// One row then one column scaling update, in log space.
    fn scale(&self, f: &mut [f64], g: &mut [f64]) {
        let (n, m, lam) = (self.n, self.m, self.lambda);
        let (la, lb) = (-(n as f64).ln(), -(m as f64).ln());
        for i in 0..n {
            let row = (0..m).map(|j| (g[j] - self.cost[i * m + j]) / lam);
            f[i] = lam * (la - log_sum_exp(row));
        }
        for j in 0..m {
            let col = (0..n).map(|i| (f[i] - self.cost[i * m + j]) / lam);
            g[j] = lam * (lb - log_sum_exp(col));
        }
    }

    /// Newton direction on the marginal equations. The last column
    /// potential is pinned because the potentials are defined up to a
    /// shared constant.
    fn newton_direction(&self, p: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        let (n, m, lam) = (self.n, self.m, self.lambda);
        let (rows, cols) = self.sums(p);
        let dim = n + m - 1;
        let mut jac = vec![0.0; dim * dim];
        let mut rhs = vec![0.0; dim];
        for i in 0..n {
            jac[i * dim + i] = rows[i];
            for j in 0..m - 1 {
                jac[i * dim + n + j] = p[i * m + j];
            }
            rhs[i] = -lam * (rows[i] - 1.0 / n as f64);
        }
        for j in 0..m - 1 {
            let r = n + j;
            for i in 0..n {
                jac[r * dim + i] = p[i * m + j];
            }
            jac[r * dim + r] = cols[j];
            rhs[r] = -lam * (cols[j] - 1.0 / m as f64);
        }
        let x = solve_dense(jac, rhs)?;
        let mut dg = x[n..].to_vec();
        dg.push(0.0);
        Some((x[..n].to_vec(), dg))
    }
}

/// Entropic optimal transport between uniform weights for an `n x m` cost
/// matrix, by Sinkhorn scaling followed by Newton steps on the dual
/// (same fixed point; Newton converges quadratically where plain scaling
/// crawls on near-degenerate costs). Every update counts toward
/// `max_iterations`. On non-convergence the iterate with the smallest
/// marginal error is kept.
pub fn sinkhorn(cost: &[f64], n: usize, m: usize, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    cfg.validate()?;
    if n == 0 || m == 0 || cost.len() != n * m {
        return Err(Error::Contract(format!(
            "sinkhorn needs a non-empty {n}x{m} cost matrix, got {} entries",
            cost.len()
        )));
    }
    let dual = Dual {
        cost,
        n,
        m,
        lambda: cfg.lambda,
    };
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut current = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    for it in 1..=cfg.max_iterations {
        iterations = it;
        let mut stepped = false;
        if it > SCALING_ITERATIONS && m > 1 {
            let p = dual.plan(&f, &g);
            if let Some((df, dg)) = dual.newton_direction(&p) {
                // backtrack until the marginal error drops
                let mut t = 1.0;
                while t > 1e-6 {
                    let nf: Vec<f64> = f.iter().zip(&df).map(|(a, d)| a + t * d).collect();
                    let ng: Vec<f64> = g.iter().zip(&dg).map(|(a, d)| a + t * d).collect();
                    if dual.marginal_error(&dual.plan(&nf, &ng)) < current {
                        (f, g) = (nf, ng);
                        stepped = true;
                        break;
                    }
                    t *= 0.5;
                }
            }
        }
        if !stepped {
            dual.scale(&mut f, &mut g);
        }
        let p = dual.plan(&f, &g);
        current = dual.marginal_error(&p);
        if best.as_ref().is_none_or(|(e, _)| current < *e) {
            best = Some((current, p));
        }
        if current <= cfg.tolerance {
            converged = true;
            break;
        }
    }
    let (err, plan) = best.expect("at least one iteration");
    let total = plan.iter().zip(cost).map(|(p, c)| p * c).sum();
    Ok(TransportPlan {
        rows: n,
        cols: m,
        plan,
        cost: total,
        iterations,
        converged,
        marginal_error: err,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoverSimilarity {
    /// `1 / (1 + transport cost)`.
    pub similarity: f64,
    pub cost: f64,
    /// Set when Sinkhorn hit the iteration limit.
    pub warning: bool,
    /// Set when either text was empty; similarity is then 0.
    pub degenerate: bool,
    pub marginal_error: f64,
}

/// Transport between the two texts' uniform token distributions with cost
/// `1 - cosine`. Texts with identical token multisets have cost 0 (the
/// identity matching is feasible and optimal).
pub fn mover_similarity(
    generated: &str,
    reference: &str,
    embedder: &EmbeddingProvider,
    cfg: &SinkhornConfig,
) -> Result<MoverSimilarity> {
    let (ty, tg) = (tokens(generated), tokens(reference));
    if ty.is_empty() || tg.is_empty() {
        return Ok(MoverSimilarity {
            similarity: 0.0,
            cost: f64::INFINITY,
            warning: false,
            degenerate: true,
            marginal_error: 0.0,
        });
    }
    let (mut sy, mut sg) = (ty.clone(), tg.clone());
    sy.sort();
    sg.sort();
    if sy == sg {
        return Ok(MoverSimilarity {
            similarity: 1.0,
            cost: 0.0,
            warning: false,
            degenerate: false,
            marginal_error: 0.0,
        });
    }
    let ey = embedder.embed_tokens(&ty);
    let eg = embedder.embed_tokens(&tg);
    let cost: Vec<f64> = ey
        .iter()
        .flat_map(|a| eg.iter().map(move |b| (1.0 - cosine(a, b)).max(0.0)))
        .collect();
    let plan = sinkhorn(&cost, ty.len(), tg.len(), cfg)?;
    Ok(MoverSimilarity {
        similarity: 1.0 / (1.0 + plan.cost),
        cost: plan.cost,
        warning: !plan.converged,
        degenerate: false,
        marginal_error: plan.marginal_error,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub turns: TurnMode,
    /// Generation cap for each response turn.
    pub max_response_len: usize,
    pub warmup: usize,
    pub sinkhorn: SinkhornConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            turns: TurnMode::Multi,
            max_response_len: 24,
            warmup: 3,
            sinkhorn: SinkhornConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRow {
    pub id: String,
    pub generated: String,
    pub reference: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub sent_cos: f64,
    pub sms: f64,
    pub exact: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub sent_cos: f64,
    pub sms: f64,
    pub exact: f64,
    pub parameter_count: usize,
}

/// Wall-clock timing of the final (action) turn only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Timing {
    pub actions: usize,
    pub seconds: f64,
    pub fps: f64,
    /// Time spent generating the earlier turns, excluded from `fps`.
    pub context_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<ExampleRow>,
    pub aggregate: Aggregate,
    pub timing: Timing,
    pub mover_warnings: usize,
}

pub fn aggregate(rows: &[ExampleRow], parameter_count: usize) -> Aggregate {
    let n = rows.len().max(1) as f64;
    let mean = |f: fn(&ExampleRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Aggregate {
        n: rows.len(),
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        f1: mean(|r| r.f1),
        sent_cos: mean(|r| r.sent_cos),
        sms: mean(|r| r.sms),
        exact: mean(|r| r.exact),
        parameter_count,
    }
}

/// Scores one generated action against its reference.
pub fn score_example(
    id: &str,
    generated: &str,
    reference: &str,
    embedder: &EmbeddingProvider,
    sinkhorn_cfg: &SinkhornConfig,
) -> Result<(ExampleRow, bool)> {
    let b = bertscore_metric(generated, reference, embedder);
    let sms = mover_similarity(generated, reference, embedder, sinkhorn_cfg)?;
    Ok((
        ExampleRow {
            id: id.to_string(),
            generated: generated.to_string(),
            reference: reference.to_string(),
            precision: b.precision,
            recall: b.recall,
            f1: b.f1,
            sent_cos: sentence_cosine(generated, reference, embedder).value,
            sms: sms.similarity,
            exact: hard_reward(generated, reference),
        },
        sms.warning,
    ))
}

/// Turn-by-turn greedy decoding: earlier responses are generated by the
/// model and fed back as context. Returns the final response ids and the
/// time spent on the earlier turns and on the final turn.
pub fn generate_final_response(
    model: &PolicyModel,
    vocab: &Vocab,
    record: &DatasetRecord,
    cfg: &EvalConfig,
) -> Result<(Vec<usize>, Duration, Duration)> {
    let conv = conversation_for(record, cfg.turns);
    let prompts: Vec<&str> = conv
        .turns()
        .iter()
        .filter(|t| t.role == Role::Prompt)
        .map(|t| t.text.as_str())
        .collect();
    let mut context = Vec::new();
    let mut earlier = Duration::ZERO;
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    for (i, prompt) in prompts.iter().enumerate() {
        context.push(USER);
        context.extend(vocab.encode_text(prompt));
        context.push(BOT);
        let last = i + 1 == prompts.len();
        let start = Instant::now();
        let out = sample_response(
            model,
            &context,
            cfg.max_response_len,
            Decoding::Greedy,
            &mut rng,
        )
        .map_err(|e| Error::Contract(format!("record {}: {e}", record.id)))?;
        let took = start.elapsed();
        if last {
            return Ok((out.tokens, earlier, took));
        }
        earlier += took;
        context.extend(&out.tokens);
        if out.tokens.last() != Some(&EOS) {
            context.push(EOS);
        }
    }
    Err(Error::Contract(format!(
        "record {} has no prompt",
        record.id
    )))
}

/// Fails when a test record shares a scene seed with the training set.
pub fn check_disjoint(train: &[DatasetRecord], test: &[DatasetRecord]) -> Result<()> {
    let seeds: HashSet<u64> = train.iter().map(|r| r.seed).collect();
    match test.iter().find(|r| seeds.contains(&r.seed)) {
        Some(r) => Err(Error::Contract(format!(
            "test record {} reuses a training scene seed",
            r.id
        ))),
        None => Ok(()),
    }
}

pub fn evaluate(
    model: &PolicyModel,
    vocab: &Vocab,
    records: &[DatasetRecord],
    embedder: &EmbeddingProvider,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    cfg.sinkhorn.validate()?;
    if records.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    for _ in 0..cfg.warmup {
        generate_final_response(model, vocab, &records[0], cfg)?;
    }
    let mut rows = Vec::with_capacity(records.len());
    let mut timing = Timing {
        actions: 0,
        seconds: 0.0,
        fps: 0.0,
        context_seconds: 0.0,
    };
    let mut warnings = 0;
    for rec in records {
        let (ids, earlier, took) = generate_final_response(model, vocab, rec, cfg)?;
        timing.actions += 1;
        timing.seconds += took.as_secs_f64();
        timing.context_seconds += earlier.as_secs_f64();
        let generated = vocab.decode(&ids);
        let reference = conversation_for(rec, cfg.turns)
            .final_response()
            .to_string();
        let (row, warn) = score_example(&rec.id, &generated, &reference, embedder, &cfg.sinkhorn)?;
        warnings += usize::from(warn);
        rows.push(row);
    }
    timing.fps = if timing.seconds > 0.0 {
        timing.actions as f64 / timing.seconds
    } else {
        0.0
    };
    Ok(MetricReport {
        aggregate: aggregate(&rows, model.parameter_count()),
        rows,
        timing,
        mover_warnings: warnings,
    })
}

fn provenance(out: &mut Vec<u8>, config_hash: &str, seed: u64) {
    writeln!(out, "# config_hash={config_hash} seed={seed}").expect("in-memory write");
}

pub(crate) fn write_csv<T: Serialize>(
    path: &Path,
    config_hash: &str,
    seed: u64,
    rows: &[T],
) -> Result<()> {
    let mut out = Vec::new();
    provenance(&mut out, config_hash, seed);
    {
        let mut w = csv::Writer::from_writer(&mut out);
        for r in rows {
            w.serialize(r)
                .map_err(|e| Error::format(path.display().to_string(), e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Columns: `id,generated,reference,precision,recall,f1,sent_cos,sms,exact`.
pub fn write_examples_csv(
    path: &Path,
    config_hash: &str,
    seed: u64,
    rows: &[ExampleRow],
) -> Result<()> {
    write_csv(path, config_hash, seed, rows)
}

/// Columns: `n,precision,recall,f1,sent_cos,sms,exact,parameter_count`.
pub fn write_summary_csv(path: &Path, config_hash: &str, seed: u64, agg: &Aggregate) -> Result<()> {
    write_csv(path, config_hash, seed, std::slice::from_ref(agg))
}

/// Columns: `actions,seconds,fps,context_seconds`. Kept apart from the
/// metric files because wall-clock values differ between runs.
pub fn write_timing_csv(path: &Path, config_hash: &str, seed: u64, t: &Timing) -> Result<()> {
    write_csv(path, config_hash, seed, std::slice::from_ref(t))
}

/// Reads a per-example CSV written by [`write_examples_csv`].
pub fn read_examples_csv(path: &Path) -> Result<Vec<ExampleRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let body: String = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect();
    csv::Reader::from_reader(body.as_bytes())
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::format(path.display().to_string(), e))
}

/// Fixed-width table of the aggregate metrics.
pub fn render_table(agg: &Aggregate, timing: Option<&Timing>) -> String {
    let mut s = format!(
        "{:<10} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n{:<10} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
        "examples", "BS-P", "BS-R", "BS-F1", "cos", "SMS", "exact",
        agg.n, agg.precision, agg.recall, agg.f1, agg.sent_cos, agg.sms, agg.exact,
    );
    s.push_str(&format!("parameters {}\n", agg.parameter_count));
    if let Some(t) = timing {
        s.push_str(&format!(
            "fps        {:.3} ({} actions in {:.3} s)\n",
            t.fps, t.actions, t.seconds
        ));
    }
    s
}
