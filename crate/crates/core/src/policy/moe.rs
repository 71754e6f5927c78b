use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, Graph, Var};
use crate::error::{Error, Result};

/// Number of experts and how many of them each token activates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouterConfig {
    pub num_experts: usize,
    pub top_k: usize,
}

impl RouterConfig {
    pub fn new(num_experts: usize, top_k: usize) -> Result<Self> {
        let cfg = Self { num_experts, top_k };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 || self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::Config(format!(
                "top_k must satisfy 1 <= top_k <= num_experts, got top_k={} num_experts={}",
                self.top_k, self.num_experts
            )));
        }
        Ok(())
    }
}

/// Indices of the `k` largest weights, largest first; ties go to the lower index.
pub fn top_k_indices(weights: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Router decision for one token: softmax over all `K` logits and the
/// selected expert indices.
pub fn route(router_logits: &[f64], top_k: usize) -> (Vec<f64>, Vec<usize>) {
    let weights = softmax(router_logits);
    let selected = top_k_indices(&weights, top_k);
    (weights, selected)
}

/// Counters collected while running MoE layers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RoutingStats {
    /// Total expert evaluations, one per (token, selected expert).
    pub expert_calls: usize,
    /// `histogram[layer][expert]` counts tokens routed to each expert.
    pub histogram: Vec<Vec<usize>>,
    pub routed_tokens: usize,
}

impl RoutingStats {
    pub fn merge(&mut self, other: &RoutingStats) {
        self.expert_calls += other.expert_calls;
        self.routed_tokens += other.routed_tokens;
        if self.histogram.len() < other.histogram.len() {
            self.histogram.resize(other.histogram.len(), Vec::new());
        }
        for (mine, theirs) in self.histogram.iter_mut().zip(&other.histogram) {
            if mine.len() < theirs.len() {
                mine.resize(theirs.len(), 0);
            }
            mine.iter_mut().zip(theirs).for_each(|(a, b)| *a += b);
        }
    }
}

/// Graph handles for one feed-forward expert: `gelu(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone, Copy)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl FfnVars {
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = g.matmul(x, self.w1)?;
        let h = g.add_row(h, self.b1)?;
        let h = g.gelu(h);
        let o = g.matmul(h, self.w2)?;
        g.add_row(o, self.b2)
    }
}

/// Graph handles for a sparse MoE feed-forward layer.
#[derive(Debug, Clone)]
pub struct MoeVars {
    pub router_w: Var,
    pub router_b: Var,
    pub experts: Vec<FfnVars>,
}

impl MoeVars {
    /// `out[t] = sum over selected i of W(x_t)_i * F_i(x_t)`, with `W` the
    /// softmax over all experts (no renormalization over the selected set).
    /// Experts that no token selected are never evaluated.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        cfg: RouterConfig,
        layer: usize,
        stats: &mut RoutingStats,
    ) -> Result<Var> {
        if self.experts.len() != cfg.num_experts {
            return Err(Error::Config(format!(
                "layer has {} experts but router config expects {}",
                self.experts.len(),
                cfg.num_experts
            )));
        }
        let logits = g.matmul(x, self.router_w)?;
        let logits = g.add_row(logits, self.router_b)?;
        let weights = g.softmax(logits);
        let k_total = cfg.num_experts;
        let t = g.value(x).len() / g.shape(x).last().copied().unwrap_or(1);

        let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); k_total];
        {
            let w = g.value(weights);
            for row in 0..t {
                for e in top_k_indices(&w[row * k_total..(row + 1) * k_total], cfg.top_k) {
                    assigned[e].push(row);
                }
            }
        }
        if stats.histogram.len() <= layer {
            stats.histogram.resize(layer + 1, Vec::new());
        }
        if stats.histogram[layer].len() < k_total {
            stats.histogram[layer].resize(k_total, 0);
        }
        stats.routed_tokens += t;

        let mut out: Option<Var> = None;
        for (e, rows) in assigned.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            stats.expert_calls += rows.len();
            stats.histogram[layer][e] += rows.len();
            let xe = g.gather_rows(x, rows)?;
            let ye = self.experts[e].forward(g, xe)?;
            let at: Vec<(usize, usize)> = rows.iter().map(|&r| (r, e)).collect();
            let we = g.pick(weights, &at)?;
            let scaled = g.mul_col(ye, we)?;
            let placed = g.scatter_rows(scaled, rows, t)?;
            out = Some(match out {
                None => placed,
                Some(acc) => g.add(acc, placed)?,
            });
        }
        out.ok_or_else(|| Error::Contract("MoE layer received no tokens".into()))
    }
}
