//! Token selection for sparse attention: exact Top-k, precision-controlled
//! approximations, and the shared low-dimensional quantized indexer.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numerics::{dot, quantize8, round_half_up, QuantizedVector, RopeTable};

/// Where a selection came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Exact,
    PrecisionControlled,
    Indexer,
    Full,
}

/// A sorted set of attended token positions within a context of length `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    indices: Vec<usize>,
    // Same set, highest score first. Only meaningful for exact selections.
    ranked: Vec<usize>,
    context_len: usize,
    provenance: Provenance,
}

impl Selection {
    /// Builds a selection from arbitrary (possibly unsorted) indices.
    pub fn from_indices(
        mut indices: Vec<usize>,
        context_len: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        let ranked = indices.clone();
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(LabError::domain("selection indices must be unique"));
        }
        if let Some(&last) = indices.last() {
            if last >= context_len {
                return Err(LabError::domain(format!(
                    "selection index {last} out of range for context length {context_len}"
                )));
            }
        } else {
            return Err(LabError::domain("selection must not be empty"));
        }
        Ok(Self {
            indices,
            ranked,
            context_len,
            provenance,
        })
    }

    pub fn full(context_len: usize) -> Self {
        let indices: Vec<usize> = (0..context_len).collect();
        Self {
            ranked: indices.clone(),
            indices,
            context_len,
            provenance: Provenance::Full,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Indices ordered by descending score (exact selections), otherwise insertion order.
    pub fn ranked(&self) -> &[usize] {
        &self.ranked
    }

    pub fn window(&self) -> usize {
        self.indices.len()
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn ratio(&self) -> f64 {
        self.indices.len() as f64 / self.context_len as f64
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.indices.binary_search(&idx).is_ok()
    }

    pub fn is_full(&self) -> bool {
        self.indices.len() == self.context_len
    }
}

/// Higher score first, lower index on ties.
fn score_order(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b]
        .partial_cmp(&scores[a])
        .unwrap_or(Ordering::Equal)
        .then(a.cmp(&b))
}

/// Indices of the `window` largest scores, ties resolved toward the lower index.
pub fn exact_topk(scores: &[f64], window: usize) -> Result<Selection> {
    if window == 0 {
        return Err(LabError::domain("Top-k window must be at least 1"));
    }
    if scores.is_empty() {
        return Err(LabError::domain("Top-k over an empty score vector"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(LabError::domain("Top-k scores must be finite"));
    }
    let n = scores.len();
    if n <= window {
        let mut ranked: Vec<usize> = (0..n).collect();
        ranked.sort_by(|&a, &b| score_order(scores, a, b));
        return Ok(Selection {
            indices: (0..n).collect(),
            ranked,
            context_len: n,
            provenance: Provenance::Full,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.select_nth_unstable_by(window - 1, |&a, &b| score_order(scores, a, b));
    order.truncate(window);
    order.sort_by(|&a, &b| score_order(scores, a, b));
    let mut indices = order.clone();
    indices.sort_unstable();
    Ok(Selection {
        indices,
        ranked: order,
        context_len: n,
        provenance: Provenance::Exact,
    })
}

/// Replaces a share of an exact selection with random non-selected tokens so
/// that exactly `round(precision · W)` of the `W` slots stay exact. The kept
/// exact tokens are the highest-scoring ones.
pub fn precision_controlled_select(
    exact: &Selection,
    precision: f64,
    context_len: usize,
    rng_seed: u64,
) -> Result<Selection> {
    if !(0.0..=1.0).contains(&precision) {
        return Err(LabError::domain(format!(
            "precision must lie in [0, 1], got {precision}"
        )));
    }
    let w = exact.window();
    if w > context_len || exact.context_len != context_len {
        return Err(LabError::domain(format!(
            "exact selection (W={w}, N={}) does not fit context length {context_len}",
            exact.context_len
        )));
    }
    let keep = round_half_up(precision * w as f64).min(w);
    let fill = w - keep;
    let complement: Vec<usize> = (0..context_len).filter(|&i| !exact.contains(i)).collect();
    if complement.len() < fill {
        return Err(LabError::domain(format!(
            "complement of size {} cannot supply {fill} replacement tokens",
            complement.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut chosen: Vec<usize> = exact.ranked()[..keep].to_vec();
    let picks = rand::seq::index::sample(&mut rng, complement.len(), fill);
    let mut picks: Vec<usize> = picks.into_iter().collect();
    picks.sort_unstable();
    chosen.extend(picks.into_iter().map(|i| complement[i]));
    let provenance = if fill == 0 && exact.is_full() {
        Provenance::Full
    } else {
        Provenance::PrecisionControlled
    };
    Selection::from_indices(chosen, context_len, provenance)
}

/// `|approx ∩ exact| / W`.
pub fn retrieval_precision(approx: &Selection, exact: &Selection) -> Result<f64> {
    let w = exact.window();
    if approx.window() != w {
        return Err(LabError::domain(format!(
            "window mismatch: approximate W={} vs exact W={w}",
            approx.window()
        )));
    }
    let (a, b) = (approx.indices(), exact.indices());
    let (mut i, mut j, mut overlap) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                overlap += 1;
                i += 1;
                j += 1;
            }
        }
    }
    Ok(overlap as f64 / w as f64)
}

/// How the indexer projections are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum IndexerProjection {
    /// Seeded Gaussian projections.
    Random { seed: u64 },
    /// Leading `dim` rows of the first `heads` query/key projections of the model.
    TruncatedQk,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndexerConfig {
    pub heads: usize,
    pub dim: usize,
    pub quantized: bool,
    pub projection: IndexerProjection,
}

impl IndexerConfig {
    pub fn validate(&self, model_heads: usize, head_dim: usize) -> Result<()> {
        if self.heads == 0 || self.heads > model_heads {
            return Err(LabError::config(format!(
                "indexer heads must be in 1..={model_heads}, got {}",
                self.heads
            )));
        }
        if self.dim == 0 || self.dim > head_dim {
            return Err(LabError::config(format!(
                "indexer dim must be in 1..={head_dim}, got {}",
                self.dim
            )));
        }
        Ok(())
    }

    /// The indexer that reproduces summed exact attention logits.
    pub fn degenerate(model_heads: usize, head_dim: usize) -> Self {
        Self {
            heads: model_heads,
            dim: head_dim,
            quantized: false,
            projection: IndexerProjection::TruncatedQk,
        }
    }
}

/// Query/key projections of the indexer for one layer, each `[dim × d_model]` per head.
#[derive(Debug, Clone)]
pub struct LayerIndexer {
    pub query: Vec<Vec<f64>>,
    pub key: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct IndexerWeights {
    config: IndexerConfig,
    d_model: usize,
    layers: Vec<LayerIndexer>,
    rope: RopeTable,
}

impl IndexerWeights {
    pub fn new(
        config: IndexerConfig,
        d_model: usize,
        layers: Vec<LayerIndexer>,
        theta_base: f64,
    ) -> Result<Self> {
        for (l, layer) in layers.iter().enumerate() {
            let ok = layer.query.len() == config.heads
                && layer.key.len() == config.heads
                && layer
                    .query
                    .iter()
                    .chain(&layer.key)
                    .all(|p| p.len() == config.dim * d_model);
            if !ok {
                return Err(LabError::config(format!(
                    "indexer projections for layer {l} do not match heads={} dim={}",
                    config.heads, config.dim
                )));
            }
        }
        Ok(Self {
            config,
            d_model,
            layers,
            rope: RopeTable::new(config.dim, theta_base),
        })
    }

    /// Seeded Gaussian projections with variance `1/d_model`.
    pub fn random(
        config: IndexerConfig,
        d_model: usize,
        num_layers: usize,
        theta_base: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (d_model as f64).sqrt();
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..config.dim * d_model)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let layers = (0..num_layers)
            .map(|_| LayerIndexer {
                query: (0..config.heads).map(|_| draw(&mut rng)).collect(),
                key: (0..config.heads).map(|_| draw(&mut rng)).collect(),
            })
            .collect();
        Self::new(config, d_model, layers, theta_base)
    }

    pub fn config(&self) -> &IndexerConfig {
        &self.config
    }

    pub fn layer(&self, layer: usize) -> Result<&LayerIndexer> {
        self.layers
            .get(layer)
            .ok_or_else(|| LabError::config(format!("missing indexer weights for layer {layer}")))
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    fn project(&self, proj: &[f64], x: &[f64], position: usize) -> Vec<f64> {
        let dim = self.config.dim;
        let mut out = vec![0.0; dim];
        for (o, row) in out.iter_mut().zip(proj.chunks_exact(self.d_model)) {
            *o = dot(row, x);
        }
        self.rope.apply(&mut out, position, 1.0);
        out
    }

    /// Projects `x` (the normalized layer input at `position`) into indexer key space.
    pub fn index_key(&self, layer: usize, x: &[f64], position: usize) -> Result<IndexKey> {
        let w = self.layer(layer)?;
        let heads = w
            .key
            .iter()
            .map(|p| self.project(p, x, position))
            .collect::<Vec<_>>();
        Ok(if self.config.quantized {
            IndexKey::Quantized(heads.iter().map(|h| quantize8(h)).collect())
        } else {
            IndexKey::Dense(heads)
        })
    }

    pub fn index_query(&self, layer: usize, x: &[f64], position: usize) -> Result<Vec<Vec<f64>>> {
        let w = self.layer(layer)?;
        Ok(w.query
            .iter()
            .map(|p| self.project(p, x, position))
            .collect())
    }
}

/// One token's indexer keys, one vector per indexer head.
#[derive(Debug, Clone, PartialEq)]
pub enum IndexKey {
    Dense(Vec<Vec<f64>>),
    Quantized(Vec<QuantizedVector>),
}

impl IndexKey {
    fn score(&self, query: &[Vec<f64>]) -> f64 {
        let mut acc = 0.0;
        match self {
            IndexKey::Dense(heads) => {
                for (q, k) in query.iter().zip(heads) {
                    acc += dot(q, k);
                }
            }
            IndexKey::Quantized(heads) => {
                for (q, k) in query.iter().zip(heads) {
                    acc += k.dot(q);
                }
            }
        }
        acc
    }
}

/// One shared score per cached token: `Σ_h q_h · k_h[t] / sqrt(dim)`.
pub fn indexer_scores(
    weights: &IndexerWeights,
    layer: usize,
    query_input: &[f64],
    position: usize,
    keys: &[IndexKey],
) -> Result<Vec<f64>> {
    if keys.is_empty() {
        return Err(LabError::domain("indexer scoring over an empty cache"));
    }
    let q = weights.index_query(layer, query_input, position)?;
    let scale = 1.0 / (weights.config.dim as f64).sqrt();
    Ok(keys.iter().map(|k| k.score(&q) * scale).collect())
}

/// Per-layer selections captured at one decode step of one sample.
#[derive(Debug, Clone)]
pub struct SelectionRecord {
    pub sample: usize,
    pub step: usize,
    pub layer: usize,
    pub indexer: Selection,
    pub per_head_exact: Vec<Selection>,
    pub pooled_exact: Selection,
    pub summed_exact: Selection,
}

#[derive(Debug, Clone, Default)]
pub struct SelectionTrace {
    pub records: Vec<SelectionRecord>,
}

impl SelectionTrace {
    pub fn extend(&mut self, other: SelectionTrace) {
        self.records.extend(other.records);
    }
}

/// The head-pooled reference selection: union of per-head exact sets ranked by
/// summed attention probability, truncated to `window`.
pub fn pooled_selection(
    per_head_exact: &[Selection],
    per_head_weights: &[Vec<f64>],
    window: usize,
) -> Result<Selection> {
    let n = per_head_weights
        .first()
        .map(Vec::len)
        .ok_or_else(|| LabError::domain("no heads to pool"))?;
    let mut mass = vec![0.0; n];
    for w in per_head_weights {
        for (m, p) in mass.iter_mut().zip(w) {
            *m += p;
        }
    }
    let mut union: Vec<usize> = per_head_exact
        .iter()
        .flat_map(|s| s.indices().iter().copied())
        .collect();
    union.sort_unstable();
    union.dedup();
    union.sort_by(|&a, &b| score_order(&mass, a, b));
    union.truncate(window.min(n));
    Selection::from_indices(union, n, Provenance::Exact)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionMethod {
    PerHeadMean,
    Pooled,
    /// Against the exact top-`W` of the head-summed attention logits.
    SummedLogit,
}

impl fmt::Display for PrecisionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrecisionMethod::PerHeadMean => "per_head_mean",
            PrecisionMethod::Pooled => "pooled",
            PrecisionMethod::SummedLogit => "summed_logit",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRow {
    pub layer: usize,
    pub method: PrecisionMethod,
    pub samples: usize,
    pub steps: usize,
    pub precision_mean: f64,
    pub precision_std: f64,
    /// Standard error of the mean, computed over per-sample means.
    pub sample_sem: f64,
    /// Mean of `W/N` over the same units, the expected overlap of a random selector.
    pub chance: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrecisionReport {
    pub rows: Vec<PrecisionRow>,
}

impl PrecisionReport {
    pub fn row(&self, layer: usize, method: PrecisionMethod) -> Option<&PrecisionRow> {
        self.rows
            .iter()
            .find(|r| r.layer == layer && r.method == method)
    }

    pub const CSV_HEADER: &'static str = "layer,method,samples,steps,precision_mean,precision_std";

    /// CSV body rows matching [`Self::CSV_HEADER`].
    pub fn csv_rows(&self) -> Vec<String> {
        self.rows
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{},{:.6},{:.6}",
                    r.layer, r.method, r.samples, r.steps, r.precision_mean, r.precision_std
                )
            })
            .collect()
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn sem(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}

/// Averages indexer-vs-exact overlap per layer, both per head and against the
/// pooled head selection.
pub fn indexer_layer_precision(trace: &SelectionTrace) -> Result<PrecisionReport> {
    if trace.records.is_empty() {
        return Err(LabError::data("empty selection trace"));
    }
    #[derive(Default)]
    struct Acc {
        values: Vec<f64>,
        per_sample: BTreeMap<usize, Vec<f64>>,
        chance: Vec<f64>,
    }
    let mut by_key: BTreeMap<(usize, PrecisionMethod), Acc> = BTreeMap::new();
    let mut steps: BTreeMap<usize, usize> = BTreeMap::new();
    let mut samples: BTreeMap<usize, std::collections::BTreeSet<usize>> = BTreeMap::new();
    for rec in &trace.records {
        *steps.entry(rec.layer).or_default() += 1;
        samples.entry(rec.layer).or_default().insert(rec.sample);
        let chance = rec.indexer.window() as f64 / rec.indexer.context_len() as f64;
        let refs = rec
            .per_head_exact
            .iter()
            .map(|e| (PrecisionMethod::PerHeadMean, e))
            .chain([
                (PrecisionMethod::Pooled, &rec.pooled_exact),
                (PrecisionMethod::SummedLogit, &rec.summed_exact),
            ]);
        for (method, exact) in refs {
            let p = retrieval_precision(&rec.indexer, exact)?;
            let acc = by_key.entry((rec.layer, method)).or_default();
            acc.values.push(p);
            acc.per_sample.entry(rec.sample).or_default().push(p);
            acc.chance.push(chance);
        }
    }
    let rows = by_key
        .into_iter()
        .map(|((layer, method), acc)| {
            let (mean, std) = mean_std(&acc.values);
            let sample_means: Vec<f64> = acc.per_sample.values().map(|v| mean_std(v).0).collect();
            PrecisionRow {
                layer,
                method,
                samples: samples[&layer].len(),
                steps: steps[&layer],
                precision_mean: mean,
                precision_std: std,
                sample_sem: sem(&sample_means),
                chance: mean_std(&acc.chance).0,
            }
        })
        .collect();
    Ok(PrecisionReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sorted_topk_oracle(scores: &[f64], w: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut top = idx[..w.min(scores.len())].to_vec();
        top.sort_unstable();
        top
    }

    #[test]
    fn exact_topk_ties_and_small_context() {
        let scores = [0.1, 0.9, 0.5, 0.9];
        assert_eq!(exact_topk(&scores, 2).unwrap().indices(), &[1, 3]);
        assert_eq!(exact_topk(&scores, 1).unwrap().indices(), &[1]);
        let all = exact_topk(&scores, 8).unwrap();
        assert_eq!(all.indices(), &[0, 1, 2, 3]);
        assert_eq!(all.provenance(), Provenance::Full);
        assert_eq!(all.ratio(), 1.0);
        assert!(exact_topk(&scores, 0).is_err());
    }

    #[test]
    fn exact_topk_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scores: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
        let sel = exact_topk(&scores, 20).unwrap();
        assert_eq!(sel.indices(), sorted_topk_oracle(&scores, 20).as_slice());
        assert_eq!(sel.window(), 20);
        assert!((sel.ratio() - 0.1).abs() < 1e-15);
        // ranked order is descending in score
        for w in sel.ranked().windows(2) {
            assert!(scores[w[0]] >= scores[w[1]]);
        }
    }

    #[test]
    fn precision_select_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scores: Vec<f64> = (0..16).map(|_| rng.random::<f64>()).collect();
        let exact = exact_topk(&scores, 4).unwrap();
        let same = precision_controlled_select(&exact, 1.0, 16, 3).unwrap();
        assert_eq!(same.indices(), exact.indices());
        let none = precision_controlled_select(&exact, 0.0, 16, 3).unwrap();
        assert_eq!(none.window(), 4);
        assert!(none.indices().iter().all(|&i| !exact.contains(i)));
        assert_eq!(retrieval_precision(&none, &exact).unwrap(), 0.0);
    }

    #[test]
    fn precision_select_paper_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scores: Vec<f64> = (0..8192).map(|_| rng.random::<f64>()).collect();
        let exact = exact_topk(&scores, 2048).unwrap();
        let approx = precision_controlled_select(&exact, 0.75, 8192, 5).unwrap();
        let p = retrieval_precision(&approx, &exact).unwrap();
        assert_eq!(p, 1536.0 / 2048.0);
        assert_eq!(p, 0.75);
    }

    #[test]
    fn precision_select_keeps_highest_scores() {
        let scores: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let exact = exact_topk(&scores, 8).unwrap();
        let half = precision_controlled_select(&exact, 0.5, 20, 9).unwrap();
        for top in 16..20 {
            assert!(half.contains(top));
        }
        for dropped in 12..16 {
            assert!(!half.contains(dropped));
        }
    }

    #[test]
    fn precision_select_rejects_small_complement() {
        let scores = [0.1, 0.2, 0.3, 0.4, 0.5];
        let exact = exact_topk(&scores, 4).unwrap();
        assert!(precision_controlled_select(&exact, 0.0, 5, 1).is_err());
        assert!(precision_controlled_select(&exact, 1.5, 5, 1).is_err());
    }

    #[test]
    fn retrieval_precision_cases() {
        let a = Selection::from_indices(vec![0, 1, 2, 3], 10, Provenance::Exact).unwrap();
        let b = Selection::from_indices(vec![4, 5, 6, 7], 10, Provenance::Exact).unwrap();
        let c = Selection::from_indices(vec![1, 2, 3, 9], 10, Provenance::Exact).unwrap();
        assert_eq!(retrieval_precision(&a, &a).unwrap(), 1.0);
        assert_eq!(retrieval_precision(&a, &b).unwrap(), 0.0);
        assert_eq!(retrieval_precision(&c, &a).unwrap(), 0.75);
        let short = Selection::from_indices(vec![1], 10, Provenance::Exact).unwrap();
        assert!(retrieval_precision(&short, &a).is_err());
    }

    #[test]
    fn quantized_indexer_on_zero_keys_scores_zero() {
        let cfg = IndexerConfig {
            heads: 2,
            dim: 4,
            quantized: true,
            projection: IndexerProjection::Random { seed: 1 },
        };
        let w = IndexerWeights::random(cfg, 8, 1, 10000.0, 1).unwrap();
        let keys: Vec<IndexKey> = (0..5).map(|t| w.index_key(0, &[0.0; 8], t).unwrap()).collect();
        let q: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        let s = indexer_scores(&w, 0, &q, 5, &keys).unwrap();
        assert_eq!(s, vec![0.0; 5]);
    }

    #[test]
    fn indexer_missing_layer_is_config_error() {
        let cfg = IndexerConfig {
            heads: 1,
            dim: 2,
            quantized: false,
            projection: IndexerProjection::Random { seed: 0 },
        };
        let w = IndexerWeights::random(cfg, 4, 1, 10000.0, 0).unwrap();
        assert!(matches!(
            w.index_key(3, &[1.0; 4], 0),
            Err(LabError::Config(_))
        ));
        assert!(cfg.validate(1, 1).is_err());
    }

    #[test]
    fn pooled_selection_ranks_by_mass() {
        let h0 = Selection::from_indices(vec![0, 1], 4, Provenance::Exact).unwrap();
        let h1 = Selection::from_indices(vec![1, 3], 4, Provenance::Exact).unwrap();
        let w = vec![vec![0.5, 0.4, 0.05, 0.05], vec![0.1, 0.5, 0.0, 0.4]];
        let pooled = pooled_selection(&[h0, h1], &w, 2).unwrap();
        assert_eq!(pooled.indices(), &[0, 1]);
    }

    #[test]
    fn layer_precision_aggregates() {
        let exact = Selection::from_indices(vec![0, 1], 4, Provenance::Exact).unwrap();
        let other = Selection::from_indices(vec![1, 2], 4, Provenance::Exact).unwrap();
        let trace = SelectionTrace {
            records: vec![
                SelectionRecord {
                    sample: 0,
                    step: 0,
                    layer: 0,
                    indexer: exact.clone(),
                    per_head_exact: vec![exact.clone(), other.clone()],
                    pooled_exact: exact.clone(),
                    summed_exact: exact.clone(),
                },
                SelectionRecord {
                    sample: 1,
                    step: 0,
                    layer: 0,
                    indexer: other.clone(),
                    per_head_exact: vec![other.clone(), other.clone()],
                    pooled_exact: exact.clone(),
                    summed_exact: other.clone(),
                },
            ],
        };
        let report = indexer_layer_precision(&trace).unwrap();
        let ph = report.row(0, PrecisionMethod::PerHeadMean).unwrap();
        assert!((ph.precision_mean - (1.0 + 0.5 + 1.0 + 1.0) / 4.0).abs() < 1e-15);
        assert_eq!(ph.samples, 2);
        assert_eq!(ph.steps, 2);
        assert!((ph.chance - 0.5).abs() < 1e-15);
        let pooled = report.row(0, PrecisionMethod::Pooled).unwrap();
        assert!((pooled.precision_mean - 0.75).abs() < 1e-15);
        let summed = report.row(0, PrecisionMethod::SummedLogit).unwrap();
        assert_eq!(summed.precision_mean, 1.0);
        assert_eq!(report.rows.len(), 3);
        assert!(indexer_layer_precision(&SelectionTrace::default()).is_err());
    }
}
