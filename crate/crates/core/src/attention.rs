//! Causal multi-head attention against a KV cache, with full or
//! selection-restricted softmax and optional capture of attention rows.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numerics::{dot, matvec, round_half_up, softmax_in_place, RopeTable};
use crate::selection::{
    exact_topk, indexer_scores, pooled_selection, precision_controlled_select, IndexKey,
    IndexerConfig, IndexerWeights, Provenance, Selection, SelectionRecord,
};

/// Keys and values of one head, stored flat as `[N × head_dim]`.
#[derive(Debug, Clone, Default)]
pub struct HeadCache {
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    pub heads: Vec<HeadCache>,
    pub index_keys: Vec<IndexKey>,
    head_dim: usize,
    len: usize,
}

impl LayerCache {
    pub fn new(heads: usize, head_dim: usize) -> Self {
        Self {
            heads: vec![HeadCache::default(); heads],
            index_keys: Vec::new(),
            head_dim,
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Appends one token's per-head keys (already rotated) and values.
    pub fn append(&mut self, keys: &[Vec<f64>], values: &[Vec<f64>]) {
        assert_eq!(keys.len(), self.heads.len());
        assert_eq!(values.len(), self.heads.len());
        for ((h, k), v) in self.heads.iter_mut().zip(keys).zip(values) {
            debug_assert_eq!(k.len(), self.head_dim);
            h.keys.extend_from_slice(k);
            h.values.extend_from_slice(v);
        }
        self.len += 1;
    }

    pub fn head(&self, h: usize) -> HeadKv<'_> {
        HeadKv {
            keys: &self.heads[h].keys,
            values: &self.heads[h].values,
            head_dim: self.head_dim,
        }
    }
}

/// Per-layer caches for one generation episode.
#[derive(Debug, Clone)]
pub struct KvCache {
    pub layers: Vec<LayerCache>,
}

impl KvCache {
    pub fn new(layers: usize, heads: usize, head_dim: usize) -> Self {
        Self {
            layers: (0..layers).map(|_| LayerCache::new(heads, head_dim)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, LayerCache::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Borrowed view of one head's cache.
#[derive(Debug, Clone, Copy)]
pub struct HeadKv<'a> {
    pub keys: &'a [f64],
    pub values: &'a [f64],
    pub head_dim: usize,
}

impl<'a> HeadKv<'a> {
    pub fn new(keys: &'a [f64], values: &'a [f64], head_dim: usize) -> Result<Self> {
        if head_dim == 0
            || keys.len() != values.len()
            || keys.len() % head_dim != 0
        {
            return Err(LabError::Dimension {
                op: "head cache",
                left: vec![keys.len(), head_dim],
                right: vec![values.len(), head_dim],
            });
        }
        Ok(Self {
            keys,
            values,
            head_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.keys.len() / self.head_dim
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn key(&self, t: usize) -> &'a [f64] {
        &self.keys[t * self.head_dim..(t + 1) * self.head_dim]
    }

    pub fn value(&self, t: usize) -> &'a [f64] {
        &self.values[t * self.head_dim..(t + 1) * self.head_dim]
    }

    /// Scaled logits `scale · q·k_t` for every cached token.
    pub fn logits(&self, query: &[f64], scale: f64) -> Vec<f64> {
        (0..self.len()).map(|t| scale * dot(query, self.key(t))).collect()
    }
}

fn combine_values(kv: &HeadKv<'_>, indices: &[usize], weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; kv.head_dim];
    for (&t, &w) in indices.iter().zip(weights) {
        for (o, v) in out.iter_mut().zip(kv.value(t)) {
            *o += w * v;
        }
    }
    out
}

/// Softmax restricted to `selection`, over precomputed full logits.
fn selected_weights(logits: &[f64], selection: &Selection) -> Vec<f64> {
    let mut w: Vec<f64> = selection.indices().iter().map(|&t| logits[t]).collect();
    softmax_in_place(&mut w);
    w
}

/// Dense attention over the whole cache. Returns `(output, weights)`.
pub fn attend_full(query: &[f64], kv: HeadKv<'_>, scale: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if kv.is_empty() {
        return Err(LabError::domain("attention over an empty cache"));
    }
    if query.len() != kv.head_dim {
        return Err(LabError::Dimension {
            op: "attend_full",
            left: vec![query.len()],
            right: vec![kv.head_dim],
        });
    }
    let mut w = kv.logits(query, scale);
    softmax_in_place(&mut w);
    let all: Vec<usize> = (0..kv.len()).collect();
    Ok((combine_values(&kv, &all, &w), w))
}

/// Attention restricted to `selection`; the softmax is renormalized over the
/// selected keys only. Weights are returned in `selection.indices()` order.
pub fn attend_selected(
    query: &[f64],
    kv: HeadKv<'_>,
    selection: &Selection,
    scale: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if kv.is_empty() {
        return Err(LabError::domain("attention over an empty cache"));
    }
    if let Some(&max) = selection.indices().last() {
        if max >= kv.len() {
            return Err(LabError::domain(format!(
                "selection index {max} out of range for cache length {}",
                kv.len()
            )));
        }
    }
    if query.len() != kv.head_dim {
        return Err(LabError::Dimension {
            op: "attend_selected",
            left: vec![query.len()],
            right: vec![kv.head_dim],
        });
    }
    let mut w: Vec<f64> = selection
        .indices()
        .iter()
        .map(|&t| scale * dot(query, kv.key(t)))
        .collect();
    softmax_in_place(&mut w);
    Ok((combine_values(&kv, selection.indices(), &w), w))
}

/// How many keys each head may attend to at a decode step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowPolicy {
    /// `W = max(1, round(ρ·N))`, recomputed every step.
    Ratio(f64),
    /// Fixed `W`, clipped to `N`.
    Fixed(usize),
}

impl WindowPolicy {
    pub fn window(&self, context_len: usize) -> usize {
        match *self {
            WindowPolicy::Ratio(rho) => round_half_up(rho * context_len as f64).max(1),
            WindowPolicy::Fixed(w) => w.max(1),
        }
        .min(context_len)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            WindowPolicy::Ratio(rho) if !(rho > 0.0 && rho <= 1.0) => Err(LabError::config(
                format!("Top-k ratio must lie in (0, 1], got {rho}"),
            )),
            WindowPolicy::Fixed(0) => Err(LabError::config("fixed window must be >= 1")),
            _ => Ok(()),
        }
    }
}

/// Attention mode used for decode steps. Prefill is always full.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DecodeMode {
    Full,
    TopK {
        window: WindowPolicy,
    },
    Precision {
        window: WindowPolicy,
        precision: f64,
    },
    Indexer {
        window: WindowPolicy,
        config: IndexerConfig,
    },
}

impl DecodeMode {
    pub fn topk_ratio(rho: f64) -> Self {
        DecodeMode::TopK {
            window: WindowPolicy::Ratio(rho),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DecodeMode::Full => Ok(()),
            DecodeMode::TopK { window } => window.validate(),
            DecodeMode::Precision { window, precision } => {
                window.validate()?;
                if !(0.0..=1.0).contains(precision) {
                    return Err(LabError::config(format!(
                        "precision must lie in [0, 1], got {precision}"
                    )));
                }
                Ok(())
            }
            DecodeMode::Indexer { window, .. } => window.validate(),
        }
    }
}

/// Whether attention rows sum to one, within the trace tolerance.
pub const TRACE_MASS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prefill,
    Decode,
}

/// Post-softmax weights of one (layer, head, query) over its attended keys.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub layer: usize,
    pub head: usize,
    pub phase: Phase,
    /// Decode step index for decode rows, query position for prefill rows.
    pub step: usize,
    pub position: usize,
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionTrace {
    pub layers: usize,
    pub heads: usize,
    pub prefill_len: usize,
    pub decode_steps: usize,
    pub rows: Vec<TraceRow>,
}

const TRACE_MAGIC: &[u8; 8] = b"TKATTN01";

impl AttentionTrace {
    pub fn new(layers: usize, heads: usize) -> Self {
        Self {
            layers,
            heads,
            ..Default::default()
        }
    }

    pub fn rows_for(&self, phase: Phase, step: usize) -> impl Iterator<Item = &TraceRow> {
        self.rows
            .iter()
            .filter(move |r| r.phase == phase && r.step == step)
    }

    pub fn row(&self, layer: usize, head: usize, phase: Phase, step: usize) -> Option<&TraceRow> {
        self.rows
            .iter()
            .find(|r| r.layer == layer && r.head == head && r.phase == phase && r.step == step)
    }

    /// Distinct captured steps for a phase, ascending.
    pub fn steps(&self, phase: Phase) -> Vec<usize> {
        let mut s: Vec<usize> = self
            .rows
            .iter()
            .filter(|r| r.phase == phase)
            .map(|r| r.step)
            .collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Little-endian binary encoding: header, then one record per row.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(TRACE_MAGIC)?;
        for v in [self.layers, self.heads, self.decode_steps, self.prefill_len] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&(self.rows.len() as u64).to_le_bytes())?;
        for r in &self.rows {
            w.write_all(&(r.layer as u32).to_le_bytes())?;
            w.write_all(&(r.head as u32).to_le_bytes())?;
            w.write_all(&[match r.phase {
                Phase::Prefill => 0u8,
                Phase::Decode => 1u8,
            }])?;
            w.write_all(&(r.step as u32).to_le_bytes())?;
            w.write_all(&(r.position as u32).to_le_bytes())?;
            w.write_all(&(r.indices.len() as u32).to_le_bytes())?;
            for &i in &r.indices {
                w.write_all(&(i as u32).to_le_bytes())?;
            }
            for &x in &r.weights {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        fn u32_of(r: &mut impl Read) -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|e| LabError::data(format!("truncated trace: {e}")))?;
            Ok(u32::from_le_bytes(b))
        }
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|e| LabError::data(format!("truncated trace: {e}")))?;
        if &magic != TRACE_MAGIC {
            return Err(LabError::data("not an attention trace (bad magic)"));
        }
        let layers = u32_of(&mut r)? as usize;
        let heads = u32_of(&mut r)? as usize;
        let decode_steps = u32_of(&mut r)? as usize;
        let prefill_len = u32_of(&mut r)? as usize;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)
            .map_err(|e| LabError::data(format!("truncated trace: {e}")))?;
        let count = u64::from_le_bytes(b8) as usize;
        let mut rows = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let layer = u32_of(&mut r)? as usize;
            let head = u32_of(&mut r)? as usize;
            let mut pb = [0u8; 1];
            r.read_exact(&mut pb)
                .map_err(|e| LabError::data(format!("truncated trace: {e}")))?;
            let phase = match pb[0] {
                0 => Phase::Prefill,
                1 => Phase::Decode,
                other => return Err(LabError::data(format!("unknown phase tag {other}"))),
            };
            let step = u32_of(&mut r)? as usize;
            let position = u32_of(&mut r)? as usize;
            let n = u32_of(&mut r)? as usize;
            let mut indices = Vec::with_capacity(n);
            for _ in 0..n {
                indices.push(u32_of(&mut r)? as usize);
            }
            let mut weights = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut b8)
                    .map_err(|e| LabError::data(format!("truncated trace: {e}")))?;
                weights.push(f64::from_le_bytes(b8));
            }
            rows.push(TraceRow {
                layer,
                head,
                phase,
                step,
                position,
                indices,
                weights,
            });
        }
        Ok(Self {
            layers,
            heads,
            prefill_len,
            decode_steps,
            rows,
        })
    }
}

/// Borrowed attention projections of one layer, each `[d_model × d_model]`
/// with output rows grouped by head.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights<'a> {
    pub wq: &'a [f64],
    pub wk: &'a [f64],
    pub wv: &'a [f64],
    pub wo: &'a [f64],
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionWeights<'_> {
    pub fn d_model(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Per-head `(q, k, v)` for input `x`, with RoPE applied to `q` and `k`.
    pub fn project(&self, x: &[f64], position: usize, rope: &RopeTable) -> QkvHeads {
        let d = self.d_model();
        let mut q = vec![0.0; d];
        let mut k = vec![0.0; d];
        let mut v = vec![0.0; d];
        matvec(self.wq, x, &mut q);
        matvec(self.wk, x, &mut k);
        matvec(self.wv, x, &mut v);
        let split = |mut full: Vec<f64>, rotate: bool| -> Vec<Vec<f64>> {
            full.chunks_exact_mut(self.head_dim)
                .map(|c| {
                    if rotate {
                        rope.apply(c, position, 1.0);
                    }
                    c.to_vec()
                })
                .collect()
        };
        QkvHeads {
            q: split(q, true),
            k: split(k, true),
            v: split(v, false),
        }
    }
}

#[derive(Debug, Clone)]
pub struct QkvHeads {
    pub q: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// Everything a decode step needs beyond the layer weights and cache.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub mode: &'a DecodeMode,
    pub indexer: Option<&'a IndexerWeights>,
    pub layer: usize,
    pub step: usize,
    pub seed: u64,
    pub capture_attention: bool,
    pub capture_selection: bool,
    pub sample: usize,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Attention block output after the output projection, `[d_model]`.
    pub output: Vec<f64>,
    pub selections: Vec<Selection>,
    pub trace_rows: Vec<TraceRow>,
    pub selection_record: Option<SelectionRecord>,
    /// Exact per-head sets behind a precision-controlled step, when selections are captured.
    pub exact: Option<Vec<Selection>>,
}

/// Seed for the random fill of one (layer, head, step) precision selection.
pub fn precision_seed(seed: u64, layer: usize, head: usize, step: usize) -> u64 {
    // splitmix64 over the packed coordinates
    let mut z = seed
        ^ (layer as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (head as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (step as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One decode step of one layer: projects the normalized input, appends the
/// new token to the cache, selects keys per head according to the mode, runs
/// selection-restricted attention and applies the output projection.
pub fn multihead_decode_step(
    weights: &AttentionWeights<'_>,
    x: &[f64],
    position: usize,
    cache: &mut LayerCache,
    rope: &RopeTable,
    ctx: &StepContext<'_>,
) -> Result<StepOutput> {
    if cache.len() != position {
        return Err(LabError::domain(format!(
            "cache length {} does not match query position {position}",
            cache.len()
        )));
    }
    let qkv = weights.project(x, position, rope);
    cache.append(&qkv.k, &qkv.v);
    if let DecodeMode::Indexer { .. } = ctx.mode {
        let ix = ctx
            .indexer
            .ok_or_else(|| LabError::config("indexer mode without indexer weights"))?;
        cache.index_keys.push(ix.index_key(ctx.layer, x, position)?);
    }
    let n = cache.len();
    let scale = 1.0 / (weights.head_dim as f64).sqrt();
    let logits: Vec<Vec<f64>> = (0..weights.heads)
        .map(|h| cache.head(h).logits(&qkv.q[h], scale))
        .collect();

    let mut selection_record = None;
    let mut exact_sets = None;
    let selections: Vec<Selection> = match ctx.mode {
        DecodeMode::Full => vec![Selection::full(n); weights.heads],
        DecodeMode::TopK { window } => {
            let w = window.window(n);
            logits
                .iter()
                .map(|l| exact_topk(l, w))
                .collect::<Result<_>>()?
        }
        DecodeMode::Precision { window, precision } => {
            let w = window.window(n);
            let exact: Vec<Selection> = logits
                .iter()
                .map(|l| exact_topk(l, w))
                .collect::<Result<_>>()?;
            let chosen = exact
                .iter()
                .enumerate()
                .map(|(h, e)| {
                    if e.is_full() {
                        Ok(e.clone())
                    } else {
                        precision_controlled_select(
                            e,
                            *precision,
                            n,
                            precision_seed(ctx.seed, ctx.layer, h, ctx.step),
                        )
                    }
                })
                .collect::<Result<_>>()?;
            if ctx.capture_selection {
                exact_sets = Some(exact);
            }
            chosen
        }
        DecodeMode::Indexer { window, .. } => {
            let ix = ctx
                .indexer
                .ok_or_else(|| LabError::config("indexer mode without indexer weights"))?;
            let w = window.window(n);
            let scores = indexer_scores(ix, ctx.layer, x, position, &cache.index_keys)?;
            let ranked = exact_topk(&scores, w)?;
            let provenance = if ranked.is_full() {
                Provenance::Full
            } else {
                Provenance::Indexer
            };
            let shared = Selection::from_indices(ranked.ranked().to_vec(), n, provenance)?;
            if ctx.capture_selection {
                let per_head: Vec<Selection> = logits
                    .iter()
                    .map(|l| exact_topk(l, w))
                    .collect::<Result<_>>()?;
                let probs: Vec<Vec<f64>> = logits
                    .iter()
                    .map(|l| {
                        let mut p = l.clone();
                        softmax_in_place(&mut p);
                        p
                    })
                    .collect();
                let pooled = pooled_selection(&per_head, &probs, w)?;
                let mut summed = vec![0.0; n];
                for l in &logits {
                    for (s, v) in summed.iter_mut().zip(l) {
                        *s += v;
                    }
                }
                selection_record = Some(SelectionRecord {
                    sample: ctx.sample,
                    step: ctx.step,
                    layer: ctx.layer,
                    indexer: shared.clone(),
                    per_head_exact: per_head,
                    pooled_exact: pooled,
                    summed_exact: exact_topk(&summed, w)?,
                });
            }
            vec![shared; weights.heads]
        }
    };

    let mut concat = Vec::with_capacity(weights.d_model());
    let mut trace_rows = Vec::new();
    for h in 0..weights.heads {
        let sel = &selections[h];
        let w = selected_weights(&logits[h], sel);
        concat.extend(combine_values(&cache.head(h), sel.indices(), &w));
        if ctx.capture_attention {
            trace_rows.push(TraceRow {
                layer: ctx.layer,
                head: h,
                phase: Phase::Decode,
                step: ctx.step,
                position,
                indices: sel.indices().to_vec(),
                weights: w,
            });
        }
    }
    let mut output = vec![0.0; weights.d_model()];
    matvec(weights.wo, &concat, &mut output);
    Ok(StepOutput {
        output,
        selections,
        trace_rows,
        selection_record,
        exact: exact_sets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Dense oracle: non-selected logits set to -inf, then a plain softmax.
    fn masked_oracle(q: &[f64], keys: &[f64], values: &[f64], d: usize, sel: &[usize], scale: f64) -> Vec<f64> {
        let n = keys.len() / d;
        let logits: Vec<f64> = (0..n)
            .map(|t| {
                if sel.contains(&t) {
                    scale * q.iter().zip(&keys[t * d..(t + 1) * d]).map(|(a, b)| a * b).sum::<f64>()
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut out = vec![0.0; d];
        for t in 0..n {
            for i in 0..d {
                out[i] += e[t] / z * values[t * d + i];
            }
        }
        out
    }

    #[test]
    fn single_key_and_identical_keys() {
        let kv = HeadKv::new(&[0.3, 0.1], &[2.0, -1.0], 2).unwrap();
        let (out, w) = attend_full(&[1.0, 1.0], kv, 0.5).unwrap();
        assert_eq!(w, vec![1.0]);
        assert_eq!(out, vec![2.0, -1.0]);

        let keys = [0.5, 0.5, 0.5, 0.5, 0.5, 0.5];
        let values = [1.0, 0.0, 2.0, 3.0, 0.0, 3.0];
        let kv = HeadKv::new(&keys, &values, 2).unwrap();
        let (out, w) = attend_full(&[0.7, -0.2], kv, 0.7).unwrap();
        for x in &w {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((out[0] - 1.0).abs() < 1e-12 && (out[1] - 2.0).abs() < 1e-12);
        assert!(attend_full(&[1.0], HeadKv::new(&[], &[], 1).unwrap(), 1.0).is_err());
    }

    #[test]
    fn dense_oracle_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 8;
        let n = 64;
        let keys = random(&mut rng, n * d);
        let values = random(&mut rng, n * d);
        let q = random(&mut rng, d);
        let kv = HeadKv::new(&keys, &values, d).unwrap();
        let scale = 1.0 / (d as f64).sqrt();
        let (out, _) = attend_full(&q, kv, scale).unwrap();
        let all: Vec<usize> = (0..n).collect();
        let oracle = masked_oracle(&q, &keys, &values, d, &all, scale);
        for (a, b) in out.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn selected_matches_masked_oracle_and_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 8;
        let n = 128;
        let keys = random(&mut rng, n * d);
        let values = random(&mut rng, n * d);
        let q = random(&mut rng, d);
        let kv = HeadKv::new(&keys, &values, d).unwrap();
        let scale = 0.3;
        let sel = exact_topk(&kv.logits(&q, scale), 16).unwrap();
        let (out, w) = attend_selected(&q, kv, &sel, scale).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let oracle = masked_oracle(&q, &keys, &values, d, sel.indices(), scale);
        for (a, b) in out.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10);
        }
        let (full_out, full_w) = attend_full(&q, kv, scale).unwrap();
        let (all_out, all_w) = attend_selected(&q, kv, &Selection::full(n), scale).unwrap();
        for (a, b) in full_out.iter().zip(&all_out).chain(full_w.iter().zip(&all_w)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_singleton_returns_that_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let keys = random(&mut rng, 40);
        let values = random(&mut rng, 40);
        let q = random(&mut rng, 4);
        let kv = HeadKv::new(&keys, &values, 4).unwrap();
        let sel = exact_topk(&kv.logits(&q, 0.5), 1).unwrap();
        let (out, w) = attend_selected(&q, kv, &sel, 0.5).unwrap();
        assert_eq!(w, vec![1.0]);
        assert_eq!(out.as_slice(), kv.value(sel.indices()[0]));
    }

    #[test]
    fn out_of_range_selection_is_rejected() {
        let kv = HeadKv::new(&[1.0, 2.0], &[1.0, 2.0], 1).unwrap();
        let sel = Selection::from_indices(vec![0, 3], 4, Provenance::Exact).unwrap();
        assert!(matches!(
            attend_selected(&[1.0], kv, &sel, 1.0),
            Err(LabError::Domain(_))
        ));
    }

    #[test]
    fn window_policy_rounding() {
        assert_eq!(WindowPolicy::Ratio(0.01).window(100), 1);
        assert_eq!(WindowPolicy::Ratio(0.01).window(10), 1);
        assert_eq!(WindowPolicy::Ratio(0.25).window(10), 3);
        assert_eq!(WindowPolicy::Ratio(1.0).window(37), 37);
        assert_eq!(WindowPolicy::Fixed(64).window(16), 16);
        assert!(WindowPolicy::Ratio(0.0).validate().is_err());
        assert!(WindowPolicy::Ratio(1.2).validate().is_err());
    }

    #[test]
    fn trace_binary_roundtrip() {
        let trace = AttentionTrace {
            layers: 2,
            heads: 1,
            prefill_len: 3,
            decode_steps: 1,
            rows: vec![
                TraceRow {
                    layer: 0,
                    head: 0,
                    phase: Phase::Prefill,
                    step: 2,
                    position: 2,
                    indices: vec![0, 1, 2],
                    weights: vec![0.2, 0.3, 0.5],
                },
                TraceRow {
                    layer: 1,
                    head: 0,
                    phase: Phase::Decode,
                    step: 0,
                    position: 3,
                    indices: vec![1, 3],
                    weights: vec![0.25, 0.75],
                },
            ],
        };
        let bytes = trace.to_bytes();
        assert_eq!(&bytes[..8], b"TKATTN01");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        let back = AttentionTrace::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, trace);
        assert!(AttentionTrace::read_from(&bytes[..20]).is_err());
        assert!(AttentionTrace::read_from(&b"garbage!xxxxxxxxxxxxxxxxxxx"[..]).is_err());
    }

    #[test]
    fn precision_seed_differs_by_coordinate() {
        let a = precision_seed(1, 0, 0, 0);
        assert_ne!(a, precision_seed(1, 1, 0, 0));
        assert_ne!(a, precision_seed(1, 0, 1, 0));
        assert_ne!(a, precision_seed(1, 0, 0, 1));
        assert_ne!(a, precision_seed(2, 0, 0, 0));
        assert_eq!(a, precision_seed(1, 0, 0, 0));
    }
}
