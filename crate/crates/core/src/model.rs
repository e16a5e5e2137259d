//! Toy pre-norm decoder-only transformer: configuration, parameters,
//! checkpoint files, full-attention prefill and greedy decoding.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{
    multihead_decode_step, AttentionTrace, AttentionWeights, DecodeMode, KvCache, Phase,
    StepContext, TraceRow,
};
use crate::error::{LabError, Result};
use crate::numerics::{dot, matvec, rmsnorm_into, softmax_in_place, RopeTable, Tensor};
use crate::selection::{IndexerConfig, IndexerProjection, IndexerWeights, LayerIndexer, Selection, SelectionTrace};

pub type Token = u32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub rope_theta: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 512,
            layers: 4,
            heads: 4,
            d_model: 128,
            d_ff: 512,
            max_positions: 2048,
            rope_theta: 10000.0,
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab", self.vocab),
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(LabError::config(format!("{name} must be >= 1")));
        }
        if self.d_model % self.heads != 0 {
            return Err(LabError::config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(LabError::config(format!(
                "head dim {} must be even for rotary embeddings",
                self.head_dim()
            )));
        }
        if !(self.rope_theta > 0.0) || !(self.norm_eps > 0.0) {
            return Err(LabError::config("rope_theta and norm_eps must be positive"));
        }
        Ok(())
    }
}

/// Which training produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointProvenance {
    Random,
    FullSft,
    TopkSft,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_norm: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub embed: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_norm: Tensor,
    pub unembed: Tensor,
}

impl Params {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let layer = || LayerParams {
            attn_norm: Tensor::zeros(&[d]),
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wo: Tensor::zeros(&[d, d]),
            mlp_norm: Tensor::zeros(&[d]),
            w1: Tensor::zeros(&[cfg.d_ff, d]),
            w2: Tensor::zeros(&[d, cfg.d_ff]),
        };
        Self {
            embed: Tensor::zeros(&[cfg.vocab, d]),
            layers: (0..cfg.layers).map(|_| layer()).collect(),
            final_norm: Tensor::zeros(&[d]),
            unembed: Tensor::zeros(&[cfg.vocab, d]),
        }
    }

    /// Named tensors in canonical (manifest) order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            for (n, t) in [
                ("attn_norm", &l.attn_norm),
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("mlp_norm", &l.mlp_norm),
                ("w1", &l.w1),
                ("w2", &l.w2),
            ] {
                out.push((format!("layers.{i}.{n}"), t));
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("unembed".into(), &self.unembed));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("embed".to_string(), &mut self.embed)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (n, t) in [
                ("attn_norm", &mut l.attn_norm),
                ("wq", &mut l.wq),
                ("wk", &mut l.wk),
                ("wv", &mut l.wv),
                ("wo", &mut l.wo),
                ("mlp_norm", &mut l.mlp_norm),
                ("w1", &mut l.w1),
                ("w2", &mut l.w2),
            ] {
                out.push((format!("layers.{i}.{n}"), t));
            }
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        out.push(("unembed".into(), &mut self.unembed));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let reference = Params::zeros(cfg);
        let ours = self.named();
        let theirs = reference.named();
        if ours.len() != theirs.len() {
            return Err(LabError::data("parameter count does not match config"));
        }
        for ((name, t), (_, r)) in ours.iter().zip(&theirs) {
            if t.shape() != r.shape() {
                return Err(LabError::Dimension {
                    op: "checkpoint tensor",
                    left: t.shape().to_vec(),
                    right: r.shape().to_vec(),
                })
                .map_err(|e| LabError::data(format!("{name}: {e}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub provenance: CheckpointProvenance,
    pub params: Params,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    provenance: CheckpointProvenance,
    config: ModelConfig,
    weights_file: String,
    sha256: String,
    total_bytes: usize,
    tensors: Vec<ManifestEntry>,
}

const MANIFEST_FORMAT: &str = "topk-lab-checkpoint-v1";

/// `(manifest, weights)` paths for a checkpoint prefix or manifest path.
pub fn checkpoint_paths(path: impl AsRef<Path>) -> (PathBuf, PathBuf) {
    let p = path.as_ref().to_string_lossy().to_string();
    let prefix = p
        .strip_suffix(".manifest.json")
        .or_else(|| p.strip_suffix(".weights.bin"))
        .unwrap_or(&p)
        .to_string();
    (
        PathBuf::from(format!("{prefix}.manifest.json")),
        PathBuf::from(format!("{prefix}.weights.bin")),
    )
}

impl Checkpoint {
    /// Seeded scaled-normal initialization (std 0.02; output projections
    /// further scaled by `1/sqrt(2·layers)`; norm gains 1).
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::zeros(&config);
        let resid_scale = 1.0 / (2.0 * config.layers as f64).sqrt();
        for (name, t) in params.named_mut() {
            if name.ends_with("norm") {
                t.data_mut().iter_mut().for_each(|x| *x = 1.0);
                continue;
            }
            let std = if name.ends_with(".wo") || name.ends_with(".w2") {
                INIT_STD * resid_scale
            } else {
                INIT_STD
            };
            for x in t.data_mut() {
                *x = std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(Self {
            config,
            provenance: CheckpointProvenance::Random,
            params,
        })
    }

    /// Concatenated little-endian f64 weights in canonical order.
    pub fn weight_blob(&self) -> Vec<u8> {
        let mut blob = Vec::with_capacity(self.params.num_parameters() * 8);
        for (_, t) in self.params.named() {
            for x in t.data() {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        }
        blob
    }

    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.weight_blob()))
    }

    /// Writes `<prefix>.manifest.json` and `<prefix>.weights.bin`.
    pub fn save(&self, prefix: impl AsRef<Path>) -> Result<PathBuf> {
        let (manifest_path, weights_path) = checkpoint_paths(prefix);
        if let Some(dir) = manifest_path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
            }
        }
        let blob = self.weight_blob();
        let mut offset = 0;
        let tensors = self
            .params
            .named()
            .into_iter()
            .map(|(name, t)| {
                let e = ManifestEntry {
                    name,
                    shape: t.shape().to_vec(),
                    offset,
                    len: t.len(),
                };
                offset += t.len() * 8;
                e
            })
            .collect();
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            provenance: self.provenance,
            config: self.config,
            weights_file: weights_path
                .file_name()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_default(),
            sha256: hex::encode(Sha256::digest(&blob)),
            total_bytes: blob.len(),
            tensors,
        };
        fs::write(&weights_path, &blob).map_err(|e| LabError::io(&weights_path, e))?;
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&manifest_path, text + "\n").map_err(|e| LabError::io(&manifest_path, e))?;
        Ok(manifest_path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (manifest_path, _) = checkpoint_paths(&path);
        let text =
            fs::read_to_string(&manifest_path).map_err(|e| LabError::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(LabError::data(format!(
                "unsupported checkpoint format {:?}",
                manifest.format
            )));
        }
        manifest.config.validate()?;
        let weights_path = manifest_path
            .parent()
            .unwrap_or_else(|| Path::new(""))
            .join(&manifest.weights_file);
        let blob = fs::read(&weights_path).map_err(|e| LabError::io(&weights_path, e))?;
        if blob.len() != manifest.total_bytes {
            return Err(LabError::data(format!(
                "weights file has {} bytes, manifest says {}",
                blob.len(),
                manifest.total_bytes
            )));
        }
        let digest = hex::encode(Sha256::digest(&blob));
        if digest != manifest.sha256 {
            return Err(LabError::data("weights blob does not match manifest hash"));
        }
        let mut params = Params::zeros(&manifest.config);
        {
            let mut named = params.named_mut();
            if named.len() != manifest.tensors.len() {
                return Err(LabError::data("manifest tensor list does not match config"));
            }
            for ((name, t), entry) in named.iter_mut().zip(&manifest.tensors) {
                if *name != entry.name || t.shape() != entry.shape.as_slice() {
                    return Err(LabError::data(format!(
                        "manifest entry {} {:?} does not match expected {} {:?}",
                        entry.name,
                        entry.shape,
                        name,
                        t.shape()
                    )));
                }
                let end = entry.offset + entry.len * 8;
                if end > blob.len() || entry.len != t.len() {
                    return Err(LabError::data(format!("tensor {} out of bounds", entry.name)));
                }
                for (x, chunk) in t
                    .data_mut()
                    .iter_mut()
                    .zip(blob[entry.offset..end].chunks_exact(8))
                {
                    *x = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
                }
            }
        }
        params.check_shapes(&manifest.config)?;
        Ok(Self {
            config: manifest.config,
            provenance: manifest.provenance,
            params,
        })
    }

    pub fn attention_weights(&self, layer: usize) -> AttentionWeights<'_> {
        let l = &self.params.layers[layer];
        AttentionWeights {
            wq: l.wq.data(),
            wk: l.wk.data(),
            wv: l.wv.data(),
            wo: l.wo.data(),
            heads: self.config.heads,
            head_dim: self.config.head_dim(),
        }
    }

    /// Indexer projections for this model, either seeded random or truncated
    /// copies of the attention query/key projections.
    pub fn indexer_weights(&self, cfg: &IndexerConfig) -> Result<IndexerWeights> {
        let c = &self.config;
        cfg.validate(c.heads, c.head_dim())?;
        match cfg.projection {
            IndexerProjection::Random { seed } => {
                IndexerWeights::random(*cfg, c.d_model, c.layers, c.rope_theta, seed)
            }
            IndexerProjection::TruncatedQk => {
                let dh = c.head_dim();
                let rows = |w: &Tensor, h: usize| -> Vec<f64> {
                    w.data()[h * dh * c.d_model..(h * dh + cfg.dim) * c.d_model].to_vec()
                };
                let layers = self
                    .params
                    .layers
                    .iter()
                    .map(|l| LayerIndexer {
                        query: (0..cfg.heads).map(|h| rows(&l.wq, h)).collect(),
                        key: (0..cfg.heads).map(|h| rows(&l.wk, h)).collect(),
                    })
                    .collect();
                IndexerWeights::new(*cfg, c.d_model, layers, c.rope_theta)
            }
        }
    }
}

pub const INIT_STD: f64 = 0.02;

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn mlp_into(l: &LayerParams, cfg: &ModelConfig, h: &[f64], out: &mut [f64]) {
    let mut xn = vec![0.0; cfg.d_model];
    rmsnorm_into(h, l.mlp_norm.data(), cfg.norm_eps, &mut xn);
    let mut a = vec![0.0; cfg.d_ff];
    matvec(l.w1.data(), &xn, &mut a);
    a.iter_mut().for_each(|v| *v = silu(*v));
    matvec(l.w2.data(), &a, out);
}

fn unembed(ckpt: &Checkpoint, h: &[f64]) -> Vec<f64> {
    let cfg = &ckpt.config;
    let mut xn = vec![0.0; cfg.d_model];
    rmsnorm_into(h, ckpt.params.final_norm.data(), cfg.norm_eps, &mut xn);
    let mut logits = vec![0.0; cfg.vocab];
    matvec(ckpt.params.unembed.data(), &xn, &mut logits);
    logits
}

/// Which prefill query positions get their attention rows recorded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PrefillCapture {
    #[default]
    None,
    /// The last `n` prefill positions.
    Last { n: usize },
    All,
}

impl PrefillCapture {
    fn wants(&self, position: usize, len: usize) -> bool {
        match self {
            PrefillCapture::None => false,
            PrefillCapture::Last { n } => position + n >= len,
            PrefillCapture::All => true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PrefillOutput {
    pub cache: KvCache,
    pub logits: Vec<f64>,
    pub trace_rows: Vec<TraceRow>,
}

/// Full causal attention over the whole prompt, populating the caches.
pub fn prefill(ckpt: &Checkpoint, tokens: &[Token]) -> Result<PrefillOutput> {
    prefill_with(ckpt, tokens, &PrefillCapture::None, None)
}

pub fn prefill_with(
    ckpt: &Checkpoint,
    tokens: &[Token],
    capture: &PrefillCapture,
    indexer: Option<&IndexerWeights>,
) -> Result<PrefillOutput> {
    let cfg = &ckpt.config;
    let t_len = tokens.len();
    if t_len == 0 {
        return Err(LabError::domain("prefill of an empty prompt"));
    }
    if t_len > cfg.max_positions {
        return Err(LabError::domain(format!(
            "prompt length {t_len} exceeds max_positions {}",
            cfg.max_positions
        )));
    }
    check_tokens(cfg, tokens)?;
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let rope = RopeTable::new(dh, cfg.rope_theta);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut cache = KvCache::new(cfg.layers, cfg.heads, dh);
    let mut hidden: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| ckpt.params.embed.row(t as usize).to_vec())
        .collect();
    let mut trace_rows = Vec::new();

    for (li, l) in ckpt.params.layers.iter().enumerate() {
        let aw = ckpt.attention_weights(li);
        let layer_cache = &mut cache.layers[li];
        let mut queries = Vec::with_capacity(t_len);
        for (pos, h) in hidden.iter().enumerate() {
            let mut xn = vec![0.0; d];
            rmsnorm_into(h, l.attn_norm.data(), cfg.norm_eps, &mut xn);
            let qkv = aw.project(&xn, pos, &rope);
            layer_cache.append(&qkv.k, &qkv.v);
            if let Some(ix) = indexer {
                layer_cache.index_keys.push(ix.index_key(li, &xn, pos)?);
            }
            queries.push(qkv.q);
        }
        for (pos, q) in queries.iter().enumerate() {
            let mut concat = Vec::with_capacity(d);
            for (head, qh) in q.iter().enumerate() {
                let kv = layer_cache.head(head);
                let mut w: Vec<f64> = (0..=pos).map(|t| scale * dot(qh, kv.key(t))).collect();
                softmax_in_place(&mut w);
                let mut o = vec![0.0; dh];
                for (t, wt) in w.iter().enumerate() {
                    for (oi, vi) in o.iter_mut().zip(kv.value(t)) {
                        *oi += wt * vi;
                    }
                }
                concat.extend(o);
                if capture.wants(pos, t_len) {
                    trace_rows.push(TraceRow {
                        layer: li,
                        head,
                        phase: Phase::Prefill,
                        step: pos,
                        position: pos,
                        indices: (0..=pos).collect(),
                        weights: w,
                    });
                }
            }
            let mut attn = vec![0.0; d];
            matvec(aw.wo, &concat, &mut attn);
            let h = &mut hidden[pos];
            for (hv, a) in h.iter_mut().zip(&attn) {
                *hv += a;
            }
            let mut m = vec![0.0; d];
            mlp_into(l, cfg, h, &mut m);
            for (hv, a) in h.iter_mut().zip(&m) {
                *hv += a;
            }
        }
    }
    let logits = unembed(ckpt, hidden.last().expect("non-empty prompt"));
    Ok(PrefillOutput {
        cache,
        logits,
        trace_rows,
    })
}

fn check_tokens(cfg: &ModelConfig, tokens: &[Token]) -> Result<()> {
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
        return Err(LabError::domain(format!(
            "token {bad} outside vocabulary of size {}",
            cfg.vocab
        )));
    }
    Ok(())
}

/// Logits at every position under full causal attention.
pub fn sequence_logits(ckpt: &Checkpoint, tokens: &[Token]) -> Result<Vec<Vec<f64>>> {
    let mut session = Session::new(ckpt, DecodeMode::Full, 0, None)?;
    tokens.iter().map(|&t| session.step(t)).collect()
}

/// An incremental decoding episode that owns its caches.
pub struct Session<'a> {
    ckpt: &'a Checkpoint,
    cache: KvCache,
    rope: RopeTable,
    mode: DecodeMode,
    indexer: Option<IndexerWeights>,
    seed: u64,
    step: usize,
    pub capture_attention: bool,
    pub capture_selection: bool,
    pub sample: usize,
    pub trace: AttentionTrace,
    pub selections: SelectionTrace,
    /// Attended window per (step, layer, head), for auditing.
    pub windows: Vec<Vec<Vec<usize>>>,
    /// Precision-mode audits, recorded with `capture_selection`.
    pub audits: Vec<PrecisionAudit>,
}

/// Exact and delivered per-head selections of one precision-controlled layer step.
#[derive(Debug, Clone)]
pub struct PrecisionAudit {
    pub step: usize,
    pub layer: usize,
    pub exact: Vec<Selection>,
    pub chosen: Vec<Selection>,
}

impl<'a> Session<'a> {
    pub fn new(
        ckpt: &'a Checkpoint,
        mode: DecodeMode,
        seed: u64,
        indexer: Option<IndexerWeights>,
    ) -> Result<Self> {
        mode.validate()?;
        let cfg = &ckpt.config;
        let indexer = match (&mode, indexer) {
            (DecodeMode::Indexer { config, .. }, None) => Some(ckpt.indexer_weights(config)?),
            (_, ix) => ix,
        };
        Ok(Self {
            ckpt,
            cache: KvCache::new(cfg.layers, cfg.heads, cfg.head_dim()),
            rope: RopeTable::new(cfg.head_dim(), cfg.rope_theta),
            mode,
            indexer,
            seed,
            step: 0,
            capture_attention: false,
            capture_selection: false,
            sample: 0,
            trace: AttentionTrace::new(cfg.layers, cfg.heads),
            selections: SelectionTrace::default(),
            windows: Vec::new(),
            audits: Vec::new(),
        })
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    pub fn position(&self) -> usize {
        self.cache.len()
    }

    /// Runs full-attention prefill over `tokens`; the session must be empty.
    pub fn prefill(&mut self, tokens: &[Token], capture: &PrefillCapture) -> Result<Vec<f64>> {
        if !self.cache.is_empty() {
            return Err(LabError::domain("prefill on a non-empty session"));
        }
        let out = prefill_with(self.ckpt, tokens, capture, self.indexer.as_ref())?;
        self.cache = out.cache;
        self.trace.prefill_len = tokens.len();
        self.trace.rows.extend(out.trace_rows);
        Ok(out.logits)
    }

    /// Feeds one token through every layer in decode mode; returns its logits.
    pub fn step(&mut self, token: Token) -> Result<Vec<f64>> {
        let cfg = self.ckpt.config;
        let pos = self.cache.len();
        if pos >= cfg.max_positions {
            return Err(LabError::domain(format!(
                "position {pos} exceeds max_positions {}",
                cfg.max_positions
            )));
        }
        check_tokens(&cfg, &[token])?;
        let d = cfg.d_model;
        let mut h = self.ckpt.params.embed.row(token as usize).to_vec();
        let mut windows = Vec::with_capacity(cfg.layers);
        for (li, l) in self.ckpt.params.layers.iter().enumerate() {
            let mut xn = vec![0.0; d];
            rmsnorm_into(&h, l.attn_norm.data(), cfg.norm_eps, &mut xn);
            let ctx = StepContext {
                mode: &self.mode,
                indexer: self.indexer.as_ref(),
                layer: li,
                step: self.step,
                seed: self.seed,
                capture_attention: self.capture_attention,
                capture_selection: self.capture_selection,
                sample: self.sample,
            };
            let aw = self.ckpt.attention_weights(li);
            let out = multihead_decode_step(&aw, &xn, pos, &mut self.cache.layers[li], &self.rope, &ctx)?;
            windows.push(out.selections.iter().map(|s| s.window()).collect());
            self.trace.rows.extend(out.trace_rows);
            if let Some(rec) = out.selection_record {
                self.selections.records.push(rec);
            }
            if let Some(exact) = out.exact {
                self.audits.push(PrecisionAudit {
                    step: self.step,
                    layer: li,
                    exact,
                    chosen: out.selections.clone(),
                });
            }
            for (hv, a) in h.iter_mut().zip(&out.output) {
                *hv += a;
            }
            let mut m = vec![0.0; d];
            mlp_into(l, &cfg, &h, &mut m);
            for (hv, a) in h.iter_mut().zip(&m) {
                *hv += a;
            }
        }
        self.windows.push(windows);
        self.step += 1;
        self.trace.decode_steps = self.step;
        Ok(unembed(self.ckpt, &h))
    }
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Default)]
pub struct GenerateOptions {
    pub capture_attention: bool,
    pub capture_selection: bool,
    pub prefill_capture: PrefillCapture,
    pub sample: usize,
}

#[derive(Debug, Clone)]
pub struct GenerationOutput {
    pub tokens: Vec<Token>,
    pub trace: Option<AttentionTrace>,
    pub selections: Option<SelectionTrace>,
    /// Attended window per (decode step, layer, head).
    pub windows: Vec<Vec<Vec<usize>>>,
    pub audits: Vec<PrecisionAudit>,
}

/// Greedy generation. The prompt minus its final token is prefilled with
/// full attention; the final prompt token opens the decode phase, so every
/// emitted token is produced by a decode step under `mode`.
pub fn generate(
    ckpt: &Checkpoint,
    prompt: &[Token],
    steps: usize,
    mode: DecodeMode,
    capture: bool,
    seed: u64,
) -> Result<GenerationOutput> {
    let opts = GenerateOptions {
        capture_attention: capture,
        prefill_capture: if capture {
            PrefillCapture::Last { n: 10 }
        } else {
            PrefillCapture::None
        },
        ..Default::default()
    };
    generate_with(ckpt, prompt, steps, mode, seed, None, &opts)
}

pub fn generate_with(
    ckpt: &Checkpoint,
    prompt: &[Token],
    steps: usize,
    mode: DecodeMode,
    seed: u64,
    indexer: Option<IndexerWeights>,
    opts: &GenerateOptions,
) -> Result<GenerationOutput> {
    if steps == 0 {
        return Err(LabError::domain("generate needs at least one step"));
    }
    let Some((&last, context)) = prompt.split_last() else {
        return Err(LabError::domain("generate needs a non-empty prompt"));
    };
    let mut session = Session::new(ckpt, mode, seed, indexer)?;
    session.capture_attention = opts.capture_attention;
    session.capture_selection = opts.capture_selection;
    session.sample = opts.sample;
    if !context.is_empty() {
        session.prefill(context, &opts.prefill_capture)?;
    }
    let mut tokens = Vec::with_capacity(steps);
    let mut next = last;
    for _ in 0..steps {
        let logits = session.step(next)?;
        next = argmax(&logits) as Token;
        tokens.push(next);
    }
    Ok(GenerationOutput {
        tokens,
        trace: opts.capture_attention.then(|| session.trace.clone()),
        selections: opts.capture_selection.then(|| session.selections.clone()),
        windows: session.windows,
        audits: session.audits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab: 24,
            layers: 2,
            heads: 2,
            d_model: 16,
            d_ff: 32,
            max_positions: 64,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut bad = tiny();
        bad.heads = 3;
        assert!(matches!(bad.validate(), Err(LabError::Config(_))));
        bad = tiny();
        bad.layers = 0;
        assert!(Checkpoint::init(bad, 1).is_err());
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = Checkpoint::init(tiny(), 5).unwrap();
        let b = Checkpoint::init(tiny(), 5).unwrap();
        let c = Checkpoint::init(tiny(), 6).unwrap();
        assert_eq!(a.weight_blob(), b.weight_blob());
        assert_ne!(a.weight_blob(), c.weight_blob());
        assert_eq!(a.provenance, CheckpointProvenance::Random);
    }

    #[test]
    fn init_statistics() {
        let cfg = ModelConfig {
            vocab: 128,
            layers: 2,
            heads: 4,
            d_model: 64,
            d_ff: 256,
            max_positions: 64,
            ..Default::default()
        };
        let ck = Checkpoint::init(cfg, 1).unwrap();
        let resid = INIT_STD / (2.0 * cfg.layers as f64).sqrt();
        for (name, t) in ck.params.named() {
            if name.ends_with("norm") {
                assert!(t.data().iter().all(|&x| x == 1.0));
                continue;
            }
            let target = if name.ends_with(".wo") || name.ends_with(".w2") {
                resid
            } else {
                INIT_STD
            };
            let n = t.len() as f64;
            let mean = t.data().iter().sum::<f64>() / n;
            let std = (t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!((std - target).abs() < 0.1 * target, "{name}: std {std}");
            assert!(mean.abs() < 0.1 * target, "{name}: mean {mean}");
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let ck = Checkpoint::init(tiny(), 2).unwrap();
        let prefix = dir.path().join("ck");
        let manifest = ck.save(&prefix).unwrap();
        assert!(manifest.ends_with("ck.manifest.json"));
        let back = Checkpoint::load(&prefix).unwrap();
        assert_eq!(back, ck);
        let back2 = Checkpoint::load(&manifest).unwrap();
        assert_eq!(back2, ck);

        let weights = dir.path().join("ck.weights.bin");
        let mut blob = std::fs::read(&weights).unwrap();
        blob[3] ^= 0x40;
        std::fs::write(&weights, &blob).unwrap();
        assert!(matches!(Checkpoint::load(&prefix), Err(LabError::Data(_))));
    }

    #[test]
    fn single_token_prefill_fills_each_layer() {
        let ck = Checkpoint::init(tiny(), 3).unwrap();
        let out = prefill(&ck, &[4]).unwrap();
        assert!(out.cache.layers.iter().all(|l| l.len() == 1));
        assert_eq!(out.logits.len(), 24);
        let too_long = vec![1; 65];
        assert!(prefill(&ck, &too_long).is_err());
        assert!(prefill(&ck, &[30]).is_err());
    }

    #[test]
    fn prefill_matches_sequential_decode() {
        let ck = Checkpoint::init(tiny(), 4).unwrap();
        let tokens: Vec<Token> = (0..20).map(|i| (i * 7 % 24) as Token).collect();
        let pre = prefill(&ck, &tokens).unwrap();
        let seq = sequence_logits(&ck, &tokens).unwrap();
        for (a, b) in pre.logits.iter().zip(seq.last().unwrap()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn causality_future_tokens_do_not_leak() {
        let ck = Checkpoint::init(tiny(), 8).unwrap();
        let a: Vec<Token> = vec![1, 5, 9, 2, 7, 3, 11, 4];
        let mut b = a.clone();
        b[6] = 20;
        b[7] = 0;
        let la = sequence_logits(&ck, &a).unwrap();
        let lb = sequence_logits(&ck, &b).unwrap();
        for t in 0..6 {
            assert_eq!(la[t], lb[t]);
        }
    }

    #[test]
    fn generate_step_count_and_modes() {
        let ck = Checkpoint::init(tiny(), 9).unwrap();
        let prompt: Vec<Token> = (0..30).map(|i| (i * 5 % 24) as Token).collect();
        assert!(generate(&ck, &prompt, 0, DecodeMode::Full, false, 0).is_err());
        let one = generate(&ck, &prompt, 1, DecodeMode::Full, false, 0).unwrap();
        assert_eq!(one.tokens.len(), 1);
        let full = generate(&ck, &prompt, 6, DecodeMode::Full, false, 0).unwrap();
        let rho1 = generate(&ck, &prompt, 6, DecodeMode::topk_ratio(1.0), false, 0).unwrap();
        assert_eq!(full.tokens, rho1.tokens);
        let sparse = generate(&ck, &prompt, 4, DecodeMode::topk_ratio(0.1), true, 0).unwrap();
        // window recomputed per step: N = 30, 31, 32, 33
        let expected = [3usize, 3, 3, 3];
        for (step, w) in sparse.windows.iter().zip(expected) {
            assert!(step.iter().flatten().all(|&x| x == w));
        }
        let trace = sparse.trace.unwrap();
        assert_eq!(trace.decode_steps, 4);
        assert_eq!(trace.prefill_len, 29);
    }
}
