//! Backpropagation through the toy model with optional Top-k attention
//! masking, cross-entropy loss, Adam, and finite-difference gradient checks.
//!
//! In Top-k mode each query position `t` first computes its true logits over
//! the `t + 1` visible keys, picks the exact top `max(1, round(ρ·(t+1)))`,
//! and only then evaluates a softmax restricted to those keys. The chosen
//! indices are constants as far as the gradient is concerned.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::WindowPolicy;
use crate::error::{LabError, Result};
use crate::model::{silu, Checkpoint, CheckpointProvenance, ModelConfig, Params, Token};
use crate::numerics::{dot, matvec, matvec_t_acc, outer_acc, rmsnorm_into, softmax_in_place, RopeTable};
use crate::selection::exact_topk;
use crate::tasks::TaskInstance;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TrainMode {
    Full,
    Topk { ratio: f64 },
}

impl TrainMode {
    fn window(&self, context_len: usize) -> usize {
        match *self {
            TrainMode::Full => context_len,
            TrainMode::Topk { ratio } => WindowPolicy::Ratio(ratio).window(context_len),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            TrainMode::Full => Ok(()),
            TrainMode::Topk { ratio } if ratio > 0.0 && ratio <= 1.0 => Ok(()),
            TrainMode::Topk { ratio } => Err(LabError::config(format!(
                "Top-k training ratio must lie in (0, 1], got {ratio}"
            ))),
        }
    }

    pub fn provenance(&self) -> CheckpointProvenance {
        match self {
            TrainMode::Full => CheckpointProvenance::FullSft,
            TrainMode::Topk { .. } => CheckpointProvenance::TopkSft,
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainMode::Full => f.write_str("full"),
            TrainMode::Topk { ratio } => write!(f, "topk({ratio})"),
        }
    }
}

/// One supervised sequence: next-token targets with a per-position loss mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub inputs: Vec<Token>,
    pub targets: Vec<Token>,
    pub loss_mask: Vec<bool>,
}

impl TrainExample {
    /// `prompt ++ answer`, shifted by one. With `answer_only`, only positions
    /// predicting answer tokens carry loss.
    pub fn from_instance(inst: &TaskInstance, answer_only: bool) -> Self {
        let mut seq = inst.prompt.clone();
        seq.extend_from_slice(&inst.answer);
        let inputs = seq[..seq.len() - 1].to_vec();
        let targets = seq[1..].to_vec();
        let first_answer = inst.prompt.len() - 1;
        let loss_mask = (0..inputs.len())
            .map(|t| !answer_only || t >= first_answer)
            .collect();
        Self {
            inputs,
            targets,
            loss_mask,
        }
    }
}

/// Selected key indices per `[layer][head][query]`; `None` means all visible keys.
pub type Selections = Vec<Vec<Vec<Option<Vec<usize>>>>>;

struct LayerActs {
    x: Vec<Vec<f64>>,
    xn1: Vec<Vec<f64>>,
    inv1: Vec<f64>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    // [head][t] probabilities aligned with the selection (or 0..=t)
    probs: Vec<Vec<Vec<f64>>>,
    o: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    xn2: Vec<Vec<f64>>,
    inv2: Vec<f64>,
    a1: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
}

struct SeqActs {
    example: usize,
    layers: Vec<LayerActs>,
    x_final: Vec<Vec<f64>>,
    xf: Vec<Vec<f64>>,
    inv_f: Vec<f64>,
    // (position, softmax over vocab) for loss positions
    probs_out: Vec<(usize, Vec<f64>)>,
    selections: Vec<Vec<Vec<Option<Vec<usize>>>>>,
}

/// Loss plus everything backward needs.
pub struct ForwardPass<'a> {
    pub loss: f64,
    pub loss_tokens: usize,
    ckpt: &'a Checkpoint,
    batch: &'a [TrainExample],
    seqs: Vec<SeqActs>,
}

impl ForwardPass<'_> {
    /// The selections actually used, one entry per batch element.
    pub fn selections(&self) -> Vec<Selections> {
        self.seqs.iter().map(|s| s.selections.clone()).collect()
    }
}

fn validate_batch(cfg: &ModelConfig, batch: &[TrainExample]) -> Result<()> {
    if batch.is_empty() {
        return Err(LabError::domain("empty batch"));
    }
    for ex in batch {
        if ex.inputs.is_empty()
            || ex.inputs.len() != ex.targets.len()
            || ex.inputs.len() != ex.loss_mask.len()
        {
            return Err(LabError::domain("malformed training example"));
        }
        if ex.inputs.len() > cfg.max_positions {
            return Err(LabError::domain(format!(
                "sequence length {} exceeds max_positions {}",
                ex.inputs.len(),
                cfg.max_positions
            )));
        }
        if ex
            .inputs
            .iter()
            .chain(&ex.targets)
            .any(|&t| t as usize >= cfg.vocab)
        {
            return Err(LabError::domain("token outside vocabulary"));
        }
    }
    Ok(())
}

pub fn forward_loss<'a>(
    ckpt: &'a Checkpoint,
    batch: &'a [TrainExample],
    mode: TrainMode,
) -> Result<ForwardPass<'a>> {
    forward_impl(ckpt, batch, mode, None)
}

/// Forward pass reusing previously computed selections (frozen masks).
pub fn forward_loss_frozen<'a>(
    ckpt: &'a Checkpoint,
    batch: &'a [TrainExample],
    frozen: &[Selections],
) -> Result<ForwardPass<'a>> {
    if frozen.len() != batch.len() {
        return Err(LabError::domain("frozen selections do not match batch"));
    }
    forward_impl(ckpt, batch, TrainMode::Full, Some(frozen))
}

fn forward_impl<'a>(
    ckpt: &'a Checkpoint,
    batch: &'a [TrainExample],
    mode: TrainMode,
    frozen: Option<&[Selections]>,
) -> Result<ForwardPass<'a>> {
    let cfg = &ckpt.config;
    mode.validate()?;
    validate_batch(cfg, batch)?;
    let loss_tokens: usize = batch
        .iter()
        .map(|e| e.loss_mask.iter().filter(|&&m| m).count())
        .sum();
    let rope = RopeTable::new(cfg.head_dim(), cfg.rope_theta);
    let mut total = 0.0;
    let mut seqs = Vec::with_capacity(batch.len());
    for (ei, ex) in batch.iter().enumerate() {
        let (seq, loss_sum) =
            forward_sequence(ckpt, &rope, ex, mode, frozen.map(|f| &f[ei]), ei)?;
        total += loss_sum;
        seqs.push(seq);
    }
    let loss = if loss_tokens == 0 {
        0.0
    } else {
        total / loss_tokens as f64
    };
    Ok(ForwardPass {
        loss,
        loss_tokens,
        ckpt,
        batch,
        seqs,
    })
}

fn forward_sequence(
    ckpt: &Checkpoint,
    rope: &RopeTable,
    ex: &TrainExample,
    mode: TrainMode,
    frozen: Option<&Selections>,
    example: usize,
) -> Result<(SeqActs, f64)> {
    let cfg = &ckpt.config;
    let p = &ckpt.params;
    let (d, dh, nh, t_len) = (cfg.d_model, cfg.head_dim(), cfg.heads, ex.inputs.len());
    let scale = 1.0 / (dh as f64).sqrt();
    let mut x: Vec<Vec<f64>> = ex
        .inputs
        .iter()
        .map(|&t| p.embed.row(t as usize).to_vec())
        .collect();
    let mut layers = Vec::with_capacity(cfg.layers);
    let mut selections = Vec::with_capacity(cfg.layers);

    for (li, lp) in p.layers.iter().enumerate() {
        let mut xn1 = vec![vec![0.0; d]; t_len];
        let mut inv1 = vec![0.0; t_len];
        let mut q = vec![vec![0.0; d]; t_len];
        let mut k = vec![vec![0.0; d]; t_len];
        let mut v = vec![vec![0.0; d]; t_len];
        for t in 0..t_len {
            inv1[t] = rmsnorm_into(&x[t], lp.attn_norm.data(), cfg.norm_eps, &mut xn1[t]);
            matvec(lp.wq.data(), &xn1[t], &mut q[t]);
            matvec(lp.wk.data(), &xn1[t], &mut k[t]);
            matvec(lp.wv.data(), &xn1[t], &mut v[t]);
            for h in 0..nh {
                rope.apply(&mut q[t][h * dh..(h + 1) * dh], t, 1.0);
                rope.apply(&mut k[t][h * dh..(h + 1) * dh], t, 1.0);
            }
        }
        let mut o = vec![vec![0.0; d]; t_len];
        let mut probs = vec![Vec::with_capacity(t_len); nh];
        let mut layer_sel = vec![Vec::with_capacity(t_len); nh];
        for h in 0..nh {
            let hs = h * dh..(h + 1) * dh;
            for t in 0..t_len {
                let qt = &q[t][hs.clone()];
                let sel: Option<Vec<usize>> = match frozen {
                    Some(f) => f[li][h][t].clone(),
                    None => {
                        let n = t + 1;
                        let w = mode.window(n);
                        if w >= n {
                            None
                        } else {
                            let logits: Vec<f64> =
                                (0..n).map(|j| scale * dot(qt, &k[j][hs.clone()])).collect();
                            Some(exact_topk(&logits, w)?.indices().to_vec())
                        }
                    }
                };
                let mut pr: Vec<f64> = match &sel {
                    None => (0..=t).map(|j| scale * dot(qt, &k[j][hs.clone()])).collect(),
                    Some(s) => s.iter().map(|&j| scale * dot(qt, &k[j][hs.clone()])).collect(),
                };
                softmax_in_place(&mut pr);
                let ot = &mut o[t][hs.clone()];
                match &sel {
                    None => {
                        for (j, pj) in pr.iter().enumerate() {
                            for (oi, vi) in ot.iter_mut().zip(&v[j][hs.clone()]) {
                                *oi += pj * vi;
                            }
                        }
                    }
                    Some(s) => {
                        for (&j, pj) in s.iter().zip(&pr) {
                            for (oi, vi) in ot.iter_mut().zip(&v[j][hs.clone()]) {
                                *oi += pj * vi;
                            }
                        }
                    }
                }
                probs[h].push(pr);
                layer_sel[h].push(sel);
            }
        }
        let mut y = x.clone();
        let mut xn2 = vec![vec![0.0; d]; t_len];
        let mut inv2 = vec![0.0; t_len];
        let mut a1 = vec![vec![0.0; cfg.d_ff]; t_len];
        let mut act = vec![vec![0.0; cfg.d_ff]; t_len];
        let mut x_next = vec![vec![0.0; d]; t_len];
        let mut tmp = vec![0.0; d];
        for t in 0..t_len {
            matvec(lp.wo.data(), &o[t], &mut tmp);
            for (yv, a) in y[t].iter_mut().zip(&tmp) {
                *yv += a;
            }
            inv2[t] = rmsnorm_into(&y[t], lp.mlp_norm.data(), cfg.norm_eps, &mut xn2[t]);
            matvec(lp.w1.data(), &xn2[t], &mut a1[t]);
            for (a, z) in act[t].iter_mut().zip(&a1[t]) {
                *a = silu(*z);
            }
            matvec(lp.w2.data(), &act[t], &mut tmp);
            for ((xv, yv), m) in x_next[t].iter_mut().zip(&y[t]).zip(&tmp) {
                *xv = yv + m;
            }
        }
        layers.push(LayerActs {
            x: std::mem::replace(&mut x, x_next),
            xn1,
            inv1,
            q,
            k,
            v,
            probs,
            o,
            y,
            xn2,
            inv2,
            a1,
            act,
        });
        selections.push(layer_sel);
    }

    let mut xf = vec![vec![0.0; d]; t_len];
    let mut inv_f = vec![0.0; t_len];
    let mut probs_out = Vec::new();
    let mut loss_sum = 0.0;
    for t in 0..t_len {
        inv_f[t] = rmsnorm_into(&x[t], p.final_norm.data(), cfg.norm_eps, &mut xf[t]);
        if !ex.loss_mask[t] {
            continue;
        }
        let mut logits = vec![0.0; cfg.vocab];
        matvec(p.unembed.data(), &xf[t], &mut logits);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        loss_sum += lse - logits[ex.targets[t] as usize];
        softmax_in_place(&mut logits);
        probs_out.push((t, logits));
    }
    Ok((
        SeqActs {
            example,
            layers,
            x_final: x,
            xf,
            inv_f,
            probs_out,
            selections,
        },
        loss_sum,
    ))
}

/// Backprop through RMSNorm: accumulates the gain gradient, returns `dx`.
fn rmsnorm_backward(x: &[f64], gain: &[f64], inv: f64, dout: &[f64], dgain: &mut [f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mut du = vec![0.0; x.len()];
    let mut proj = 0.0;
    for i in 0..x.len() {
        let u = x[i] * inv;
        dgain[i] += dout[i] * u;
        du[i] = dout[i] * gain[i];
        proj += du[i] * u;
    }
    proj /= n;
    (0..x.len())
        .map(|i| inv * (du[i] - x[i] * inv * proj))
        .collect()
}

/// Activation gradients of the value vectors, `[example][layer][t][d_model]`.
pub type ValueGrads = Vec<Vec<Vec<Vec<f64>>>>;

pub fn backward(pass: &ForwardPass<'_>) -> Params {
    backward_with_values(pass).0
}

/// Parameter gradients plus per-position value-vector gradients.
pub fn backward_with_values(pass: &ForwardPass<'_>) -> (Params, ValueGrads) {
    let ckpt = pass.ckpt;
    let cfg = &ckpt.config;
    let p = &ckpt.params;
    let mut g = Params::zeros(cfg);
    let mut value_grads = Vec::with_capacity(pass.seqs.len());
    if pass.loss_tokens == 0 {
        for seq in &pass.seqs {
            let t_len = seq.xf.len();
            value_grads.push(vec![vec![vec![0.0; cfg.d_model]; t_len]; cfg.layers]);
        }
        return (g, value_grads);
    }
    let (d, dh, nh) = (cfg.d_model, cfg.head_dim(), cfg.heads);
    let scale = 1.0 / (dh as f64).sqrt();
    let rope = RopeTable::new(dh, cfg.rope_theta);
    let norm = 1.0 / pass.loss_tokens as f64;

    for seq in &pass.seqs {
        let ex = &pass.batch[seq.example];
        let t_len = ex.inputs.len();
        let mut dx = vec![vec![0.0; d]; t_len];
        for (t, probs) in &seq.probs_out {
            let mut dl = probs.clone();
            dl[ex.targets[*t] as usize] -= 1.0;
            dl.iter_mut().for_each(|v| *v *= norm);
            outer_acc(g.unembed.data_mut(), &dl, &seq.xf[*t]);
            let mut dxf = vec![0.0; d];
            matvec_t_acc(p.unembed.data(), &dl, &mut dxf);
            dx[*t] = rmsnorm_backward(
                &seq.x_final[*t],
                p.final_norm.data(),
                seq.inv_f[*t],
                &dxf,
                g.final_norm.data_mut(),
            );
        }
        let mut seq_vgrads = vec![Vec::new(); cfg.layers];
        for li in (0..cfg.layers).rev() {
            let a = &seq.layers[li];
            let lp = &p.layers[li];
            let gl = &mut g.layers[li];
            // MLP
            let mut dy = dx.clone();
            for t in 0..t_len {
                let dm = &dx[t];
                outer_acc(gl.w2.data_mut(), dm, &a.act[t]);
                let mut dact = vec![0.0; cfg.d_ff];
                matvec_t_acc(lp.w2.data(), dm, &mut dact);
                for (dz, z) in dact.iter_mut().zip(&a.a1[t]) {
                    let s = 1.0 / (1.0 + (-z).exp());
                    *dz *= s * (1.0 + z * (1.0 - s));
                }
                outer_acc(gl.w1.data_mut(), &dact, &a.xn2[t]);
                let mut dxn2 = vec![0.0; d];
                matvec_t_acc(lp.w1.data(), &dact, &mut dxn2);
                let dres =
                    rmsnorm_backward(&a.y[t], lp.mlp_norm.data(), a.inv2[t], &dxn2, gl.mlp_norm.data_mut());
                for (dv, r) in dy[t].iter_mut().zip(&dres) {
                    *dv += r;
                }
            }
            // attention
            let mut do_ = vec![vec![0.0; d]; t_len];
            for t in 0..t_len {
                outer_acc(gl.wo.data_mut(), &dy[t], &a.o[t]);
                matvec_t_acc(lp.wo.data(), &dy[t], &mut do_[t]);
            }
            let mut dq = vec![vec![0.0; d]; t_len];
            let mut dk = vec![vec![0.0; d]; t_len];
            let mut dvv = vec![vec![0.0; d]; t_len];
            for h in 0..nh {
                let hs = h * dh..(h + 1) * dh;
                for t in 0..t_len {
                    let pr = &a.probs[h][t];
                    let idx: Vec<usize> = match &seq.selections[li][h][t] {
                        None => (0..=t).collect(),
                        Some(s) => s.clone(),
                    };
                    let dot_t = &do_[t][hs.clone()];
                    let dp: Vec<f64> = idx.iter().map(|&j| dot(dot_t, &a.v[j][hs.clone()])).collect();
                    let s: f64 = pr.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for (i, &j) in idx.iter().enumerate() {
                        for (dvj, &dov) in dvv[j][hs.clone()].iter_mut().zip(dot_t) {
                            *dvj += pr[i] * dov;
                        }
                        let ds = pr[i] * (dp[i] - s) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for c in 0..dh {
                            dq[t][h * dh + c] += ds * a.k[j][h * dh + c];
                            dk[j][h * dh + c] += ds * a.q[t][h * dh + c];
                        }
                    }
                }
            }
            let mut dx_prev = dy;
            for t in 0..t_len {
                for h in 0..nh {
                    rope.apply(&mut dq[t][h * dh..(h + 1) * dh], t, -1.0);
                    rope.apply(&mut dk[t][h * dh..(h + 1) * dh], t, -1.0);
                }
                outer_acc(gl.wq.data_mut(), &dq[t], &a.xn1[t]);
                outer_acc(gl.wk.data_mut(), &dk[t], &a.xn1[t]);
                outer_acc(gl.wv.data_mut(), &dvv[t], &a.xn1[t]);
                let mut dxn1 = vec![0.0; d];
                matvec_t_acc(lp.wq.data(), &dq[t], &mut dxn1);
                matvec_t_acc(lp.wk.data(), &dk[t], &mut dxn1);
                matvec_t_acc(lp.wv.data(), &dvv[t], &mut dxn1);
                let dres =
                    rmsnorm_backward(&a.x[t], lp.attn_norm.data(), a.inv1[t], &dxn1, gl.attn_norm.data_mut());
                for (dv, r) in dx_prev[t].iter_mut().zip(&dres) {
                    *dv += r;
                }
            }
            seq_vgrads[li] = dvv;
            dx = dx_prev;
        }
        for (t, &tok) in ex.inputs.iter().enumerate() {
            for (e, dv) in g.embed.row_mut(tok as usize).iter_mut().zip(&dx[t]) {
                *e += dv;
            }
        }
        value_grads.push(seq_vgrads);
    }
    (g, value_grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub answer_only: bool,
    /// Optional global gradient-norm clip.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Full,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            steps: 200,
            seed: 0,
            answer_only: true,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.mode.validate()?;
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(LabError::config(format!("invalid learning rate {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(LabError::config("Adam betas must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(LabError::config("batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Adam with bias correction over the full parameter set.
pub struct Adam {
    m: Params,
    v: Params,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(cfg: &ModelConfig, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: Params::zeros(cfg),
            v: Params::zeros(cfg),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((_, p), (_, g)), ((_, m), (_, v))) in params
            .named_mut()
            .into_iter()
            .zip(grads.named())
            .zip(self.m.named_mut().into_iter().zip(self.v.named_mut()))
        {
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

fn grad_norm(g: &Params) -> f64 {
    g.named()
        .iter()
        .map(|(_, t)| dot(t.data(), t.data()))
        .sum::<f64>()
        .sqrt()
}

fn scale_params(g: &mut Params, s: f64) {
    for (_, t) in g.named_mut() {
        t.data_mut().iter_mut().for_each(|x| *x *= s);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub mode: TrainMode,
    pub seed: u64,
    pub losses: Vec<f64>,
}

impl LossCurve {
    pub const CSV_HEADER: &'static str = "step,loss,mode,seed";

    pub fn csv_rows(&self) -> Vec<String> {
        let mode = match self.mode {
            TrainMode::Full => "full".to_string(),
            TrainMode::Topk { ratio } => format!("topk:{ratio}"),
        };
        self.losses
            .iter()
            .enumerate()
            .map(|(i, l)| format!("{},{:.10},{},{}", i + 1, l, mode, self.seed))
            .collect()
    }
}

/// Trains a copy of `ckpt` on `dataset` with seeded shuffled minibatches.
pub fn train(
    ckpt: &Checkpoint,
    dataset: &[TrainExample],
    config: &TrainConfig,
) -> Result<(Checkpoint, LossCurve)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(LabError::domain("training dataset is empty"));
    }
    let mut model = ckpt.clone();
    model.provenance = config.mode.provenance();
    let mut adam = Adam::new(&model.config, config.beta1, config.beta2, config.eps);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(dataset[order[cursor]].clone());
            cursor += 1;
        }
        let (loss, mut grads) = {
            let pass = forward_loss(&model, &batch, config.mode)?;
            (pass.loss, backward(&pass))
        };
        if !loss.is_finite() {
            return Err(LabError::Training { step, loss });
        }
        if let Some(clip) = config.grad_clip {
            let n = grad_norm(&grads);
            if n > clip {
                scale_params(&mut grads, clip / n);
            }
        }
        adam.step(&mut model.params, &grads, config.lr);
        losses.push(loss);
    }
    Ok((
        model,
        LossCurve {
            mode: config.mode,
            seed: config.seed,
            losses,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// Floor in the relative-error denominator, below which gradients count as zero.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares analytic gradients with central differences of step `h` for
/// every entry of every parameter tensor. Selections are frozen at the
/// unperturbed point.
pub fn grad_check(
    ckpt: &Checkpoint,
    batch: &[TrainExample],
    mode: TrainMode,
    h: f64,
) -> Result<GradCheckReport> {
    let (analytic, frozen) = {
        let pass = forward_loss(ckpt, batch, mode)?;
        (backward(&pass), pass.selections())
    };
    let mut probe = ckpt.clone();
    let mut groups = Vec::new();
    let names: Vec<(String, usize)> = ckpt
        .params
        .named()
        .iter()
        .map(|(n, t)| (n.clone(), t.len()))
        .collect();
    let analytic_named = analytic.named();
    for (gi, (name, len)) in names.iter().enumerate() {
        let a = analytic_named[gi].1.data();
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for i in 0..*len {
            let orig = probe.params.named()[gi].1.data()[i];
            set_param(&mut probe, gi, i, orig + h);
            let plus = forward_loss_frozen(&probe, batch, &frozen)?.loss;
            set_param(&mut probe, gi, i, orig - h);
            let minus = forward_loss_frozen(&probe, batch, &frozen)?.loss;
            set_param(&mut probe, gi, i, orig);
            let numeric = (plus - minus) / (2.0 * h);
            max_rel = max_rel.max(relative_error(a[i], numeric));
            max_abs = max_abs.max(a[i].abs());
        }
        groups.push(GroupError {
            name: name.clone(),
            checked: *len,
            max_rel_error: max_rel,
            max_abs_grad: max_abs,
        });
    }
    Ok(GradCheckReport { groups })
}

fn set_param(ckpt: &mut Checkpoint, group: usize, index: usize, value: f64) {
    let mut named = ckpt.params.named_mut();
    named[group].1.data_mut()[index] = value;
}
