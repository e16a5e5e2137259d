//! Experiment runners behind the command-line front end.
//!
//! Every runner is a pure function of its [`ExperimentConfig`] and seed; the
//! only non-deterministic byte in any artifact is the `# generated` line at
//! the top of each CSV.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionTrace, DecodeMode, WindowPolicy};
use crate::error::{LabError, Result};
use crate::instrumentation::{
    detect_retrieval_heads, entropy_reduction, EntropyReport, PositionPolicy, ReductionGrid,
    RetrievalHeadSet, DEFAULT_RETRIEVAL_THRESHOLD, ENTROPY_CSV_HEADER, TOKEN_COUNTS,
};
use crate::model::{generate_with, Checkpoint, CheckpointProvenance, GenerateOptions, ModelConfig, PrefillCapture};
use crate::numerics::round_half_up;
use crate::selection::{indexer_layer_precision, retrieval_precision, IndexerConfig, IndexerProjection, PrecisionReport, SelectionTrace};
use crate::tasks::{read_instances, score, write_instances, TaskInstance, TaskSpec};
use crate::training::{train, LossCurve, TrainConfig, TrainExample, TrainMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    SweepRatio,
    SweepPrecision,
    IndexerStats,
    EntropyCompare,
    GenTasks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Architecture for fresh initialization; ignored with `init_from`.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    /// Checkpoint to start from; `{seed}` expands to the run seed.
    #[serde(default)]
    pub init_from: Option<String>,
    #[serde(default)]
    pub data: Vec<TaskSpec>,
    /// JSONL task instances, used alongside `data`.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    pub modes: Vec<TrainMode>,
    /// Training seeds. Empty means the experiment seed.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_true")]
    pub answer_only: bool,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Prefix for checkpoint names; defaults to the experiment name.
    #[serde(default)]
    pub name: Option<String>,
}

fn default_lr() -> f64 {
    TrainConfig::default().lr
}
fn default_batch() -> usize {
    TrainConfig::default().batch_size
}
fn default_steps() -> usize {
    TrainConfig::default().steps
}
fn default_true() -> bool {
    true
}
fn default_samples() -> usize {
    10
}
fn default_threshold() -> f64 {
    DEFAULT_RETRIEVAL_THRESHOLD
}
fn default_entropy_steps() -> usize {
    TOKEN_COUNTS[TOKEN_COUNTS.len() - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexerSection {
    pub config: IndexerConfig,
    pub window: WindowPolicy,
    /// Instances per task.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Decode steps per sample; defaults to the answer length.
    #[serde(default)]
    pub decode_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntropySection {
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Retrieval-head probes; defaults to the evaluation tasks that carry needle spans.
    #[serde(default)]
    pub probes: Vec<TaskSpec>,
    #[serde(default)]
    pub position_policy: PositionPolicy,
    /// Decode steps generated per instance when tracing.
    #[serde(default = "default_entropy_steps")]
    pub decode_steps: usize,
    /// Attention mode for the traced decode steps.
    #[serde(default = "full_mode")]
    pub mode: DecodeMode,
}

fn full_mode() -> DecodeMode {
    DecodeMode::Full
}

impl Default for EntropySection {
    fn default() -> Self {
        Self {
            threshold: default_threshold(),
            probes: Vec::new(),
            position_policy: PositionPolicy::default(),
            decode_steps: default_entropy_steps(),
            mode: DecodeMode::Full,
        }
    }
}

/// One experiment, as read from a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    #[serde(default)]
    pub seed: u64,
    /// Output directory; `{seed}` expands.
    #[serde(default)]
    pub out_dir: Option<String>,
    /// Checkpoint for sweeps and indexer statistics; `{seed}` expands.
    #[serde(default)]
    pub checkpoint: Option<String>,
    #[serde(default)]
    pub base_checkpoint: Option<String>,
    #[serde(default)]
    pub variant_checkpoint: Option<String>,
    #[serde(default)]
    pub tasks: Vec<TaskSpec>,
    #[serde(default)]
    pub train: Option<TrainSection>,
    #[serde(default)]
    pub ratios: Vec<f64>,
    #[serde(default)]
    pub precisions: Vec<f64>,
    /// Fixed window `W` for the precision sweep.
    #[serde(default)]
    pub window: Option<usize>,
    #[serde(default)]
    pub indexer: Option<IndexerSection>,
    #[serde(default)]
    pub entropy: EntropySection,
    #[serde(default)]
    pub capture: bool,
    /// Vocabulary for `gen-tasks` when no checkpoint is given.
    #[serde(default)]
    pub vocab: Option<usize>,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| {
            LabError::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// `out_dir` with the seed expanded, else `results/<experiment>`.
    pub fn output_dir(&self) -> PathBuf {
        match &self.out_dir {
            Some(t) => expand(t, self.seed),
            None => PathBuf::from("results").join(&self.experiment),
        }
    }
}

fn expand(template: &str, seed: u64) -> PathBuf {
    PathBuf::from(template.replace("{seed}", &seed.to_string()))
}

fn load_checkpoint(field: &str, template: Option<&String>, seed: u64) -> Result<Checkpoint> {
    let t = template.ok_or_else(|| LabError::config(format!("config needs '{field}'")))?;
    let path = expand(t, seed);
    let (manifest, _) = crate::model::checkpoint_paths(&path);
    if !manifest.exists() && !path.exists() {
        return Err(LabError::config(format!(
            "{field} {} does not exist",
            path.display()
        )));
    }
    let ckpt = Checkpoint::load(&path)?;
    if ckpt.provenance == CheckpointProvenance::Random {
        eprintln!("warning: {} is an untrained (random) checkpoint", path.display());
    }
    Ok(ckpt)
}

fn require_tasks(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.tasks.is_empty() {
        return Err(LabError::config("config needs at least one task"));
    }
    for t in &cfg.tasks {
        if t.count == 0 {
            return Err(LabError::config(format!("task {} has count 0", t.task)));
        }
    }
    Ok(())
}

fn mix_seed(a: u64, b: u64) -> u64 {
    crate::attention::precision_seed(a, 0, 0, b as usize)
}

/// Greedy-decodes each instance for its answer length and returns the scores.
pub fn evaluate(ckpt: &Checkpoint, instances: &[TaskInstance], mode: DecodeMode, seed: u64) -> Result<Vec<u8>> {
    instances
        .par_iter()
        .map(|inst| {
            let out = generate_with(
                ckpt,
                &inst.prompt,
                inst.answer.len(),
                mode,
                mix_seed(seed, inst.seed),
                None,
                &GenerateOptions::default(),
            )?;
            score(inst, &out.tokens)
        })
        .collect()
}

fn accuracy(scores: &[u8]) -> f64 {
    scores.iter().map(|&s| s as f64).sum::<f64>() / scores.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub task: String,
    pub ratio: f64,
    pub accuracy: f64,
    pub n: usize,
}

pub fn sweep_ratio(ckpt: &Checkpoint, tasks: &[TaskSpec], ratios: &[f64], seed: u64) -> Result<Vec<RatioRow>> {
    if ratios.is_empty() {
        return Err(LabError::config("ratio grid is empty"));
    }
    if !ratios.contains(&1.0) {
        return Err(LabError::config("ratio grid must include 1.0"));
    }
    for &r in ratios {
        WindowPolicy::Ratio(r).validate()?;
    }
    let mut rows = Vec::new();
    for spec in tasks {
        if spec.count < 100 {
            eprintln!("warning: task {} evaluated on only {} instances", spec.task, spec.count);
        }
        let instances = spec.generate(ckpt.config.vocab)?;
        for &ratio in ratios {
            let scores = evaluate(ckpt, &instances, DecodeMode::topk_ratio(ratio), seed)?;
            rows.push(RatioRow {
                task: spec.task.to_string(),
                ratio,
                accuracy: accuracy(&scores),
                n: scores.len(),
            });
        }
    }
    rows.sort_by(|a, b| a.task.cmp(&b.task).then(a.ratio.total_cmp(&b.ratio)));
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionSweepRow {
    pub task: String,
    pub window: usize,
    pub precision: f64,
    pub accuracy: f64,
    pub n: usize,
    /// `full` when the window covers the whole context of every decode step.
    pub flag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionSweepSummary {
    pub task: String,
    /// Spearman rank correlation of precision vs accuracy; `None` if undefined.
    pub spearman: Option<f64>,
    /// Decode (step, layer, head) windows that differ from `min(W, N)`.
    pub window_violations: usize,
    /// Head-steps whose measured precision differs from `round(p·W)/W`.
    pub precision_mismatches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionSweep {
    pub rows: Vec<PrecisionSweepRow>,
    pub summaries: Vec<PrecisionSweepSummary>,
}

/// Average ranks, ties sharing the mean of their positions.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman correlation with tie-averaged ranks; `None` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

pub fn sweep_precision(
    ckpt: &Checkpoint,
    tasks: &[TaskSpec],
    window: usize,
    precisions: &[f64],
    seed: u64,
) -> Result<PrecisionSweep> {
    if precisions.is_empty() {
        return Err(LabError::config("precision grid is empty"));
    }
    if !precisions.contains(&0.0) || !precisions.contains(&1.0) {
        return Err(LabError::config("precision grid must include 0 and 1"));
    }
    let policy = WindowPolicy::Fixed(window);
    policy.validate()?;
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for spec in tasks {
        let instances = spec.generate(ckpt.config.vocab)?;
        let flag = if instances.iter().all(|i| window >= i.prompt.len() + i.answer.len() - 1) {
            "full"
        } else {
            "ok"
        };
        let mut violations = 0usize;
        let mut precision_mismatches = 0usize;
        let mut accs = Vec::new();
        for &p in precisions {
            let mode = DecodeMode::Precision {
                window: policy,
                precision: p,
            };
            mode.validate()?;
            let audit_opts = GenerateOptions {
                capture_selection: true,
                ..Default::default()
            };
            let results: Vec<(u8, usize, usize)> = instances
                .par_iter()
                .map(|inst| {
                    let out = generate_with(
                        ckpt,
                        &inst.prompt,
                        inst.answer.len(),
                        mode,
                        mix_seed(seed, inst.seed),
                        None,
                        &audit_opts,
                    )?;
                    let mut bad = 0;
                    for (s, layers) in out.windows.iter().enumerate() {
                        let n = inst.prompt.len() + s;
                        let want = policy.window(n);
                        bad += layers.iter().flatten().filter(|&&w| w != want).count();
                    }
                    let mut off = 0;
                    for a in &out.audits {
                        for (e, c) in a.exact.iter().zip(&a.chosen) {
                            if e.is_full() {
                                continue;
                            }
                            let w = e.window();
                            let want = round_half_up(p * w as f64) as f64 / w as f64;
                            if retrieval_precision(c, e)? != want {
                                off += 1;
                            }
                        }
                    }
                    Ok((score(inst, &out.tokens)?, bad, off))
                })
                .collect::<Result<_>>()?;
            violations += results.iter().map(|r| r.1).sum::<usize>();
            precision_mismatches += results.iter().map(|r| r.2).sum::<usize>();
            let scores: Vec<u8> = results.iter().map(|r| r.0).collect();
            let acc = accuracy(&scores);
            accs.push(acc);
            rows.push(PrecisionSweepRow {
                task: spec.task.to_string(),
                window,
                precision: p,
                accuracy: acc,
                n: scores.len(),
                flag: flag.to_string(),
            });
        }
        summaries.push(PrecisionSweepSummary {
            task: spec.task.to_string(),
            spearman: spearman(precisions, &accs),
            window_violations: violations,
            precision_mismatches,
        });
    }
    rows.sort_by(|a, b| a.task.cmp(&b.task).then(a.precision.total_cmp(&b.precision)));
    summaries.sort_by(|a, b| a.task.cmp(&b.task));
    Ok(PrecisionSweep { rows, summaries })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPrecision {
    pub task: String,
    pub report: PrecisionReport,
}

/// Runs the indexer on the first `samples` instances of each task and
/// measures its overlap with the exact selections. A random projection is
/// re-drawn for every sample (seed + sample index).
pub fn indexer_stats(ckpt: &Checkpoint, tasks: &[TaskSpec], section: &IndexerSection, seed: u64) -> Result<Vec<TaskPrecision>> {
    if section.samples == 0 {
        return Err(LabError::config("indexer samples must be >= 1"));
    }
    section.window.validate()?;
    let c = &ckpt.config;
    section.config.validate(c.heads, c.head_dim())?;
    let mut out = Vec::new();
    for spec in tasks {
        let mut spec = spec.clone();
        spec.count = section.samples;
        let instances = spec.generate(c.vocab)?;
        let traces: Vec<SelectionTrace> = instances
            .par_iter()
            .enumerate()
            .map(|(i, inst)| {
                let mut icfg = section.config;
                if let IndexerProjection::Random { seed: s } = icfg.projection {
                    icfg.projection = IndexerProjection::Random {
                        seed: s.wrapping_add(i as u64),
                    };
                }
                let mode = DecodeMode::Indexer {
                    window: section.window,
                    config: icfg,
                };
                let opts = GenerateOptions {
                    capture_selection: true,
                    sample: i,
                    ..Default::default()
                };
                let steps = section.decode_steps.unwrap_or(inst.answer.len()).max(1);
                let g = generate_with(ckpt, &inst.prompt, steps, mode, mix_seed(seed, inst.seed), None, &opts)?;
                Ok(g.selections.expect("selection capture requested"))
            })
            .collect::<Result<_>>()?;
        let mut all = SelectionTrace::default();
        for t in traces {
            all.extend(t);
        }
        out.push(TaskPrecision {
            task: spec.task.to_string(),
            report: indexer_layer_precision(&all)?,
        });
    }
    out.sort_by(|a, b| a.task.cmp(&b.task));
    Ok(out)
}

/// Attention traces (last prefill positions and the first decode steps) for
/// every instance of a task.
pub fn entropy_traces(ckpt: &Checkpoint, spec: &TaskSpec, section: &EntropySection, seed: u64) -> Result<Vec<AttentionTrace>> {
    let instances = spec.generate(ckpt.config.vocab)?;
    let opts = GenerateOptions {
        capture_attention: true,
        prefill_capture: PrefillCapture::Last {
            n: default_entropy_steps(),
        },
        ..Default::default()
    };
    instances
        .par_iter()
        .map(|inst| {
            let g = generate_with(
                ckpt,
                &inst.prompt,
                section.decode_steps,
                section.mode,
                mix_seed(seed, inst.seed),
                None,
                &opts,
            )?;
            Ok(g.trace.expect("attention capture requested"))
        })
        .collect()
}

fn probe_instances(tasks: &[TaskSpec], section: &EntropySection, vocab: usize) -> Result<Vec<TaskInstance>> {
    let specs: Vec<&TaskSpec> = if section.probes.is_empty() {
        tasks
            .iter()
            .filter(|t| t.task != crate::tasks::TaskKind::Copy)
            .collect()
    } else {
        section.probes.iter().collect()
    };
    let mut out = Vec::new();
    for s in specs {
        out.extend(s.generate(vocab)?);
    }
    Ok(out)
}

pub fn entropy_report(
    ckpt: &Checkpoint,
    tasks: &[TaskSpec],
    section: &EntropySection,
    seed: u64,
) -> Result<(EntropyReport, RetrievalHeadSet)> {
    let mut names: Vec<String> = tasks.iter().map(|t| t.task.to_string()).collect();
    names.sort();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(LabError::config("entropy-compare needs at most one spec per task kind"));
    }
    let probes = probe_instances(tasks, section, ckpt.config.vocab)?;
    let heads = detect_retrieval_heads(ckpt, &probes, section.threshold)?;
    let mut report = EntropyReport::default();
    for spec in tasks {
        let traces = entropy_traces(ckpt, spec, section, seed)?;
        report.add_task(&spec.task.to_string(), &traces, Some(&heads), section.position_policy)?;
    }
    Ok((report, heads))
}

pub struct EntropyComparison {
    pub base: EntropyReport,
    pub variant: EntropyReport,
    pub base_heads: RetrievalHeadSet,
    pub variant_heads: RetrievalHeadSet,
    pub reduction: ReductionGrid,
}

/// Retrieval heads are detected separately for each checkpoint.
pub fn entropy_compare(
    base: &Checkpoint,
    variant: &Checkpoint,
    tasks: &[TaskSpec],
    section: &EntropySection,
    seed: u64,
) -> Result<EntropyComparison> {
    let (b, bh) = entropy_report(base, tasks, section, seed)?;
    let (v, vh) = entropy_report(variant, tasks, section, seed)?;
    let reduction = entropy_reduction(&b, &v)?;
    Ok(EntropyComparison {
        base: b,
        variant: v,
        base_heads: bh,
        variant_heads: vh,
        reduction,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedCheckpoint {
    pub mode: TrainMode,
    pub seed: u64,
    pub path: PathBuf,
    pub final_loss: f64,
}

fn mode_tag(m: &TrainMode) -> &'static str {
    match m {
        TrainMode::Full => "full",
        TrainMode::Topk { .. } => "topk",
    }
}

pub fn training_examples(section: &TrainSection, vocab: usize) -> Result<Vec<TrainExample>> {
    let mut instances = Vec::new();
    for spec in &section.data {
        instances.extend(spec.generate(vocab)?);
    }
    if let Some(path) = &section.dataset {
        let file = fs::File::open(path).map_err(|e| {
            LabError::config(format!("dataset {} cannot be opened: {e}", path.display()))
        })?;
        instances.extend(read_instances(std::io::BufReader::new(file))?);
    }
    if instances.is_empty() {
        return Err(LabError::config("training needs 'data' task specs or a 'dataset' file"));
    }
    if let Some(bad) = instances.iter().flat_map(|i| i.prompt.iter().chain(&i.answer)).find(|&&t| t as usize >= vocab) {
        return Err(LabError::config(format!("dataset token {bad} outside vocabulary {vocab}")));
    }
    Ok(instances
        .iter()
        .map(|i| TrainExample::from_instance(i, section.answer_only))
        .collect())
}

/// Trains every (mode, seed) pair; returns the checkpoints and loss curves.
pub fn run_train(cfg: &ExperimentConfig, out: &Path) -> Result<(Vec<TrainedCheckpoint>, Vec<LossCurve>)> {
    let section = cfg
        .train
        .as_ref()
        .ok_or_else(|| LabError::config("config needs a 'train' section"))?;
    if section.modes.is_empty() {
        return Err(LabError::config("train.modes is empty"));
    }
    let seeds = if section.seeds.is_empty() {
        vec![cfg.seed]
    } else {
        section.seeds.clone()
    };
    let name = section.name.clone().unwrap_or_else(|| cfg.experiment.clone());
    let mut trained = Vec::new();
    let mut curves = Vec::new();
    for &seed in &seeds {
        let start = match (&section.init_from, &section.model) {
            (Some(t), _) => load_checkpoint("train.init_from", Some(t), seed)?,
            (None, Some(m)) => Checkpoint::init(*m, seed)?,
            (None, None) => return Err(LabError::config("train needs 'model' or 'init_from'")),
        };
        let data = training_examples(section, start.config.vocab)?;
        for mode in &section.modes {
            let tc = TrainConfig {
                mode: *mode,
                lr: section.lr,
                batch_size: section.batch_size,
                steps: section.steps,
                seed,
                answer_only: section.answer_only,
                grad_clip: section.grad_clip,
                ..Default::default()
            };
            let (model, curve) = train(&start, &data, &tc)?;
            let path = out.join(format!("{name}_{}_seed{seed}", mode_tag(mode)));
            model.save(&path)?;
            trained.push(TrainedCheckpoint {
                mode: *mode,
                seed,
                path,
                final_loss: curve.losses.last().copied().unwrap_or(f64::NAN),
            });
            curves.push(curve);
        }
    }
    Ok((trained, curves))
}

/// Writes `# generated …`, the header, then the rows.
pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut text = format!("# generated unix_time={stamp}\n{header}\n");
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| LabError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| LabError::io(path, e))
}

/// CSV body without the timestamp line, for determinism checks.
pub fn csv_body(text: &str) -> &str {
    match text.split_once('\n') {
        Some((first, rest)) if first.starts_with("# generated") => rest,
        _ => text,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| crate::instrumentation::UNDEFINED.to_string(), |x| x.to_string())
}

fn write_trace(dir: &Path, name: &str, trace: &AttentionTrace) -> Result<PathBuf> {
    let tdir = dir.join("traces");
    fs::create_dir_all(&tdir).map_err(|e| LabError::io(&tdir, e))?;
    let path = tdir.join(format!("{name}.tkattn"));
    let mut f = fs::File::create(&path).map_err(|e| LabError::io(&path, e))?;
    trace.write_to(&mut f).map_err(|e| LabError::io(&path, e))?;
    f.flush().map_err(|e| LabError::io(&path, e))?;
    Ok(path)
}

/// With `capture`, the first instance of each (task, grid point) is re-run
/// with attention tracing and written under `traces/`.
fn capture_first(ckpt: &Checkpoint, spec: &TaskSpec, mode: DecodeMode, seed: u64, dir: &Path, name: &str) -> Result<PathBuf> {
    let inst = spec.generate_one(ckpt.config.vocab, spec.seed)?;
    let opts = GenerateOptions {
        capture_attention: true,
        prefill_capture: PrefillCapture::All,
        ..Default::default()
    };
    let g = generate_with(ckpt, &inst.prompt, inst.answer.len(), mode, mix_seed(seed, inst.seed), None, &opts)?;
    write_trace(dir, name, g.trace.as_ref().expect("capture requested"))
}

/// Runs one command and returns the files it wrote.
pub fn run_command(cmd: Command, cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| LabError::io(out, e))?;
    let seed = cfg.seed;
    let mut written = Vec::new();
    match cmd {
        Command::Train => {
            let (trained, curves) = run_train(cfg, out)?;
            let mut rows: Vec<(String, u64, usize, String)> = Vec::new();
            for c in &curves {
                for (i, r) in c.csv_rows().into_iter().enumerate() {
                    rows.push((mode_tag(&c.mode).to_string(), c.seed, i, r));
                }
            }
            rows.sort_by(|a, b| (&a.0, a.1, a.2).cmp(&(&b.0, b.1, b.2)));
            let p = out.join("train_loss.csv");
            write_csv(&p, LossCurve::CSV_HEADER, &rows.into_iter().map(|r| r.3).collect::<Vec<_>>())?;
            written.push(p);
            let j = out.join("train_checkpoints.json");
            write_json(&j, &trained)?;
            written.push(j);
            written.extend(trained.iter().map(|t| t.path.clone()));
        }
        Command::SweepRatio => {
            require_tasks(cfg)?;
            let ckpt = load_checkpoint("checkpoint", cfg.checkpoint.as_ref(), seed)?;
            let rows = sweep_ratio(&ckpt, &cfg.tasks, &cfg.ratios, seed)?;
            let p = out.join("sweep_ratio.csv");
            let body: Vec<String> = rows
                .iter()
                .map(|r| format!("{},{},{},{}", r.task, r.ratio, r.accuracy, r.n))
                .collect();
            write_csv(&p, "task,ratio,accuracy,n", &body)?;
            let j = out.join("sweep_ratio.json");
            write_json(&j, &rows)?;
            written.extend([p, j]);
            if cfg.capture {
                for spec in &cfg.tasks {
                    for &r in &cfg.ratios {
                        let name = format!("ratio_{}_{r}", spec.task);
                        written.push(capture_first(&ckpt, spec, DecodeMode::topk_ratio(r), seed, out, &name)?);
                    }
                }
            }
        }
        Command::SweepPrecision => {
            require_tasks(cfg)?;
            let ckpt = load_checkpoint("checkpoint", cfg.checkpoint.as_ref(), seed)?;
            let window = cfg
                .window
                .ok_or_else(|| LabError::config("sweep-precision needs a fixed 'window'"))?;
            let sweep = sweep_precision(&ckpt, &cfg.tasks, window, &cfg.precisions, seed)?;
            let p = out.join("sweep_precision.csv");
            let body: Vec<String> = sweep
                .rows
                .iter()
                .map(|r| format!("{},{},{},{},{},{}", r.task, r.window, r.precision, r.accuracy, r.n, r.flag))
                .collect();
            write_csv(&p, "task,W,p,accuracy,n,flag", &body)?;
            let s = out.join("sweep_precision_summary.csv");
            let sbody: Vec<String> = sweep
                .summaries
                .iter()
                .map(|r| format!("{},{},{},{}", r.task, opt(r.spearman), r.window_violations, r.precision_mismatches))
                .collect();
            write_csv(&s, "task,spearman,window_violations,precision_mismatches", &sbody)?;
            let j = out.join("sweep_precision.json");
            write_json(&j, &sweep)?;
            written.extend([p, s, j]);
            if cfg.capture {
                for spec in &cfg.tasks {
                    for &pr in &cfg.precisions {
                        let mode = DecodeMode::Precision {
                            window: WindowPolicy::Fixed(window),
                            precision: pr,
                        };
                        let name = format!("precision_{}_{pr}", spec.task);
                        written.push(capture_first(&ckpt, spec, mode, seed, out, &name)?);
                    }
                }
            }
        }
        Command::IndexerStats => {
            require_tasks(cfg)?;
            let ckpt = load_checkpoint("checkpoint", cfg.checkpoint.as_ref(), seed)?;
            let section = cfg
                .indexer
                .as_ref()
                .ok_or_else(|| LabError::config("indexer-stats needs an 'indexer' section"))?;
            let stats = indexer_stats(&ckpt, &cfg.tasks, section, seed)?;
            let mut body = Vec::new();
            for t in &stats {
                for r in &t.report.rows {
                    body.push(format!(
                        "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
                        t.task, r.layer, r.method, r.samples, r.steps, r.precision_mean, r.precision_std, r.sample_sem, r.chance
                    ));
                }
            }
            let p = out.join("indexer_stats.csv");
            write_csv(
                &p,
                &format!("task,{},sample_sem,chance", PrecisionReport::CSV_HEADER),
                &body,
            )?;
            let j = out.join("indexer_stats.json");
            write_json(&j, &stats)?;
            written.extend([p, j]);
        }
        Command::EntropyCompare => {
            require_tasks(cfg)?;
            let base = load_checkpoint("base_checkpoint", cfg.base_checkpoint.as_ref(), seed)?;
            let variant = load_checkpoint("variant_checkpoint", cfg.variant_checkpoint.as_ref(), seed)?;
            let cmp = entropy_compare(&base, &variant, &cfg.tasks, &cfg.entropy, seed)?;
            let files = [
                ("entropy_base.csv", cmp.base.csv_rows()),
                ("entropy_variant.csv", cmp.variant.csv_rows()),
                ("entropy_reduction.csv", cmp.reduction.csv_rows()),
            ];
            for (name, rows) in files {
                let p = out.join(name);
                write_csv(&p, ENTROPY_CSV_HEADER, &rows)?;
                written.push(p);
            }
            let mut tasks: Vec<String> = cfg.tasks.iter().map(|t| t.task.to_string()).collect();
            tasks.sort();
            let mut summary: Vec<String> = tasks
                .iter()
                .map(|t| summary_row(&cmp.reduction, Some(t)))
                .collect();
            summary.push(summary_row(&cmp.reduction, None));
            let p = out.join("entropy_summary.csv");
            write_csv(&p, "task,cells,defined,positive,fraction_positive", &summary)?;
            written.push(p);
            let j = out.join("retrieval_heads.json");
            write_json(
                &j,
                &serde_json::json!({ "base": cmp.base_heads, "variant": cmp.variant_heads }),
            )?;
            written.push(j);
            let j = out.join("entropy_reduction.json");
            let cells: Vec<serde_json::Value> = cmp
                .reduction
                .cells
                .iter()
                .map(|(k, v)| {
                    serde_json::json!({
                        "task": k.task,
                        "scope": k.cell.scope,
                        "aggregation": k.cell.aggregation,
                        "phase": k.cell.phase,
                        "token_count": k.cell.token_count,
                        "value": v,
                        "base": cmp.base.entries[k],
                        "variant": cmp.variant.entries[k],
                    })
                })
                .collect();
            write_json(&j, &cells)?;
            written.push(j);
            if cfg.capture {
                for spec in &cfg.tasks {
                    for (tag, ck) in [("base", &base), ("variant", &variant)] {
                        let name = format!("entropy_{tag}_{}", spec.task);
                        written.push(capture_first(ck, spec, cfg.entropy.mode, seed, out, &name)?);
                    }
                }
            }
        }
        Command::GenTasks => {
            require_tasks(cfg)?;
            let vocab = match (&cfg.checkpoint, cfg.vocab) {
                (_, Some(v)) => v,
                (Some(_), None) => load_checkpoint("checkpoint", cfg.checkpoint.as_ref(), seed)?.config.vocab,
                (None, None) => return Err(LabError::config("gen-tasks needs 'vocab' or 'checkpoint'")),
            };
            for spec in &cfg.tasks {
                let inst = spec.generate(vocab)?;
                let p = out.join(format!("{}_n{}_seed{}.jsonl", spec.task, spec.context_len, spec.seed));
                let mut f = fs::File::create(&p).map_err(|e| LabError::io(&p, e))?;
                write_instances(&mut f, &inst).map_err(|e| LabError::io(&p, e))?;
                written.push(p);
            }
        }
    }
    Ok(written)
}

fn summary_row(grid: &ReductionGrid, task: Option<&str>) -> String {
    let cells: Vec<Option<f64>> = grid
        .cells
        .iter()
        .filter(|(k, _)| task.is_none_or(|t| k.task == t))
        .map(|(_, v)| *v)
        .collect();
    let defined = cells.iter().flatten().count();
    let positive = cells.iter().flatten().filter(|&&v| v > 0.0).count();
    let frac = (defined > 0).then(|| positive as f64 / defined as f64);
    format!(
        "{},{},{defined},{positive},{}",
        task.unwrap_or("all"),
        cells.len(),
        opt(frac)
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_with_ties() {
        let p = [0.0, 0.25, 0.5, 0.75, 1.0];
        assert!((spearman(&p, &[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap() - 1.0).abs() < 1e-12);
        // saturation ties: ranks 1, 3.5, 3.5, 3.5, 3.5
        let s = spearman(&p, &[0.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!((s - 0.7071067811865476).abs() < 1e-12, "{s}");
        assert_eq!(spearman(&p, &[1.0; 5]), None);
        let s = spearman(&p, &[1.0, 2.0, 4.0, 4.0, 4.0]).unwrap();
        assert!((s - 0.8944271909999159).abs() < 1e-12, "{s}");
    }

    #[test]
    fn csv_body_strips_timestamp() {
        assert_eq!(csv_body("# generated unix_time=5\na,b\n1,2\n"), "a,b\n1,2\n");
        assert_eq!(csv_body("a,b\n"), "a,b\n");
    }

    #[test]
    fn config_rejects_unknown_fields() {
        let err = ExperimentConfig::from_json(r#"{"experiment":"x","ratio":[1.0]}"#).unwrap_err();
        assert!(err.is_config());
        let ok = ExperimentConfig::from_json(r#"{"experiment":"x","ratios":[1.0]}"#).unwrap();
        assert_eq!(ok.entropy.threshold, 0.5);
        assert_eq!(ok.entropy.decode_steps, 10);
    }

    #[test]
    fn grids_are_validated() {
        let ck = Checkpoint::init(
            ModelConfig {
                vocab: 32,
                layers: 1,
                heads: 2,
                d_model: 8,
                d_ff: 16,
                max_positions: 64,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let tasks = [TaskSpec {
            task: crate::tasks::TaskKind::Needle,
            count: 3,
            context_len: 16,
            seed: 0,
            pairs: 4,
        }];
        assert!(sweep_ratio(&ck, &tasks, &[0.5], 0).unwrap_err().is_config());
        assert!(sweep_ratio(&ck, &tasks, &[], 0).unwrap_err().is_config());
        assert!(sweep_precision(&ck, &tasks, 4, &[0.5, 1.0], 0).unwrap_err().is_config());
        let rows = sweep_ratio(&ck, &tasks, &[0.05, 0.1, 0.25, 0.5, 1.0], 0).unwrap();
        assert_eq!(rows.len(), 5);
        let full = evaluate(&ck, &tasks[0].generate(32).unwrap(), DecodeMode::Full, 0).unwrap();
        assert_eq!(rows[4].accuracy, accuracy(&full));
    }
}
