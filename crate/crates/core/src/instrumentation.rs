//! Attention-entropy statistics over captured traces, retrieval-head
//! detection, and entropy-reduction grids between two checkpoints.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionTrace, DecodeMode, Phase, TraceRow, TRACE_MASS_TOLERANCE};
use crate::error::{LabError, Result};
use crate::model::{generate_with, Checkpoint, GenerateOptions};
use crate::tasks::TaskInstance;

pub const DEFAULT_RETRIEVAL_THRESHOLD: f64 = 0.5;
pub const TOKEN_COUNTS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadScope {
    All,
    Retrieval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Mean,
    Min,
    Max,
    Median,
}

impl Aggregation {
    pub const ALL: [Aggregation; 4] = [
        Aggregation::Mean,
        Aggregation::Min,
        Aggregation::Max,
        Aggregation::Median,
    ];

    /// Reduces a nonempty slice.
    pub fn reduce(self, values: &[f64]) -> f64 {
        debug_assert!(!values.is_empty());
        match self {
            Aggregation::Mean => values.iter().sum::<f64>() / values.len() as f64,
            Aggregation::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
            Aggregation::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Aggregation::Median => {
                let mut v = values.to_vec();
                v.sort_by(f64::total_cmp);
                let m = v.len() / 2;
                if v.len() % 2 == 1 {
                    v[m]
                } else {
                    0.5 * (v[m - 1] + v[m])
                }
            }
        }
    }
}

macro_rules! snake_display {
    ($ty:ty { $($var:ident => $s:literal),* $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(<$ty>::$var => $s),* })
            }
        }
        impl FromStr for $ty {
            type Err = LabError;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok(<$ty>::$var),)*
                    other => Err(LabError::data(format!(
                        concat!("unknown ", stringify!($ty), " '{}'"), other
                    ))),
                }
            }
        }
    };
}

snake_display!(HeadScope { All => "all", Retrieval => "retrieval" });
snake_display!(Aggregation { Mean => "mean", Min => "min", Max => "max", Median => "median" });

fn phase_name(p: Phase) -> &'static str {
    match p {
        Phase::Prefill => "prefill",
        Phase::Decode => "decode",
    }
}

fn parse_phase(s: &str) -> Result<Phase> {
    match s {
        "prefill" => Ok(Phase::Prefill),
        "decode" => Ok(Phase::Decode),
        other => Err(LabError::data(format!("unknown phase '{other}'"))),
    }
}

/// Which steps of a phase contribute to a `token_count` aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PositionPolicy {
    /// First generated tokens for decode, last prompt positions for prefill.
    #[default]
    Leading,
    /// A seeded uniform draw of distinct captured steps.
    Random { seed: u64 },
}

/// One point of the aggregation space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntropyCell {
    pub scope: HeadScope,
    pub aggregation: Aggregation,
    pub phase: Phase,
    pub token_count: usize,
}

impl EntropyCell {
    /// The 48 cells, in a fixed order.
    pub fn grid() -> Vec<EntropyCell> {
        let mut out = Vec::with_capacity(48);
        for scope in [HeadScope::All, HeadScope::Retrieval] {
            for aggregation in Aggregation::ALL {
                for phase in [Phase::Prefill, Phase::Decode] {
                    for token_count in TOKEN_COUNTS {
                        out.push(EntropyCell {
                            scope,
                            aggregation,
                            phase,
                            token_count,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntropyKey {
    pub task: String,
    pub cell: EntropyCell,
}

impl EntropyKey {
    fn csv_prefix(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.task,
            self.cell.scope,
            self.cell.aggregation,
            phase_name(self.cell.phase),
            self.cell.token_count
        )
    }

    fn parse(fields: &[&str]) -> Result<Self> {
        let token_count = fields[4]
            .parse()
            .map_err(|_| LabError::data(format!("bad token_count '{}'", fields[4])))?;
        Ok(Self {
            task: fields[0].to_string(),
            cell: EntropyCell {
                scope: fields[1].parse()?,
                aggregation: fields[2].parse()?,
                phase: parse_phase(fields[3])?,
                token_count,
            },
        })
    }
}

impl fmt::Display for EntropyKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.csv_prefix())
    }
}

pub const ENTROPY_CSV_HEADER: &str = "task,scope,aggregation,phase,token_count,value";

/// Shannon entropy (nats) of one trace row.
pub fn step_entropy(row: &TraceRow) -> Result<f64> {
    if row.weights.is_empty() || row.weights.len() != row.indices.len() {
        return Err(LabError::data(format!(
            "trace row (layer {}, head {}, step {}) has {} weights for {} indices",
            row.layer,
            row.head,
            row.step,
            row.weights.len(),
            row.indices.len()
        )));
    }
    let mut total = 0.0;
    for &w in &row.weights {
        if !w.is_finite() || w < 0.0 {
            return Err(LabError::data(format!(
                "trace row (layer {}, head {}, step {}) holds invalid weight {w}",
                row.layer, row.head, row.step
            )));
        }
        total += w;
    }
    if (total - 1.0).abs() > TRACE_MASS_TOLERANCE {
        return Err(LabError::data(format!(
            "trace row (layer {}, head {}, step {}) sums to {total}",
            row.layer, row.head, row.step
        )));
    }
    let h: f64 = row
        .weights
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| -w * w.ln())
        .sum();
    Ok(h.max(0.0))
}

/// Per-(layer, head) retrieval scores with a classification threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHeadSet {
    pub layers: usize,
    pub heads: usize,
    /// `scores[layer][head]` in `[0, 1]`.
    pub scores: Vec<Vec<f64>>,
    pub threshold: f64,
    /// Decode steps that contributed to each score.
    pub steps: usize,
}

impl RetrievalHeadSet {
    pub fn is_retrieval(&self, layer: usize, head: usize) -> bool {
        self.scores
            .get(layer)
            .and_then(|r| r.get(head))
            .is_some_and(|&s| s >= self.threshold)
    }

    pub fn members(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (l, row) in self.scores.iter().enumerate() {
            for (h, &s) in row.iter().enumerate() {
                if s >= self.threshold {
                    out.push((l, h));
                }
            }
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.members().is_empty()
    }
}

/// Scores heads from decode traces paired with their needle spans
/// (half-open `[start, end)` token positions).
pub fn retrieval_scores(
    traces: &[(&AttentionTrace, (usize, usize))],
    threshold: f64,
) -> Result<RetrievalHeadSet> {
    let Some((first, _)) = traces.first() else {
        return Err(LabError::config("retrieval-head detection needs probe tasks"));
    };
    if !(threshold.is_finite()) {
        return Err(LabError::config("retrieval threshold must be finite"));
    }
    let (layers, heads) = (first.layers, first.heads);
    let mut hits = vec![vec![0usize; heads]; layers];
    let mut steps = 0usize;
    for (trace, (start, end)) in traces {
        if trace.layers != layers || trace.heads != heads {
            return Err(LabError::data("probe traces disagree on model shape"));
        }
        for step in trace.steps(Phase::Decode) {
            steps += 1;
            for l in 0..layers {
                for h in 0..heads {
                    let row = trace.row(l, h, Phase::Decode, step).ok_or_else(|| {
                        LabError::data(format!("missing decode row layer {l} head {h} step {step}"))
                    })?;
                    let mut best = 0;
                    for (i, &w) in row.weights.iter().enumerate() {
                        if w > row.weights[best] {
                            best = i;
                        }
                    }
                    let pos = *row.indices.get(best).ok_or_else(|| {
                        LabError::data(format!("empty decode row layer {l} head {h} step {step}"))
                    })?;
                    if (*start..*end).contains(&pos) {
                        hits[l][h] += 1;
                    }
                }
            }
        }
    }
    if steps == 0 {
        return Err(LabError::data("probe traces contain no decode steps"));
    }
    let scores = hits
        .into_iter()
        .map(|r| r.into_iter().map(|c| c as f64 / steps as f64).collect())
        .collect();
    Ok(RetrievalHeadSet {
        layers,
        heads,
        scores,
        threshold,
        steps,
    })
}

/// Runs each probe under full attention for its answer length and scores
/// how often each head's argmax falls in the needle span.
pub fn detect_retrieval_heads(
    ckpt: &Checkpoint,
    probes: &[TaskInstance],
    threshold: f64,
) -> Result<RetrievalHeadSet> {
    if probes.is_empty() {
        return Err(LabError::config("retrieval-head detection needs probe tasks"));
    }
    let opts = GenerateOptions {
        capture_attention: true,
        ..Default::default()
    };
    let mut traces = Vec::with_capacity(probes.len());
    for p in probes {
        let span = p.needle_span.ok_or_else(|| {
            LabError::config(format!(
                "probe task {} (seed {}) has no needle span",
                p.task, p.seed
            ))
        })?;
        let out = generate_with(ckpt, &p.prompt, p.answer.len().max(1), DecodeMode::Full, p.seed, None, &opts)?;
        let trace = out.trace.expect("capture requested");
        traces.push((trace, span));
    }
    let refs: Vec<(&AttentionTrace, (usize, usize))> = traces.iter().map(|(t, s)| (t, *s)).collect();
    retrieval_scores(&refs, threshold)
}

fn chosen_steps(trace: &AttentionTrace, phase: Phase, count: usize, policy: PositionPolicy) -> Result<Vec<usize>> {
    if count == 0 {
        return Err(LabError::data("token_count must be positive"));
    }
    let available = trace.steps(phase);
    if available.len() < count {
        return Err(LabError::data(format!(
            "{} phase has {} captured steps, {count} requested (short by {})",
            phase_name(phase),
            available.len(),
            count - available.len()
        )));
    }
    Ok(match policy {
        PositionPolicy::Leading => match phase {
            Phase::Decode => available[..count].to_vec(),
            Phase::Prefill => available[available.len() - count..].to_vec(),
        },
        PositionPolicy::Random { seed } => {
            let mut v = available;
            v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            v.truncate(count);
            v.sort_unstable();
            v
        }
    })
}

/// Reduces in-scope head entropies per step, then averages over the chosen steps.
pub fn aggregate_entropy(
    trace: &AttentionTrace,
    cell: EntropyCell,
    retrieval: Option<&RetrievalHeadSet>,
    policy: PositionPolicy,
) -> Result<f64> {
    let heads: Vec<(usize, usize)> = match cell.scope {
        HeadScope::All => (0..trace.layers)
            .flat_map(|l| (0..trace.heads).map(move |h| (l, h)))
            .collect(),
        HeadScope::Retrieval => {
            let set = retrieval.ok_or_else(|| LabError::data("retrieval scope requested without a retrieval-head set"))?;
            set.members()
        }
    };
    if heads.is_empty() {
        return Err(LabError::data(format!("no heads in scope '{}'", cell.scope)));
    }
    let steps = chosen_steps(trace, cell.phase, cell.token_count, policy)?;
    let mut acc = 0.0;
    let mut values = Vec::with_capacity(heads.len());
    for &step in &steps {
        values.clear();
        for &(l, h) in &heads {
            let row = trace.row(l, h, cell.phase, step).ok_or_else(|| {
                LabError::data(format!(
                    "trace lacks layer {l} head {h} {} step {step}",
                    phase_name(cell.phase)
                ))
            })?;
            values.push(step_entropy(row)?);
        }
        acc += cell.aggregation.reduce(&values);
    }
    Ok(acc / steps.len() as f64)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EntropyReport {
    pub entries: BTreeMap<EntropyKey, f64>,
}

impl EntropyReport {
    /// Fills every grid cell for `task`, averaging over the traces.
    pub fn add_task(
        &mut self,
        task: &str,
        traces: &[AttentionTrace],
        retrieval: Option<&RetrievalHeadSet>,
        policy: PositionPolicy,
    ) -> Result<()> {
        if traces.is_empty() {
            return Err(LabError::data(format!("no traces for task '{task}'")));
        }
        for cell in EntropyCell::grid() {
            let mut sum = 0.0;
            for (i, t) in traces.iter().enumerate() {
                let p = match policy {
                    PositionPolicy::Random { seed } => PositionPolicy::Random {
                        seed: seed.wrapping_add(i as u64),
                    },
                    other => other,
                };
                sum += aggregate_entropy(t, cell, retrieval, p)?;
            }
            self.entries.insert(
                EntropyKey {
                    task: task.to_string(),
                    cell,
                },
                sum / traces.len() as f64,
            );
        }
        Ok(())
    }

    pub fn get(&self, task: &str, cell: EntropyCell) -> Option<f64> {
        self.entries
            .get(&EntropyKey {
                task: task.to_string(),
                cell,
            })
            .copied()
    }

    pub fn csv_rows(&self) -> Vec<String> {
        self.entries
            .iter()
            .map(|(k, v)| format!("{},{v}", k.csv_prefix()))
            .collect()
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty() && !l.starts_with('#')) {
            if line == ENTROPY_CSV_HEADER {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(LabError::data(format!("malformed entropy row '{line}'")));
            }
            let v: f64 = f[5]
                .parse()
                .map_err(|_| LabError::data(format!("bad entropy value '{}'", f[5])))?;
            entries.insert(EntropyKey::parse(&f)?, v);
        }
        Ok(Self { entries })
    }
}

/// Percentage reduction per key; `None` marks the undefined case
/// (zero base entropy with a positive variant).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReductionGrid {
    pub cells: BTreeMap<EntropyKey, Option<f64>>,
}

pub const UNDEFINED: &str = "undefined";

impl ReductionGrid {
    pub fn defined(&self) -> impl Iterator<Item = f64> + '_ {
        self.cells.values().filter_map(|v| *v)
    }

    /// Share of defined cells strictly above zero; `None` if nothing is defined.
    pub fn fraction_positive(&self) -> Option<f64> {
        let (mut pos, mut n) = (0usize, 0usize);
        for v in self.defined() {
            n += 1;
            if v > 0.0 {
                pos += 1;
            }
        }
        (n > 0).then(|| pos as f64 / n as f64)
    }

    pub fn fraction_positive_for(&self, task: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .cells
            .iter()
            .filter(|(k, _)| k.task == task)
            .filter_map(|(_, v)| *v)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().filter(|&&v| v > 0.0).count() as f64 / vals.len() as f64)
    }

    pub fn csv_rows(&self) -> Vec<String> {
        self.cells
            .iter()
            .map(|(k, v)| match v {
                Some(x) => format!("{},{x}", k.csv_prefix()),
                None => format!("{},{UNDEFINED}", k.csv_prefix()),
            })
            .collect()
    }
}

pub fn entropy_reduction(base: &EntropyReport, variant: &EntropyReport) -> Result<ReductionGrid> {
    let missing_in_variant: Vec<String> = base
        .entries
        .keys()
        .filter(|k| !variant.entries.contains_key(*k))
        .map(|k| k.to_string())
        .collect();
    let missing_in_base: Vec<String> = variant
        .entries
        .keys()
        .filter(|k| !base.entries.contains_key(*k))
        .map(|k| k.to_string())
        .collect();
    if !missing_in_variant.is_empty() || !missing_in_base.is_empty() {
        return Err(LabError::data(format!(
            "entropy reports disagree on keys; missing from variant: [{}]; missing from base: [{}]",
            missing_in_variant.join("; "),
            missing_in_base.join("; ")
        )));
    }
    let cells = base
        .entries
        .iter()
        .map(|(k, &hb)| {
            let hv = variant.entries[k];
            let r = if hb == 0.0 {
                (hv == 0.0).then_some(0.0)
            } else {
                Some(100.0 * (hb - hv) / hb)
            };
            (k.clone(), r)
        })
        .collect();
    Ok(ReductionGrid { cells })
}
