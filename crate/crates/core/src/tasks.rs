//! Seeded synthetic long-context tasks with exact-match scoring.
//!
//! Token space: `0` is the copy separator; the remaining ids are split into
//! key, value and filler ranges so a needle never collides with filler.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::Token;

pub const SEPARATOR: Token = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Needle,
    AssocRecall,
    Copy,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Needle => "needle",
            TaskKind::AssocRecall => "assoc_recall",
            TaskKind::Copy => "copy",
        })
    }
}

impl FromStr for TaskKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "needle" => Ok(TaskKind::Needle),
            "assoc_recall" | "recall" => Ok(TaskKind::AssocRecall),
            "copy" => Ok(TaskKind::Copy),
            other => Err(LabError::config(format!("unknown task {other:?}"))),
        }
    }
}

/// Partition of the vocabulary into key, value and filler ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabLayout {
    pub vocab: usize,
    pub keys: (Token, Token),
    pub values: (Token, Token),
    pub filler: (Token, Token),
}

impl VocabLayout {
    pub const MIN_VOCAB: usize = 8;

    pub fn new(vocab: usize) -> Result<Self> {
        if vocab < Self::MIN_VOCAB {
            return Err(LabError::config(format!(
                "vocab {vocab} too small to separate keys, values and filler (need >= {})",
                Self::MIN_VOCAB
            )));
        }
        let rest = (vocab - 1) as Token;
        let quarter = rest / 4;
        let keys = (1, 1 + quarter);
        let values = (keys.1, keys.1 + quarter);
        let filler = (values.1, vocab as Token);
        Ok(Self {
            vocab,
            keys,
            values,
            filler,
        })
    }

    pub fn key_count(&self) -> usize {
        (self.keys.1 - self.keys.0) as usize
    }

    pub fn value_count(&self) -> usize {
        (self.values.1 - self.values.0) as usize
    }

    fn filler_token(&self, rng: &mut ChaCha8Rng) -> Token {
        rng.random_range(self.filler.0..self.filler.1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task: TaskKind,
    pub seed: u64,
    /// Prompt length `N`.
    pub context_len: usize,
    pub prompt: Vec<Token>,
    pub answer: Vec<Token>,
    /// Half-open `[start, end)` span of the supporting tokens in the prompt.
    pub needle_span: Option<(usize, usize)>,
}

/// One key→value pair in filler; the prompt ends by repeating the key.
pub fn gen_needle(context_len: usize, vocab: usize, seed: u64) -> Result<TaskInstance> {
    if context_len < 16 {
        return Err(LabError::config(format!(
            "needle context must be >= 16 tokens, got {context_len}"
        )));
    }
    let layout = VocabLayout::new(vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let key = rng.random_range(layout.keys.0..layout.keys.1);
    let value = rng.random_range(layout.values.0..layout.values.1);
    // key at `pos`, value at `pos + 1`, query key at `N - 1`
    let pos = rng.random_range(0..context_len - 2);
    let mut prompt: Vec<Token> = (0..context_len).map(|_| layout.filler_token(&mut rng)).collect();
    prompt[pos] = key;
    prompt[pos + 1] = value;
    prompt[context_len - 1] = key;
    Ok(TaskInstance {
        task: TaskKind::Needle,
        seed,
        context_len,
        prompt,
        answer: vec![value],
        needle_span: Some((pos, pos + 2)),
    })
}

/// `pairs` disjoint key→value pairs scattered in filler; the final token
/// queries one of the keys.
pub fn gen_assoc_recall(
    context_len: usize,
    pairs: usize,
    vocab: usize,
    seed: u64,
) -> Result<TaskInstance> {
    if pairs < 2 {
        return Err(LabError::config("associative recall needs at least 2 pairs"));
    }
    if 2 * pairs + 1 >= context_len {
        return Err(LabError::config(format!(
            "{pairs} pairs plus a query do not fit in {context_len} tokens"
        )));
    }
    let layout = VocabLayout::new(vocab)?;
    if pairs > layout.key_count() || pairs > layout.value_count() {
        return Err(LabError::config(format!(
            "vocab {vocab} has too few key/value tokens for {pairs} pairs"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keys: Vec<Token> = (layout.keys.0..layout.keys.1).collect();
    let mut values: Vec<Token> = (layout.values.0..layout.values.1).collect();
    keys.shuffle(&mut rng);
    values.shuffle(&mut rng);
    keys.truncate(pairs);
    values.truncate(pairs);

    // choose `pairs` non-overlapping 2-token slots in [0, N-1)
    let body = context_len - 1;
    let free = body - 2 * pairs;
    let mut gaps: Vec<usize> = (0..pairs).map(|_| rng.random_range(0..=free)).collect();
    gaps.sort_unstable();
    let starts: Vec<usize> = gaps.iter().enumerate().map(|(i, g)| g + 2 * i).collect();

    let mut prompt: Vec<Token> = (0..context_len).map(|_| layout.filler_token(&mut rng)).collect();
    for (i, &s) in starts.iter().enumerate() {
        prompt[s] = keys[i];
        prompt[s + 1] = values[i];
    }
    let q = rng.random_range(0..pairs);
    prompt[context_len - 1] = keys[q];
    Ok(TaskInstance {
        task: TaskKind::AssocRecall,
        seed,
        context_len,
        prompt,
        answer: vec![values[q]],
        needle_span: Some((starts[q], starts[q] + 2)),
    })
}

/// `prompt = sequence ++ [SEPARATOR]`, answer = the sequence.
pub fn gen_copy(len: usize, vocab: usize, seed: u64) -> Result<TaskInstance> {
    if len == 0 {
        return Err(LabError::config("copy length must be >= 1"));
    }
    if vocab < 2 {
        return Err(LabError::config("copy needs at least one non-separator token"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seq: Vec<Token> = (0..len).map(|_| rng.random_range(1..vocab as Token)).collect();
    let mut prompt = seq.clone();
    prompt.push(SEPARATOR);
    Ok(TaskInstance {
        task: TaskKind::Copy,
        seed,
        context_len: prompt.len(),
        prompt,
        answer: seq,
        needle_span: None,
    })
}

/// Parameters for generating a batch of instances of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: TaskKind,
    pub count: usize,
    /// Prompt length for needle/recall, sequence length for copy.
    pub context_len: usize,
    pub seed: u64,
    #[serde(default = "default_pairs")]
    pub pairs: usize,
}

fn default_pairs() -> usize {
    4
}

impl TaskSpec {
    pub fn generate_one(&self, vocab: usize, seed: u64) -> Result<TaskInstance> {
        match self.task {
            TaskKind::Needle => gen_needle(self.context_len, vocab, seed),
            TaskKind::AssocRecall => gen_assoc_recall(self.context_len, self.pairs, vocab, seed),
            TaskKind::Copy => gen_copy(self.context_len, vocab, seed),
        }
    }

    /// Instances with seeds `seed, seed + 1, …`.
    pub fn generate(&self, vocab: usize) -> Result<Vec<TaskInstance>> {
        (0..self.count as u64)
            .map(|i| self.generate_one(vocab, self.seed.wrapping_add(i)))
            .collect()
    }
}

/// 1 iff the first `|answer|` generated tokens equal the answer.
pub fn score(instance: &TaskInstance, generated: &[Token]) -> Result<u8> {
    let n = instance.answer.len();
    if generated.len() < n {
        return Err(LabError::Scoring(format!(
            "generated {} tokens, answer needs {n}",
            generated.len()
        )));
    }
    Ok(u8::from(generated[..n] == instance.answer[..]))
}

/// Answer produced by reading the prompt directly (for solvability checks).
pub fn oracle_answer(instance: &TaskInstance) -> Vec<Token> {
    match instance.task {
        TaskKind::Copy => instance.prompt[..instance.prompt.len() - 1].to_vec(),
        TaskKind::Needle | TaskKind::AssocRecall => {
            let query = *instance.prompt.last().expect("non-empty prompt");
            let body = &instance.prompt[..instance.prompt.len() - 1];
            body.windows(2)
                .find(|w| w[0] == query)
                .map(|w| vec![w[1]])
                .unwrap_or_default()
        }
    }
}

fn join_tokens(tokens: &[Token]) -> String {
    tokens
        .iter()
        .map(Token::to_string)
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_tokens(s: &str) -> Result<Vec<Token>> {
    s.split_whitespace()
        .map(|t| {
            t.parse::<Token>()
                .map_err(|e| LabError::data(format!("bad token {t:?}: {e}")))
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct InstanceRecord {
    task: TaskKind,
    seed: u64,
    n: usize,
    prompt: String,
    answer: String,
    needle_span: Option<[usize; 2]>,
}

impl TaskInstance {
    /// One JSON object per line; token lists are space-separated integers.
    pub fn to_record(&self) -> String {
        let rec = InstanceRecord {
            task: self.task,
            seed: self.seed,
            n: self.context_len,
            prompt: join_tokens(&self.prompt),
            answer: join_tokens(&self.answer),
            needle_span: self.needle_span.map(|(a, b)| [a, b]),
        };
        serde_json::to_string(&rec).expect("instance record serializes")
    }

    pub fn from_record(line: &str) -> Result<Self> {
        let rec: InstanceRecord = serde_json::from_str(line)?;
        let prompt = parse_tokens(&rec.prompt)?;
        let answer = parse_tokens(&rec.answer)?;
        if answer.is_empty() {
            return Err(LabError::data("instance with an empty answer"));
        }
        let needle_span = rec.needle_span.map(|[a, b]| (a, b));
        if let Some((a, b)) = needle_span {
            if a >= b || b > prompt.len() {
                return Err(LabError::data(format!("needle span {a}..{b} out of bounds")));
            }
        }
        Ok(Self {
            task: rec.task,
            seed: rec.seed,
            context_len: rec.n,
            prompt,
            answer,
            needle_span,
        })
    }
}

pub fn write_instances(mut w: impl Write, instances: &[TaskInstance]) -> std::io::Result<()> {
    for inst in instances {
        writeln!(w, "{}", inst.to_record())?;
    }
    Ok(())
}

pub fn read_instances(r: impl BufRead) -> Result<Vec<TaskInstance>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| LabError::data(format!("line {}: {e}", i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            TaskInstance::from_record(&line)
                .map_err(|e| LabError::data(format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn needle_is_deterministic_and_value_absent_from_filler() {
        let a = gen_needle(64, 64, 3).unwrap();
        assert_eq!(a, gen_needle(64, 64, 3).unwrap());
        assert_ne!(a, gen_needle(64, 64, 4).unwrap());
        let (s, e) = a.needle_span.unwrap();
        let value = a.answer[0];
        for (i, &t) in a.prompt.iter().enumerate() {
            if i != s + 1 {
                assert_ne!(t, value);
            }
        }
        assert_eq!(e, s + 2);
        assert_eq!(a.prompt.len(), 64);
        assert_eq!(oracle_answer(&a), a.answer);
        assert!(gen_needle(8, 64, 1).is_err());
        assert!(matches!(gen_needle(32, 4, 1), Err(LabError::Config(_))));
    }

    #[test]
    fn needle_positions_roughly_uniform() {
        // chi-square over 8 bins of the key position
        let n = 64;
        let bins = 8;
        let mut counts = vec![0usize; bins];
        for seed in 0..1000 {
            let inst = gen_needle(n, 64, seed).unwrap();
            let pos = inst.needle_span.unwrap().0;
            counts[pos * bins / (n - 2)] += 1;
        }
        let expected = 1000.0 / bins as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 7 dof, p = 0.001 critical value
        assert!(chi2 < 24.32, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn assoc_recall_contracts() {
        for seed in 0..200 {
            let inst = gen_assoc_recall(48, 4, 64, seed).unwrap();
            assert_eq!(inst, gen_assoc_recall(48, 4, 64, seed).unwrap());
            let query = *inst.prompt.last().unwrap();
            let body = &inst.prompt[..47];
            assert_eq!(body.iter().filter(|&&t| t == query).count(), 1);
            let layout = VocabLayout::new(64).unwrap();
            let values: Vec<Token> = body
                .iter()
                .copied()
                .filter(|t| (layout.values.0..layout.values.1).contains(t))
                .collect();
            assert_eq!(values.len(), 4);
            assert_eq!(values.iter().filter(|&&v| v == inst.answer[0]).count(), 1);
            assert_eq!(oracle_answer(&inst), inst.answer);
            let (s, _) = inst.needle_span.unwrap();
            assert_eq!(inst.prompt[s], query);
        }
        assert!(gen_assoc_recall(8, 4, 64, 0).is_err());
        assert!(gen_assoc_recall(64, 1, 64, 0).is_err());
    }

    #[test]
    fn copy_contracts() {
        let inst = gen_copy(12, 32, 5).unwrap();
        assert_eq!(inst, gen_copy(12, 32, 5).unwrap());
        assert_eq!(inst.answer.len(), 12);
        assert_eq!(*inst.prompt.last().unwrap(), SEPARATOR);
        assert_eq!(oracle_answer(&inst), inst.answer);

        let mut counts = vec![0usize; 32];
        for seed in 0..400 {
            for t in gen_copy(31, 32, seed).unwrap().answer {
                counts[t as usize] += 1;
            }
        }
        assert_eq!(counts[0], 0);
        let expected = 400.0 * 31.0 / 31.0;
        let chi2: f64 = counts[1..]
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 30 dof, p = 0.001 critical value
        assert!(chi2 < 59.70, "chi2 = {chi2}");
    }

    #[test]
    fn scoring() {
        let inst = gen_copy(3, 16, 1).unwrap();
        assert_eq!(score(&inst, &inst.answer).unwrap(), 1);
        let mut wrong = inst.answer.clone();
        wrong[1] = (wrong[1] % 15) + 1;
        if wrong != inst.answer {
            assert_eq!(score(&inst, &wrong).unwrap(), 0);
        }
        let mut longer = inst.answer.clone();
        longer.push(4);
        assert_eq!(score(&inst, &longer).unwrap(), 1);
        assert!(matches!(score(&inst, &[1]), Err(LabError::Scoring(_))));
    }

    #[test]
    fn record_roundtrip() {
        let insts = vec![gen_needle(20, 32, 1).unwrap(), gen_copy(4, 32, 2).unwrap()];
        let mut buf = Vec::new();
        write_instances(&mut buf, &insts).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().next().unwrap().contains("\"prompt\":\""));
        assert_eq!(read_instances(buf.as_slice()).unwrap(), insts);
        assert!(read_instances(&b"{\"task\":\"copy\"}\n"[..]).is_err());
    }
}
