//! Synthetic prompt/response tasks whose responses stay valid at every
//! truncation length, so EOS timing can only be learned from the
//! countdown.
//!
//! Token layout:
//!
//! | id        | meaning                     |
//! |-----------|-----------------------------|
//! | 0         | PAD                         |
//! | 1         | BOS                         |
//! | 2         | EOS                         |
//! | 3         | SEP (end of prompt)         |
//! | 4, 5      | MOTIF / ENUM task markers   |
//! | 6         | LEN (prompted baseline)     |
//! | 7..=16    | decimal digits 0..=9        |
//! | 17..      | content tokens              |
//!
//! MOTIF prompt: `BOS MOTIF m1 .. mp SEP`, response `m1 m2 .. mp m1 .. EOS`.
//! ENUM prompt: `BOS ENUM s SEP`, response `s s+1 s+2 .. EOS` (mod content size).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{CountdownPlan, EncodingError, EncodingMode};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;
pub const TASK_MOTIF: u32 = 4;
pub const TASK_ENUM: u32 = 5;
pub const LEN: u32 = 6;
pub const DIGIT0: u32 = 7;
pub const CONTENT_START: u32 = 17;

pub const MAX_MOTIF: usize = 5;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid response length range [{min}, {max}]: {reason}")]
    Range { min: usize, max: usize, reason: String },
    #[error("vocabulary of {0} leaves too few content tokens")]
    Vocabulary(usize),
    #[error("malformed prompt: {0}")]
    Prompt(String),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Plan(#[from] EncodingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Motif,
    Enum,
}

impl Task {
    pub fn marker(self) -> u32 {
        match self {
            Task::Motif => TASK_MOTIF,
            Task::Enum => TASK_ENUM,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Motif => "motif",
            Task::Enum => "enum",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "motif" => Ok(Task::Motif),
            "enum" => Ok(Task::Enum),
            other => Err(DataError::UnknownTask(other.to_string())),
        }
    }
}

/// Inclusive bounds on the number of content tokens in a response (EOS
/// comes on top).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthRange {
    pub min: usize,
    pub max: usize,
}

impl LengthRange {
    pub fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }
}

/// Vocabulary and context limits shared by generation routines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSpace {
    pub vocab_size: usize,
    pub max_seq: usize,
}

impl TaskSpace {
    pub fn content_size(&self) -> usize {
        self.vocab_size.saturating_sub(CONTENT_START as usize)
    }

    fn check(&self) -> Result<(), DataError> {
        if self.content_size() < MAX_MOTIF {
            return Err(DataError::Vocabulary(self.vocab_size));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptResponsePair {
    pub task: Task,
    pub seed: u64,
    pub prompt: Vec<u32>,
    pub response: Vec<u32>,
}

impl PromptResponsePair {
    /// Response length including EOS.
    pub fn response_len(&self) -> usize {
        self.response.len()
    }

    pub fn content(&self) -> &[u32] {
        match self.response.last() {
            Some(&EOS) => &self.response[..self.response.len() - 1],
            _ => &self.response,
        }
    }
}

/// Longest prompt any task produces.
pub const MAX_PROMPT_LEN: usize = MAX_MOTIF + 3;

/// Draws one sample. Same `(task, seed, range, space)` always yields the
/// same pair.
pub fn gen_sample(task: Task, seed: u64, range: LengthRange, space: TaskSpace) -> Result<PromptResponsePair, DataError> {
    space.check()?;
    let range_err = |reason: &str| DataError::Range {
        min: range.min,
        max: range.max,
        reason: reason.to_string(),
    };
    if range.min < 1 || range.min > range.max {
        return Err(range_err("need 1 <= min <= max"));
    }
    let c = space.content_size() as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prompt = vec![BOS, task.marker()];
    match task {
        Task::Motif => {
            let p = rng.random_range(1..=MAX_MOTIF);
            prompt.extend(sample(&mut rng, c as usize, p).into_iter().map(|i| CONTENT_START + i as u32));
        }
        Task::Enum => prompt.push(CONTENT_START + rng.random_range(0..c)),
    }
    prompt.push(SEP);
    if prompt.len() + range.max + 1 > space.max_seq {
        return Err(range_err(&format!(
            "prompt of {} plus {} response tokens exceeds max_seq {}",
            prompt.len(),
            range.max + 1,
            space.max_seq
        )));
    }
    let len = rng.random_range(range.min..=range.max);
    let mut response = continuation(&prompt, len, space)?;
    response.push(EOS);
    Ok(PromptResponsePair {
        task,
        seed,
        prompt,
        response,
    })
}

/// Task and body (tokens between the marker and SEP) of a prompt,
/// skipping an optional `LEN digits..` block after BOS.
pub fn parse_prompt(prompt: &[u32]) -> Result<(Task, &[u32]), DataError> {
    let bad = |m: &str| DataError::Prompt(m.to_string());
    let rest = prompt.strip_prefix(&[BOS]).ok_or_else(|| bad("missing BOS"))?;
    let rest = match rest.strip_prefix(&[LEN]) {
        Some(r) => {
            let digits = r.iter().take_while(|&&t| (DIGIT0..DIGIT0 + 10).contains(&t)).count();
            &r[digits..]
        }
        None => rest,
    };
    let (&marker, rest) = rest.split_first().ok_or_else(|| bad("missing task marker"))?;
    let task = match marker {
        TASK_MOTIF => Task::Motif,
        TASK_ENUM => Task::Enum,
        _ => return Err(bad("unknown task marker")),
    };
    let body = rest.strip_suffix(&[SEP]).ok_or_else(|| bad("missing SEP"))?;
    let valid_len = match task {
        Task::Motif => (1..=MAX_MOTIF).contains(&body.len()),
        Task::Enum => body.len() == 1,
    };
    if !valid_len || body.iter().any(|&t| t < CONTENT_START) {
        return Err(bad("malformed task body"));
    }
    Ok((task, body))
}

/// The first `len` content tokens that correctly continue `prompt`.
pub fn continuation(prompt: &[u32], len: usize, space: TaskSpace) -> Result<Vec<u32>, DataError> {
    let (task, body) = parse_prompt(prompt)?;
    let c = space.content_size() as u32;
    Ok(match task {
        Task::Motif => body.iter().copied().cycle().take(len).collect(),
        Task::Enum => {
            let s = body[0] - CONTENT_START;
            (0..len as u32).map(|j| CONTENT_START + (s + j) % c).collect()
        }
    })
}

/// Whether `content` (without EOS) is a valid continuation of `prompt`.
pub fn check_continuation(prompt: &[u32], content: &[u32], space: TaskSpace) -> bool {
    continuation(prompt, content.len(), space)
        .map(|want| want == content)
        .unwrap_or(false)
}

/// `LEN` followed by the decimal digits of `n`.
pub fn length_tokens(n: usize) -> Vec<u32> {
    let mut out = vec![LEN];
    out.extend(n.to_string().bytes().map(|b| DIGIT0 + (b - b'0') as u32));
    out
}

/// Prompt with the target response length spelled out after BOS.
pub fn prompted_prompt(prompt: &[u32], target_len: usize) -> Vec<u32> {
    let mut out = vec![BOS];
    out.extend(length_tokens(target_len));
    out.extend_from_slice(prompt.strip_prefix(&[BOS]).unwrap_or(prompt));
    out
}

/// Tokens, countdown plan and loss mask for one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
    pub plan: CountdownPlan,
    /// `false` over the prompt, `true` over the response including EOS.
    pub loss_mask: Vec<bool>,
}

impl TrainingExample {
    pub fn total_len(&self) -> usize {
        self.tokens.len()
    }

    /// Next-token targets and mask aligned with logits rows: row `i`
    /// predicts token `i + 1`; the last row is masked out.
    pub fn shifted_targets(&self) -> (Vec<usize>, Vec<bool>) {
        let len = self.tokens.len();
        let mut targets = Vec::with_capacity(len);
        let mut mask = Vec::with_capacity(len);
        for i in 0..len {
            if i + 1 < len {
                targets.push(self.tokens[i + 1] as usize);
                mask.push(self.loss_mask[i + 1]);
            } else {
                targets.push(PAD as usize);
                mask.push(false);
            }
        }
        (targets, mask)
    }
}

/// Builds a training example. With `prompted_baseline`, the target length
/// is written into the prompt and no encoding is used.
pub fn make_example(
    pair: &PromptResponsePair,
    mode: EncodingMode,
    shift: usize,
    prompted_baseline: bool,
) -> Result<TrainingExample, DataError> {
    let (prompt, mode) = if prompted_baseline {
        (prompted_prompt(&pair.prompt, pair.response_len()), EncodingMode::None)
    } else {
        (pair.prompt.clone(), mode)
    };
    let n = prompt.len();
    let mut tokens = prompt;
    tokens.extend_from_slice(&pair.response);
    let total = tokens.len();
    let plan = CountdownPlan::new(mode, n, total, shift)?;
    let loss_mask = (0..total).map(|i| i >= n).collect();
    Ok(TrainingExample {
        tokens,
        prompt_len: n,
        plan,
        loss_mask,
    })
}

/// SplitMix64 step used to derive per-sample seeds from a corpus seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `per_task` samples of each task, interleaved MOTIF/ENUM.
pub fn generate_corpus(per_task: usize, seed: u64, range: LengthRange, space: TaskSpace) -> Result<Vec<PromptResponsePair>, DataError> {
    let mut out = Vec::with_capacity(2 * per_task);
    for i in 0..per_task as u64 {
        out.push(gen_sample(Task::Motif, derive_seed(seed, 2 * i), range, space)?);
        out.push(gen_sample(Task::Enum, derive_seed(seed, 2 * i + 1), range, space)?);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, pairs: &[PromptResponsePair]) -> Result<(), DataError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut w, p).map_err(|source| DataError::Json { line: 0, source })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<PromptResponsePair>, DataError> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| DataError::Json { line: i + 1, source })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SPACE: TaskSpace = TaskSpace {
        vocab_size: 117,
        max_seq: 256,
    };

    fn c(i: u32) -> u32 {
        CONTENT_START + i
    }

    #[test]
    fn motif_cycles() {
        let prompt = [BOS, TASK_MOTIF, c(0), c(1), SEP];
        assert_eq!(continuation(&prompt, 5, SPACE).unwrap(), vec![c(0), c(1), c(0), c(1), c(0)]);
    }

    #[test]
    fn enum_counts_and_wraps() {
        let prompt = [BOS, TASK_ENUM, c(7), SEP];
        assert_eq!(continuation(&prompt, 3, SPACE).unwrap(), vec![c(7), c(8), c(9)]);
        let prompt = [BOS, TASK_ENUM, c(98), SEP];
        assert_eq!(continuation(&prompt, 3, SPACE).unwrap(), vec![c(98), c(99), c(0)]);
    }

    #[test]
    fn samples_are_deterministic_and_valid() {
        let range = LengthRange::new(5, 40);
        for task in [Task::Motif, Task::Enum] {
            let a = gen_sample(task, 99, range, SPACE).unwrap();
            assert_eq!(a, gen_sample(task, 99, range, SPACE).unwrap());
            assert_eq!(a.prompt[0], BOS);
            assert_eq!(*a.response.last().unwrap(), EOS);
            assert!(a.prompt.len() >= 2);
            assert!((6..=41).contains(&a.response_len()));
            assert!(check_continuation(&a.prompt, a.content(), SPACE));
        }
    }

    #[test]
    fn motif_tokens_are_distinct() {
        for seed in 0..200 {
            let s = gen_sample(Task::Motif, seed, LengthRange::new(1, 3), SPACE).unwrap();
            let (_, body) = parse_prompt(&s.prompt).unwrap();
            let mut sorted = body.to_vec();
            sorted.sort();
            sorted.dedup();
            assert_eq!(sorted.len(), body.len());
        }
    }

    #[test]
    fn range_errors() {
        assert!(gen_sample(Task::Enum, 0, LengthRange::new(0, 4), SPACE).is_err());
        assert!(gen_sample(Task::Enum, 0, LengthRange::new(5, 4), SPACE).is_err());
        assert!(gen_sample(Task::Enum, 0, LengthRange::new(5, 252), SPACE).is_err());
        assert!(gen_sample(Task::Enum, 0, LengthRange::new(5, 251), SPACE).is_ok());
    }

    #[test]
    fn ldpe_example_counts_down_over_response() {
        let pair = PromptResponsePair {
            task: Task::Enum,
            seed: 0,
            prompt: vec![BOS, TASK_ENUM, c(3), SEP],
            response: (0..9).map(|j| c(3 + j)).chain([EOS]).collect(),
        };
        let ex = make_example(&pair, EncodingMode::Ldpe, 0, false).unwrap();
        assert_eq!(ex.prompt_len, 4);
        let idx = ex.plan.indices();
        let resp: Vec<usize> = idx[4..].iter().map(|i| i.unwrap()).collect();
        assert_eq!(resp, (1..=10).rev().collect::<Vec<_>>());
        assert_eq!(ex.loss_mask.iter().filter(|&&m| m).count(), 10);

        let shifted = make_example(&pair, EncodingMode::Ldpe, 3, false).unwrap();
        assert_eq!(shifted.plan.indices().last().unwrap(), &Some(4));
    }

    #[test]
    fn prompted_example_spells_length() {
        let pair = PromptResponsePair {
            task: Task::Enum,
            seed: 0,
            prompt: vec![BOS, TASK_ENUM, c(3), SEP],
            response: (0..111).map(|j| c(3 + j % 90)).chain([EOS]).collect(),
        };
        let ex = make_example(&pair, EncodingMode::Ldpe, 0, true).unwrap();
        assert_eq!(&ex.tokens[..5], &[BOS, LEN, DIGIT0 + 1, DIGIT0 + 1, DIGIT0 + 2]);
        assert_eq!(ex.plan.mode(), EncodingMode::None);
        let (task, body) = parse_prompt(&ex.tokens[..ex.prompt_len]).unwrap();
        assert_eq!((task, body), (Task::Enum, &[c(3)][..]));
    }

    #[test]
    fn shifted_targets_align_with_mask() {
        let pair = gen_sample(Task::Motif, 4, LengthRange::new(3, 3), SPACE).unwrap();
        let ex = make_example(&pair, EncodingMode::None, 0, false).unwrap();
        let (targets, mask) = ex.shifted_targets();
        assert_eq!(mask.iter().filter(|&&m| m).count(), pair.response_len());
        assert_eq!(targets[ex.total_len() - 2], EOS as usize);
        assert!(!mask[ex.total_len() - 1]);
        assert!(!mask[ex.prompt_len - 2]);
        assert!(mask[ex.prompt_len - 1]);
    }

    #[test]
    fn jsonl_round_trip() {
        let pairs = generate_corpus(5, 1, LengthRange::new(2, 9), SPACE).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_jsonl(&path, &pairs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().starts_with("{\"task\":"));
        assert_eq!(read_jsonl(&path).unwrap(), pairs);
    }
}
