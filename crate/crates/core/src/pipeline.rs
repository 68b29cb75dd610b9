//! End-to-end steps shared by the command line and the acceptance suite:
//! corpus generation, training a mode, and evaluating a checkpoint.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::RunConfig;
use crate::data::{
    derive_seed, gen_sample, parse_prompt, read_jsonl, write_jsonl, DataError, PromptResponsePair, Task, CONTENT_START,
};
use crate::eval::{mnt_compliance, parse_grid, sweep, ComplianceReport, EvalError, EvalReport, SweepOptions};
use crate::inference::GenMode;
use crate::model::Parameters;
use crate::training::{train_with_progress, StepRecord, TrainError, TrainMode, TrainOutcome};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Every `ENUM_HOLDOUT_STRIDE`-th ENUM start token is kept out of the
/// training corpus. ENUM has one prompt per start token, so without this
/// no held-out ENUM prompt would exist.
pub const ENUM_HOLDOUT_STRIDE: u32 = 6;

pub fn is_reserved_enum(pair: &PromptResponsePair) -> bool {
    pair.task == Task::Enum
        && parse_prompt(&pair.prompt)
            .map(|(_, body)| (body[0] - CONTENT_START) % ENUM_HOLDOUT_STRIDE == 0)
            .unwrap_or(false)
}

/// Training corpus for `cfg`: `per_task` samples of each task, ENUM
/// samples redrawn while their start token is reserved.
pub fn training_corpus(cfg: &RunConfig) -> Result<Vec<PromptResponsePair>, DataError> {
    let (seed, range, space) = (cfg.corpus_seed(), cfg.content_range(), cfg.space());
    let mut out = Vec::with_capacity(2 * cfg.per_task);
    for i in 0..cfg.per_task as u64 {
        out.push(gen_sample(Task::Motif, derive_seed(seed, 2 * i), range, space)?);
        let base = derive_seed(seed, 2 * i + 1);
        let mut pair = gen_sample(Task::Enum, base, range, space)?;
        let mut k = 0;
        while is_reserved_enum(&pair) {
            pair = gen_sample(Task::Enum, derive_seed(base, k), range, space)?;
            k += 1;
        }
        out.push(pair);
    }
    Ok(out)
}

/// Held-out prompts: a separate seed stream, alternating tasks. MOTIF
/// prompts must not occur in `train`; ENUM prompts use reserved starts.
pub fn eval_prompts(cfg: &RunConfig, train: &[PromptResponsePair]) -> Result<Vec<PromptResponsePair>, DataError> {
    let seen: std::collections::HashSet<&[u32]> = train.iter().map(|p| p.prompt.as_slice()).collect();
    let mut out = Vec::with_capacity(cfg.eval_prompts);
    let mut i = 0u64;
    while out.len() < cfg.eval_prompts {
        let task = if out.len() % 2 == 0 { Task::Motif } else { Task::Enum };
        let pair = gen_sample(task, derive_seed(cfg.eval_seed(), i), cfg.content_range(), cfg.space())?;
        i += 1;
        let held_out = match task {
            Task::Motif => !seen.contains(pair.prompt.as_slice()),
            Task::Enum => is_reserved_enum(&pair),
        };
        if held_out {
            out.push(pair);
        }
        if i > 1_000_000 {
            return Err(DataError::Range {
                min: cfg.min_response,
                max: cfg.max_response,
                reason: format!("could not find {} held-out prompts unseen in training", cfg.eval_prompts),
            });
        }
    }
    Ok(out)
}

/// Writes the training corpus and held-out prompts; returns their paths.
pub fn write_datasets(cfg: &RunConfig) -> Result<(PathBuf, PathBuf), DataError> {
    let train = training_corpus(cfg)?;
    let held_out = eval_prompts(cfg, &train)?;
    let (tp, ep) = (cfg.resolve(&cfg.dataset), cfg.resolve(&cfg.eval_set));
    write_jsonl(&tp, &train)?;
    write_jsonl(&ep, &held_out)?;
    Ok((tp, ep))
}

pub fn load_datasets(cfg: &RunConfig) -> Result<(Vec<PromptResponsePair>, Vec<PromptResponsePair>), DataError> {
    Ok((read_jsonl(&cfg.resolve(&cfg.dataset))?, read_jsonl(&cfg.resolve(&cfg.eval_set))?))
}

/// Directory holding one mode's checkpoints, loss curve and reports.
pub fn run_dir(cfg: &RunConfig, mode: TrainMode) -> PathBuf {
    cfg.out_dir.join(mode.name())
}

pub fn train_mode(
    cfg: &RunConfig,
    train: &[PromptResponsePair],
    out: &Path,
    progress: impl FnMut(&StepRecord),
) -> Result<TrainOutcome, PipelineError> {
    Ok(train_with_progress(&cfg.train_run(), train, cfg.model, out, progress)?)
}

/// Sweep settings for a checkpoint trained in `mode`.
pub fn sweep_options(cfg: &RunConfig, mode: TrainMode, threads: usize) -> SweepOptions {
    let gen = match mode {
        TrainMode::Ldpe => GenMode::Ldpe,
        TrainMode::Orpe => GenMode::Orpe,
        TrainMode::None | TrainMode::Prompted => GenMode::None,
        TrainMode::Mntpp => GenMode::MntppLimit,
    };
    SweepOptions {
        mode: gen,
        prompted: mode == TrainMode::Prompted,
        hard_cap_factor: cfg.hard_cap_factor,
        scale_policy: cfg.scale_policy,
        space: cfg.space(),
        threads,
    }
}

/// Target-length sweep over `cfg.grid`.
pub fn evaluate(
    cfg: &RunConfig,
    params: &Parameters<f32>,
    mode: TrainMode,
    prompts: &[PromptResponsePair],
    threads: usize,
) -> Result<EvalReport, PipelineError> {
    let grid = parse_grid(&cfg.grid)?;
    Ok(sweep(params, prompts, &grid, &sweep_options(cfg, mode, threads))?)
}

/// Token-limit sweep over `cfg.limit_grid`.
pub fn evaluate_limits(
    cfg: &RunConfig,
    params: &Parameters<f32>,
    prompts: &[PromptResponsePair],
    threads: usize,
) -> Result<ComplianceReport, PipelineError> {
    let grid = parse_grid(&cfg.limit_grid)?;
    Ok(mnt_compliance(params, prompts, &grid, &sweep_options(cfg, TrainMode::Mntpp, threads))?)
}
