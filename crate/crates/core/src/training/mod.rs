//! Fine-tuning loop: masked response cross-entropy, AdamW with a linear
//! learning-rate schedule, gradient accumulation, and Max New Tokens++
//! shift sampling.

mod optim;

pub use optim::{adamw_step, adamw_update, linear_lr, AdamWHyper, AdamWState};

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{derive_seed, make_example, DataError, PromptResponsePair, TrainingExample};
use crate::encoding::{sample_shift, CurriculumSchedule, EncodingError, EncodingMode, DEFAULT_MAX_SHIFT};
use crate::model::checkpoint::{self, CheckpointError, CheckpointMeta};
use crate::model::{build_logits, ModelConfig, ModelError, ParamVars, Parameters};
use crate::tensor::{Graph, Scalar, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("step {step} outside schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },
    #[error("non-finite gradient in {tensor}[{index}] at step {step}")]
    NonFiniteGradient { tensor: String, index: usize, step: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid training run: {0}")]
    InvalidRun(String),
    #[error("checkpoint write failed after step {step} (last loss {last_loss:?}): {source}")]
    Checkpoint {
        step: usize,
        last_loss: Option<f64>,
        #[source]
        source: CheckpointError,
    },
    #[error("loss csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Ldpe,
    Orpe,
    None,
    Prompted,
    Mntpp,
}

impl TrainMode {
    pub const ALL: [TrainMode; 5] = [Self::Ldpe, Self::Orpe, Self::None, Self::Prompted, Self::Mntpp];

    /// Encoding used when building the model input.
    pub fn encoding(self) -> EncodingMode {
        match self {
            Self::Ldpe | Self::Mntpp => EncodingMode::Ldpe,
            Self::Orpe => EncodingMode::Orpe,
            Self::None | Self::Prompted => EncodingMode::None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Ldpe => "ldpe",
            Self::Orpe => "orpe",
            Self::None => "none",
            Self::Prompted => "prompted",
            Self::Mntpp => "mntpp",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown mode '{s}' (expected ldpe|orpe|none|prompted|mntpp)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub hyper: AdamWHyper,
    pub epochs: usize,
    pub grad_accum: usize,
    pub mode: TrainMode,
    /// Shift curriculum start and end scale (MNTPP only).
    pub sigma0: f64,
    pub sigma_max: f64,
    pub max_shift: usize,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many optimizer steps
    /// (0 disables; the final checkpoint is always written).
    pub checkpoint_every: usize,
}

impl Default for TrainRun {
    fn default() -> Self {
        Self {
            hyper: AdamWHyper::default(),
            epochs: 1,
            grad_accum: 5,
            mode: TrainMode::Ldpe,
            sigma0: 0.1,
            sigma_max: 256.0,
            max_shift: DEFAULT_MAX_SHIFT,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainRun {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidRun(m.to_string()));
        if self.grad_accum == 0 {
            return bad("grad_accum must be at least 1");
        }
        if !(self.hyper.lr0 > 0.0) {
            return bad("lr0 must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.mode == TrainMode::Mntpp {
            CurriculumSchedule::new(self.sigma0, self.sigma_max, 1, self.max_shift)?;
        }
        Ok(())
    }

    /// Number of optimizer steps for a dataset of `samples` pairs.
    pub fn total_steps(&self, samples: usize) -> usize {
        (samples * self.epochs).div_ceil(self.grad_accum)
    }
}

/// Masked mean cross-entropy of one example and the gradient of every
/// parameter (in [`Parameters::tensors`] order).
pub fn loss_step<T: Scalar>(params: &Parameters<T>, example: &TrainingExample) -> Result<(T, Vec<Vec<T>>), TrainError> {
    batch_loss_step(params, std::slice::from_ref(example))
}

/// Mean over `examples` of each example's masked mean loss, computed in a
/// single graph, with gradients.
pub fn batch_loss_step<T: Scalar>(
    params: &Parameters<T>,
    examples: &[TrainingExample],
) -> Result<(T, Vec<Vec<T>>), TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut g = Graph::new();
    let vars = ParamVars::trainable(&mut g, params);
    let mut total = None;
    for ex in examples {
        let logits = build_logits(&mut g, &vars, params.config(), &ex.tokens, &ex.plan)?;
        let (targets, mask) = ex.shifted_targets();
        let ce = g.cross_entropy(logits, &targets, &mask)?;
        total = Some(match total {
            None => ce,
            Some(acc) => g.add(acc, ce)?,
        });
    }
    let mut loss = total.expect("non-empty");
    if examples.len() > 1 {
        loss = g.scale(loss, T::one() / T::from_usize(examples.len()).unwrap());
    }
    g.backward(loss)?;
    let value = g.value(loss).item();
    Ok((value, vars.gradients(&mut g)))
}

/// One row of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub params: Parameters<f32>,
    pub records: Vec<StepRecord>,
}

pub const FINAL_CHECKPOINT: &str = "final.lbtc";
pub const LOSS_CSV: &str = "loss.csv";

pub fn train(
    run: &TrainRun,
    dataset: &[PromptResponsePair],
    model_config: ModelConfig,
    out_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    train_with_progress(run, dataset, model_config, out_dir, |_| {})
}

/// Trains from a fresh initialization seeded by `run.seed`, calling
/// `progress` after every optimizer step.
pub fn train_with_progress(
    run: &TrainRun,
    dataset: &[PromptResponsePair],
    model_config: ModelConfig,
    out_dir: &Path,
    mut progress: impl FnMut(&StepRecord),
) -> Result<TrainOutcome, TrainError> {
    run.validate()?;
    model_config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let total_steps = run.total_steps(dataset.len());
    let schedule = match run.mode {
        TrainMode::Mntpp => Some(CurriculumSchedule::new(run.sigma0, run.sigma_max, total_steps, run.max_shift)?),
        _ => None,
    };

    let mut params = Parameters::<f32>::init(model_config, run.seed)?;
    let mut state = AdamWState::new(&params);
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(run.seed, 1));
    let mut shift_rng = ChaCha8Rng::seed_from_u64(derive_seed(run.seed, 2));

    let mut order: Vec<usize> = Vec::with_capacity(dataset.len() * run.epochs);
    for _ in 0..run.epochs {
        let mut epoch: Vec<usize> = (0..dataset.len()).collect();
        epoch.shuffle(&mut order_rng);
        order.extend(epoch);
    }

    let meta = |step: usize| CheckpointMeta {
        model_config,
        step: step as u64,
        seed: run.seed,
        mode: Some(run.mode.name().to_string()),
    };

    std::fs::create_dir_all(out_dir)?;
    let loss_csv = out_dir.join(LOSS_CSV);
    let mut writer = csv::Writer::from_path(&loss_csv)?;
    let mut records = Vec::with_capacity(total_steps);
    let mut acc: Vec<Vec<f32>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();

    for (step, chunk) in order.chunks(run.grad_accum).enumerate() {
        let sigma = match &schedule {
            Some(s) => s.sigma(step)?,
            None => 0.0,
        };
        acc.iter_mut().for_each(|a| a.fill(0.0));
        let mut loss_sum = 0.0f64;
        for &idx in chunk {
            let shift = match schedule {
                Some(s) => sample_shift(sigma, s.max_shift, &mut shift_rng),
                None => 0,
            };
            let ex = make_example(&dataset[idx], run.mode.encoding(), shift, run.mode == TrainMode::Prompted)?;
            let (loss, grads) = loss_step(&params, &ex)?;
            loss_sum += loss as f64;
            for (a, g) in acc.iter_mut().zip(&grads) {
                a.iter_mut().zip(g).for_each(|(a, &g)| *a += g);
            }
        }
        let inv = 1.0 / chunk.len() as f32;
        acc.iter_mut().for_each(|a| a.iter_mut().for_each(|v| *v *= inv));
        let lr = linear_lr(step, total_steps, run.hyper.lr0)?;
        adamw_step(&mut params, &acc, &mut state, &run.hyper, lr, step + 1)?;

        let record = StepRecord {
            step: step + 1,
            loss: loss_sum / chunk.len() as f64,
            lr,
            sigma,
        };
        writer.serialize(record)?;
        progress(&record);
        records.push(record);

        let done = step + 1;
        if run.checkpoint_every > 0 && done % run.checkpoint_every == 0 && done < total_steps {
            let path = out_dir.join(format!("step_{done:07}.lbtc"));
            checkpoint::save(&path, &params, &meta(done)).map_err(|source| TrainError::Checkpoint {
                step: done,
                last_loss: Some(record.loss),
                source,
            })?;
        }
    }
    writer.flush()?;

    let checkpoint = out_dir.join(FINAL_CHECKPOINT);
    checkpoint::save(&checkpoint, &params, &meta(total_steps)).map_err(|source| TrainError::Checkpoint {
        step: total_steps,
        last_loss: records.last().map(|r| r.loss),
        source,
    })?;
    Ok(TrainOutcome {
        checkpoint,
        loss_csv,
        params,
        records,
    })
}

/// Reads a loss curve written by [`train`].
pub fn read_loss_csv(path: &Path) -> Result<Vec<StepRecord>, TrainError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<StepRecord>, _>>()?)
}

/// Mean of the first and last `window` losses.
pub fn loss_window_means(records: &[StepRecord], window: usize) -> Option<(f64, f64)> {
    if records.is_empty() || window == 0 {
        return None;
    }
    let w = window.min(records.len());
    let mean = |s: &[StepRecord]| s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64;
    Some((mean(&records[..w]), mean(&records[records.len() - w..])))
}
