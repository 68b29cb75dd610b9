//! Reverse-countdown sinusoidal encodings.
//!
//! A [`CountdownPlan`] assigns every position of a prompt/response
//! sequence a countdown index that reaches `1 + shift` at the final
//! response token (EOS). Positions are 1-based throughout this module.
//!
//! * `Ldpe` counts down over the whole sequence: position `i` gets
//!   `(L + 1) - i + shift`.
//! * `Orpe` uses the same index but leaves prompt positions (`i <= n`)
//!   without any encoding.
//! * `None` injects nothing.
//!
//! The encoding rows are standard sinusoids; before being added to the
//! token embeddings they are rescaled so the encoding matrix has the
//! same Frobenius norm as the embedding matrix ([`scale_encoding`]).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Scalar;

/// Default truncation bound for Max New Tokens++ shifts.
pub const DEFAULT_MAX_SHIFT: usize = 256;

const SINUSOID_BASE: f64 = 10_000.0;

#[derive(Debug, Error, PartialEq)]
pub enum EncodingError {
    #[error("embedding width {0} must be even and non-zero")]
    InvalidDimension(usize),
    #[error("invalid countdown plan: {0}")]
    InvalidPlan(String),
    #[error("encoding matrix has zero Frobenius norm")]
    DegenerateEncoding,
    #[error("embedding matrix has zero Frobenius norm")]
    DegenerateEmbedding,
    #[error("matrix shapes differ: {0} vs {1} elements")]
    ShapeMismatch(usize, usize),
    #[error("step {step} outside schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },
    #[error("invalid curriculum schedule: {0}")]
    InvalidSchedule(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodingMode {
    Ldpe,
    Orpe,
    None,
}

/// Per-position reverse-encoding layout for one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountdownPlan {
    mode: EncodingMode,
    prompt_len: usize,
    total_len: usize,
    shift: usize,
}

impl CountdownPlan {
    pub fn new(mode: EncodingMode, prompt_len: usize, total_len: usize, shift: usize) -> Result<Self, EncodingError> {
        if total_len == 0 {
            return Err(EncodingError::InvalidPlan("total length must be at least 1".into()));
        }
        if prompt_len > total_len {
            return Err(EncodingError::InvalidPlan(format!(
                "prompt length {prompt_len} exceeds total length {total_len}"
            )));
        }
        if mode == EncodingMode::Orpe && prompt_len >= total_len {
            return Err(EncodingError::InvalidPlan(format!(
                "ORPE needs a response region (n = {prompt_len}, L = {total_len})"
            )));
        }
        Ok(Self {
            mode,
            prompt_len,
            total_len,
            shift,
        })
    }

    /// Plan for exact-length control (no shift).
    pub fn exact(mode: EncodingMode, prompt_len: usize, total_len: usize) -> Result<Self, EncodingError> {
        Self::new(mode, prompt_len, total_len, 0)
    }

    pub fn mode(&self) -> EncodingMode {
        self.mode
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn response_len(&self) -> usize {
        self.total_len - self.prompt_len
    }

    pub fn shift(&self) -> usize {
        self.shift
    }

    /// Countdown index at 1-based `position`, or `None` where no encoding
    /// is injected.
    pub fn index_at(&self, position: usize) -> Option<usize> {
        assert!(
            (1..=self.total_len).contains(&position),
            "position {position} outside 1..={}",
            self.total_len
        );
        match self.mode {
            EncodingMode::None => None,
            EncodingMode::Orpe if position <= self.prompt_len => None,
            _ => Some(self.total_len + 1 - position + self.shift),
        }
    }

    /// Countdown indices for positions `1..=L`.
    pub fn indices(&self) -> Vec<Option<usize>> {
        (1..=self.total_len).map(|p| self.index_at(p)).collect()
    }
}

/// Free-function form of [`CountdownPlan::indices`].
pub fn countdown_indices(plan: &CountdownPlan) -> Vec<Option<usize>> {
    plan.indices()
}

fn check_width(d: usize) -> Result<(), EncodingError> {
    if d == 0 || d % 2 != 0 {
        return Err(EncodingError::InvalidDimension(d));
    }
    Ok(())
}

/// Writes the sinusoid for index `i` into `out` (`out.len()` is the width).
fn write_sinusoid<T: Scalar>(i: usize, out: &mut [T]) {
    let d = out.len() as f64;
    for (k, pair) in out.chunks_exact_mut(2).enumerate() {
        let angle = i as f64 / SINUSOID_BASE.powf(2.0 * k as f64 / d);
        pair[0] = T::from_f64_lossy(angle.sin());
        pair[1] = T::from_f64_lossy(angle.cos());
    }
}

/// Standard sinusoidal encoding row: component `2k` is
/// `sin(i / 10000^(2k/d))` and `2k + 1` the matching cosine.
pub fn sinusoidal_row<T: Scalar>(i: usize, d: usize) -> Result<Vec<T>, EncodingError> {
    check_width(d)?;
    let mut row = vec![T::zero(); d];
    write_sinusoid(i, &mut row);
    Ok(row)
}

/// Row-major `L x d` encoding matrix of a plan; absent positions are zero rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodingMatrix<T> {
    rows: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> EncodingMatrix<T> {
    pub fn from_plan(plan: &CountdownPlan, width: usize) -> Result<Self, EncodingError> {
        check_width(width)?;
        let rows = plan.total_len();
        let mut data = vec![T::zero(); rows * width];
        for (row, index) in data.chunks_exact_mut(width).zip(plan.indices()) {
            if let Some(i) = index {
                write_sinusoid(i, row);
            }
        }
        Ok(Self { rows, width, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.width..(r + 1) * self.width]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Norm every non-zero row has: `sqrt(d / 2)`.
    pub fn row_norm_target(&self) -> f64 {
        (self.width as f64 / 2.0).sqrt()
    }

    pub fn frobenius_norm(&self) -> T {
        frobenius(&self.data)
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| v.is_zero())
    }
}

pub(crate) fn frobenius<T: Scalar>(m: &[T]) -> T {
    m.iter().map(|&v| v * v).sum::<T>().sqrt()
}

/// Factor `||E||_F / ||R||_F` that brings the encoding to the embedding's norm.
pub fn scale_factor<T: Scalar>(encoding: &[T], embedding: &[T]) -> Result<T, EncodingError> {
    if encoding.len() != embedding.len() {
        return Err(EncodingError::ShapeMismatch(encoding.len(), embedding.len()));
    }
    let r = frobenius(encoding);
    if r.is_zero() {
        return Err(EncodingError::DegenerateEncoding);
    }
    let e = frobenius(embedding);
    if e.is_zero() {
        return Err(EncodingError::DegenerateEmbedding);
    }
    Ok(e / r)
}

/// `R' = R * ||E||_F / ||R||_F`.
pub fn scale_encoding<T: Scalar>(encoding: &EncodingMatrix<T>, embedding: &[T]) -> Result<EncodingMatrix<T>, EncodingError> {
    let f = scale_factor(&encoding.data, embedding)?;
    Ok(EncodingMatrix {
        rows: encoding.rows,
        width: encoding.width,
        data: encoding.data.iter().map(|&v| v * f).collect(),
    })
}

/// `E + R'` for a row-major `L x d` embedding matrix. Mode `None` returns
/// the embeddings untouched without building any encoding.
pub fn inject<T: Scalar>(embedding: &[T], plan: &CountdownPlan, width: usize) -> Result<Vec<T>, EncodingError> {
    if plan.mode() == EncodingMode::None {
        return Ok(embedding.to_vec());
    }
    let r = EncodingMatrix::from_plan(plan, width)?;
    if embedding.len() != r.data.len() {
        return Err(EncodingError::ShapeMismatch(r.data.len(), embedding.len()));
    }
    let scaled = scale_encoding(&r, embedding)?;
    Ok(embedding.iter().zip(&scaled.data).map(|(&e, &s)| e + s).collect())
}

/// One draw of `|z|` with `z ~ N(0, sigma^2)`.
pub fn half_normal<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    z.abs() * sigma
}

/// Truncated, rounded half-normal shift: `min(round(|z|), max_shift)` with
/// `z ~ N(0, sigma^2)`.
pub fn sample_shift<R: Rng + ?Sized>(sigma: f64, max_shift: usize, rng: &mut R) -> usize {
    if sigma <= 0.0 {
        return 0;
    }
    let s = half_normal(sigma, rng).round();
    if s >= max_shift as f64 {
        max_shift
    } else {
        s as usize
    }
}

/// Exponential growth of the shift scale over training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub sigma0: f64,
    pub sigma_max: f64,
    pub total_steps: usize,
    pub max_shift: usize,
}

impl CurriculumSchedule {
    pub fn new(sigma0: f64, sigma_max: f64, total_steps: usize, max_shift: usize) -> Result<Self, EncodingError> {
        let s = Self {
            sigma0,
            sigma_max,
            total_steps,
            max_shift,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), EncodingError> {
        if !(self.sigma0 > 0.0) || !self.sigma0.is_finite() {
            return Err(EncodingError::InvalidSchedule(format!("sigma0 = {} must be positive", self.sigma0)));
        }
        if !(self.sigma_max >= self.sigma0) || !self.sigma_max.is_finite() {
            return Err(EncodingError::InvalidSchedule(format!(
                "sigma_max = {} must be >= sigma0 = {}",
                self.sigma_max, self.sigma0
            )));
        }
        if self.total_steps == 0 {
            return Err(EncodingError::InvalidSchedule("total steps must be positive".into()));
        }
        if self.max_shift == 0 {
            return Err(EncodingError::InvalidSchedule("max shift must be at least 1".into()));
        }
        Ok(())
    }

    /// `sigma0 * exp((t / T) * ln(sigma_max / sigma0))`.
    pub fn sigma(&self, step: usize) -> Result<f64, EncodingError> {
        curriculum_sigma(step, self)
    }
}

pub fn curriculum_sigma(step: usize, schedule: &CurriculumSchedule) -> Result<f64, EncodingError> {
    schedule.validate()?;
    if step > schedule.total_steps {
        return Err(EncodingError::StepOutOfRange {
            step,
            total: schedule.total_steps,
        });
    }
    if step == schedule.total_steps {
        return Ok(schedule.sigma_max);
    }
    let frac = step as f64 / schedule.total_steps as f64;
    Ok(schedule.sigma0 * (frac * (schedule.sigma_max / schedule.sigma0).ln()).exp())
}
