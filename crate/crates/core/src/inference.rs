//! Countdown-aware autoregressive decoding with a KV cache.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CONTENT_START, EOS};
use crate::encoding::{sinusoidal_row, CountdownPlan, EncodingError, EncodingMode};
use crate::model::{KvCache, ModelError, Parameters};
use crate::tensor::kernels::softmax_in_place;
use crate::tensor::Scalar;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("invalid request: {0}")]
    Request(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenMode {
    Ldpe,
    Orpe,
    None,
    /// Upper-bound control: LDPE countdown with the token limit as target.
    MntppLimit,
}

impl GenMode {
    pub fn encoding(self) -> EncodingMode {
        match self {
            Self::Ldpe | Self::MntppLimit => EncodingMode::Ldpe,
            Self::Orpe => EncodingMode::Orpe,
            Self::None => EncodingMode::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum DecodePolicy {
    #[default]
    Greedy,
    Temperature {
        tau: f64,
    },
}

/// How the encoding-to-embedding norm ratio is obtained while decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ScalePolicy {
    /// Computed once (from the prompt for LDPE, after the first response
    /// token for ORPE) and reused with the KV cache.
    #[default]
    Frozen,
    /// Recomputed from every token seen so far, with a full forward pass
    /// per step and no cache.
    PerStep,
    /// Decoded with a fixed factor, then redecoded with the factor the
    /// finished sequence would get in training (response rows projected to
    /// the planned length), until the tokens stop changing.
    Consistent,
}

/// Redecode limit for [`ScalePolicy::Consistent`].
pub const MAX_CONSISTENCY_ROUNDS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GenerationRequest {
    pub prompt_tokens: Vec<u32>,
    /// Response tokens including EOS (the token limit for `mntpp-limit`).
    pub target_length: usize,
    pub mode: GenMode,
    #[serde(default)]
    pub decode_policy: DecodePolicy,
    /// Defaults to `ceil(1.5 * target_length)`.
    #[serde(default)]
    pub hard_cap: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl GenerationRequest {
    pub fn greedy(prompt_tokens: Vec<u32>, target_length: usize, mode: GenMode) -> Self {
        Self {
            prompt_tokens,
            target_length,
            mode,
            decode_policy: DecodePolicy::Greedy,
            hard_cap: None,
            seed: 0,
        }
    }

    pub fn effective_hard_cap(&self) -> usize {
        self.hard_cap.unwrap_or_else(|| default_hard_cap(self.target_length, 1.5))
    }
}

pub fn default_hard_cap(target: usize, factor: f64) -> usize {
    ((target as f64) * factor).ceil() as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub realized_length: usize,
    pub truncated: bool,
    pub scale_factor: Option<f64>,
    /// Countdown index of every injected input row, in position order.
    pub index_trace: Vec<Option<usize>>,
    /// Number of sinusoid rows requested from the encoding module.
    pub encoding_lookups: usize,
    /// Under [`ScalePolicy::Consistent`] with an encoding: whether the
    /// returned tokens reproduce themselves under the returned factor.
    pub fixed_point: Option<bool>,
}

/// Countdown index of the row at response step `j` (1-based), clamped at
/// 1 once the target is overrun.
pub fn step_encoding_index(target_length: usize, j: usize) -> usize {
    if j >= target_length {
        1
    } else {
        target_length - j + 1
    }
}

#[derive(Clone)]
struct Injector {
    mode: EncodingMode,
    plan: CountdownPlan,
    target: usize,
    width: usize,
    lookups: usize,
    trace: Vec<Option<usize>>,
}

impl Injector {
    /// Countdown index at 1-based `position`, clamping overrun positions.
    fn index(&self, position: usize) -> Option<usize> {
        let n = self.plan.prompt_len();
        if position > n {
            match self.mode {
                EncodingMode::None => None,
                _ => Some(step_encoding_index(self.target, position - n)),
            }
        } else {
            self.plan.index_at(position)
        }
    }

    /// Adds `factor` times the encoding row of `position` to `row`.
    fn add<T: Scalar>(&mut self, row: &mut [T], position: usize, factor: f64, record: bool) -> Result<(), EncodingError> {
        let idx = self.index(position);
        if record {
            self.trace.push(idx);
        }
        if let Some(i) = idx {
            self.lookups += 1;
            let r = sinusoidal_row::<T>(i, self.width)?;
            let f = T::from_f64_lossy(factor);
            row.iter_mut().zip(r).for_each(|(x, r)| *x += r * f);
        }
        Ok(())
    }

    /// `‖R‖_F` of the full plan, without consulting the sinusoid table.
    fn full_norm(&self) -> f64 {
        let rows = self.plan.indices().iter().filter(|i| i.is_some()).count();
        (rows as f64 * self.width as f64 / 2.0).sqrt()
    }
}

fn sum_squares<T: Scalar>(x: &[T]) -> f64 {
    x.iter().map(|v| v.to_f64_lossy().powi(2)).sum()
}

/// Frozen factor: mean squared embedding row norm over the rows seen so
/// far, projected to the full planned length, against `‖R‖_F`.
fn projected_factor<T: Scalar>(emb: &[T], rows: usize, inj: &Injector) -> f64 {
    let total = inj.plan.total_len() as f64;
    let e = (sum_squares(emb) * total / rows as f64).sqrt();
    e / inj.full_norm()
}

/// Consistent factor: prompt rows as they are, response rows projected
/// from their mean squared norm to the planned response length. Projecting
/// the prompt rows too would tie a short decode to a large factor.
fn response_projected_factor<T: Scalar>(prompt_emb: &[T], resp_emb: &[T], resp_rows: usize, inj: &Injector) -> f64 {
    let planned = (inj.plan.total_len() - inj.plan.prompt_len()) as f64;
    let e2 = sum_squares(prompt_emb) + sum_squares(resp_emb) * planned / resp_rows as f64;
    e2.sqrt() / inj.full_norm()
}

fn pick<T: Scalar>(logits: &[T], policy: DecodePolicy, rng: &mut ChaCha8Rng) -> u32 {
    match policy {
        DecodePolicy::Greedy => argmax(logits) as u32,
        DecodePolicy::Temperature { tau } => {
            let mut p: Vec<f64> = logits.iter().map(|v| v.to_f64_lossy() / tau).collect();
            softmax_in_place(&mut p);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, q) in p.iter().enumerate() {
                acc += q;
                if u < acc {
                    return i as u32;
                }
            }
            (p.len() - 1) as u32
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(x: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

pub fn generate<T: Scalar>(params: &Parameters<T>, request: &GenerationRequest) -> Result<Generation, InferenceError> {
    generate_with(params, request, ScalePolicy::Frozen)
}

pub fn generate_with<T: Scalar>(
    params: &Parameters<T>,
    request: &GenerationRequest,
    policy: ScalePolicy,
) -> Result<Generation, InferenceError> {
    let cfg = *params.config();
    let prompt = &request.prompt_tokens;
    let n = prompt.len();
    let target = request.target_length;
    let cap = request.effective_hard_cap();
    if n == 0 || target == 0 {
        return Err(InferenceError::Request("prompt and target length must be non-empty".into()));
    }
    if cap < target {
        return Err(InferenceError::Request(format!("hard cap {cap} below target {target}")));
    }
    if let DecodePolicy::Temperature { tau } = request.decode_policy {
        if !(tau > 0.0) {
            return Err(InferenceError::Request(format!("temperature {tau} must be positive")));
        }
    }
    // the final token is never fed back, so the context holds n + cap - 1
    if n + target > cfg.max_seq || n + cap - 1 > cfg.max_seq {
        return Err(ModelError::Length {
            len: n + cap - 1,
            max: cfg.max_seq,
        }
        .into());
    }
    let mode = request.mode.encoding();
    let mut inj = Injector {
        mode,
        plan: CountdownPlan::exact(mode, n, n + target)?,
        target,
        width: cfg.d_model,
        lookups: 0,
        trace: Vec::with_capacity(n + cap),
    };
    let d = cfg.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
    let mut tokens: Vec<u32> = Vec::with_capacity(cap);

    match policy {
        ScalePolicy::Frozen => {
            let factor = match mode {
                EncodingMode::Ldpe => {
                    let rn = (n as f64 * d as f64 / 2.0).sqrt();
                    Some(sum_squares(&params.embed(prompt)?).sqrt() / rn)
                }
                _ => None,
            };
            let (tokens, factor) = decode_cached(params, request, &mut inj, factor, cap)?;
            finish(tokens, cap, factor, inj, None)
        }
        ScalePolicy::Consistent => {
            if mode == EncodingMode::None {
                let (tokens, _) = decode_cached(params, request, &mut inj, None, cap)?;
                return finish(tokens, cap, None, inj, None);
            }
            let prompt_emb = params.embed(prompt)?;
            // first guess: every planned response row at the mean content row
            let content: Vec<u32> = (CONTENT_START..cfg.vocab_size as u32).collect();
            let mut factor = response_projected_factor(&prompt_emb, &params.embed(&content)?, content.len(), &inj);
            let mut previous: Option<(Vec<u32>, f64)> = None;
            for _ in 0..MAX_CONSISTENCY_ROUNDS {
                let mut round = Injector {
                    lookups: 0,
                    trace: Vec::with_capacity(n + cap),
                    ..inj.clone()
                };
                let (tokens, _) = decode_cached(params, request, &mut round, Some(factor), cap)?;
                if previous.as_ref().is_some_and(|(p, _)| *p == tokens) {
                    return finish(tokens, cap, Some(factor), round, Some(true));
                }
                let next = response_projected_factor(&prompt_emb, &params.embed(&tokens)?, tokens.len(), &round);
                previous = Some((tokens, factor));
                inj = round;
                factor = next;
            }
            // no fixed point within the round limit: keep the last decode
            let (tokens, used) = previous.expect("at least one round");
            finish(tokens, cap, Some(used), inj, Some(false))
        }
        ScalePolicy::PerStep => {
            let mut seq = prompt.clone();
            let mut factor = None;
            loop {
                let emb = params.embed(&seq)?;
                let rows = seq.len();
                let mut x = emb.clone();
                if mode != EncodingMode::None {
                    let f = match mode {
                        // ORPE before the first response token has no
                        // encoded rows yet
                        EncodingMode::Orpe if rows == n => 0.0,
                        _ => projected_factor(&emb, rows, &inj),
                    };
                    factor = Some(f);
                    for (r, row) in x.chunks_exact_mut(d).enumerate() {
                        inj.add(row, r + 1, f, false)?;
                    }
                }
                let mut cache = KvCache::new(cfg.n_layers);
                let logits = params.forward_cached(&mut cache, &x)?.into_data();
                let next = pick(&logits[(rows - 1) * cfg.vocab_size..], request.decode_policy, &mut rng);
                tokens.push(next);
                seq.push(next);
                if next == EOS || tokens.len() >= cap {
                    break;
                }
            }
            inj.trace = (1..n + tokens.len()).map(|p| inj.index(p)).collect();
            finish(tokens, cap, factor, inj, None)
        }
    }
}

/// Incremental decode with the KV cache. With `factor` unset, ORPE takes
/// its factor from the prompt plus the first response token.
fn decode_cached<T: Scalar>(
    params: &Parameters<T>,
    request: &GenerationRequest,
    inj: &mut Injector,
    mut factor: Option<f64>,
    cap: usize,
) -> Result<(Vec<u32>, Option<f64>), InferenceError> {
    let cfg = params.config();
    let prompt = &request.prompt_tokens;
    let n = prompt.len();
    let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
    let mut tokens = Vec::with_capacity(cap);
    let mut cache = KvCache::new(cfg.n_layers);
    let mut emb = params.embed(prompt)?;
    let prompt_emb = emb.clone();
    for (r, row) in emb.chunks_exact_mut(cfg.d_model).enumerate() {
        inj.add(row, r + 1, factor.unwrap_or(0.0), true)?;
    }
    let logits = params.forward_cached(&mut cache, &emb)?.into_data();
    let mut last = logits[(n - 1) * cfg.vocab_size..].to_vec();
    loop {
        let next = pick(&last, request.decode_policy, &mut rng);
        tokens.push(next);
        if next == EOS || tokens.len() >= cap {
            break;
        }
        let mut row = params.embed(&[next])?;
        if inj.mode == EncodingMode::Orpe && factor.is_none() {
            let mut seen = prompt_emb.clone();
            seen.extend_from_slice(&row);
            factor = Some(projected_factor(&seen, n + 1, inj));
        }
        inj.add(&mut row, n + tokens.len(), factor.unwrap_or(0.0), true)?;
        last = params.forward_cached(&mut cache, &row)?.into_data();
    }
    Ok((tokens, factor))
}

fn finish(
    tokens: Vec<u32>,
    cap: usize,
    factor: Option<f64>,
    inj: Injector,
    fixed_point: Option<bool>,
) -> Result<Generation, InferenceError> {
    let truncated = tokens.last() != Some(&EOS) && tokens.len() >= cap;
    Ok(Generation {
        realized_length: tokens.len(),
        truncated,
        tokens,
        scale_factor: factor,
        index_trace: inj.trace,
        encoding_lookups: inj.lookups,
        fixed_point,
    })
}

/// One line of a batch-generation output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GenerationRecord {
    pub request: GenerationRequest,
    pub response_tokens: Vec<u32>,
    pub realized_length: usize,
    pub truncated: bool,
    pub scale_factor: Option<f64>,
}

pub fn read_requests(path: &Path) -> Result<Vec<GenerationRequest>, InferenceError> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| InferenceError::Json { line: i + 1, source })?);
    }
    Ok(out)
}

pub fn generate_batch<T: Scalar>(
    params: &Parameters<T>,
    requests: &[GenerationRequest],
    policy: ScalePolicy,
) -> Result<Vec<GenerationRecord>, InferenceError> {
    requests
        .iter()
        .map(|req| {
            let g = generate_with(params, req, policy)?;
            Ok(GenerationRecord {
                request: req.clone(),
                response_tokens: g.tokens,
                realized_length: g.realized_length,
                truncated: g.truncated,
                scale_factor: g.scale_factor,
            })
        })
        .collect()
}

pub fn write_records(path: &Path, records: &[GenerationRecord]) -> Result<(), InferenceError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|source| InferenceError::Json { line: 0, source })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
