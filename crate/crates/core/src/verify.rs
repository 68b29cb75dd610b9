//! Self-checks run by `lbl verify`: structural properties of the
//! encoding and model, and finite-difference gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::data::{make_example, TrainingExample};
use crate::encoding::{
    half_normal, scale_encoding, CountdownPlan, CurriculumSchedule, EncodingMatrix, EncodingMode,
};
use crate::model::{build_logits, forward_scaled, rope_rotate, ModelConfig, ParamVars, Parameters};
use crate::tensor::kernels::softmax_rows;
use crate::tensor::{Graph, Tensor, TensorError, Var};
use crate::training::batch_loss_step;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    fn push(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(CheckResult {
            name: name.to_string(),
            passed,
            detail,
        });
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

/// Sinusoid row evaluated straight from the closed form.
fn reference_row(i: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|c| {
            let k = (c / 2) as f64;
            let angle = i as f64 / 10_000f64.powf(2.0 * k / d as f64);
            if c % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_plan_dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    let n = rng.random_range(1..12);
    let len = n + rng.random_range(1..150);
    let d = 2 * rng.random_range(1..40);
    (n, len, d)
}

/// LDPE rows are the ordinary forward sinusoid table read bottom-up.
fn check_reversal(rng: &mut ChaCha8Rng) -> (bool, String) {
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (n, len, d) = random_plan_dims(rng);
        let plan = CountdownPlan::exact(EncodingMode::Ldpe, n, len).unwrap();
        let r = EncodingMatrix::<f64>::from_plan(&plan, d).unwrap();
        let forward: Vec<Vec<f64>> = (1..=len).map(|i| reference_row(i, d)).collect();
        for i in 0..len {
            worst = worst.max(max_abs_diff(r.row(i), &forward[len - 1 - i]));
        }
    }
    (worst < 1e-12, format!("max |LDPE - flip(PE)| = {worst:.2e}"))
}

/// ORPE is a zero prompt block stacked on the LDPE response block.
fn check_orpe_block(rng: &mut ChaCha8Rng) -> (bool, String) {
    let mut worst = 0.0f64;
    let mut prompt_nonzero = 0usize;
    for _ in 0..100 {
        let (n, len, d) = random_plan_dims(rng);
        let orpe = EncodingMatrix::<f64>::from_plan(&CountdownPlan::exact(EncodingMode::Orpe, n, len).unwrap(), d).unwrap();
        let ldpe = EncodingMatrix::<f64>::from_plan(&CountdownPlan::exact(EncodingMode::Ldpe, n, len).unwrap(), d).unwrap();
        for i in 0..n {
            prompt_nonzero += orpe.row(i).iter().filter(|v| **v != 0.0).count();
        }
        for i in n..len {
            worst = worst.max(max_abs_diff(orpe.row(i), ldpe.row(i)));
            worst = worst.max(max_abs_diff(orpe.row(i), &reference_row(len - i, d)));
        }
    }
    (
        prompt_nonzero == 0 && worst < 1e-12,
        format!("non-zero prompt entries {prompt_nonzero}, max response-block diff {worst:.2e}"),
    )
}

fn check_row_norms(rng: &mut ChaCha8Rng) -> (bool, String) {
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (n, len, d) = random_plan_dims(rng);
        let shift = rng.random_range(0..300);
        let plan = CountdownPlan::new(EncodingMode::Ldpe, n, len, shift).unwrap();
        let r = EncodingMatrix::<f64>::from_plan(&plan, d).unwrap();
        let target = (d as f64 / 2.0).sqrt();
        for i in 0..len {
            let norm = r.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            worst = worst.max(rel(norm, target));
        }
    }
    (worst < 1e-6, format!("max relative row-norm error {worst:.2e}"))
}

fn check_frobenius_scaling(rng: &mut ChaCha8Rng) -> (bool, String) {
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (n, len, d) = random_plan_dims(rng);
        let mode = if rng.random() { EncodingMode::Ldpe } else { EncodingMode::Orpe };
        let plan = CountdownPlan::exact(mode, n, len).unwrap();
        let r = EncodingMatrix::<f64>::from_plan(&plan, d).unwrap();
        let spread: f64 = rng.random_range(0.01..5.0);
        let e: Vec<f64> = (0..len * d).map(|_| rng.sample::<f64, _>(StandardNormal) * spread).collect();
        let scaled = scale_encoding(&r, &e).unwrap();
        let e_norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(rel(scaled.frobenius_norm(), e_norm));
    }
    (worst < 1e-6, format!("max relative ||R'|| vs ||E|| error {worst:.2e}"))
}

fn check_half_normal(rng: &mut ChaCha8Rng) -> (bool, String) {
    const N: usize = 1_000_000;
    let sigma = 3.7;
    let mut sum = 0.0;
    for _ in 0..N {
        sum += half_normal(sigma, rng);
    }
    let mean = sum / N as f64;
    let expected = sigma * (2.0 / std::f64::consts::PI).sqrt();
    let se = sigma * (1.0 - 2.0 / std::f64::consts::PI).sqrt() / (N as f64).sqrt();
    let z = (mean - expected) / se;
    (z.abs() <= 3.0, format!("mean {mean:.5} vs {expected:.5} ({z:+.2} SE)"))
}

fn check_curriculum() -> (bool, String) {
    let cases = [(0.1, 256.0, 10_000usize), (0.1, 2048.0, 777), (0.5, 0.5, 3), (1.0, 64.0, 1)];
    let mut endpoints = true;
    let mut worst = 0.0f64;
    for (s0, smax, total) in cases {
        let sched = CurriculumSchedule::new(s0, smax, total, 256).unwrap();
        endpoints &= sched.sigma(0).unwrap() == s0 && sched.sigma(total).unwrap() == smax;
        let slope = (smax / s0).ln();
        for t in 0..=total {
            let got = sched.sigma(t).unwrap().ln() - s0.ln();
            let want = t as f64 / total as f64 * slope;
            if want != 0.0 {
                worst = worst.max(rel(got, want));
            } else {
                worst = worst.max(got.abs());
            }
        }
    }
    (
        endpoints && worst < 1e-9,
        format!("endpoints exact: {endpoints}, max log-linearity error {worst:.2e}"),
    )
}

/// Attention scores of rotated vectors depend only on the offset.
fn check_rope_relative(rng: &mut ChaCha8Rng) -> (bool, String) {
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let hd = 2 * rng.random_range(1..17);
        let q: Vec<f64> = (0..hd).map(|_| rng.sample(StandardNormal)).collect();
        let k: Vec<f64> = (0..hd).map(|_| rng.sample(StandardNormal)).collect();
        let (m, n, s) = (
            rng.random_range(0..300),
            rng.random_range(0..300),
            rng.random_range(0..300),
        );
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let base = dot(&rope_rotate(&q, m, 10_000.0).unwrap(), &rope_rotate(&k, n, 10_000.0).unwrap());
        let moved = dot(
            &rope_rotate(&q, m + s, 10_000.0).unwrap(),
            &rope_rotate(&k, n + s, 10_000.0).unwrap(),
        );
        worst = worst.max((base - moved).abs());
    }
    (worst < 1e-5, format!("max |<q_m,k_n> - <q_m+s,k_n+s>| = {worst:.2e}"))
}

/// Perturbing token `p` leaves logits at earlier positions unchanged.
/// Runs without encoding and with a fixed encoding scale: the
/// per-sequence norm ratio couples all positions through one scalar.
fn check_causality(rng: &mut ChaCha8Rng) -> (bool, String) {
    let cfg = ModelConfig {
        vocab_size: 30,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq: 32,
        rope_base: 10_000.0,
    };
    let params = Parameters::<f64>::init(cfg, rng.random()).unwrap();
    let mut worst = 0.0f64;
    for trial in 0..50 {
        let len = rng.random_range(3..24);
        let mut tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..30)).collect();
        let (mode, scale) = if trial % 2 == 0 {
            (EncodingMode::None, None)
        } else {
            (EncodingMode::Ldpe, Some(rng.random_range(0.1..2.0)))
        };
        let plan = CountdownPlan::exact(mode, 1, len).unwrap();
        let before = forward_scaled(&params, &tokens, &plan, scale).unwrap();
        let p = rng.random_range(1..len);
        tokens[p] = (tokens[p] + rng.random_range(1..30)) % 30;
        let after = forward_scaled(&params, &tokens, &plan, scale).unwrap();
        let v = cfg.vocab_size;
        worst = worst.max(max_abs_diff(&before.data()[..p * v], &after.data()[..p * v]));
    }
    (worst < 1e-12, format!("max change at earlier positions {worst:.2e} over 50 perturbations"))
}

fn check_softmax(rng: &mut ChaCha8Rng) -> (bool, String) {
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..40);
        let spread: f32 = rng.random_range(0.1..50.0);
        let x: Vec<f32> = (0..n * n).map(|_| rng.sample::<f32, _>(StandardNormal) * spread).collect();
        for causal in [false, true] {
            let y = softmax_rows(&x, n, causal);
            for row in y.chunks_exact(n) {
                let s: f64 = row.iter().map(|&v| v as f64).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
    }
    (worst < 1e-6, format!("max |row sum - 1| = {worst:.2e} (f32)"))
}

/// Structural properties of the encoding, curriculum, rotary attention,
/// causal masking and softmax.
pub fn property_suite(seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport::default();
    let (ok, d) = check_reversal(&mut rng);
    report.push("encoding reversal identity", ok, d);
    let (ok, d) = check_orpe_block(&mut rng);
    report.push("ORPE block identity", ok, d);
    let (ok, d) = check_row_norms(&mut rng);
    report.push("constant row norm sqrt(d/2)", ok, d);
    let (ok, d) = check_frobenius_scaling(&mut rng);
    report.push("Frobenius scaling norm match", ok, d);
    let (ok, d) = check_half_normal(&mut rng);
    report.push("half-normal mean", ok, d);
    let (ok, d) = check_curriculum();
    report.push("curriculum endpoints and log-linearity", ok, d);
    let (ok, d) = check_rope_relative(&mut rng);
    report.push("RoPE relative-position identity", ok, d);
    let (ok, d) = check_causality(&mut rng);
    report.push("causality", ok, d);
    let (ok, d) = check_softmax(&mut rng);
    report.push("softmax normalization", ok, d);
    report
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
const FD_FLOOR: f64 = 1e-6;

/// Largest elementwise `|a - n| / max(|a|, |n|, floor)` between analytic
/// and central-difference gradients of `loss` at `inputs`.
pub fn gradient_error<F>(inputs: &[Tensor<f64>], loss: F) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = loss(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |point: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = point.iter().map(|t| g.input(t.clone())).collect();
        let out = loss(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut point = inputs.to_vec();
    let mut worst = 0.0f64;
    for (ti, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = point[ti].data()[j];
            point[ti].data_mut()[j] = orig + FD_STEP;
            let up = eval(&point)?;
            point[ti].data_mut()[j] = orig - FD_STEP;
            let down = eval(&point)?;
            point[ti].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal) * scale)
}

/// `sum(y ⊙ w)` for a fixed random `w`, so every output entry carries a
/// distinct weight.
fn weighted_sum(g: &mut Graph<f64>, y: Var, rng_seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let shape = g.value(y).shape().to_vec();
    let w = g.input(randn(&mut rng, shape, 1.0));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type OpCase = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>>);

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let mut cases: Vec<OpCase> = Vec::new();
    let a = randn(rng, vec![4, 5], 1.0);
    let b = randn(rng, vec![5, 3], 1.0);
    cases.push((
        "matmul",
        vec![a.clone(), b],
        Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted_sum(g, y, 1)
        }),
    ));
    let bt = randn(rng, vec![6, 5], 1.0);
    cases.push((
        "matmul_t",
        vec![a.clone(), bt],
        Box::new(|g, v| {
            let y = g.matmul_t(v[0], v[1])?;
            weighted_sum(g, y, 2)
        }),
    ));
    let a2 = randn(rng, vec![4, 5], 1.0);
    cases.push((
        "add",
        vec![a.clone(), a2.clone()],
        Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            weighted_sum(g, y, 3)
        }),
    ));
    cases.push((
        "mul",
        vec![a.clone(), a2],
        Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted_sum(g, y, 4)
        }),
    ));
    let bias = randn(rng, vec![5], 1.0);
    cases.push((
        "add_bias",
        vec![a.clone(), bias],
        Box::new(|g, v| {
            let y = g.add_bias(v[0], v[1])?;
            weighted_sum(g, y, 5)
        }),
    ));
    cases.push((
        "scale",
        vec![a.clone()],
        Box::new(|g, v| {
            let y = g.scale(v[0], -1.7);
            weighted_sum(g, y, 6)
        }),
    ));
    let s = randn(rng, vec![1], 1.0);
    cases.push((
        "mul_scalar",
        vec![a.clone(), s],
        Box::new(|g, v| {
            let y = g.mul_scalar(v[0], v[1])?;
            weighted_sum(g, y, 7)
        }),
    ));
    cases.push((
        "frobenius_norm",
        vec![a.clone()],
        Box::new(|g, v| {
            let n = g.frobenius_norm(v[0]);
            let y = g.mul(n, n)?;
            let y = g.add(y, n)?;
            Ok(g.sum(y))
        }),
    ));
    cases.push((
        "sum",
        vec![a.clone()],
        Box::new(|g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum(sq))
        }),
    ));
    cases.push((
        "gelu",
        vec![randn(rng, vec![4, 5], 2.0)],
        Box::new(|g, v| {
            let y = g.gelu(v[0]);
            weighted_sum(g, y, 8)
        }),
    ));
    for causal in [false, true] {
        cases.push((
            if causal { "softmax (causal)" } else { "softmax" },
            vec![randn(rng, vec![5, 5], 1.5)],
            Box::new(move |g, v| {
                let y = g.softmax(v[0], causal)?;
                weighted_sum(g, y, 9)
            }),
        ));
    }
    let gain = randn(rng, vec![6], 1.0);
    let lb = randn(rng, vec![6], 1.0);
    cases.push((
        "layer_norm",
        vec![randn(rng, vec![3, 6], 1.0), gain, lb],
        Box::new(|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            weighted_sum(g, y, 10)
        }),
    ));
    cases.push((
        "embedding",
        vec![randn(rng, vec![7, 4], 1.0)],
        Box::new(|g, v| {
            let y = g.embedding(v[0], &[3, 0, 3, 6, 1])?;
            weighted_sum(g, y, 11)
        }),
    ));
    cases.push((
        "rope",
        vec![randn(rng, vec![5, 8], 1.0)],
        Box::new(|g, v| {
            let y = g.rope(v[0], &[0, 1, 2, 7, 40], 4, 10_000.0)?;
            weighted_sum(g, y, 12)
        }),
    ));
    cases.push((
        "slice_cols",
        vec![a.clone()],
        Box::new(|g, v| {
            let y = g.slice_cols(v[0], 1, 3)?;
            weighted_sum(g, y, 13)
        }),
    ));
    cases.push((
        "concat_cols",
        vec![a.clone(), randn(rng, vec![4, 2], 1.0)],
        Box::new(|g, v| {
            let y = g.concat_cols(&[v[1], v[0], v[1]])?;
            weighted_sum(g, y, 14)
        }),
    ));
    cases.push((
        "cross_entropy",
        vec![randn(rng, vec![5, 7], 2.0)],
        Box::new(|g, v| g.cross_entropy(v[0], &[1, 6, 0, 3, 3], &[true, false, true, true, true])),
    ));
    cases
}

fn model_loss_error(config: ModelConfig, mode: EncodingMode, seed: u64) -> Result<f64, String> {
    use crate::data::{gen_sample, LengthRange, Task, TaskSpace};
    let params = Parameters::<f64>::init(config, seed).map_err(|e| e.to_string())?;
    let space = TaskSpace {
        vocab_size: config.vocab_size,
        max_seq: config.max_seq,
    };
    let pair = gen_sample(Task::Motif, seed, LengthRange::new(4, 6), space).map_err(|e| e.to_string())?;
    let ex: TrainingExample = make_example(&pair, mode, 0, false).map_err(|e| e.to_string())?;

    let (_, analytic) = batch_loss_step(&params, std::slice::from_ref(&ex)).map_err(|e| e.to_string())?;
    let loss_at = |p: &Parameters<f64>| -> Result<f64, String> {
        let mut g = Graph::new();
        let vars = ParamVars::frozen(&mut g, p);
        let logits = build_logits(&mut g, &vars, p.config(), &ex.tokens, &ex.plan).map_err(|e| e.to_string())?;
        let (targets, mask) = ex.shifted_targets();
        let ce = g.cross_entropy(logits, &targets, &mask).map_err(|e| e.to_string())?;
        Ok(g.value(ce).item())
    };
    let mut p = params.clone();
    let mut worst = 0.0f64;
    for (ti, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = p.tensors()[ti].data()[j];
            p.tensors_mut()[ti].data_mut()[j] = orig + FD_STEP;
            let up = loss_at(&p)?;
            p.tensors_mut()[ti].data_mut()[j] = orig - FD_STEP;
            let down = loss_at(&p)?;
            p.tensors_mut()[ti].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR));
        }
    }
    Ok(worst)
}

fn mlp_error(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let dims = [6, 10, 8, 5];
    let mut inputs = vec![randn(rng, vec![4, dims[0]], 1.0)];
    for w in dims.windows(2) {
        inputs.push(randn(rng, vec![w[0], w[1]], 1.0 / (w[0] as f64).sqrt()));
        inputs.push(randn(rng, vec![w[1]], 0.1));
    }
    gradient_error(&inputs, |g, v| {
        let mut h = v[0];
        for layer in 0..3 {
            h = g.matmul(h, v[1 + 2 * layer])?;
            h = g.add_bias(h, v[2 + 2 * layer])?;
            if layer < 2 {
                h = g.gelu(h);
            }
        }
        g.cross_entropy(h, &[0, 4, 2, 1], &[true; 4])
    })
}

/// Central finite differences (64-bit) against reverse-mode gradients for
/// every op, a random MLP, and a 2-layer model through the encoding path.
pub fn gradient_suite(seed: u64) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SuiteReport::default();
    for (name, inputs, f) in op_cases(&mut rng) {
        match gradient_error(&inputs, f) {
            Ok(err) => report.push(name, err < FD_TOLERANCE, format!("max relative error {err:.2e}")),
            Err(e) => report.push(name, false, e.to_string()),
        }
    }
    match mlp_error(&mut rng) {
        Ok(err) => report.push("3-layer MLP", err < FD_TOLERANCE, format!("max relative error {err:.2e}")),
        Err(e) => report.push("3-layer MLP", false, e.to_string()),
    }
    let config = ModelConfig {
        vocab_size: 24,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq: 32,
        rope_base: 10_000.0,
    };
    for (label, mode) in [
        ("2-layer model, LDPE injection", EncodingMode::Ldpe),
        ("2-layer model, ORPE injection", EncodingMode::Orpe),
        ("2-layer model, no encoding", EncodingMode::None),
    ] {
        match model_loss_error(config, mode, seed) {
            Ok(err) => report.push(label, err < FD_TOLERANCE, format!("max relative error {err:.2e}")),
            Err(e) => report.push(label, false, e),
        }
    }
    report
}
