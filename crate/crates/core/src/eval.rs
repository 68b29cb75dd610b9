//! Length-control evaluation: target sweeps, token-limit compliance,
//! content accuracy, and plot-ready outputs.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{continuation, parse_prompt, prompted_prompt, DataError, PromptResponsePair, Task, TaskSpace, EOS};
use crate::inference::{default_hard_cap, generate_with, GenMode, GenerationRequest, InferenceError, ScalePolicy};
use crate::model::Parameters;
use crate::tensor::Scalar;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no records to aggregate")]
    Empty,
    #[error("empty grid")]
    EmptyGrid,
    #[error("invalid grid '{0}' (expected start:stop:step)")]
    Grid(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// One generation outcome; also one row of the plot CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub mode: String,
    pub task: Task,
    pub target_len: usize,
    pub response_len: usize,
    pub truncated: bool,
    pub content_acc: f64,
}

/// A generation that errored; the sweep continues past it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFailure {
    pub prompt_index: usize,
    pub target_len: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinMae {
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
    pub mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub records: usize,
    pub truncated: usize,
    /// Mean |target - realized| over non-truncated records.
    pub mae: Option<f64>,
    pub median_abs_error: Option<f64>,
    /// MAE over every record, truncated ones counted at their capped
    /// length (a lower bound on their true error).
    pub mae_including_truncated: Option<f64>,
    pub bins: Vec<BinMae>,
    /// Fraction of records with realized length at most the target.
    pub compliance: f64,
    /// Token-weighted content accuracy over all records.
    pub content_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub aggregates: Aggregates,
    pub records: Vec<EvalRecord>,
    pub failures: Vec<SweepFailure>,
}

/// Mean absolute difference between paired targets and realized lengths.
pub fn mean_abs_error(targets: &[usize], realized: &[usize]) -> Result<f64, EvalError> {
    if targets.is_empty() || targets.len() != realized.len() {
        return Err(EvalError::Empty);
    }
    let sum: f64 = targets
        .iter()
        .zip(realized)
        .map(|(&t, &r)| (t as f64 - r as f64).abs())
        .sum();
    Ok(sum / targets.len() as f64)
}

/// Length MAE over the non-truncated records.
pub fn length_mae(records: &[EvalRecord]) -> Result<f64, EvalError> {
    let (t, r): (Vec<usize>, Vec<usize>) = records
        .iter()
        .filter(|r| !r.truncated)
        .map(|r| (r.target_len, r.response_len))
        .unzip();
    mean_abs_error(&t, &r)
}

/// Fraction of response tokens (EOS excluded) that match the task
/// continuation of `prompt`. An empty response scores 1.
pub fn content_accuracy(prompt: &[u32], response: &[u32], space: TaskSpace) -> Result<f64, EvalError> {
    let (hits, total) = content_hits(prompt, response, space)?;
    Ok(if total == 0 { 1.0 } else { hits as f64 / total as f64 })
}

fn content_hits(prompt: &[u32], response: &[u32], space: TaskSpace) -> Result<(usize, usize), EvalError> {
    parse_prompt(prompt)?;
    let body = match response.last() {
        Some(&EOS) => &response[..response.len() - 1],
        _ => response,
    };
    let want = continuation(prompt, body.len(), space)?;
    Ok((body.iter().zip(&want).filter(|(a, b)| a == b).count(), body.len()))
}

/// Linear-interpolation quantile of sorted data, `q` in [0, 1].
pub fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

pub const BIN_WIDTH: usize = 50;

/// Aggregates of `records`; `hits`/`tokens` carry the content tallies.
fn aggregate(records: &[EvalRecord], hits: usize, tokens: usize) -> Aggregates {
    let kept: Vec<&EvalRecord> = records.iter().filter(|r| !r.truncated).collect();
    let errs: Vec<f64> = kept
        .iter()
        .map(|r| (r.target_len as f64 - r.response_len as f64).abs())
        .collect();
    let mae = (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64);
    let median_abs_error = quantile(&sorted(errs), 0.5);
    let mae_including_truncated = (!records.is_empty()).then(|| {
        records
            .iter()
            .map(|r| (r.target_len as f64 - r.response_len as f64).abs())
            .sum::<f64>()
            / records.len() as f64
    });

    let mut bins = Vec::new();
    if let Some(max) = records.iter().map(|r| r.target_len).max() {
        let mut lo = 1;
        while lo <= max {
            let hi = lo + BIN_WIDTH - 1;
            let in_bin: Vec<f64> = kept
                .iter()
                .filter(|r| (lo..=hi).contains(&r.target_len))
                .map(|r| (r.target_len as f64 - r.response_len as f64).abs())
                .collect();
            bins.push(BinMae {
                lo,
                hi,
                count: in_bin.len(),
                mae: (!in_bin.is_empty()).then(|| in_bin.iter().sum::<f64>() / in_bin.len() as f64),
            });
            lo += BIN_WIDTH;
        }
    }
    let compliant = records.iter().filter(|r| r.response_len <= r.target_len).count();
    Aggregates {
        records: records.len(),
        truncated: records.len() - kept.len(),
        mae,
        median_abs_error,
        mae_including_truncated,
        bins,
        compliance: if records.is_empty() {
            0.0
        } else {
            compliant as f64 / records.len() as f64
        },
        content_accuracy: if tokens == 0 { 1.0 } else { hits as f64 / tokens as f64 },
    }
}

/// `start:stop:step`, inclusive of `stop` when reached.
pub fn parse_grid(s: &str) -> Result<Vec<usize>, EvalError> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || EvalError::Grid(s.to_string());
    if parts.len() != 3 {
        return Err(bad());
    }
    let nums: Vec<usize> = parts
        .iter()
        .map(|p| p.trim().parse().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    let (start, stop, step) = (nums[0], nums[1], nums[2]);
    if start == 0 || step == 0 || stop < start {
        return Err(bad());
    }
    Ok((start..=stop).step_by(step).collect())
}

/// Worker count: `LBL_THREADS` if set, else the available parallelism.
pub fn worker_count() -> usize {
    std::env::var("LBL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    pub mode: GenMode,
    /// Write the target length into the prompt (fine-tuned prompting
    /// baseline); generation then runs without encoding.
    pub prompted: bool,
    pub hard_cap_factor: f64,
    pub scale_policy: ScalePolicy,
    pub space: TaskSpace,
    pub threads: usize,
}

impl SweepOptions {
    pub fn new(mode: GenMode, space: TaskSpace) -> Self {
        Self {
            mode,
            prompted: false,
            hard_cap_factor: 1.5,
            scale_policy: ScalePolicy::Frozen,
            space,
            threads: 1,
        }
    }

    pub fn label(&self) -> &'static str {
        if self.prompted {
            return "prompted";
        }
        match self.mode {
            GenMode::Ldpe => "ldpe",
            GenMode::Orpe => "orpe",
            GenMode::None => "none",
            GenMode::MntppLimit => "mntpp",
        }
    }
}

type Outcome = Result<(EvalRecord, usize, usize), String>;

fn run_one<T: Scalar>(params: &Parameters<T>, pair: &PromptResponsePair, target: usize, opts: &SweepOptions) -> Outcome {
    let (prompt, mode) = if opts.prompted {
        (prompted_prompt(&pair.prompt, target), GenMode::None)
    } else {
        (pair.prompt.clone(), opts.mode)
    };
    let mut req = GenerationRequest::greedy(prompt, target, mode);
    req.hard_cap = Some(default_hard_cap(target, opts.hard_cap_factor));
    let g = generate_with(params, &req, opts.scale_policy).map_err(|e| e.to_string())?;
    let (hits, total) = content_hits(&pair.prompt, &g.tokens, opts.space).map_err(|e| e.to_string())?;
    let record = EvalRecord {
        mode: opts.label().to_string(),
        task: pair.task,
        target_len: target,
        response_len: g.realized_length,
        truncated: g.truncated,
        content_acc: if total == 0 { 1.0 } else { hits as f64 / total as f64 },
    };
    Ok((record, hits, total))
}

/// Generates a response for every prompt × target and aggregates the
/// outcomes. Per-record errors are itemized in `failures`.
pub fn sweep<T: Scalar>(
    params: &Parameters<T>,
    prompts: &[PromptResponsePair],
    grid: &[usize],
    opts: &SweepOptions,
) -> Result<EvalReport, EvalError> {
    if grid.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    let jobs: Vec<(usize, usize)> = (0..prompts.len())
        .flat_map(|p| grid.iter().map(move |&t| (p, t)))
        .collect();
    let threads = opts.threads.max(1).min(jobs.len().max(1));
    let mut outcomes: Vec<Outcome> = Vec::with_capacity(jobs.len());
    if threads == 1 {
        outcomes.extend(jobs.iter().map(|&(p, t)| run_one(params, &prompts[p], t, opts)));
    } else {
        let chunk = jobs.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = jobs
                .chunks(chunk)
                .map(|part| {
                    s.spawn(move || {
                        part.iter()
                            .map(|&(p, t)| run_one(params, &prompts[p], t, opts))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                outcomes.extend(h.join().expect("sweep worker panicked"));
            }
        });
    }

    let mut records = Vec::new();
    let mut failures = Vec::new();
    let (mut hits, mut tokens) = (0, 0);
    for (&(p, t), outcome) in jobs.iter().zip(outcomes) {
        match outcome {
            Ok((rec, h, n)) => {
                hits += h;
                tokens += n;
                records.push(rec);
            }
            Err(error) => failures.push(SweepFailure {
                prompt_index: p,
                target_len: t,
                error,
            }),
        }
    }
    Ok(EvalReport {
        mode: opts.label().to_string(),
        aggregates: aggregate(&records, hits, tokens),
        records,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitStats {
    pub limit: usize,
    pub count: usize,
    pub median: Option<f64>,
    pub p2_5: Option<f64>,
    pub p97_5: Option<f64>,
    pub compliance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplianceReport {
    pub compliance: f64,
    pub curve: Vec<LimitStats>,
    pub report: EvalReport,
}

/// Per-limit median and 2.5/97.5 percentiles of realized length.
pub fn limit_curve(records: &[EvalRecord], limits: &[usize]) -> Vec<LimitStats> {
    limits
        .iter()
        .map(|&limit| {
            let rows: Vec<&EvalRecord> = records.iter().filter(|r| r.target_len == limit).collect();
            let lens = sorted(rows.iter().map(|r| r.response_len as f64).collect());
            let ok = rows.iter().filter(|r| r.response_len <= limit).count();
            LimitStats {
                limit,
                count: rows.len(),
                median: quantile(&lens, 0.5),
                p2_5: quantile(&lens, 0.025),
                p97_5: quantile(&lens, 0.975),
                compliance: if rows.is_empty() { 0.0 } else { ok as f64 / rows.len() as f64 },
            }
        })
        .collect()
}

/// Token-limit sweep: the limit is used as the countdown target.
pub fn mnt_compliance<T: Scalar>(
    params: &Parameters<T>,
    prompts: &[PromptResponsePair],
    limits: &[usize],
    opts: &SweepOptions,
) -> Result<ComplianceReport, EvalError> {
    let opts = SweepOptions {
        mode: GenMode::MntppLimit,
        prompted: false,
        ..*opts
    };
    let report = sweep(params, prompts, limits, &opts)?;
    Ok(ComplianceReport {
        compliance: report.aggregates.compliance,
        curve: limit_curve(&report.records, limits),
        report,
    })
}

pub fn write_csv(path: &Path, records: &[EvalRecord]) -> Result<(), EvalError> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<EvalRecord>, EvalError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<EvalRecord>, _>>()?)
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), EvalError> {
    ensure_parent(path)?;
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<(), EvalError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Gnuplot script drawing target vs. response length per mode from the
/// plot CSV at `csv_name`.
pub fn gnuplot_scatter(csv_name: &str, modes: &[&str], out_name: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "set datafile separator ','");
    let _ = writeln!(s, "set terminal svg size 640,480");
    let _ = writeln!(s, "set output '{out_name}'");
    let _ = writeln!(s, "set xlabel 'target length (tokens)'");
    let _ = writeln!(s, "set ylabel 'response length (tokens)'");
    let _ = writeln!(s, "set key left top");
    let mut plots = vec!["x title 'target' with lines dt 2 lc 'gray'".to_string()];
    for m in modes {
        plots.push(format!(
            "'{csv_name}' using (strcol(1) eq '{m}' ? $3 : 1/0):4 skip 1 title '{m}' with points"
        ));
    }
    let _ = writeln!(s, "plot {}", plots.join(", \\\n     "));
    s
}

/// Gnuplot script for the limit vs. response-length curve with its
/// percentile band, read from a `limit,median,p2_5,p97_5` CSV.
pub fn gnuplot_limit(csv_name: &str, out_name: &str) -> String {
    format!(
        "set datafile separator ','\nset terminal svg size 640,480\nset output '{out_name}'\n\
         set xlabel 'token limit'\nset ylabel 'response length (tokens)'\nset key left top\n\
         plot '{csv_name}' using 1:3:4 skip 1 with filledcurves lc 'light-blue' title '95% interval', \\\n     \
         '' using 1:2 skip 1 with linespoints title 'median', \\\n     x with lines dt 2 lc 'gray' title 'limit'\n"
    )
}

pub fn write_limit_csv(path: &Path, curve: &[LimitStats]) -> Result<(), EvalError> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["limit", "median", "p2_5", "p97_5"])?;
    for c in curve {
        let f = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([c.limit.to_string(), f(c.median), f(c.p2_5), f(c.p97_5)])?;
    }
    w.flush()?;
    Ok(())
}

const PALETTE: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd"];

struct Frame {
    w: f64,
    h: f64,
    pad: f64,
    max: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        self.pad + v / self.max * (self.w - 2.0 * self.pad)
    }

    fn y(&self, v: f64) -> f64 {
        self.h - self.pad - v / self.max * (self.h - 2.0 * self.pad)
    }

    fn open(&self, xlabel: &str, ylabel: &str) -> String {
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
            w = self.w,
            h = self.h
        );
        let (x0, y0, x1, y1) = (self.x(0.0), self.y(0.0), self.x(self.max), self.y(self.max));
        let _ = writeln!(s, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>");
        let _ = writeln!(s, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>");
        let _ = writeln!(
            s,
            "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y1}\" stroke=\"gray\" stroke-dasharray=\"4 4\"/>"
        );
        let step = tick_step(self.max);
        let mut t = 0.0;
        while t <= self.max + 1e-9 {
            let _ = writeln!(
                s,
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{t}</text>",
                self.x(t),
                y0 + 16.0
            );
            let _ = writeln!(
                s,
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{t}</text>",
                x0 - 6.0,
                self.y(t) + 4.0
            );
            t += step;
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{xlabel}</text>",
            self.w / 2.0,
            self.h - 8.0
        );
        let _ = writeln!(
            s,
            "<text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.1})\">{ylabel}</text>",
            self.h / 2.0,
            self.h / 2.0
        );
        s
    }
}

fn tick_step(max: f64) -> f64 {
    let raw = max / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|&s| s >= raw)
        .unwrap_or(raw)
}

/// SVG scatter of target vs. response length, one colour per mode.
pub fn render_scatter_svg(records: &[EvalRecord]) -> String {
    let max = records
        .iter()
        .map(|r| r.target_len.max(r.response_len))
        .max()
        .unwrap_or(1) as f64;
    let frame = Frame {
        w: 640.0,
        h: 480.0,
        pad: 56.0,
        max: max.max(1.0),
    };
    let mut s = frame.open("target length (tokens)", "response length (tokens)");
    let mut modes: Vec<&str> = Vec::new();
    for r in records {
        if !modes.contains(&r.mode.as_str()) {
            modes.push(&r.mode);
        }
    }
    for (k, m) in modes.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        for r in records.iter().filter(|r| r.mode == *m) {
            let _ = writeln!(
                s,
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"2.5\" fill=\"{colour}\" fill-opacity=\"0.6\"/>",
                frame.x(r.target_len as f64),
                frame.y(r.response_len as f64)
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{colour}\">{m}</text>",
            frame.pad + 10.0,
            frame.pad + 16.0 * (k as f64 + 1.0)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// SVG of the per-limit median with its 2.5–97.5 percentile band.
pub fn render_limit_svg(curve: &[LimitStats]) -> String {
    let pts: Vec<(f64, f64, f64, f64)> = curve
        .iter()
        .filter_map(|c| Some((c.limit as f64, c.median?, c.p2_5?, c.p97_5?)))
        .collect();
    let max = pts.iter().map(|p| p.0.max(p.3)).fold(1.0, f64::max);
    let frame = Frame {
        w: 640.0,
        h: 480.0,
        pad: 56.0,
        max,
    };
    let mut s = frame.open("token limit", "response length (tokens)");
    if !pts.is_empty() {
        let upper: Vec<String> = pts.iter().map(|p| format!("{:.1},{:.1}", frame.x(p.0), frame.y(p.3))).collect();
        let lower: Vec<String> = pts
            .iter()
            .rev()
            .map(|p| format!("{:.1},{:.1}", frame.x(p.0), frame.y(p.2)))
            .collect();
        let _ = writeln!(
            s,
            "<polygon points=\"{} {}\" fill=\"{}\" fill-opacity=\"0.25\"/>",
            upper.join(" "),
            lower.join(" "),
            PALETTE[0]
        );
        let median: Vec<String> = pts.iter().map(|p| format!("{:.1},{:.1}", frame.x(p.0), frame.y(p.1))).collect();
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"/>",
            median.join(" "),
            PALETTE[0]
        );
    }
    s.push_str("</svg>\n");
    s
}
