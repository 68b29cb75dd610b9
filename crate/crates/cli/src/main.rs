//! `lbl`: dataset generation, training, generation, evaluation, plotting
//! and self-checks for the length-controlled toy transformer.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use lbl_core::config::RunConfig;
use lbl_core::eval::{
    gnuplot_limit, gnuplot_scatter, limit_curve, read_csv, render_limit_svg, render_scatter_svg, worker_count,
    write_csv, write_json, write_limit_csv, EvalRecord,
};
use lbl_core::inference::{generate_batch, read_requests, write_records};
use lbl_core::model::checkpoint;
use lbl_core::pipeline::{self, run_dir};
use lbl_core::training::TrainMode;
use lbl_core::verify::{gradient_suite, property_suite, SuiteReport};

#[derive(Parser)]
#[command(name = "lbl", version, about = "Length-controlled generation with countdown positional encodings")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Run configuration file (flat `key = value`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// ldpe, orpe, none, prompted or mntpp.
    #[arg(long, global = true)]
    mode: Option<TrainMode>,
    /// Target grid `start:stop:step`.
    #[arg(long, global = true)]
    grid: Option<String>,
    #[arg(long, global = true)]
    sigma0: Option<f64>,
    #[arg(long, global = true)]
    sigma_max: Option<f64>,
    #[arg(long, global = true)]
    max_shift: Option<usize>,
    #[arg(long, global = true)]
    hard_cap_factor: Option<f64>,
    /// Any other config key, as `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the training corpus and held-out prompts as JSONL.
    GenData,
    /// Train one mode; writes checkpoints and the loss CSV.
    Train,
    /// Run a JSONL file of generation requests against a checkpoint.
    Generate {
        #[arg(long)]
        requests: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the mode's final checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Target-length sweep (and the token-limit sweep for mntpp).
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Render evaluation CSVs into SVG charts and gnuplot scripts.
    Plot {
        /// Output directory; defaults to `<out_dir>/plots`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Property and gradient-check suites.
    Verify,
}

fn load_config(o: &Overrides) -> Result<RunConfig> {
    let mut cfg = match &o.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut pairs: Vec<(String, String)> = Vec::new();
    for kv in &o.set {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects key=value, got '{kv}'"))?;
        pairs.push((k.trim().into(), v.trim().into()));
    }
    let flag = |k: &str, v: Option<String>| v.map(|v| (k.to_string(), v));
    pairs.extend(
        [
            flag("seed", o.seed.map(|v| v.to_string())),
            flag("mode", o.mode.map(|v| v.to_string())),
            flag("grid", o.grid.clone()),
            flag("sigma0", o.sigma0.map(|v| v.to_string())),
            flag("sigma_max", o.sigma_max.map(|v| v.to_string())),
            flag("max_shift", o.max_shift.map(|v| v.to_string())),
            flag("hard_cap_factor", o.hard_cap_factor.map(|v| v.to_string())),
        ]
        .into_iter()
        .flatten(),
    );
    for (k, v) in pairs {
        cfg.set(&k, &v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn ensure_datasets(cfg: &RunConfig) -> Result<()> {
    if !cfg.resolve(&cfg.dataset).exists() || !cfg.resolve(&cfg.eval_set).exists() {
        let (t, e) = pipeline::write_datasets(cfg)?;
        eprintln!("wrote {} and {}", t.display(), e.display());
    }
    Ok(())
}

fn checkpoint_path(cfg: &RunConfig, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| run_dir(cfg, cfg.mode).join(lbl_core::training::FINAL_CHECKPOINT))
}

fn print_suite(name: &str, report: &SuiteReport) {
    for c in &report.checks {
        println!("{} {name}/{}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = load_config(&cli.overrides)?;
    match cli.command {
        Command::GenData => {
            let (t, e) = pipeline::write_datasets(&cfg)?;
            println!("{}\n{}", t.display(), e.display());
        }
        Command::Train => {
            ensure_datasets(&cfg)?;
            let (train, _) = pipeline::load_datasets(&cfg)?;
            let dir = run_dir(&cfg, cfg.mode);
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("config.txt"), cfg.to_text())?;
            let total = cfg.train_run().total_steps(train.len());
            let every = (total / 20).max(1);
            let outcome = pipeline::train_mode(&cfg, &train, &dir, |r| {
                if r.step % every == 0 || r.step == total {
                    eprintln!("step {}/{total} loss {:.4} lr {:.2e} sigma {:.3}", r.step, r.loss, r.lr, r.sigma);
                }
            })?;
            println!("checkpoint {}", outcome.checkpoint.display());
            println!("loss {}", outcome.loss_csv.display());
            println!("sha256 {}", sha256_hex(&outcome.checkpoint)?);
        }
        Command::Generate { requests, out, checkpoint } => {
            let (params, _) = checkpoint::load(&checkpoint_path(&cfg, checkpoint))?;
            let reqs = read_requests(&requests)?;
            let records = generate_batch(&params, &reqs, cfg.scale_policy)?;
            write_records(&out, &records)?;
            println!("{} generations -> {}", records.len(), out.display());
        }
        Command::Eval { checkpoint } => {
            let path = checkpoint_path(&cfg, checkpoint);
            let (params, meta) = checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
            if let Some(m) = meta.mode.as_deref().filter(|m| *m != cfg.mode.name()) {
                eprintln!("note: checkpoint was trained as '{m}', evaluating as '{}'", cfg.mode);
            }
            let (_, prompts) = pipeline::load_datasets(&cfg)?;
            let dir = run_dir(&cfg, cfg.mode);
            let threads = worker_count();
            let report = pipeline::evaluate(&cfg, &params, cfg.mode, &prompts, threads)?;
            write_json(&dir.join("report.json"), &report)?;
            write_csv(&dir.join("records.csv"), &report.records)?;
            let a = &report.aggregates;
            let fmt = |v: Option<f64>| v.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into());
            println!(
                "{}: {} records, {} truncated, MAE {}, MAE incl. truncated {}, content accuracy {:.4}",
                report.mode,
                a.records,
                a.truncated,
                fmt(a.mae),
                fmt(a.mae_including_truncated),
                a.content_accuracy
            );
            let mut ok = report.failures.is_empty();
            if cfg.mode == TrainMode::Mntpp {
                let limits = pipeline::evaluate_limits(&cfg, &params, &prompts, threads)?;
                write_json(&dir.join("limits.json"), &limits)?;
                write_csv(&dir.join("limit_records.csv"), &limits.report.records)?;
                write_limit_csv(&dir.join("limits.csv"), &limits.curve)?;
                println!("token-limit compliance {:.4}", limits.compliance);
                ok &= limits.report.failures.is_empty();
            }
            for f in &report.failures {
                eprintln!("failure: prompt {} target {}: {}", f.prompt_index, f.target_len, f.error);
            }
            return Ok(ok);
        }
        Command::Plot { out } => {
            let out = out.unwrap_or_else(|| cfg.out_dir.join("plots"));
            std::fs::create_dir_all(&out)?;
            let mut all: Vec<EvalRecord> = Vec::new();
            for mode in TrainMode::ALL {
                let csv = run_dir(&cfg, mode).join("records.csv");
                if csv.exists() {
                    all.extend(read_csv(&csv)?);
                }
            }
            if all.is_empty() {
                bail!("no records.csv under {}; run eval first", cfg.out_dir.display());
            }
            write_csv(&out.join("scatter.csv"), &all)?;
            let mut modes: Vec<&str> = all.iter().map(|r| r.mode.as_str()).collect();
            modes.dedup();
            std::fs::write(out.join("scatter.gp"), gnuplot_scatter("scatter.csv", &modes, "scatter_gnuplot.svg"))?;
            std::fs::write(out.join("scatter.svg"), render_scatter_svg(&all))?;
            let limit_csv = run_dir(&cfg, TrainMode::Mntpp).join("limit_records.csv");
            if limit_csv.exists() {
                let records = read_csv(&limit_csv)?;
                let mut limits: Vec<usize> = records.iter().map(|r| r.target_len).collect();
                limits.sort_unstable();
                limits.dedup();
                let curve = limit_curve(&records, &limits);
                write_limit_csv(&out.join("limits.csv"), &curve)?;
                std::fs::write(out.join("limits.gp"), gnuplot_limit("limits.csv", "limits_gnuplot.svg"))?;
                std::fs::write(out.join("limits.svg"), render_limit_svg(&curve))?;
            }
            println!("{}", out.display());
        }
        Command::Verify => {
            let props = property_suite(cfg.seed);
            print_suite("property", &props);
            let grads = gradient_suite(cfg.seed);
            print_suite("gradient", &grads);
            return Ok(props.all_passed() && grads.all_passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
