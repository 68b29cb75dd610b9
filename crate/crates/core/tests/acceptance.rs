//! Acceptance suite. Trains every mode on the default desk-scale corpus,
//! evaluates on held-out prompts and prints one PASS/FAIL line per
//! criterion, followed by supplementary checks. Exits non-zero if any
//! criterion fails.
//!
//! `LBL_ACCEPTANCE_DIR` overrides the working directory. With
//! `LBL_ACCEPTANCE_REUSE=1`, a mode whose run directory already holds a
//! final checkpoint trained under an identical config is not retrained.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lbl_core::config::RunConfig;
use lbl_core::data::Task;
use lbl_core::eval::{worker_count, write_json, EvalReport};
use lbl_core::model::{checkpoint, Parameters};
use lbl_core::pipeline::{self, run_dir};
use lbl_core::training::{loss_window_means, read_loss_csv, TrainMode, FINAL_CHECKPOINT, LOSS_CSV};
use lbl_core::verify::{gradient_suite, property_suite, SuiteReport};

#[derive(Default)]
struct Tally {
    criteria: Vec<bool>,
    checks: Vec<bool>,
}

impl Tally {
    fn criterion(&mut self, name: &str, passed: bool, detail: String) {
        println!("{} criterion {name}: {detail}", if passed { "PASS" } else { "FAIL" });
        self.criteria.push(passed);
    }

    fn check(&mut self, name: &str, passed: bool, detail: String) {
        println!("  {} check {name}: {detail}", if passed { "pass" } else { "fail" });
        self.checks.push(passed);
    }
}

fn suite_detail(report: &SuiteReport, secs: f64) -> String {
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        format!("{} checks passed in {secs:.1}s", report.checks.len())
    } else {
        format!("failed {failed:?} ({secs:.1}s)")
    }
}

struct Trained {
    params: Parameters<f32>,
    train_secs: Option<f64>,
    loss_start: f64,
    loss_end: f64,
}

fn train(cfg: &RunConfig, mode: TrainMode, reuse: bool) -> Trained {
    let mut cfg = cfg.clone();
    cfg.mode = mode;
    let dir = run_dir(&cfg, mode);
    let manifest = dir.join("config.txt");
    let ckpt = dir.join(FINAL_CHECKPOINT);
    let cached = reuse
        && ckpt.exists()
        && std::fs::read_to_string(&manifest).map(|t| t == cfg.to_text()).unwrap_or(false);
    let train_secs = if cached {
        eprintln!("[{mode}] reusing {}", ckpt.display());
        None
    } else {
        let (train, _) = pipeline::load_datasets(&cfg).expect("datasets");
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        let t = Instant::now();
        let total = cfg.train_run().total_steps(train.len());
        pipeline::train_mode(&cfg, &train, &dir, |r| {
            if r.step % (total / 10).max(1) == 0 {
                eprintln!("[{mode}] step {}/{total} loss {:.4} ({:.0}s)", r.step, r.loss, t.elapsed().as_secs_f64());
            }
        })
        .expect("training");
        std::fs::write(&manifest, cfg.to_text()).unwrap();
        Some(t.elapsed().as_secs_f64())
    };
    let (params, _) = checkpoint::load(&ckpt).expect("checkpoint");
    let records = read_loss_csv(&dir.join(LOSS_CSV)).expect("loss csv");
    let (loss_start, loss_end) = loss_window_means(&records, 100).expect("loss records");
    Trained { params, train_secs, loss_start, loss_end }
}

fn evaluate(cfg: &RunConfig, mode: TrainMode, params: &Parameters<f32>) -> EvalReport {
    let (_, prompts) = pipeline::load_datasets(cfg).expect("datasets");
    let report = pipeline::evaluate(cfg, params, mode, &prompts, worker_count()).expect("sweep");
    write_json(&run_dir(cfg, mode).join("report.json"), &report).unwrap();
    report
}

fn fmt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into())
}

fn task_accuracy(report: &EvalReport, task: Task) -> f64 {
    let rows: Vec<_> = report.records.iter().filter(|r| r.task == task).collect();
    let (mut hits, mut total) = (0.0, 0.0);
    for r in rows {
        let n = r.response_len.saturating_sub(usize::from(!r.truncated)) as f64;
        hits += r.content_acc * n;
        total += n;
    }
    if total == 0.0 {
        1.0
    } else {
        hits / total
    }
}

/// Length control test shared by LDPE and ORPE: MAE ≤ 3, or MAE ≤ 5 with
/// the baseline ordering.
fn length_control(mae: Option<f64>, truncated: usize, prompted: f64, none: f64) -> (bool, String) {
    let Some(m) = mae else {
        return (false, "every record truncated".into());
    };
    let ordering = m < prompted && prompted < none && none >= 5.0 * m;
    let passed = truncated == 0 && (m <= 3.0 || (m <= 5.0 && ordering));
    (
        passed,
        format!(
            "MAE {m:.3} ({truncated} truncated); prompted {prompted:.3}, none {none:.3}; ordering {}",
            if ordering { "holds" } else { "violated" }
        ),
    )
}

fn determinism(base: &Path) -> (bool, String) {
    let run = |tag: &str| -> Vec<u8> {
        let mut cfg = RunConfig::default();
        cfg.out_dir = base.join(tag);
        let _ = std::fs::remove_dir_all(&cfg.out_dir);
        cfg.seed = 31;
        cfg.per_task = 150;
        cfg.eval_prompts = 4;
        cfg.max_response = 40;
        cfg.model.d_model = 32;
        cfg.model.d_ff = 64;
        cfg.model.max_seq = 96;
        cfg.grid = "10:50:20".into();
        cfg.mode = TrainMode::Ldpe;
        pipeline::write_datasets(&cfg).unwrap();
        let (train, prompts) = pipeline::load_datasets(&cfg).unwrap();
        let dir = run_dir(&cfg, cfg.mode);
        let out = pipeline::train_mode(&cfg, &train, &dir, |_| {}).unwrap();
        let report = pipeline::evaluate(&cfg, &out.params, cfg.mode, &prompts, 2).unwrap();
        let path = dir.join("report.json");
        write_json(&path, &report).unwrap();
        std::fs::read(&path).unwrap()
    };
    let (a, b) = (run("det_a"), run("det_b"));
    let same = a == b;
    (same, format!("two seeded train+eval runs, reports of {} and {} bytes, identical: {same}", a.len(), b.len()))
}

fn main() {
    let base = std::env::var_os("LBL_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance"));
    let reuse = std::env::var("LBL_ACCEPTANCE_REUSE").is_ok_and(|v| v == "1");
    let mut tally = Tally::default();

    let t = Instant::now();
    let props = property_suite(7);
    let secs = t.elapsed().as_secs_f64();
    tally.criterion("1 property suite", props.all_passed() && secs < 120.0, suite_detail(&props, secs));

    let t = Instant::now();
    let grads = gradient_suite(7);
    let secs = t.elapsed().as_secs_f64();
    tally.criterion("2 gradient checks", grads.all_passed() && secs < 300.0, suite_detail(&grads, secs));

    let mut cfg = RunConfig::default();
    cfg.out_dir = base.join("desk");
    let have_data = cfg.resolve(&cfg.dataset).exists() && cfg.resolve(&cfg.eval_set).exists();
    if !(reuse && have_data) {
        pipeline::write_datasets(&cfg).expect("datasets");
    }
    eprintln!("config:\n{}", cfg.to_text());

    let mut trained = BTreeMap::new();
    let mut reports = BTreeMap::new();
    for mode in [TrainMode::Ldpe, TrainMode::None, TrainMode::Prompted, TrainMode::Orpe, TrainMode::Mntpp] {
        let tr = train(&cfg, mode, reuse);
        let report = evaluate(&cfg, mode, &tr.params);
        let a = &report.aggregates;
        eprintln!(
            "[{mode}] MAE {} (incl. truncated {}), truncated {}, content accuracy {:.4}, train {}",
            fmt(a.mae),
            fmt(a.mae_including_truncated),
            a.truncated,
            a.content_accuracy,
            tr.train_secs.map(|s| format!("{s:.0}s")).unwrap_or_else(|| "reused".into())
        );
        trained.insert(mode.name(), tr);
        reports.insert(mode.name(), report);
    }

    // Baselines that never stop are compared on their capped lengths.
    let overall = |m: &str| reports[m].aggregates.mae_including_truncated.unwrap_or(f64::INFINITY);
    let (prompted, none) = (overall("prompted"), overall("none"));
    let ldpe = &reports["ldpe"].aggregates;
    let (ok, mut detail) = length_control(ldpe.mae, ldpe.truncated, prompted, none);
    let secs = trained["ldpe"].train_secs;
    let in_budget = secs.is_none_or(|s| s <= 3600.0);
    detail.push_str(&format!(
        "; training {}",
        secs.map(|s| format!("{s:.0}s")).unwrap_or_else(|| "reused".into())
    ));
    tally.criterion("3 desk-scale length control (LDPE)", ok && in_budget, detail);

    let (acc_l, acc_n) = (ldpe.content_accuracy, reports["none"].aggregates.content_accuracy);
    tally.criterion(
        "4 content accuracy retention",
        acc_l >= 0.99 && (acc_l - acc_n).abs() <= 0.005,
        format!(
            "LDPE {:.4} (motif {:.4}, enum {:.4}); none {acc_n:.4}; gap {:.2}pp",
            acc_l,
            task_accuracy(&reports["ldpe"], Task::Motif),
            task_accuracy(&reports["ldpe"], Task::Enum),
            100.0 * (acc_l - acc_n).abs()
        ),
    );

    let (_, prompts) = pipeline::load_datasets(&cfg).unwrap();
    let limits = pipeline::evaluate_limits(&cfg, &trained["mntpp"].params, &prompts, worker_count()).expect("limits");
    write_json(&run_dir(&cfg, TrainMode::Mntpp).join("limits.json"), &limits).unwrap();
    let short: Vec<String> = limits
        .curve
        .iter()
        .filter(|c| c.limit <= 50)
        .filter(|c| c.median.is_none_or(|m| (m - c.limit as f64).abs() > 3.0))
        .map(|c| format!("{}→{}", c.limit, fmt(c.median)))
        .collect();
    let medians: Vec<String> = limits.curve.iter().map(|c| format!("{}:{}", c.limit, fmt(c.median))).collect();
    tally.criterion(
        "5 max new tokens++ compliance",
        limits.compliance >= 0.95 && short.is_empty(),
        format!(
            "compliance {:.4}; medians off by >3 at limits ≤50: {short:?}; medians {}",
            limits.compliance,
            medians.join(" ")
        ),
    );

    let orpe = &reports["orpe"].aggregates;
    let (ok, detail) = length_control(orpe.mae, orpe.truncated, prompted, none);
    let gap = match (orpe.mae, ldpe.mae) {
        (Some(o), Some(l)) => (o - l).abs(),
        _ => f64::INFINITY,
    };
    tally.criterion("6 ORPE parity", ok && gap <= 2.0, format!("{detail}; |ORPE - LDPE| = {gap:.3}"));

    let (ok, detail) = determinism(&base);
    tally.criterion("7 determinism", ok, detail);

    for mode in TrainMode::ALL {
        let tr = &trained[mode.name()];
        tally.check(
            &format!("loss decreases ({mode})"),
            tr.loss_end < tr.loss_start,
            format!("first 100 steps {:.4}, last 100 steps {:.4}", tr.loss_start, tr.loss_end),
        );
    }
    let (l_end, n_end) = (trained["ldpe"].loss_end, trained["none"].loss_end);
    tally.check(
        "LDPE converges below NONE",
        l_end < n_end,
        format!("final 100-step loss {l_end:.4} vs {n_end:.4}"),
    );
    let none_motif = task_accuracy(&reports["none"], Task::Motif);
    tally.check(
        "NONE keeps content but not length",
        none_motif > 0.99 && none > 20.0,
        format!("motif accuracy {none_motif:.4}; length MAE incl. truncated {none:.3}"),
    );

    let failed = tally.criteria.iter().filter(|p| !**p).count();
    println!(
        "acceptance: {}/{} criteria passed; {}/{} supplementary checks passed",
        tally.criteria.len() - failed,
        tally.criteria.len(),
        tally.checks.iter().filter(|p| **p).count(),
        tally.checks.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
