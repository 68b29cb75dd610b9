use lbl_core::data::*;
use lbl_core::eval::*;
use lbl_core::inference::GenMode;
use lbl_core::model::{ModelConfig, Parameters};
use proptest::prelude::*;

const SPACE: TaskSpace = TaskSpace { vocab_size: 32, max_seq: 160 };

fn tiny() -> Parameters<f32> {
    let cfg = ModelConfig { vocab_size: 32, d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, max_seq: 160, rope_base: 10_000.0 };
    Parameters::init(cfg, 12).unwrap()
}

fn prompts(n: usize) -> Vec<PromptResponsePair> {
    (0..n as u64)
        .map(|i| {
            let t = if i % 2 == 0 { Task::Motif } else { Task::Enum };
            gen_sample(t, derive_seed(4, i), LengthRange::new(4, 20), SPACE).unwrap()
        })
        .collect()
}

#[test]
fn sweep_covers_every_prompt_and_target() {
    let params = tiny();
    let grid = parse_grid("10:100:10").unwrap();
    let ps = prompts(20);
    let mut opts = SweepOptions::new(GenMode::Ldpe, SPACE);
    let report = sweep(&params, &ps, &grid, &opts).unwrap();
    assert_eq!(report.records.len() + report.failures.len(), 200);
    assert!(report.failures.is_empty());
    assert_eq!(report.aggregates.records, 200);
    opts.threads = 3;
    let threaded = sweep(&params, &ps, &grid, &opts).unwrap();
    assert_eq!(threaded, report);
}

#[test]
fn truncation_is_counted_and_excluded() {
    let params = tiny();
    let grid = [10usize, 20];
    let report = sweep(&params, &prompts(4), &grid, &SweepOptions::new(GenMode::None, SPACE)).unwrap();
    let a = &report.aggregates;
    let truncated = report.records.iter().filter(|r| r.truncated).count();
    assert_eq!(a.truncated, truncated);
    for r in report.records.iter().filter(|r| r.truncated) {
        assert_eq!(r.response_len, default_hard_cap_for(r.target_len));
    }
    if truncated == report.records.len() {
        assert_eq!(a.mae, None);
    }
}

fn default_hard_cap_for(target: usize) -> usize {
    (target as f64 * 1.5).ceil() as usize
}

#[test]
fn csv_round_trip_and_limit_curve() {
    let params = tiny();
    let report = sweep(&params, &prompts(6), &[5, 15], &SweepOptions::new(GenMode::MntppLimit, SPACE)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out/records.csv");
    write_csv(&path, &report.records).unwrap();
    assert_eq!(read_csv(&path).unwrap(), report.records);
    let curve = limit_curve(&report.records, &[5, 15]);
    assert_eq!(curve.iter().map(|c| c.count).sum::<usize>(), 12);
    write_limit_csv(&dir.path().join("limits.csv"), &curve).unwrap();
    assert!(render_limit_svg(&curve).starts_with("<svg"));
    assert!(render_scatter_svg(&report.records).starts_with("<svg"));
    write_json(&dir.path().join("report.json"), &report).unwrap();
    let back: EvalReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(back, report);
}

#[test]
fn mae_example() {
    assert_eq!(mean_abs_error(&[10, 90, 150, 200], &[12, 89, 149, 197]).unwrap(), 1.75);
}

proptest! {
    #[test]
    fn mae_is_nonnegative_and_zero_on_exact(pairs in prop::collection::vec((1usize..300, 1usize..300), 1..50)) {
        let (t, r): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let mae = mean_abs_error(&t, &r).unwrap();
        prop_assert!(mae >= 0.0);
        prop_assert_eq!(mean_abs_error(&t, &t).unwrap(), 0.0);
        let swapped = mean_abs_error(&r, &t).unwrap();
        prop_assert_eq!(mae, swapped);
    }

    #[test]
    fn correct_responses_score_one(t in prop_oneof![Just(Task::Motif), Just(Task::Enum)], seed in any::<u64>(), len in 0usize..100) {
        let pair = gen_sample(t, seed, LengthRange::new(1, 5), SPACE).unwrap();
        let mut resp = continuation(&pair.prompt, len, SPACE).unwrap();
        prop_assert_eq!(content_accuracy(&pair.prompt, &resp, SPACE).unwrap(), 1.0);
        resp.push(EOS);
        prop_assert_eq!(content_accuracy(&pair.prompt, &resp, SPACE).unwrap(), 1.0);
    }

    #[test]
    fn grid_parsing(start in 1usize..50, span in 0usize..300, step in 1usize..40) {
        let g = parse_grid(&format!("{start}:{}:{step}", start + span)).unwrap();
        prop_assert_eq!(g.len(), span / step + 1);
        prop_assert!(g.windows(2).all(|w| w[1] - w[0] == step));
        prop_assert!(*g.last().unwrap() <= start + span);
    }
}
