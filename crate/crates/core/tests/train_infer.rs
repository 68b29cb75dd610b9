use lbl_core::data::*;
use lbl_core::encoding::{countdown_indices, sample_shift, CountdownPlan, EncodingMatrix, EncodingMode};
use lbl_core::inference::*;
use lbl_core::model::{checkpoint, ModelConfig, Parameters};
use lbl_core::training::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SPACE: TaskSpace = TaskSpace { vocab_size: 32, max_seq: 96 };

fn tiny() -> ModelConfig {
    ModelConfig { vocab_size: 32, d_model: 32, n_layers: 2, n_heads: 2, d_ff: 64, max_seq: 96, rope_base: 10_000.0 }
}

fn corpus(n: usize) -> Vec<PromptResponsePair> {
    generate_corpus(n, 17, LengthRange::new(3, 30), SPACE).unwrap()
}

#[test]
fn overfits_a_single_example() {
    let pair = gen_sample(Task::Motif, 8, LengthRange::new(20, 20), SPACE).unwrap();
    let ex = make_example(&pair, EncodingMode::Ldpe, 0, false).unwrap();
    let mut params = Parameters::<f32>::init(tiny(), 1).unwrap();
    let mut state = AdamWState::new(&params);
    let hyper = AdamWHyper { lr0: 3e-3, ..AdamWHyper::default() };
    let mut loss = f32::INFINITY;
    for t in 1..=300 {
        let (l, grads) = loss_step(&params, &ex).unwrap();
        loss = l;
        adamw_step(&mut params, &grads, &mut state, &hyper, hyper.lr0, t).unwrap();
    }
    let (final_loss, _) = loss_step(&params, &ex).unwrap();
    assert!(final_loss < 0.05, "loss after 300 steps: {final_loss} (last step {loss})");
}

#[test]
fn accumulation_matches_batch_mean() {
    let data = corpus(5);
    let params = Parameters::<f32>::init(tiny(), 3).unwrap();
    let examples: Vec<TrainingExample> =
        data.iter().take(5).map(|p| make_example(p, EncodingMode::Ldpe, 0, false).unwrap()).collect();
    let (_, batch) = batch_loss_step(&params, &examples).unwrap();
    let mut acc: Vec<Vec<f32>> = batch.iter().map(|g| vec![0.0; g.len()]).collect();
    for ex in &examples {
        let (_, g) = loss_step(&params, ex).unwrap();
        for (a, g) in acc.iter_mut().zip(&g) {
            a.iter_mut().zip(g).for_each(|(a, g)| *a += g);
        }
    }
    acc.iter_mut().for_each(|a| a.iter_mut().for_each(|v| *v /= 5.0));
    for (a, b) in acc.iter().zip(&batch) {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = b.iter().map(|y| (*y as f64).powi(2)).sum::<f64>().sqrt();
        assert!(diff <= 1e-5 * scale.max(1e-12), "relative difference {}", diff / scale);
    }

    let mut p1 = params.clone();
    let mut p2 = params.clone();
    let (mut s1, mut s2) = (AdamWState::new(&p1), AdamWState::new(&p2));
    let h = AdamWHyper::default();
    adamw_step(&mut p1, &acc, &mut s1, &h, h.lr0, 1).unwrap();
    adamw_step(&mut p2, &batch, &mut s2, &h, h.lr0, 1).unwrap();
    for (a, b) in p1.tensors().iter().zip(p2.tensors()) {
        let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = b.data().iter().map(|y| (*y as f64).powi(2)).sum::<f64>().sqrt();
        assert!(diff <= 1e-5 * scale.max(1e-12), "stepped parameters differ by {}", diff / scale);
    }
}

#[test]
fn seeded_training_is_bitwise_reproducible() {
    let data = corpus(10);
    let run = TrainRun { mode: TrainMode::Mntpp, seed: 5, checkpoint_every: 2, ..TrainRun::default() };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = train(&run, &data, tiny(), a.path()).unwrap();
    let rb = train(&run, &data, tiny(), b.path()).unwrap();
    assert_eq!(std::fs::read(&ra.checkpoint).unwrap(), std::fs::read(&rb.checkpoint).unwrap());
    assert_eq!(std::fs::read(&ra.loss_csv).unwrap(), std::fs::read(&rb.loss_csv).unwrap());
    assert_eq!(ra.records.len(), 4);
    assert!(a.path().join("step_0000002.lbtc").exists());
    assert_eq!(read_loss_csv(&ra.loss_csv).unwrap(), ra.records);
    let (params, meta) = checkpoint::load(&ra.checkpoint).unwrap();
    assert_eq!(params, ra.params);
    assert_eq!(meta.step, 4);
    assert_eq!(meta.mode.as_deref(), Some("mntpp"));
}

#[test]
fn initial_loss_depends_on_encoding() {
    let pair = &corpus(1)[0];
    let params = Parameters::<f32>::init(tiny(), 2).unwrap();
    let ldpe = loss_step(&params, &make_example(pair, EncodingMode::Ldpe, 0, false).unwrap()).unwrap().0;
    let none = loss_step(&params, &make_example(pair, EncodingMode::None, 0, false).unwrap()).unwrap().0;
    assert_ne!(ldpe, none);
}

#[test]
fn smallest_curriculum_scale_never_shifts() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    assert!((0..100_000).all(|_| sample_shift(0.1, 256, &mut rng) == 0));
}

fn gen_mode() -> impl Strategy<Value = GenMode> {
    prop_oneof![Just(GenMode::Ldpe), Just(GenMode::Orpe), Just(GenMode::None), Just(GenMode::MntppLimit)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn trace_follows_countdown_and_cap_holds(
        seed in any::<u64>(), mode in gen_mode(), target in 1usize..40, cap in 1usize..60, tau in 0.2f64..3.0,
    ) {
        let params = Parameters::<f32>::init(tiny(), seed).unwrap();
        let pair = gen_sample(Task::Motif, seed, LengthRange::new(3, 10), SPACE).unwrap();
        let n = pair.prompt.len();
        let cap = cap.max(target);
        let req = GenerationRequest {
            hard_cap: Some(cap),
            decode_policy: DecodePolicy::Temperature { tau },
            seed,
            ..GenerationRequest::greedy(pair.prompt.clone(), target, mode)
        };
        let g = generate(&params, &req).unwrap();
        prop_assert!(g.realized_length <= cap);
        prop_assert_eq!(g.realized_length, g.tokens.len());
        prop_assert_eq!(g.truncated, g.tokens.last() != Some(&EOS));
        let again = generate(&params, &req).unwrap();
        prop_assert_eq!(&again.tokens, &g.tokens);

        let enc = mode.encoding();
        if enc == EncodingMode::None {
            prop_assert_eq!(g.encoding_lookups, 0);
        } else {
            let plan = CountdownPlan::exact(enc, n, n + target).unwrap();
            let want = countdown_indices(&plan);
            let upto = g.index_trace.len().min(n + target);
            prop_assert!(g.index_trace.len() >= n);
            prop_assert_eq!(&g.index_trace[..upto], &want[..upto]);
            for (k, idx) in g.index_trace.iter().enumerate().skip(n + target) {
                prop_assert_eq!(*idx, Some(step_encoding_index(target, k + 1 - n)));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn consistent_factor_is_the_training_factor_of_its_own_output(
        seed in any::<u64>(), orpe in any::<bool>(), target in 1usize..40,
    ) {
        let params = Parameters::<f32>::init(tiny(), seed).unwrap();
        let pair = gen_sample(Task::Enum, seed, LengthRange::new(3, 10), SPACE).unwrap();
        let n = pair.prompt.len();
        let mode = if orpe { GenMode::Orpe } else { GenMode::Ldpe };
        let req = GenerationRequest { hard_cap: Some(target + 10), ..GenerationRequest::greedy(pair.prompt.clone(), target, mode) };
        let g = generate_with(&params, &req, ScalePolicy::Consistent).unwrap();
        prop_assert_eq!(&generate_with(&params, &req, ScalePolicy::Consistent).unwrap(), &g);
        prop_assert!(g.realized_length <= target + 10);
        let plan = CountdownPlan::exact(mode.encoding(), n, n + target).unwrap();
        prop_assert_eq!(&g.index_trace[..n], &countdown_indices(&plan)[..n]);
        if g.fixed_point == Some(true) {
            // prompt norm plus the output's norm rescaled to target rows
            let sq = |t: &[u32]| -> f64 { params.embed(t).unwrap().iter().map(|v| (*v as f64).powi(2)).sum() };
            let e = (sq(&pair.prompt) + sq(&g.tokens) * target as f64 / g.tokens.len() as f64).sqrt();
            let r = EncodingMatrix::<f64>::from_plan(&plan, tiny().d_model).unwrap().frobenius_norm();
            let f = g.scale_factor.unwrap();
            prop_assert!((f - e / r).abs() <= 1e-6 * f, "{} vs {}", f, e / r);
        } else {
            prop_assert_eq!(g.fixed_point, Some(false));
        }
    }
}

#[test]
fn consistent_without_encoding_is_a_single_plain_decode() {
    let params = Parameters::<f32>::init(tiny(), 4).unwrap();
    for pair in corpus(3) {
        let req = GenerationRequest::greedy(pair.prompt.clone(), 20, GenMode::None);
        let c = generate_with(&params, &req, ScalePolicy::Consistent).unwrap();
        assert_eq!(c, generate_with(&params, &req, ScalePolicy::Frozen).unwrap());
        assert_eq!(c.fixed_point, None);
        assert_eq!(c.scale_factor, None);
    }
}

#[test]
fn batch_generation_round_trip() {
    let params = Parameters::<f32>::init(tiny(), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let req_path = dir.path().join("requests.jsonl");
    let reqs: Vec<GenerationRequest> = corpus(2)
        .iter()
        .map(|p| GenerationRequest { hard_cap: Some(12), ..GenerationRequest::greedy(p.prompt.clone(), 8, GenMode::Ldpe) })
        .collect();
    let text: String = reqs.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
    std::fs::write(&req_path, text).unwrap();
    let read = read_requests(&req_path).unwrap();
    assert_eq!(read, reqs);
    let records = generate_batch(&params, &read, ScalePolicy::Frozen).unwrap();
    assert_eq!(records.len(), 4);
    assert!(records.iter().all(|r| r.realized_length <= 12 && r.scale_factor.is_some()));
    write_records(&dir.path().join("out.jsonl"), &records).unwrap();
}
