use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use recgraph::autodiff::ParamStore;
use recgraph::bleu::{corpus_bleu, expected_risk_loss, sentence_bleu_smoothed, NGramStats, RiskSentence};
use recgraph::data::generate_toy_task;
use recgraph::data::ToyKind;
use recgraph::graph::{compile, execute_training_graph, ExecMode, ExecOptions, LossKind, ModelDims, SeqBatch};
use recgraph::presets::AttentionModel;
use recgraph::rng::RngKey;
use recgraph::tensor::{Axis, Tensor};
use recgraph::train::{risk_step, TrainOptions, Trainer};

fn toks(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

#[test]
fn identical_corpus_scores_100() {
    let c = vec![toks("the cat sat on the mat"), toks("a b c d e f")];
    assert_abs_diff_eq!(corpus_bleu(&c, &c).unwrap(), 100.0, epsilon = 1e-9);
}

#[test]
fn no_matching_four_grams_scores_zero() {
    let cand = vec![toks("a b c d"), toks("e f g h")];
    let refs = vec![toks("a b c x"), toks("e f g y")];
    assert_eq!(corpus_bleu(&cand, &refs).unwrap(), 0.0);
    assert_eq!(corpus_bleu(&[toks("p q r s")], &[toks("w x y z")]).unwrap(), 0.0);
}

#[test]
fn short_candidate_brevity_example() {
    let s = NGramStats::new(&toks("a b c d"), &toks("a b c d e"));
    assert_eq!(s.matched, [4, 3, 2, 1]);
    assert_eq!(s.total, [4, 3, 2, 1]);
    assert_abs_diff_eq!(s.brevity_penalty(), (1.0f64 - 5.0 / 4.0).exp(), epsilon = 1e-15);
    let b = corpus_bleu(&[toks("a b c d")], &[toks("a b c d e")]).unwrap();
    assert_abs_diff_eq!(b, 77.8801, epsilon = 5e-5);
}

#[test]
fn smoothed_sentence_examples() {
    assert_abs_diff_eq!(sentence_bleu_smoothed(&toks("x y"), &toks("x y")), 100.0, epsilon = 1e-9);
    assert_eq!(sentence_bleu_smoothed::<&str>(&[], &toks("a")), 0.0);
    assert_abs_diff_eq!(sentence_bleu_smoothed(&toks("a b"), &toks("a c")), 70.7107, epsilon = 5e-5);
    assert_abs_diff_eq!(sentence_bleu_smoothed(&toks("a b"), &toks("a c")), 100.0 * 0.25f64.powf(0.25), epsilon = 1e-12);
}

#[test]
fn corpus_errors() {
    assert!(corpus_bleu::<u32>(&[], &[]).is_err());
    assert!(corpus_bleu(&[vec![1u32]], &[vec![1], vec![2]]).is_err());
}

fn sent(scores: &[f64], hyps: &[&[u32]], reference: &[u32]) -> RiskSentence {
    RiskSentence { hyps: hyps.iter().map(|h| h.to_vec()).collect(), scores: scores.to_vec(), reference: reference.to_vec() }
}

#[test]
fn risk_examples() {
    let r = [4, 5, 6, 7];
    let (loss, g) = expected_risk_loss(&[sent(&[-3.0], &[&[4, 9]], &r)]).unwrap();
    assert!(loss < 0.0);
    assert_eq!(g[0], vec![0.0]);

    // BLEU 100 and BLEU 0 at equal scores.
    let (loss, g) = expected_risk_loss(&[sent(&[-1.0, -1.0], &[&r, &[9, 9]], &r)]).unwrap();
    assert_abs_diff_eq!(loss, -50.0, epsilon = 1e-12);
    assert_abs_diff_eq!(g[0][0], -25.0, epsilon = 1e-12);
    assert_abs_diff_eq!(g[0][1], 25.0, epsilon = 1e-12);

    let (loss, g) = expected_risk_loss(&[sent(&[-0.5, -2.0, -4.0], &[&r, &r, &r], &r)]).unwrap();
    assert_abs_diff_eq!(loss, -100.0, epsilon = 1e-9);
    assert!(g[0].iter().all(|x| x.abs() < 1e-12));

    assert!(expected_risk_loss(&[sent(&[f64::NAN], &[&r], &r)]).is_err());
    assert!(expected_risk_loss(&[sent(&[], &[], &r)]).is_err());
}

fn random_risk_batch(seed: u64) -> Vec<RiskSentence> {
    let mut rng = RngKey::new(seed, "risk").rng();
    (0..3)
        .map(|_| {
            let reference: Vec<u32> = (0..rng.gen_range(2..8)).map(|_| rng.gen_range(4..9)).collect();
            let n = rng.gen_range(1..6);
            let hyps = (0..n).map(|_| (0..rng.gen_range(1..8)).map(|_| rng.gen_range(4..9)).collect()).collect();
            let scores = (0..n).map(|_| rng.gen_range(-8.0..0.0)).collect();
            RiskSentence { hyps, scores, reference }
        })
        .collect()
}

#[test]
fn risk_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let batch = random_risk_batch(seed);
        let (_, grads) = expected_risk_loss(&batch).unwrap();
        let h = 1e-5;
        for (i, s) in batch.iter().enumerate() {
            for j in 0..s.scores.len() {
                let shifted = |d: f64| {
                    let mut b = batch.clone();
                    b[i].scores[j] += d;
                    expected_risk_loss(&b).unwrap().0
                };
                let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
                let rel = (fd - grads[i][j]).abs() / fd.abs().max(grads[i][j].abs()).max(1e-6);
                assert!(rel < 1e-4, "seed {seed}: {fd} vs {}", grads[i][j]);
            }
        }
    }
}

#[test]
fn sequence_scores_match_finite_differences() {
    // Gradient of a weighted sum of hypothesis log-likelihoods, as used by the risk step.
    let dims = ModelDims { src_vocab: 8, trg_vocab: 8 };
    let g = compile(&AttentionModel::small(4, 1).config().unwrap(), ExecMode::Train, dims).unwrap();
    let params = ParamStore::<f64>::initialize(&g.param_manifest, RngKey::new(3, "init"));
    let batch = SeqBatch::new(&[vec![4, 5, 6], vec![7, 4]], &[vec![6, 5, 0], vec![4, 7, 7, 0]], 3).unwrap();
    let w = [0.7, -1.3];
    let objective = |p: &ParamStore<f64>| {
        let out = execute_training_graph(&g, &batch, p, &ExecOptions::eval(LossKind::SeqLogLik)).unwrap();
        out.tape.value(out.loss).data().iter().zip(&w).map(|(s, w)| s * w).sum::<f64>()
    };
    let out = execute_training_graph(&g, &batch, &params, &ExecOptions::eval(LossKind::SeqLogLik)).unwrap();
    let seed = Tensor::new(&[(Axis::Batch, 2)], w.to_vec()).unwrap();
    let grads = out.tape.backward_with(out.loss, seed).unwrap().params();
    let mut rng = RngKey::new(3, "probe").rng();
    for spec in &g.param_manifest {
        for _ in 0..3 {
            let k = rng.gen_range(0..spec.numel());
            let h = 1e-5;
            let nudge = |d: f64| {
                let mut p = params.clone();
                p.get_mut(&spec.name).unwrap().data_mut()[k] += d;
                objective(&p)
            };
            let fd = (nudge(h) - nudge(-h)) / (2.0 * h);
            let an = grads[&spec.name].data()[k];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(rel < 1e-4, "{}[{k}]: {fd} vs {an}", spec.name);
        }
    }
}

#[test]
fn single_hypothesis_risk_step_leaves_parameters() {
    let corpus = generate_toy_task(ToyKind::Reverse, 10, 2, 5, 6, 1).unwrap();
    let dims = ModelDims { src_vocab: 10, trg_vocab: 10 };
    let opts = TrainOptions { dropout: false, ..TrainOptions::default() };
    let mut t = Trainer::new(AttentionModel::small(6, 1).config().unwrap(), dims, opts.clone()).unwrap();
    let mut state = t.init_state().unwrap();
    let decode = t.decode_graph(&state).unwrap();
    let g = t.graph(0).unwrap().clone();
    let before = state.params.clone();
    risk_step(&mut state, &g, &decode, &corpus, &[0, 1, 2, 3, 4, 5], 1, &opts).unwrap();
    assert_eq!(state.params, before);
    assert_eq!(state.updates, 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn corpus_bleu_ignores_sentence_order(seed in any::<u64>(), n in 1usize..12) {
        let mut rng = RngKey::new(seed, "corpus").rng();
        let mut pairs: Vec<(Vec<u32>, Vec<u32>)> = (0..n)
            .map(|_| {
                let r: Vec<u32> = (0..rng.gen_range(1..10)).map(|_| rng.gen_range(0..5)).collect();
                let c = r.iter().map(|&x| if rng.gen_bool(0.8) { x } else { rng.gen_range(0..5) }).collect();
                (c, r)
            })
            .collect();
        let score = |p: &[(Vec<u32>, Vec<u32>)]| {
            let (c, r): (Vec<_>, Vec<_>) = p.iter().cloned().unzip();
            corpus_bleu(&c, &r).unwrap()
        };
        let before = score(&pairs);
        pairs.shuffle(&mut rng);
        prop_assert_eq!(before, score(&pairs));
        prop_assert!((0.0..=100.0).contains(&before));
    }

    #[test]
    fn bleu_is_bounded_and_reflexive(c in proptest::collection::vec(0u32..6, 0..12), r in proptest::collection::vec(0u32..6, 1..12)) {
        let s = sentence_bleu_smoothed(&c, &r);
        prop_assert!((0.0..=100.0 + 1e-9).contains(&s));
        prop_assert!((sentence_bleu_smoothed(&r, &r) - 100.0).abs() < 1e-9);
        if !c.is_empty() {
            let b = corpus_bleu(std::slice::from_ref(&c), std::slice::from_ref(&r)).unwrap();
            prop_assert!((0.0..=100.0 + 1e-9).contains(&b));
        }
    }

    #[test]
    fn risk_gradients_sum_to_zero_and_ignore_score_shifts(seed in any::<u64>(), shift in -20.0f64..20.0) {
        let batch = random_risk_batch(seed);
        let (loss, grads) = expected_risk_loss(&batch).unwrap();
        for g in &grads {
            prop_assert!(g.iter().sum::<f64>().abs() < 1e-8);
        }
        let mut moved = batch.clone();
        moved[0].scores.iter_mut().for_each(|s| *s += shift);
        let (loss2, grads2) = expected_risk_loss(&moved).unwrap();
        prop_assert!((loss - loss2).abs() < 1e-9);
        for (a, b) in grads.iter().flatten().zip(grads2.iter().flatten()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
