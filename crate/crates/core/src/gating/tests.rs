use proptest::prelude::*;

use super::*;
use crate::autodiff::grad_check;
use crate::model::ModelConfig;
use crate::rng::Rng;

fn small_gate(seed: u64) -> GateNetwork {
    let cfg = GateConfig { hidden: 6, ..GateConfig::default() };
    GateNetwork::new(3, &cfg, &mut Rng::new(seed)).unwrap()
}

fn docs(rng: &mut Rng, n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| rng.normal_vec(3, 1.0)).collect()
}

/// Contexts sit near the target document; candidates are random directions.
fn synthetic(seed: u64, n: usize, k: usize, noise: f64) -> Vec<GateSample> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            let ds: Vec<Vec<f64>> = (0..k).map(|_| rng.normal_vec(3, 1.0)).collect();
            let target = rng.below(k);
            let context = ds[target].iter().map(|x| x + noise * rng.normal(0.0, 1.0)).collect();
            GateSample { context, docs: ds, candidates: (0..k as ToolId).collect(), target }
        })
        .collect()
}

#[test]
fn zero_gate_is_uniform() {
    let gate = small_gate(0).zeroed();
    let mut rng = Rng::new(1);
    let a = gate_scores(&gate, &rng.normal_vec(3, 1.0), &docs(&mut rng, 4), &[0, 1, 2, 3]).unwrap();
    assert_eq!(a.weights, vec![0.25; 4]);
    assert!((a.entropy() - 4f64.ln()).abs() < 1e-12);
    assert!((4f64.ln() - 1.38629).abs() < 1e-5);
}

#[test]
fn duplicate_documents_get_equal_weight() {
    let gate = small_gate(2);
    let mut rng = Rng::new(3);
    let mut ds = docs(&mut rng, 3);
    ds.push(ds[1].clone());
    let a = gate_scores(&gate, &rng.normal_vec(3, 1.0), &ds, &[0, 1, 2, 3]).unwrap();
    assert_eq!(a.weights[1], a.weights[3]);
    assert!((a.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn empty_candidates_rejected() {
    let gate = small_gate(0);
    assert!(matches!(gate_scores(&gate, &[0.0; 3], &[], &[]), Err(Error::Empty(_))));
}

#[test]
fn loss_closed_forms() {
    let l = gate_loss(&[0.5, 0.5], 0, 0.8).unwrap();
    assert!((l - 0.2 * 2f64.ln()).abs() < 1e-12);
    assert!((l - 0.13863).abs() < 1e-5);
    assert!((gate_loss(&[0.25, 0.75], 1, 0.0).unwrap() + 0.75f64.ln()).abs() < 1e-15);
    assert!(matches!(gate_loss(&[1.0], 3, 0.8), Err(Error::TargetNotCandidate(_))));
}

#[test]
fn tape_loss_matches_closed_form_and_gradients() {
    let scores = Tensor::matrix(1, 4, vec![0.3, -1.2, 0.8, 0.1]).unwrap();
    let mut tape = Tape::inference();
    let s = tape.constant(scores.clone()).unwrap();
    let (loss, alpha) = gate_loss_tape(&mut tape, s, 2, 0.8).unwrap();
    let direct = gate_loss(tape.value(alpha).data(), 2, 0.8).unwrap();
    assert!((tape.value(loss).item() - direct).abs() < 1e-12);

    let f = |tape: &mut Tape, x| Ok(gate_loss_tape(tape, x, 2, 0.8)?.0);
    assert!(grad_check(f, &scores, 1e-6).unwrap() < 1e-5);

    let gate = small_gate(7);
    let sample = &synthetic(9, 1, 3, 0.1)[0];
    let w0 = gate.params()[0].clone();
    let g = |tape: &mut Tape, x| {
        let mut vars = gate.bind(tape, false)?;
        vars[0] = x;
        let f = tape.constant(features(&sample.context, &sample.docs)?)?;
        let s = gate.scores_tape(tape, &vars, f)?;
        Ok(gate_loss_tape(tape, s, sample.target, 0.8)?.0)
    };
    assert!(grad_check(g, &w0, 1e-6).unwrap() < 1e-5);
}

#[test]
fn top_n_examples() {
    let a = CompositionWeights { candidates: vec![0, 1, 2], weights: vec![0.7, 0.2, 0.1] };
    let t = top_n(&a, 2);
    assert_eq!(t.candidates, vec![0, 1]);
    assert!((t.weights[0] - 0.7777777777777778).abs() < 1e-12);
    assert!((t.weights[1] - 0.2222222222222222).abs() < 1e-12);
    assert_eq!(top_n(&a, 3), a);
    assert_eq!(top_n(&a, 9), a);
    let hot = CompositionWeights { candidates: vec![4, 1, 2], weights: vec![0.0, 1.0, 0.0] };
    assert_eq!(top_n(&hot, 1).weights, vec![1.0]);
    assert_eq!(top_n(&hot, 2), CompositionWeights { candidates: vec![1, 2], weights: vec![1.0, 0.0] });
    let tie = CompositionWeights { candidates: vec![5, 3, 8], weights: vec![0.4, 0.4, 0.2] };
    assert_eq!(top_n(&tie, 1).candidates, vec![3]);
}

#[test]
fn encoders_are_frozen_and_cacheable() {
    let cfg = ModelConfig { vocab_size: 16, hidden: 8, layers: 1, heads: 2, d_ff: 8, max_seq_len: 8, seed: 0 };
    let model = TransformerModel::new(cfg).unwrap();
    let c1 = encode_context(&model, &[1, 2, 3]).unwrap();
    assert_eq!(c1.len(), 8);
    let _ = train_gate(&synthetic(0, 4, 2, 0.1), &[], 3, &GateConfig::default(), OptimConfig::default(), &Rng::new(0));
    assert_eq!(c1, encode_context(&model, &[1, 2, 3]).unwrap());
    assert!(matches!(encode_context(&model, &[]), Err(Error::Empty(_))));

    let mut cache = EmbeddingCache::default();
    let d = cache.embed(&model, 4, &[5, 6]).unwrap();
    assert_eq!(d, encode_tool(&model, &[5, 6]).unwrap());
    assert_eq!(cache.embed(&model, 9, &[5, 6]).unwrap(), d);
    assert_eq!(cache.len(), 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.bin");
    cache.save(&path).unwrap();
    assert_eq!(EmbeddingCache::load(&path).unwrap(), cache);
}

#[test]
fn single_candidate_is_always_correct() {
    let train = synthetic(1, 20, 1, 0.5);
    let cfg = GateConfig { hidden: 8, epochs: 1, ..GateConfig::default() };
    let (gate, log) = train_gate(&train, &train, 3, &cfg, OptimConfig::default(), &Rng::new(0)).unwrap();
    assert_eq!(log[0].val_accuracy, 1.0);
    assert_eq!(evaluate_gate(&gate, &train, 0.8).unwrap().accuracy, 1.0);
}

#[test]
fn training_learns_and_entropy_bonus_softens() {
    let train = synthetic(11, 300, 3, 0.2);
    let val = synthetic(12, 100, 3, 0.2);
    let base = GateConfig { hidden: 16, epochs: 15, lr: 3e-3, ..GateConfig::default() };
    let hard = GateConfig { lambda: 0.0, ..base };
    let (g_soft, _) = train_gate(&train, &val, 3, &base, OptimConfig::default(), &Rng::new(5)).unwrap();
    let (g_hard, log) = train_gate(&train, &val, 3, &hard, OptimConfig::default(), &Rng::new(5)).unwrap();
    let soft = evaluate_gate(&g_soft, &val, 0.8).unwrap();
    let sharp = evaluate_gate(&g_hard, &val, 0.0).unwrap();
    assert!(log.last().unwrap().val_accuracy > 0.8, "{log:?}");
    assert!(soft.mean_entropy > sharp.mean_entropy);
}

#[test]
fn target_outside_candidates_rejected() {
    let mut bad = synthetic(1, 2, 2, 0.1);
    bad[0].target = 5;
    let r = train_gate(&bad, &[], 3, &GateConfig::default(), OptimConfig::default(), &Rng::new(0));
    assert!(matches!(r, Err(Error::TargetNotCandidate(_))));
}

#[test]
fn checkpoint_round_trip() {
    let gate = small_gate(4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gate.bin");
    gate.save(&path).unwrap();
    assert_eq!(GateNetwork::load(&path).unwrap(), gate);
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[4] = 2;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(GateNetwork::load(&path), Err(Error::Version { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn permuting_candidates_permutes_weights(seed in 0u64..500, n in 1usize..6) {
        let gate = small_gate(seed);
        let mut rng = Rng::new(seed + 1);
        let c = rng.normal_vec(3, 1.0);
        let ds = docs(&mut rng, n);
        let ids: Vec<ToolId> = (0..n as ToolId).collect();
        let a = gate_scores(&gate, &c, &ds, &ids).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let pds: Vec<Vec<f64>> = perm.iter().map(|&i| ds[i].clone()).collect();
        let pids: Vec<ToolId> = perm.iter().map(|&i| ids[i]).collect();
        let b = gate_scores(&gate, &c, &pds, &pids).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert!((b.weights[k] - a.weights[i]).abs() < 1e-12);
        }
        prop_assert!((a.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert_eq!(a.argmax(), b.argmax());
    }

    #[test]
    fn top_n_preserves_ratios(seed in 0u64..500, n in 2usize..8, keep in 1usize..8) {
        let mut rng = Rng::new(seed);
        let a = CompositionWeights { candidates: (0..n as ToolId).collect(), weights: rng.simplex(n) };
        let t = top_n(&a, keep);
        prop_assert_eq!(t.candidates.len(), keep.min(n));
        prop_assert!((t.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..t.candidates.len() {
            for j in 0..t.candidates.len() {
                let orig = a.weights[t.candidates[i] as usize] / a.weights[t.candidates[j] as usize];
                prop_assert!((t.weights[i] / t.weights[j] - orig).abs() <= 1e-12 * orig.max(1.0));
            }
        }
    }
}
