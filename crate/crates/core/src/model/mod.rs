//! Small decoder-only language model over the closed symbol vocabulary.

mod config;
mod tokenizer;
mod transformer;

pub use config::ModelConfig;
pub use tokenizer::{TokenSequence, Tokenizer};
pub use transformer::{
    action_nll, argmax, BoundParams, DecodeOutcome, DeltaSource, FfnHook, ForwardOut, Input, Site, TransformerModel,
};
pub(crate) use transformer::{write_tensors, ByteReader};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tape, Tensor};
    use crate::error::Error;

    fn tiny() -> ModelConfig {
        ModelConfig { vocab_size: 16, hidden: 8, layers: 2, heads: 2, d_ff: 12, max_seq_len: 10, seed: 3 }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig { heads: 3, ..ModelConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn logits_shape_and_overlong() {
        let m = TransformerModel::new(tiny()).unwrap();
        let l = m.logits(&[1, 2, 3], None).unwrap();
        assert_eq!(l.shape(), &[3, 16]);
        let long: Vec<usize> = (0..11).map(|i| i % 16).collect();
        assert!(matches!(m.logits(&long, None), Err(Error::Overlong { len: 11, max: 10 })));
        assert!(matches!(m.logits(&[], None), Err(Error::Empty(_))));
    }

    #[test]
    fn later_tokens_do_not_change_earlier_logits() {
        let m = TransformerModel::new(tiny()).unwrap();
        let full = m.logits(&[1, 5, 2, 9, 4, 4, 7], None).unwrap();
        let prefix = m.logits(&[1, 5, 2, 9], None).unwrap();
        let altered = m.logits(&[1, 5, 2, 9, 0, 15, 3], None).unwrap();
        for r in 0..4 {
            for c in 0..16 {
                assert!((full.at(r, c) - prefix.at(r, c)).abs() < 1e-12);
                assert!((full.at(r, c) - altered.at(r, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Tensor::zeros(&[3, 64]);
        let seq = TokenSequence { ids: vec![1, 2, 7], span: 2..3 };
        assert!((action_nll(&logits, &seq).unwrap() - 64f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn prompt_labels_do_not_affect_loss() {
        let m = TransformerModel::new(tiny()).unwrap();
        let a = TokenSequence { ids: vec![1, 2, 3, 4, 5], span: 3..5 };
        let mut b = a.clone();
        b.ids[1] = 9;
        let la = m.logits(&a.ids, None).unwrap();
        // Same logits, different prompt label: the loss only reads span targets.
        assert_eq!(action_nll(&la, &a).unwrap(), action_nll(&la, &b).unwrap());
        let empty = TokenSequence::prompt(vec![1, 2]);
        assert!(matches!(action_nll(&m.logits(&empty.ids, None).unwrap(), &empty), Err(Error::Empty(_))));
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let m = TransformerModel::new(tiny()).unwrap();
        let seq = TokenSequence { ids: vec![1, 4, 2, 7, 3, 9], span: 3..6 };
        let targets = seq.targets();
        for idx in 0..m.params().len() {
            let f = |tape: &mut Tape, x| {
                let mut p = m.bind(tape, false)?;
                p.vars[idx] = x;
                let out = m.forward(tape, &p, Input::Tokens(&seq.ids), None)?;
                tape.cross_entropy(out.logits, &targets)
            };
            let err = grad_check(f, &m.params()[idx], 1e-5).unwrap();
            assert!(err < 1e-4, "param {idx}: {err}");
        }
    }

    #[test]
    fn embedding_input_matches_token_input() {
        let m = TransformerModel::new(tiny()).unwrap();
        let ids = [3, 1, 4, 1, 5];
        let direct = m.logits(&ids, None).unwrap();
        let mut tape = Tape::inference();
        let p = m.bind(&mut tape, false).unwrap();
        let emb = tape.embedding(p.vars[0], &ids).unwrap();
        let out = m.forward(&mut tape, &p, Input::Embeddings(emb), None).unwrap();
        assert!(tape.value(out.logits).bitwise_eq(&direct));
    }

    #[test]
    fn greedy_decoding_respects_budget() {
        let m = TransformerModel::new(tiny()).unwrap();
        let out = m.decode_greedy(&[1, 2], usize::MAX, 4, None).unwrap();
        assert!(matches!(out, DecodeOutcome::Exhausted(ref t) if t.len() == 4));
        let first = argmax(m.logits(&[1, 2], None).unwrap().row(1));
        let stop = m.decode_greedy(&[1, 2], first, 4, None).unwrap();
        assert_eq!(stop, DecodeOutcome::Finished(vec![first]));
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let m = TransformerModel::new(tiny()).unwrap();
        m.save(&path).unwrap();
        let back = TransformerModel::load(&path).unwrap();
        assert_eq!(m, back);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(TransformerModel::load(&path), Err(Error::Format { .. })));

        let mut bumped = bytes.clone();
        bumped[4] = 9;
        std::fs::write(&path, &bumped).unwrap();
        assert!(matches!(TransformerModel::load(&path), Err(Error::Version { expected: 1, found: 9 })));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = TransformerModel::new(tiny()).unwrap();
        let b = TransformerModel::new(tiny()).unwrap();
        let c = TransformerModel::new(ModelConfig { seed: 4, ..tiny() }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
