use super::*;
use crate::adapter::{compose, init_adapter, AdapterConfig, LowRankAdapter};
use crate::model::ModelConfig;

fn tiny() -> ModelConfig {
    ModelConfig { vocab_size: 16, hidden: 8, layers: 2, heads: 2, d_ff: 12, max_seq_len: 12, seed: 7 }
}

fn random_adapter(tool: u32, cfg: &ModelConfig, rng: &mut Rng) -> LowRankAdapter {
    let mut a = init_adapter(tool, AdapterConfig { rank: 2, scale: 4.0, ..AdapterConfig::default() }, cfg, rng).unwrap();
    for t in a.tensors_mut() {
        let fresh = rng.normal_vec(t.numel(), 0.2);
        t.data_mut().copy_from_slice(&fresh);
    }
    a
}

fn sequence() -> TokenSequence {
    TokenSequence { ids: vec![1, 4, 2, 9, 3, 5, 7], span: 4..7 }
}

#[test]
fn rho_examples() {
    let case = |a: Vec<f64>, b: Vec<f64>| estimate_rho(&[vec![a, b]]).unwrap().0;
    assert_eq!(case(vec![1.0, 0.0], vec![0.0, 1.0]), 0.0);
    assert_eq!(case(vec![0.6, 0.8], vec![0.6, 0.8]), 1.0);
    assert_eq!(case(vec![1.0, 0.0], vec![-1.0, 0.0]), 0.0);
}

#[test]
fn rho_skips_zero_gradients() {
    let (rho, excluded) = estimate_rho(&[vec![vec![1.0, 0.0], vec![0.0, 0.0], vec![1.0, 1.0]]]).unwrap();
    assert_eq!(excluded, 1);
    assert!((rho - 0.5f64.sqrt()).abs() < 1e-15);
    assert!(estimate_rho(&[vec![vec![0.0], vec![1.0]]]).is_err());
}

#[test]
fn g_delta_examples() {
    let grads = vec![vec![1.0, 0.0]];
    let alpha = [1.0];
    let s = CompositionSample { tool_grads: &grads, alpha: &alpha, composed: &grads[0] };
    assert_eq!(estimate_g_delta(&[s]), (1.0, 0.0));

    let grads = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
    let alpha = [0.5, 0.5];
    let composed = [0.5, 0.5 + 0.3];
    let s = CompositionSample { tool_grads: &grads, alpha: &alpha, composed: &composed };
    let (g, d) = estimate_g_delta(&[s]);
    assert_eq!(g, 1.0);
    assert!((d - 0.3).abs() < 1e-15);
}

#[test]
fn bound_examples() {
    assert!((gradient_bound(1.0, 0.0, &[0.5, 0.5], 0.0).unwrap() - 0.70711).abs() < 1e-5);
    assert!((gradient_bound(2.0, 0.5, &[0.5, 0.5], 0.1).unwrap() - 1.83205).abs() < 1e-5);
    for rho in [0.0, 0.3, 1.0] {
        assert_eq!(gradient_bound(1.7, rho, &[0.0, 1.0, 0.0], 0.2).unwrap(), 1.7 + 0.2);
    }
    assert!(gradient_bound(1.0, 0.0, &[0.6, 0.6], 0.0).is_err());
    assert!(gradient_bound(1.0, 1.5, &[1.0], 0.0).is_err());
}

#[test]
fn bound_monotone_in_alpha_norm() {
    // α = (t, 1−t) with t ∈ [0.5, 1] sweeps ‖α‖² from 1/2 to 1.
    let grid: Vec<Vec<f64>> = (0..=50).map(|k| 0.5 + k as f64 / 100.0).map(|t| vec![t, 1.0 - t]).collect();
    for rho in [0.0, 0.25, 0.9] {
        let b: Vec<f64> = grid.iter().map(|a| gradient_bound(1.3, rho, a, 0.05).unwrap()).collect();
        assert!(b.windows(2).all(|w| w[0] < w[1]), "rho {rho}");
    }
    let b: Vec<f64> = grid.iter().map(|a| gradient_bound(1.3, 1.0, a, 0.05).unwrap()).collect();
    assert!(b.iter().all(|&v| v == b[0]));
}

#[test]
fn radius_examples() {
    assert!((radius_lower_bound(0.0, 1.0, 0.5).unwrap() - 1.0).abs() < 1e-15);
    assert!((radius_lower_bound(1.0, 1.0, 0.5).unwrap() - 0.41421).abs() < 1e-5);
    assert!((radius_lower_bound(1.0, 2.0, 1.0).unwrap() - 0.61803).abs() < 1e-5);
    assert_eq!(radius_lower_bound(2.0, 0.0, 0.5).unwrap(), 0.25);
    assert!(matches!(radius_lower_bound(0.0, 0.0, 0.5), Err(Error::UnboundedRadius)));
    assert!(radius_lower_bound(1.0, 1.0, 0.0).is_err());
}

#[test]
fn radius_monotone_in_gradient_norm() {
    for beta in [0.0, 0.5, 3.0] {
        let r: Vec<f64> = (1..200).map(|k| radius_lower_bound(k as f64 * 0.05, beta, 0.2).unwrap()).collect();
        assert!(r.windows(2).all(|w| w[0] > w[1]), "beta {beta}");
    }
}

#[test]
fn beta_of_quadratic_and_linear_losses() {
    let x = vec![0.3, -1.2, 2.0, 0.7];
    let quad = |v: &[f64]| Ok(0.5 * v.iter().map(|a| a * a).sum::<f64>());
    let b = estimate_beta(quad, &x, &x, 64, 1e-3, 1e-1, &mut Rng::new(1)).unwrap();
    assert!((b - 1.0).abs() < 1e-8, "{b}");

    let w = [1.0, -2.0, 0.5, 3.0];
    let lin = |v: &[f64]| Ok(dot(&w, v) + 4.0);
    let b = estimate_beta(lin, &x, &w, 64, 1e-3, 1e-1, &mut Rng::new(1)).unwrap();
    assert!((0.0..1e-8).contains(&b), "{b}");
    assert!(estimate_beta(lin, &x, &w, 0, 1e-3, 1e-1, &mut Rng::new(1)).is_err());
}

#[test]
fn input_gradient_matches_finite_differences() {
    let cfg = tiny();
    let model = TransformerModel::new(cfg).unwrap();
    let mut rng = Rng::new(3);
    let (a, b) = (random_adapter(0, &cfg, &mut rng), random_adapter(1, &cfg, &mut rng));
    let delta = compose(&[&a, &b], &[0.3, 0.7]).unwrap();
    let seq = sequence();
    let g = input_gradient(&model, Some(&delta), &seq).unwrap();
    assert_eq!(g.grad.len(), seq.len() * cfg.hidden);
    let h = 1e-5;
    let mut fd = vec![0.0; g.grad.len()];
    for (i, slot) in fd.iter_mut().enumerate() {
        let mut plus = g.embeddings.clone();
        plus.data_mut()[i] += h;
        let mut minus = g.embeddings.clone();
        minus.data_mut()[i] -= h;
        let jp = loss_at(&model, Some(&delta), &seq, &plus).unwrap();
        let jm = loss_at(&model, Some(&delta), &seq, &minus).unwrap();
        *slot = (jp - jm) / (2.0 * h);
    }
    let diff: Vec<f64> = fd.iter().zip(&g.grad).map(|(x, y)| x - y).collect();
    assert!(norm(&diff) <= 1e-4 * norm(&g.grad), "{} vs {}", norm(&diff), norm(&g.grad));
    assert_eq!(loss_at(&model, Some(&delta), &seq, &g.embeddings).unwrap(), g.loss);
}

#[test]
fn one_hot_gradient_equals_single_adapter() {
    let cfg = tiny();
    let model = TransformerModel::new(cfg).unwrap();
    let mut rng = Rng::new(4);
    let (a, b) = (random_adapter(0, &cfg, &mut rng), random_adapter(1, &cfg, &mut rng));
    let seq = sequence();
    let hot = input_gradient(&model, Some(&compose(&[&a, &b], &[0.0, 1.0]).unwrap()), &seq).unwrap();
    let single = input_gradient(&model, Some(&compose(&[&b], &[1.0]).unwrap()), &seq).unwrap();
    assert_eq!(hot, single);
}

#[test]
fn saturated_instance_has_vanishing_gradient() {
    let cfg = tiny();
    let mut model = TransformerModel::new(cfg).unwrap();
    let n = model.params().len();
    let target = 5;
    let params = model.params_mut();
    // Final norm gain 0: the output no longer depends on the input.
    params[n - 3].data_mut().fill(0.0);
    params[n - 2].data_mut().fill(0.0);
    params[n - 2].data_mut()[0] = 1.0;
    params[n - 1].data_mut().fill(0.0);
    params[n - 1].data_mut()[target * cfg.hidden] = 60.0;
    let seq = TokenSequence { ids: vec![1, 2, target, target], span: 2..4 };
    let g = input_gradient(&model, None, &seq).unwrap();
    assert!(g.loss < 1e-20);
    assert!(g.norm() < 1e-6);
}

#[test]
fn report_holds_bound_inside_manifest() {
    let cfg = tiny();
    let model = TransformerModel::new(cfg).unwrap();
    let mut rng = Rng::new(9);
    let adapters: Vec<LowRankAdapter> = (0..4).map(|t| random_adapter(t, &cfg, &mut rng)).collect();
    let instances: Vec<TheoryInstance<'_>> = (0..4)
        .map(|k| {
            let mut seq = sequence();
            seq.ids[0] = 1 + k;
            TheoryInstance {
                seq,
                adapters: adapters.iter().collect(),
                target: k % 4,
                gate: vec![0.1, 0.2, 0.3, 0.4],
            }
        })
        .collect();
    let config = TheoryConfig {
        inputs: 4,
        manifest_inputs: 3,
        alpha_draws: 10,
        heldout_draws: 12,
        beta_probes: 8,
        radius_probes: 20,
        ..TheoryConfig::default()
    };
    let report = soft_vs_hard_report(&model, &instances, &config, &Rng::new(2)).unwrap();
    assert_eq!(report.manifest_samples, 3 * (10 + 3));
    assert_eq!(report.estimates.manifest.len(), report.manifest_samples);
    assert_eq!(report.manifest_violations, 0);
    assert_eq!(report.records.len(), 4 * 3);
    assert!(report.estimates.rho <= 1.0 && report.estimates.rho >= 0.0);
    if report.estimates.rho < 1.0 {
        assert!(report.uniform_vs_one_hot.strict);
        assert!(report.uniform_vs_one_hot.bound_uniform < report.uniform_vs_one_hot.bound_one_hot);
    }
    for r in &report.records {
        assert!(r.beta >= 0.0 && r.epsilon > 0.0);
        assert!(r.radius.is_some());
    }
    let again = soft_vs_hard_report(&model, &instances, &config, &Rng::new(2)).unwrap();
    assert_eq!(report, again);
}
