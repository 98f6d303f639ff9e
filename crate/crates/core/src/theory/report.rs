use serde::{Deserialize, Serialize};

use crate::adapter::{compose, LowRankAdapter};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{TokenSequence, TransformerModel};
use crate::rng::Rng;

use super::{
    estimate_beta, estimate_g_delta, estimate_rho, input_gradient, loss_at, norm, radius_lower_bound, gradient_bound,
    CompositionSample, InputGradient,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryConfig {
    /// Instances that get per-regime records and radius probes.
    pub inputs: usize,
    /// Instances whose samples define the estimates.
    pub manifest_inputs: usize,
    /// Random weight vectors per manifest instance.
    pub alpha_draws: usize,
    /// Fresh weight vectors checked against the estimates afterwards.
    pub heldout_draws: usize,
    pub beta_probes: usize,
    pub probe_min: f64,
    pub probe_max: f64,
    /// Loss-increase budget as a fraction of the instance loss.
    pub epsilon_fraction: f64,
    pub radius_probes: usize,
    /// Relative slack when comparing a measured norm to its bound.
    pub tolerance: f64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            inputs: 20,
            manifest_inputs: 10,
            alpha_draws: 50,
            heldout_draws: 100,
            beta_probes: 64,
            probe_min: 1e-3,
            probe_max: 1e-1,
            epsilon_fraction: 0.1,
            radius_probes: 100,
            tolerance: 1e-12,
        }
    }
}

/// A document-free instance with its candidate adapters.
#[derive(Debug, Clone)]
pub struct TheoryInstance<'a> {
    pub seq: TokenSequence,
    pub adapters: Vec<&'a LowRankAdapter>,
    /// Position of the ground-truth tool among the candidates.
    pub target: usize,
    /// Gate weights over the same candidates.
    pub gate: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// One-hot at the ground-truth tool.
    Hard,
    /// Gate weights.
    Soft,
    Uniform,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Hard, Regime::Soft, Regime::Uniform];

    fn alpha(self, inst: &TheoryInstance<'_>) -> Vec<f64> {
        let n = inst.adapters.len();
        match self {
            Regime::Hard => (0..n).map(|i| if i == inst.target { 1.0 } else { 0.0 }).collect(),
            Regime::Soft => inst.gate.clone(),
            Regime::Uniform => vec![1.0 / n as f64; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryEstimates {
    pub g_max: f64,
    pub rho: f64,
    pub delta: f64,
    /// Zero-norm gradients left out of the alignment estimate.
    pub excluded_zero_gradients: usize,
    /// Instance index and weights of every manifest sample.
    pub manifest: Vec<(usize, Vec<f64>)>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOut {
    pub draws: usize,
    pub violations: usize,
    pub violation_rate: f64,
    /// Largest `‖g_α‖ − bound` among violations, `0` when none.
    pub max_excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRecord {
    pub instance: usize,
    pub regime: Regime,
    pub alpha_sq_norm: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub bound: f64,
    pub beta: f64,
    pub epsilon: f64,
    /// `None` when the loss is zero or the radius is unbounded.
    pub radius: Option<f64>,
    pub probe_pass_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSummary {
    pub regime: Regime,
    pub count: usize,
    pub mean_grad_norm: f64,
    pub std_grad_norm: f64,
    pub max_grad_norm: f64,
    pub mean_bound: f64,
    pub mean_radius: f64,
    pub probe_pass_rate: f64,
    pub min_instance_probe_pass_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformVsOneHot {
    pub candidates: usize,
    pub bound_uniform: f64,
    pub bound_one_hot: f64,
    pub strict: bool,
    pub pairs: usize,
    pub mean_uniform_norm: f64,
    pub std_uniform_norm: f64,
    pub mean_hard_norm: f64,
    pub std_hard_norm: f64,
    /// Fraction of inputs whose uniform-weight gradient is smaller than the one-hot one.
    pub uniform_smaller_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub estimates: TheoryEstimates,
    pub manifest_samples: usize,
    pub manifest_violations: usize,
    pub heldout: HeldOut,
    pub records: Vec<AlphaRecord>,
    pub regimes: Vec<RegimeSummary>,
    pub uniform_vs_one_hot: UniformVsOneHot,
}

fn gradient(model: &TransformerModel, inst: &TheoryInstance<'_>, alpha: &[f64]) -> Result<InputGradient> {
    let delta = compose(&inst.adapters, alpha)?;
    input_gradient(model, Some(&delta), &inst.seq)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

fn violates(measured: f64, bound: f64, tol: f64) -> bool {
    measured > bound * (1.0 + tol)
}

/// Estimates, bound checks and radius probes for hard, gate and uniform weights.
pub fn soft_vs_hard_report(
    model: &TransformerModel,
    instances: &[TheoryInstance<'_>],
    config: &TheoryConfig,
    rng: &Rng,
) -> Result<RobustnessReport> {
    if instances.iter().any(|i| i.adapters.len() < 2 || i.gate.len() != i.adapters.len() || i.target >= i.adapters.len()) {
        return Err(Error::Config("theory instances need at least two candidates and matching gate weights".into()));
    }
    let m = config.manifest_inputs.min(instances.len());
    if m == 0 {
        return Err(Error::Empty("theory instances"));
    }

    // Manifest: per-tool gradients plus composed gradients for random and regime weights.
    let mut draw = rng.substream("theory/manifest");
    let mut tool_grads = Vec::with_capacity(m);
    let mut manifest = Vec::new();
    let mut composed = Vec::new();
    for (x, inst) in instances[..m].iter().enumerate() {
        let n = inst.adapters.len();
        let grads = (0..n)
            .map(|i| {
                let hot: Vec<f64> = (0..n).map(|k| if k == i { 1.0 } else { 0.0 }).collect();
                Ok(gradient(model, inst, &hot)?.grad)
            })
            .collect::<Result<Vec<_>>>()?;
        tool_grads.push(grads);
        let mut alphas: Vec<Vec<f64>> = (0..config.alpha_draws).map(|_| draw.simplex(n)).collect();
        alphas.extend(Regime::ALL.iter().map(|r| r.alpha(inst)));
        for a in alphas {
            composed.push(gradient(model, inst, &a)?.grad);
            manifest.push((x, a));
        }
    }
    let (rho, excluded) = estimate_rho(&tool_grads)?;
    let samples: Vec<CompositionSample<'_>> = manifest
        .iter()
        .zip(&composed)
        .map(|((x, a), g)| CompositionSample { tool_grads: &tool_grads[*x], alpha: a, composed: g })
        .collect();
    let (g_max, delta) = estimate_g_delta(&samples);
    let manifest_samples = samples.len();
    let mut manifest_violations = 0;
    for s in &samples {
        let bound = gradient_bound(g_max, rho, s.alpha, delta)?;
        manifest_violations += usize::from(violates(norm(s.composed), bound, config.tolerance));
    }

    // Held-out weights on the manifest inputs.
    let mut fresh = rng.substream("theory/heldout");
    let (mut violations, mut max_excess) = (0usize, 0.0f64);
    for k in 0..config.heldout_draws {
        let inst = &instances[k % m];
        let a = fresh.simplex(inst.adapters.len());
        let g = gradient(model, inst, &a)?.norm();
        let bound = gradient_bound(g_max, rho, &a, delta)?;
        if violates(g, bound, config.tolerance) {
            violations += 1;
            max_excess = max_excess.max(g - bound);
        }
    }
    let heldout = HeldOut {
        draws: config.heldout_draws,
        violations,
        violation_rate: if config.heldout_draws == 0 { 0.0 } else { violations as f64 / config.heldout_draws as f64 },
        max_excess,
    };

    // Per-regime records with shared per-instance curvature.
    let mut records = Vec::new();
    for (x, inst) in instances.iter().take(config.inputs).enumerate() {
        let mut probe = rng.substream(&format!("theory/probe/{x}"));
        let regimes = Regime::ALL
            .iter()
            .map(|&r| {
                let a = r.alpha(inst);
                let g = gradient(model, inst, &a)?;
                Ok((r, a, g))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut beta: f64 = 0.0;
        for (_, a, g) in &regimes {
            let delta_a = compose(&inst.adapters, a)?;
            let shape = g.embeddings.shape().to_vec();
            let j = |v: &[f64]| loss_at(model, Some(&delta_a), &inst.seq, &Tensor::new(shape.clone(), v.to_vec())?);
            let b = estimate_beta(j, g.embeddings.data(), &g.grad, config.beta_probes, config.probe_min, config.probe_max, &mut probe)?;
            beta = beta.max(b);
        }
        for (r, a, g) in regimes {
            let delta_a = compose(&inst.adapters, &a)?;
            let eps = config.epsilon_fraction * g.loss;
            let gnorm = g.norm();
            let radius = if eps > 0.0 { radius_lower_bound(gnorm, beta, eps).ok() } else { None };
            let probe_pass_rate = match radius {
                Some(rad) if config.radius_probes > 0 => {
                    let j0 = loss_at(model, Some(&delta_a), &inst.seq, &g.embeddings)?;
                    let mut ok = 0;
                    for _ in 0..config.radius_probes {
                        let d = probe.sphere(g.grad.len(), rad);
                        let moved: Vec<f64> = g.embeddings.data().iter().zip(&d).map(|(p, q)| p + q).collect();
                        let emb = Tensor::new(g.embeddings.shape().to_vec(), moved)?;
                        let j1 = loss_at(model, Some(&delta_a), &inst.seq, &emb)?;
                        ok += usize::from(j1 - j0 <= eps);
                    }
                    Some(ok as f64 / config.radius_probes as f64)
                }
                _ => None,
            };
            records.push(AlphaRecord {
                instance: x,
                regime: r,
                alpha_sq_norm: a.iter().map(|v| v * v).sum(),
                loss: g.loss,
                grad_norm: gnorm,
                bound: gradient_bound(g_max, rho, &a, delta)?,
                beta,
                epsilon: eps,
                radius,
                probe_pass_rate,
            });
        }
    }

    let regimes = Regime::ALL
        .iter()
        .map(|&r| {
            let rs: Vec<&AlphaRecord> = records.iter().filter(|x| x.regime == r).collect();
            let norms: Vec<f64> = rs.iter().map(|x| x.grad_norm).collect();
            let (mean, std) = mean_std(&norms);
            let radii: Vec<f64> = rs.iter().filter_map(|x| x.radius).collect();
            let passes: Vec<f64> = rs.iter().filter_map(|x| x.probe_pass_rate).collect();
            RegimeSummary {
                regime: r,
                count: rs.len(),
                mean_grad_norm: mean,
                std_grad_norm: std,
                max_grad_norm: norms.iter().copied().fold(0.0, f64::max),
                mean_bound: mean_std(&rs.iter().map(|x| x.bound).collect::<Vec<_>>()).0,
                mean_radius: mean_std(&radii).0,
                probe_pass_rate: mean_std(&passes).0,
                min_instance_probe_pass_rate: passes.iter().copied().fold(1.0, f64::min),
            }
        })
        .collect();

    let n = instances[0].adapters.len();
    let uniform = vec![1.0 / n as f64; n];
    let hot: Vec<f64> = (0..n).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
    let bound_uniform = gradient_bound(g_max, rho, &uniform, delta)?;
    let bound_one_hot = gradient_bound(g_max, rho, &hot, delta)?;
    let norms_of = |r: Regime| records.iter().filter(|x| x.regime == r).map(|x| x.grad_norm).collect::<Vec<_>>();
    let (un, hn) = (norms_of(Regime::Uniform), norms_of(Regime::Hard));
    let (mu, su) = mean_std(&un);
    let (mh, sh) = mean_std(&hn);
    let smaller = un.iter().zip(&hn).filter(|(u, h)| u < h).count();
    let uniform_vs_one_hot = UniformVsOneHot {
        candidates: n,
        bound_uniform,
        bound_one_hot,
        strict: bound_uniform < bound_one_hot,
        pairs: un.len(),
        mean_uniform_norm: mu,
        std_uniform_norm: su,
        mean_hard_norm: mh,
        std_hard_norm: sh,
        uniform_smaller_fraction: if un.is_empty() { 0.0 } else { smaller as f64 / un.len() as f64 },
    };

    Ok(RobustnessReport {
        estimates: TheoryEstimates { g_max, rho, delta, excluded_zero_gradients: excluded, manifest, seed: rng.seed() },
        manifest_samples,
        manifest_violations,
        heldout,
        records,
        regimes,
        uniform_vs_one_hot,
    })
}
