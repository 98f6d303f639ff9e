//! Robustness analysis of composed deltas: gradient-alignment and smoothness
//! estimates, the aggregated-gradient bound and certified loss radii.

mod report;

use crate::adapter::{check_simplex, ComposedDelta};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{Input, TokenSequence, TransformerModel};
use crate::rng::Rng;

pub use report::{
    soft_vs_hard_report, AlphaRecord, UniformVsOneHot, HeldOut, Regime, RegimeSummary, RobustnessReport, TheoryConfig,
    TheoryEstimates, TheoryInstance,
};

/// Loss and its gradient with respect to the input token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGradient {
    pub loss: f64,
    /// Token embeddings of the sequence (`S×h`), the point of differentiation.
    pub embeddings: Tensor,
    pub grad: Vec<f64>,
}

impl InputGradient {
    pub fn norm(&self) -> f64 {
        norm(&self.grad)
    }
}

fn token_embeddings(model: &TransformerModel, ids: &[usize]) -> Result<Tensor> {
    let table = model.token_embedding();
    let h = table.cols();
    let mut data = Vec::with_capacity(ids.len() * h);
    for &id in ids {
        if id >= table.rows() {
            return Err(Error::OutOfVocabulary(id.to_string()));
        }
        data.extend_from_slice(table.row(id));
    }
    Tensor::matrix(ids.len(), h, data)
}

/// Action-span loss with the given embeddings in place of the token lookup.
pub fn loss_at(model: &TransformerModel, delta: Option<&ComposedDelta<'_>>, seq: &TokenSequence, emb: &Tensor) -> Result<f64> {
    let mut tape = Tape::inference();
    let p = model.bind(&mut tape, false)?;
    let hook = delta.map(|d| d.bind(&mut tape, false)).transpose()?;
    let x = tape.constant(emb.clone())?;
    let out = model.forward(&mut tape, &p, Input::Embeddings(x), hook.as_ref().map(|h| h as _))?;
    let loss = tape.cross_entropy(out.logits, &seq.targets())?;
    Ok(tape.value(loss).item())
}

pub fn input_gradient(model: &TransformerModel, delta: Option<&ComposedDelta<'_>>, seq: &TokenSequence) -> Result<InputGradient> {
    let embeddings = token_embeddings(model, &seq.ids)?;
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false)?;
    let hook = delta.map(|d| d.bind(&mut tape, false)).transpose()?;
    let x = tape.leaf(embeddings.clone())?;
    let out = model.forward(&mut tape, &p, Input::Embeddings(x), hook.as_ref().map(|h| h as _))?;
    let loss = tape.cross_entropy(out.logits, &seq.targets())?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    Ok(InputGradient { loss: value, embeddings, grad: grads.wrt(x).into_data() })
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Floored supremum of pairwise cosine similarity between different tools'
/// gradients at the same input. `per_input[x][i]` is tool `i`'s gradient at
/// input `x`. Zero-norm gradients are skipped and counted.
pub fn estimate_rho(per_input: &[Vec<Vec<f64>>]) -> Result<(f64, usize)> {
    let mut rho: f64 = 0.0;
    let mut excluded = 0;
    let mut pairs = 0;
    for grads in per_input {
        let norms: Vec<f64> = grads.iter().map(|g| norm(g)).collect();
        excluded += norms.iter().filter(|&&n| n == 0.0).count();
        for i in 0..grads.len() {
            for j in i + 1..grads.len() {
                if norms[i] == 0.0 || norms[j] == 0.0 {
                    continue;
                }
                pairs += 1;
                let cos = dot(&grads[i], &grads[j]) / (norms[i] * norms[j]);
                rho = rho.max(cos.min(1.0));
            }
        }
    }
    if pairs == 0 {
        return Err(Error::Empty("gradient pairs with nonzero norm"));
    }
    if excluded > 0 {
        log::warn!("{excluded} zero-norm gradients excluded from the alignment estimate");
    }
    Ok((rho, excluded))
}

/// One manifest entry: per-tool gradients at an input, a weight vector, and
/// the gradient under that composition.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositionSample<'a> {
    pub tool_grads: &'a [Vec<f64>],
    pub alpha: &'a [f64],
    pub composed: &'a [f64],
}

/// Aggregation residual `‖g_α − Σ α_i g_i‖`.
pub fn residual(sample: &CompositionSample<'_>) -> f64 {
    let mut r = sample.composed.to_vec();
    for (g, &a) in sample.tool_grads.iter().zip(sample.alpha) {
        for (x, y) in r.iter_mut().zip(g) {
            *x -= a * y;
        }
    }
    norm(&r)
}

/// `(G, δ)`: largest per-tool gradient norm and largest residual over the samples.
pub fn estimate_g_delta(samples: &[CompositionSample<'_>]) -> (f64, f64) {
    let mut g: f64 = 0.0;
    let mut d: f64 = 0.0;
    for s in samples {
        for t in s.tool_grads {
            g = g.max(norm(t));
        }
        d = d.max(residual(s));
    }
    (g, d)
}

/// `G·√(ρ + (1−ρ)‖α‖²) + δ`.
pub fn gradient_bound(g: f64, rho: f64, alpha: &[f64], delta: f64) -> Result<f64> {
    check_simplex(alpha)?;
    if g < 0.0 || delta < 0.0 || !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!("bound inputs out of range: G={g}, rho={rho}, delta={delta}")));
    }
    let sq: f64 = alpha.iter().map(|a| a * a).sum();
    Ok(g * (rho + (1.0 - rho) * sq).sqrt() + delta)
}

/// Radius within which a β-smooth loss with gradient norm `gnorm` rises by at
/// most `eps`: `(√(gnorm² + 2βε) − gnorm)/β`, evaluated in the equivalent
/// form `2ε/(√(gnorm² + 2βε) + gnorm)` so that `β → 0` gives `ε/gnorm`.
pub fn radius_lower_bound(gnorm: f64, beta: f64, eps: f64) -> Result<f64> {
    if gnorm < 0.0 || beta < 0.0 || eps <= 0.0 || !gnorm.is_finite() || !beta.is_finite() || !eps.is_finite() {
        return Err(Error::Config(format!("radius inputs out of range: g={gnorm}, beta={beta}, eps={eps}")));
    }
    if beta == 0.0 && gnorm == 0.0 {
        return Err(Error::UnboundedRadius);
    }
    Ok(2.0 * eps / ((gnorm * gnorm + 2.0 * beta * eps).sqrt() + gnorm))
}

/// Largest observed curvature `2(J(x+δ) − J(x) − ⟨g,δ⟩)/‖δ‖²` over random
/// directions with norms log-uniform in `[min_norm, max_norm]`, floored at 0.
pub fn estimate_beta<F>(j: F, x: &[f64], grad: &[f64], probes: usize, min_norm: f64, max_norm: f64, rng: &mut Rng) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if probes == 0 {
        return Err(Error::Empty("probes"));
    }
    if !(min_norm > 0.0 && max_norm >= min_norm) {
        return Err(Error::Config("probe norms must satisfy 0 < min <= max".into()));
    }
    let j0 = j(x)?;
    let mut beta: f64 = 0.0;
    for _ in 0..probes {
        let r = (min_norm.ln() + rng.uniform() * (max_norm / min_norm).ln()).exp();
        let d = rng.sphere(x.len(), r);
        let moved: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + b).collect();
        let j1 = j(&moved)?;
        if !j1.is_finite() {
            return Err(Error::NonFinite("beta probe"));
        }
        let dn2: f64 = d.iter().map(|v| v * v).sum();
        beta = beta.max(2.0 * (j1 - j0 - dot(grad, &d)) / dn2);
    }
    Ok(beta)
}

#[cfg(test)]
mod tests;
