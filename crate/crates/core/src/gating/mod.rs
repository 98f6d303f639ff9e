//! Soft tool selection: frozen-encoder embeddings, a feature MLP scoring each
//! candidate, and entropy-regularized training.

mod cache;

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{write_tensors, ByteReader, TransformerModel};
use crate::pipeline::optim::{AdamW, OptimConfig};
use crate::rng::Rng;
use crate::synth::ToolId;

pub use cache::EmbeddingCache;

const MAGIC: &[u8; 4] = b"PTGT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    pub hidden: usize,
    pub depth: usize,
    /// Entropy bonus weight.
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self { hidden: 128, depth: 3, lambda: 0.8, lr: 5e-4, epochs: 3, batch_size: 8 }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.hidden == 0 {
            return Err(Error::Config("gate depth and hidden width must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("gate lambda must be >= 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("gate batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Probability weights over a candidate list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionWeights {
    pub candidates: Vec<ToolId>,
    pub weights: Vec<f64>,
}

impl CompositionWeights {
    pub fn uniform(candidates: &[ToolId]) -> Self {
        let n = candidates.len() as f64;
        Self { candidates: candidates.to_vec(), weights: vec![1.0 / n; candidates.len()] }
    }

    pub fn one_hot(candidates: &[ToolId], pick: ToolId) -> Result<Self> {
        if !candidates.contains(&pick) {
            return Err(Error::TargetNotCandidate(pick.to_string()));
        }
        let weights = candidates.iter().map(|&c| if c == pick { 1.0 } else { 0.0 }).collect();
        Ok(Self { candidates: candidates.to_vec(), weights })
    }

    /// Highest-weight tool; ties go to the smaller id.
    pub fn argmax(&self) -> ToolId {
        let mut best = 0;
        for i in 1..self.weights.len() {
            let (w, b) = (self.weights[i], self.weights[best]);
            if w > b || (w == b && self.candidates[i] < self.candidates[best]) {
                best = i;
            }
        }
        self.candidates[best]
    }

    pub fn entropy(&self) -> f64 {
        entropy(&self.weights)
    }

    pub fn weight_of(&self, tool: ToolId) -> Option<f64> {
        self.candidates.iter().position(|&c| c == tool).map(|i| self.weights[i])
    }
}

pub fn entropy(weights: &[f64]) -> f64 {
    -weights.iter().filter(|&&a| a > 0.0).map(|a| a * a.ln()).sum::<f64>()
}

/// Keeps the `n` heaviest candidates (ties by smaller id) and renormalizes.
pub fn top_n(alpha: &CompositionWeights, n: usize) -> CompositionWeights {
    let n = n.max(1);
    if n >= alpha.candidates.len() {
        return alpha.clone();
    }
    let mut order: Vec<usize> = (0..alpha.candidates.len()).collect();
    order.sort_by(|&i, &j| {
        alpha.weights[j].total_cmp(&alpha.weights[i]).then(alpha.candidates[i].cmp(&alpha.candidates[j]))
    });
    let mut kept: Vec<usize> = order[..n].to_vec();
    kept.sort_unstable();
    let total: f64 = kept.iter().map(|&i| alpha.weights[i]).sum();
    let candidates = kept.iter().map(|&i| alpha.candidates[i]).collect();
    let weights = if total > 0.0 {
        kept.iter().map(|&i| alpha.weights[i] / total).collect()
    } else {
        vec![1.0 / n as f64; n]
    };
    CompositionWeights { candidates, weights }
}

/// `−ln α_target − λ·H(α)`.
pub fn gate_loss(alpha: &[f64], target: usize, lambda: f64) -> Result<f64> {
    let a = *alpha.get(target).ok_or_else(|| Error::TargetNotCandidate(target.to_string()))?;
    Ok(-a.ln() - lambda * entropy(alpha))
}

/// Final-layer state at the last position of a prompt.
pub fn encode_context(model: &TransformerModel, prompt: &[usize]) -> Result<Vec<f64>> {
    if prompt.is_empty() {
        return Err(Error::Empty("prompt"));
    }
    model.last_hidden(prompt)
}

pub fn encode_tool(model: &TransformerModel, document: &[usize]) -> Result<Vec<f64>> {
    if document.is_empty() {
        return Err(Error::Empty("tool document"));
    }
    model.last_hidden(document)
}

/// Rows `[c ‖ d ‖ c⊙d ‖ |c−d|]`, one per candidate.
pub fn features(c: &[f64], docs: &[Vec<f64>]) -> Result<Tensor> {
    let h = c.len();
    let mut data = Vec::with_capacity(docs.len() * 4 * h);
    for d in docs {
        if d.len() != h {
            return Err(Error::shape("features", format!("context dim {h}, document dim {}", d.len())));
        }
        data.extend_from_slice(c);
        data.extend_from_slice(d);
        data.extend(c.iter().zip(d).map(|(x, y)| x * y));
        data.extend(c.iter().zip(d).map(|(x, y)| (x - y).abs()));
    }
    Tensor::matrix(docs.len(), 4 * h, data)
}

/// MLP mapping a `4h` feature row to a scalar score.
#[derive(Debug, Clone, PartialEq)]
pub struct GateNetwork {
    input: usize,
    hidden: usize,
    /// `(W, b)` per linear layer; `W` is `out×in`.
    layers: Vec<(Tensor, Tensor)>,
}

impl GateNetwork {
    pub fn new(encoder_dim: usize, config: &GateConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let input = 4 * encoder_dim;
        let mut layers = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let fan_in = if l == 0 { input } else { config.hidden };
            let out = if l + 1 == config.depth { 1 } else { config.hidden };
            let std = (2.0 / fan_in as f64).sqrt();
            let w = Tensor::matrix(out, fan_in, rng.normal_vec(out * fan_in, std))?;
            layers.push((w, Tensor::vector(vec![0.0; out])));
        }
        Ok(Self { input, hidden: config.hidden, layers })
    }

    /// Same architecture with every parameter zero.
    pub fn zeroed(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|(w, b)| (Tensor::zeros(w.shape()), Tensor::zeros(b.shape())))
            .collect();
        Self { input: self.input, hidden: self.hidden, layers }
    }

    pub fn input_dim(&self) -> usize {
        self.input
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<Var>> {
        self.params()
            .into_iter()
            .map(|p| if trainable { tape.leaf(p.clone()) } else { tape.constant(p.clone()) })
            .collect()
    }

    /// Scores as a `1×N` row.
    pub fn scores_tape(&self, tape: &mut Tape, vars: &[Var], feats: Var) -> Result<Var> {
        let n = tape.value(feats).rows();
        if tape.value(feats).cols() != self.input {
            return Err(Error::shape("gate", format!("feature width {} vs {}", tape.value(feats).cols(), self.input)));
        }
        let mut x = feats;
        for (l, pair) in vars.chunks(2).enumerate() {
            x = tape.matmul_t(x, pair[0])?;
            x = tape.add_row(x, pair[1])?;
            if l + 1 < self.layers.len() {
                x = tape.relu(x)?;
            }
        }
        tape.reshape(x, &[1, n])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        for x in [self.input, self.hidden, self.layers.len()] {
            buf.extend_from_slice(&(x as u64).to_le_bytes());
        }
        let tensors: Vec<Tensor> = self.params().into_iter().cloned().collect();
        write_tensors(&mut buf, &tensors);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut r = ByteReader::new(&bytes, path);
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "not a gate checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version { expected: VERSION, found: version });
        }
        let input = r.u64()? as usize;
        let hidden = r.u64()? as usize;
        let depth = r.u64()? as usize;
        if depth == 0 || input == 0 || hidden == 0 || depth > 64 {
            return Err(Error::format(path, "bad gate dimensions"));
        }
        let mut layers = Vec::with_capacity(depth);
        for l in 0..depth {
            let fan_in = if l == 0 { input } else { hidden };
            let out = if l + 1 == depth { 1 } else { hidden };
            let w = r.tensor(vec![out, fan_in])?;
            let b = r.tensor(vec![out])?;
            layers.push((w, b));
        }
        r.finish()?;
        Ok(Self { input, hidden, layers })
    }
}

/// Softmax weights over the candidates.
pub fn gate_scores(gate: &GateNetwork, c: &[f64], docs: &[Vec<f64>], candidates: &[ToolId]) -> Result<CompositionWeights> {
    if docs.is_empty() {
        return Err(Error::Empty("candidate list"));
    }
    if docs.len() != candidates.len() {
        return Err(Error::shape("gate_scores", format!("{} documents, {} candidates", docs.len(), candidates.len())));
    }
    let mut tape = Tape::inference();
    let vars = gate.bind(&mut tape, false)?;
    let f = tape.constant(features(c, docs)?)?;
    let s = gate.scores_tape(&mut tape, &vars, f)?;
    let a = tape.softmax(s)?;
    Ok(CompositionWeights { candidates: candidates.to_vec(), weights: tape.value(a).data().to_vec() })
}

/// Loss on a tape from `1×N` scores; returns `(loss, α)`.
pub fn gate_loss_tape(tape: &mut Tape, scores: Var, target: usize, lambda: f64) -> Result<(Var, Var)> {
    let n = tape.value(scores).cols();
    if target >= n {
        return Err(Error::TargetNotCandidate(target.to_string()));
    }
    let logp = tape.log_softmax(scores)?;
    let alpha = tape.softmax(scores)?;
    let nll = tape.nll(logp, &[Some(target)])?;
    if lambda == 0.0 {
        return Ok((nll, alpha));
    }
    let plogp = tape.mul(alpha, logp)?;
    let neg_h = tape.sum(plogp)?;
    let bonus = tape.scale(neg_h, lambda)?;
    Ok((tape.add(nll, bonus)?, alpha))
}

/// One encoded gate sample: context, candidate documents and the target position.
#[derive(Debug, Clone, PartialEq)]
pub struct GateSample {
    pub context: Vec<f64>,
    pub docs: Vec<Vec<f64>>,
    pub candidates: Vec<ToolId>,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_entropy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateMetrics {
    pub accuracy: f64,
    pub mean_entropy: f64,
    pub mean_loss: f64,
}

pub fn evaluate_gate(gate: &GateNetwork, samples: &[GateSample], lambda: f64) -> Result<GateMetrics> {
    if samples.is_empty() {
        return Ok(GateMetrics { accuracy: 0.0, mean_entropy: 0.0, mean_loss: 0.0 });
    }
    let (mut hits, mut ent, mut loss) = (0usize, 0.0, 0.0);
    for s in samples {
        let a = gate_scores(gate, &s.context, &s.docs, &s.candidates)?;
        hits += usize::from(a.argmax() == s.candidates[s.target]);
        ent += a.entropy();
        loss += gate_loss(&a.weights, s.target, lambda)?;
    }
    let n = samples.len() as f64;
    Ok(GateMetrics { accuracy: hits as f64 / n, mean_entropy: ent / n, mean_loss: loss / n })
}

/// Minimizes mean gate loss over `train`; logs one entry per epoch.
pub fn train_gate(
    train: &[GateSample],
    validation: &[GateSample],
    encoder_dim: usize,
    config: &GateConfig,
    optim: OptimConfig,
    rng: &Rng,
) -> Result<(GateNetwork, Vec<GateEpoch>)> {
    if train.is_empty() {
        return Err(Error::Empty("gate training set"));
    }
    for s in train.iter().chain(validation) {
        if s.target >= s.candidates.len() || s.docs.len() != s.candidates.len() {
            return Err(Error::TargetNotCandidate(s.target.to_string()));
        }
    }
    let mut gate = GateNetwork::new(encoder_dim, config, &mut rng.substream("gate/init"))?;
    let sizes: Vec<usize> = gate.params().iter().map(|p| p.numel()).collect();
    let mut opt = AdamW::new(optim, config.lr, &sizes);
    let mut log = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        rng.substream(&format!("gate/epoch{epoch}")).shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut acc: Vec<Tensor> = gate.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
            for &i in batch {
                let s = &train[i];
                let mut tape = Tape::new();
                let vars = gate.bind(&mut tape, true)?;
                let f = tape.constant(features(&s.context, &s.docs)?)?;
                let scores = gate.scores_tape(&mut tape, &vars, f)?;
                let (loss, _) = gate_loss_tape(&mut tape, scores, s.target, config.lambda)?;
                total += tape.value(loss).item();
                let grads = tape.backward(loss)?;
                for (a, v) in acc.iter_mut().zip(&vars) {
                    a.add_assign(&grads.wrt(*v));
                }
            }
            let inv = 1.0 / batch.len() as f64;
            let acc: Vec<Tensor> = acc.into_iter().map(|g| g.scaled(inv)).collect();
            opt.step(&mut gate.params_mut(), &acc);
        }
        let m = evaluate_gate(&gate, validation, config.lambda)?;
        log.push(GateEpoch {
            epoch,
            train_loss: total / train.len() as f64,
            val_accuracy: m.accuracy,
            val_entropy: m.mean_entropy,
        });
    }
    Ok((gate, log))
}

#[cfg(test)]
mod tests;
