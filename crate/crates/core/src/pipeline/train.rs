use serde::{Deserialize, Serialize};

use crate::adapter::{compose, AdapterStore, LowRankAdapter};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::gating::CompositionWeights;
use crate::model::{Input, TokenSequence, TransformerModel};
use crate::rng::Rng;
use crate::synth::ToolId;

use super::optim::{AdamW, OptimConfig};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    /// Linear warm-up over the first 5% of steps, then cosine decay to 10% of the peak.
    Cosine,
}

/// Learning rate, epochs and batch size of one training stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub schedule: Schedule,
}

impl PhaseConfig {
    pub fn new(lr: f64, epochs: usize, batch_size: usize) -> Self {
        Self { lr, epochs, batch_size, schedule: Schedule::Constant }
    }

    /// Learning rate at optimizer step `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let warm = (total / 20).max(1);
                if step < warm {
                    return self.lr * (step + 1) as f64 / warm as f64;
                }
                let progress = (step - warm) as f64 / (total - warm).max(1) as f64;
                let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos());
                self.lr * (0.1 + 0.9 * cos)
            }
        }
    }

    pub fn total_steps(&self, samples: usize) -> usize {
        self.epochs * samples.div_ceil(self.batch_size)
    }

    pub fn validate(&self, stage: &str) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() || self.batch_size == 0 {
            return Err(Error::Config(format!("{stage}: lr must be positive and batch_size at least 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// A training sequence with the composition it is trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSample {
    pub seq: TokenSequence,
    pub alpha: CompositionWeights,
}

fn shuffled(n: usize, rng: &Rng, tag: &str, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.substream(&format!("{tag}/epoch{epoch}")).shuffle(&mut order);
    order
}

fn mean_scaled(acc: Vec<Tensor>, n: usize) -> Vec<Tensor> {
    let inv = 1.0 / n as f64;
    acc.into_iter().map(|g| g.scaled(inv)).collect()
}

/// Mean span NLL of `seqs` under an optional single composition.
pub fn mean_nll(model: &TransformerModel, seqs: &[TokenSequence], adapters: &[&LowRankAdapter], weights: &[f64]) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::Empty("evaluation sequences"));
    }
    let delta = if adapters.is_empty() { None } else { Some(compose(adapters, weights)?) };
    let mut total = 0.0;
    for s in seqs {
        let mut tape = Tape::inference();
        let p = model.bind(&mut tape, false)?;
        let hook = delta.as_ref().map(|d| d.bind(&mut tape, false)).transpose()?;
        let out = model.forward(&mut tape, &p, Input::Tokens(&s.ids), hook.as_ref().map(|h| h as _))?;
        let loss = tape.cross_entropy(out.logits, &s.targets())?;
        total += tape.value(loss).item();
    }
    Ok(total / seqs.len() as f64)
}

/// Full-parameter training of the backbone on action-span NLL.
pub fn warm_up_backbone(
    model: &mut TransformerModel,
    train: &[TokenSequence],
    validation: &[TokenSequence],
    phase: PhaseConfig,
    optim: OptimConfig,
    rng: &Rng,
) -> Result<Vec<EpochLog>> {
    phase.validate("warmup")?;
    if train.is_empty() {
        return Err(Error::Empty("warm-up corpus"));
    }
    let sizes: Vec<usize> = model.params().iter().map(Tensor::numel).collect();
    let mut opt = AdamW::new(optim, phase.lr, &sizes);
    let total_steps = phase.total_steps(train.len());
    let mut log = Vec::with_capacity(phase.epochs);
    for epoch in 0..phase.epochs {
        let order = shuffled(train.len(), rng, "warmup", epoch);
        let mut total = 0.0;
        for batch in order.chunks(phase.batch_size) {
            let mut acc: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
            for &i in batch {
                let s = &train[i];
                let mut tape = Tape::new();
                let p = model.bind(&mut tape, true)?;
                let out = model.forward(&mut tape, &p, Input::Tokens(&s.ids), None)?;
                let loss = tape.cross_entropy(out.logits, &s.targets())?;
                total += tape.value(loss).item();
                let grads = tape.backward(loss)?;
                for (a, v) in acc.iter_mut().zip(&p.vars) {
                    if let Some(g) = grads.get(*v) {
                        a.add_assign(g);
                    }
                }
            }
            let grads = mean_scaled(acc, batch.len());
            opt.set_lr(phase.lr_at(opt.steps() as usize, total_steps));
            opt.step(&mut model.params_mut().iter_mut().collect::<Vec<_>>(), &grads);
        }
        let val_loss = if validation.is_empty() { None } else { Some(mean_nll(model, validation, &[], &[])?) };
        log.push(EpochLog { epoch, train_loss: total / train.len() as f64, val_loss });
    }
    Ok(log)
}

/// Trains one tool's adapter on its own instances with the base frozen.
pub fn pretrain_tool(
    model: &TransformerModel,
    adapter: &mut LowRankAdapter,
    train: &[TokenSequence],
    validation: &[TokenSequence],
    phase: PhaseConfig,
    optim: OptimConfig,
    rng: &Rng,
) -> Result<Vec<EpochLog>> {
    phase.validate("pretrain")?;
    if train.is_empty() {
        return Err(Error::Empty("tool training set"));
    }
    let sizes: Vec<usize> = adapter.tensors().iter().map(|t| t.numel()).collect();
    let mut opt = AdamW::new(optim, phase.lr, &sizes);
    let total_steps = phase.total_steps(train.len());
    let tag = format!("pretrain/{}", adapter.tool);
    let mut log = Vec::with_capacity(phase.epochs + 1);
    if !validation.is_empty() {
        let v = mean_nll(model, validation, &[adapter], &[1.0])?;
        log.push(EpochLog { epoch: 0, train_loss: f64::NAN, val_loss: Some(v) });
    }
    for epoch in 0..phase.epochs {
        let order = shuffled(train.len(), rng, &tag, epoch);
        let mut total = 0.0;
        for batch in order.chunks(phase.batch_size) {
            let mut acc: Vec<Tensor> = adapter.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            {
                let delta = compose(&[&*adapter], &[1.0])?;
                for &i in batch {
                    let s = &train[i];
                    let mut tape = Tape::new();
                    let p = model.bind(&mut tape, false)?;
                    let bound = delta.bind(&mut tape, true)?;
                    let out = model.forward(&mut tape, &p, Input::Tokens(&s.ids), Some(&bound))?;
                    let loss = tape.cross_entropy(out.logits, &s.targets())?;
                    total += tape.value(loss).item();
                    let grads = tape.backward(loss)?;
                    for (a, v) in acc.iter_mut().zip(bound.terms[0].flat_vars()) {
                        a.add_assign(&grads.wrt(v));
                    }
                }
            }
            let grads = mean_scaled(acc, batch.len());
            opt.set_lr(phase.lr_at(opt.steps() as usize, total_steps));
            opt.step(&mut adapter.tensors_mut(), &grads);
        }
        let val_loss = if validation.is_empty() { None } else { Some(mean_nll(model, validation, &[adapter], &[1.0])?) };
        log.push(EpochLog { epoch: epoch + 1, train_loss: total / train.len() as f64, val_loss });
    }
    Ok(log)
}

/// Fine-tunes every adapter that appears in a composition, with gradients
/// flowing through the weighted deltas; the base and the gate stay fixed.
pub fn finetune_joint(
    model: &TransformerModel,
    store: &mut AdapterStore,
    samples: &[JointSample],
    phase: PhaseConfig,
    optim: OptimConfig,
    rng: &Rng,
) -> Result<Vec<EpochLog>> {
    phase.validate("finetune")?;
    if samples.is_empty() {
        return Err(Error::Empty("fine-tuning set"));
    }
    if samples.iter().any(|s| s.alpha.candidates.is_empty()) {
        return Err(Error::Empty("candidate set"));
    }
    let ids = store.ids();
    let slot = |id: ToolId| ids.binary_search(&id).map_err(|_| Error::UnknownTool(id.to_string()));
    let sizes: Vec<Vec<usize>> = ids
        .iter()
        .map(|&id| Ok(store.get(id)?.tensors().iter().map(|t| t.numel()).collect()))
        .collect::<Result<_>>()?;
    let flat: Vec<usize> = sizes.iter().flatten().copied().collect();
    let mut opt = AdamW::new(optim, phase.lr, &flat);
    let total_steps = phase.total_steps(samples.len());
    let mut log = Vec::with_capacity(phase.epochs);
    for epoch in 0..phase.epochs {
        let order = shuffled(samples.len(), rng, "finetune", epoch);
        let mut total = 0.0;
        for batch in order.chunks(phase.batch_size) {
            let mut acc: Vec<Vec<Tensor>> = ids
                .iter()
                .map(|&id| Ok(store.get(id)?.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect()))
                .collect::<Result<_>>()?;
            for &i in batch {
                let s = &samples[i];
                let adapters = s.alpha.candidates.iter().map(|&c| store.get(c)).collect::<Result<Vec<_>>>()?;
                let delta = compose(&adapters, &s.alpha.weights)?;
                let mut tape = Tape::new();
                let p = model.bind(&mut tape, false)?;
                let bound = delta.bind(&mut tape, true)?;
                let out = model.forward(&mut tape, &p, Input::Tokens(&s.seq.ids), Some(&bound))?;
                let loss = tape.cross_entropy(out.logits, &s.seq.targets())?;
                total += tape.value(loss).item();
                let grads = tape.backward(loss)?;
                for term in &bound.terms {
                    let k = slot(s.alpha.candidates[term.candidate])?;
                    for (a, v) in acc[k].iter_mut().zip(term.flat_vars()) {
                        a.add_assign(&grads.wrt(v));
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            let grads: Vec<Tensor> = acc.into_iter().flatten().map(|g| g.scaled(inv)).collect();
            let mut params: Vec<&mut Tensor> = store.iter_mut().flat_map(LowRankAdapter::tensors_mut).collect();
            opt.set_lr(phase.lr_at(opt.steps() as usize, total_steps));
            opt.step(&mut params, &grads);
        }
        log.push(EpochLog { epoch, train_loss: total / samples.len() as f64, val_loss: None });
    }
    Ok(log)
}
