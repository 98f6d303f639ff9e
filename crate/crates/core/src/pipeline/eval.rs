use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapter::{compose, AdapterStore};
use crate::error::{Error, Result};
use crate::gating::{top_n, CompositionWeights};
use crate::model::{DecodeOutcome, Tokenizer, TransformerModel};
use crate::synth::{vocab, Action, Format, ToolId, ToolSpec, TraceInstance};

use super::data::prompt_ids;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Gate weights, truncated to the top candidates, over fine-tuned adapters.
    Paratool,
    /// Uniform weights over the candidates.
    Average,
    /// One-hot at the gate's argmax.
    Top1,
    /// One-hot at the ground-truth tool.
    Oracle,
    /// Gate weights over adapters that skipped joint fine-tuning.
    NoFinetune,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [Strategy::Paratool, Strategy::Average, Strategy::Top1, Strategy::Oracle, Strategy::NoFinetune];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Paratool => "paratool",
            Strategy::Average => "average",
            Strategy::Top1 => "top1",
            Strategy::Oracle => "oracle",
            Strategy::NoFinetune => "no_finetune",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| Error::UnknownStrategy(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pass,
    Mismatch,
    ParseFailure,
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub index: usize,
    pub calls: usize,
    pub target: Action,
    pub alpha: CompositionWeights,
    pub selected: ToolId,
    pub emitted: String,
    pub decoded: Option<Action>,
    pub outcome: Outcome,
    pub gate_correct: bool,
    pub action_correct: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub count: usize,
    pub pass_rate: f64,
    pub gating_accuracy: f64,
    pub action_accuracy: f64,
}

impl SplitStats {
    fn of<'a>(records: impl Iterator<Item = &'a InstanceRecord>) -> Self {
        let (mut n, mut p, mut g, mut a) = (0usize, 0usize, 0usize, 0usize);
        for r in records {
            n += 1;
            p += usize::from(r.outcome == Outcome::Pass);
            g += usize::from(r.gate_correct);
            a += usize::from(r.action_correct);
        }
        let f = |x: usize| if n == 0 { 0.0 } else { x as f64 / n as f64 };
        Self { count: n, pass_rate: f(p), gating_accuracy: f(g), action_accuracy: f(a) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: Strategy,
    pub pass_rate: f64,
    pub gating_accuracy: f64,
    pub action_accuracy: f64,
    pub single_call: SplitStats,
    pub multi_call: SplitStats,
    pub records: Vec<InstanceRecord>,
}

/// Everything evaluation reads; nothing here is mutated.
pub struct EvalInputs<'a> {
    pub model: &'a TransformerModel,
    pub tokenizer: &'a Tokenizer,
    pub tools: &'a [ToolSpec],
    /// Adapters after joint fine-tuning.
    pub tuned: &'a AdapterStore,
    /// Adapters after per-tool pre-training only.
    pub pretrained: &'a AdapterStore,
    /// Gate weights per test instance, before truncation.
    pub gate: &'a [CompositionWeights],
    /// Candidates kept by the paratool strategies; `None` keeps all.
    pub top_n: Option<usize>,
    pub max_len: usize,
    pub decode_budget: usize,
}

fn composition(inputs: &EvalInputs<'_>, inst: &TraceInstance, gate: &CompositionWeights, strategy: Strategy) -> Result<CompositionWeights> {
    let keep = |a: &CompositionWeights| inputs.top_n.map_or_else(|| a.clone(), |n| top_n(a, n));
    match strategy {
        Strategy::Paratool | Strategy::NoFinetune => Ok(keep(gate)),
        Strategy::Average => Ok(CompositionWeights::uniform(&inst.candidates)),
        Strategy::Top1 => CompositionWeights::one_hot(&inst.candidates, gate.argmax()),
        Strategy::Oracle => CompositionWeights::one_hot(&inst.candidates, inst.target_tool),
    }
}

/// Tool named right after the first `CALL`, if any.
fn emitted_tool(symbols: &[String]) -> Option<&str> {
    let pos = symbols.iter().position(|s| s == vocab::CALL)?;
    symbols.get(pos + 1).map(String::as_str)
}

pub fn evaluate(inputs: &EvalInputs<'_>, test: &[TraceInstance], strategy: Strategy) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    if inputs.gate.len() != test.len() {
        return Err(Error::shape("evaluate", format!("{} gate entries for {} instances", inputs.gate.len(), test.len())));
    }
    let store = if strategy == Strategy::NoFinetune { inputs.pretrained } else { inputs.tuned };
    let end = inputs.tokenizer.id(vocab::END)?;
    let mut records = Vec::with_capacity(test.len());
    for (index, (inst, gate)) in test.iter().zip(inputs.gate).enumerate() {
        if inst.candidates.is_empty() {
            return Err(Error::Empty("candidate set"));
        }
        let alpha = composition(inputs, inst, gate, strategy)?;
        let adapters = alpha.candidates.iter().map(|&c| store.get(c)).collect::<Result<Vec<_>>>()?;
        let delta = compose(&adapters, &alpha.weights)?;
        let prompt = prompt_ids(inputs.tokenizer, inst, inputs.tools, Format::DocumentFree, inputs.max_len)?;
        let out = inputs.model.decode_greedy(&prompt, end, inputs.decode_budget, Some(&delta))?;
        let symbols: Vec<String> = out.tokens().iter().map(|&i| inputs.tokenizer.symbol(i).to_string()).collect();
        let decoded = match out {
            DecodeOutcome::Finished(_) => Action::parse(&symbols),
            DecodeOutcome::Exhausted(_) => None,
        };
        let outcome = match (&out, &decoded) {
            (DecodeOutcome::Exhausted(_), _) => Outcome::BudgetExhausted,
            (_, None) => Outcome::ParseFailure,
            (_, Some(a)) if *a == inst.target => Outcome::Pass,
            _ => Outcome::Mismatch,
        };
        let selected = alpha.argmax();
        records.push(InstanceRecord {
            index,
            calls: inst.calls,
            target: inst.target.clone(),
            gate_correct: selected == inst.target_tool,
            action_correct: emitted_tool(&symbols) == Some(inst.target.tool.as_str()),
            alpha,
            selected,
            emitted: symbols.join(" "),
            decoded,
            outcome,
        });
    }
    let all = SplitStats::of(records.iter());
    Ok(EvalReport {
        strategy,
        pass_rate: all.pass_rate,
        gating_accuracy: all.gating_accuracy,
        action_accuracy: all.action_accuracy,
        single_call: SplitStats::of(records.iter().filter(|r| r.calls == 1)),
        multi_call: SplitStats::of(records.iter().filter(|r| r.calls > 1)),
        records,
    })
}
