//! Analytic inference cost of the context-based and parameter-based regimes,
//! with an instrumented reference forward pass that counts multiply-adds.

mod reference;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, Attach};
use crate::error::{Error, Result};
use crate::gating::GateConfig;
use crate::model::{ModelConfig, Tokenizer};
use crate::synth::{format_instance, Format, ToolSpec, TraceInstance};

pub use reference::{reference_forward, OpCounts};

/// Transformer dimensions. `vocab = 0` means no output head (an encoder).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub hidden: u64,
    pub layers: u64,
    pub heads: u64,
    pub d_ff: u64,
    pub vocab: u64,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 || self.heads == 0 || self.d_ff == 0 {
            return Err(Error::Config("model dims must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!("hidden {} not divisible by heads {}", self.hidden, self.heads)));
        }
        Ok(())
    }

    /// The same dims without the output head.
    pub fn headless(self) -> Self {
        Self { vocab: 0, ..self }
    }

    /// Roughly Llama-7B.
    pub fn llama_7b() -> Self {
        Self { hidden: 4096, layers: 32, heads: 32, d_ff: 11008, vocab: 32000 }
    }

    /// Roughly BERT-base, used as a small frozen encoder.
    pub fn bert_base() -> Self {
        Self { hidden: 768, layers: 12, heads: 12, d_ff: 3072, vocab: 0 }
    }
}

impl From<&ModelConfig> for ModelDims {
    fn from(c: &ModelConfig) -> Self {
        Self {
            hidden: c.hidden as u64,
            layers: c.layers as u64,
            heads: c.heads as u64,
            d_ff: c.d_ff as u64,
            vocab: c.vocab_size as u64,
        }
    }
}

/// Context encoder plus the gate MLP that scores each candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderCost {
    pub dims: ModelDims,
    pub gate_hidden: u64,
    pub gate_depth: u64,
    pub candidates: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadProfile {
    pub name: String,
    pub query_tokens: u64,
    pub history_tokens: u64,
    /// Per-tool document tokens placed in context.
    pub doc_tokens: Vec<u64>,
    /// Per-tool example tokens placed in context.
    pub example_tokens: Vec<u64>,
    pub model: ModelDims,
    /// Adapters composed per step (nonzero weights).
    pub adapters: u64,
    pub rank: u64,
    /// FFN matrices carrying an adapter in each layer (1 or 2).
    pub sites: u64,
    pub encoder: Option<EncoderCost>,
}

impl WorkloadProfile {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if let Some(e) = &self.encoder {
            e.dims.validate()?;
            if e.gate_depth == 0 || e.gate_hidden == 0 {
                return Err(Error::Config("gate depth and width must be positive".into()));
            }
        }
        if self.sites > 2 {
            return Err(Error::Config(format!("at most two adapter sites per layer, got {}", self.sites)));
        }
        if self.s_par() == 0 {
            return Err(Error::Config(format!("profile {} has no query or history tokens", self.name)));
        }
        Ok(())
    }

    pub fn s_par(&self) -> u64 {
        self.query_tokens + self.history_tokens
    }

    pub fn s_ctx(&self) -> u64 {
        self.s_par() + self.doc_tokens.iter().sum::<u64>() + self.example_tokens.iter().sum::<u64>()
    }
}

/// Matmul FLOPs (2 per multiply-add) split by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub linear: u128,
    pub attention: u128,
    pub adapter: u128,
    pub encoder: u128,
    pub gate: u128,
    pub total: u128,
    /// Softmax, normalization and activation element ops; not part of `total`.
    pub nonmatmul: u128,
}

impl CostBreakdown {
    pub fn overhead(&self) -> u128 {
        self.adapter + self.encoder + self.gate
    }

    pub fn base(&self) -> u128 {
        self.linear + self.attention
    }

    fn summed(mut self) -> Self {
        self.total = self.linear + self.attention + self.adapter + self.encoder + self.gate;
        self
    }
}

/// `(linear, attention)` matmul FLOPs of one forward pass over `s` tokens.
pub fn flops_transformer(s: u64, dims: &ModelDims) -> (u128, u128) {
    let (s, h, l, f, v) = (s as u128, dims.hidden as u128, dims.layers as u128, dims.d_ff as u128, dims.vocab as u128);
    let linear = 2 * s * l * (4 * h * h + 2 * h * f) + 2 * s * h * v;
    let attention = 4 * l * s * s * h;
    (linear, attention)
}

/// Element ops outside the matmuls: causal softmax exponentials, layer-norm
/// elements and FFN activations.
pub fn nonmatmul_ops(s: u64, dims: &ModelDims) -> u128 {
    let (s, h, l, f, heads) = (s as u128, dims.hidden as u128, dims.layers as u128, dims.d_ff as u128, dims.heads as u128);
    l * heads * s * (s + 1) / 2 + (2 * l + 1) * s * h + l * s * f
}

/// Factored adapter branches `(x·B)·Aᵀ` for every composed adapter.
pub fn flops_adapters(s: u64, dims: &ModelDims, adapters: u64, rank: u64, sites: u64) -> u128 {
    2 * s as u128 * adapters as u128 * dims.layers as u128 * sites as u128 * rank as u128 * (dims.hidden + dims.d_ff) as u128
}

/// Gate MLP over `[c, d, c⊙d, |c−d|]` for each candidate.
pub fn flops_gate(encoder_dim: u64, hidden: u64, depth: u64, candidates: u64) -> u128 {
    let mut widths = vec![4 * encoder_dim as u128];
    widths.extend(std::iter::repeat(hidden as u128).take(depth.saturating_sub(1) as usize));
    widths.push(1);
    let per: u128 = widths.windows(2).map(|w| w[0] * w[1]).sum();
    2 * candidates as u128 * per
}

pub fn flops_context(profile: &WorkloadProfile) -> CostBreakdown {
    let s = profile.s_ctx();
    let (linear, attention) = flops_transformer(s, &profile.model);
    CostBreakdown { linear, attention, nonmatmul: nonmatmul_ops(s, &profile.model), ..Default::default() }.summed()
}

pub fn flops_parameter(profile: &WorkloadProfile) -> CostBreakdown {
    let s = profile.s_par();
    let (linear, attention) = flops_transformer(s, &profile.model);
    let adapter = flops_adapters(s, &profile.model, profile.adapters, profile.rank, profile.sites);
    let (encoder, gate) = match &profile.encoder {
        Some(e) => {
            let (el, ea) = flops_transformer(s, &e.dims);
            (el + ea, flops_gate(e.dims.hidden, e.gate_hidden, e.gate_depth, e.candidates))
        }
        None => (0, 0),
    };
    CostBreakdown { linear, attention, adapter, encoder, gate, nonmatmul: nonmatmul_ops(s, &profile.model), total: 0 }.summed()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsRow {
    pub name: String,
    pub s_ctx: u64,
    pub s_par: u64,
    pub context: CostBreakdown,
    pub parameter: CostBreakdown,
    /// Context total over parameter total.
    pub ratio: f64,
    /// Method-specific share of the parameter-based total.
    pub overhead_fraction: f64,
}

pub fn flops_row(profile: &WorkloadProfile) -> Result<FlopsRow> {
    profile.validate()?;
    let context = flops_context(profile);
    let parameter = flops_parameter(profile);
    Ok(FlopsRow {
        name: profile.name.clone(),
        s_ctx: profile.s_ctx(),
        s_par: profile.s_par(),
        context,
        parameter,
        ratio: context.total as f64 / parameter.total as f64,
        overhead_fraction: parameter.overhead() as f64 / parameter.total as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub rows: Vec<FlopsRow>,
}

/// One row per profile, sorted by name.
pub fn flops_table(profiles: &[WorkloadProfile]) -> Result<FlopsReport> {
    if profiles.is_empty() {
        return Err(Error::Empty("workload profiles"));
    }
    let mut rows = profiles.iter().map(flops_row).collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(FlopsReport { rows })
}

/// TFLOPs with two decimals.
pub fn tflops(flops: u128) -> String {
    format!("{:.2}", flops as f64 / 1e12)
}

impl FlopsReport {
    /// Flat table: parameter-based cost shown as `base (+overhead)`.
    pub fn to_table(&self) -> String {
        let mut out = String::from("profile\ts_ctx\ts_par\tcontext_tflops\tparameter_tflops\tratio\toverhead_fraction\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{} (+{})\t{:.3}\t{:.4}",
                r.name,
                r.s_ctx,
                r.s_par,
                tflops(r.context.total),
                tflops(r.parameter.base()),
                tflops(r.parameter.overhead()),
                r.ratio,
                r.overhead_fraction
            );
        }
        out
    }
}

pub fn load_profiles(path: &Path) -> Result<Vec<WorkloadProfile>> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_profiles(path: &Path, profiles: &[WorkloadProfile]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(profiles)?)?;
    Ok(())
}

/// Mean token counts of a corpus under the document-aware format, with the
/// backbone itself as the context encoder.
pub fn corpus_profile(
    name: &str,
    instances: &[TraceInstance],
    tools: &[ToolSpec],
    tokenizer: &Tokenizer,
    model: &ModelConfig,
    adapter: &AdapterConfig,
    gate: &GateConfig,
    adapters: u64,
) -> Result<WorkloadProfile> {
    if instances.is_empty() {
        return Err(Error::Empty("profile instances"));
    }
    let n = instances.len() as f64;
    let (mut par, mut docs, mut examples, mut candidates) = (0usize, 0usize, 0usize, 0usize);
    for inst in instances {
        let free = format_instance(inst, tools, Format::DocumentFree, usize::MAX)?;
        par += tokenizer.encode(&free)?.len();
        candidates += inst.candidates.len();
        for id in &inst.candidates {
            let t = tools.iter().find(|t| t.id == *id).ok_or_else(|| Error::UnknownTool(id.to_string()))?;
            docs += t.document().len();
            examples += t.example_tokens();
        }
    }
    let per_tool = |total: usize| (total as f64 / candidates as f64).round() as u64;
    let tools_per = (candidates as f64 / n).round() as u64;
    let dims = ModelDims::from(model);
    Ok(WorkloadProfile {
        name: name.to_string(),
        query_tokens: (par as f64 / n).round() as u64,
        history_tokens: 0,
        doc_tokens: vec![per_tool(docs); tools_per as usize],
        example_tokens: vec![per_tool(examples); tools_per as usize],
        model: dims,
        adapters,
        rank: adapter.rank as u64,
        sites: adapter.attach.sites() as u64,
        encoder: Some(EncoderCost {
            dims: dims.headless(),
            gate_hidden: gate.hidden as u64,
            gate_depth: gate.depth as u64,
            candidates: tools_per,
        }),
    })
}

/// Llama-scale profile with a BERT-size encoder and `N·L·r = h`.
pub fn llama_profile(name: &str, s_par: u64, context_tokens: u64) -> WorkloadProfile {
    WorkloadProfile {
        name: name.to_string(),
        query_tokens: s_par,
        history_tokens: 0,
        doc_tokens: vec![context_tokens],
        example_tokens: vec![0],
        model: ModelDims::llama_7b(),
        adapters: 8,
        rank: 16,
        sites: Attach::Both.sites() as u64,
        encoder: Some(EncoderCost { dims: ModelDims::bert_base(), gate_hidden: 128, gate_depth: 3, candidates: 8 }),
    }
}

#[cfg(test)]
mod tests;
