use crate::error::Result;
use crate::gating::{encode_context, gate_scores, CompositionWeights, EmbeddingCache, GateNetwork, GateSample};
use crate::model::{TokenSequence, Tokenizer, TransformerModel};
use crate::synth::{format_instance, Format, ToolSpec, TraceInstance};
use crate::error::Error;

/// Prompt ids for an instance in the given format.
pub fn prompt_ids(tok: &Tokenizer, inst: &TraceInstance, tools: &[ToolSpec], format: Format, max_len: usize) -> Result<Vec<usize>> {
    tok.encode(&format_instance(inst, tools, format, max_len)?)
}

/// Prompt plus target action, with the action as the loss span.
pub fn training_sequence(tok: &Tokenizer, inst: &TraceInstance, tools: &[ToolSpec], format: Format, max_len: usize) -> Result<TokenSequence> {
    let prompt = format_instance(inst, tools, format, max_len)?;
    tok.training_sequence(&prompt, &inst.target.tokens())
}

/// Training sequences in each instance's own format.
pub fn encode_all(tok: &Tokenizer, items: &[&TraceInstance], tools: &[ToolSpec], max_len: usize) -> Result<Vec<TokenSequence>> {
    items.iter().map(|i| training_sequence(tok, i, tools, i.format, max_len)).collect()
}

fn tool<'a>(tools: &'a [ToolSpec], id: u32) -> Result<&'a ToolSpec> {
    tools.iter().find(|t| t.id == id).ok_or_else(|| Error::UnknownTool(id.to_string()))
}

/// Frozen-encoder features for one instance: document-free context and candidate documents.
pub fn gate_sample(
    model: &TransformerModel,
    cache: &mut EmbeddingCache,
    tok: &Tokenizer,
    inst: &TraceInstance,
    tools: &[ToolSpec],
    max_len: usize,
) -> Result<GateSample> {
    let prompt = prompt_ids(tok, inst, tools, Format::DocumentFree, max_len)?;
    let context = encode_context(model, &prompt)?;
    let docs = inst
        .candidates
        .iter()
        .map(|&id| {
            let doc = tok.encode(&tool(tools, id)?.document())?;
            cache.embed(model, id, &doc)
        })
        .collect::<Result<Vec<_>>>()?;
    let target = inst.target_index().ok_or_else(|| Error::TargetNotCandidate(inst.target.tool.clone()))?;
    Ok(GateSample { context, docs, candidates: inst.candidates.clone(), target })
}

/// Gate weights over an instance's candidates.
pub fn gate_weights(gate: &GateNetwork, sample: &GateSample) -> Result<CompositionWeights> {
    gate_scores(gate, &sample.context, &sample.docs, &sample.candidates)
}
