//! Closed-world tool corpus: toolset, atomic examples, multi-call episodes,
//! decontamination and the two prompt formats.

mod tools;
mod trace;
pub mod vocab;

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use tools::{gen_toolset, jaccard, Action, Param, ParamKind, Semantics, ToolId, ToolSpec, MAX_TOOLS};
pub use trace::{
    build_distractors, compose_trajectories, decontaminate, format_instance, gen_atomic_examples, read_jsonl,
    write_jsonl, Format, HistoryStep, Split, TraceInstance, TrajectoryConfig,
};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub tools: usize,
    pub atomic_per_tool: usize,
    pub test_atomic_per_tool: usize,
    pub validation_fraction: f64,
    pub train: TrajectoryConfig,
    pub test: TrajectoryConfig,
    /// Episodes in the backbone warm-up corpus.
    pub background_episodes: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            tools: 12,
            atomic_per_tool: 40,
            test_atomic_per_tool: 8,
            validation_fraction: 0.2,
            train: TrajectoryConfig::default(),
            test: TrajectoryConfig {
                single_per_example: 1,
                same_tool_episodes: 1,
                cross_tool_episodes: 2,
                ..TrajectoryConfig::default()
            },
            background_episodes: 8000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub tools: Vec<ToolSpec>,
    /// Train material in both formats.
    pub train: Vec<TraceInstance>,
    /// Held-out 20% of train material, both formats.
    pub validation: Vec<TraceInstance>,
    /// Fresh compositions, document-free.
    pub test: Vec<TraceInstance>,
    pub decontaminated: usize,
}

impl Dataset {
    pub fn tool(&self, id: ToolId) -> &ToolSpec {
        &self.tools[id as usize]
    }

    pub fn tool_by_name(&self, name: &str) -> Option<&ToolSpec> {
        self.tools.iter().find(|t| t.name == name)
    }
}

fn both_formats(items: Vec<TraceInstance>, split: Split) -> Vec<TraceInstance> {
    items
        .into_iter()
        .flat_map(|i| {
            let i = TraceInstance { split, ..i };
            [i.with_format(Format::DocumentAware), i.with_format(Format::DocumentFree)]
        })
        .collect()
}

/// Builds the full corpus. A pure function of `(seed, config)`.
pub fn generate_dataset(seed: u64, config: &SynthConfig) -> Result<Dataset> {
    if !(0.0..1.0).contains(&config.validation_fraction) {
        return Err(Error::Config("validation_fraction must be in [0, 1)".into()));
    }
    let root = Rng::new(seed).substream("synth");
    let tools = gen_toolset(seed, config.tools)?;

    let pools = |name: &str, k: usize| -> Vec<Vec<(String, Action)>> {
        tools
            .iter()
            .map(|t| gen_atomic_examples(t, k, &mut root.substream(name).substream(&t.name)))
            .collect()
    };
    let train_pools = pools("atomic/train", config.atomic_per_tool);
    let test_pools = pools("atomic/test", config.test_atomic_per_tool);

    let train = compose_trajectories(&tools, &train_pools, &config.train, &mut root.substream("episodes/train"))?;
    let test = compose_trajectories(&tools, &test_pools, &config.test, &mut root.substream("episodes/test"))?;
    let test: Vec<TraceInstance> = test.into_iter().map(|i| TraceInstance { split: Split::Test, ..i }).collect();
    let (train, decontaminated) = decontaminate(train, &test);

    let episodes: BTreeSet<usize> = train.iter().map(|i| i.episode).collect();
    let mut episodes: Vec<usize> = episodes.into_iter().collect();
    root.substream("split").shuffle(&mut episodes);
    let n_val = (episodes.len() as f64 * config.validation_fraction).round() as usize;
    let val_eps: BTreeSet<usize> = episodes[..n_val].iter().copied().collect();
    let (val, tr): (Vec<_>, Vec<_>) = train.into_iter().partition(|i| val_eps.contains(&i.episode));

    Ok(Dataset {
        tools,
        train: both_formats(tr, Split::Train),
        validation: both_formats(val, Split::Validation),
        test,
        decontaminated,
    })
}

/// Episodes over the whole catalog where tool names are reassigned at random
/// for every episode, so the only way to name the right tool is to read the
/// documents in the prompt. Used to warm up the backbone.
pub fn background_corpus(seed: u64, config: &SynthConfig) -> Result<(Vec<ToolSpec>, Vec<TraceInstance>)> {
    let root = Rng::new(seed).substream("background");
    let catalog = gen_toolset(seed ^ 0x5eed, MAX_TOOLS)?;
    // Half single-call episodes, half multi-call (two thirds of those mixed).
    let per_tool = (config.background_episodes / MAX_TOOLS).max(6);
    let pools: Vec<Vec<(String, Action)>> = catalog
        .iter()
        .map(|t| gen_atomic_examples(t, per_tool / 2, &mut root.substream("atomic").substream(&t.name)))
        .collect();
    let traj = TrajectoryConfig {
        single_per_example: 1,
        same_tool_episodes: per_tool / 6,
        cross_tool_episodes: per_tool / 3,
        ..TrajectoryConfig::default()
    };
    let episodes = compose_trajectories(&catalog, &pools, &traj, &mut root.substream("episodes"))?;

    // One random renaming per episode, applied consistently to documents,
    // history and target.
    let mut rng = root.substream("rename");
    let mut renamed_tools = Vec::new();
    let mut out = Vec::new();
    let mut current: Option<(usize, Vec<usize>)> = None;
    for inst in episodes {
        let perm = match &current {
            Some((ep, p)) if *ep == inst.episode => p.clone(),
            _ => {
                let mut p: Vec<usize> = (0..MAX_TOOLS).collect();
                rng.shuffle(&mut p);
                current = Some((inst.episode, p.clone()));
                p
            }
        };
        let rename = |name: &str| -> String {
            let idx = catalog.iter().position(|t| t.name == name).expect("catalog tool");
            vocab::TOOL_NAMES[perm[idx]].to_string()
        };
        let mut inst = inst;
        inst.target.tool = rename(&inst.target.tool);
        for h in &mut inst.history {
            h.action.tool = rename(&h.action.tool);
        }
        // Candidate ids index into a per-episode renamed copy of the catalog.
        let base = renamed_tools.len() as ToolId;
        for (i, t) in catalog.iter().enumerate() {
            let mut t = t.clone();
            t.name = vocab::TOOL_NAMES[perm[i]].to_string();
            t.id = base + i as ToolId;
            renamed_tools.push(t);
        }
        inst.candidates = inst.candidates.iter().map(|c| base + c).collect();
        inst.target_tool += base;
        // Alternate formats by episode: argument filling must work without
        // documents too, while names stay unguessable there.
        inst.format = if inst.episode % 2 == 0 { Format::DocumentAware } else { Format::DocumentFree };
        out.push(inst);
    }
    Ok((renamed_tools, out))
}

pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("toolset.json"), serde_json::to_string_pretty(&data.tools)?)?;
    write_jsonl(&dir.join("train.jsonl"), &data.train)?;
    write_jsonl(&dir.join("validation.jsonl"), &data.validation)?;
    write_jsonl(&dir.join("test.jsonl"), &data.test)?;
    std::fs::write(dir.join("decontamination.json"), serde_json::to_string(&serde_json::json!({ "removed": data.decontaminated }))?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = dir.join("toolset.json");
    if !manifest.exists() {
        return Err(Error::MissingArtifact { artifact: manifest, stage: "synth" });
    }
    let tools: Vec<ToolSpec> = serde_json::from_str(&std::fs::read_to_string(&manifest)?)?;
    let removed: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("decontamination.json"))?)?;
    Ok(Dataset {
        tools,
        train: read_jsonl(&dir.join("train.jsonl"))?,
        validation: read_jsonl(&dir.join("validation.jsonl"))?,
        test: read_jsonl(&dir.join("test.jsonl"))?,
        decontaminated: removed["removed"].as_u64().unwrap_or(0) as usize,
    })
}
