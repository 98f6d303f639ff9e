use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterConfig;
use crate::error::{Error, Result};
use crate::flops::WorkloadProfile;
use crate::gating::GateConfig;
use crate::model::ModelConfig;
use crate::synth::SynthConfig;
use crate::theory::TheoryConfig;

use super::optim::OptimConfig;
use super::train::{PhaseConfig, Schedule};

/// Per-stage training settings and the stage-3 candidate cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    /// Full-parameter warm-up of the backbone on the background corpus.
    pub warmup: PhaseConfig,
    pub pretrain: PhaseConfig,
    pub finetune: PhaseConfig,
    /// Candidates kept after gating; absent keeps every instance candidate.
    pub top_n: Option<usize>,
    /// Entropy weights for the gate ablation.
    pub lambda_grid: Vec<f64>,
    pub max_len: usize,
    pub decode_budget: usize,
}

impl Default for StageConfig {
    /// Learning rates and epochs of the reference setup.
    fn default() -> Self {
        Self {
            warmup: PhaseConfig { lr: 1e-3, epochs: 12, batch_size: 8, schedule: Schedule::Cosine },
            pretrain: PhaseConfig::new(1e-4, 3, 4),
            finetune: PhaseConfig::new(1e-4, 1, 4),
            top_n: None,
            lambda_grid: vec![0.0, 0.8],
            max_len: 384,
            decode_budget: 24,
        }
    }
}

impl StageConfig {
    /// Settings that converge on the desk-scale corpus.
    pub fn desk() -> Self {
        Self { pretrain: PhaseConfig::new(1e-3, 10, 4), finetune: PhaseConfig::new(3e-4, 2, 4), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.warmup.validate("warmup")?;
        self.pretrain.validate("pretrain")?;
        self.finetune.validate("finetune")?;
        if self.top_n == Some(0) {
            return Err(Error::Config("top_n must be at least 1".into()));
        }
        if self.decode_budget == 0 || self.max_len == 0 {
            return Err(Error::Config("decode_budget and max_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlopsConfig {
    /// Query-plus-history tokens of the Llama-scale profile.
    pub llama_s_par: u64,
    /// Document-plus-example tokens as a multiple of `llama_s_par`.
    pub llama_context_multiple: u64,
    pub profiles: Vec<WorkloadProfile>,
}

impl Default for FlopsConfig {
    fn default() -> Self {
        Self { llama_s_par: 512, llama_context_multiple: 9, profiles: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    /// Seed of the background corpus; the warmed-up backbone is shared by all seeds.
    pub backbone_seed: u64,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub adapter: AdapterConfig,
    pub gate: GateConfig,
    pub stages: StageConfig,
    pub optim: OptimConfig,
    pub theory: TheoryConfig,
    pub flops: FlopsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            seeds: vec![0, 1, 2],
            backbone_seed: 0,
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            adapter: AdapterConfig::default(),
            gate: GateConfig::default(),
            stages: StageConfig::desk(),
            optim: OptimConfig { weight_decay: 0.0, ..OptimConfig::default() },
            theory: TheoryConfig::default(),
            flops: FlopsConfig::default(),
        }
    }
}

impl RunConfig {
    /// A few-minute configuration for tests and quick checks.
    pub fn smoke() -> Self {
        let mut c = Self { name: "smoke".into(), seeds: vec![0], ..Self::default() };
        c.synth.tools = 4;
        c.synth.atomic_per_tool = 6;
        c.synth.test_atomic_per_tool = 3;
        c.synth.background_episodes = 200;
        c.model = ModelConfig { hidden: 16, d_ff: 32, ..ModelConfig::default() };
        c.adapter.rank = 4;
        c.adapter.scale = 16.0;
        c.gate.hidden = 16;
        c.gate.epochs = 2;
        c.stages.warmup.epochs = 1;
        c.stages.pretrain = PhaseConfig::new(1e-3, 2, 4);
        c.stages.finetune = PhaseConfig::new(1e-3, 1, 4);
        c.theory = TheoryConfig {
            inputs: 3,
            manifest_inputs: 2,
            alpha_draws: 5,
            heldout_draws: 10,
            beta_probes: 8,
            radius_probes: 10,
            ..TheoryConfig::default()
        };
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return Err(Error::Config(format!("experiment name `{}` is not a plain directory name", self.name)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.model.validate()?;
        self.adapter.validate()?;
        self.gate.validate()?;
        self.stages.validate()?;
        if self.stages.max_len > self.model.max_seq_len {
            return Err(Error::Config(format!(
                "stages.max_len {} exceeds model.max_seq_len {}",
                self.stages.max_len, self.model.max_seq_len
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(d) => Error::Config(format!("{}: {d}", path.display())),
            other => other,
        })
    }
}
