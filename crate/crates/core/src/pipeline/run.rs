use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{AdapterStore, LowRankAdapter};
use crate::error::{Error, Result};
use crate::flops::{corpus_profile, flops_table, llama_profile, FlopsReport};
use crate::gating::{evaluate_gate, top_n, train_gate, CompositionWeights, EmbeddingCache, GateConfig, GateEpoch, GateNetwork, GateSample};
use crate::model::{TokenSequence, Tokenizer, TransformerModel};
use crate::rng::Rng;
use crate::synth::{background_corpus, generate_dataset, load_dataset, read_jsonl, save_dataset, write_jsonl, Dataset, Format, TraceInstance};
use crate::theory::{soft_vs_hard_report, RobustnessReport, TheoryInstance};

use super::config::RunConfig;
use super::data::{gate_sample, gate_weights, training_sequence};
use super::eval::{evaluate, EvalInputs, EvalReport, SplitStats, Strategy};
use super::train::{finetune_joint, pretrain_tool, warm_up_backbone, EpochLog, JointSample};

/// Where every artifact of a named experiment lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(artifact_root: &Path, name: &str) -> Self {
        Self { root: artifact_root.join(name) }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn dataset(&self, seed: u64) -> PathBuf {
        self.root.join("dataset").join(format!("seed{seed}"))
    }

    pub fn backbone(&self) -> PathBuf {
        self.root.join("model").join("backbone.ptlm")
    }

    pub fn warmup_log(&self) -> PathBuf {
        self.root.join("model").join("warmup.jsonl")
    }

    pub fn pretrained(&self, seed: u64) -> PathBuf {
        self.root.join("adapters").join(format!("seed{seed}")).join("pretrained.ptad")
    }

    pub fn tuned(&self, seed: u64) -> PathBuf {
        self.root.join("adapters").join(format!("seed{seed}")).join("tuned.ptad")
    }

    pub fn gate(&self, seed: u64) -> PathBuf {
        self.root.join("gate").join(format!("seed{seed}")).join("gate.ptgt")
    }

    pub fn embeddings(&self, seed: u64) -> PathBuf {
        self.root.join("gate").join(format!("seed{seed}")).join("embeddings.ptec")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn seed_reports(&self, seed: u64) -> PathBuf {
        self.reports().join(format!("seed{seed}"))
    }
}

/// Resolved configuration plus runtime options that never affect outputs.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: RunConfig,
    pub layout: RunLayout,
    /// Directory for warmed-up backbones shared across experiments.
    pub cache: Option<PathBuf>,
    pub threads: usize,
}

fn require(path: &Path, stage: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact { artifact: path.to_path_buf(), stage })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn write_records<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_jsonl(path, records)
}

/// Maps `f` over `items` on up to `threads` scoped workers, keeping order.
fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<R>>>())).collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().map_err(|_| Error::Config("worker thread panicked".into()))??);
        }
        Ok(out)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub tool: u32,
    pub train_size: usize,
    pub log: Vec<EpochLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub seed: u64,
    pub lambda: f64,
    pub val_accuracy: f64,
    pub val_entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub seed: u64,
    pub strategy: Strategy,
    pub pass_rate: f64,
    pub gating_accuracy: f64,
    pub action_accuracy: f64,
    pub single_call: SplitStats,
    pub multi_call: SplitStats,
}

impl SummaryRow {
    pub fn of(seed: u64, r: &EvalReport) -> Self {
        Self {
            seed,
            strategy: r.strategy,
            pass_rate: r.pass_rate,
            gating_accuracy: r.gating_accuracy,
            action_accuracy: r.action_accuracy,
            single_call: r.single_call,
            multi_call: r.multi_call,
        }
    }
}

/// Paired validation pass rates around joint fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneCheck {
    pub seed: u64,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    /// Ground-truth adapter after stage 1 only.
    pub stage1_oracle: SplitStats,
    pub reports: Vec<SummaryRow>,
    pub lambda: Vec<LambdaRow>,
    pub finetune: FinetuneCheck,
    pub theory: RobustnessReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub seeds: Vec<SeedOutcome>,
    pub flops: FlopsReport,
}

/// Bookkeeping for one seed's intermediate artifacts.
struct SeedContext {
    data: Dataset,
    model: TransformerModel,
}

impl Experiment {
    pub fn new(config: RunConfig, artifact_root: &Path) -> Result<Self> {
        config.validate()?;
        let layout = RunLayout::new(artifact_root, &config.name);
        Ok(Self { config, layout, cache: Some(artifact_root.join(".cache")), threads: 1 })
    }

    fn rng(&self, seed: u64) -> Rng {
        Rng::new(seed).substream("pipeline")
    }

    /// Writes the resolved configuration next to the artifacts.
    pub fn archive_config(&self) -> Result<()> {
        std::fs::create_dir_all(&self.layout.root)?;
        std::fs::write(self.layout.config(), self.config.to_toml()?)?;
        Ok(())
    }

    pub fn synth(&self, seed: u64) -> Result<Dataset> {
        self.archive_config()?;
        let data = generate_dataset(seed, &self.config.synth)?;
        save_dataset(&self.layout.dataset(seed), &data)?;
        log::info!("seed {seed}: {} train, {} validation, {} test instances", data.train.len(), data.validation.len(), data.test.len());
        Ok(data)
    }

    fn load_data(&self, seed: u64) -> Result<Dataset> {
        let dir = self.layout.dataset(seed);
        require(&dir.join("toolset.json"), "synth")?;
        load_dataset(&dir)
    }

    fn backbone_key(&self) -> Result<String> {
        let c = &self.config;
        let material = serde_json::to_string(&(
            &c.model,
            c.synth.background_episodes,
            c.backbone_seed,
            &c.stages.warmup,
            &c.optim,
            c.stages.max_len,
        ))?;
        let digest = Sha256::digest(material.as_bytes());
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }

    /// Loads the warmed-up backbone, training it (or copying it from the cache) when absent.
    pub fn backbone(&self) -> Result<TransformerModel> {
        let path = self.layout.backbone();
        if path.exists() {
            let model = TransformerModel::load(&path)?;
            if *model.config() == self.config.model {
                return Ok(model);
            }
        }
        let key = self.backbone_key()?;
        let cached = self.cache.as_ref().map(|d| (d.join(format!("backbone-{key}.ptlm")), d.join(format!("backbone-{key}.jsonl"))));
        if let Some((model_path, log_path)) = &cached {
            if model_path.exists() && log_path.exists() {
                let model = TransformerModel::load(model_path)?;
                std::fs::create_dir_all(path.parent().expect("layout path has a parent"))?;
                std::fs::copy(model_path, &path)?;
                std::fs::copy(log_path, self.layout.warmup_log())?;
                return Ok(model);
            }
        }
        let c = &self.config;
        let t = Instant::now();
        let (tools, corpus) = background_corpus(c.backbone_seed, &c.synth)?;
        let tok = Tokenizer::new();
        let mut seqs = corpus
            .iter()
            .map(|i| training_sequence(&tok, i, &tools, i.format, c.stages.max_len))
            .collect::<Result<Vec<_>>>()?;
        Rng::new(c.backbone_seed).substream("warmup/split").shuffle(&mut seqs);
        let held = (seqs.len() / 50).clamp(1, 200).min(seqs.len() - 1);
        let (val, train) = seqs.split_at(held);
        let mut model = TransformerModel::new(c.model)?;
        let log = warm_up_backbone(&mut model, train, val, c.stages.warmup, c.optim, &Rng::new(c.backbone_seed).substream("warmup"))?;
        log::info!("backbone warm-up on {} sequences took {:.1}s", train.len(), t.elapsed().as_secs_f64());
        model.save(&path)?;
        write_records(&self.layout.warmup_log(), &log)?;
        if let Some((model_path, log_path)) = &cached {
            std::fs::create_dir_all(model_path.parent().expect("cache path has a parent"))?;
            std::fs::copy(&path, model_path)?;
            std::fs::copy(self.layout.warmup_log(), log_path)?;
        }
        Ok(model)
    }

    fn load_backbone(&self) -> Result<TransformerModel> {
        require(&self.layout.backbone(), "pretrain")?;
        TransformerModel::load(&self.layout.backbone())
    }

    fn context(&self, seed: u64, model: TransformerModel) -> Result<SeedContext> {
        Ok(SeedContext { data: self.load_data(seed)?, model })
    }

    fn sequences(&self, ctx: &SeedContext, items: &[&TraceInstance], format: Option<Format>) -> Result<Vec<TokenSequence>> {
        let tok = Tokenizer::new();
        items
            .iter()
            .map(|i| training_sequence(&tok, i, &ctx.data.tools, format.unwrap_or(i.format), self.config.stages.max_len))
            .collect()
    }

    /// Stage 1: one adapter per tool, trained on that tool's instances in both formats.
    pub fn pretrain(&self, seed: u64) -> Result<AdapterStore> {
        let model = self.backbone()?;
        let ctx = self.context(seed, model)?;
        let c = &self.config;
        let rng = self.rng(seed);
        let ids: Vec<u32> = ctx.data.tools.iter().map(|t| t.id).collect();
        let store = AdapterStore::init(c.adapter, &c.model, &ids, &rng)?;
        let t = Instant::now();
        let trained = parallel_map(&ids, self.threads, |&id| -> Result<(LowRankAdapter, PretrainLog)> {
            let train: Vec<&TraceInstance> = ctx.data.train.iter().filter(|i| i.target_tool == id).collect();
            let val: Vec<&TraceInstance> =
                ctx.data.validation.iter().filter(|i| i.target_tool == id && i.format == Format::DocumentFree).collect();
            let train = self.sequences(&ctx, &train, None)?;
            let val = self.sequences(&ctx, &val, None)?;
            let mut adapter = store.get(id)?.clone();
            let log = pretrain_tool(&ctx.model, &mut adapter, &train, &val, c.stages.pretrain, c.optim, &rng)?;
            Ok((adapter, PretrainLog { tool: id, train_size: train.len(), log }))
        })?;
        let mut store = store;
        let mut logs = Vec::with_capacity(trained.len());
        for (adapter, log) in trained {
            let id = adapter.tool;
            *store.get_mut(id)? = adapter;
            logs.push(log);
        }
        log::info!("seed {seed}: stage 1 took {:.1}s", t.elapsed().as_secs_f64());
        store.save(&self.layout.pretrained(seed))?;
        write_records(&self.layout.seed_reports(seed).join("pretrain.jsonl"), &logs)?;

        let stage1 = self.eval_with(&ctx, &store, &store, &self.uniform_gate(&ctx.data.test), &ctx.data.test, Strategy::Oracle)?;
        write_json(&self.layout.seed_reports(seed).join("stage1_oracle.json"), &stage1.single_call)?;
        Ok(store)
    }

    fn uniform_gate(&self, items: &[TraceInstance]) -> Vec<CompositionWeights> {
        items.iter().map(|i| CompositionWeights::uniform(&i.candidates)).collect()
    }

    fn gate_samples(&self, ctx: &SeedContext, cache: &mut EmbeddingCache, items: &[TraceInstance]) -> Result<Vec<GateSample>> {
        let tok = Tokenizer::new();
        items
            .iter()
            .filter(|i| i.format == Format::DocumentFree)
            .map(|i| gate_sample(&ctx.model, cache, &tok, i, &ctx.data.tools, self.config.stages.max_len))
            .collect()
    }

    /// Stage 2: the gate on frozen encodings, plus the entropy-weight ablation.
    pub fn train_gate(&self, seed: u64) -> Result<GateNetwork> {
        let ctx = self.context(seed, self.load_backbone()?)?;
        require(&self.layout.pretrained(seed), "pretrain")?;
        let c = &self.config;
        let mut cache = EmbeddingCache::default();
        let train = self.gate_samples(&ctx, &mut cache, &ctx.data.train)?;
        let val = self.gate_samples(&ctx, &mut cache, &ctx.data.validation)?;
        let rng = self.rng(seed).substream("gate");
        let dim = c.model.hidden;
        let (gate, log) = train_gate(&train, &val, dim, &c.gate, c.optim, &rng)?;
        let mut lambda = Vec::with_capacity(c.stages.lambda_grid.len());
        for &l in &c.stages.lambda_grid {
            let m = if l == c.gate.lambda {
                evaluate_gate(&gate, &val, l)?
            } else {
                let (g, _) = train_gate(&train, &val, dim, &GateConfig { lambda: l, ..c.gate }, c.optim, &rng)?;
                evaluate_gate(&g, &val, l)?
            };
            lambda.push(LambdaRow { seed, lambda: l, val_accuracy: m.accuracy, val_entropy: m.mean_entropy });
        }
        gate.save(&self.layout.gate(seed))?;
        cache.save(&self.layout.embeddings(seed))?;
        let reports = self.layout.seed_reports(seed);
        write_records::<GateEpoch>(&reports.join("gate.jsonl"), &log)?;
        write_records(&reports.join("lambda.jsonl"), &lambda)?;
        Ok(gate)
    }

    fn load_gate(&self, seed: u64) -> Result<(GateNetwork, EmbeddingCache)> {
        require(&self.layout.gate(seed), "train-gate")?;
        let cache_path = self.layout.embeddings(seed);
        let cache = if cache_path.exists() { EmbeddingCache::load(&cache_path)? } else { EmbeddingCache::default() };
        Ok((GateNetwork::load(&self.layout.gate(seed))?, cache))
    }

    fn gate_for(&self, ctx: &SeedContext, gate: &GateNetwork, cache: &mut EmbeddingCache, items: &[TraceInstance]) -> Result<Vec<CompositionWeights>> {
        let tok = Tokenizer::new();
        items
            .iter()
            .map(|i| gate_weights(gate, &gate_sample(&ctx.model, cache, &tok, i, &ctx.data.tools, self.config.stages.max_len)?))
            .collect()
    }

    fn keep(&self, a: &CompositionWeights) -> CompositionWeights {
        self.config.stages.top_n.map_or_else(|| a.clone(), |n| top_n(a, n))
    }

    /// Stage 3: joint fine-tuning of the kept adapters under frozen gate weights.
    pub fn finetune(&self, seed: u64) -> Result<AdapterStore> {
        let ctx = self.context(seed, self.load_backbone()?)?;
        require(&self.layout.pretrained(seed), "pretrain")?;
        let pretrained = AdapterStore::load(&self.layout.pretrained(seed))?;
        let (gate, mut cache) = self.load_gate(seed)?;
        let c = &self.config;
        let items: Vec<TraceInstance> = ctx.data.train.iter().filter(|i| i.format == Format::DocumentFree).cloned().collect();
        let alphas = self.gate_for(&ctx, &gate, &mut cache, &items)?;
        let refs: Vec<&TraceInstance> = items.iter().collect();
        let seqs = self.sequences(&ctx, &refs, Some(Format::DocumentFree))?;
        let samples: Vec<JointSample> =
            seqs.into_iter().zip(&alphas).map(|(seq, a)| JointSample { seq, alpha: self.keep(a) }).collect();
        let mut tuned = pretrained.clone();
        let t = Instant::now();
        let log = finetune_joint(&ctx.model, &mut tuned, &samples, c.stages.finetune, c.optim, &self.rng(seed))?;
        log::info!("seed {seed}: stage 3 took {:.1}s", t.elapsed().as_secs_f64());
        tuned.save(&self.layout.tuned(seed))?;
        let reports = self.layout.seed_reports(seed);
        write_records(&reports.join("finetune.jsonl"), &log)?;

        let val: Vec<TraceInstance> = ctx.data.validation.iter().filter(|i| i.format == Format::DocumentFree).cloned().collect();
        let val_gate = self.gate_for(&ctx, &gate, &mut cache, &val)?;
        let before = self.eval_with(&ctx, &pretrained, &pretrained, &val_gate, &val, Strategy::Paratool)?;
        let after = self.eval_with(&ctx, &tuned, &pretrained, &val_gate, &val, Strategy::Paratool)?;
        write_json(&reports.join("finetune_check.json"), &FinetuneCheck { seed, before: before.pass_rate, after: after.pass_rate })?;
        Ok(tuned)
    }

    fn eval_with(
        &self,
        ctx: &SeedContext,
        tuned: &AdapterStore,
        pretrained: &AdapterStore,
        gate: &[CompositionWeights],
        items: &[TraceInstance],
        strategy: Strategy,
    ) -> Result<EvalReport> {
        let tok = Tokenizer::new();
        let inputs = EvalInputs {
            model: &ctx.model,
            tokenizer: &tok,
            tools: &ctx.data.tools,
            tuned,
            pretrained,
            gate,
            top_n: self.config.stages.top_n,
            max_len: self.config.stages.max_len,
            decode_budget: self.config.stages.decode_budget,
        };
        evaluate(&inputs, items, strategy)
    }

    /// Evaluates the listed strategies on the test split.
    pub fn eval(&self, seed: u64, strategies: &[Strategy]) -> Result<Vec<EvalReport>> {
        let ctx = self.context(seed, self.load_backbone()?)?;
        require(&self.layout.pretrained(seed), "pretrain")?;
        let (gate, mut cache) = self.load_gate(seed)?;
        let needs_tuned = strategies.iter().any(|&s| s != Strategy::NoFinetune);
        if needs_tuned {
            require(&self.layout.tuned(seed), "finetune")?;
        }
        let pretrained = AdapterStore::load(&self.layout.pretrained(seed))?;
        let tuned = if needs_tuned { AdapterStore::load(&self.layout.tuned(seed))? } else { pretrained.clone() };
        let weights = self.gate_for(&ctx, &gate, &mut cache, &ctx.data.test)?;
        let reports = parallel_map(strategies, self.threads, |&s| self.eval_with(&ctx, &tuned, &pretrained, &weights, &ctx.data.test, s))?;
        let dir = self.layout.seed_reports(seed);
        for r in &reports {
            write_records(&dir.join(format!("eval_{}.jsonl", r.strategy)), &r.records)?;
        }
        let rows: Vec<SummaryRow> = reports.iter().map(|r| SummaryRow::of(seed, r)).collect();
        merge_rows(&dir.join("eval.jsonl"), &rows)?;
        Ok(reports)
    }

    /// Robustness analysis on multi-candidate test instances with the fine-tuned adapters.
    pub fn theory(&self, seed: u64) -> Result<RobustnessReport> {
        let ctx = self.context(seed, self.load_backbone()?)?;
        require(&self.layout.tuned(seed), "finetune")?;
        let tuned = AdapterStore::load(&self.layout.tuned(seed))?;
        let (gate, mut cache) = self.load_gate(seed)?;
        let c = &self.config;
        let width = ctx.data.test.iter().map(|i| i.candidates.len()).max().unwrap_or(0);
        let items: Vec<TraceInstance> =
            ctx.data.test.iter().filter(|i| i.candidates.len() == width && width >= 2).take(c.theory.inputs).cloned().collect();
        if items.is_empty() {
            return Err(Error::Empty("multi-candidate test instances"));
        }
        let weights = self.gate_for(&ctx, &gate, &mut cache, &items)?;
        let refs: Vec<&TraceInstance> = items.iter().collect();
        let seqs = self.sequences(&ctx, &refs, Some(Format::DocumentFree))?;
        let instances = items
            .iter()
            .zip(seqs)
            .zip(&weights)
            .map(|((inst, seq), w)| {
                let kept = self.keep(w);
                Ok(TheoryInstance {
                    seq,
                    adapters: inst.candidates.iter().map(|&id| tuned.get(id)).collect::<Result<Vec<_>>>()?,
                    target: inst.target_index().ok_or_else(|| Error::TargetNotCandidate(inst.target.tool.clone()))?,
                    gate: inst.candidates.iter().map(|&id| kept.weight_of(id).unwrap_or(0.0)).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let report = soft_vs_hard_report(&ctx.model, &instances, &c.theory, &self.rng(seed).substream("theory"))?;
        let dir = self.layout.seed_reports(seed);
        write_json(&dir.join("theory.json"), &TheorySummary::of(&report))?;
        write_records(&dir.join("theory_records.jsonl"), &report.records)?;
        std::fs::write(dir.join("theory.tsv"), theory_table(&report))?;
        Ok(report)
    }

    /// Cost table for the corpus profile, the Llama-scale profile and any configured profiles.
    pub fn flops(&self) -> Result<FlopsReport> {
        let c = &self.config;
        let seed = c.seeds[0];
        let data = self.load_data(seed)?;
        let n = c.stages.top_n.map(|n| n as u64);
        let mean_candidates = data.test.iter().map(|i| i.candidates.len()).sum::<usize>() as f64 / data.test.len().max(1) as f64;
        let adapters = n.unwrap_or(mean_candidates.round() as u64);
        let mut profiles = vec![
            corpus_profile("desk-test", &data.test, &data.tools, &Tokenizer::new(), &c.model, &c.adapter, &c.gate, adapters)?,
            llama_profile("llama-scale", c.flops.llama_s_par, c.flops.llama_s_par * c.flops.llama_context_multiple),
        ];
        profiles.extend(c.flops.profiles.iter().cloned());
        let report = flops_table(&profiles)?;
        let dir = self.layout.reports();
        write_records(&dir.join("flops.jsonl"), &report.rows)?;
        std::fs::write(dir.join("flops.tsv"), report.to_table())?;
        Ok(report)
    }

    /// Renders the summary tables from the per-seed evaluation records.
    pub fn report(&self) -> Result<String> {
        let mut rows = Vec::new();
        for &seed in &self.config.seeds {
            let path = self.layout.seed_reports(seed).join("eval.jsonl");
            require(&path, "eval")?;
            rows.extend(read_jsonl::<SummaryRow>(&path)?);
        }
        let dir = self.layout.reports();
        write_records(&dir.join("summary.jsonl"), &rows)?;
        let table = summary_table(&rows);
        std::fs::write(dir.join("summary.tsv"), &table)?;
        std::fs::write(dir.join("summary_mean.tsv"), mean_table(&rows))?;
        Ok(table)
    }

    fn seed_outcome(&self, seed: u64) -> Result<SeedOutcome> {
        let reports = self.layout.seed_reports(seed);
        Ok(SeedOutcome {
            seed,
            stage1_oracle: serde_json::from_str(&std::fs::read_to_string(reports.join("stage1_oracle.json"))?)?,
            reports: read_jsonl(&reports.join("eval.jsonl"))?,
            lambda: read_jsonl(&reports.join("lambda.jsonl"))?,
            finetune: serde_json::from_str(&std::fs::read_to_string(reports.join("finetune_check.json"))?)?,
            theory: self.theory(seed)?,
        })
    }

    /// Every stage for every seed, then the cost table and summaries.
    pub fn run_all(&self) -> Result<ExperimentOutcome> {
        self.archive_config()?;
        self.backbone()?;
        let mut seeds = Vec::with_capacity(self.config.seeds.len());
        for &seed in &self.config.seeds {
            let t = Instant::now();
            self.synth(seed)?;
            self.pretrain(seed)?;
            self.train_gate(seed)?;
            self.finetune(seed)?;
            self.eval(seed, &Strategy::ALL)?;
            seeds.push(self.seed_outcome(seed)?);
            log::info!("seed {seed} finished in {:.1}s", t.elapsed().as_secs_f64());
        }
        let flops = self.flops()?;
        self.report()?;
        Ok(ExperimentOutcome { seeds, flops })
    }
}

/// Replaces rows of the same seed and strategy, keeping the file sorted.
fn merge_rows(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut all: Vec<SummaryRow> = if path.exists() { read_jsonl(path)? } else { Vec::new() };
    all.retain(|r| !rows.iter().any(|n| n.seed == r.seed && n.strategy == r.strategy));
    all.extend(rows.iter().cloned());
    all.sort_by_key(|r| (r.seed, Strategy::ALL.iter().position(|s| *s == r.strategy)));
    write_records(path, &all)
}

pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut out = String::from(
        "seed\tstrategy\tpass_rate\tgating_accuracy\taction_accuracy\tsingle_pass\tmulti_pass\tmulti_gating\tmulti_action\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            r.seed,
            r.strategy,
            r.pass_rate,
            r.gating_accuracy,
            r.action_accuracy,
            r.single_call.pass_rate,
            r.multi_call.pass_rate,
            r.multi_call.gating_accuracy,
            r.multi_call.action_accuracy
        );
    }
    out
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

/// Mean ± std over seeds for each strategy.
pub fn mean_table(rows: &[SummaryRow]) -> String {
    let mut out = String::from("strategy\tseeds\tpass_rate\tgating_accuracy\taction_accuracy\tmulti_gating\tmulti_action\n");
    for s in Strategy::ALL {
        let rs: Vec<&SummaryRow> = rows.iter().filter(|r| r.strategy == s).collect();
        if rs.is_empty() {
            continue;
        }
        let col = |f: &dyn Fn(&SummaryRow) -> f64| {
            let (m, d) = mean_std(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            format!("{m:.4}±{d:.4}")
        };
        let _ = writeln!(
            out,
            "{s}\t{}\t{}\t{}\t{}\t{}\t{}",
            rs.len(),
            col(&|r| r.pass_rate),
            col(&|r| r.gating_accuracy),
            col(&|r| r.action_accuracy),
            col(&|r| r.multi_call.gating_accuracy),
            col(&|r| r.multi_call.action_accuracy)
        );
    }
    out
}

/// Theory report without the per-record list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheorySummary {
    pub estimates: crate::theory::TheoryEstimates,
    pub manifest_samples: usize,
    pub manifest_violations: usize,
    pub heldout: crate::theory::HeldOut,
    pub regimes: Vec<crate::theory::RegimeSummary>,
    pub uniform_vs_one_hot: crate::theory::UniformVsOneHot,
}

impl TheorySummary {
    pub fn of(r: &RobustnessReport) -> Self {
        Self {
            estimates: r.estimates.clone(),
            manifest_samples: r.manifest_samples,
            manifest_violations: r.manifest_violations,
            heldout: r.heldout.clone(),
            regimes: r.regimes.clone(),
            uniform_vs_one_hot: r.uniform_vs_one_hot.clone(),
        }
    }
}

pub fn theory_table(r: &RobustnessReport) -> String {
    let mut out = String::from("regime\tcount\tmean_grad_norm\tmax_grad_norm\tmean_bound\tmean_radius\tprobe_pass_rate\n");
    for s in &r.regimes {
        let _ = writeln!(
            out,
            "{:?}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.4}",
            s.regime, s.count, s.mean_grad_norm, s.max_grad_norm, s.mean_bound, s.mean_radius, s.probe_pass_rate
        );
    }
    out
}
