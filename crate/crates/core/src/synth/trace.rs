use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tools::{jaccard, Action, ToolId, ToolSpec};
use super::vocab::{ACT, BOS, HIST, OBS, QUERY, THEN, TOOLS};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    DocumentAware,
    DocumentFree,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryStep {
    pub action: Action,
    pub observation: String,
}

/// One next-tool-prediction sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceInstance {
    pub query: String,
    pub history: Vec<HistoryStep>,
    pub candidates: Vec<ToolId>,
    pub target: Action,
    pub target_tool: ToolId,
    pub format: Format,
    pub split: Split,
    /// Number of calls in the originating episode.
    pub calls: usize,
    pub episode: usize,
}

impl TraceInstance {
    pub fn with_format(&self, format: Format) -> Self {
        Self { format, ..self.clone() }
    }

    pub fn target_index(&self) -> Option<usize> {
        self.candidates.iter().position(|c| *c == self.target_tool)
    }
}

/// `k` template-generated `(query, action)` pairs for one tool.
pub fn gen_atomic_examples(tool: &ToolSpec, k: usize, rng: &mut Rng) -> Vec<(String, Action)> {
    (0..k)
        .map(|_| {
            let tpl = &tool.templates[rng.below(tool.templates.len())];
            let args: Vec<String> = tool.params.iter().map(|p| p.kind.sample(rng)).collect();
            (tool.fill(tpl, &args), Action::new(tool.name.clone(), args))
        })
        .collect()
}

/// The `m` tools whose documents are most Jaccard-similar to the target's
/// (ties broken by id), plus the target, in shuffled order.
pub fn build_distractors(target: &ToolSpec, pool: &[&ToolSpec], m: usize, rng: &mut Rng) -> Result<Vec<ToolId>> {
    if pool.iter().any(|t| t.id == target.id) {
        return Err(Error::Config("distractor pool contains the target".into()));
    }
    if m > pool.len() {
        return Err(Error::Config(format!("{m} distractors requested from a pool of {}", pool.len())));
    }
    let doc = target.document();
    let mut ranked: Vec<(f64, ToolId)> = pool.iter().map(|t| (jaccard(&doc, &t.document()), t.id)).collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut out: Vec<ToolId> = ranked[..m].iter().map(|(_, id)| *id).collect();
    out.push(target.id);
    rng.shuffle(&mut out);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoryConfig {
    /// Distractor counts cycled over single-call instances.
    pub single_distractors: Vec<usize>,
    /// Single-call instances built from each atomic example.
    pub single_per_example: usize,
    /// Episodes per tool that repeat the same tool.
    pub same_tool_episodes: usize,
    /// Episodes per tool that mix tools drawn from the candidate set.
    pub cross_tool_episodes: usize,
    pub multi_distractors: usize,
    pub min_calls: usize,
    pub max_calls: usize,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            single_distractors: vec![1, 2],
            single_per_example: 1,
            same_tool_episodes: 3,
            cross_tool_episodes: 5,
            multi_distractors: 3,
            min_calls: 2,
            max_calls: 4,
        }
    }
}

fn cut_episode(
    tools: &[ToolSpec],
    calls: &[(String, Action)],
    candidates: &[ToolId],
    episode: usize,
) -> Result<Vec<TraceInstance>> {
    let query = calls.iter().map(|(q, _)| q.as_str()).collect::<Vec<_>>().join(&format!(" {THEN} "));
    let mut history = Vec::new();
    let mut out = Vec::with_capacity(calls.len());
    for (_, action) in calls {
        let tool = tools.iter().find(|t| t.name == action.tool).ok_or_else(|| Error::UnknownTool(action.tool.clone()))?;
        out.push(TraceInstance {
            query: query.clone(),
            history: history.clone(),
            candidates: candidates.to_vec(),
            target: action.clone(),
            target_tool: tool.id,
            format: Format::DocumentFree,
            split: Split::Train,
            calls: calls.len(),
            episode,
        });
        history.push(HistoryStep { action: action.clone(), observation: tool.execute(action)? });
    }
    Ok(out)
}

/// Builds single- and multi-call episodes and cuts each one immediately
/// before every call, yielding one instance per step.
pub fn compose_trajectories(
    tools: &[ToolSpec],
    pools: &[Vec<(String, Action)>],
    config: &TrajectoryConfig,
    rng: &mut Rng,
) -> Result<Vec<TraceInstance>> {
    if pools.len() != tools.len() || pools.iter().any(Vec::is_empty) {
        return Err(Error::Empty("atomic example pool"));
    }
    if config.min_calls < 2 || config.max_calls < config.min_calls {
        return Err(Error::Config("multi-call episodes need 2 <= min_calls <= max_calls".into()));
    }
    let mut out = Vec::new();
    let mut episode = 0;
    for (tool, pool) in tools.iter().zip(pools) {
        let others: Vec<&ToolSpec> = tools.iter().filter(|t| t.id != tool.id).collect();
        let mut cycle = config.single_distractors.iter().cycle();
        for example in pool {
            for _ in 0..config.single_per_example {
                let m = (*cycle.next().unwrap_or(&0)).min(others.len());
                let cands = build_distractors(tool, &others, m, rng)?;
                out.extend(cut_episode(tools, std::slice::from_ref(example), &cands, episode)?);
                episode += 1;
            }
        }
        let span = config.max_calls - config.min_calls + 1;
        for _ in 0..config.same_tool_episodes {
            let k = config.min_calls + rng.below(span);
            let calls: Vec<_> = (0..k).map(|_| pool[rng.below(pool.len())].clone()).collect();
            let m = config.single_distractors.first().copied().unwrap_or(0).min(others.len());
            let cands = build_distractors(tool, &others, m, rng)?;
            out.extend(cut_episode(tools, &calls, &cands, episode)?);
            episode += 1;
        }
        for _ in 0..config.cross_tool_episodes {
            let k = config.min_calls + rng.below(span);
            let m = config.multi_distractors.min(others.len());
            let cands = build_distractors(tool, &others, m, rng)?;
            let mut calls = vec![pool[rng.below(pool.len())].clone()];
            for _ in 1..k {
                let pick = cands[rng.below(cands.len())] as usize;
                let p = &pools[pick];
                calls.push(p[rng.below(p.len())].clone());
            }
            rng.shuffle(&mut calls);
            out.extend(cut_episode(tools, &calls, &cands, episode)?);
            episode += 1;
        }
    }
    Ok(out)
}

/// Drops every training instance whose query exactly matches a test query.
/// Returns the filtered set and the number removed.
pub fn decontaminate(train: Vec<TraceInstance>, test: &[TraceInstance]) -> (Vec<TraceInstance>, usize) {
    let banned: HashSet<&str> = test.iter().map(|t| t.query.as_str()).collect();
    let before = train.len();
    let kept: Vec<TraceInstance> = train.into_iter().filter(|t| !banned.contains(t.query.as_str())).collect();
    let removed = before - kept.len();
    (kept, removed)
}

fn push_words(out: &mut Vec<String>, text: &str) {
    out.extend(text.split_whitespace().map(str::to_string));
}

/// Prompt symbols for an instance, ending with the action marker.
///
/// Layout: `<bos> [TOOLS doc...] QUERY q HIST (CALL .. END OBS o)* ACT`.
/// The document-free form carries no tool documentation at all.
pub fn format_instance(instance: &TraceInstance, tools: &[ToolSpec], mode: Format, max_len: usize) -> Result<Vec<String>> {
    let mut out = vec![BOS.to_string()];
    if mode == Format::DocumentAware {
        out.push(TOOLS.to_string());
        for id in &instance.candidates {
            let tool = tools.iter().find(|t| t.id == *id).ok_or_else(|| Error::UnknownTool(id.to_string()))?;
            out.extend(tool.document());
        }
    }
    out.push(QUERY.to_string());
    push_words(&mut out, &instance.query);
    out.push(HIST.to_string());
    for step in &instance.history {
        out.extend(step.action.tokens());
        out.push(OBS.to_string());
        push_words(&mut out, &step.observation);
    }
    out.push(ACT.to_string());
    let total = out.len() + instance.target.tokens().len();
    if total > max_len {
        return Err(Error::Overlong { len: total, max: max_len });
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::tools::gen_toolset;
    use super::*;

    fn world() -> (Vec<ToolSpec>, Vec<Vec<(String, Action)>>) {
        let tools = gen_toolset(0, 12).unwrap();
        let mut rng = Rng::new(1);
        let pools = tools.iter().map(|t| gen_atomic_examples(t, 5, &mut rng)).collect();
        (tools, pools)
    }

    #[test]
    fn atomic_examples_validate() {
        let (tools, pools) = world();
        for (t, pool) in tools.iter().zip(&pools) {
            assert_eq!(pool.len(), 5);
            for (q, a) in pool {
                assert!(t.validate(a));
                t.execute(a).unwrap();
                for v in &a.args {
                    assert!(q.split_whitespace().any(|w| w == v), "{q} / {a}");
                }
            }
        }
        let mut rng = Rng::new(2);
        assert_eq!(gen_atomic_examples(&tools[0], 1, &mut rng).len(), 1);
    }

    #[test]
    fn distractors() {
        let (tools, _) = world();
        let pool: Vec<&ToolSpec> = tools[1..].iter().collect();
        let mut r1 = Rng::new(1);
        let mut r2 = Rng::new(2);
        assert_eq!(build_distractors(&tools[0], &pool, 0, &mut r1).unwrap(), vec![0]);
        let a = build_distractors(&tools[0], &pool, 4, &mut r1).unwrap();
        let b = build_distractors(&tools[0], &pool, 4, &mut r2).unwrap();
        let (mut sa, mut sb) = (a.clone(), b.clone());
        sa.sort();
        sb.sort();
        assert_eq!(sa, sb);
        assert!(a.contains(&0));
        assert!(build_distractors(&tools[0], &pool, 12, &mut r1).is_err());
    }

    #[test]
    fn episodes_cut_before_each_call() {
        let (tools, pools) = world();
        let calls: Vec<_> = pools[0][..3].to_vec();
        let inst = cut_episode(&tools, &calls, &[0, 1], 0).unwrap();
        let lens: Vec<usize> = inst.iter().map(|i| i.history.len()).collect();
        assert_eq!(lens, vec![0, 1, 2]);
        let single = cut_episode(&tools, &calls[..1], &[0], 1).unwrap();
        assert_eq!(single.len(), 1);
        assert!(single[0].history.is_empty());

        let seven = cut_episode(
            &tools,
            &[("q".into(), Action::new("add", vec!["3".into(), "4".into()])), ("r".into(), Action::new("succ", vec!["1".into()]))],
            &[0, 6],
            2,
        )
        .unwrap();
        assert_eq!(seven[1].history[0].observation, "7");
    }

    #[test]
    fn trajectories_keep_target_in_candidates() {
        let (tools, pools) = world();
        let mut rng = Rng::new(3);
        let all = compose_trajectories(&tools, &pools, &TrajectoryConfig::default(), &mut rng).unwrap();
        assert!(all.iter().all(|i| i.candidates.contains(&i.target_tool)));
        assert!(all.iter().any(|i| i.calls == 4));
        for i in &all {
            let tool = &tools[i.target_tool as usize];
            tool.execute(&i.target).unwrap();
        }
    }

    #[test]
    fn formats() {
        let (tools, pools) = world();
        let inst = cut_episode(&tools, &pools[2][..2], &[2, 3, 4], 0).unwrap();
        let free = format_instance(&inst[0], &tools, Format::DocumentFree, 384).unwrap();
        let aware = format_instance(&inst[0], &tools, Format::DocumentAware, 384).unwrap();
        assert!(aware.len() > free.len());
        assert!(!free.iter().any(|t| t == "DESC" || t == "PARAM" || t == "TOOL"));
        let h = free.iter().position(|t| t == HIST).unwrap();
        assert_eq!(&free[h + 1..], &[ACT.to_string()]);
        let second = format_instance(&inst[1], &tools, Format::DocumentFree, 384).unwrap();
        assert!(second.iter().any(|t| t == OBS));
        assert!(matches!(format_instance(&inst[0], &tools, Format::DocumentAware, 10), Err(Error::Overlong { .. })));
    }

    #[test]
    fn decontamination() {
        let (tools, pools) = world();
        let mut rng = Rng::new(4);
        let train = compose_trajectories(&tools, &pools, &TrajectoryConfig::default(), &mut rng).unwrap();
        let (same, removed) = decontaminate(train.clone(), &[]);
        assert_eq!((same.len(), removed), (train.len(), 0));
        let test: Vec<_> = train[..10].to_vec();
        let (kept, removed) = decontaminate(train.clone(), &test);
        assert!(removed >= 10);
        assert!(kept.iter().all(|k| test.iter().all(|t| t.query != k.query)));
        let (again, removed2) = decontaminate(kept.clone(), &test);
        assert_eq!(removed2, 0);
        assert_eq!(again, kept);
    }
}
