use std::fmt;

use serde::{Deserialize, Serialize};

use super::vocab::{self, ARG, CALL, DESC, END, INT, INT_DOMAIN, LETTERS, PARAM, SYM, TOOL};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub type ToolId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Integer,
    Symbol,
}

impl ParamKind {
    pub fn token(self) -> &'static str {
        match self {
            ParamKind::Integer => INT,
            ParamKind::Symbol => SYM,
        }
    }

    pub fn admits(self, value: &str) -> bool {
        match self {
            ParamKind::Integer => value.parse::<u8>().is_ok_and(|v| v < INT_DOMAIN),
            ParamKind::Symbol => LETTERS.contains(&value),
        }
    }

    pub fn sample(self, rng: &mut Rng) -> String {
        match self {
            ParamKind::Integer => rng.below(INT_DOMAIN as usize).to_string(),
            ParamKind::Symbol => LETTERS[rng.below(LETTERS.len())].to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
}

/// Executable behaviour of a tool over the closed value domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Semantics {
    Add,
    Sum3,
    Sub,
    Mul,
    Max,
    Min,
    Succ,
    Double,
    Concat,
    Flip,
    Reverse,
    Lookup { table: Vec<u8> },
    Front,
    Back,
    Neg,
    Pred,
}

/// One tool invocation: `CALL <tool> ARG <v> ... END`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub tool: String,
    pub args: Vec<String>,
}

impl Action {
    pub fn new(tool: impl Into<String>, args: Vec<String>) -> Self {
        Self { tool: tool.into(), args }
    }

    pub fn tokens(&self) -> Vec<String> {
        let mut out = vec![CALL.to_string(), self.tool.clone()];
        for a in &self.args {
            out.push(ARG.to_string());
            out.push(a.clone());
        }
        out.push(END.to_string());
        out
    }

    /// Parses an emitted symbol sequence. Anything but the exact grammar is
    /// rejected.
    pub fn parse<S: AsRef<str>>(symbols: &[S]) -> Option<Action> {
        let s: Vec<&str> = symbols.iter().map(AsRef::as_ref).collect();
        if s.len() < 3 || s[0] != CALL || s[s.len() - 1] != END {
            return None;
        }
        let tool = s[1];
        if !vocab::TOOL_NAMES.contains(&tool) {
            return None;
        }
        let body = &s[2..s.len() - 1];
        if body.len() % 2 != 0 {
            return None;
        }
        let mut args = Vec::with_capacity(body.len() / 2);
        for pair in body.chunks(2) {
            if pair[0] != ARG || is_structural(pair[1]) {
                return None;
            }
            args.push(pair[1].to_string());
        }
        Some(Action::new(tool, args))
    }
}

fn is_structural(s: &str) -> bool {
    [vocab::PAD, vocab::BOS, vocab::QUERY, vocab::HIST, vocab::OBS, vocab::ACT, CALL, ARG, END]
        .contains(&s)
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.tokens().join(" "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub id: ToolId,
    pub name: String,
    pub params: Vec<Param>,
    pub description: Vec<String>,
    /// Query templates; `{x}` style placeholders name parameters.
    pub templates: Vec<String>,
    /// Documentation examples, one rendered `query action` line each.
    pub examples: Vec<String>,
    pub semantics: Semantics,
}

struct Template {
    name: &'static str,
    desc: &'static str,
    params: &'static [(&'static str, ParamKind)],
    queries: &'static [&'static str],
    semantics: fn(&mut Rng) -> Semantics,
}

const II: &[(&str, ParamKind)] = &[("x", ParamKind::Integer), ("y", ParamKind::Integer)];
const III: &[(&str, ParamKind)] =
    &[("x", ParamKind::Integer), ("y", ParamKind::Integer), ("z", ParamKind::Integer)];
const I: &[(&str, ParamKind)] = &[("x", ParamKind::Integer)];
const S: &[(&str, ParamKind)] = &[("s", ParamKind::Symbol)];
const SS: &[(&str, ParamKind)] = &[("s", ParamKind::Symbol), ("t", ParamKind::Symbol)];
const SSS: &[(&str, ParamKind)] =
    &[("s", ParamKind::Symbol), ("t", ParamKind::Symbol), ("u", ParamKind::Symbol)];

const CATALOG: [Template; 16] = [
    Template { name: "add", desc: "sum of two numbers", params: II,
        queries: &["sum of {x} and {y}", "what is {x} plus {y}"], semantics: |_| Semantics::Add },
    Template { name: "sum3", desc: "sum of three numbers", params: III,
        queries: &["sum of {x} {y} and {z}", "what is {x} plus {y} plus {z}"], semantics: |_| Semantics::Sum3 },
    Template { name: "sub", desc: "difference of two numbers", params: II,
        queries: &["difference of {x} and {y}", "take {y} from {x}"], semantics: |_| Semantics::Sub },
    Template { name: "mul", desc: "product of two numbers", params: II,
        queries: &["product of {x} and {y}", "what is {x} times {y}"], semantics: |_| Semantics::Mul },
    Template { name: "max", desc: "larger of two numbers", params: II,
        queries: &["larger of {x} and {y}", "what is the larger of {x} and {y}"], semantics: |_| Semantics::Max },
    Template { name: "min", desc: "smaller of two numbers", params: II,
        queries: &["smaller of {x} and {y}", "what is the smaller of {x} and {y}"], semantics: |_| Semantics::Min },
    Template { name: "succ", desc: "next number", params: I,
        queries: &["next after {x}", "the number after {x}"], semantics: |_| Semantics::Succ },
    Template { name: "double", desc: "twice the number", params: I,
        queries: &["twice {x}", "what is {x} times two"], semantics: |_| Semantics::Double },
    Template { name: "concat", desc: "join two letters", params: SS,
        queries: &["join {s} and {t}", "join the letters {s} {t}"], semantics: |_| Semantics::Concat },
    Template { name: "flip", desc: "swap two letters", params: SS,
        queries: &["swap {s} and {t}", "swap the letters {s} {t}"], semantics: |_| Semantics::Flip },
    Template { name: "rev", desc: "reverse three letters", params: SSS,
        queries: &["reverse {s} {t} {u}", "reverse the letters {s} {t} and {u}"], semantics: |_| Semantics::Reverse },
    Template { name: "lookup", desc: "value of the letter", params: S,
        queries: &["value of {s}", "what is the value of {s}"], semantics: |rng| {
            let mut table: Vec<u8> = (0..INT_DOMAIN).collect();
            rng.shuffle(&mut table);
            table.truncate(LETTERS.len());
            Semantics::Lookup { table }
        } },
    Template { name: "front", desc: "first of three letters", params: SSS,
        queries: &["first of {s} {t} {u}", "the first letter of {s} {t} and {u}"], semantics: |_| Semantics::Front },
    Template { name: "back", desc: "last of three letters", params: SSS,
        queries: &["last of {s} {t} {u}", "the last letter of {s} {t} and {u}"], semantics: |_| Semantics::Back },
    Template { name: "neg", desc: "minus the number", params: I,
        queries: &["minus {x}", "what is minus {x}"], semantics: |_| Semantics::Neg },
    Template { name: "pred", desc: "number before the number", params: I,
        queries: &["the number before {x}", "what is before {x}"], semantics: |_| Semantics::Pred },
];

pub const MAX_TOOLS: usize = CATALOG.len();

/// The first `count` tools of the catalog. The catalog opens with a
/// near-duplicate pair (`add`, `sum3`) so every toolset stresses selection.
pub fn gen_toolset(seed: u64, count: usize) -> Result<Vec<ToolSpec>> {
    if !(2..=MAX_TOOLS).contains(&count) {
        return Err(Error::Config(format!("toolset size must be in 2..={MAX_TOOLS}, got {count}")));
    }
    let root = Rng::new(seed).substream("toolset");
    let tools = CATALOG[..count]
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut rng = root.substream(t.name);
            let params: Vec<Param> =
                t.params.iter().map(|(n, k)| Param { name: n.to_string(), kind: *k }).collect();
            let mut spec = ToolSpec {
                id: i as ToolId,
                name: t.name.to_string(),
                params,
                description: t.desc.split_whitespace().map(str::to_string).collect(),
                templates: t.queries.iter().map(|q| q.to_string()).collect(),
                examples: Vec::new(),
                semantics: (t.semantics)(&mut rng),
            };
            spec.examples = spec
                .templates
                .iter()
                .enumerate()
                .map(|(k, tpl)| {
                    let args: Vec<String> = spec
                        .params
                        .iter()
                        .enumerate()
                        .map(|(j, p)| match p.kind {
                            ParamKind::Integer => ((3 * k + 2 * j + 1) % INT_DOMAIN as usize).to_string(),
                            ParamKind::Symbol => LETTERS[(k + j) % LETTERS.len()].to_string(),
                        })
                        .collect();
                    let q = spec.fill(tpl, &args);
                    format!("{q} {}", Action::new(spec.name.clone(), args))
                })
                .collect();
            spec
        })
        .collect();
    Ok(tools)
}

impl ToolSpec {
    /// `TOOL <name> DESC <words> PARAM <p> <kind> ...`
    pub fn document(&self) -> Vec<String> {
        let mut out = vec![TOOL.to_string(), self.name.clone(), DESC.to_string()];
        out.extend(self.description.iter().cloned());
        for p in &self.params {
            out.push(PARAM.to_string());
            out.push(p.name.clone());
            out.push(p.kind.token().to_string());
        }
        out
    }

    pub fn example_tokens(&self) -> usize {
        self.examples.iter().map(|e| e.split_whitespace().count()).sum()
    }

    /// Substitutes argument values into a query template.
    pub fn fill(&self, template: &str, args: &[String]) -> String {
        template
            .split_whitespace()
            .map(|w| {
                match w.strip_prefix('{').and_then(|r| r.strip_suffix('}')) {
                    Some(name) => {
                        let idx = self.params.iter().position(|p| p.name == name).expect("template names a parameter");
                        args[idx].clone()
                    }
                    None => w.to_string(),
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Name match, arity and per-argument kind checks.
    pub fn validate(&self, action: &Action) -> bool {
        action.tool == self.name
            && action.args.len() == self.params.len()
            && self.params.iter().zip(&action.args).all(|(p, a)| p.kind.admits(a))
    }

    /// Runs the tool; the observation is a short space-separated rendering.
    pub fn execute(&self, action: &Action) -> Result<String> {
        if !self.validate(action) {
            return Err(Error::Config(format!("invalid call for {}: {action}", self.name)));
        }
        let a = &action.args;
        let int = |i: usize| a[i].parse::<u32>().expect("validated integer");
        let m = u32::from(INT_DOMAIN);
        let letter = |i: usize| LETTERS.iter().position(|l| *l == a[i]).expect("validated letter");
        let out = match &self.semantics {
            Semantics::Add => ((int(0) + int(1)) % m).to_string(),
            Semantics::Sum3 => ((int(0) + int(1) + int(2)) % m).to_string(),
            Semantics::Sub => ((int(0) + m - int(1)) % m).to_string(),
            Semantics::Mul => ((int(0) * int(1)) % m).to_string(),
            Semantics::Max => int(0).max(int(1)).to_string(),
            Semantics::Min => int(0).min(int(1)).to_string(),
            Semantics::Succ => ((int(0) + 1) % m).to_string(),
            Semantics::Double => ((2 * int(0)) % m).to_string(),
            Semantics::Neg => ((m - int(0)) % m).to_string(),
            Semantics::Pred => ((int(0) + m - 1) % m).to_string(),
            Semantics::Concat => format!("{} {}", a[0], a[1]),
            Semantics::Flip => format!("{} {}", a[1], a[0]),
            Semantics::Reverse => format!("{} {} {}", a[2], a[1], a[0]),
            Semantics::Front => a[0].clone(),
            Semantics::Back => a[2].clone(),
            Semantics::Lookup { table } => table[letter(0)].to_string(),
        };
        Ok(out)
    }
}

/// `|A ∩ B| / |A ∪ B|` over token sets. Two empty sets count as identical.
pub fn jaccard<S: AsRef<str>>(a: &[S], b: &[S]) -> f64 {
    use std::collections::BTreeSet;
    let sa: BTreeSet<&str> = a.iter().map(AsRef::as_ref).collect();
    let sb: BTreeSet<&str> = b.iter().map(AsRef::as_ref).collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn toolset_is_deterministic_and_unique() {
        let a = gen_toolset(9, 12).unwrap();
        assert_eq!(a, gen_toolset(9, 12).unwrap());
        let names: std::collections::HashSet<_> = a.iter().map(|t| t.name.clone()).collect();
        assert_eq!(names.len(), 12);
        let ids: std::collections::HashSet<_> = a.iter().map(|t| t.id).collect();
        assert_eq!(ids.len(), 12);
        assert!(gen_toolset(9, 1).is_err());
    }

    #[test]
    fn near_duplicate_pair_present() {
        let tools = gen_toolset(0, 12).unwrap();
        // add vs sum3: 9 shared of 14 distinct document tokens.
        let pair = jaccard(&tools[0].document(), &tools[1].document());
        assert!((pair - 9.0 / 14.0).abs() < 1e-12, "{pair}");
        // The two-integer arithmetic tools differ only in name and one word: 9/13.
        let sub_mul = jaccard(&tools[2].document(), &tools[3].document());
        assert!((sub_mul - 9.0 / 13.0).abs() < 1e-12, "{sub_mul}");
    }

    #[test]
    fn jaccard_cases() {
        assert_eq!(jaccard(&toks("a b"), &toks("b a")), 1.0);
        assert_eq!(jaccard(&toks("a b"), &toks("c d")), 0.0);
        assert_eq!(jaccard(&toks("a b c"), &toks("b c d")), 0.5);
        assert_eq!(jaccard::<&str>(&[], &[]), 1.0);
    }

    #[test]
    fn add_executes() {
        let tools = gen_toolset(0, 12).unwrap();
        let add = &tools[0];
        let call = Action::new("add", vec!["3".into(), "4".into()]);
        assert_eq!(call.tokens().len(), 7);
        assert_eq!(add.execute(&call).unwrap(), "7");
        assert!(add.execute(&Action::new("add", vec!["3".into()])).is_err());
        assert!(add.execute(&Action::new("add", vec!["3".into(), "x".into()])).is_err());
    }

    #[test]
    fn action_parse_roundtrip_and_rejects() {
        let a = Action::new("rev", vec!["a".into(), "b".into(), "c".into()]);
        assert_eq!(Action::parse(&a.tokens()), Some(a));
        assert_eq!(Action::parse(&toks("CALL add ARG 1 END END")), None);
        assert_eq!(Action::parse(&toks("CALL nope ARG 1 END")), None);
        assert_eq!(Action::parse(&toks("CALL add ARG END")), None);
        assert_eq!(Action::parse(&toks("CALL add END")), Some(Action::new("add", vec![])));
    }

    #[test]
    fn documents_stay_in_vocabulary() {
        let vocab = vocab::symbols();
        for t in gen_toolset(1, MAX_TOOLS).unwrap() {
            for tok in t.document() {
                assert!(vocab.contains(&tok), "{tok}");
            }
            for e in &t.examples {
                for tok in e.split_whitespace() {
                    assert!(vocab.iter().any(|v| v == tok), "{tok}");
                }
            }
        }
    }
}
