//! The closed symbol inventory shared by prompts, documents and actions.

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const QUERY: &str = "QUERY";
pub const HIST: &str = "HIST";
pub const OBS: &str = "OBS";
pub const ACT: &str = "ACT";
pub const CALL: &str = "CALL";
pub const ARG: &str = "ARG";
pub const END: &str = "END";
pub const TOOLS: &str = "TOOLS";
pub const TOOL: &str = "TOOL";
pub const DESC: &str = "DESC";
pub const PARAM: &str = "PARAM";
pub const INT: &str = "int";
pub const SYM: &str = "sym";
pub const THEN: &str = "THEN";

const STRUCTURAL: [&str; 16] =
    [PAD, BOS, QUERY, HIST, OBS, ACT, CALL, ARG, END, TOOLS, TOOL, DESC, PARAM, INT, SYM, THEN];

/// Integer values live in `0..INT_DOMAIN`; arithmetic wraps modulo this.
pub const INT_DOMAIN: u8 = 32;

pub const LETTERS: [&str; 8] = ["a", "b", "c", "d", "e", "f", "g", "h"];

pub const TOOL_NAMES: [&str; 16] = [
    "add", "sum3", "sub", "mul", "max", "min", "succ", "double", "concat", "flip", "rev",
    "lookup", "front", "back", "neg", "pred",
];

pub const WORDS: [&str; 31] = [
    "sum", "of", "and", "plus", "minus", "times", "what", "is", "the", "difference", "product",
    "larger", "smaller", "next", "after", "twice", "join", "letters", "swap", "reverse", "value",
    "letter", "first", "last", "two", "three", "numbers", "number", "take", "from", "before",
];

pub const PARAM_NAMES: [&str; 6] = ["x", "y", "z", "s", "t", "u"];

/// Every symbol in id order.
pub fn symbols() -> Vec<String> {
    let mut out: Vec<String> = STRUCTURAL.iter().map(|s| s.to_string()).collect();
    out.extend((0..INT_DOMAIN).map(|n| n.to_string()));
    out.extend(LETTERS.iter().map(|s| s.to_string()));
    out.extend(TOOL_NAMES.iter().map(|s| s.to_string()));
    out.extend(WORDS.iter().map(|s| s.to_string()));
    out.extend(PARAM_NAMES.iter().map(|s| s.to_string()));
    out
}
