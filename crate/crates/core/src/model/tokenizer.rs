use std::collections::HashMap;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::synth::vocab;

/// Token ids plus the region holding the target action.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub span: Range<usize>,
}

impl TokenSequence {
    pub fn prompt(ids: Vec<usize>) -> Self {
        let n = ids.len();
        Self { ids, span: n..n }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Next-token targets: row `t` predicts `ids[t + 1]` when that token lies
    /// in the action span.
    pub fn targets(&self) -> Vec<Option<usize>> {
        (0..self.ids.len())
            .map(|t| (self.span.contains(&(t + 1))).then(|| self.ids[t + 1]))
            .collect()
    }
}

/// One id per whitespace-separated symbol of the closed vocabulary.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer {
    pub fn new() -> Self {
        let symbols = vocab::symbols();
        let index = symbols.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Self { symbols, index }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Result<usize> {
        self.index.get(symbol).copied().ok_or_else(|| Error::OutOfVocabulary(symbol.to_string()))
    }

    pub fn symbol(&self, id: usize) -> &str {
        self.symbols.get(id).map_or("<unk>", String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        let ids = text.split_whitespace().map(|s| self.id(s)).collect::<Result<Vec<_>>>()?;
        Ok(TokenSequence::prompt(ids))
    }

    pub fn encode<S: AsRef<str>>(&self, symbols: &[S]) -> Result<Vec<usize>> {
        symbols.iter().map(|s| self.id(s.as_ref())).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.symbol(i)).collect::<Vec<_>>().join(" ")
    }

    /// Prompt followed by the action; the span covers the action tokens.
    pub fn training_sequence<S: AsRef<str>, T: AsRef<str>>(&self, prompt: &[S], action: &[T]) -> Result<TokenSequence> {
        let mut ids = self.encode(prompt)?;
        let start = ids.len();
        ids.extend(self.encode(action)?);
        let end = ids.len();
        Ok(TokenSequence { ids, span: start..end })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_cases() {
        let tok = Tokenizer::new();
        assert!(tok.tokenize("").unwrap().is_empty());
        let s = tok.tokenize("CALL add ARG 3 ARG 4 END").unwrap();
        assert_eq!(s.len(), 7);
        assert_eq!(tok.detokenize(&s.ids), "CALL add ARG 3 ARG 4 END");
        assert!(matches!(tok.tokenize("CALL banana"), Err(Error::OutOfVocabulary(_))));
    }

    #[test]
    fn targets_cover_only_the_span() {
        let tok = Tokenizer::new();
        let seq = tok.training_sequence(&["<bos>", "QUERY", "ACT"], &["CALL", "add", "END"]).unwrap();
        let t = seq.targets();
        assert_eq!(t.iter().flatten().count(), 3);
        assert_eq!(t[0], None);
        assert_eq!(t[2], Some(tok.id("CALL").unwrap()));
        assert_eq!(t[5], None);
    }
}
