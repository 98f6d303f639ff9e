use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { vocab_size: 128, hidden: 64, layers: 2, heads: 2, d_ff: 128, max_seq_len: 384, seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 || self.heads == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!("hidden {} not divisible by heads {}", self.hidden, self.heads)));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Parameter shapes in declared (checkpoint) order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, h, f) = (self.vocab_size, self.hidden, self.d_ff);
        let mut out = vec![("tok_emb".to_string(), vec![v, h]), ("pos_emb".to_string(), vec![self.max_seq_len, h])];
        for l in 0..self.layers {
            for (name, shape) in [
                ("ln1_g", vec![h]),
                ("ln1_b", vec![h]),
                ("wq", vec![h, h]),
                ("wk", vec![h, h]),
                ("wv", vec![h, h]),
                ("wo", vec![h, h]),
                ("ln2_g", vec![h]),
                ("ln2_b", vec![h]),
                ("w_up", vec![f, h]),
                ("w_down", vec![h, f]),
            ] {
                out.push((format!("layers.{l}.{name}"), shape));
            }
        }
        out.push(("lnf_g".to_string(), vec![h]));
        out.push(("lnf_b".to_string(), vec![h]));
        out.push(("w_out".to_string(), vec![v, h]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}
