use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

use super::config::ModelConfig;
use super::tokenizer::TokenSequence;

const MAGIC: &[u8; 4] = b"PTLM";
const VERSION: u32 = 1;

/// The two feed-forward matrices an adapter may attach to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Site {
    Up,
    Down,
}

impl Site {
    pub const ALL: [Site; 2] = [Site::Up, Site::Down];

    pub fn index(self) -> usize {
        match self {
            Site::Up => 0,
            Site::Down => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Site::Up => "up",
            Site::Down => "down",
        }
    }
}

/// Additive contribution to a feed-forward linear map, computed from its input.
pub trait FfnHook {
    fn apply(&self, tape: &mut Tape, layer: usize, site: Site, x: Var) -> Result<Option<Var>>;
}

/// Something that can place an [`FfnHook`] on a tape.
pub trait DeltaSource {
    fn bind_hook<'a>(&'a self, tape: &mut Tape) -> Result<Box<dyn FfnHook + 'a>>;
}

/// What enters the first block.
#[derive(Debug, Clone, Copy)]
pub enum Input<'a> {
    Tokens(&'a [usize]),
    /// Token embeddings already on the tape (`S×h`); positions are still added.
    Embeddings(Var),
}

/// Parameters placed on a tape, in declared order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOut {
    pub logits: Var,
    /// Final-layer state after the last normalization (`S×h`).
    pub hidden: Var,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecodeOutcome {
    /// Generation hit `END`; tokens include it.
    Finished(Vec<usize>),
    /// The budget ran out first.
    Exhausted(Vec<usize>),
}

impl DecodeOutcome {
    pub fn tokens(&self) -> &[usize] {
        match self {
            DecodeOutcome::Finished(t) | DecodeOutcome::Exhausted(t) => t,
        }
    }
}

/// Decoder-only transformer with pre-norm blocks and a ReLU feed-forward.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    config: ModelConfig,
    params: Vec<Tensor>,
}

struct LayerIdx {
    ln1_g: usize,
    wq: usize,
    wo: usize,
    ln2_g: usize,
    w_up: usize,
    w_down: usize,
}

fn layer_idx(l: usize) -> LayerIdx {
    let base = 2 + 10 * l;
    LayerIdx { ln1_g: base, wq: base + 2, wo: base + 5, ln2_g: base + 6, w_up: base + 8, w_down: base + 9 }
}

impl TransformerModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed).substream("model-init");
        let out_scale = 1.0 / ((2 * config.layers) as f64).sqrt();
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let short = name.rsplit('.').next().unwrap_or(&name);
                let data = match short {
                    "ln1_g" | "ln2_g" | "lnf_g" => vec![1.0; n],
                    "ln1_b" | "ln2_b" | "lnf_b" => vec![0.0; n],
                    "tok_emb" | "pos_emb" => rng.normal_vec(n, 0.02),
                    _ => {
                        let fan_in = shape[1] as f64;
                        let mut std = 1.0 / fan_in.sqrt();
                        if short == "wo" || short == "w_down" {
                            std *= out_scale;
                        }
                        rng.normal_vec(n, std)
                    }
                };
                Tensor::new(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::Config(format!("expected {} tensors, got {}", shapes.len(), params.len())));
        }
        for ((name, shape), p) in shapes.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::shape("from_params", format!("{name}: {:?} vs {:?}", p.shape(), shape)));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Feed-forward weight at a site (`d_ff×h` for up, `h×d_ff` for down).
    pub fn ffn_weight(&self, layer: usize, site: Site) -> &Tensor {
        let li = layer_idx(layer);
        match site {
            Site::Up => &self.params[li.w_up],
            Site::Down => &self.params[li.w_down],
        }
    }

    /// Output and input widths of a site, in that order.
    pub fn site_dims(&self, site: Site) -> (usize, usize) {
        match site {
            Site::Up => (self.config.d_ff, self.config.hidden),
            Site::Down => (self.config.hidden, self.config.d_ff),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundParams> {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { tape.leaf(p.clone()) } else { tape.constant(p.clone()) })
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundParams { vars })
    }

    pub fn token_embedding(&self) -> &Tensor {
        &self.params[0]
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, input: Input<'_>, hook: Option<&dyn FfnHook>) -> Result<ForwardOut> {
        let c = &self.config;
        let v = &p.vars;
        let tok = match input {
            Input::Tokens(ids) => {
                if ids.is_empty() {
                    return Err(Error::Empty("token sequence"));
                }
                tape.embedding(v[0], ids)?
            }
            Input::Embeddings(e) => e,
        };
        let s = tape.value(tok).rows();
        if s > c.max_seq_len {
            return Err(Error::Overlong { len: s, max: c.max_seq_len });
        }
        if tape.value(tok).cols() != c.hidden {
            return Err(Error::shape("forward", format!("input width {} vs hidden {}", tape.value(tok).cols(), c.hidden)));
        }
        let positions: Vec<usize> = (0..s).collect();
        let pos = tape.embedding(v[1], &positions)?;
        let mut x = tape.add(tok, pos)?;
        let dh = c.head_dim();
        let inv = 1.0 / (dh as f64).sqrt();
        for l in 0..c.layers {
            let li = layer_idx(l);
            let a = tape.layer_norm(x, v[li.ln1_g], v[li.ln1_g + 1])?;
            let q = tape.matmul_t(a, v[li.wq])?;
            let k = tape.matmul_t(a, v[li.wq + 1])?;
            let val = tape.matmul_t(a, v[li.wq + 2])?;
            let mut heads = Vec::with_capacity(c.heads);
            for hd in 0..c.heads {
                let qh = tape.slice_cols(q, hd * dh, dh)?;
                let kh = tape.slice_cols(k, hd * dh, dh)?;
                let vh = tape.slice_cols(val, hd * dh, dh)?;
                let scores = tape.matmul_t(qh, kh)?;
                let scores = tape.scale(scores, inv)?;
                let probs = tape.causal_softmax(scores)?;
                heads.push(tape.matmul(probs, vh)?);
            }
            let attn = if heads.len() == 1 { heads[0] } else { tape.concat(&heads)? };
            let attn = tape.matmul_t(attn, v[li.wo])?;
            x = tape.add(x, attn)?;

            let b = tape.layer_norm(x, v[li.ln2_g], v[li.ln2_g + 1])?;
            let mut up = tape.matmul_t(b, v[li.w_up])?;
            if let Some(extra) = hook.map(|h| h.apply(tape, l, Site::Up, b)).transpose()?.flatten() {
                up = tape.add(up, extra)?;
            }
            let act = tape.relu(up)?;
            let mut down = tape.matmul_t(act, v[li.w_down])?;
            if let Some(extra) = hook.map(|h| h.apply(tape, l, Site::Down, act)).transpose()?.flatten() {
                down = tape.add(down, extra)?;
            }
            x = tape.add(x, down)?;
        }
        let n = v.len();
        let hidden = tape.layer_norm(x, v[n - 3], v[n - 2])?;
        let logits = tape.matmul_t(hidden, v[n - 1])?;
        Ok(ForwardOut { logits, hidden })
    }

    /// Logits for every position, without recording gradients.
    pub fn logits(&self, ids: &[usize], delta: Option<&dyn DeltaSource>) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let p = self.bind(&mut tape, false)?;
        let hook = delta.map(|d| d.bind_hook(&mut tape)).transpose()?;
        let out = self.forward(&mut tape, &p, Input::Tokens(ids), hook.as_deref())?;
        Ok(tape.value(out.logits).clone())
    }

    /// Final-layer state of the last position.
    pub fn last_hidden(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::inference();
        let p = self.bind(&mut tape, false)?;
        let out = self.forward(&mut tape, &p, Input::Tokens(ids), None)?;
        let h = tape.value(out.hidden);
        Ok(h.row(h.rows() - 1).to_vec())
    }

    /// Greedy decoding from `prompt` until `end` or `budget` new tokens.
    pub fn decode_greedy(
        &self,
        prompt: &[usize],
        end: usize,
        budget: usize,
        delta: Option<&dyn DeltaSource>,
    ) -> Result<DecodeOutcome> {
        let mut ids = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..budget {
            if ids.len() >= self.config.max_seq_len {
                break;
            }
            let logits = self.logits(&ids, delta)?;
            let last = logits.row(logits.rows() - 1);
            let next = argmax(last);
            out.push(next);
            ids.push(next);
            if next == end {
                return Ok(DecodeOutcome::Finished(out));
            }
        }
        Ok(DecodeOutcome::Exhausted(out))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(64 + 8 * self.config.param_count());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let c = &self.config;
        for x in [c.vocab_size, c.hidden, c.layers, c.heads, c.d_ff, c.max_seq_len] {
            buf.extend_from_slice(&(x as u64).to_le_bytes());
        }
        buf.extend_from_slice(&c.seed.to_le_bytes());
        write_tensors(&mut buf, &self.params);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = ByteReader::new(&bytes, path);
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "not a model checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version { expected: VERSION, found: version });
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = r.u64()? as usize;
        }
        let config = ModelConfig {
            vocab_size: dims[0],
            hidden: dims[1],
            layers: dims[2],
            heads: dims[3],
            d_ff: dims[4],
            max_seq_len: dims[5],
            seed: r.u64()?,
        };
        config.validate().map_err(|e| Error::format(path, e.to_string()))?;
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(_, shape)| r.tensor(shape))
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Self::from_params(config, params)
    }
}

/// Mean negative log-likelihood of the action span under `logits`.
pub fn action_nll(logits: &Tensor, seq: &TokenSequence) -> Result<f64> {
    let mut tape = Tape::inference();
    let l = tape.constant(logits.clone())?;
    let loss = tape.cross_entropy(l, &seq.targets())?;
    Ok(tape.value(loss).item())
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn write_tensors(buf: &mut Vec<u8>, tensors: &[Tensor]) {
    buf.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.numel() as u64).to_le_bytes());
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
    tensors_left: Option<u64>,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path, tensors_left: None }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::format(self.path, "truncated")),
        }
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// Reads the next tensor of a block written by `write_tensors`.
    pub(crate) fn tensor(&mut self, shape: Vec<usize>) -> Result<Tensor> {
        let left = match self.tensors_left {
            Some(n) => n,
            None => self.u64()?,
        };
        if left == 0 {
            return Err(Error::format(self.path, "fewer tensors than expected"));
        }
        self.tensors_left = Some(left - 1);
        let n = self.u64()? as usize;
        let want: usize = shape.iter().product();
        if n != want {
            return Err(Error::format(self.path, format!("tensor of {n} values, expected {want}")));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data)
    }

    /// Ends a tensor block; errors if tensors remain.
    pub(crate) fn end_block(&mut self) -> Result<()> {
        if self.tensors_left.take().unwrap_or(0) != 0 {
            return Err(Error::format(self.path, "more tensors than expected"));
        }
        Ok(())
    }

    pub(crate) fn finish(mut self) -> Result<()> {
        self.end_block()?;
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.path, "trailing bytes"));
        }
        Ok(())
    }
}
