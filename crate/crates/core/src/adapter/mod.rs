//! Per-tool low-rank deltas on the feed-forward weights and their weighted composition.

mod store;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{DeltaSource, FfnHook, ModelConfig, Site};
use crate::rng::Rng;
use crate::synth::ToolId;

pub use store::AdapterStore;

const SIMPLEX_TOL: f64 = 1e-9;

/// Which feed-forward matrices carry adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attach {
    Both,
    Up,
    Down,
}

impl Attach {
    pub fn includes(self, site: Site) -> bool {
        matches!((self, site), (Attach::Both, _) | (Attach::Up, Site::Up) | (Attach::Down, Site::Down))
    }

    pub fn sites(self) -> usize {
        if self == Attach::Both {
            2
        } else {
            1
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Attach::Both => 0,
            Attach::Up => 1,
            Attach::Down => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        [Attach::Both, Attach::Up, Attach::Down].into_iter().find(|a| a.code() == code)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub rank: usize,
    pub scale: f64,
    pub attach: Attach,
    pub init_std: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { rank: 16, scale: 64.0, attach: Attach::Both, init_std: 0.02 }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        if !self.scale.is_finite() || !self.init_std.is_finite() || self.init_std < 0.0 {
            return Err(Error::Config("adapter scale and init_std must be finite".into()));
        }
        Ok(())
    }

    /// The multiplier `s/r` applied to `A·Bᵀ`.
    pub fn effective_scale(&self) -> f64 {
        self.scale / self.rank as f64
    }
}

/// Factors `A` (`out×r`) and `B` (`in×r`) at one site.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteFactors {
    pub a: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    pub tool: ToolId,
    pub config: AdapterConfig,
    /// Indexed by `layer * 2 + site.index()`; `None` where nothing is attached.
    pub factors: Vec<Option<SiteFactors>>,
}

fn site_dims(model: &ModelConfig, site: Site) -> (usize, usize) {
    match site {
        Site::Up => (model.d_ff, model.hidden),
        Site::Down => (model.hidden, model.d_ff),
    }
}

/// Fresh adapter: `A ~ N(0, init_std²)`, `B = 0`, so the delta starts at zero.
pub fn init_adapter(tool: ToolId, config: AdapterConfig, model: &ModelConfig, rng: &mut Rng) -> Result<LowRankAdapter> {
    config.validate()?;
    let r = config.rank;
    let mut factors = Vec::with_capacity(model.layers * 2);
    for _ in 0..model.layers {
        for site in Site::ALL {
            if !config.attach.includes(site) {
                factors.push(None);
                continue;
            }
            let (out, inp) = site_dims(model, site);
            let a = Tensor::matrix(out, r, rng.normal_vec(out * r, config.init_std))?;
            factors.push(Some(SiteFactors { a, b: Tensor::zeros(&[inp, r]) }));
        }
    }
    Ok(LowRankAdapter { tool, config, factors })
}

impl LowRankAdapter {
    pub fn layers(&self) -> usize {
        self.factors.len() / 2
    }

    pub fn site(&self, layer: usize, site: Site) -> Option<&SiteFactors> {
        self.factors.get(layer * 2 + site.index()).and_then(Option::as_ref)
    }

    pub fn site_mut(&mut self, layer: usize, site: Site) -> Option<&mut SiteFactors> {
        self.factors.get_mut(layer * 2 + site.index()).and_then(Option::as_mut)
    }

    /// All factor tensors in a fixed order (`A`, `B` per attached site).
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.factors.iter().flatten().flat_map(|f| [&f.a, &f.b]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.factors.iter_mut().flatten().flat_map(|f| [&mut f.a, &mut f.b]).collect()
    }

    /// Dense `(s/r)·A·Bᵀ` at a site, or `None` when not attached.
    pub fn delta(&self, layer: usize, site: Site) -> Result<Option<Tensor>> {
        self.site(layer, site)
            .map(|f| Ok(f.a.matmul_t(&f.b)?.scaled(self.config.effective_scale())))
            .transpose()
    }

    fn compatible(&self, other: &LowRankAdapter) -> bool {
        self.config == other.config
            && self.factors.len() == other.factors.len()
            && self.factors.iter().zip(&other.factors).all(|(x, y)| match (x, y) {
                (Some(x), Some(y)) => x.a.shape() == y.a.shape() && x.b.shape() == y.b.shape(),
                (None, None) => true,
                _ => false,
            })
    }
}

/// Counts scalar multiply-adds performed by the instrumented paths.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacCounter {
    pub macs: u64,
}

impl MacCounter {
    pub fn add(&mut self, m: usize, k: usize, n: usize) {
        self.macs += (m * k * n) as u64;
    }
}

/// A weighted sum of adapter deltas; weights lie on the simplex.
#[derive(Debug, Clone)]
pub struct ComposedDelta<'a> {
    adapters: Vec<&'a LowRankAdapter>,
    weights: Vec<f64>,
}

pub fn check_simplex(weights: &[f64]) -> Result<()> {
    let sum: f64 = weights.iter().sum();
    let min = weights.iter().copied().fold(f64::INFINITY, f64::min);
    if weights.is_empty() || !sum.is_finite() || (sum - 1.0).abs() > SIMPLEX_TOL || min < 0.0 {
        return Err(Error::NotOnSimplex { sum, min });
    }
    Ok(())
}

pub fn compose<'a>(adapters: &[&'a LowRankAdapter], weights: &[f64]) -> Result<ComposedDelta<'a>> {
    if adapters.len() != weights.len() {
        return Err(Error::shape("compose", format!("{} adapters, {} weights", adapters.len(), weights.len())));
    }
    check_simplex(weights)?;
    if let Some(first) = adapters.first() {
        if adapters.iter().any(|a| !first.compatible(a)) {
            return Err(Error::shape("compose", "adapters differ in rank, scale or sites"));
        }
    }
    Ok(ComposedDelta { adapters: adapters.to_vec(), weights: weights.to_vec() })
}

impl<'a> ComposedDelta<'a> {
    pub fn adapters(&self) -> &[&'a LowRankAdapter] {
        &self.adapters
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Nonzero terms as `(adapter, α·s/r)`.
    fn terms(&self) -> impl Iterator<Item = (&'a LowRankAdapter, f64)> + '_ {
        self.adapters
            .iter()
            .zip(&self.weights)
            .filter(|(_, &w)| w != 0.0)
            .map(|(a, &w)| (*a, w * a.config.effective_scale()))
    }

    /// Dense `Σ α_i (s/r) A_i B_iᵀ` at a site (`out×in`).
    pub fn materialize(&self, layer: usize, site: Site, out: usize, inp: usize) -> Result<Tensor> {
        let mut acc = Tensor::zeros(&[out, inp]);
        for (adapter, w) in self.adapters.iter().zip(&self.weights) {
            if *w == 0.0 {
                continue;
            }
            if let Some(d) = adapter.delta(layer, site)? {
                if d.shape() != acc.shape() {
                    return Err(Error::shape("materialize", format!("{:?} into {:?}", d.shape(), acc.shape())));
                }
                acc.axpy(*w, &d);
            }
        }
        Ok(acc)
    }

    /// `x·Wᵀ + Σ α_i (s/r) (x·B_i)·A_iᵀ` for row activations `x` (`S×in`).
    pub fn apply(&self, x: &Tensor, w: &Tensor, layer: usize, site: Site, macs: &mut MacCounter) -> Result<Tensor> {
        let (s, inp, out) = (x.rows(), x.cols(), w.rows());
        if w.cols() != inp {
            return Err(Error::shape("apply", format!("x {:?} against W {:?}", x.shape(), w.shape())));
        }
        let mut y = x.matmul_t(w)?;
        macs.add(s, inp, out);
        for (adapter, coeff) in self.terms() {
            let Some(f) = adapter.site(layer, site) else { continue };
            if f.b.rows() != inp || f.a.rows() != out {
                return Err(Error::shape("apply", "adapter factors do not match W"));
            }
            let r = f.b.cols();
            let t = x.matmul(&f.b)?;
            macs.add(s, inp, r);
            let u = t.matmul_t(&f.a)?;
            macs.add(s, r, out);
            y.axpy(coeff, &u);
        }
        Ok(y)
    }

    /// Reference path: forms `W + Σ α_i ΔW_i` densely, then multiplies.
    pub fn apply_dense(&self, x: &Tensor, w: &Tensor, layer: usize, site: Site, macs: &mut MacCounter) -> Result<Tensor> {
        let (s, inp, out) = (x.rows(), x.cols(), w.rows());
        if w.cols() != inp {
            return Err(Error::shape("apply_dense", format!("x {:?} against W {:?}", x.shape(), w.shape())));
        }
        let mut dense = w.clone();
        for (adapter, _) in self.terms() {
            if adapter.site(layer, site).is_some() {
                macs.add(out, adapter.config.rank, inp);
            }
        }
        dense.add_assign(&self.materialize(layer, site, out, inp)?);
        macs.add(s, inp, out);
        x.matmul_t(&dense)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundDelta> {
        let mut terms = Vec::new();
        for (i, (adapter, coeff)) in self.adapters.iter().zip(&self.weights).enumerate() {
            if *coeff == 0.0 {
                continue;
            }
            let mut vars = Vec::with_capacity(adapter.factors.len());
            for f in &adapter.factors {
                vars.push(match f {
                    Some(f) if trainable => Some((tape.leaf(f.a.clone())?, tape.leaf(f.b.clone())?)),
                    Some(f) => Some((tape.constant(f.a.clone())?, tape.constant(f.b.clone())?)),
                    None => None,
                });
            }
            terms.push(BoundTerm { candidate: i, coeff: coeff * adapter.config.effective_scale(), vars });
        }
        Ok(BoundDelta { terms })
    }
}

impl DeltaSource for ComposedDelta<'_> {
    fn bind_hook<'b>(&'b self, tape: &mut Tape) -> Result<Box<dyn FfnHook + 'b>> {
        Ok(Box::new(self.bind(tape, false)?))
    }
}

#[derive(Debug, Clone)]
pub struct BoundTerm {
    /// Position of this adapter among the composed candidates.
    pub candidate: usize,
    pub coeff: f64,
    /// `(A, B)` per `layer * 2 + site`, matching [`LowRankAdapter::factors`].
    pub vars: Vec<Option<(Var, Var)>>,
}

impl BoundTerm {
    /// Vars in the order of [`LowRankAdapter::tensors`].
    pub fn flat_vars(&self) -> Vec<Var> {
        self.vars.iter().flatten().flat_map(|&(a, b)| [a, b]).collect()
    }
}

/// A composed delta placed on a tape.
#[derive(Debug, Clone)]
pub struct BoundDelta {
    pub terms: Vec<BoundTerm>,
}

impl FfnHook for BoundDelta {
    fn apply(&self, tape: &mut Tape, layer: usize, site: Site, x: Var) -> Result<Option<Var>> {
        let mut acc: Option<Var> = None;
        for term in &self.terms {
            let Some(&Some((a, b))) = term.vars.get(layer * 2 + site.index()) else { continue };
            let t = tape.matmul(x, b)?;
            let u = tape.matmul_t(t, a)?;
            let u = tape.scale(u, term.coeff)?;
            acc = Some(match acc {
                Some(prev) => tape.add(prev, u)?,
                None => u,
            });
        }
        Ok(acc)
    }
}
