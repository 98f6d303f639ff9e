use crate::adapter::ComposedDelta;
use crate::autodiff::{Tensor, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::model::{Site, TransformerModel};

/// Operation counts gathered by [`reference_forward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OpCounts {
    /// Multiply-adds in backbone projections, FFN and output head.
    pub linear_macs: u128,
    /// Multiply-adds in `QKᵀ` and `PV`, over the full `S×S` score matrix.
    pub attention_macs: u128,
    pub adapter_macs: u128,
    pub exps: u128,
    pub norm_elements: u128,
    pub activations: u128,
}

impl OpCounts {
    pub fn nonmatmul(&self) -> u128 {
        self.exps + self.norm_elements + self.activations
    }
}

struct Counter<'c>(&'c mut u128);

impl Counter<'_> {
    /// `y = x·Wᵀ` with `x` S×k and `W` n×k, one count per multiply-add.
    fn matmul_t(&mut self, x: &[Vec<f64>], w: &Tensor) -> Vec<Vec<f64>> {
        x.iter()
            .map(|row| {
                (0..w.rows())
                    .map(|j| {
                        let mut acc = 0.0;
                        for (a, b) in row.iter().zip(w.row(j)) {
                            acc += a * b;
                            *self.0 += 1;
                        }
                        acc
                    })
                    .collect()
            })
            .collect()
    }
}

fn layer_norm(x: &[Vec<f64>], g: &Tensor, b: &Tensor, counts: &mut OpCounts) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            counts.norm_elements += row.len() as u128;
            row.iter().enumerate().map(|(i, v)| (v - mean) * inv * g.data()[i] + b.data()[i]).collect()
        })
        .collect()
}

fn add_adapter(
    y: &mut [Vec<f64>],
    x: &[Vec<f64>],
    delta: Option<&ComposedDelta<'_>>,
    layer: usize,
    site: Site,
    counts: &mut OpCounts,
) {
    let Some(delta) = delta else { return };
    for (adapter, &w) in delta.adapters().iter().zip(delta.weights()) {
        if w == 0.0 {
            continue;
        }
        let Some(f) = adapter.site(layer, site) else { continue };
        let coeff = w * adapter.config.effective_scale();
        let mut c = Counter(&mut counts.adapter_macs);
        // (x·B)·Aᵀ, never forming A·Bᵀ.
        let t = c.matmul_t(x, &f.b.transpose());
        let u = c.matmul_t(&t, &f.a);
        for (yr, ur) in y.iter_mut().zip(&u) {
            for (a, b) in yr.iter_mut().zip(ur) {
                *a += coeff * b;
            }
        }
    }
}

/// Plain scalar-loop forward pass that counts every operation it performs.
pub fn reference_forward(model: &TransformerModel, ids: &[usize], delta: Option<&ComposedDelta<'_>>) -> Result<(Tensor, OpCounts)> {
    let c = model.config();
    if ids.is_empty() {
        return Err(Error::Empty("token sequence"));
    }
    if ids.len() > c.max_seq_len {
        return Err(Error::Overlong { len: ids.len(), max: c.max_seq_len });
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= c.vocab_size) {
        return Err(Error::OutOfVocabulary(bad.to_string()));
    }
    let p = model.params();
    let mut counts = OpCounts::default();
    let s = ids.len();
    let mut x: Vec<Vec<f64>> =
        ids.iter().enumerate().map(|(t, &id)| p[0].row(id).iter().zip(p[1].row(t)).map(|(a, b)| a + b).collect()).collect();
    let dh = c.head_dim();
    let inv = 1.0 / (dh as f64).sqrt();
    for l in 0..c.layers {
        let base = 2 + 10 * l;
        let a = layer_norm(&x, &p[base], &p[base + 1], &mut counts);
        let mut lin = Counter(&mut counts.linear_macs);
        let q = lin.matmul_t(&a, &p[base + 2]);
        let k = lin.matmul_t(&a, &p[base + 3]);
        let v = lin.matmul_t(&a, &p[base + 4]);
        let mut attn = vec![vec![0.0; c.hidden]; s];
        for hd in 0..c.heads {
            let cols = hd * dh..(hd + 1) * dh;
            let mut scores = vec![vec![0.0; s]; s];
            for i in 0..s {
                for j in 0..s {
                    let mut acc = 0.0;
                    for d in cols.clone() {
                        acc += q[i][d] * k[j][d];
                        counts.attention_macs += 1;
                    }
                    scores[i][j] = acc * inv;
                }
            }
            for (i, row) in scores.iter_mut().enumerate() {
                let m = row[..=i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (j, v) in row.iter_mut().enumerate() {
                    if j <= i {
                        *v = (*v - m).exp();
                        counts.exps += 1;
                        z += *v;
                    } else {
                        *v = 0.0;
                    }
                }
                row.iter_mut().for_each(|v| *v /= z);
            }
            for i in 0..s {
                for d in cols.clone() {
                    let mut acc = 0.0;
                    for j in 0..s {
                        acc += scores[i][j] * v[j][d];
                        counts.attention_macs += 1;
                    }
                    attn[i][d] = acc;
                }
            }
        }
        let o = Counter(&mut counts.linear_macs).matmul_t(&attn, &p[base + 5]);
        for (xr, orow) in x.iter_mut().zip(&o) {
            xr.iter_mut().zip(orow).for_each(|(a, b)| *a += b);
        }
        let b = layer_norm(&x, &p[base + 6], &p[base + 7], &mut counts);
        let mut up = Counter(&mut counts.linear_macs).matmul_t(&b, &p[base + 8]);
        add_adapter(&mut up, &b, delta, l, Site::Up, &mut counts);
        for row in up.iter_mut() {
            counts.activations += row.len() as u128;
            row.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        let mut down = Counter(&mut counts.linear_macs).matmul_t(&up, &p[base + 9]);
        add_adapter(&mut down, &up, delta, l, Site::Down, &mut counts);
        for (xr, dr) in x.iter_mut().zip(&down) {
            xr.iter_mut().zip(dr).for_each(|(a, b)| *a += b);
        }
    }
    let n = p.len();
    let hidden = layer_norm(&x, &p[n - 3], &p[n - 2], &mut counts);
    let logits = Counter(&mut counts.linear_macs).matmul_t(&hidden, &p[n - 1]);
    Ok((Tensor::from_rows(&logits)?, counts))
}
