//! Dense double-precision tensors with reverse-mode differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), rng.normal_vec(n, 1.0)).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let y = t.softmax(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_of_even_split_is_ln2() {
        let mut t = Tape::new();
        let p = t.constant(Tensor::vector(vec![0.5f64.ln(), 0.5f64.ln()])).unwrap();
        let loss = t.nll(p, &[Some(0)]).unwrap();
        assert!((t.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-15);

        let logits = t.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let ce = t.cross_entropy(logits, &[Some(0)]).unwrap();
        assert!((t.value(ce).item() - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn square_derivative() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0)).unwrap();
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x).item(), 6.0);
    }

    #[test]
    fn softmax_jacobian_at_uniform() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let y = t.softmax(x).unwrap();
        let w = t.constant(Tensor::vector(vec![1.0, 0.0])).unwrap();
        let l = t.dot(y, w).unwrap();
        let g = t.backward(l).unwrap().wrt(x);
        assert!((g.data()[0] - 0.25).abs() < 1e-15);
        assert!((g.data()[1] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Rng::new(11);
        let mut t = Tape::new();
        let x = t.leaf(rand_tensor(&mut rng, &[5, 7]).scaled(10.0)).unwrap();
        let y = t.softmax(x).unwrap();
        let c = t.causal_softmax(x).unwrap();
        for v in [y, c] {
            for r in 0..5 {
                let row = t.value(v).row(r);
                assert!(row.iter().all(|&p| p >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let y = t.relu(x).unwrap();
        assert!(matches!(t.backward(y), Err(crate::Error::NotScalar(_))));
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert!(matches!(t.backward(s), Err(crate::Error::TapeConsumed)));
    }

    #[test]
    fn untouched_inputs_get_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let unused = t.leaf(Tensor::zeros(&[3, 2])).unwrap();
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        let gu = g.wrt(unused);
        assert_eq!(gu.shape(), &[3, 2]);
        assert!(gu.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_and_finiteness_errors() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2, 3])).unwrap();
        let b = t.leaf(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(t.matmul(a, b), Err(crate::Error::Shape { .. })));
        assert!(t.leaf(Tensor::vector(vec![f64::NAN])).is_err());
    }

    #[test]
    fn grad_check_trivial_cases() {
        let mut rng = Rng::new(5);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let err = grad_check(|t, v| t.dot(v, v), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
        let zero = grad_check(|t, v| { let s = t.sum(v)?; t.scale(s, 0.0) }, &x, 1e-5).unwrap();
        assert_eq!(zero, 0.0);
    }

    /// Every primitive against central differences.
    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = Rng::new(2024);
        let step = 1e-5;
        let tol = 1e-5;
        let w = rand_tensor(&mut rng, &[4, 3]);
        let w2 = rand_tensor(&mut rng, &[5, 3]);
        let other = rand_tensor(&mut rng, &[2, 3]);
        let row = rand_tensor(&mut rng, &[3]);
        let weights = rand_tensor(&mut rng, &[2, 3]);
        let x = rand_tensor(&mut rng, &[2, 3]);

        type Case = Box<dyn Fn(&mut Tape, Var) -> crate::Result<Var>>;
        let weigh = move |t: &mut Tape, y: Var, w: &Tensor| -> crate::Result<Var> {
            let c = t.constant(w.clone())?;
            t.dot(y, c)
        };
        let wt = weights.clone();
        let cases: Vec<(&str, Case)> = vec![
            ("matmul", Box::new({ let w = w.clone(); move |t, v| {
                let wv = t.constant(w.transpose())?; let y = t.matmul(v, wv)?; t.sum(y) } })),
            ("matmul_t", Box::new({ let w = w2.clone(); move |t, v| {
                let wv = t.constant(w.clone())?; let y = t.matmul_t(v, wv)?; let y = t.mul(y, y)?; t.sum(y) } })),
            ("add", Box::new({ let o = other.clone(); let wt = wt.clone(); move |t, v| {
                let c = t.constant(o.clone())?; let y = t.add(v, c)?; let y = t.mul(y, y)?; weigh(t, y, &wt) } })),
            ("sub", Box::new({ let o = other.clone(); let wt = wt.clone(); move |t, v| {
                let c = t.constant(o.clone())?; let y = t.sub(c, v)?; let y = t.mul(y, y)?; weigh(t, y, &wt) } })),
            ("mul", Box::new({ let o = other.clone(); let wt = wt.clone(); move |t, v| {
                let c = t.constant(o.clone())?; let y = t.mul(v, c)?; weigh(t, y, &wt) } })),
            ("add_row", Box::new({ let r = row.clone(); let wt = wt.clone(); move |t, v| {
                let c = t.constant(r.clone())?; let y = t.add_row(v, c)?; let y = t.mul(y, y)?; weigh(t, y, &wt) } })),
            ("scale", Box::new({ let wt = wt.clone(); move |t, v| { let y = t.scale(v, -2.5)?; weigh(t, y, &wt) } })),
            ("relu", Box::new({ let wt = wt.clone(); move |t, v| { let y = t.relu(v)?; weigh(t, y, &wt) } })),
            ("abs", Box::new({ let wt = wt.clone(); move |t, v| { let y = t.abs(v)?; weigh(t, y, &wt) } })),
            ("softmax", Box::new({ let wt = wt.clone(); move |t, v| { let y = t.softmax(v)?; weigh(t, y, &wt) } })),
            ("causal_softmax", Box::new({ move |t, v| {
                let sq = t.matmul_t(v, v)?; let y = t.causal_softmax(sq)?;
                let c = t.constant(Tensor::matrix(2, 2, vec![0.3, -1.2, 0.7, 2.0])?)?; t.dot(y, c) } })),
            ("log_softmax", Box::new({ let wt = wt.clone(); move |t, v| { let y = t.log_softmax(v)?; weigh(t, y, &wt) } })),
            ("layer_norm", Box::new({ let wt = wt.clone(); let r = row.clone(); move |t, v| {
                let g = t.constant(r.map(|x| 1.0 + 0.3 * x))?; let b = t.constant(r.clone())?;
                let y = t.layer_norm(v, g, b)?; weigh(t, y, &wt) } })),
            ("embedding", Box::new({ move |t, v| {
                let y = t.embedding(v, &[1, 0, 1])?; let y = t.mul(y, y)?; t.sum(y) } })),
            ("cross_entropy", Box::new(|t, v| t.cross_entropy(v, &[Some(2), None]))),
            ("nll", Box::new(|t, v| { let y = t.log_softmax(v)?; t.nll(y, &[Some(0), Some(1)]) })),
            ("concat", Box::new({ let wt = wt.clone(); move |t, v| {
                let y = t.concat(&[v, v])?; let y = t.mul(y, y)?; let y = t.slice_cols(y, 1, 3)?; weigh(t, y, &wt) } })),
            ("slice_rows", Box::new(|t, v| { let y = t.slice_rows(v, 1, 1)?; let y = t.mul(y, y)?; t.sum(y) })),
            ("reshape", Box::new(|t, v| { let y = t.reshape(v, &[3, 2])?; let y = t.softmax(y)?; let y = t.slice_cols(y, 0, 1)?; t.sum(y) })),
            ("dot", Box::new(|t, v| t.dot(v, v))),
        ];
        for (name, f) in cases {
            let input = if name == "embedding" { rand_tensor(&mut rng, &[2, 3]) } else { x.clone() };
            let err = grad_check(&f, &input, step).unwrap();
            assert!(err < tol, "{name}: relative error {err}");
        }
    }
}
