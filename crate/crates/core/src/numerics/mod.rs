//! Dense tensors, reverse-mode differentiation and the neural layers used
//! by every learned component.

mod graph;
pub mod gradcheck;
pub mod nn;
mod params;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub(crate) use graph::softmax_row;
pub use params::{ParamGrads, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Numerically stable softmax of a plain slice.
pub fn softmax<S: Scalar>(x: &[S]) -> Vec<S> {
    let mut out = x.to_vec();
    softmax_row(&mut out, |_| true);
    out
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{compare, grad_check, project_to_scalar};
    use super::nn::{scaled_dot_attention, Gru};
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
    }

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn linear(g: &mut Graph<f64>, x: Var, w: Var, b: Var) -> Result<Var, crate::Error> {
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    #[test]
    fn linear_identity_and_bias() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zero = g.constant(Tensor::zeros(&[2]));
        let y = linear(&mut g, x, w, zero).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let x1 = g.constant(t(&[1, 2], &[1.0, 1.0]));
        let one = g.constant(Tensor::ones(&[2]));
        let y = linear(&mut g, x1, w, one).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 2.0]);
    }

    #[test]
    fn linear_shape_mismatch_is_dimension_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        let w = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.matmul(x, w), Err(crate::Error::Dimension { .. })));
    }

    #[test]
    fn linear_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs = vec![randn(&[3, 4], &mut rng), randn(&[4, 5], &mut rng), randn(&[5], &mut rng)];
        let r = grad_check(
            |g, v| {
                let y = linear(g, v[0], v[1], v[2])?;
                project_to_scalar(g, y)
            },
            &inputs,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0f64, 0.0]), vec![0.5, 0.5]);
        let s = softmax(&[1000.0f64, 1000.0, 1000.0]);
        for v in s {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&[0.0f64, 3f64.ln()]);
        assert!((s[0] - 0.25).abs() < 1e-15 && (s[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn attention_single_key_returns_value_row() {
        let mut g = Graph::new();
        let q = g.constant(t(&[3, 2], &[0.3, -1.0, 2.0, 0.5, 7.0, 1.0]));
        let k = g.constant(t(&[1, 2], &[0.1, 0.2]));
        let v = g.constant(t(&[1, 2], &[0.123456789, -9.87654321]));
        let out = scaled_dot_attention(&mut g, q, k, v).unwrap();
        for row in g.value(out).data().chunks(2) {
            assert!((row[0] - 0.123456789).abs() <= 1e-15);
            assert!((row[1] + 9.87654321).abs() <= 1e-15);
        }
    }

    #[test]
    fn attention_orthogonal_query_is_uniform() {
        let mut g = Graph::new();
        let q = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let k = g.constant(t(&[3, 2], &[0.0, 1.0, 0.0, -2.0, 0.0, 5.0]));
        let v = g.constant(t(&[3, 2], &[3.0, 0.0, 0.0, 3.0, 3.0, 3.0]));
        let out = scaled_dot_attention(&mut g, q, k, v).unwrap();
        let o = g.value(out).data();
        assert!((o[0] - 2.0).abs() < 1e-14 && (o[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn attention_hand_case() {
        let mut g = Graph::new();
        let q = g.constant(t(&[1, 1], &[2.0]));
        let k = g.constant(t(&[2, 1], &[1.0, -1.0]));
        let v = g.constant(t(&[2, 1], &[1.0, 0.0]));
        let out = scaled_dot_attention(&mut g, q, k, v).unwrap();
        // softmax([2, -2]) by hand
        let expected = 2f64.exp() / (2f64.exp() + (-2f64).exp());
        assert!((g.value(out).item() - expected).abs() < 1e-15);
        assert!((expected - 0.9820).abs() < 5e-5);
    }

    #[test]
    fn attention_empty_context_is_error() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::zeros(&[1, 2]));
        let k = g.constant(Tensor::zeros(&[0, 2]));
        let v = g.constant(Tensor::zeros(&[0, 2]));
        assert!(matches!(
            scaled_dot_attention(&mut g, q, k, v),
            Err(crate::Error::EmptyContext)
        ));
    }

    fn zero_gru(store: &mut ParamStore<f64>, input: usize, hidden: usize) -> Gru {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gru = Gru::new(store, "gru", input, hidden, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        gru
    }

    #[test]
    fn gru_zero_params_halves_state() {
        let mut store = ParamStore::new();
        let gru = zero_gru(&mut store, 2, 3);
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[0.7, -0.2]));
        let h0 = g.constant(t(&[1, 3], &[1.0, -2.0, 4.0]));
        let h = gru.forward(&mut g, &store, &[x], h0, None).unwrap();
        assert_eq!(g.value(h).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn gru_is_stateful_and_rejects_empty() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gru = Gru::new(&mut store, "gru", 2, 3, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[0.7, -0.2]));
        let h0 = g.constant(Tensor::zeros(&[1, 3]));
        let one = gru.forward(&mut g, &store, &[x], h0, None).unwrap();
        let two = gru.forward(&mut g, &store, &[x, x], h0, None).unwrap();
        assert_ne!(g.value(one).data(), g.value(two).data());
        assert!(matches!(
            gru.forward(&mut g, &store, &[], h0, None),
            Err(crate::Error::EmptySequence)
        ));
    }

    #[test]
    fn gru_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let gru = Gru::new(&mut store, "gru", 3, 4, &mut rng);
        let xs: Vec<Tensor<f64>> = (0..3).map(|_| randn(&[2, 3], &mut rng)).collect();
        let h0 = randn(&[2, 4], &mut rng);
        let report = gradcheck::grad_check_params(
            &store,
            |g, s| {
                let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
                let h = g.constant(h0.clone());
                let out = gru.forward(g, s, &vars, h, None)?;
                project_to_scalar(g, out)
            },
            1e-5,
            1e-5,
            usize::MAX,
            &mut rng,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn conv1d_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let ident = g.constant(t(&[1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = g.conv1d(x, ident).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        let c = g.constant(Tensor::full(&[1, 5, 1], 2.5));
        let avg = g.constant(Tensor::full(&[3, 1, 1], 1.0 / 3.0));
        let y = g.conv1d(c, avg).unwrap();
        let out = g.value(y).data();
        for &v in &out[1..4] {
            assert!((v - 2.5).abs() < 1e-15);
        }
        assert!((out[0] - 2.5).abs() > 0.1 && (out[4] - 2.5).abs() > 0.1);

        let even = g.constant(Tensor::zeros(&[2, 1, 1]));
        assert!(matches!(g.conv1d(c, even), Err(crate::Error::Config(_))));
    }

    #[test]
    fn conv1d_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let inputs = vec![randn(&[2, 5, 3], &mut rng), randn(&[3, 3, 4], &mut rng)];
        let r = grad_check(
            |g, v| {
                let y = g.conv1d(v[0], v[1])?;
                project_to_scalar(g, y)
            },
            &inputs,
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn backward_examples() {
        let mut store = ParamStore::new();
        let w_id = store.add("w", t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let unused = store.add("unused", t(&[3], &[1.0, 1.0, 1.0]));
        let mut g = Graph::new();
        let w = g.param(&store, w_id);
        let _ = g.param(&store, unused);
        let loss = g.sum(w).unwrap();
        let grads = g.backward(loss).unwrap();
        let pg = g.param_grads(&grads, &store);
        assert_eq!(pg.get(w_id).data(), &[1.0; 4]);
        assert_eq!(pg.get(unused).data(), &[0.0; 3]);

        // non-scalar loss
        assert!(matches!(g.backward(w), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn backward_squared_norm_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = vec![randn(&[2, 3], &mut rng), randn(&[3, 4], &mut rng)];
        let r = grad_check(
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                let y2 = g.square(y)?;
                g.sum(y2)
            },
            &inputs,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn grad_check_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let inputs = vec![randn(&[3, 2], &mut rng), randn(&[4, 2], &mut rng), randn(&[4, 2], &mut rng)];
        let r = grad_check(
            |g, v| {
                let y = scaled_dot_attention(g, v[0], v[1], v[2])?;
                project_to_scalar(g, y)
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");

        let analytic = [1.0, -0.5, 2.0];
        let corrupted = [1.0, -0.5 + 0.1, 2.0];
        assert!(compare(&analytic, &analytic, 1e-6).passed());
        assert!(!compare(&corrupted, &analytic, 1e-6).passed());
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut store = ParamStore::new();
            let gru = Gru::new(&mut store, "gru", 3, 4, &mut rng);
            let x = randn(&[2, 3], &mut rng);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let h0 = g.constant(Tensor::zeros(&[2, 4]));
            let h = gru.forward(&mut g, &store, &[xv, xv], h0, None).unwrap();
            let loss = project_to_scalar(&mut g, h).unwrap();
            let grads = g.backward(loss).unwrap();
            g.param_grads(&grads, &store)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_forward_is_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1], &[f64::MAX]));
        assert!(matches!(g.scale(x, 10.0), Err(crate::Error::NonFinite(_))));
    }

    proptest! {
        #[test]
        fn softmax_rows_are_positive_normalized_and_shift_invariant(
            xs in proptest::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let a = softmax(&xs);
            let shifted: Vec<f64> = xs.iter().map(|x| x + shift).collect();
            let b = softmax(&shifted);
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (p, q) in a.iter().zip(&b) {
                prop_assert!(*p > 0.0);
                prop_assert!((p - q).abs() < 1e-12);
            }
        }
    }
}
