//! Reverse-mode automatic differentiation over small dense matrices.
//!
//! A [`Graph`] is a define-by-run tape: every operation evaluates immediately
//! and records its inputs. [`Graph::backward`] then walks the tape once in
//! reverse and returns the gradient of a scalar output with respect to every
//! leaf created with [`Graph::param`] (or a named [`Graph::input`] that asked
//! for one).
//!
//! ```
//! use sbrl_core::diffcore::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.input("x", Tensor::scalar(3.0).unwrap(), true);
//! let y = g.mul(x, x).unwrap();
//! assert_eq!(g.value(y).item().unwrap(), 9.0);
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.named("x").unwrap().item().unwrap(), 6.0);
//! ```

mod graph;
mod tensor;

pub use graph::{Gradients, Graph, NodeId, LN_EPS};
pub use tensor::Tensor;

pub(crate) use tensor::{add_row, concat_cols, gemm, sigmoid, softplus};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{central_difference, first_mismatch, naive_matmul, FD_ABS, FD_REL, FD_STEP};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> Tensor {
        Tensor::scalar(v).unwrap()
    }

    #[test]
    fn square_of_three() {
        let mut g = Graph::new();
        let x = g.input("x", scalar(3.0), true);
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.value(y).item().unwrap(), 9.0);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.param(scalar(0.0));
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).item().unwrap(), 0.5);
        assert_eq!(g.backward(y).unwrap().get(x).unwrap().item().unwrap(), 0.25);
    }

    #[test]
    fn matmul_plus_bias_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let na = g.constant(Tensor::matrix(3, 4, a.clone()).unwrap());
        let nb = g.constant(Tensor::matrix(4, 2, b.clone()).unwrap());
        let nc = g.constant(Tensor::matrix(1, 2, c.clone()).unwrap());
        let ab = g.matmul(na, nb).unwrap();
        let out = g.add_row(ab, nc).unwrap();

        let mut expected = naive_matmul(&a, &b, 3, 4, 2);
        for (i, v) in expected.iter_mut().enumerate() {
            *v += c[i % 2];
        }
        for (x, y) in g.value(out).data().iter().zip(&expected) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        let c = g.constant(Tensor::zeros(&[3, 2]));
        let err = g.add(a, c).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
    }

    #[test]
    fn non_finite_intermediate_is_reported() {
        let mut g = Graph::new();
        let x = g.constant(scalar(800.0));
        let err = g.exp(x).unwrap_err();
        assert!(err.is_numeric());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        let y = g.tanh(x).unwrap();
        assert!(matches!(g.backward(y), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn ln_clamps_tiny_arguments() {
        let mut g = Graph::new();
        let x = g.param(scalar(0.0));
        let y = g.ln(x).unwrap();
        assert_eq!(g.value(y).item().unwrap(), LN_EPS.ln());
        assert_eq!(g.backward(y).unwrap().get(x).unwrap().item().unwrap(), 0.0);
    }

    /// A small two-layer network loss over every supported op.
    fn mlp_loss(g: &mut Graph, p: &[f64]) -> (NodeId, Vec<NodeId>) {
        let w1 = g.param(Tensor::matrix(3, 4, p[0..12].to_vec()).unwrap());
        let b1 = g.param(Tensor::matrix(1, 4, p[12..16].to_vec()).unwrap());
        let w2 = g.param(Tensor::matrix(4, 2, p[16..24].to_vec()).unwrap());
        let b2 = g.param(Tensor::matrix(1, 2, p[24..26].to_vec()).unwrap());
        let x = g.constant(
            Tensor::matrix(5, 3, (0..15).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap(),
        );
        let t = g.constant(
            Tensor::matrix(5, 2, (0..10).map(|i| (i as f64 * 0.91).cos()).collect()).unwrap(),
        );
        let h = g.matmul(x, w1).unwrap();
        let h = g.add_row(h, b1).unwrap();
        let h = g.tanh(h).unwrap();
        let o = g.matmul(h, w2).unwrap();
        let o = g.add_row(o, b2).unwrap();
        let s = g.sigmoid(o).unwrap();
        let sp = g.softplus(o).unwrap();
        let e = g.sub(s, t).unwrap();
        let sq = g.square(e).unwrap();
        let l = g.ln(sp).unwrap();
        let ex = g.exp(s).unwrap();
        let q = g.div(sq, ex).unwrap();
        let m = g.mul(q, l).unwrap();
        let r = g.repeat_rows(m, 2).unwrap();
        let c = g.concat_cols(r, r).unwrap();
        let a = g.mean(c).unwrap();
        let b = g.sum(sq).unwrap();
        let b = g.scale(b, 0.3).unwrap();
        let out = g.add(a, b).unwrap();
        (out, vec![w1, b1, w2, b2])
    }

    #[test]
    fn random_mlp_loss_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p: Vec<f64> = (0..26).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let (out, leaves) = mlp_loss(&mut g, &p);
        let grads = g.backward(out).unwrap();
        let analytic: Vec<f64> = leaves
            .iter()
            .flat_map(|&id| grads.get(id).unwrap().data().to_vec())
            .collect();
        let numeric = central_difference(
            |q| {
                let mut g = Graph::new();
                let (out, _) = mlp_loss(&mut g, q);
                g.value(out).item().unwrap()
            },
            &p,
            FD_STEP,
        );
        assert_eq!(first_mismatch(&analytic, &numeric, FD_REL, FD_ABS), None);
    }

    #[test]
    fn identical_inputs_give_bit_identical_gradients() {
        let p: Vec<f64> = (0..26).map(|i| (i as f64).sin()).collect();
        let run = || {
            let mut g = Graph::new();
            let (out, leaves) = mlp_loss(&mut g, &p);
            let grads = g.backward(out).unwrap();
            let mut all = vec![g.value(out).item().unwrap()];
            for id in leaves {
                all.extend_from_slice(grads.get(id).unwrap().data());
            }
            all.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    /// Unary and binary steps of a random straight-line program.
    #[derive(Clone, Debug)]
    enum Step {
        Tanh,
        Sigmoid,
        ExpBounded,
        LnPositive,
        Square,
        Softplus,
        Scale(f64),
        Add(usize),
        Sub(usize),
        Mul(usize),
        DivPositive(usize),
        MatMulSquare(usize),
    }

    fn step_strategy() -> impl Strategy<Value = Step> {
        prop_oneof![
            Just(Step::Tanh),
            Just(Step::Sigmoid),
            Just(Step::ExpBounded),
            Just(Step::LnPositive),
            Just(Step::Square),
            Just(Step::Softplus),
            (-2.0..2.0f64).prop_map(Step::Scale),
            (0usize..8).prop_map(Step::Add),
            (0usize..8).prop_map(Step::Sub),
            (0usize..8).prop_map(Step::Mul),
            (0usize..8).prop_map(Step::DivPositive),
            (0usize..8).prop_map(Step::MatMulSquare),
        ]
    }

    /// Runs the program on a 2x2 input; each step reads the last value and
    /// optionally one earlier value. Arguments are kept in a range where all
    /// ops are smooth.
    fn run_program(g: &mut Graph, x: NodeId, steps: &[Step]) -> NodeId {
        let mut vals = vec![x];
        for s in steps {
            let cur = *vals.last().unwrap();
            let pick = |k: usize| vals[k % vals.len()];
            let next = match s {
                Step::Tanh => g.tanh(cur),
                Step::Sigmoid => g.sigmoid(cur),
                Step::ExpBounded => {
                    let t = g.tanh(cur).unwrap();
                    g.exp(t)
                }
                Step::LnPositive => {
                    let sq = g.square(cur).unwrap();
                    let p = g.offset(sq, 1.0).unwrap();
                    g.ln(p)
                }
                Step::Square => {
                    let t = g.tanh(cur).unwrap();
                    g.square(t)
                }
                Step::Softplus => g.softplus(cur),
                Step::Scale(c) => g.scale(cur, *c),
                Step::Add(k) => g.add(cur, pick(*k)),
                Step::Sub(k) => g.sub(cur, pick(*k)),
                Step::Mul(k) => {
                    let t = g.tanh(pick(*k)).unwrap();
                    g.mul(cur, t)
                }
                Step::DivPositive(k) => {
                    let sq = g.square(pick(*k)).unwrap();
                    let d = g.offset(sq, 1.0).unwrap();
                    g.div(cur, d)
                }
                Step::MatMulSquare(k) => {
                    let t = g.tanh(pick(*k)).unwrap();
                    g.matmul(cur, t)
                }
            };
            vals.push(next.unwrap());
        }
        let last = *vals.last().unwrap();
        g.sum(last).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn gradients_agree_with_central_differences(
            x in proptest::collection::vec(-10.0..10.0f64, 4),
            steps in proptest::collection::vec(step_strategy(), 1..8),
        ) {
            let eval = |v: &[f64]| {
                let mut g = Graph::new();
                let n = g.param(Tensor::matrix(2, 2, v.to_vec()).unwrap());
                let out = run_program(&mut g, n, &steps);
                (g, n, out)
            };
            let (g, n, out) = eval(&x);
            let analytic = g.backward(out).unwrap().get_or_zeros(n, g.value(n)).into_data();
            let numeric = central_difference(
                |v| { let (g, _, out) = eval(v); g.value(out).item().unwrap() },
                &x,
                FD_STEP,
            );
            prop_assert_eq!(first_mismatch(&analytic, &numeric, FD_REL, FD_ABS), None);
        }

        #[test]
        fn backward_is_linear(a in -3.0..3.0f64, b in -3.0..3.0f64,
                              x in proptest::collection::vec(-2.0..2.0f64, 4)) {
            let grad = |ca: f64, cb: f64| {
                let mut g = Graph::new();
                let n = g.param(Tensor::matrix(2, 2, x.clone()).unwrap());
                let f = g.tanh(n).unwrap();
                let f = g.sum(f).unwrap();
                let h = g.square(n).unwrap();
                let h = g.mean(h).unwrap();
                let fa = g.scale(f, ca).unwrap();
                let hb = g.scale(h, cb).unwrap();
                let out = g.add(fa, hb).unwrap();
                g.backward(out).unwrap().get(n).unwrap().data().to_vec()
            };
            let both = grad(a, b);
            let f = grad(1.0, 0.0);
            let h = grad(0.0, 1.0);
            for i in 0..4 {
                let lin = a * f[i] + b * h[i];
                prop_assert!((both[i] - lin).abs() <= 1e-12 * (1.0 + lin.abs()));
            }
        }
    }
}
