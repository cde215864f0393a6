mod common;

use gfn_pathreg::autodiff::{Graph, Tensor, Var};
use proptest::prelude::*;

/// Largest relative gap between the analytic gradient of `sum(f(x))` and
/// central differences with step `1e-5`, with `x` shaped `shape`.
fn fd_error(shape: &[usize], x: &[f64], f: impl Fn(&mut Graph, Var) -> Var) -> f64 {
    let eval = |x: &[f64]| {
        let mut g = Graph::new();
        let p = g.param(Tensor::new(shape, x.to_vec()).unwrap());
        let out = f(&mut g, p);
        let s = g.sum_all(out);
        (g.item(s), g.grad(s, &[p]).unwrap().remove(0))
    };
    let (_, grad) = eval(x);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.to_vec();
        plus[i] += h;
        let mut minus = x.to_vec();
        minus[i] -= h;
        let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
        let a = grad.data()[i];
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-5));
    }
    worst
}

fn vector(x: &[f64], f: impl Fn(&mut Graph, Var) -> Var) -> f64 {
    fd_error(&[x.len()], x, f)
}

fn away_from_zero() -> impl Strategy<Value = f64> {
    prop_oneof![-3.0..-0.01f64, 0.01..3.0f64]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn mlp_gradients_match_finite_differences(seed in any::<u64>()) {
        let case = common::mlp_case(seed);
        let err = common::mlp_fd_error(&case, 1e-5);
        prop_assert!(err <= 1e-4, "relative error {}", err);
    }

    #[test]
    fn elementwise_ops(x in prop::collection::vec(away_from_zero(), 1..6)) {
        let errors = [
            vector(&x, |g, v| g.exp(v)),
            vector(&x, |g, v| g.square(v)),
            vector(&x, |g, v| g.neg(v)),
            vector(&x, |g, v| g.scale(v, -2.5)),
            vector(&x, |g, v| g.add_scalar(v, 0.7)),
            vector(&x, |g, v| g.leaky_relu(v, 0.01)),
            vector(&x, |g, v| g.clamp_min(v, -5.0)),
            vector(&x, |g, v| {
                let e = g.exp(v);
                g.ln(e)
            }),
            vector(&x, |g, v| {
                let s = g.square(v);
                g.mul(s, v)
            }),
            vector(&x, |g, v| {
                let e = g.exp(v);
                g.sub(e, v)
            }),
            vector(&x, |g, v| {
                let e = g.exp(v);
                g.add(e, v)
            }),
            vector(&x, |g, v| {
                let w = g.scale(v, 0.5);
                let w = g.add_scalar(w, 0.2);
                g.min(v, w)
            }),
        ];
        for (k, e) in errors.iter().enumerate() {
            prop_assert!(*e <= 1e-4, "op {}: relative error {}", k, e);
        }
    }

    #[test]
    fn reductions_and_log_softmax(x in prop::collection::vec(away_from_zero(), 2..6)) {
        let n = x.len();
        let errors = [
            vector(&x, |g, v| {
                let sq: Vec<Var> = (0..n)
                    .map(|i| {
                        let p = g.pick(v, i);
                        g.square(p)
                    })
                    .collect();
                g.sum(&sq)
            }),
            vector(&x, |g, v| {
                let terms: Vec<(Var, f64)> = (0..n).map(|i| (g.pick(v, i), i as f64 - 1.5)).collect();
                let s = g.weighted_sum(&terms);
                g.exp(s)
            }),
            vector(&x, |g, v| {
                let mut mask = vec![true; n];
                mask[n - 1] = n == 2;
                let lp = g.masked_log_softmax(v, &mask).unwrap();
                let a = g.pick(lp, 0);
                let b = g.pick(lp, 1);
                g.mul(a, b)
            }),
        ];
        for (k, e) in errors.iter().enumerate() {
            prop_assert!(*e <= 1e-4, "reduction {}: relative error {}", k, e);
        }
    }

    #[test]
    fn matmul_and_bias(
        x in prop::collection::vec(-1.0..1.0f64, 6),
        w in prop::collection::vec(-1.0..1.0f64, 6),
    ) {
        let lhs = fd_error(&[2, 3], &x, |g, v| {
            let b = g.constant(Tensor::new(&[3, 2], w.clone()).unwrap());
            let p = g.matmul(v, b);
            g.square(p)
        });
        let rhs = fd_error(&[2, 3], &x, |g, v| {
            let a = g.constant(Tensor::new(&[3, 2], w.clone()).unwrap());
            let p = g.matmul(a, v);
            let bias = g.constant(Tensor::new(&[3], vec![0.1, -0.2, 0.3]).unwrap());
            let p = g.add_bias(p, bias);
            g.square(p)
        });
        let bias = fd_error(&[3], &x[..3], |g, v| {
            let a = g.constant(Tensor::new(&[2, 3], w.clone()).unwrap());
            let p = g.add_bias(a, v);
            g.exp(p)
        });
        prop_assert!(lhs <= 1e-4 && rhs <= 1e-4 && bias <= 1e-4, "{} {} {}", lhs, rhs, bias);
    }

    #[test]
    fn identical_inputs_are_bit_identical(seed in any::<u64>()) {
        let case = common::mlp_case(seed);
        let (a, ga) = common::mlp_loss(&case, &case.params);
        let (b, gb) = common::mlp_loss(&case, &case.params);
        prop_assert_eq!(a.to_bits(), b.to_bits());
        prop_assert_eq!(ga, gb);
    }
}
