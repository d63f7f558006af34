use super::*;
use crate::error::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn positive_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(0.5..2.0))
}

/// Weighted sum so every output coordinate gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, y: Var) -> Result<Var> {
    let n = g.value(y).numel();
    let w = Tensor::from_fn(g.shape(y), |i| ((i as f64 + 1.0) * 0.618).sin() + 0.1 * (n as f64));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.data(y), &[0.5, 0.5]);
}

#[test]
fn std_of_constant_is_zero() {
    let mut g = Graph::new();
    let x = g.input(Tensor::new(&[3], vec![3.0, 3.0, 3.0]).unwrap());
    let s = g.reduce_std(x, 0, 0.0).unwrap();
    assert_eq!(g.value(s).item(), 0.0);
    // the zero-variance point has a finite (zero) gradient
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[0.0, 0.0, 0.0]);
}

#[test]
fn matmul_small_integers() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
    let b = g.constant(Tensor::new(&[3, 2], vec![7., 8., 9., 10., 11., 12.]).unwrap());
    let c = g.matmul(a, b).unwrap();
    // [1*7+2*9+3*11, 1*8+2*10+3*12; 4*7+5*9+6*11, 4*8+5*10+6*12]
    assert_eq!(g.data(c), &[58., 64., 139., 154.]);
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    let c = g.constant(Tensor::zeros(&[4]));
    assert!(g.add(a, c).unwrap_err().to_string().contains("add"));
}

#[test]
fn conv_identity_and_sum_kernels() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64));
    let w = g.constant(Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap());
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(g.data(y), g.data(x));

    let ones = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let k = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(ones, k, None, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 1, 1]);
    assert_eq!(g.data(y), &[9.0]);

    let small = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
    assert!(g.conv2d(small, k, None, 1, 0).is_err());
}

#[test]
fn depthwise_conv_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_fn(&[4, 2], |i| i as f64 + 1.0));
    let delta = g.constant(Tensor::new(&[2, 3], vec![0., 1., 0., 0., 1., 0.]).unwrap());
    let y = g.depthwise_conv1d(x, delta).unwrap();
    assert_eq!(g.data(y), g.data(x));

    let even = g.constant(Tensor::zeros(&[2, 2]));
    assert!(g.depthwise_conv1d(x, even).is_err());

    // perturbing channel 0 leaves channel 1 bit-identical
    let k = Tensor::from_fn(&[2, 3], |i| (i as f64).sin());
    let base = Tensor::from_fn(&[4, 2], |i| (i as f64 * 0.3).cos());
    let mut perturbed = base.clone();
    perturbed.data_mut()[2] += 0.5;
    let run = |input: Tensor| {
        let mut g = Graph::new();
        let x = g.constant(input);
        let w = g.constant(k.clone());
        let y = g.depthwise_conv1d(x, w).unwrap();
        g.data(y).to_vec()
    };
    let (a, b) = (run(base), run(perturbed));
    for t in 0..4 {
        assert_eq!(a[t * 2 + 1].to_bits(), b[t * 2 + 1].to_bits());
    }
}

#[test]
fn backward_basics() {
    let mut g = Graph::new();
    let x = g.input(Tensor::from_fn(&[2, 3], |i| i as f64));
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[1.0; 6]);

    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(3.0));
    let y = g.input(Tensor::scalar(-2.0));
    let p = g.mul(x, y).unwrap();
    let grads = g.backward(p).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[-2.0]);
    assert_eq!(grads.get(y).unwrap(), &[3.0]);

    // multiple uses accumulate
    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(3.0));
    let sq = g.mul(x, x).unwrap();
    let y = g.add(sq, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[7.0]);

    // non-scalar loss is an error
    let mut g = Graph::new();
    let v = g.input(Tensor::zeros(&[2]));
    assert!(g.backward(v).is_err());
}

#[test]
fn finite_diff_check_examples() {
    let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
    let err = finite_diff_check(
        |g, x| {
            let sq = g.mul(x, x)?;
            Ok(g.sum(sq))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-6, "{err}");

    let err = finite_diff_check(
        |g, _x| Ok(g.constant(Tensor::scalar(4.0))),
        &x,
        1e-5,
    )
    .unwrap();
    assert_eq!(err, 0.0);

    let err = finite_diff_check(
        |g, x| {
            let s = g.sigmoid(x);
            let e = g.exp(s);
            let p = g.mul(e, x)?;
            Ok(g.sum(p))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-5, "{err}");
}

#[test]
fn gradient_reversal_examples() {
    let mut g = Graph::new();
    let x = g.input(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
    let y = g.gradient_reversal(x, 0.75);
    assert_eq!(g.data(y), &[1.0, 2.0, 3.0]);

    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[3]));
    let y = g.gradient_reversal(x, 1.0);
    let s = g.sum(y);
    assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[-1.0; 3]);

    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[3]));
    let y = g.gradient_reversal(x, 0.0);
    let s = g.sum(y);
    assert!(g.backward(s).unwrap().get(x).unwrap().iter().all(|v| *v == 0.0));
}

#[test]
fn reversal_equals_negated_identity_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x0 = rand_tensor(&mut rng, &[4, 3]);
    for lambda in [0.0, 0.3, 0.75, 1.5] {
        let run = |rev: bool| {
            let mut g = Graph::new();
            let x = g.input(x0.clone());
            let y = if rev { g.gradient_reversal(x, lambda) } else { x };
            let e = g.exp(y);
            let s = g.reduce_std(e, 0, 1e-8).unwrap();
            let l = g.sum(s);
            g.backward(l).unwrap().get(x).unwrap().to_vec()
        };
        let (plain, rev) = (run(false), run(true));
        for (p, r) in plain.iter().zip(&rev) {
            assert_eq!(*r, -lambda * p);
        }
    }
}

/// Every differentiable primitive against central differences.
#[test]
fn primitive_gradients_match_finite_differences() {
    type Case = (&'static str, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>, Vec<Vec<usize>>, bool);
    let cases: Vec<Case> = vec![
        ("add", Box::new(|g, v| g.add(v[0], v[1])), vec![vec![3, 4], vec![4]], false),
        ("sub", Box::new(|g, v| g.sub(v[0], v[1])), vec![vec![3, 4], vec![3, 1]], false),
        ("mul", Box::new(|g, v| g.mul(v[0], v[1])), vec![vec![2, 3, 4], vec![3, 1]], false),
        ("div", Box::new(|g, v| g.div(v[0], v[1])), vec![vec![3, 4], vec![4]], true),
        ("scalar_mul", Box::new(|g, v| Ok(g.scalar_mul(v[0], -1.7))), vec![vec![5]], false),
        ("matmul", Box::new(|g, v| g.matmul(v[0], v[1])), vec![vec![3, 4], vec![4, 2]], false),
        ("exp", Box::new(|g, v| Ok(g.exp(v[0]))), vec![vec![6]], false),
        ("log", Box::new(|g, v| Ok(g.log(v[0]))), vec![vec![6]], true),
        ("sqrt", Box::new(|g, v| Ok(g.sqrt(v[0]))), vec![vec![6]], true),
        ("sigmoid", Box::new(|g, v| Ok(g.sigmoid(v[0]))), vec![vec![6]], false),
        ("relu", Box::new(|g, v| Ok(g.relu(v[0]))), vec![vec![6]], false),
        ("concat", Box::new(|g, v| g.concat(&[v[0], v[1]], 1)), vec![vec![2, 3, 2], vec![2, 1, 2]], false),
        ("slice", Box::new(|g, v| g.slice(v[0], 1, 1, 3)), vec![vec![2, 4, 3]], false),
        ("reshape", Box::new(|g, v| g.reshape(v[0], &[6, 2])), vec![vec![3, 4]], false),
        ("transpose", Box::new(|g, v| g.transpose(v[0])), vec![vec![3, 4]], false),
        ("reduce_sum", Box::new(|g, v| g.reduce_sum(v[0], 1)), vec![vec![2, 3, 4]], false),
        ("reduce_mean", Box::new(|g, v| g.reduce_mean(v[0], 0)), vec![vec![2, 3, 4]], false),
        ("reduce_max", Box::new(|g, v| g.reduce_max(v[0], 1)), vec![vec![2, 3, 4]], false),
        ("reduce_std", Box::new(|g, v| g.reduce_std(v[0], 0, 1e-8)), vec![vec![5, 3]], false),
        ("softmax", Box::new(|g, v| g.softmax(v[0], 1)), vec![vec![2, 5, 3]], false),
        ("log_softmax", Box::new(|g, v| g.log_softmax(v[0], 2)), vec![vec![2, 3, 5]], false),
        ("layer_norm", Box::new(|g, v| Ok(g.layer_norm(v[0], 1e-5))), vec![vec![3, 6]], false),
        ("embedding", Box::new(|g, v| g.embedding(v[0], &[2, 0, 2, 3])), vec![vec![4, 3]], false),
        ("select", Box::new(|g, v| g.select(v[0], &[1, 5, 5, 0])), vec![vec![2, 3]], false),
        ("conv2d", Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1)), vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3], vec![3]], false),
        ("depthwise_conv1d", Box::new(|g, v| g.depthwise_conv1d(v[0], v[1])), vec![vec![6, 3], vec![3, 5]], false),
    ];
    for (name, f, shapes, positive) in &cases {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xs: Vec<Tensor> = shapes
                .iter()
                .map(|s| if *positive { positive_tensor(&mut rng, s) } else { rand_tensor(&mut rng, s) })
                .collect();
            let err = finite_diff_check_many(
                |g, v| {
                    let y = f(g, v)?;
                    weighted_sum(g, y)
                },
                &xs,
                H,
            )
            .unwrap();
            assert!(err <= TOL, "{name} seed {seed}: rel err {err}");
        }
    }
}

#[test]
fn softmax_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_fn(&[7, 9], |_| rng.random_range(-30.0..30.0)));
    let y = g.softmax(x, 1).unwrap();
    for row in g.data(y).chunks(9) {
        assert!(row.iter().all(|&p| p > 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn broadcast_over_leading_and_inner_dims() {
    let mut g = Graph::new();
    let f = g.constant(Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64));
    let m = g.constant(Tensor::from_fn(&[2, 1, 2, 2], |i| if i % 2 == 0 { 1.0 } else { 0.0 }));
    let y = g.mul(f, m).unwrap();
    assert_eq!(g.shape(y), &[2, 3, 2, 2]);
    let d = g.data(y);
    assert_eq!(&d[0..4], &[0.0, 0.0, 2.0, 0.0]);
    assert_eq!(&d[12..16], &[12.0, 0.0, 14.0, 0.0]);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn std_nonnegative_and_zero_iff_constant(xs in proptest::collection::vec(-5.0f64..5.0, 1..12)) {
            let mut g = Graph::new();
            let n = xs.len();
            let x = g.constant(Tensor::new(&[n], xs.clone()).unwrap());
            let s = g.reduce_std(x, 0, 0.0).unwrap();
            let v = g.value(s).item();
            prop_assert!(v >= 0.0);
            let constant = xs.iter().all(|&a| a == xs[0]);
            prop_assert_eq!(v == 0.0, constant);
        }
    }
}
