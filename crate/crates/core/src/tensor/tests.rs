use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn softmax_of_uniform_logits() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[3], &[1.0, 1.0, 1.0]));
    let y = g.softmax(x, 0).unwrap();
    assert!(close(g.value(y).data(), &[1.0 / 3.0; 3], 1e-15));
}

#[test]
fn matmul_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = random(&[3, 3], &mut rng);
    let mut g = Graph::<f64>::new();
    let eye = g.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
    let mv = g.constant(m.clone());
    let out = g.matmul(eye, mv).unwrap();
    assert_eq!(g.value(out), &m);
}

#[test]
fn layer_norm_of_constant_vector_is_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[3], &[2.5, 2.5, 2.5]));
    let y = g.layer_norm(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn product_rule() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(2.0));
    let y = g.param(Tensor::scalar(3.0));
    let z = g.mul(x, y).unwrap();
    let grads = g.backward(z).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), Some(3.0));
    assert_eq!(grads.get(y).unwrap().item(), Some(2.0));
    assert_eq!(grads.get(z).unwrap().item(), Some(1.0));
}

#[test]
fn sum_of_softmax_has_zero_gradient() {
    let mut g = Graph::<f64>::new();
    let z = g.param(t(&[4], &[0.3, -1.0, 2.0, 0.0]));
    let s = g.softmax(z, 0).unwrap();
    let l = g.sum_all(s).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.get(z).unwrap().data().iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn three_layer_chain_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = vec![
        random(&[2, 4], &mut rng),
        random(&[4, 5], &mut rng),
        random(&[5, 3], &mut rng),
        random(&[3, 2], &mut rng),
    ];
    let report = grad_check(
        |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
            let mut h = v[0];
            for &w in &v[1..] {
                let m = g.matmul(h, w)?;
                h = g.gelu(m)?;
            }
            g.sum_all(h)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(report.worst() < 1e-4, "{report:?}");
}

#[test]
fn grad_check_square_sum_and_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[5], &mut rng);
    let report = grad_check(
        |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
            let s = g.square(v[0])?;
            g.sum_all(s)
        },
        std::slice::from_ref(&x),
        1e-5,
    )
    .unwrap();
    assert!(report.worst() < 1e-6, "{report:?}");

    let report = grad_check(
        |g: &mut Graph<f64>, _: &[Var]| -> Result<Var> { Ok(g.constant(Tensor::scalar(4.0))) },
        &[x],
        1e-5,
    )
    .unwrap();
    assert_eq!(report.worst(), 0.0);
}

#[test]
fn grad_check_rejects_non_scalar() {
    let err = grad_check(
        |_: &mut Graph<f64>, v: &[Var]| -> Result<Var> { Ok(v[0]) },
        &[t(&[2], &[1.0, 2.0])],
        1e-5,
    )
    .unwrap_err();
    assert!(matches!(err, TensorError::NotScalar(_)));
}

/// Reduces any output to a scalar with fixed random weights so every output
/// element contributes a distinct sensitivity.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(g.shape(y), &mut rng);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

fn check_unary(name: &str, attrs: Attrs, shape: &[usize], positive: bool, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = random(shape, &mut rng);
    if positive {
        x.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.5);
    }
    let report = grad_check(
        |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
            let y = g.apply_named(name, v, &attrs)?;
            weighted_sum(g, y, seed + 1)
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(report.worst() < 1e-4, "{name} {shape:?}: {report:?}");
}

#[test]
fn every_unary_primitive_passes_grad_check_on_three_shapes() {
    let shapes: [&[usize]; 3] = [&[5], &[3, 4], &[2, 3, 4]];
    for (s, shape) in shapes.iter().enumerate() {
        let seed = 100 + s as u64 * 10;
        let last = shape.len() - 1;
        let axis = |a| Attrs {
            axis: Some(a),
            ..Attrs::default()
        };
        check_unary("gelu", Attrs::default(), shape, false, seed);
        check_unary("exp", Attrs::default(), shape, false, seed);
        check_unary("square", Attrs::default(), shape, false, seed);
        check_unary("log", Attrs::default(), shape, true, seed);
        check_unary(
            "scale",
            Attrs {
                scalar: Some(-1.7),
                ..Attrs::default()
            },
            shape,
            false,
            seed,
        );
        for a in [0, last] {
            check_unary("softmax", axis(a), shape, false, seed + a as u64);
            check_unary("log-softmax", axis(a), shape, false, seed + a as u64);
            check_unary("layer-norm", axis(a), shape, false, seed + a as u64);
            check_unary("l2-normalize", axis(a), shape, false, seed + a as u64);
            check_unary("mean", axis(a), shape, false, seed + a as u64);
            check_unary("sum", axis(a), shape, false, seed + a as u64);
            check_unary(
                "slice",
                Attrs {
                    axis: Some(a),
                    start: Some(1),
                    len: Some(shape[a] - 1),
                    ..Attrs::default()
                },
                shape,
                false,
                seed,
            );
        }
        let mut perm: Vec<usize> = (0..shape.len()).rev().collect();
        if shape.len() == 3 {
            perm = vec![1, 2, 0];
        }
        check_unary(
            "transpose",
            Attrs {
                shape: Some(perm),
                ..Attrs::default()
            },
            shape,
            false,
            seed,
        );
        check_unary(
            "gather-rows",
            Attrs {
                indices: Some(vec![shape[0] - 1, 0, shape[0] - 1]),
                ..Attrs::default()
            },
            shape,
            false,
            seed,
        );
        let n: usize = shape.iter().product();
        check_unary(
            "reshape",
            Attrs {
                shape: Some(vec![n]),
                ..Attrs::default()
            },
            shape,
            false,
            seed,
        );
        check_unary(
            "masked-fill",
            Attrs {
                mask: Some((0..n).map(|i| i % 3 == 0).collect()),
                scalar: Some(-4.0),
                ..Attrs::default()
            },
            shape,
            false,
            seed,
        );
    }
}

#[test]
fn binary_primitives_pass_grad_check() {
    let cases: [(&str, &[usize], &[usize]); 9] = [
        ("matmul", &[3, 4], &[4, 2]),
        ("matmul", &[2, 3, 4], &[2, 4, 5]),
        ("matmul", &[2, 3, 4], &[4, 2]),
        ("add", &[3, 4], &[3, 4]),
        ("add", &[2, 3, 4], &[4]),
        ("sub", &[2, 3, 4], &[3, 4]),
        ("sub", &[5], &[5]),
        ("mul", &[2, 3, 4], &[3, 4]),
        ("mul", &[4, 2], &[2]),
    ];
    for (i, (name, sa, sb)) in cases.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let inputs = [random(sa, &mut rng), random(sb, &mut rng)];
        let report = grad_check(
            |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
                let y = g.apply_named(name, v, &Attrs::default())?;
                weighted_sum(g, y, 99)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(report.worst() < 1e-4, "{name} {sa:?}x{sb:?}: {report:?}");
    }
}

#[test]
fn concat_passes_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (axis, shapes) in [
        (0usize, vec![vec![2, 3], vec![1, 3], vec![3, 3]]),
        (1, vec![vec![2, 1, 4], vec![2, 3, 4]]),
        (2, vec![vec![2, 2, 1], vec![2, 2, 2]]),
    ] {
        let inputs: Vec<_> = shapes.iter().map(|s| random(s, &mut rng)).collect();
        let report = grad_check(
            |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
                let y = g.concat(v, axis)?;
                weighted_sum(g, y, 11)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(report.worst() < 1e-4, "{report:?}");
    }
}

#[test]
fn stop_gradient_matches_constant_substitution() {
    // L(sg(u(x)), x) with u(x) = exp(x), L = sum(u · x²)
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x0 = random(&[4], &mut rng);

    let mut g = Graph::<f64>::new();
    let x = g.param(x0.clone());
    let u = g.exp(x).unwrap();
    let u = g.stop_gradient(u).unwrap();
    let sq = g.square(x).unwrap();
    let p = g.mul(sq, u).unwrap();
    let l = g.sum_all(p).unwrap();
    let with_sg = g.backward(l).unwrap().get(x).unwrap().clone();

    let mut g = Graph::<f64>::new();
    let x = g.param(x0.clone());
    let u = g.exp(x).unwrap();
    let frozen = g.constant(g.value(u).clone());
    let sq = g.square(x).unwrap();
    let p = g.mul(sq, frozen).unwrap();
    let l = g.sum_all(p).unwrap();
    let oracle = g.backward(l).unwrap().get(x).unwrap().clone();

    assert_eq!(with_sg, oracle);
}

#[test]
fn stop_gradient_output_does_not_require_grad() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let y = g.stop_gradient(x).unwrap();
    assert_eq!(g.value(y), g.value(x));
    assert!(!g.requires_grad(y));
    let l = g.sum_all(y).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.get(x).is_none());
}

#[test]
fn shape_errors_name_the_primitive() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b).unwrap_err() {
        TensorError::ShapeMismatch { op, .. } => assert_eq!(op, "matmul"),
        e => panic!("unexpected {e:?}"),
    }
    let c = g.constant(Tensor::zeros(&[2]));
    assert!(g.add(c, a).is_err());
    assert!(matches!(
        g.apply_named("conv2d", &[a], &Attrs::default()),
        Err(TensorError::UnknownPrimitive(_))
    ));
    assert!(matches!(g.backward(a), Err(TensorError::NotScalar(_))));
}

#[test]
fn foreign_variables_are_rejected() {
    let mut g1 = Graph::<f64>::new();
    let mut g2 = Graph::<f64>::new();
    let x = g1.param(Tensor::scalar(1.0));
    assert!(matches!(g2.backward(x), Err(TensorError::ForeignVar)));
    assert!(matches!(g2.exp(x), Err(TensorError::ForeignVar)));
}

#[test]
fn catalog_names_round_trip() {
    let attrs = Attrs {
        axis: Some(0),
        scalar: Some(1.0),
        start: Some(0),
        len: Some(1),
        indices: Some(vec![0]),
        shape: Some(vec![0]),
        mask: Some(vec![false]),
        eps: None,
    };
    for name in CATALOG {
        assert_eq!(Op::from_name(name, &attrs).unwrap().name(), *name);
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = Graph::<f32>::new();
        let a = g.param(Tensor::from_fn(&[7, 9], |_| rng.gen_range(-1.0..1.0)));
        let b = g.param(Tensor::from_fn(&[9, 5], |_| rng.gen_range(-1.0..1.0)));
        let m = g.matmul(a, b).unwrap();
        let s = g.softmax(m, 1).unwrap();
        let l = g.log(s).unwrap();
        let l = g.mean_all(l).unwrap();
        let grads = g.backward(l).unwrap();
        let mut bits: Vec<u32> = g.value(l).data().iter().map(|v| v.to_bits()).collect();
        bits.extend(grads.get(a).unwrap().data().iter().map(|v| v.to_bits()));
        bits.extend(grads.get(b).unwrap().data().iter().map(|v| v.to_bits()));
        bits
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(v in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[3, 4], &v).unwrap());
        let y = g.softmax(x, 1).unwrap();
        for row in g.value(y).data().chunks(4) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn l2_normalize_yields_unit_rows(v in proptest::collection::vec(-10.0f64..10.0, 8)) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[2, 4], &v).unwrap());
        let y = g.l2_normalize(x, 1).unwrap();
        for (row, raw) in g.value(y).data().chunks(4).zip(v.chunks(4)) {
            let raw_norm: f64 = raw.iter().map(|a| a * a).sum::<f64>().sqrt();
            prop_assume!(raw_norm > 1e-6);
            let norm: f64 = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn primitive_suite_covers_catalog_within_tolerance() {
    let suite = primitive_suite().unwrap();
    for name in CATALOG {
        assert!(suite.iter().any(|e| e.primitive == *name), "{name} missing");
    }
    for e in &suite {
        assert!(e.max_rel_error < 1e-4, "{e:?}");
    }
}
