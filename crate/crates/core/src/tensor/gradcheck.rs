use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Attrs, Graph, Tensor, TensorError, Var};

/// Worst relative error between analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// One entry per input tensor.
    pub max_rel_error: Vec<f64>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

fn evaluate<F, E>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64, E>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let value = g.value(out);
    let v = value
        .item()
        .ok_or_else(|| TensorError::NotScalar(value.shape().to_vec()))?;
    if !v.is_finite() {
        return Err(TensorError::NonFinite("grad-check forward value".into()).into());
    }
    Ok(v)
}

/// Compares reverse-mode gradients of `f` with central differences.
///
/// Relative error per element is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F, E>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(TensorError::NotScalar(g.value(out).shape().to_vec()).into());
    }
    if !g.value(out).all_finite() {
        return Err(TensorError::NonFinite("grad-check forward value".into()).into());
    }
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();
    drop(g);

    let mut work = inputs.to_vec();
    let mut max_rel_error = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let mut worst = 0.0f64;
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = evaluate(&f, &work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = evaluate(&f, &work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i].data()[j];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
        max_rel_error.push(worst);
    }
    Ok(GradCheckReport { max_rel_error })
}

/// One row of [`primitive_suite`].
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub primitive: &'static str,
    pub case: String,
    pub max_rel_error: f64,
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Contracts `y` with fixed random weights so every output element matters.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(g.shape(y), &mut rng);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

fn check_named(
    name: &'static str,
    attrs: &Attrs,
    inputs: Vec<Tensor<f64>>,
    seed: u64,
) -> Result<SuiteEntry, TensorError> {
    let case = inputs
        .iter()
        .map(|t| format!("{:?}", t.shape()))
        .collect::<Vec<_>>()
        .join("x");
    let report = grad_check(
        |g: &mut Graph<f64>, v: &[Var]| -> Result<Var, TensorError> {
            let y = g.apply_named(name, v, attrs)?;
            weighted_sum(g, y, seed)
        },
        &inputs,
        1e-5,
    )?;
    Ok(SuiteEntry {
        primitive: name,
        case,
        max_rel_error: report.worst(),
    })
}

/// Stop-gradient against constant substitution: `d/dx [w·sg(x) + u·x] = u`.
fn check_stop_gradient(shape: &[usize], seed: u64) -> Result<SuiteEntry, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(shape, &mut rng);
    let u = uniform(shape, &mut rng);
    let mut g = Graph::new();
    let xv = g.param(x);
    let sg = g.stop_gradient(xv)?;
    let a = weighted_sum(&mut g, sg, seed + 1)?;
    let uv = g.constant(u.clone());
    let p = g.mul(xv, uv)?;
    let b = g.sum_all(p)?;
    let loss = g.add(a, b)?;
    let grads = g.backward(loss)?;
    let got = grads.get_or_zeros(xv, shape);
    let max_rel_error = got
        .data()
        .iter()
        .zip(u.data())
        .map(|(a, e)| (a - e).abs() / a.abs().max(e.abs()).max(1e-8))
        .fold(0.0, f64::max);
    Ok(SuiteEntry {
        primitive: "stop-gradient",
        case: format!("{shape:?}"),
        max_rel_error,
    })
}

/// Central-difference checks of every primitive in [`CATALOG`](super::CATALOG)
/// over several shapes and axes, in float64.
pub fn primitive_suite() -> Result<Vec<SuiteEntry>, TensorError> {
    let mut out = Vec::new();
    let shapes: [&[usize]; 3] = [&[5], &[3, 4], &[2, 3, 4]];
    for (s, &shape) in shapes.iter().enumerate() {
        let seed = 100 + 10 * s as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = || uniform(shape, &mut rng);
        let positive = |t: Tensor<f64>| Tensor::from_fn(t.shape(), |i| t.data()[i].abs() + 0.5);
        let plain = Attrs::default();
        for name in ["gelu", "exp", "square"] {
            out.push(check_named(name, &plain, vec![x()], seed)?);
        }
        out.push(check_named("log", &plain, vec![positive(x())], seed)?);
        let scale = Attrs {
            scalar: Some(-1.7),
            ..Attrs::default()
        };
        out.push(check_named("scale", &scale, vec![x()], seed)?);
        let last = shape.len() - 1;
        for a in [0, last] {
            let axis = Attrs {
                axis: Some(a),
                ..Attrs::default()
            };
            for name in ["softmax", "log-softmax", "layer-norm", "l2-normalize", "mean", "sum"] {
                out.push(check_named(name, &axis, vec![x()], seed + a as u64)?);
            }
            let slice = Attrs {
                axis: Some(a),
                start: Some(1),
                len: Some(shape[a] - 1),
                ..Attrs::default()
            };
            out.push(check_named("slice", &slice, vec![x()], seed)?);
        }
        let perm = if shape.len() == 3 {
            vec![1, 2, 0]
        } else {
            (0..shape.len()).rev().collect()
        };
        let transpose = Attrs {
            shape: Some(perm),
            ..Attrs::default()
        };
        out.push(check_named("transpose", &transpose, vec![x()], seed)?);
        let gather = Attrs {
            indices: Some(vec![shape[0] - 1, 0, shape[0] - 1]),
            ..Attrs::default()
        };
        out.push(check_named("gather-rows", &gather, vec![x()], seed)?);
        let n: usize = shape.iter().product();
        let reshape = Attrs {
            shape: Some(vec![n]),
            ..Attrs::default()
        };
        out.push(check_named("reshape", &reshape, vec![x()], seed)?);
        let fill = Attrs {
            mask: Some((0..n).map(|i| i % 3 == 0).collect()),
            scalar: Some(-4.0),
            ..Attrs::default()
        };
        out.push(check_named("masked-fill", &fill, vec![x()], seed)?);
        out.push(check_stop_gradient(shape, seed)?);
    }
    let binary: [(&'static str, &[usize], &[usize]); 9] = [
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
    for (i, (name, sa, sb)) in binary.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let inputs = vec![uniform(sa, &mut rng), uniform(sb, &mut rng)];
        out.push(check_named(name, &Attrs::default(), inputs, 99)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (axis, shapes) in [
        (0usize, vec![vec![2, 3], vec![1, 3], vec![3, 3]]),
        (1, vec![vec![2, 1, 4], vec![2, 3, 4]]),
        (2, vec![vec![2, 2, 1], vec![2, 2, 2]]),
    ] {
        let inputs: Vec<_> = shapes.iter().map(|s| uniform(s, &mut rng)).collect();
        let attrs = Attrs {
            axis: Some(axis),
            ..Attrs::default()
        };
        out.push(check_named("concat", &attrs, inputs, 11)?);
    }
    Ok(out)
}
