//! Central finite-difference gradient checking.
//!
//! The numerical side only ever runs forward passes, so it is independent
//! of every backward rule it is used to validate.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Per-input comparison of analytic and numerical gradients.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// `|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2)` per input.
    pub relative_errors: Vec<f64>,
    pub analytic: Vec<Tensor<f64>>,
    pub numeric: Vec<Tensor<f64>>,
}

impl GradReport {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Compares the gradient of the scalar `f(inputs)` computed by the graph
/// with central differences of step `h`.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.variable(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut g, &vars)?;
    let analytic = g.grad_of(loss, &vars)?;

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::no_grad();
        let vars = values
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        Ok(g.item(out))
    };

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut grad = vec![0.0; inputs[i].numel()];
        for (k, slot) in grad.iter_mut().enumerate() {
            let orig = inputs[i].data()[k];
            work[i].data_mut()[k] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[k] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[k] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        numeric.push(Tensor::new(inputs[i].shape(), grad)?);
    }
    let relative_errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a.data(), n.data()))
        .collect();
    Ok(GradReport {
        relative_errors,
        analytic,
        numeric,
    })
}

pub type BuildFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// One named gradient check over freshly sampled inputs.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: BuildFn,
}

/// Gradient checks covering every differentiable graph operation.
///
/// Each case reduces the op output to a scalar through a fixed random
/// weighting so that no gradient component vanishes by symmetry.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut s = Sampler::new(seed);

    fn weighted(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
        let w = g.constant(weights.clone())?;
        let prod = g.mul(out, w)?;
        g.sum(prod)
    }

    let mut cases: Vec<OpCase> = Vec::new();
    let mut push = |name: &'static str, inputs: Vec<Tensor<f64>>, out_weights: Tensor<f64>, op: BuildFn| {
        cases.push(OpCase {
            name,
            inputs,
            build: Box::new(move |g, v| {
                let out = op(g, v)?;
                if g.value(out).numel() == 1 {
                    let w = out_weights.data()[0];
                    g.scale(out, w)
                } else {
                    weighted(g, out, &out_weights)
                }
            }),
        });
    };

    let conv_inputs = |rt: &mut Sampler, cin: usize, cout: usize, k: usize, hw: usize| {
        vec![rt.u(&[2, cin, hw, hw], -1.0, 1.0), rt.u(&[cout, cin, k, k], -0.5, 0.5), rt.u(&[cout], -0.5, 0.5)]
    };
    let inputs = conv_inputs(&mut s, 3, 4, 3, 6);
    push("conv2d k3 s1 p1", inputs, s.u(&[2, 4, 6, 6], -1.0, 1.0), Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1)));
    let inputs = conv_inputs(&mut s, 2, 3, 3, 7);
    push("conv2d k3 s2 p1", inputs, s.u(&[2, 3, 4, 4], -1.0, 1.0), Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1)));
    let inputs = conv_inputs(&mut s, 3, 2, 1, 4);
    push("conv2d k1", inputs, s.u(&[2, 2, 4, 4], -1.0, 1.0), Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 0)));
    let inputs = vec![s.u(&[1, 2, 5, 5], -1.0, 1.0), s.u(&[2, 2, 2, 2], -0.5, 0.5)];
    push("conv2d k2 no bias", inputs, s.u(&[1, 2, 4, 4], -1.0, 1.0), Box::new(|g, v| g.conv2d(v[0], v[1], None, 1, 0)));

    push("instance_norm", vec![s.u(&[2, 3, 4, 4], -2.0, 2.0)], s.u(&[2, 3, 4, 4], -1.0, 1.0), Box::new(|g, v| g.instance_norm(v[0], 1e-5)));
    push(
        "adain",
        vec![s.u(&[2, 3, 4, 4], -2.0, 2.0), s.u(&[2, 3], 0.5, 1.5), s.u(&[2, 3], -1.0, 1.0)],
        s.u(&[2, 3, 4, 4], -1.0, 1.0),
        Box::new(|g, v| g.adain(v[0], v[1], v[2], 1e-5)),
    );
    for (name, kind) in [
        ("relu", crate::Activation::Relu),
        ("leaky_relu", crate::Activation::LeakyRelu),
        ("sigmoid", crate::Activation::Sigmoid),
        ("tanh", crate::Activation::Tanh),
    ] {
        push(name, vec![s.nz(&[3, 5])], s.u(&[3, 5], -1.0, 1.0), Box::new(move |g, v| g.activation(v[0], kind)));
    }
    push(
        "dense",
        vec![s.u(&[3, 5], -1.0, 1.0), s.u(&[4, 5], -1.0, 1.0), s.u(&[4], -1.0, 1.0)],
        s.u(&[3, 4], -1.0, 1.0),
        Box::new(|g, v| g.dense(v[0], v[1], v[2])),
    );
    push("upsample2x", vec![s.u(&[2, 2, 3, 3], -1.0, 1.0)], s.u(&[2, 2, 6, 6], -1.0, 1.0), Box::new(|g, v| g.upsample2x(v[0])));
    push("highpass3x3", vec![s.u(&[1, 2, 5, 4], -1.0, 1.0)], s.u(&[1, 2, 5, 4], -1.0, 1.0), Box::new(|g, v| g.highpass3x3(v[0])));
    let pair = |rt: &mut Sampler| vec![rt.u(&[2, 3], -1.0, 1.0), rt.u(&[2, 3], -1.0, 1.0)];
    let inputs = pair(&mut s);
    push("add", inputs, s.u(&[2, 3], -1.0, 1.0), Box::new(|g, v| g.add(v[0], v[1])));
    let inputs = pair(&mut s);
    push("sub", inputs, s.u(&[2, 3], -1.0, 1.0), Box::new(|g, v| g.sub(v[0], v[1])));
    let inputs = pair(&mut s);
    push("mul", inputs, s.u(&[2, 3], -1.0, 1.0), Box::new(|g, v| g.mul(v[0], v[1])));
    push("scale", vec![s.u(&[4], -1.0, 1.0)], s.u(&[4], -1.0, 1.0), Box::new(|g, v| g.scale(v[0], -2.5)));
    push("add_scalar", vec![s.u(&[4], -1.0, 1.0)], s.u(&[4], -1.0, 1.0), Box::new(|g, v| g.add_scalar(v[0], 0.75)));
    push(
        "average",
        vec![s.u(&[1, 2, 2, 2], -1.0, 1.0), s.u(&[1, 2, 2, 2], -1.0, 1.0), s.u(&[1, 2, 2, 2], -1.0, 1.0)],
        s.u(&[1, 2, 2, 2], -1.0, 1.0),
        Box::new(|g, v| g.average(v)),
    );
    push(
        "concat_channels",
        vec![s.u(&[2, 1, 3, 3], -1.0, 1.0), s.u(&[2, 2, 3, 3], -1.0, 1.0)],
        s.u(&[2, 3, 3, 3], -1.0, 1.0),
        Box::new(|g, v| g.concat_channels(v)),
    );
    push("reshape", vec![s.u(&[2, 6], -1.0, 1.0)], s.u(&[3, 4], -1.0, 1.0), Box::new(|g, v| g.reshape(v[0], &[3, 4])));
    push("global_avg_pool", vec![s.u(&[2, 3, 3, 2], -1.0, 1.0)], s.u(&[2, 3], -1.0, 1.0), Box::new(|g, v| g.global_avg_pool(v[0])));
    push("sum", vec![s.u(&[5], -1.0, 1.0)], Tensor::scalar(0.7), Box::new(|g, v| g.sum(v[0])));
    push("mean", vec![s.u(&[5], -1.0, 1.0)], Tensor::scalar(1.3), Box::new(|g, v| g.mean(v[0])));
    push(
        "mean_abs_diff",
        vec![s.nz(&[2, 4]), Tensor::zeros(&[2, 4])],
        Tensor::scalar(1.0),
        Box::new(|g, v| g.mean_abs_diff(v[0], v[1])),
    );
    push("gather_rows", vec![s.u(&[4, 3], -1.0, 1.0)], s.u(&[3, 3], -1.0, 1.0), Box::new(|g, v| g.gather_rows(v[0], &[2, 0, 2])));
    push(
        "broadcast_planes",
        vec![s.u(&[2, 3], -1.0, 1.0)],
        s.u(&[2, 3, 2, 3], -1.0, 1.0),
        Box::new(|g, v| g.broadcast_planes(v[0], 2, 3)),
    );
    push("bce real", vec![s.u(&[4], 0.1, 0.9)], Tensor::scalar(1.0), Box::new(|g, v| g.bce(v[0], 1.0)));
    push("bce fake", vec![s.u(&[4], 0.1, 0.9)], Tensor::scalar(1.0), Box::new(|g, v| g.bce(v[0], 0.0)));
    cases
}

struct Sampler {
    rng: rand::rngs::StdRng,
}

impl Sampler {
    fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        Self {
            rng: rand::rngs::StdRng::seed_from_u64(seed),
        }
    }

    fn u(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        use rand::Rng;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(lo..hi)).collect();
        Tensor::new(shape, data).expect("valid shape")
    }

    /// Values bounded away from zero so piecewise-linear kinks are never crossed.
    fn nz(&mut self, shape: &[usize]) -> Tensor<f64> {
        let mut t = self.u(shape, -1.0, 1.0);
        for v in t.data_mut() {
            *v = v.signum() * (0.1 + v.abs());
        }
        t
    }
}
