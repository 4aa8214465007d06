use std::collections::HashMap;

use crate::element::Element;
use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{self, ConvGeometry};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    /// Leaky ReLU with slope 0.2 on negative inputs.
    LeakyRelu,
    Sigmoid,
    Tanh,
}

const LEAKY_SLOPE: f64 = 0.2;
const BCE_CLAMP: f64 = 1e-7;

enum Op<T> {
    Leaf,
    Param,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    PlaneAffine {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Upsample2x(Var),
    Highpass(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    GlobalAvgPool(Var),
    Sum(Var),
    Mean(Var),
    MeanAbsDiff(Var, Var),
    GatherRows {
        table: Var,
        rows: Vec<usize>,
    },
    BroadcastPlanes(Var),
    Bce {
        p: Var,
        target: T,
    },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param => Vec::new(),
            Op::Conv2d { x, w, b, .. } => [Some(*x), Some(*w), *b].into_iter().flatten().collect(),
            Op::InstanceNorm { x, .. } | Op::Act { x, .. } => vec![*x],
            Op::PlaneAffine { x, gamma, beta } => vec![*x, *gamma, *beta],
            Op::Dense { x, w, b } => vec![*x, *w, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MeanAbsDiff(a, b) => vec![*a, *b],
            Op::Upsample2x(x)
            | Op::Highpass(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Reshape(x)
            | Op::GlobalAvgPool(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::BroadcastPlanes(x) => vec![*x],
            Op::Concat(xs) => xs.clone(),
            Op::GatherRows { table, .. } => vec![*table],
            Op::Bce { p, .. } => vec![*p],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of tensor operations supporting one reverse pass.
///
/// Parameters enter the tape through [`Graph::param`], which copies the
/// current value out of a [`ParamStore`]; [`Graph::backward`] later
/// accumulates their gradients back into the store. Parameters whose name
/// starts with a frozen prefix behave as constants, but gradients still flow
/// through them to upstream values.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    frozen: Vec<String>,
    record: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            frozen: Vec::new(),
            record: true,
        }
    }

    /// A graph that records values only; nothing on it is differentiable.
    pub fn no_grad() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    /// Treats every parameter whose name starts with `prefix` as a constant.
    pub fn freeze_prefix(&mut self, prefix: impl Into<String>) {
        self.frozen.push(prefix.into());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, op_name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = self.record
            && match &op {
                Op::Leaf => false,
                Op::Param => true,
                other => other.parents().iter().any(|p| self.nodes[p.0].requires_grad),
            };
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, "constant")
    }

    /// A differentiable leaf that is not a parameter (used by gradient checks).
    pub fn variable(&mut self, value: Tensor<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "variable" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: self.record,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Brings a parameter onto the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let p = store.get(id);
        let trainable = !self.frozen.iter().any(|f| p.name.starts_with(f.as_str()));
        let op = if trainable { Op::Param } else { Op::Leaf };
        let v = self.push(p.value.clone(), op, "param")?;
        self.params.insert(id, v);
        Ok(v)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4("conv2d")?;
        let (cout, wcin, kh, kw) = self.value(w).dims4("conv2d")?;
        if wcin != cin || kh != kw {
            return Err(shape_err(
                "conv2d",
                format!("input {:?} vs weight {:?}", self.shape(x), self.shape(w)),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv2d", format!("bias {:?} for {cout} outputs", self.shape(b))));
            }
        }
        if stride == 0 {
            return Err(TensorError::Config("conv2d: stride must be at least 1".into()));
        }
        let geom = ConvGeometry {
            in_channels: cin,
            height: h,
            width: wd,
            kernel: kh,
            stride,
            pad,
        };
        let (ho, wo) = geom.output_size().ok_or_else(|| {
            TensorError::Config(format!("conv2d: kernel {kh} does not fit {h}x{wd} input with pad {pad}"))
        })?;
        let out = kernels::conv2d_forward(
            &geom,
            n,
            self.value(x).data(),
            self.value(w).data(),
            cout,
            b.map(|b| self.value(b).data()),
        );
        let out = Tensor::new(&[n, cout, ho, wo], out)?;
        self.push(out, Op::Conv2d { x, w, b, geom }, "conv2d")
    }

    /// Normalizes every `[H, W]` plane to zero mean and unit variance.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("instance_norm")?;
        let (out, inv_std) = kernels::instance_norm_forward(self.value(x).data(), h * w, eps);
        let out = Tensor::new(&[n, c, h, w], out)?;
        self.push(out, Op::InstanceNorm { x, inv_std }, "instance_norm")
    }

    /// `gamma[n, c] * x + beta[n, c]` applied per plane.
    pub fn plane_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("plane_affine")?;
        if self.shape(gamma) != [n, c] || self.shape(beta) != [n, c] {
            return Err(shape_err(
                "plane_affine",
                format!(
                    "x {:?} needs [{n}, {c}] modulation, got gamma {:?} beta {:?}",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let plane = h * w;
        let xs = self.value(x).data();
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let mut out = vec![T::zero(); xs.len()];
        for p in 0..n * c {
            for (o, &v) in out[p * plane..(p + 1) * plane].iter_mut().zip(&xs[p * plane..(p + 1) * plane]) {
                *o = gs[p] * v + bs[p];
            }
        }
        let out = Tensor::new(&[n, c, h, w], out)?;
        self.push(out, Op::PlaneAffine { x, gamma, beta }, "plane_affine")
    }

    /// Adaptive instance normalization: `gamma * instance_norm(x) + beta`.
    pub fn adain(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let normalized = self.instance_norm(x, eps)?;
        self.plane_affine(normalized, gamma, beta)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let xs = self.value(x);
        let data: Vec<T> = xs
            .data()
            .iter()
            .map(|&v| match kind {
                Activation::Relu => v.max(T::zero()),
                Activation::LeakyRelu => {
                    if v > T::zero() {
                        v
                    } else {
                        v * T::of(LEAKY_SLOPE)
                    }
                }
                Activation::Sigmoid => T::one() / (T::one() + (-v).exp()),
                Activation::Tanh => v.tanh(),
            })
            .collect();
        let out = Tensor::new(xs.shape(), data)?;
        self.push(out, Op::Act { x, kind }, "activation")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::LeakyRelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    /// `x w^T + b` for `x: [N, Din]`, `w: [Dout, Din]`, `b: [Dout]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, din) = self.value(x).dims2("dense")?;
        let (dout, wdin) = self.value(w).dims2("dense")?;
        if wdin != din || self.shape(b) != [dout] {
            return Err(shape_err(
                "dense",
                format!("x {:?}, w {:?}, b {:?}", self.shape(x), self.shape(w), self.shape(b)),
            ));
        }
        let mut out = Vec::with_capacity(n * dout);
        for _ in 0..n {
            out.extend_from_slice(self.value(b).data());
        }
        T::gemm(
            n,
            din,
            dout,
            T::one(),
            self.value(x).data(),
            (din, 1),
            self.value(w).data(),
            (1, din),
            T::one(),
            &mut out,
            (dout, 1),
        );
        let out = Tensor::new(&[n, dout], out)?;
        self.push(out, Op::Dense { x, w, b }, "dense")
    }

    /// Nearest-neighbour upsampling by two in both spatial dimensions.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("upsample2x")?;
        let out = kernels::upsample2x_forward(self.value(x).data(), h, w);
        let out = Tensor::new(&[n, c, 2 * h, 2 * w], out)?;
        self.push(out, Op::Upsample2x(x), "upsample2x")
    }

    /// Parameter-free Laplacian high-pass filter applied to every plane.
    pub fn highpass3x3(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("highpass3x3")?;
        let out = kernels::highpass_forward(self.value(x).data(), h, w);
        let out = Tensor::new(&[n, c, h, w], out)?;
        self.push(out, Op::Highpass(x), "highpass3x3")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data).expect("operands share a shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = T::of(factor);
        let xs = self.value(x);
        let out = Tensor::new(xs.shape(), xs.data().iter().map(|&v| v * f).collect())?;
        self.push(out, Op::Scale(x, f), "scale")
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Result<Var> {
        let c = T::of(offset);
        let xs = self.value(x);
        let out = Tensor::new(xs.shape(), xs.data().iter().map(|&v| v + c).collect())?;
        self.push(out, Op::AddScalar(x), "add_scalar")
    }

    /// Element-wise mean of equally shaped values.
    pub fn average(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| TensorError::Usage("average of zero values".into()))?;
        let mut acc = first;
        for &x in rest {
            acc = self.add(acc, x)?;
        }
        if xs.len() == 1 {
            Ok(acc)
        } else {
            self.scale(acc, 1.0 / xs.len() as f64)
        }
    }

    /// Concatenates `[N, Ci, H, W]` values along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| TensorError::Usage("concat of zero values".into()))?;
        let (n, _, h, w) = self.value(first).dims4("concat_channels")?;
        let mut total = 0;
        for &x in xs {
            let (xn, xc, xh, xw) = self.value(x).dims4("concat_channels")?;
            if (xn, xh, xw) != (n, h, w) {
                return Err(shape_err(
                    "concat_channels",
                    format!("{:?} vs {:?}", self.shape(first), self.shape(x)),
                ));
            }
            total += xc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for &x in xs {
                let c = self.shape(x)[1];
                out.extend_from_slice(&self.value(x).data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let out = Tensor::new(&[n, total, h, w], out)?;
        self.push(out, Op::Concat(xs.to_vec()), "concat_channels")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), "reshape")
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("global_avg_pool")?;
        let plane = h * w;
        let inv = T::of(1.0 / plane as f64);
        let out = self
            .value(x)
            .data()
            .chunks_exact(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new(&[n, c], out)?;
        self.push(out, Op::GlobalAvgPool(x), "global_avg_pool")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x);
        let s = xs.data().iter().copied().sum::<T>() / T::of(xs.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), "mean")
    }

    /// Mean absolute difference `mean |a - b|` (an L1 distance normalized by size).
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mean_abs_diff", a, b)?;
        let n = self.value(a).numel() as f64;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y).abs())
            .sum::<T>()
            / T::of(n);
        self.push(Tensor::scalar(s), Op::MeanAbsDiff(a, b), "mean_abs_diff")
    }

    /// Selects rows of a `[R, E]` table, producing `[rows.len(), E]`.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (r, e) = self.value(table).dims2("gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(TensorError::Usage(format!("gather_rows: row {bad} out of range for {r} rows")));
        }
        let data = self.value(table).data();
        let mut out = Vec::with_capacity(rows.len() * e);
        for &i in rows {
            out.extend_from_slice(&data[i * e..(i + 1) * e]);
        }
        let out = Tensor::new(&[rows.len(), e], out)?;
        self.push(
            out,
            Op::GatherRows {
                table,
                rows: rows.to_vec(),
            },
            "gather_rows",
        )
    }

    /// Broadcasts `[N, E]` to constant planes `[N, E, H, W]`.
    pub fn broadcast_planes(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let (n, e) = self.value(x).dims2("broadcast_planes")?;
        let plane = height * width;
        let mut out = Vec::with_capacity(n * e * plane);
        for &v in self.value(x).data() {
            out.extend(std::iter::repeat_n(v, plane));
        }
        let out = Tensor::new(&[n, e, height, width], out)?;
        self.push(out, Op::BroadcastPlanes(x), "broadcast_planes")
    }

    /// Mean binary cross-entropy of probabilities `p` against a constant target.
    pub fn bce(&mut self, p: Var, target: f64) -> Result<Var> {
        let t = T::of(target);
        let ps = self.value(p);
        let n = T::of(ps.numel() as f64);
        let s = ps
            .data()
            .iter()
            .map(|&v| {
                let v = clamp_prob(v);
                -(t * v.ln() + (T::one() - t) * (T::one() - v).ln())
            })
            .sum::<T>()
            / n;
        self.push(Tensor::scalar(s), Op::Bce { p, target: t }, "bce")
    }

    /// Reverse pass from a scalar `loss`, accumulating parameter gradients
    /// into `store`. Consumes the graph.
    pub fn backward(self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let mut grads = self.gradients(loss)?;
        for (&id, &v) in &self.params {
            if let Some(g) = grads[v.0].take() {
                store.accumulate_grad(id, &g);
            }
        }
        Ok(())
    }

    /// Reverse pass returning the gradient of `loss` with respect to `wrt`.
    /// Values that `loss` does not depend on get a zero gradient.
    pub fn grad_of(self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor<T>>> {
        let mut grads = self.gradients(loss)?;
        Ok(wrt
            .iter()
            .map(|v| {
                let shape = self.shape(*v);
                match grads[v.0].take() {
                    Some(g) => Tensor::new(shape, g).expect("gradient has value shape"),
                    None => Tensor::zeros(shape),
                }
            })
            .collect())
    }

    fn gradients(&self, loss: Var) -> Result<Vec<Option<Vec<T>>>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(grads);
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Conv2d { x, w, b, geom } => {
                let n = self.shape(*x)[0];
                let cout = self.shape(*w)[0];
                let mut dx = self.wants(*x).then(|| vec![T::zero(); self.value(*x).numel()]);
                let mut dw = self.wants(*w).then(|| vec![T::zero(); self.value(*w).numel()]);
                let mut db = b.filter(|b| self.wants(*b)).map(|_| vec![T::zero(); cout]);
                kernels::conv2d_backward(
                    geom,
                    n,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    cout,
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    add_into(grads, *x, &dx);
                }
                if let Some(dw) = dw {
                    add_into(grads, *w, &dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    add_into(grads, *b, &db);
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                if self.wants(*x) {
                    let plane = out.len() / inv_std.len();
                    with_grad(grads, *x, out.len(), |dx| {
                        kernels::instance_norm_backward(out, inv_std, plane, g, dx)
                    });
                }
            }
            Op::PlaneAffine { x, gamma, beta } => {
                let xs = self.value(*x).data();
                let gs = self.value(*gamma).data();
                let plane = xs.len() / gs.len();
                if self.wants(*x) {
                    with_grad(grads, *x, xs.len(), |dx| {
                        for (p, &gm) in gs.iter().enumerate() {
                            for k in p * plane..(p + 1) * plane {
                                dx[k] += g[k] * gm;
                            }
                        }
                    });
                }
                if self.wants(*gamma) {
                    with_grad(grads, *gamma, gs.len(), |dg| {
                        for (p, acc) in dg.iter_mut().enumerate() {
                            let r = p * plane..(p + 1) * plane;
                            *acc += g[r.clone()].iter().zip(&xs[r]).map(|(&a, &b)| a * b).sum::<T>();
                        }
                    });
                }
                if self.wants(*beta) {
                    with_grad(grads, *beta, gs.len(), |db| {
                        for (p, acc) in db.iter_mut().enumerate() {
                            *acc += g[p * plane..(p + 1) * plane].iter().copied().sum::<T>();
                        }
                    });
                }
            }
            Op::Act { x, kind } => {
                if self.wants(*x) {
                    let xs = self.value(*x).data();
                    with_grad(grads, *x, xs.len(), |dx| {
                        for k in 0..xs.len() {
                            let d = match kind {
                                Activation::Relu => {
                                    if xs[k] > T::zero() {
                                        T::one()
                                    } else {
                                        T::zero()
                                    }
                                }
                                Activation::LeakyRelu => {
                                    if xs[k] > T::zero() {
                                        T::one()
                                    } else {
                                        T::of(LEAKY_SLOPE)
                                    }
                                }
                                Activation::Sigmoid => out[k] * (T::one() - out[k]),
                                Activation::Tanh => T::one() - out[k] * out[k],
                            };
                            dx[k] += g[k] * d;
                        }
                    });
                }
            }
            Op::Dense { x, w, b } => {
                let (n, din) = self.value(*x).dims2("dense").expect("checked in forward");
                let dout = self.shape(*b)[0];
                if self.wants(*x) {
                    with_grad(grads, *x, n * din, |dx| {
                        T::gemm(n, dout, din, T::one(), g, (dout, 1), self.value(*w).data(), (din, 1), T::one(), dx, (din, 1));
                    });
                }
                if self.wants(*w) {
                    with_grad(grads, *w, dout * din, |dw| {
                        T::gemm(dout, n, din, T::one(), g, (1, dout), self.value(*x).data(), (din, 1), T::one(), dw, (din, 1));
                    });
                }
                if self.wants(*b) {
                    with_grad(grads, *b, dout, |db| {
                        for row in g.chunks_exact(dout) {
                            for (acc, &v) in db.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                    });
                }
            }
            Op::Upsample2x(x) => {
                if self.wants(*x) {
                    let (_, _, h, w) = self.value(*x).dims4("upsample2x").expect("checked in forward");
                    with_grad(grads, *x, out.len() / 4, |dx| kernels::upsample2x_backward(g, h, w, dx));
                }
            }
            Op::Highpass(x) => {
                if self.wants(*x) {
                    let (_, _, h, w) = self.value(*x).dims4("highpass3x3").expect("checked in forward");
                    with_grad(grads, *x, out.len(), |dx| kernels::highpass_backward(g, h, w, dx));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    add_into(grads, *a, g);
                }
                if self.wants(*b) {
                    add_into(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(grads, *a, g);
                }
                if self.wants(*b) {
                    with_grad(grads, *b, g.len(), |db| {
                        for (acc, &v) in db.iter_mut().zip(g) {
                            *acc -= v;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if self.wants(this) {
                        let o = self.value(other).data();
                        with_grad(grads, this, g.len(), |d| {
                            for k in 0..g.len() {
                                d[k] += g[k] * o[k];
                            }
                        });
                    }
                }
            }
            Op::Scale(x, f) => {
                if self.wants(*x) {
                    with_grad(grads, *x, g.len(), |dx| {
                        for (acc, &v) in dx.iter_mut().zip(g) {
                            *acc += v * *f;
                        }
                    });
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if self.wants(*x) {
                    add_into(grads, *x, g);
                }
            }
            Op::Concat(xs) => {
                let (n, _, h, w) = node.value.dims4("concat_channels").expect("checked in forward");
                let plane = h * w;
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &x in xs {
                    let c = self.shape(x)[1];
                    if self.wants(x) {
                        with_grad(grads, x, n * c * plane, |dx| {
                            for b in 0..n {
                                let src = &g[(b * total + offset) * plane..(b * total + offset + c) * plane];
                                for (acc, &v) in dx[b * c * plane..(b + 1) * c * plane].iter_mut().zip(src) {
                                    *acc += v;
                                }
                            }
                        });
                    }
                    offset += c;
                }
            }
            Op::GlobalAvgPool(x) => {
                if self.wants(*x) {
                    let len = self.value(*x).numel();
                    let plane = len / g.len();
                    let inv = T::of(1.0 / plane as f64);
                    with_grad(grads, *x, len, |dx| {
                        for (p, &gv) in g.iter().enumerate() {
                            for acc in &mut dx[p * plane..(p + 1) * plane] {
                                *acc += gv * inv;
                            }
                        }
                    });
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                if self.wants(*x) {
                    let len = self.value(*x).numel();
                    let scale = if matches!(node.op, Op::Mean(_)) {
                        g[0] / T::of(len as f64)
                    } else {
                        g[0]
                    };
                    with_grad(grads, *x, len, |dx| {
                        for acc in dx.iter_mut() {
                            *acc += scale;
                        }
                    });
                }
            }
            Op::MeanAbsDiff(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let scale = g[0] / T::of(av.len() as f64);
                let sign: Vec<T> = av.iter().zip(bv).map(|(&x, &y)| sign(x - y) * scale).collect();
                if self.wants(*a) {
                    add_into(grads, *a, &sign);
                }
                if self.wants(*b) {
                    with_grad(grads, *b, sign.len(), |db| {
                        for (acc, &v) in db.iter_mut().zip(&sign) {
                            *acc -= v;
                        }
                    });
                }
            }
            Op::GatherRows { table, rows } => {
                if self.wants(*table) {
                    let e = self.shape(*table)[1];
                    with_grad(grads, *table, self.value(*table).numel(), |dt| {
                        for (k, &r) in rows.iter().enumerate() {
                            for j in 0..e {
                                dt[r * e + j] += g[k * e + j];
                            }
                        }
                    });
                }
            }
            Op::BroadcastPlanes(x) => {
                if self.wants(*x) {
                    let len = self.value(*x).numel();
                    let plane = g.len() / len;
                    with_grad(grads, *x, len, |dx| {
                        for (k, acc) in dx.iter_mut().enumerate() {
                            *acc += g[k * plane..(k + 1) * plane].iter().copied().sum::<T>();
                        }
                    });
                }
            }
            Op::Bce { p, target } => {
                if self.wants(*p) {
                    let ps = self.value(*p).data();
                    let scale = g[0] / T::of(ps.len() as f64);
                    let t = *target;
                    with_grad(grads, *p, ps.len(), |dp| {
                        for (acc, &v) in dp.iter_mut().zip(ps) {
                            let c = clamp_prob(v);
                            // Outside the clamp window the loss is flat.
                            if c == v {
                                *acc += scale * (-(t / v) + (T::one() - t) / (T::one() - v));
                            }
                        }
                    });
                }
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

fn clamp_prob<T: Element>(p: T) -> T {
    let lo = T::of(BCE_CLAMP);
    p.max(lo).min(T::one() - lo)
}

fn sign<T: Element>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn with_grad<T: Element>(grads: &mut [Option<Vec<T>>], v: Var, len: usize, f: impl FnOnce(&mut [T])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
    f(slot);
}

fn add_into<T: Element>(grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}
