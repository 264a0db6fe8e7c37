//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles; calling
//! [`Tape::backward`] on a scalar output walks the recorded ops in reverse
//! and accumulates gradients for every node that requires them. Nodes are
//! append-only, so reverse id order is a valid topological order.

mod gradcheck;
mod kernels;
mod layers;

pub use gradcheck::{finite_diff_check, gradcheck_suite, GradCheckEntry, GradCheckReport};
pub use kernels::{power_iterate, PadMode};
pub use layers::{norm_groups, LayerSpec};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use std::sync::Arc;

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op<F: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, F),
    Neg(Var),
    Abs(Var),
    /// Slope 0 gives plain relu.
    LeakyRelu(Var, F),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    /// Identity forward whose backward drops the gradient entirely. The
    /// source node is irrelevant to backward, so it is not stored.
    Detach,
    /// Forward took the value of the quantized node; backward routes the
    /// entire incoming gradient to `grad_dst` and none to the value source.
    StraightThrough { grad_dst: Var },
    /// out[n, :, h, w] = table[indices[(n*H+h)*W+w], :]
    GatherNchw {
        table: Var,
        indices: Arc<Vec<usize>>,
        n: usize,
        h: usize,
        w: usize,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: PadMode,
    },
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        /// Saved normalized activations and per-(sample, group) 1/sqrt(var+eps).
        xhat: Vec<F>,
        invstd: Vec<F>,
    },
    NearestUp { input: Var, factor: usize },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    /// Per-sample channel Gram matrix normalized by h*w.
    Gram(Var),
    /// Weight divided by its leading singular value estimated with the
    /// stored power-iteration vectors (treated as constants in backward).
    SpectralNorm {
        weight: Var,
        u: Vec<F>,
        v: Vec<F>,
        sigma: F,
    },
}

struct Node<F: Real> {
    value: Tensor<F>,
    requires_grad: bool,
    op: Op<F>,
}

pub struct Tape<F: Real = f32> {
    nodes: Vec<Node<F>>,
}

/// Gradients keyed by node id, produced by [`Tape::backward`].
pub struct Gradients<F: Real> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of the backward output with respect to `v`, if any path
    /// required it. Detached or unused inputs yield `None`.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but materializes zeros of the given shape for
    /// absent entries.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<F> {
        match self.get(v) {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(|g| g.is_none())
    }
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input: participates in backward.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Non-trainable input: backward never produces a gradient for it.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn scalar(&mut self, v: F) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, requires_grad: bool, op: Op<F>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, ctx: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                ctx,
                format!("{:?}", self.shape(a)),
                format!("{:?}", self.shape(b)),
            ));
        }
        Ok(())
    }

    // ----- elementwise -----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.req(a) || self.req(b);
        Ok(self.push(data, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.req(a) || self.req(b);
        Ok(self.push(data, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.req(a) || self.req(b);
        Ok(self.push(data, rg, Op::Mul(a, b)))
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        let data = map(self.value(a), |x| x + c);
        let rg = self.req(a);
        self.push(data, rg, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: F) -> Var {
        let data = map(self.value(a), |x| x * c);
        let rg = self.req(a);
        self.push(data, rg, Op::MulScalar(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let data = map(self.value(a), |x| -x);
        let rg = self.req(a);
        self.push(data, rg, Op::Neg(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let data = map(self.value(a), |x| x.abs());
        let rg = self.req(a);
        self.push(data, rg, Op::Abs(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: F) -> Var {
        let data = map(self.value(a), |x| if x >= F::ZERO { x } else { slope * x });
        let rg = self.req(a);
        self.push(data, rg, Op::LeakyRelu(a, slope))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, F::ZERO)
    }

    // ----- reductions -----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().fold(F::ZERO, |acc, &v| acc + v);
        let rg = self.req(a);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = F::from_usize(self.value(a).numel().max(1));
        let s = self.value(a).iter().fold(F::ZERO, |acc, &v| acc + v);
        let rg = self.req(a);
        self.push(Tensor::scalar(s / n), rg, Op::Mean(a))
    }

    // ----- structure -----

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.req(a);
        Ok(self.push(value, rg, Op::Reshape(a)))
    }

    /// Identity forward, blocks gradient flow entirely.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, false, Op::Detach)
    }

    /// Quantization straight-through estimator: forward value is
    /// `value_src`'s data verbatim; backward copies the incoming gradient to
    /// `grad_dst` unchanged and sends none to `value_src`.
    pub fn straight_through(&mut self, value_src: Var, grad_dst: Var) -> Result<Var> {
        self.same_shape("straight_through", value_src, grad_dst)?;
        let value = self.value(value_src).clone();
        let rg = self.req(grad_dst);
        Ok(self.push(value, rg, Op::StraightThrough { grad_dst }))
    }

    /// Row lookup into `table` ([K, C]) laid out as an NCHW map; `indices`
    /// has length n*h*w in (n, h, w) order. Backward scatter-adds into the
    /// table rows, which is how codebook entries receive gradients.
    pub fn gather_nchw(
        &mut self,
        table: Var,
        indices: Arc<Vec<usize>>,
        n: usize,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let tshape = self.shape(table);
        if tshape.len() != 2 {
            return Err(Error::shape("gather_nchw", "[K, C] table", format!("{tshape:?}")));
        }
        let (k, c) = (tshape[0], tshape[1]);
        if indices.len() != n * h * w {
            return Err(Error::shape("gather_nchw", n * h * w, indices.len()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(Error::Input(format!(
                "gather_nchw: index {bad} out of range for table with {k} rows"
            )));
        }
        let value = kernels::gather_nchw_forward(self.value(table), &indices, n, c, h, w);
        let rg = self.req(table);
        Ok(self.push(value, rg, Op::GatherNchw { table, indices, n, h, w }))
    }

    // ----- layers -----

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: PadMode,
    ) -> Result<Var> {
        let value = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let rg = self.req(input) || self.req(weight) || bias.map(|b| self.req(b)).unwrap_or(false);
        Ok(self.push(value, rg, Op::Conv2d { input, weight, bias, stride, pad }))
    }

    pub fn group_norm(&mut self, input: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let (value, xhat, invstd) = kernels::group_norm_forward(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            groups,
            F::from_f64(eps),
        )?;
        let rg = self.req(input) || self.req(gamma) || self.req(beta);
        Ok(self.push(value, rg, Op::GroupNorm { input, gamma, beta, groups, xhat, invstd }))
    }

    pub fn nearest_upsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        let value = kernels::nearest_up_forward(self.value(input), factor)?;
        let rg = self.req(input);
        Ok(self.push(value, rg, Op::NearestUp { input, factor }))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let value = kernels::linear_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
        )?;
        let rg = self.req(input) || self.req(weight) || bias.map(|b| self.req(b)).unwrap_or(false);
        Ok(self.push(value, rg, Op::Linear { input, weight, bias }))
    }

    pub fn gram(&mut self, input: Var) -> Result<Var> {
        let value = kernels::gram_forward(self.value(input))?;
        let rg = self.req(input);
        Ok(self.push(value, rg, Op::Gram(input)))
    }

    /// Spectral weight normalization with externally maintained power
    /// iteration vectors; `u` has len rows, `v` len cols of the flattened
    /// [rows, numel/rows] weight view. u and v are constants to backward.
    pub fn spectral_norm(&mut self, weight: Var, u: &[F], v: &[F]) -> Result<Var> {
        let (value, sigma) = kernels::spectral_norm_forward(self.value(weight), u, v)?;
        let rg = self.req(weight);
        Ok(self.push(
            value,
            rg,
            Op::SpectralNorm { weight, u: u.to_vec(), v: v.to_vec(), sigma },
        ))
    }

    // ----- composites -----

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let ad = self.abs(d);
        Ok(self.mean(ad))
    }

    // ----- backward -----

    /// Reverse pass from a scalar output. Returns a gradient per node that
    /// both requires a gradient and lies on a path to `out`.
    pub fn backward(&self, out: Var) -> Result<Gradients<F>> {
        let out_shape = self.shape(out);
        if !out_shape.is_empty() && out_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarBackward(format!("{out_shape:?}")));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        if self.req(out) {
            grads[out.0] = Some(vec![F::ONE; 1]);
        }
        for id in (0..=out.0).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let go = grads[id].take().unwrap();
            self.accumulate(id, &go, &mut grads);
            // Leaf gradients are results; interior gradients were consumed.
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(go);
            } else if self.is_result_node(id) {
                grads[id] = Some(go);
            }
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.map(|data| {
                    Tensor::new(self.nodes[id].value.shape().to_vec(), data)
                        .expect("gradient shape matches node shape")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// Interior nodes keep their gradient too; memory at this scale is
    /// cheap and tests inspect intermediate gradients.
    fn is_result_node(&self, _id: usize) -> bool {
        true
    }

    fn accumulate(&self, id: usize, go: &[F], grads: &mut [Option<Vec<F>>]) {
        let add_into = |grads: &mut [Option<Vec<F>>], v: Var, delta: Vec<F>| {
            match &mut grads[v.0] {
                Some(g) => {
                    for (gi, di) in g.iter_mut().zip(delta) {
                        *gi += di;
                    }
                }
                slot => *slot = Some(delta),
            }
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.req(*a) {
                    add_into(grads, *a, go.to_vec());
                }
                if self.req(*b) {
                    add_into(grads, *b, go.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.req(*a) {
                    add_into(grads, *a, go.to_vec());
                }
                if self.req(*b) {
                    add_into(grads, *b, go.iter().map(|&g| -g).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.req(*a) {
                    let bv = self.value(*b).data();
                    add_into(grads, *a, go.iter().zip(bv).map(|(&g, &x)| g * x).collect());
                }
                if self.req(*b) {
                    let av = self.value(*a).data();
                    add_into(grads, *b, go.iter().zip(av).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::AddScalar(a) => {
                if self.req(*a) {
                    add_into(grads, *a, go.to_vec());
                }
            }
            Op::MulScalar(a, c) => {
                if self.req(*a) {
                    add_into(grads, *a, go.iter().map(|&g| g * *c).collect());
                }
            }
            Op::Neg(a) => {
                if self.req(*a) {
                    add_into(grads, *a, go.iter().map(|&g| -g).collect());
                }
            }
            Op::Abs(a) => {
                if self.req(*a) {
                    let av = self.value(*a).data();
                    let d = go
                        .iter()
                        .zip(av)
                        .map(|(&g, &x)| {
                            if x > F::ZERO {
                                g
                            } else if x < F::ZERO {
                                -g
                            } else {
                                F::ZERO
                            }
                        })
                        .collect();
                    add_into(grads, *a, d);
                }
            }
            Op::LeakyRelu(a, slope) => {
                if self.req(*a) {
                    let av = self.value(*a).data();
                    let d = go
                        .iter()
                        .zip(av)
                        .map(|(&g, &x)| if x >= F::ZERO { g } else { g * *slope })
                        .collect();
                    add_into(grads, *a, d);
                }
            }
            Op::Sum(a) => {
                if self.req(*a) {
                    let n = self.value(*a).numel();
                    add_into(grads, *a, vec![go[0]; n]);
                }
            }
            Op::Mean(a) => {
                if self.req(*a) {
                    let n = self.value(*a).numel().max(1);
                    let g = go[0] / F::from_usize(n);
                    add_into(grads, *a, vec![g; n]);
                }
            }
            Op::Reshape(a) => {
                if self.req(*a) {
                    add_into(grads, *a, go.to_vec());
                }
            }
            Op::Detach => {}
            Op::StraightThrough { grad_dst, .. } => {
                if self.req(*grad_dst) {
                    add_into(grads, *grad_dst, go.to_vec());
                }
            }
            Op::GatherNchw { table, indices, n, h, w } => {
                if self.req(*table) {
                    let tshape = self.shape(*table);
                    let (k, c) = (tshape[0], tshape[1]);
                    add_into(
                        grads,
                        *table,
                        kernels::gather_nchw_backward(go, indices, k, c, *n, *h, *w),
                    );
                }
            }
            Op::Conv2d { input, weight, bias, stride, pad } => {
                let (di, dw, db) = kernels::conv2d_backward(
                    go,
                    self.value(*input),
                    self.value(*weight),
                    *stride,
                    *pad,
                    self.req(*input),
                    self.req(*weight),
                    bias.map(|b| self.req(b)).unwrap_or(false),
                );
                if let Some(di) = di {
                    add_into(grads, *input, di);
                }
                if let Some(dw) = dw {
                    add_into(grads, *weight, dw);
                }
                if let (Some(db), Some(b)) = (db, bias) {
                    add_into(grads, *b, db);
                }
            }
            Op::GroupNorm { input, gamma, beta, groups, xhat, invstd } => {
                let (di, dg, db) = kernels::group_norm_backward(
                    go,
                    self.value(*input).shape(),
                    self.value(*gamma),
                    xhat,
                    invstd,
                    *groups,
                    self.req(*input),
                    self.req(*gamma),
                    self.req(*beta),
                );
                if let Some(di) = di {
                    add_into(grads, *input, di);
                }
                if let Some(dg) = dg {
                    add_into(grads, *gamma, dg);
                }
                if let Some(db) = db {
                    add_into(grads, *beta, db);
                }
            }
            Op::NearestUp { input, factor } => {
                if self.req(*input) {
                    add_into(
                        grads,
                        *input,
                        kernels::nearest_up_backward(go, self.value(*input).shape(), *factor),
                    );
                }
            }
            Op::Linear { input, weight, bias } => {
                let (di, dw, db) = kernels::linear_backward(
                    go,
                    self.value(*input),
                    self.value(*weight),
                    self.req(*input),
                    self.req(*weight),
                    bias.map(|b| self.req(b)).unwrap_or(false),
                );
                if let Some(di) = di {
                    add_into(grads, *input, di);
                }
                if let Some(dw) = dw {
                    add_into(grads, *weight, dw);
                }
                if let (Some(db), Some(b)) = (db, bias) {
                    add_into(grads, *b, db);
                }
            }
            Op::Gram(input) => {
                if self.req(*input) {
                    add_into(grads, *input, kernels::gram_backward(go, self.value(*input)));
                }
            }
            Op::SpectralNorm { weight, u, v, sigma } => {
                if self.req(*weight) {
                    add_into(
                        grads,
                        *weight,
                        kernels::spectral_norm_backward(go, self.value(id_var(id)).data(), u, v, *sigma),
                    );
                }
            }
        }
    }
}

fn id_var(id: usize) -> Var {
    Var(id)
}


fn map<F: Real>(t: &Tensor<F>, f: impl Fn(F) -> F) -> Tensor<F> {
    Tensor::new(t.shape().to_vec(), t.iter().map(|&v| f(v)).collect()).expect("same numel")
}

fn zip_map<F: Real>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    Tensor::new(
        a.shape().to_vec(),
        a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("same numel")
}
