//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Learnable weights
//! live in a [`ParamStore`] and enter the tape through [`Tape::param`], which
//! records the parameter id so that [`Tape::backward`] can report gradients
//! per parameter. The tape never mutates the store, so independent tapes can
//! run on separate threads against one shared store; accumulation into the
//! stored gradients is an explicit, single-writer step
//! ([`ParamStore::accumulate`]).

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fft;
use crate::fusion::CountSketch;
use crate::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

/// Norms below this are treated as zero by the normalizing ops.
pub const NORM_FLOOR: f64 = 1e-12;

pub type ParamId = usize;

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        let id = self.params.len();
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Adds `scale * g` into the stored gradient of every parameter in `grads`.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (&id, g) in &grads.params {
            let target = &mut self.params[id].grad;
            if scale == 1.0 {
                target.add_assign(g);
            } else {
                for (t, v) in target.data_mut().iter_mut().zip(g.data()) {
                    *t += scale * v;
                }
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        out_channels: usize,
        cols: Vec<f64>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    /// `a (m x k) * b (k x n)`, or `a * b^T` when `b_transposed`.
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        b_transposed: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        input: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Sum(Var),
    /// `(rows x cols) -> (cols x rows)`
    Transpose {
        input: Var,
        rows: usize,
        cols: usize,
    },
    /// `(rows x cols) -> rows`
    SumRows {
        input: Var,
        cols: usize,
    },
    /// Multiplies row `r` of a matrix by `scale[r]`.
    ScaleRows {
        matrix: Var,
        scale: Var,
        cols: usize,
    },
    Reshape(Var),
    L2Normalize {
        input: Var,
        norm: f64,
    },
    L2NormalizeRows {
        input: Var,
        cols: usize,
        norms: Vec<f64>,
    },
    CountSketch {
        input: Var,
        sketch: Arc<CountSketch>,
    },
    CircConv(Var, Var),
    SignedSqrt {
        input: Var,
        eps: f64,
    },
    Distance(Var, Var),
    Bce {
        score: Var,
        target: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Probabilities are clamped into `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-12;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient of the differentiated scalar with respect to `var`.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.nodes.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(&id, g)| (id, g))
    }
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Brings a stored parameter onto the tape; repeated calls return the same variable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(kernel);
        if x.rank() != 3 || w.rank() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?}, kernel {:?}", x.shape(), w.shape()),
            ));
        }
        let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (o, kc, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if kc != c || kh != kw {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?}, kernel {:?}", x.shape(), w.shape()),
            ));
        }
        if stride == 0 || kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh} stride {stride} pad {pad} on {h}x{wd}"),
            ));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [o] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {o} outputs", self.value(b).shape()),
                ));
            }
        }
        let geom = ConvGeometry {
            channels: c,
            height: h,
            width: wd,
            kernel: kh,
            stride,
            pad,
        };
        let (out, cols) = kernels::conv2d_forward(
            x.data(),
            w.data(),
            bias.map(|b| self.value(b).data()),
            o,
            &geom,
        );
        let value = Tensor::new(&[o, geom.out_height(), geom.out_width()], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                out_channels: o,
                cols,
            },
        ))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        if x.rank() != 1 || w.rank() != 2 || w.shape()[1] != x.len() {
            return Err(Error::shape(
                "linear",
                format!("input {:?}, weights {:?}", x.shape(), w.shape()),
            ));
        }
        let (m, n) = (w.shape()[0], w.shape()[1]);
        let mut out = match bias {
            Some(b) => {
                let b = self.value(b);
                if b.shape() != [m] {
                    return Err(Error::shape("linear", format!("bias {:?}", b.shape())));
                }
                b.data().to_vec()
            }
            None => vec![0.0; m],
        };
        kernels::gemm(m, n, 1, w.data(), false, x.data(), false, 1.0, &mut out);
        Ok(self.push(
            Tensor::vector(out),
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (kb, n) = if b_transposed {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        if k != kb {
            return Err(Error::shape(
                "matmul",
                format!(
                    "{:?} x {:?} (transposed: {b_transposed})",
                    av.shape(),
                    bv.shape()
                ),
            ));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            av.data(),
            false,
            bv.data(),
            b_transposed,
            0.0,
            &mut out,
        );
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                b_transposed,
            },
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T`
    pub fn matmul_transposed(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let bv = self.value(b);
        let mut v = self.value(a).clone();
        for (x, y) in v.data_mut().iter_mut().zip(bv.data()) {
            *x -= y;
        }
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).map(|x| x * factor);
        self.push(v, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        let v = self.value(a).map(|x| x + offset);
        self.push(v, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        check_finite(self.value(a), "relu input")?;
        let v = self.value(a).map(|x| x.max(0.0));
        Ok(self.push(v, Op::Relu(a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        check_finite(self.value(a), "sigmoid input")?;
        let v = self.value(a).map(sigmoid);
        Ok(self.push(v, Op::Sigmoid(a)))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        check_finite(x, "softmax input")?;
        if axis >= x.rank() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} of {:?}", x.shape()),
            ));
        }
        let outer: usize = x.shape()[..axis].iter().product();
        let len = x.shape()[axis];
        let inner: usize = x.shape()[axis + 1..].iter().product();
        let mut out = x.clone();
        let data = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len)
                    .map(|j| data[at(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (data[at(j)] - max).exp();
                    data[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    data[at(j)] /= total;
                }
            }
        }
        Ok(self.push(
            out,
            Op::Softmax {
                input: a,
                outer,
                len,
                inner,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a))
    }

    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(Error::shape("sum_rows", format!("{:?}", x.shape())));
        }
        let cols = x.shape()[1];
        let sums: Vec<f64> = if cols == 0 {
            vec![0.0; x.shape()[0]]
        } else {
            x.data().chunks(cols).map(|r| r.iter().sum()).collect()
        };
        Ok(self.push(Tensor::vector(sums), Op::SumRows { input: a, cols }))
    }

    pub fn scale_rows(&mut self, matrix: Var, scale: Var) -> Result<Var> {
        let m = self.value(matrix);
        let s = self.value(scale);
        if m.rank() != 2 || s.shape() != [m.shape()[0]] {
            return Err(Error::shape(
                "scale_rows",
                format!("{:?} by {:?}", m.shape(), s.shape()),
            ));
        }
        let cols = m.shape()[1];
        let mut out = m.clone();
        for (r, row) in out.data_mut().chunks_mut(cols.max(1)).enumerate() {
            let f = s.data()[r];
            row.iter_mut().for_each(|v| *v *= f);
        }
        Ok(self.push(
            out,
            Op::ScaleRows {
                matrix,
                scale,
                cols,
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", x.shape())));
        }
        let (rows, cols) = (x.shape()[0], x.shape()[1]);
        let v = Tensor::new(&[cols, rows], transposed(x.data(), rows, cols))?;
        Ok(self.push(
            v,
            Op::Transpose {
                input: a,
                rows,
                cols,
            },
        ))
    }

    /// Unit-norm rescaling; inputs with norm below [`NORM_FLOOR`] map to zero.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let norm = x.norm();
        let v = if norm < NORM_FLOOR {
            Tensor::zeros(x.shape())
        } else {
            x.map(|v| v / norm)
        };
        self.push(v, Op::L2Normalize { input: a, norm })
    }

    /// Row-wise [`Tape::l2_normalize`] of a matrix.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(Error::shape(
                "l2_normalize_rows",
                format!("{:?}", x.shape()),
            ));
        }
        let cols = x.shape()[1];
        let mut out = x.clone();
        let mut norms = Vec::with_capacity(x.shape()[0]);
        for row in out.data_mut().chunks_mut(cols.max(1)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < NORM_FLOOR {
                row.fill(0.0);
            } else {
                row.iter_mut().for_each(|v| *v /= norm);
            }
            norms.push(norm);
        }
        Ok(self.push(
            out,
            Op::L2NormalizeRows {
                input: a,
                cols,
                norms,
            },
        ))
    }

    pub fn count_sketch(&mut self, a: Var, sketch: &Arc<CountSketch>) -> Result<Var> {
        let out = sketch.apply(self.value(a).data())?;
        Ok(self.push(
            Tensor::vector(out),
            Op::CountSketch {
                input: a,
                sketch: Arc::clone(sketch),
            },
        ))
    }

    /// Circular convolution of two equal-length vectors via FFT.
    pub fn circular_convolve(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("circular_convolve", a, b)?;
        let out = fft::circular_convolve(self.value(a).data(), self.value(b).data())?;
        Ok(self.push(Tensor::vector(out), Op::CircConv(a, b)))
    }

    /// `sign(x) * (sqrt(|x| + eps) - sqrt(eps))`, a smooth signed square root.
    pub fn signed_sqrt(&mut self, a: Var, eps: f64) -> Var {
        let root_eps = eps.sqrt();
        let v = self
            .value(a)
            .map(|x| x.signum() * ((x.abs() + eps).sqrt() - root_eps));
        self.push(v, Op::SignedSqrt { input: a, eps })
    }

    /// Euclidean distance between two equal-shape tensors (a scalar).
    pub fn distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("distance", a, b)?;
        let d = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        Ok(self.push(Tensor::scalar(d), Op::Distance(a, b)))
    }

    /// Binary cross-entropy of a single probability against a 0/1 target.
    pub fn bce(&mut self, score: Var, target: f64) -> Result<Var> {
        let s = self.value(score);
        if s.len() != 1 {
            return Err(Error::shape("bce", format!("{:?}", s.shape())));
        }
        let p = s.item().clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        let loss = -(target * p.ln() + (1.0 - target) * (1.0 - p).ln());
        Ok(self.push(Tensor::scalar(loss), Op::Bce { score, target }))
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got {:?}", out.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));
        let mut params = BTreeMap::new();

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads, &mut params)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn propagate(
        &self,
        node: &Node,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        params: &mut BTreeMap<ParamId, Tensor>,
    ) -> Result<()> {
        let mut send = |v: Var, delta: Tensor| match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => match params.get_mut(id) {
                Some(acc) => acc.add_assign(g),
                None => {
                    params.insert(*id, g.clone());
                }
            },
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                out_channels,
                cols,
            } => {
                let w = self.value(*kernel);
                let cg = kernels::conv2d_backward(gd, cols, w.data(), *out_channels, geom);
                send(*input, Tensor::new(self.value(*input).shape(), cg.input)?);
                send(*kernel, Tensor::new(w.shape(), cg.kernel)?);
                if let Some(b) = bias {
                    send(*b, Tensor::vector(cg.bias));
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (m, n) = (w.shape()[0], w.shape()[1]);
                let mut gw = vec![0.0; m * n];
                kernels::gemm(m, 1, n, gd, false, x.data(), false, 0.0, &mut gw);
                let mut gx = vec![0.0; n];
                kernels::gemm(1, m, n, gd, false, w.data(), false, 0.0, &mut gx);
                send(*input, Tensor::vector(gx));
                send(*weight, Tensor::new(w.shape(), gw)?);
                if let Some(b) = bias {
                    send(*b, g.clone());
                }
            }
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                b_transposed,
            } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (*m, *k, *n);
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                if *b_transposed {
                    // C = A B^T with B stored n x k
                    kernels::gemm(m, n, k, gd, false, bv.data(), false, 0.0, &mut ga);
                    kernels::gemm(n, m, k, gd, true, av.data(), false, 0.0, &mut gb);
                } else {
                    kernels::gemm(m, n, k, gd, false, bv.data(), true, 0.0, &mut ga);
                    kernels::gemm(k, m, n, av.data(), true, gd, false, 0.0, &mut gb);
                }
                send(*a, Tensor::new(av.shape(), ga)?);
                send(*b, Tensor::new(bv.shape(), gb)?);
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|v| -v));
            }
            Op::Scale(a, f) => send(*a, g.map(|v| v * f)),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::Relu(a) => {
                let x = self.value(*a);
                let data = gd
                    .iter()
                    .zip(x.data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                send(*a, Tensor::new(x.shape(), data)?);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let data = gd
                    .iter()
                    .zip(y.data())
                    .map(|(gv, yv)| gv * yv * (1.0 - yv))
                    .collect();
                send(*a, Tensor::new(y.shape(), data)?);
            }
            Op::Softmax {
                input,
                outer,
                len,
                inner,
            } => {
                let y = node.value.data();
                let mut gx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..*len).map(|j| gd[at(j)] * y[at(j)]).sum();
                        for j in 0..*len {
                            gx[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                send(*input, Tensor::new(node.value.shape(), gx)?);
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape();
                send(*a, Tensor::full(shape, g.item()));
            }
            Op::SumRows { input, cols } => {
                let shape = self.value(*input).shape();
                let mut gx = Vec::with_capacity(shape[0] * cols);
                for gv in gd {
                    gx.extend(std::iter::repeat_n(*gv, *cols));
                }
                send(*input, Tensor::new(shape, gx)?);
            }
            Op::ScaleRows {
                matrix,
                scale,
                cols,
            } => {
                let m = self.value(*matrix);
                let s = self.value(*scale);
                let cols = (*cols).max(1);
                let mut gm = gd.to_vec();
                let mut gs = vec![0.0; s.len()];
                for (r, (grow, mrow)) in gm.chunks_mut(cols).zip(m.data().chunks(cols)).enumerate()
                {
                    gs[r] = grow.iter().zip(mrow).map(|(a, b)| a * b).sum();
                    grow.iter_mut().for_each(|v| *v *= s.data()[r]);
                }
                send(*matrix, Tensor::new(m.shape(), gm)?);
                send(*scale, Tensor::vector(gs));
            }
            Op::Transpose { input, rows, cols } => {
                send(
                    *input,
                    Tensor::new(&[*rows, *cols], transposed(gd, *cols, *rows))?,
                );
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape();
                send(*a, g.clone().reshape(shape)?);
            }
            Op::L2Normalize { input, norm } => {
                let shape = self.value(*input).shape();
                if *norm < NORM_FLOOR {
                    send(*input, Tensor::zeros(shape));
                } else {
                    let y = node.value.data();
                    let dot: f64 = gd.iter().zip(y).map(|(a, b)| a * b).sum();
                    let gx = gd
                        .iter()
                        .zip(y)
                        .map(|(gv, yv)| (gv - yv * dot) / norm)
                        .collect();
                    send(*input, Tensor::new(shape, gx)?);
                }
            }
            Op::L2NormalizeRows { input, cols, norms } => {
                let cols = (*cols).max(1);
                let y = node.value.data();
                let mut gx = vec![0.0; y.len()];
                for (r, norm) in norms.iter().enumerate() {
                    if *norm < NORM_FLOOR {
                        continue;
                    }
                    let span = r * cols..(r + 1) * cols;
                    let (grow, yrow) = (&gd[span.clone()], &y[span.clone()]);
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (dst, (gv, yv)) in gx[span].iter_mut().zip(grow.iter().zip(yrow)) {
                        *dst = (gv - yv * dot) / norm;
                    }
                }
                send(*input, Tensor::new(node.value.shape(), gx)?);
            }
            Op::CountSketch { input, sketch } => {
                let gx = sketch.apply_transpose(gd);
                send(*input, Tensor::new(self.value(*input).shape(), gx)?);
            }
            Op::CircConv(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let ga = fft::circular_correlate(gd, bv.data())?;
                let gb = fft::circular_correlate(gd, av.data())?;
                send(*a, Tensor::new(av.shape(), ga)?);
                send(*b, Tensor::new(bv.shape(), gb)?);
            }
            Op::SignedSqrt { input, eps } => {
                let x = self.value(*input);
                let data = gd
                    .iter()
                    .zip(x.data())
                    .map(|(gv, xv)| gv * 0.5 / (xv.abs() + eps).sqrt())
                    .collect();
                send(*input, Tensor::new(x.shape(), data)?);
            }
            Op::Distance(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let d = node.value.item();
                let gscale = if d > 0.0 { g.item() / d } else { 0.0 };
                let diff: Vec<f64> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(x, y)| (x - y) * gscale)
                    .collect();
                send(
                    *b,
                    Tensor::new(bv.shape(), diff.iter().map(|v| -v).collect())?,
                );
                send(*a, Tensor::new(av.shape(), diff)?);
            }
            Op::Bce { score, target } => {
                let s = self.value(*score).item();
                let d = if s <= BCE_CLAMP || s >= 1.0 - BCE_CLAMP {
                    0.0
                } else {
                    -target / s + (1.0 - target) / (1.0 - s)
                };
                send(
                    *score,
                    Tensor::new(self.value(*score).shape(), vec![g.item() * d])?,
                );
            }
        }
        Ok(())
    }
}

fn transposed(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
