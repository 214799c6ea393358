//! Reverse-mode automatic differentiation over a closed op set.
//!
//! A [`Tape`] records one forward computation as a topologically ordered list
//! of nodes; [`Tape::backward`] walks that list in reverse and accumulates
//! gradients for every parameter touched. Parameters live outside the tape in
//! a [`Params`] store so one set of weights can serve many tapes (one per
//! sample) and so optimizer state can be kept aligned by parameter index.

use super::kernels::{
    avg_pool2d_backward, avg_pool2d_forward, conv2d_backward_input, conv2d_backward_weights,
    conv2d_forward, conv2d_out_dims, dense_backward, dense_forward, max_pool2d_backward,
    max_pool2d_forward, ConvGeom,
};
use super::tensor::{ShapeError, Tensor};
use crate::scalar::Scalar;

/// Handle to a named parameter in a [`Params`] store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered parameter store.
#[derive(Debug, Clone)]
pub struct Params<S> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
}

impl<S: Scalar> Params<S> {
    pub fn new() -> Self {
        Params {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Register a parameter; names must be unique (they key the checkpoint
    /// format).
    pub fn add(&mut self, name: &str, value: Tensor<S>) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name:?}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.values.iter())
    }

    /// Total number of scalar elements across all parameters.
    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }
}

impl<S: Scalar> Default for Params<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-parameter gradients, aligned with a [`Params`] store.
///
/// Parameters that did not participate in the taped computation keep an
/// all-zero gradient of the parameter's shape.
#[derive(Debug, Clone)]
pub struct Grads<S> {
    per_param: Vec<Tensor<S>>,
}

impl<S: Scalar> Grads<S> {
    pub fn zeros_like(params: &Params<S>) -> Self {
        Grads {
            per_param: params.values.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.per_param[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.per_param[id.0]
    }

    /// `self += other * k`, used for ordered batch reduction.
    pub fn add_scaled(&mut self, other: &Grads<S>, k: S) {
        debug_assert_eq!(self.per_param.len(), other.per_param.len());
        for (a, b) in self.per_param.iter_mut().zip(&other.per_param) {
            for (av, bv) in a.data_mut().iter_mut().zip(b.data()) {
                *av += k * *bv;
            }
        }
    }

    pub fn scale(&mut self, k: S) {
        for t in &mut self.per_param {
            for v in t.data_mut() {
                *v *= k;
            }
        }
    }

    /// Euclidean norm over the concatenation of the listed parameters'
    /// gradients.
    pub fn norm_over(&self, ids: &[ParamId]) -> S {
        let mut acc = S::zero();
        for id in ids {
            for v in self.per_param[id.0].data() {
                acc += *v * *v;
            }
        }
        acc.sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<S>> {
        self.per_param.iter()
    }
}

/// Handle to a value node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// GRU parameter bundle (input/recurrent weights and biases for the update
/// gate, reset gate, and candidate).
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub wz: Var,
    pub wr: Var,
    pub wc: Var,
    pub uz: Var,
    pub ur: Var,
    pub uc: Var,
    pub bz: Var,
    pub br: Var,
    pub bc: Var,
}

#[derive(Debug, Clone)]
struct GruCache<S> {
    z: Vec<S>,
    r: Vec<S>,
    c: Vec<S>,
    rh: Vec<S>,
}

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Leaf,
    Param,
    Relu {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        k: S,
    },
    ConcatVec {
        parts: Vec<Var>,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        in_dims: (usize, usize, usize),
        k_dims: (usize, usize, usize, usize),
    },
    PointwiseConv {
        x: Var,
        w: Var,
        b: Var,
        in_dims: (usize, usize, usize),
    },
    MaxPool2d {
        x: Var,
        kernel: (usize, usize),
        in_dims: (usize, usize, usize),
        arg: Vec<u32>,
    },
    AvgPool2d {
        x: Var,
        kernel: (usize, usize),
        in_dims: (usize, usize, usize),
    },
    GlobalAvgPool {
        x: Var,
        in_dims: (usize, usize, usize),
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    GruCell {
        x: Var,
        h: Var,
        p: GruVars,
        cache: GruCache<S>,
    },
    L1Mean {
        pred: Var,
        target: Var,
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    needs_grad: bool,
    op: Op<S>,
}

/// One recorded forward computation.
pub struct Tape<'p, S: Scalar> {
    params: &'p Params<S>,
    nodes: Vec<Node<S>>,
    param_vars: Vec<Option<Var>>,
    finite_checks: bool,
}

impl<'p, S: Scalar> Tape<'p, S> {
    pub fn new(params: &'p Params<S>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            finite_checks: cfg!(debug_assertions),
        }
    }

    /// Enable/disable the per-op finiteness check (on by default in debug
    /// builds). The trainer disables it and polices the loss value instead so
    /// a NaN batch aborts with diagnostics rather than a panic.
    pub fn set_finite_checks(&mut self, on: bool) {
        self.finite_checks = on;
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Tensor<S>, needs_grad: bool, op: Op<S>) -> Var {
        if self.finite_checks {
            assert!(
                value.all_finite(),
                "non-finite value produced by {}",
                op_name(&op)
            );
        }
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// 1-D constant leaf.
    pub fn vector(&mut self, data: &[S]) -> Var {
        self.constant(Tensor::vector(data))
    }

    /// Parameter leaf; repeated calls for the same parameter return the same
    /// node so gradient accumulation is shared.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.params.value(id).clone(), true, Op::Param);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn unary_shape(&self, x: Var) -> Vec<usize> {
        self.nodes[x.0].value.shape().to_vec()
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = Tensor::from_vec(
            &self.unary_shape(x),
            self.nodes[x.0]
                .value
                .data()
                .iter()
                .map(|v| if *v > S::zero() { *v } else { S::zero() })
                .collect(),
        )
        .expect("same shape");
        let ng = self.nodes[x.0].needs_grad;
        self.push(value, ng, Op::Relu { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = Tensor::from_vec(
            &self.unary_shape(x),
            self.nodes[x.0].value.data().iter().map(|v| v.tanh()).collect(),
        )
        .expect("same shape");
        let ng = self.nodes[x.0].needs_grad;
        self.push(value, ng, Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let one = S::one();
        let value = Tensor::from_vec(
            &self.unary_shape(x),
            self.nodes[x.0]
                .value
                .data()
                .iter()
                .map(|v| one / (one + (-*v).exp()))
                .collect(),
        )
        .expect("same shape");
        let ng = self.nodes[x.0].needs_grad;
        self.push(value, ng, Op::Sigmoid { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let (sa, sb) = (self.unary_shape(a), self.unary_shape(b));
        if sa != sb {
            return Err(ShapeError::Mismatch {
                op: "add",
                expected: sa,
                got: sb,
            });
        }
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| *x + *y)
            .collect();
        let value = Tensor::from_vec(&sa, data).expect("same shape");
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(value, ng, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: Var, k: S) -> Var {
        let value = Tensor::from_vec(
            &self.unary_shape(x),
            self.nodes[x.0].value.data().iter().map(|v| *v * k).collect(),
        )
        .expect("same shape");
        let ng = self.nodes[x.0].needs_grad;
        self.push(value, ng, Op::Scale { x, k })
    }

    /// Concatenate 1-D tensors.
    pub fn concat_vec(&mut self, parts: &[Var]) -> Result<Var, ShapeError> {
        if parts.is_empty() {
            return Err(ShapeError::Invalid {
                op: "concat_vec",
                msg: "empty part list".into(),
            });
        }
        let mut data = Vec::new();
        let mut ng = false;
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.rank() != 1 {
                return Err(ShapeError::Rank {
                    op: "concat_vec",
                    expected: 1,
                    got: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
            ng |= self.nodes[p.0].needs_grad;
        }
        let value = Tensor::vector(&data);
        Ok(self.push(
            value,
            ng,
            Op::ConcatVec {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Concatenate two `(c, h, w)` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let (sa, sb) = (self.unary_shape(a), self.unary_shape(b));
        if sa.len() != 3 {
            return Err(ShapeError::Rank {
                op: "concat_channels",
                expected: 3,
                got: sa,
            });
        }
        if sb.len() != 3 || sa[1..] != sb[1..] {
            return Err(ShapeError::Mismatch {
                op: "concat_channels",
                expected: sa,
                got: sb,
            });
        }
        let mut data = Vec::with_capacity((sa[0] + sb[0]) * sa[1] * sa[2]);
        data.extend_from_slice(self.nodes[a.0].value.data());
        data.extend_from_slice(self.nodes[b.0].value.data());
        let value = Tensor::from_vec(&[sa[0] + sb[0], sa[1], sa[2]], data).expect("concat shape");
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(value, ng, Op::ConcatChannels { a, b }))
    }

    /// 2-D convolution: `x` is `(c, h, w)`, `w` is `(o, c, kh, kw)`, `b` is `(o)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Result<Var, ShapeError> {
        let xs = self.unary_shape(x);
        let ws = self.unary_shape(w);
        let bs = self.unary_shape(b);
        if xs.len() != 3 {
            return Err(ShapeError::Rank {
                op: "conv2d",
                expected: 3,
                got: xs,
            });
        }
        if ws.len() != 4 || ws[1] != xs[0] {
            return Err(ShapeError::Mismatch {
                op: "conv2d",
                expected: vec![ws.first().copied().unwrap_or(0), xs[0]],
                got: ws,
            });
        }
        if bs != [ws[0]] {
            return Err(ShapeError::Mismatch {
                op: "conv2d",
                expected: vec![ws[0]],
                got: bs,
            });
        }
        let in_dims = (xs[0], xs[1], xs[2]);
        let k_dims = (ws[0], ws[1], ws[2], ws[3]);
        let Some((oh, ow)) = conv2d_out_dims(in_dims, (ws[2], ws[3]), geom) else {
            return Err(ShapeError::KernelTooLarge {
                op: "conv2d",
                kernel: vec![ws[2], ws[3]],
                input: vec![xs[1], xs[2]],
                stride: vec![geom.stride.0, geom.stride.1],
                dilation: vec![geom.dilation.0, geom.dilation.1],
                padding: vec![geom.padding.0, geom.padding.1],
            });
        };
        let data = conv2d_forward(
            self.nodes[x.0].value.data(),
            in_dims,
            self.nodes[w.0].value.data(),
            k_dims,
            self.nodes[b.0].value.data(),
            geom,
        );
        let value = Tensor::from_vec(&[ws[0], oh, ow], data).expect("conv shape");
        let ng = self.nodes[x.0].needs_grad
            || self.nodes[w.0].needs_grad
            || self.nodes[b.0].needs_grad;
        Ok(self.push(
            value,
            ng,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                in_dims,
                k_dims,
            },
        ))
    }

    /// 1x1 channel-mixing convolution: `w` is `(o, c)`, `b` is `(o)`.
    pub fn pointwise_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var, ShapeError> {
        let xs = self.unary_shape(x);
        let ws = self.unary_shape(w);
        let bs = self.unary_shape(b);
        if xs.len() != 3 {
            return Err(ShapeError::Rank {
                op: "pointwise_conv",
                expected: 3,
                got: xs,
            });
        }
        if ws.len() != 2 || ws[1] != xs[0] {
            return Err(ShapeError::Mismatch {
                op: "pointwise_conv",
                expected: vec![ws.first().copied().unwrap_or(0), xs[0]],
                got: ws,
            });
        }
        if bs != [ws[0]] {
            return Err(ShapeError::Mismatch {
                op: "pointwise_conv",
                expected: vec![ws[0]],
                got: bs,
            });
        }
        let (c, h, w_sp) = (xs[0], xs[1], xs[2]);
        let o = ws[0];
        let plane = h * w_sp;
        let xv = self.nodes[x.0].value.data();
        let wv = self.nodes[w.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut data = vec![S::zero(); o * plane];
        for oc in 0..o {
            data[oc * plane..(oc + 1) * plane].fill(bv[oc]);
            for ic in 0..c {
                let k = wv[oc * c + ic];
                let src = &xv[ic * plane..(ic + 1) * plane];
                let dst = &mut data[oc * plane..(oc + 1) * plane];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += k * *s;
                }
            }
        }
        let value = Tensor::from_vec(&[o, h, w_sp], data).expect("pointwise shape");
        let ng = self.nodes[x.0].needs_grad
            || self.nodes[w.0].needs_grad
            || self.nodes[b.0].needs_grad;
        Ok(self.push(
            value,
            ng,
            Op::PointwiseConv {
                x,
                w,
                b,
                in_dims: (c, h, w_sp),
            },
        ))
    }

    /// Non-overlapping max pooling; output spatial dims floor-divide the input.
    pub fn max_pool2d(&mut self, x: Var, kernel: (usize, usize)) -> Result<Var, ShapeError> {
        let xs = self.unary_shape(x);
        if xs.len() != 3 {
            return Err(ShapeError::Rank {
                op: "max_pool2d",
                expected: 3,
                got: xs,
            });
        }
        if kernel.0 == 0 || kernel.1 == 0 || xs[1] < kernel.0 || xs[2] < kernel.1 {
            return Err(ShapeError::KernelTooLarge {
                op: "max_pool2d",
                kernel: vec![kernel.0, kernel.1],
                input: vec![xs[1], xs[2]],
                stride: vec![kernel.0, kernel.1],
                dilation: vec![1, 1],
                padding: vec![0, 0],
            });
        }
        let in_dims = (xs[0], xs[1], xs[2]);
        let (data, arg) = max_pool2d_forward(self.nodes[x.0].value.data(), in_dims, kernel);
        let value = Tensor::from_vec(&[xs[0], xs[1] / kernel.0, xs[2] / kernel.1], data)
            .expect("pool shape");
        let ng = self.nodes[x.0].needs_grad;
        Ok(self.push(
            value,
            ng,
            Op::MaxPool2d {
                x,
                kernel,
                in_dims,
                arg,
            },
        ))
    }

    /// Non-overlapping average pooling.
    pub fn avg_pool2d(&mut self, x: Var, kernel: (usize, usize)) -> Result<Var, ShapeError> {
        let xs = self.unary_shape(x);
        if xs.len() != 3 {
            return Err(ShapeError::Rank {
                op: "avg_pool2d",
                expected: 3,
                got: xs,
            });
        }
        if kernel.0 == 0 || kernel.1 == 0 || xs[1] < kernel.0 || xs[2] < kernel.1 {
            return Err(ShapeError::KernelTooLarge {
                op: "avg_pool2d",
                kernel: vec![kernel.0, kernel.1],
                input: vec![xs[1], xs[2]],
                stride: vec![kernel.0, kernel.1],
                dilation: vec![1, 1],
                padding: vec![0, 0],
            });
        }
        let in_dims = (xs[0], xs[1], xs[2]);
        let data = avg_pool2d_forward(self.nodes[x.0].value.data(), in_dims, kernel);
        let value = Tensor::from_vec(&[xs[0], xs[1] / kernel.0, xs[2] / kernel.1], data)
            .expect("pool shape");
        let ng = self.nodes[x.0].needs_grad;
        Ok(self.push(
            value,
            ng,
            Op::AvgPool2d {
                x,
                kernel,
                in_dims,
            },
        ))
    }

    /// Mean over each channel plane, producing a vector of length `c`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, ShapeError> {
        let xs = self.unary_shape(x);
        if xs.len() != 3 {
            return Err(ShapeError::Rank {
                op: "global_avg_pool",
                expected: 3,
                got: xs,
            });
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let denom = S::cast_from((h * w) as f64);
        let xv = self.nodes[x.0].value.data();
        let data: Vec<S> = (0..c)
            .map(|ic| {
                let mut acc = S::zero();
                for v in &xv[ic * h * w..(ic + 1) * h * w] {
                    acc += *v;
                }
                acc / denom
            })
            .collect();
        let value = Tensor::vector(&data);
        let ng = self.nodes[x.0].needs_grad;
        Ok(self.push(
            value,
            ng,
            Op::GlobalAvgPool {
                x,
                in_dims: (c, h, w),
            },
        ))
    }

    /// Dense layer `y = W x + b` on a 1-D input.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var, ShapeError> {
        let xs = self.unary_shape(x);
        let ws = self.unary_shape(w);
        let bs = self.unary_shape(b);
        if xs.len() != 1 {
            return Err(ShapeError::Rank {
                op: "dense",
                expected: 1,
                got: xs,
            });
        }
        if ws.len() != 2 || ws[1] != xs[0] {
            return Err(ShapeError::Mismatch {
                op: "dense",
                expected: vec![ws.first().copied().unwrap_or(0), xs[0]],
                got: ws,
            });
        }
        if bs != [ws[0]] {
            return Err(ShapeError::Mismatch {
                op: "dense",
                expected: vec![ws[0]],
                got: bs,
            });
        }
        let data = dense_forward(
            self.nodes[w.0].value.data(),
            self.nodes[x.0].value.data(),
            self.nodes[b.0].value.data(),
        );
        let value = Tensor::vector(&data);
        let ng = self.nodes[x.0].needs_grad
            || self.nodes[w.0].needs_grad
            || self.nodes[b.0].needs_grad;
        Ok(self.push(value, ng, Op::Dense { x, w, b }))
    }

    /// Gated recurrent unit cell.
    ///
    /// `z = sig(Wz x + Uz h + bz)`, `r = sig(Wr x + Ur h + br)`,
    /// `c = tanh(Wc x + Uc (r*h) + bc)`, `h' = (1-z)*h + z*c`.
    pub fn gru_cell(&mut self, x: Var, h: Var, p: &GruVars) -> Result<Var, ShapeError> {
        let xs = self.unary_shape(x);
        let hs = self.unary_shape(h);
        if xs.len() != 1 || hs.len() != 1 {
            return Err(ShapeError::Rank {
                op: "gru_cell",
                expected: 1,
                got: if xs.len() != 1 { xs } else { hs },
            });
        }
        let (nx, nh) = (xs[0], hs[0]);
        for (wv, rows, cols) in [
            (p.wz, nh, nx),
            (p.wr, nh, nx),
            (p.wc, nh, nx),
            (p.uz, nh, nh),
            (p.ur, nh, nh),
            (p.uc, nh, nh),
        ] {
            let s = self.unary_shape(wv);
            if s != [rows, cols] {
                return Err(ShapeError::Mismatch {
                    op: "gru_cell",
                    expected: vec![rows, cols],
                    got: s,
                });
            }
        }
        for bv in [p.bz, p.br, p.bc] {
            let s = self.unary_shape(bv);
            if s != [nh] {
                return Err(ShapeError::Mismatch {
                    op: "gru_cell",
                    expected: vec![nh],
                    got: s,
                });
            }
        }

        let xv = self.nodes[x.0].value.data().to_vec();
        let hv = self.nodes[h.0].value.data().to_vec();
        let gate = |tape: &Self, w: Var, u: Var, b: Var, uin: &[S]| -> Vec<S> {
            let mut pre = dense_forward(
                tape.nodes[w.0].value.data(),
                &xv,
                tape.nodes[b.0].value.data(),
            );
            let uw = tape.nodes[u.0].value.data();
            for (o, pv) in pre.iter_mut().enumerate() {
                let row = &uw[o * nh..(o + 1) * nh];
                for (wv, hv) in row.iter().zip(uin) {
                    *pv += *wv * *hv;
                }
            }
            pre
        };
        let one = S::one();
        let z: Vec<S> = gate(self, p.wz, p.uz, p.bz, &hv)
            .into_iter()
            .map(|v| one / (one + (-v).exp()))
            .collect();
        let r: Vec<S> = gate(self, p.wr, p.ur, p.br, &hv)
            .into_iter()
            .map(|v| one / (one + (-v).exp()))
            .collect();
        let rh: Vec<S> = r.iter().zip(&hv).map(|(rv, hv)| *rv * *hv).collect();
        let c: Vec<S> = gate(self, p.wc, p.uc, p.bc, &rh)
            .into_iter()
            .map(|v| v.tanh())
            .collect();
        let hp: Vec<S> = z
            .iter()
            .zip(&c)
            .zip(&hv)
            .map(|((zv, cv), hv)| (one - *zv) * *hv + *zv * *cv)
            .collect();

        let value = Tensor::vector(&hp);
        let ng = self.nodes[x.0].needs_grad
            || self.nodes[h.0].needs_grad
            || [p.wz, p.wr, p.wc, p.uz, p.ur, p.uc, p.bz, p.br, p.bc]
                .iter()
                .any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(
            value,
            ng,
            Op::GruCell {
                x,
                h,
                p: *p,
                cache: GruCache { z, r, c, rh },
            },
        ))
    }

    /// Mean absolute error over all elements, producing a scalar node.
    pub fn l1_mean(&mut self, pred: Var, target: Var) -> Result<Var, ShapeError> {
        let (sp, st) = (self.unary_shape(pred), self.unary_shape(target));
        if sp != st {
            return Err(ShapeError::Mismatch {
                op: "l1_mean",
                expected: sp,
                got: st,
            });
        }
        let n = S::cast_from(self.nodes[pred.0].value.len() as f64);
        let mut acc = S::zero();
        for (p, t) in self.nodes[pred.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[target.0].value.data())
        {
            acc += (*p - *t).abs();
        }
        let value = Tensor::scalar(acc / n);
        let ng = self.nodes[pred.0].needs_grad || self.nodes[target.0].needs_grad;
        Ok(self.push(value, ng, Op::L1Mean { pred, target }))
    }

    /// Full reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Result<Grads<S>, ShapeError> {
        self.backward_impl(loss, 0)
    }

    /// Reverse pass that stops as soon as the listed parameters' gradients are
    /// complete. Other entries of the returned [`Grads`] are meaningless
    /// (zero or partial); callers must read only the watched parameters.
    ///
    /// Used to measure per-task gradient norms on a shared layer without
    /// paying for the full backward through the encoders.
    pub fn backward_partial(&self, loss: Var, watched: &[ParamId]) -> Result<Grads<S>, ShapeError> {
        // A leaf's gradient is final once every node that consumes it has run;
        // consumers always sit later on the tape, so it suffices to walk down
        // to the earliest consumer of any watched parameter.
        let mut stop = usize::MAX;
        for id in watched {
            let Some(v) = self.param_vars[id.0] else {
                continue;
            };
            let first_use = self.nodes.iter().enumerate().find_map(|(i, n)| {
                if node_inputs(&n.op).contains(&v) {
                    Some(i)
                } else {
                    None
                }
            });
            if let Some(i) = first_use {
                stop = stop.min(i);
            }
        }
        if stop == usize::MAX {
            // No watched parameter participates; gradients are all zero.
            return Ok(Grads::zeros_like(self.params));
        }
        self.backward_impl(loss, stop)
    }

    fn backward_impl(&self, loss: Var, stop: usize) -> Result<Grads<S>, ShapeError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(ShapeError::Invalid {
                op: "backward",
                msg: format!(
                    "loss must be a single element, got shape {:?}",
                    self.nodes[loss.0].value.shape()
                ),
            });
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(S::one()));

        for i in (stop..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().expect("checked above");
            self.node_backward(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut out = Grads::zeros_like(self.params);
        for (pid, pv) in self.param_vars.iter().enumerate() {
            if let Some(v) = pv {
                if let Some(g) = grads[v.0].take() {
                    out.per_param[pid] = g;
                }
            }
        }
        Ok(out)
    }

    fn node_backward(&self, idx: usize, g: &Tensor<S>, grads: &mut Vec<Option<Tensor<S>>>) {
        let one = S::one();
        let accum = |grads: &mut Vec<Option<Tensor<S>>>, v: Var, delta: Vec<S>, shape: &[usize]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => {
                    for (a, b) in t.data_mut().iter_mut().zip(&delta) {
                        *a += *b;
                    }
                }
                slot @ None => {
                    *slot = Some(Tensor::from_vec(shape, delta).expect("gradient shape"));
                }
            }
        };

        match &self.nodes[idx].op {
            Op::Leaf | Op::Param => {}
            Op::Relu { x } => {
                let xv = self.nodes[x.0].value.data();
                let delta: Vec<S> = xv
                    .iter()
                    .zip(g.data())
                    .map(|(x, g)| if *x > S::zero() { *g } else { S::zero() })
                    .collect();
                accum(grads, *x, delta, self.nodes[x.0].value.shape());
            }
            Op::Tanh { x } => {
                let yv = self.nodes[idx].value.data();
                let delta: Vec<S> = yv
                    .iter()
                    .zip(g.data())
                    .map(|(y, g)| *g * (one - *y * *y))
                    .collect();
                accum(grads, *x, delta, self.nodes[x.0].value.shape());
            }
            Op::Sigmoid { x } => {
                let yv = self.nodes[idx].value.data();
                let delta: Vec<S> = yv
                    .iter()
                    .zip(g.data())
                    .map(|(y, g)| *g * *y * (one - *y))
                    .collect();
                accum(grads, *x, delta, self.nodes[x.0].value.shape());
            }
            Op::Add { a, b } => {
                accum(grads, *a, g.data().to_vec(), self.nodes[a.0].value.shape());
                accum(grads, *b, g.data().to_vec(), self.nodes[b.0].value.shape());
            }
            Op::Scale { x, k } => {
                let delta: Vec<S> = g.data().iter().map(|g| *g * *k).collect();
                accum(grads, *x, delta, self.nodes[x.0].value.shape());
            }
            Op::ConcatVec { parts } => {
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.len();
                    let delta = g.data()[offset..offset + n].to_vec();
                    accum(grads, *p, delta, self.nodes[p.0].value.shape());
                    offset += n;
                }
            }
            Op::ConcatChannels { a, b } => {
                let na = self.nodes[a.0].value.len();
                accum(
                    grads,
                    *a,
                    g.data()[..na].to_vec(),
                    self.nodes[a.0].value.shape(),
                );
                accum(
                    grads,
                    *b,
                    g.data()[na..].to_vec(),
                    self.nodes[b.0].value.shape(),
                );
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                in_dims,
                k_dims,
            } => {
                if self.nodes[x.0].needs_grad {
                    let gx = conv2d_backward_input(
                        g.data(),
                        *in_dims,
                        self.nodes[w.0].value.data(),
                        *k_dims,
                        *geom,
                    );
                    accum(grads, *x, gx, self.nodes[x.0].value.shape());
                }
                if self.nodes[w.0].needs_grad || self.nodes[b.0].needs_grad {
                    let (gw, gb) = conv2d_backward_weights(
                        self.nodes[x.0].value.data(),
                        *in_dims,
                        g.data(),
                        *k_dims,
                        *geom,
                    );
                    accum(grads, *w, gw, self.nodes[w.0].value.shape());
                    accum(grads, *b, gb, self.nodes[b.0].value.shape());
                }
            }
            Op::PointwiseConv { x, w, b, in_dims } => {
                let (c, h, w_sp) = *in_dims;
                let plane = h * w_sp;
                let o = self.nodes[b.0].value.len();
                let wv = self.nodes[w.0].value.data();
                let xv = self.nodes[x.0].value.data();
                if self.nodes[x.0].needs_grad {
                    let mut gx = vec![S::zero(); c * plane];
                    for oc in 0..o {
                        let gplane = &g.data()[oc * plane..(oc + 1) * plane];
                        for ic in 0..c {
                            let k = wv[oc * c + ic];
                            let dst = &mut gx[ic * plane..(ic + 1) * plane];
                            for (d, s) in dst.iter_mut().zip(gplane) {
                                *d += k * *s;
                            }
                        }
                    }
                    accum(grads, *x, gx, self.nodes[x.0].value.shape());
                }
                let mut gw = vec![S::zero(); o * c];
                let mut gb = vec![S::zero(); o];
                for oc in 0..o {
                    let gplane = &g.data()[oc * plane..(oc + 1) * plane];
                    let mut bacc = S::zero();
                    for v in gplane {
                        bacc += *v;
                    }
                    gb[oc] = bacc;
                    for ic in 0..c {
                        let src = &xv[ic * plane..(ic + 1) * plane];
                        let mut acc = S::zero();
                        for (gv, sv) in gplane.iter().zip(src) {
                            acc += *gv * *sv;
                        }
                        gw[oc * c + ic] = acc;
                    }
                }
                accum(grads, *w, gw, self.nodes[w.0].value.shape());
                accum(grads, *b, gb, self.nodes[b.0].value.shape());
            }
            Op::MaxPool2d {
                x,
                kernel,
                in_dims,
                arg,
            } => {
                let out_dims = (in_dims.1 / kernel.0, in_dims.2 / kernel.1);
                let gx = max_pool2d_backward(g.data(), arg, *in_dims, out_dims);
                accum(grads, *x, gx, self.nodes[x.0].value.shape());
            }
            Op::AvgPool2d {
                x,
                kernel,
                in_dims,
            } => {
                let gx = avg_pool2d_backward(g.data(), *in_dims, *kernel);
                accum(grads, *x, gx, self.nodes[x.0].value.shape());
            }
            Op::GlobalAvgPool { x, in_dims } => {
                let (c, h, w) = *in_dims;
                let denom = S::cast_from((h * w) as f64);
                let mut gx = vec![S::zero(); c * h * w];
                for ic in 0..c {
                    let gv = g.data()[ic] / denom;
                    for v in &mut gx[ic * h * w..(ic + 1) * h * w] {
                        *v += gv;
                    }
                }
                accum(grads, *x, gx, self.nodes[x.0].value.shape());
            }
            Op::Dense { x, w, b } => {
                let (gx, gw, gb) = dense_backward(
                    self.nodes[w.0].value.data(),
                    self.nodes[x.0].value.data(),
                    g.data(),
                );
                accum(grads, *x, gx, self.nodes[x.0].value.shape());
                accum(grads, *w, gw, self.nodes[w.0].value.shape());
                accum(grads, *b, gb, self.nodes[b.0].value.shape());
            }
            Op::GruCell { x, h, p, cache } => {
                self.gru_backward(idx, *x, *h, p, cache, g, grads);
            }
            Op::L1Mean { pred, target } => {
                let n = S::cast_from(self.nodes[pred.0].value.len() as f64);
                let gv = g.data()[0] / n;
                let pv = self.nodes[pred.0].value.data();
                let tv = self.nodes[target.0].value.data();
                if self.nodes[pred.0].needs_grad {
                    let delta: Vec<S> = pv
                        .iter()
                        .zip(tv)
                        .map(|(p, t)| {
                            if *p > *t {
                                gv
                            } else if *p < *t {
                                -gv
                            } else {
                                S::zero()
                            }
                        })
                        .collect();
                    accum(grads, *pred, delta, self.nodes[pred.0].value.shape());
                }
                if self.nodes[target.0].needs_grad {
                    let delta: Vec<S> = pv
                        .iter()
                        .zip(tv)
                        .map(|(p, t)| {
                            if *p > *t {
                                -gv
                            } else if *p < *t {
                                gv
                            } else {
                                S::zero()
                            }
                        })
                        .collect();
                    accum(grads, *target, delta, self.nodes[target.0].value.shape());
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn gru_backward(
        &self,
        _idx: usize,
        x: Var,
        h: Var,
        p: &GruVars,
        cache: &GruCache<S>,
        g: &Tensor<S>,
        grads: &mut Vec<Option<Tensor<S>>>,
    ) {
        let one = S::one();
        let xv = self.nodes[x.0].value.data();
        let hv = self.nodes[h.0].value.data();
        let nh = hv.len();
        let nx = xv.len();
        let (z, r, c, rh) = (&cache.z, &cache.r, &cache.c, &cache.rh);
        let gv = g.data();

        // Through the convex combination h' = (1-z)h + zc.
        let mut gh = vec![S::zero(); nh];
        let mut dc = vec![S::zero(); nh]; // d(pre-tanh candidate)
        let mut gz = vec![S::zero(); nh];
        for i in 0..nh {
            gz[i] = gv[i] * (c[i] - hv[i]);
            dc[i] = gv[i] * z[i] * (one - c[i] * c[i]);
            gh[i] = gv[i] * (one - z[i]);
        }

        // Through the candidate's recurrent term Uc (r*h).
        let uc = self.nodes[p.uc.0].value.data();
        let mut grh = vec![S::zero(); nh];
        matvec_t_accum(&mut grh, uc, &dc, nh, nh);
        let mut dr = vec![S::zero(); nh];
        for i in 0..nh {
            dr[i] = grh[i] * hv[i] * r[i] * (one - r[i]);
            gh[i] += grh[i] * r[i];
        }
        let mut dz = vec![S::zero(); nh];
        for i in 0..nh {
            dz[i] = gz[i] * z[i] * (one - z[i]);
        }

        // Weight gradients (outer products into each gate's parameters).
        let mut push_mat = |v: Var, a: &[S], b: &[S]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let mut gm = vec![S::zero(); a.len() * b.len()];
            outer_accum(&mut gm, a, b);
            let shape = self.nodes[v.0].value.shape().to_vec();
            match &mut grads[v.0] {
                Some(t) => {
                    for (av, bv) in t.data_mut().iter_mut().zip(&gm) {
                        *av += *bv;
                    }
                }
                slot @ None => {
                    *slot = Some(Tensor::from_vec(&shape, gm).expect("gru weight grad shape"));
                }
            }
        };
        push_mat(p.wz, &dz, xv);
        push_mat(p.wr, &dr, xv);
        push_mat(p.wc, &dc, xv);
        push_mat(p.uz, &dz, hv);
        push_mat(p.ur, &dr, hv);
        push_mat(p.uc, &dc, rh);

        let mut push_vec = |v: Var, a: &[S]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let shape = self.nodes[v.0].value.shape().to_vec();
            match &mut grads[v.0] {
                Some(t) => {
                    for (av, bv) in t.data_mut().iter_mut().zip(a) {
                        *av += *bv;
                    }
                }
                slot @ None => {
                    *slot =
                        Some(Tensor::from_vec(&shape, a.to_vec()).expect("gru bias grad shape"));
                }
            }
        };
        push_vec(p.bz, &dz);
        push_vec(p.br, &dr);
        push_vec(p.bc, &dc);

        // Input and previous-hidden gradients.
        if self.nodes[x.0].needs_grad {
            let mut gx = vec![S::zero(); nx];
            matvec_t_accum(&mut gx, self.nodes[p.wz.0].value.data(), &dz, nh, nx);
            matvec_t_accum(&mut gx, self.nodes[p.wr.0].value.data(), &dr, nh, nx);
            matvec_t_accum(&mut gx, self.nodes[p.wc.0].value.data(), &dc, nh, nx);
            match &mut grads[x.0] {
                Some(t) => {
                    for (av, bv) in t.data_mut().iter_mut().zip(&gx) {
                        *av += *bv;
                    }
                }
                slot @ None => {
                    *slot = Some(Tensor::vector(&gx));
                }
            }
        }
        if self.nodes[h.0].needs_grad {
            matvec_t_accum(&mut gh, self.nodes[p.uz.0].value.data(), &dz, nh, nh);
            matvec_t_accum(&mut gh, self.nodes[p.ur.0].value.data(), &dr, nh, nh);
            match &mut grads[h.0] {
                Some(t) => {
                    for (av, bv) in t.data_mut().iter_mut().zip(&gh) {
                        *av += *bv;
                    }
                }
                slot @ None => {
                    *slot = Some(Tensor::vector(&gh));
                }
            }
        }
    }
}

/// `gv[i] += sum_o m[o][i] * a[o]` for an `(n_out, n_in)` row-major matrix.
fn matvec_t_accum<S: Scalar>(gv: &mut [S], m: &[S], a: &[S], n_out: usize, n_in: usize) {
    debug_assert_eq!(m.len(), n_out * n_in);
    debug_assert_eq!(gv.len(), n_in);
    debug_assert_eq!(a.len(), n_out);
    for o in 0..n_out {
        let k = a[o];
        let row = &m[o * n_in..(o + 1) * n_in];
        for (g, wv) in gv.iter_mut().zip(row) {
            *g += k * *wv;
        }
    }
}

/// `gm[o][i] += a[o] * b[i]`.
fn outer_accum<S: Scalar>(gm: &mut [S], a: &[S], b: &[S]) {
    debug_assert_eq!(gm.len(), a.len() * b.len());
    for (o, av) in a.iter().enumerate() {
        let row = &mut gm[o * b.len()..(o + 1) * b.len()];
        for (g, bv) in row.iter_mut().zip(b) {
            *g += *av * *bv;
        }
    }
}

fn node_inputs<S: Scalar>(op: &Op<S>) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Param => vec![],
        Op::Relu { x } | Op::Tanh { x } | Op::Sigmoid { x } | Op::Scale { x, .. } => vec![*x],
        Op::Add { a, b } | Op::ConcatChannels { a, b } => vec![*a, *b],
        Op::ConcatVec { parts } => parts.clone(),
        Op::Conv2d { x, w, b, .. } | Op::PointwiseConv { x, w, b, .. } | Op::Dense { x, w, b } => {
            vec![*x, *w, *b]
        }
        Op::MaxPool2d { x, .. } | Op::AvgPool2d { x, .. } | Op::GlobalAvgPool { x, .. } => {
            vec![*x]
        }
        Op::GruCell { x, h, p, .. } => vec![
            *x, *h, p.wz, p.wr, p.wc, p.uz, p.ur, p.uc, p.bz, p.br, p.bc,
        ],
        Op::L1Mean { pred, target } => vec![*pred, *target],
    }
}

fn op_name<S: Scalar>(op: &Op<S>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param => "param",
        Op::Relu { .. } => "relu",
        Op::Tanh { .. } => "tanh",
        Op::Sigmoid { .. } => "sigmoid",
        Op::Add { .. } => "add",
        Op::Scale { .. } => "scale",
        Op::ConcatVec { .. } => "concat_vec",
        Op::ConcatChannels { .. } => "concat_channels",
        Op::Conv2d { .. } => "conv2d",
        Op::PointwiseConv { .. } => "pointwise_conv",
        Op::MaxPool2d { .. } => "max_pool2d",
        Op::AvgPool2d { .. } => "avg_pool2d",
        Op::GlobalAvgPool { .. } => "global_avg_pool",
        Op::Dense { .. } => "dense",
        Op::GruCell { .. } => "gru_cell",
        Op::L1Mean { .. } => "l1_mean",
    }
}
