//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends a node holding its output value and the handles of its
//! inputs. [`Graph::backward`] walks the tape once in reverse recording order,
//! so each node's gradient is complete before it is propagated to its parents.
//!
//! ```
//! use srgbflow_autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]).with_requires_grad(true));
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.wrt(&g, x).data(), &[2.0, 4.0, 6.0]);
//! ```

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvDims};
use crate::tensor::{broadcast_index, broadcast_shape, split_axis, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Neg,
    Exp,
    Log,
    Tanh,
    Relu,
    Softplus,
    Sqrt,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary { kind: BinaryKind, a: Var, b: Var },
    Unary { kind: UnaryKind, x: Var },
    Scale { x: Var, factor: f32 },
    Shift { x: Var },
    ClampMin { x: Var, min: f32 },
    SumAll(Var),
    SumAxis { x: Var, axis: usize },
    Reshape(Var),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Softmax { x: Var, axis: usize },
    Cumsum { x: Var, axis: usize },
    Gather { src: Var, axis: usize, index: Vec<usize> },
    SelectRows { table: Var, rows: Vec<usize> },
    Conv2d { x: Var, w: Var, b: Option<Var>, dims: ConvDims },
    Dense { x: Var, w: Var, b: Option<Var>, rows: usize },
    LogAbsDet { w: Var, inv: Vec<f64> },
    MatInverse { w: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, zeros when `v` did not influence the loss.
    pub fn wrt(&self, g: &Graph, v: Var) -> Tensor {
        let shape = g.value(v).shape();
        match self.get(v) {
            Some(d) => Tensor::new(shape, d.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn check_finite(op: &'static str, data: &[f32]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, len: usize) -> &mut Vec<f32> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf. Gradients are tracked when the tensor requires them.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| TensorError::ShapeMismatch {
            op: name,
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        })?;
        let f = |x: f32, y: f32| -> f32 {
            match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
                BinaryKind::Pow => x.powf(y),
            }
        };
        let domain_ok = |x: f32, y: f32| -> bool {
            match kind {
                BinaryKind::Div => y != 0.0,
                BinaryKind::Pow => x > 0.0 || (x == 0.0 && y > 0.0),
                _ => true,
            }
        };
        let data: Vec<f32> = if ta.shape() == tb.shape() {
            let mut out = Vec::with_capacity(ta.numel());
            for (&x, &y) in ta.data().iter().zip(tb.data()) {
                if !domain_ok(x, y) {
                    return Err(TensorError::Domain { op: name });
                }
                out.push(f(x, y));
            }
            out
        } else {
            let ia = broadcast_index(ta.shape(), &out_shape);
            let ib = broadcast_index(tb.shape(), &out_shape);
            let (da, db) = (ta.data(), tb.data());
            let mut out = Vec::with_capacity(ia.len());
            for (&i, &j) in ia.iter().zip(&ib) {
                if !domain_ok(da[i], db[j]) {
                    return Err(TensorError::Domain { op: name });
                }
                out.push(f(da[i], db[j]));
            }
            out
        };
        check_finite(name, &data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::Binary { kind, a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b, "div")
    }

    /// Element-wise `a^b`; requires `a > 0` (or `a == 0` with `b > 0`).
    pub fn pow(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Pow, a, b, "pow")
    }

    fn unary(&mut self, kind: UnaryKind, x: Var, name: &'static str) -> Result<Var> {
        let tx = self.value(x);
        if kind == UnaryKind::Log && tx.data().iter().any(|&v| v <= 0.0) {
            return Err(TensorError::Domain { op: name });
        }
        if kind == UnaryKind::Sqrt && tx.data().iter().any(|&v| v < 0.0) {
            return Err(TensorError::Domain { op: name });
        }
        let out = tx.map(|v| match kind {
            UnaryKind::Neg => -v,
            UnaryKind::Exp => v.exp(),
            UnaryKind::Log => v.ln(),
            UnaryKind::Tanh => v.tanh(),
            UnaryKind::Relu => v.max(0.0),
            UnaryKind::Softplus => softplus(v),
            UnaryKind::Sqrt => v.sqrt(),
        });
        check_finite(name, out.data())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Unary { kind, x }, rg))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, x, "neg")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x, "exp")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x, "log")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, x, "tanh")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x, "relu")
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Softplus, x, "softplus")
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, x, "sqrt")
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        check_finite("scale", out.data())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Scale { x, factor }, rg))
    }

    pub fn add_scalar(&mut self, x: Var, offset: f32) -> Result<Var> {
        let out = self.value(x).map(|v| v + offset);
        check_finite("add_scalar", out.data())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Shift { x }, rg))
    }

    /// `max(x, min)`; the gradient is blocked where the clamp is active.
    pub fn clamp_min(&mut self, x: Var, min: f32) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(min));
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::ClampMin { x, min }, rg))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        check_finite("sum", &[s])?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::SumAll(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f32)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::IndexOutOfRange {
                index: axis,
                len: shape.len(),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let d = tx.data();
        let mut acc = vec![0.0f64; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (a, &v) in acc[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *a += v as f64;
                }
            }
        }
        let out: Vec<f32> = acc.into_iter().map(|v| v as f32).collect();
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        check_finite("sum_axis", &out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::SumAxis { x, axis }, rg))
    }

    /// Sums every axis but the first, giving one value per batch item.
    pub fn sum_per_item(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.first().ok_or(TensorError::Empty("sum_per_item"))?;
        let rest: usize = shape[1..].iter().product();
        let flat = self.reshape(x, &[n, rest])?;
        self.sum_axis(flat, 1, false)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?.with_requires_grad(false);
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::IndexOutOfRange {
                index: start + len,
                len: shape.get(axis).copied().unwrap_or(0),
            });
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let d = tx.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Narrow { x, axis, start }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Empty("concat"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::IndexOutOfRange {
                index: axis,
                len: base.len(),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same_rank = s.len() == base.len();
            if !same_rank || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let len = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let d = tx.data();
        let mut out = vec![0.0f32; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| d[at(l)]).fold(f32::NEG_INFINITY, f32::max);
                let mut z = 0.0f32;
                for l in 0..len {
                    let e = (d[at(l)] - m).exp();
                    out[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[at(l)] /= z;
                }
            }
        }
        check_finite("softmax", &out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { x, axis }, rg))
    }

    /// Inclusive prefix sum along `axis`.
    pub fn cumsum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let d = tx.data();
        let mut out = vec![0.0f32; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = 0.0f32;
                for l in 0..len {
                    let k = (o * len + l) * inner + i;
                    acc += d[k];
                    out[k] = acc;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Cumsum { x, axis }, rg))
    }

    /// `out[.., m, ..] = src[.., index[.., m, ..], ..]` along `axis`; `index`
    /// has the output's shape.
    pub fn gather(&mut self, src: Var, axis: usize, index: &[usize], index_shape: &[usize]) -> Result<Var> {
        let ts = self.value(src);
        let shape = ts.shape().to_vec();
        let mismatch = index_shape.len() != shape.len()
            || index_shape.iter().zip(&shape).enumerate().any(|(i, (a, b))| i != axis && a != b)
            || index.len() != index_shape.iter().product::<usize>();
        if mismatch {
            return Err(TensorError::ShapeMismatch {
                op: "gather",
                lhs: shape,
                rhs: index_shape.to_vec(),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let m = index_shape[axis];
        let d = ts.data();
        let mut out = vec![0.0f32; index.len()];
        for o in 0..outer {
            for j in 0..m {
                for i in 0..inner {
                    let k = (o * m + j) * inner + i;
                    let l = index[k];
                    if l >= len {
                        return Err(TensorError::IndexOutOfRange { index: l, len });
                    }
                    out[k] = d[(o * len + l) * inner + i];
                }
            }
        }
        let rg = self.any_grad(&[src]);
        Ok(self.push(
            Tensor::new(index_shape, out)?,
            Op::Gather {
                src,
                axis,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Picks rows of `table` (first axis) in the given order.
    pub fn select_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let shape = tt.shape().to_vec();
        let (&p, rest) = shape.split_first().ok_or(TensorError::Empty("select_rows"))?;
        let per: usize = rest.iter().product();
        let mut out = Vec::with_capacity(rows.len() * per);
        for &r in rows {
            if r >= p {
                return Err(TensorError::IndexOutOfRange { index: r, len: p });
            }
            out.extend_from_slice(&tt.data()[r * per..(r + 1) * per]);
        }
        let mut out_shape = vec![rows.len()];
        out_shape.extend_from_slice(rest);
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            Tensor::new(&out_shape, out)?,
            Op::SelectRows {
                table,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Same-padded 2-D convolution. `x` is `[C_in,H,W]` or `[N,C_in,H,W]`,
    /// `w` is `[C_out,C_in,kH,kW]` with odd kernel sizes, `b` is `[C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let err = |rhs: &[usize]| TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: xs.clone(),
            rhs: rhs.to_vec(),
        };
        let (batch, c_in, height, width) = match xs.as_slice() {
            [c, h, w] => (1, *c, *h, *w),
            [n, c, h, w] => (*n, *c, *h, *w),
            _ => return Err(err(&ws)),
        };
        let [c_out, wc_in, kh, kw] = ws.as_slice() else {
            return Err(err(&ws));
        };
        if *wc_in != c_in || kh % 2 == 0 || kw % 2 == 0 {
            return Err(err(&ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [*c_out] {
                return Err(err(self.shape(b)));
            }
        }
        let dims = ConvDims {
            batch,
            c_in,
            c_out: *c_out,
            height,
            width,
            kh: *kh,
            kw: *kw,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            dims,
        );
        check_finite("conv2d", &out)?;
        let out_shape = if xs.len() == 3 {
            vec![*c_out, height, width]
        } else {
            vec![batch, *c_out, height, width]
        };
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Conv2d { x, w, b, dims }, rg))
    }

    /// Fully connected layer: `x` is `[n]` or `[rows,n]`, `w` is `[m,n]`,
    /// `b` is `[m]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let err = || TensorError::ShapeMismatch {
            op: "dense",
            lhs: xs.clone(),
            rhs: ws.clone(),
        };
        let (rows, n) = match xs.as_slice() {
            [n] => (1, *n),
            [r, n] => (*r, *n),
            _ => return Err(err()),
        };
        let [m, wn] = ws.as_slice() else {
            return Err(err());
        };
        if *wn != n {
            return Err(err());
        }
        if let Some(b) = b {
            if self.shape(b) != [*m] {
                return Err(err());
            }
        }
        let out = kernels::dense_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            rows,
            n,
            *m,
        );
        check_finite("dense", &out)?;
        let out_shape = if xs.len() == 1 { vec![*m] } else { vec![rows, *m] };
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::Dense { x, w, b, rows }, rg))
    }

    fn square_dim(&self, w: Var, op: &'static str) -> Result<usize> {
        match self.shape(w) {
            [n, m] if n == m => Ok(*n),
            s => Err(TensorError::ShapeMismatch {
                op,
                lhs: s.to_vec(),
                rhs: s.to_vec(),
            }),
        }
    }

    /// `log |det w|` of a square matrix, as a rank-0 tensor.
    pub fn log_abs_det(&mut self, w: Var) -> Result<Var> {
        let n = self.square_dim(w, "log_abs_det")?;
        let m: Vec<f64> = self.value(w).data().iter().map(|&v| v as f64).collect();
        let det = kernels::determinant(&m, n);
        if det.abs() <= 1e-12 {
            return Err(TensorError::Singular(det));
        }
        let inv = kernels::inverse(&m, n).ok_or(TensorError::Singular(det))?;
        let rg = self.any_grad(&[w]);
        Ok(self.push(Tensor::scalar(det.abs().ln() as f32), Op::LogAbsDet { w, inv }, rg))
    }

    pub fn mat_inverse(&mut self, w: Var) -> Result<Var> {
        let n = self.square_dim(w, "mat_inverse")?;
        let m: Vec<f64> = self.value(w).data().iter().map(|&v| v as f64).collect();
        let det = kernels::determinant(&m, n);
        if det.abs() <= 1e-12 {
            return Err(TensorError::Singular(det));
        }
        let inv = kernels::inverse(&m, n).ok_or(TensorError::Singular(det))?;
        let data: Vec<f32> = inv.iter().map(|&v| v as f32).collect();
        check_finite("mat_inverse", &data)?;
        let rg = self.any_grad(&[w]);
        Ok(self.push(Tensor::new(&[n, n], data)?, Op::MatInverse { w }, rg))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let out_shape = node.value.shape();
                let same = ta.shape() == out_shape && tb.shape() == out_shape;
                let ia = (!same).then(|| broadcast_index(ta.shape(), out_shape));
                let ib = (!same).then(|| broadcast_index(tb.shape(), out_shape));
                let (da, db, y) = (ta.data(), tb.data(), node.value.data());
                let pick = |ix: &Option<Vec<usize>>, k: usize| ix.as_ref().map_or(k, |v| v[k]);
                if needs(*a) {
                    let acc = accumulate(&mut grads[a.0], da.len());
                    for (k, &gk) in g.iter().enumerate() {
                        let (i, j) = (pick(&ia, k), pick(&ib, k));
                        acc[i] += gk
                            * match kind {
                                BinaryKind::Add | BinaryKind::Sub => 1.0,
                                BinaryKind::Mul => db[j],
                                BinaryKind::Div => 1.0 / db[j],
                                BinaryKind::Pow => db[j] * da[i].powf(db[j] - 1.0),
                            };
                    }
                }
                if needs(*b) {
                    let acc = accumulate(&mut grads[b.0], db.len());
                    for (k, &gk) in g.iter().enumerate() {
                        let (i, j) = (pick(&ia, k), pick(&ib, k));
                        acc[j] += gk
                            * match kind {
                                BinaryKind::Add => 1.0,
                                BinaryKind::Sub => -1.0,
                                BinaryKind::Mul => da[i],
                                BinaryKind::Div => -y[k] / db[j],
                                BinaryKind::Pow => {
                                    if da[i] > 0.0 {
                                        y[k] * da[i].ln()
                                    } else {
                                        0.0
                                    }
                                }
                            };
                    }
                }
            }
            Op::Unary { kind, x } => {
                if !needs(*x) {
                    return;
                }
                let (dx, y) = (self.value(*x).data(), node.value.data());
                let acc = accumulate(&mut grads[x.0], dx.len());
                for k in 0..g.len() {
                    let d = match kind {
                        UnaryKind::Neg => -1.0,
                        UnaryKind::Exp => y[k],
                        UnaryKind::Log => 1.0 / dx[k],
                        UnaryKind::Tanh => 1.0 - y[k] * y[k],
                        UnaryKind::Relu => {
                            if dx[k] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Softplus => sigmoid(dx[k]),
                        UnaryKind::Sqrt => {
                            if y[k] > 0.0 {
                                0.5 / y[k]
                            } else {
                                0.0
                            }
                        }
                    };
                    acc[k] += g[k] * d;
                }
            }
            Op::Scale { x, factor } => {
                if needs(*x) {
                    let acc = accumulate(&mut grads[x.0], g.len());
                    for (a, &gk) in acc.iter_mut().zip(g) {
                        *a += gk * factor;
                    }
                }
            }
            Op::Shift { x } | Op::Reshape(x) => {
                if needs(*x) {
                    let acc = accumulate(&mut grads[x.0], g.len());
                    for (a, &gk) in acc.iter_mut().zip(g) {
                        *a += gk;
                    }
                }
            }
            Op::ClampMin { x, min } => {
                if needs(*x) {
                    let dx = self.value(*x).data();
                    let acc = accumulate(&mut grads[x.0], g.len());
                    for k in 0..g.len() {
                        if dx[k] >= *min {
                            acc[k] += g[k];
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if needs(*x) {
                    let n = self.value(*x).numel();
                    let acc = accumulate(&mut grads[x.0], n);
                    for a in acc.iter_mut() {
                        *a += g[0];
                    }
                }
            }
            Op::SumAxis { x, axis } => {
                if needs(*x) {
                    let shape = self.value(*x).shape();
                    let (outer, len, inner) = split_axis(shape, *axis);
                    let acc = accumulate(&mut grads[x.0], outer * len * inner);
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                acc[(o * len + l) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::Narrow { x, axis, start } => {
                if needs(*x) {
                    let shape = self.value(*x).shape();
                    let (outer, full, inner) = split_axis(shape, *axis);
                    let len = node.value.shape()[*axis];
                    let acc = accumulate(&mut grads[x.0], outer * full * inner);
                    for o in 0..outer {
                        let dst = &mut acc[(o * full + start) * inner..(o * full + start + len) * inner];
                        for (a, &gk) in dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                            *a += gk;
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).shape()[*axis];
                    if needs(p) {
                        let acc = accumulate(&mut grads[p.0], outer * len * inner);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            for (a, &gk) in acc[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                *a += gk;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Softmax { x, axis } => {
                if needs(*x) {
                    let y = node.value.data();
                    let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                    let acc = accumulate(&mut grads[x.0], y.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let dot: f32 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                acc[at(l)] += y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Cumsum { x, axis } => {
                if needs(*x) {
                    let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                    let acc = accumulate(&mut grads[x.0], g.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut run = 0.0f32;
                            for l in (0..len).rev() {
                                let k = (o * len + l) * inner + i;
                                run += g[k];
                                acc[k] += run;
                            }
                        }
                    }
                }
            }
            Op::Gather { src, axis, index } => {
                if needs(*src) {
                    let shape = self.value(*src).shape();
                    let (outer, len, inner) = split_axis(shape, *axis);
                    let m = node.value.shape()[*axis];
                    let acc = accumulate(&mut grads[src.0], outer * len * inner);
                    for o in 0..outer {
                        for j in 0..m {
                            for i in 0..inner {
                                let k = (o * m + j) * inner + i;
                                acc[(o * len + index[k]) * inner + i] += g[k];
                            }
                        }
                    }
                }
            }
            Op::SelectRows { table, rows } => {
                if needs(*table) {
                    let tt = self.value(*table);
                    let per = tt.numel() / tt.shape()[0];
                    let acc = accumulate(&mut grads[table.0], tt.numel());
                    for (k, &r) in rows.iter().enumerate() {
                        for (a, &gk) in acc[r * per..(r + 1) * per].iter_mut().zip(&g[k * per..(k + 1) * per]) {
                            *a += gk;
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, dims } => {
                let (gx, gw, gb) =
                    kernels::conv2d_backward(self.value(*x).data(), self.value(*w).data(), g, *dims, needs(*x));
                if let Some(gx) = gx {
                    add_into(accumulate(&mut grads[x.0], gx.len()), &gx);
                }
                if needs(*w) {
                    add_into(accumulate(&mut grads[w.0], gw.len()), &gw);
                }
                if let Some(b) = b.filter(|b| needs(*b)) {
                    add_into(accumulate(&mut grads[b.0], gb.len()), &gb);
                }
            }
            Op::Dense { x, w, b, rows } => {
                let ws = self.value(*w).shape();
                let (m, n) = (ws[0], ws[1]);
                let (gx, gw, gb) =
                    kernels::dense_backward(self.value(*x).data(), self.value(*w).data(), g, *rows, n, m);
                if needs(*x) {
                    add_into(accumulate(&mut grads[x.0], gx.len()), &gx);
                }
                if needs(*w) {
                    add_into(accumulate(&mut grads[w.0], gw.len()), &gw);
                }
                if let Some(b) = b.filter(|b| needs(*b)) {
                    add_into(accumulate(&mut grads[b.0], gb.len()), &gb);
                }
            }
            Op::LogAbsDet { w, inv } => {
                if needs(*w) {
                    // d log|det W| / dW = W^{-T}
                    let n = self.value(*w).shape()[0];
                    let acc = accumulate(&mut grads[w.0], n * n);
                    for i in 0..n {
                        for j in 0..n {
                            acc[i * n + j] += g[0] * inv[j * n + i] as f32;
                        }
                    }
                }
            }
            Op::MatInverse { w } => {
                if needs(*w) {
                    // dW = -W^{-T} G W^{-T}
                    let n = self.value(*w).shape()[0];
                    let y = node.value.data();
                    let acc = accumulate(&mut grads[w.0], n * n);
                    for i in 0..n {
                        for j in 0..n {
                            let mut s = 0.0f32;
                            for k in 0..n {
                                for l in 0..n {
                                    s += y[k * n + i] * g[k * n + l] * y[j * n + l];
                                }
                            }
                            acc[i * n + j] -= s;
                        }
                    }
                }
            }
        }
    }
}

fn add_into(acc: &mut [f32], src: &[f32]) {
    for (a, &s) in acc.iter_mut().zip(src) {
        *a += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, shape: &[usize], data: &[f32]) -> Var {
        g.leaf(Tensor::new(shape, data.to_vec()).unwrap().with_requires_grad(true))
    }

    #[test]
    fn exp_of_zeros_is_ones() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3]));
        let y = g.exp(x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn pow_direct_evaluation() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.5));
        let e = g.constant(Tensor::scalar(2.2));
        let y = g.pow(x, e).unwrap();
        assert!((g.value(y).item().unwrap() - 0.217_637_64).abs() < 1e-6);
    }

    #[test]
    fn domain_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![1.0, 0.0]));
        assert!(matches!(g.log(x), Err(TensorError::Domain { .. })));
        let one = g.constant(Tensor::scalar(1.0));
        assert!(matches!(g.div(one, x), Err(TensorError::Domain { .. })));
        let neg = g.constant(Tensor::scalar(-1.0));
        let half = g.constant(Tensor::scalar(0.5));
        assert!(matches!(g.pow(neg, half), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn overflow_is_reported() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(200.0));
        assert!(matches!(g.exp(x), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.add(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 2], &[0.3, -1.0, 2.0, 5.0]);
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(&g, x).data(), &[1.0; 4]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[3], &[1.0, 2.0, 3.0]);
        let sq = g.square(x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(&g, x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2], &[1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn unused_parameters_get_zero_gradient() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2], &[1.0, 2.0]);
        let unused = leaf(&mut g, &[3], &[1.0, 2.0, 3.0]);
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.wrt(&g, unused).data(), &[0.0; 3]);
    }

    #[test]
    fn broadcast_keeps_operand_values() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let b = g.constant(Tensor::new(&[1, 3], vec![10.0, 20.0, 30.0]).unwrap());
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        assert_eq!(g.value(b).data(), &[10.0, 20.0, 30.0]);
    }

    #[test]
    fn conv_identity_and_box_filter() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 3, 3]));
        let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = g.conv2d(x, w, None).unwrap();
        let d = g.value(y).data();
        assert_eq!(d[4], 9.0);
        assert_eq!(d[0], 4.0);
        assert_eq!(d[1], 6.0);

        let x = g.constant(Tensor::randn(&[2, 3, 4, 5], 1.0, &mut rand::rng()));
        let eye = g.constant(Tensor::eye(3).reshape(&[3, 3, 1, 1]).unwrap());
        let bias = g.constant(Tensor::zeros(&[3]));
        let y = g.conv2d(x, eye, Some(bias)).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[2, 3, 3]));
        let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        assert!(g.conv2d(x, w, None).is_err());
    }

    #[test]
    fn dense_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![2.0, 3.0]));
        let w = g.constant(Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap());
        let b = g.constant(Tensor::from_vec(vec![1.0]));
        let y = g.dense(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[6.0]);
        let eye = g.constant(Tensor::eye(2));
        let y = g.dense(x, eye, None).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 3.0]);
        let bad = g.constant(Tensor::zeros(&[2, 3]));
        assert!(g.dense(x, bad, None).is_err());
    }

    #[test]
    fn log_abs_det_of_scaled_identity() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::eye(3).map(|v| v * 2.0));
        let l = g.log_abs_det(w).unwrap();
        assert!((g.value(l).item().unwrap() - 3.0 * 2f32.ln()).abs() < 1e-6);
        let s = g.constant(Tensor::zeros(&[3, 3]));
        assert!(matches!(g.log_abs_det(s), Err(TensorError::Singular(_))));
    }

    #[test]
    fn gather_and_cumsum() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 4, 2], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]).unwrap());
        let c = g.cumsum(x, 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 10.0, 3.0, 30.0, 6.0, 60.0, 10.0, 100.0]);
        let picked = g.gather(x, 1, &[3, 0], &[1, 1, 2]).unwrap();
        assert_eq!(g.value(picked).data(), &[4.0, 10.0]);
    }
}
