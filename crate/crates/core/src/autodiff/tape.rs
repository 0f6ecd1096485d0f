use std::collections::HashMap;

use super::{ParamId, ParamStore, Tensor};
use crate::cascade::intensity;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Saturation bound for the argument of `exp`.
pub const EXP_CLAMP: f64 = 50.0;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf(Option<ParamId>),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    LogSigmoid(Var),
    Clamp { x: Var, lo: T, hi: T },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Transpose(Var),
    GatherRows { x: Var, rows: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    TimeNll { c: Var, w: Var, dc: Vec<T>, dw: Vec<T> },
    StraightThrough(Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records tensor operations for one forward pass and replays them in
/// reverse to compute gradients.
///
/// Nodes are appended in evaluation order, so the vector itself is a
/// topological order of the graph. [`Tape::backward`] consumes the tape.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    frozen: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients<T> {
    leaves: HashMap<Var, Tensor<T>>,
    params: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    /// Add the parameter gradients into the store.
    pub fn apply_to(&self, store: &mut ParamStore<T>) {
        for (id, g) in &self.params {
            store.accumulate(*id, g);
        }
    }
}

fn shape_err<V>(op: &'static str, a: &[usize], b: &[usize]) -> Result<V> {
    Err(Error::Shape { op, detail: format!("{a:?} vs {b:?}") })
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::with_capacity(1024), param_vars: HashMap::new(), frozen: false }
    }

    /// Tape whose parameters enter as constants; nothing requires grad.
    pub fn inference() -> Self {
        Self { frozen: true, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { value, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf(None), false, "constant")
    }

    pub fn constant_scalar(&mut self, v: T) -> Result<Var> {
        self.constant(Tensor::scalar(v))
    }

    /// Differentiable leaf not tied to a parameter store.
    pub fn leaf(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf(None), true, "leaf")
    }

    /// Leaf that mirrors a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let rg = !self.frozen;
        self.nodes.push(Node { value: store.value(id).clone(), requires_grad: rg, op: Op::Leaf(Some(id)) });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg, "matmul")
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (x, y) = (self.value(a), self.value(b));
        if x.same_shape_as(y) {
            let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
            Tensor::new(x.shape().to_vec(), data)
        } else if y.is_scalar() {
            let q = y.item();
            Ok(x.map(|p| f(p, q)))
        } else if x.is_scalar() {
            let p = x.item();
            Ok(y.map(|q| f(p, q)))
        } else {
            shape_err(name, x.shape(), y.shape())
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |p, q| p + q)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |p, q| p - q)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |p, q| p * q)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| -v);
        let rg = self.rg(a);
        self.push(out, Op::Neg(a), rg, "neg")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(Real::sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg, "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.tanh());
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg, "tanh")
    }

    /// `exp` with its argument clamped to `±EXP_CLAMP`; saturated entries
    /// pass no gradient.
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let lim = T::lit(EXP_CLAMP);
        let out = self.value(a).map(|v| v.max(-lim).min(lim).exp());
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg, "exp")
    }

    /// Natural log; non-positive inputs are an error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::NonFinite("log"));
        }
        let out = self.value(a).map(|v| v.ln());
        let rg = self.rg(a);
        self.push(out, Op::Log(a), rg, "log")
    }

    /// `ln σ(x)` evaluated without forming `σ(x)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| -(-v).softplus());
        let rg = self.rg(a);
        self.push(out, Op::LogSigmoid(a), rg, "log_sigmoid")
    }

    /// Elementwise clamp to `[lo, hi]`; gradient is zero outside the range.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(lo).min(hi));
        let rg = self.rg(a);
        self.push(out, Op::Clamp { x: a, lo, hi }, rg, "clamp")
    }

    /// Concatenate along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::Shape { op: "concat", detail: "need parts and axis 0 or 1".into() });
        }
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| self.value(p).dims()).collect();
        let out = if axis == 1 {
            let rows = dims[0].0;
            if dims.iter().any(|d| d.0 != rows) {
                return Err(Error::Shape { op: "concat", detail: format!("row counts {dims:?}") });
            }
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row_slice(r));
                }
            }
            Tensor::matrix(rows, cols, data)?
        } else {
            let cols = dims[0].1;
            if dims.iter().any(|d| d.1 != cols) {
                return Err(Error::Shape { op: "concat", detail: format!("column counts {dims:?}") });
            }
            let rows: usize = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::matrix(rows, cols, data)?
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::Concat { parts: parts.to_vec(), axis }, rg, "concat")
    }

    /// `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims();
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || len == 0 || start + len > extent {
            return Err(Error::Shape {
                op: "slice",
                detail: format!("[{start}, {}) on axis {axis} of {r}x{c}", start + len),
            });
        }
        let v = self.value(a);
        let out = if axis == 0 {
            Tensor::matrix(len, c, v.data()[start * c..(start + len) * c].to_vec())?
        } else {
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&v.row_slice(i)[start..start + len]);
            }
            Tensor::matrix(r, len, data)?
        };
        let rg = self.rg(a);
        self.push(out, Op::Slice { x: a, axis, start }, rg, "slice")
    }

    /// Stack the listed rows of a matrix (rows may repeat).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let (r, c) = v.dims();
        if rows.is_empty() || rows.iter().any(|&i| i >= r) {
            return Err(Error::Shape { op: "gather_rows", detail: format!("rows {rows:?} of {r}x{c}") });
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(v.row_slice(i));
        }
        let out = Tensor::matrix(rows.len(), c, data)?;
        let rg = self.rg(a);
        self.push(out, Op::GatherRows { x: a, rows: rows.to_vec() }, rg, "gather_rows")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg, "transpose")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / T::from_usize_lossy(v.len()));
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg, "mean")
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let out = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg, "softmax")
    }

    /// Elementwise negative log density of next-event gaps under an
    /// exponential-affine intensity. `c` holds one offset per gap, `w` is the
    /// shared scalar slope and `gaps` are constants.
    pub fn time_nll(&mut self, c: Var, w: Var, gaps: &[T]) -> Result<Var> {
        let cv = self.value(c);
        if cv.len() != gaps.len() || !self.value(w).is_scalar() {
            return Err(Error::Shape {
                op: "time_nll",
                detail: format!("{} offsets, {} gaps, slope {:?}", cv.len(), gaps.len(), self.value(w).shape()),
            });
        }
        let wv = self.scalar(w);
        let mut vals = Vec::with_capacity(gaps.len());
        let mut dc = Vec::with_capacity(gaps.len());
        let mut dw = Vec::with_capacity(gaps.len());
        for (&ci, &gap) in cv.data().iter().zip(gaps) {
            let (v, a, b) = intensity::nll_with_partials(ci, wv, gap);
            vals.push(v);
            dc.push(a);
            dw.push(b);
        }
        let out = Tensor::new(cv.shape().to_vec(), vals)?;
        let rg = self.rg(c) || self.rg(w);
        self.push(out, Op::TimeNll { c, w, dc, dw }, rg, "time_nll")
    }

    /// Forward value `hard`, backward identity into `soft`.
    pub fn straight_through(&mut self, hard: Tensor<T>, soft: Var) -> Result<Var> {
        if !hard.same_shape_as(self.value(soft)) {
            return shape_err("straight_through", hard.shape(), self.value(soft).shape());
        }
        let rg = self.rg(soft);
        self.push(hard, Op::StraightThrough(soft), rg, "straight_through")
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let loss_shape = self.value(loss).shape().to_vec();
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        grads[loss.0] = Some(Tensor::filled(&loss_shape, T::one()));

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf(_) = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
        }

        let mut out = Gradients::default();
        for (idx, node) in self.nodes.iter().enumerate().take(n) {
            if let Op::Leaf(pid) = node.op {
                if !node.requires_grad {
                    continue;
                }
                let g = grads[idx].take().unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                if !g.all_finite() {
                    return Err(Error::NonFinite("backward"));
                }
                match pid {
                    Some(p) => out.params.push((p, g)),
                    None => {
                        out.leaves.insert(Var(idx), g);
                    }
                }
            }
        }
        // Parameters registered after the loss still receive a zero gradient.
        for (&pid, &v) in &self.param_vars {
            if v.0 >= n {
                out.params.push((pid, Tensor::zeros(self.nodes[v.0].value.shape())));
            }
        }
        out.params.sort_by_key(|(p, _)| *p);
        Ok(out)
    }

    fn send(&self, grads: &mut [Option<Tensor<T>>], to: Var, g: Tensor<T>) {
        if !self.nodes[to.0].requires_grad {
            return;
        }
        match &mut grads[to.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reduce an elementwise gradient to the shape of a (possibly scalar) operand.
    fn reduce_to(&self, g: Tensor<T>, target: Var) -> Tensor<T> {
        let t = self.value(target);
        if t.is_scalar() && !g.is_scalar() {
            Tensor::new(t.shape().to_vec(), vec![g.sum()]).expect("scalar shape")
        } else {
            g
        }
    }

    fn zip_map(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data).expect("matching shapes")
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let ga = g.matmul(&bv.transpose())?;
                    self.send(grads, *a, reshape_like(ga, av));
                }
                if self.rg(*b) {
                    let gb = av.transpose().matmul(g)?;
                    self.send(grads, *b, reshape_like(gb, bv));
                }
            }
            Op::Add(a, b) => {
                let ga = self.reduce_to(g.clone(), *a);
                self.send(grads, *a, ga);
                let gb = self.reduce_to(g.clone(), *b);
                self.send(grads, *b, gb);
            }
            Op::Sub(a, b) => {
                let ga = self.reduce_to(g.clone(), *a);
                self.send(grads, *a, ga);
                let gb = self.reduce_to(g.map(|v| -v), *b);
                self.send(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let ga = broadcast_mul(g, bv);
                    self.send(grads, *a, self.reduce_to(ga, *a));
                }
                if self.rg(*b) {
                    let gb = broadcast_mul(g, av);
                    self.send(grads, *b, self.reduce_to(gb, *b));
                }
            }
            Op::Neg(a) => self.send(grads, *a, g.map(|v| -v)),
            Op::Sigmoid(a) => {
                let ga = Self::zip_map(g, out, |gv, s| gv * s * (T::one() - s));
                self.send(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = Self::zip_map(g, out, |gv, t| gv * (T::one() - t * t));
                self.send(grads, *a, ga);
            }
            Op::Exp(a) => {
                let lim = T::lit(EXP_CLAMP);
                let x = self.value(*a);
                let masked = Self::zip_map(g, out, |gv, e| gv * e);
                let ga = Self::zip_map(&masked, x, |v, xv| if xv.abs() > lim { T::zero() } else { v });
                self.send(grads, *a, ga);
            }
            Op::Log(a) => {
                let ga = Self::zip_map(g, self.value(*a), |gv, x| gv / x);
                self.send(grads, *a, ga);
            }
            Op::LogSigmoid(a) => {
                let ga = Self::zip_map(g, self.value(*a), |gv, x| gv * (-x).sigmoid());
                self.send(grads, *a, ga);
            }
            Op::Clamp { x, lo, hi } => {
                let ga = Self::zip_map(g, self.value(*x), |gv, v| if v < *lo || v > *hi { T::zero() } else { gv });
                self.send(grads, *x, ga);
            }
            Op::Concat { parts, axis } => {
                let (rows, cols) = out.dims();
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.value(p).dims();
                    let mut data = Vec::with_capacity(pr * pc);
                    if *axis == 1 {
                        for r in 0..rows {
                            data.extend_from_slice(&g.data()[r * cols + offset..r * cols + offset + pc]);
                        }
                        offset += pc;
                    } else {
                        data.extend_from_slice(&g.data()[offset * cols..(offset + pr) * cols]);
                        offset += pr;
                    }
                    let gp = Tensor::new(self.value(p).shape().to_vec(), data)?;
                    self.send(grads, p, gp);
                }
            }
            Op::Slice { x, axis, start } => {
                let xv = self.value(*x);
                let (_, c) = xv.dims();
                let mut full = Tensor::zeros(xv.shape());
                let (gr, gc) = g.dims();
                for r in 0..gr {
                    for k in 0..gc {
                        let (rr, cc) = if *axis == 0 { (r + start, k) } else { (r, k + start) };
                        full.data_mut()[rr * c + cc] = g.get(r, k);
                    }
                }
                self.send(grads, *x, full);
            }
            Op::GatherRows { x, rows } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut full = Tensor::zeros(xv.shape());
                for (k, &r) in rows.iter().enumerate() {
                    let src = g.row_slice(k);
                    let dst = &mut full.data_mut()[r * c..(r + 1) * c];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
                self.send(grads, *x, full);
            }
            Op::Transpose(a) => {
                let ga = reshape_like(g.transpose(), self.value(*a));
                self.send(grads, *a, ga);
            }
            Op::Sum(a) => {
                let v = g.item();
                self.send(grads, *a, Tensor::filled(self.value(*a).shape(), v));
            }
            Op::Mean(a) => {
                let n = T::from_usize_lossy(self.value(*a).len());
                let v = g.item() / n;
                self.send(grads, *a, Tensor::filled(self.value(*a).shape(), v));
            }
            Op::Softmax(a) => {
                let (rows, cols) = out.dims();
                let mut data = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    let s = out.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot: T = s.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for k in 0..cols {
                        data[r * cols + k] = s[k] * (gr[k] - dot);
                    }
                }
                self.send(grads, *a, Tensor::new(out.shape().to_vec(), data)?);
            }
            Op::TimeNll { c, w, dc, dw } => {
                let gc: Vec<T> = g.data().iter().zip(dc).map(|(&a, &b)| a * b).collect();
                let gw: T = g.data().iter().zip(dw).map(|(&a, &b)| a * b).sum();
                self.send(grads, *c, Tensor::new(self.value(*c).shape().to_vec(), gc)?);
                self.send(grads, *w, Tensor::new(self.value(*w).shape().to_vec(), vec![gw])?);
            }
            Op::StraightThrough(soft) => self.send(grads, *soft, g.clone()),
        }
        Ok(())
    }
}

fn reshape_like<T: Real>(t: Tensor<T>, like: &Tensor<T>) -> Tensor<T> {
    Tensor::new(like.shape().to_vec(), t.into_data()).expect("same element count")
}

fn broadcast_mul<T: Real>(g: &Tensor<T>, other: &Tensor<T>) -> Tensor<T> {
    if other.is_scalar() {
        let o = other.item();
        g.map(|v| v * o)
    } else if g.is_scalar() {
        let gv = g.item();
        other.map(|v| v * gv)
    } else {
        Tape::<T>::zip_map(g, other, |a, b| a * b)
    }
}

pub(crate) fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (rows, cols) = x.dims();
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let row = x.row_slice(r);
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: T = exps.iter().copied().sum();
        data.extend(exps.into_iter().map(|e| e / z));
    }
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}
