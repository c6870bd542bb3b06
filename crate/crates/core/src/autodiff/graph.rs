use crate::scalar::Scalar;

use super::{AutodiffError, Mode, Tensor};

/// Floor applied to denominators and log arguments in [`Mode::Train`].
pub const CLAMP_FLOOR: f64 = 1e-12;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary<S> {
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
    Sin,
    Cos,
    PowConst(S),
    AddConst(S),
    ScaleConst(S),
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary<S>, Var),
    Pow(Var, Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumLast { x: Var, width: usize },
    Softmax(Var),
    Dot(Var, Var),
    L2Norm(Var),
    Cross(Var, Var),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so every node's
/// inputs have smaller indices than the node itself.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    mode: Mode,
    recording: bool,
    backward_done: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Tensor<S> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Borrowed gradient data, `None` when unreachable.
    pub fn raw(&self, v: Var) -> Option<&[S]> {
        self.grads[v.0].as_deref()
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self::with_mode(S::DEFAULT_MODE)
    }

    pub fn with_mode(mode: Mode) -> Self {
        Graph { nodes: Vec::with_capacity(1024), mode, recording: true, backward_done: false }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Turns op recording on or off. With recording off every new node is a
    /// leaf, so backward only reaches inputs directly.
    pub fn set_recording(&mut self, on: bool) {
        self.recording = on;
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Clears the tape so the graph can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    /// Single value of a one-element node.
    pub fn item(&self, v: Var) -> S {
        self.nodes[v.0].value.item()
    }

    /// Records a leaf (input, parameter or constant).
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.input(t)
    }

    pub fn scalar(&mut self, v: S) -> Var {
        self.input(Tensor::scalar(v))
    }

    pub fn vector(&mut self, v: Vec<S>) -> Var {
        self.input(Tensor::vector(v))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.input(Tensor::zeros(shape))
    }

    fn push(&mut self, name: &'static str, value: Tensor<S>, op: Op<S>) -> Result<Var, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let op = if self.recording { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn floor(&self) -> S {
        S::c(CLAMP_FLOOR)
    }

    // ---- elementwise binary with suffix broadcasting ----

    fn broadcast_shape(&self, name: &'static str, a: Var, b: Var) -> Result<Vec<usize>, AutodiffError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        let (big, small, lsmall) = if la >= lb { (sa, sb, lb) } else { (sb, sa, la) };
        if lsmall == 1 || big.ends_with(small) || (la == lb && sa == sb) {
            Ok(big.to_vec())
        } else {
            Err(AutodiffError::ShapeMismatch { op: name, detail: format!("{:?} vs {:?}", sa, sb) })
        }
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let shape = self.broadcast_shape(name, a, b)?;
        let da = self.data(a);
        let db = self.data(b);
        let (la, lb) = (da.len(), db.len());
        let n = la.max(lb);
        let mut out = Vec::with_capacity(n);
        match kind {
            Binary::Add => out.extend((0..n).map(|i| da[i % la] + db[i % lb])),
            Binary::Sub => out.extend((0..n).map(|i| da[i % la] - db[i % lb])),
            Binary::Mul => out.extend((0..n).map(|i| da[i % la] * db[i % lb])),
            Binary::Div => {
                for i in 0..n {
                    let den = db[i % lb];
                    let den = match self.mode {
                        Mode::Train => clamp_den(den, self.floor()),
                        Mode::Exact => {
                            if den == S::zero() {
                                return Err(AutodiffError::InvalidDomain { op: "div", detail: "division by zero".into() });
                            }
                            den
                        }
                    };
                    out.push(da[i % la] / den);
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(name, value, Op::Binary(kind, a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Binary::Div, a, b)
    }

    /// Multiplies every element of `x` by the one-element tensor `s`.
    pub fn broadcast_scale(&mut self, s: Var, x: Var) -> Result<Var, AutodiffError> {
        if self.value(s).len() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "broadcast_scale",
                detail: format!("scale must have one element, got {:?}", self.shape(s)),
            });
        }
        self.mul(x, s)
    }

    // ---- elementwise unary ----

    fn unary(&mut self, kind: Unary<S>, x: Var) -> Result<Var, AutodiffError> {
        let floor = self.floor();
        let mode = self.mode;
        let xv = self.value(x);
        let (name, value) = match kind {
            Unary::Neg => ("neg", xv.map(|v| -v)),
            Unary::Exp => ("exp", xv.map(|v| v.exp())),
            Unary::Log => {
                if mode == Mode::Exact && xv.data().iter().any(|&v| v <= S::zero()) {
                    return Err(AutodiffError::InvalidDomain { op: "log", detail: "non-positive argument".into() });
                }
                ("log", xv.map(|v| if mode == Mode::Train && v < floor { floor.ln() } else { v.ln() }))
            }
            Unary::Tanh => ("tanh", xv.map(|v| v.tanh())),
            Unary::Sigmoid => ("sigmoid", xv.map(sigmoid)),
            Unary::Softplus => ("softplus", xv.map(softplus)),
            Unary::Sin => ("sin", xv.map(|v| v.sin())),
            Unary::Cos => ("cos", xv.map(|v| v.cos())),
            Unary::PowConst(p) => {
                if p.fract() != S::zero() && xv.data().iter().any(|&v| v < S::zero()) {
                    return Err(AutodiffError::InvalidDomain { op: "power", detail: "negative base".into() });
                }
                ("power", xv.map(|v| v.powf(p)))
            }
            Unary::AddConst(c) => ("add_const", xv.map(|v| v + c)),
            Unary::ScaleConst(c) => ("scale_const", xv.map(|v| v * c)),
        };
        self.push(name, value, Op::Unary(kind, x))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(Unary::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(Unary::Log, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(Unary::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(Unary::Softplus, x)
    }

    pub fn sin(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(Unary::Sin, x)
    }

    pub fn cos(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.unary(Unary::Cos, x)
    }

    /// Elementwise `x^p` for a constant exponent.
    pub fn powf(&mut self, x: Var, p: S) -> Result<Var, AutodiffError> {
        self.unary(Unary::PowConst(p), x)
    }

    pub fn add_const(&mut self, x: Var, c: S) -> Result<Var, AutodiffError> {
        self.unary(Unary::AddConst(c), x)
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var, AutodiffError> {
        self.unary(Unary::ScaleConst(c), x)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let n = self.neg(x)?;
        self.add_const(n, S::one())
    }

    /// Elementwise `x^p` where `p` is a one-element node. `x` must be nonnegative.
    pub fn pow(&mut self, x: Var, p: Var) -> Result<Var, AutodiffError> {
        if self.value(p).len() != 1 {
            return Err(AutodiffError::ShapeMismatch { op: "power", detail: "exponent must be a scalar".into() });
        }
        let pv = self.item(p);
        let xv = self.value(x);
        if xv.data().iter().any(|&v| v < S::zero()) {
            return Err(AutodiffError::InvalidDomain { op: "power", detail: "negative base".into() });
        }
        let value = xv.map(|v| v.powf(pv));
        self.push("power", value, Op::Pow(x, p))
    }

    // ---- linear algebra ----

    /// Matrix product. Supports `[m,k]x[k,n]`, `[m,k]x[k]` and `[k]x[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (m, k, n, out_shape) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n, vec![*m, *n]),
            ([m, k], [k2]) if k == k2 => (*m, *k, 1, vec![*m]),
            ([k], [k2, n]) if k == k2 => (1, *k, *n, vec![*n]),
            _ => {
                return Err(AutodiffError::ShapeMismatch { op: "matmul", detail: format!("{:?} x {:?}", sa, sb) })
            }
        };
        let da = self.data(a);
        let db = self.data(b);
        let mut out = vec![S::zero(); m * n];
        if n == 1 {
            for (i, o) in out.iter_mut().enumerate() {
                let row = &da[i * k..(i + 1) * k];
                *o = dot_slice(row, db);
            }
        } else {
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = da[i * k + p];
                    if av == S::zero() {
                        continue;
                    }
                    let brow = &db[p * n..(p + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        let value = Tensor::new(out_shape, out)?;
        self.push("matmul", value, Op::MatMul { a, b, m, k, n })
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch {
                op: "dot",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let v = dot_slice(self.data(a), self.data(b));
        self.push("dot", Tensor::scalar(v), Op::Dot(a, b))
    }

    pub fn l2_norm(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let v = self.value(x).norm_sq().sqrt();
        self.push("l2_norm", Tensor::scalar(v), Op::L2Norm(x))
    }

    pub fn cross(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        if self.shape(a) != [3] || self.shape(b) != [3] {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross",
                detail: format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            });
        }
        let c = cross3(self.data(a), self.data(b));
        self.push("cross", Tensor::vector(c.to_vec()), Op::Cross(a, b))
    }

    // ---- structure ----

    /// Concatenates along the first axis. Scalars count as length-1 vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::ShapeMismatch { op: "concat", detail: "no inputs".into() });
        }
        let tail = |s: &[usize]| -> Vec<usize> {
            if s.len() <= 1 {
                vec![]
            } else {
                s[1..].to_vec()
            }
        };
        let first_tail = tail(self.shape(parts[0]));
        let mut lead = 0;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if tail(s) != first_tail {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    detail: format!("{:?} vs trailing {:?}", s, first_tail),
                });
            }
            lead += s.first().copied().unwrap_or(1);
            total += self.value(p).len();
        }
        let mut data = Vec::with_capacity(total);
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![lead];
        shape.extend(first_tail);
        let value = Tensor::new(shape, data)?;
        self.push("concat", value, Op::Concat(parts.to_vec()))
    }

    /// Stacks equally shaped nodes into a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let inner = self.shape(parts[0]).to_vec();
        let flat: Vec<Var> = parts
            .iter()
            .map(|&p| {
                if self.shape(p) != inner.as_slice() {
                    return Err(AutodiffError::ShapeMismatch { op: "stack", detail: "unequal shapes".into() });
                }
                let mut s = vec![1];
                s.extend(&inner);
                self.reshape(p, s)
            })
            .collect::<Result<_, _>>()?;
        self.concat(&flat)
    }

    /// Contiguous range of the flattened data, returned as a vector.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let n = self.value(x).len();
        if start + len > n || len == 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice",
                detail: format!("[{}, {}) of {}", start, start + len, n),
            });
        }
        let data = self.data(x)[start..start + len].to_vec();
        self.push("slice", Tensor::vector(data), Op::Slice { x, start })
    }

    /// Rows `[start, start+count)` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var, AutodiffError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(AutodiffError::ShapeMismatch { op: "slice_rows", detail: format!("{:?}", shape) });
        }
        let w = shape[1];
        let s = self.slice(x, start * w, count * w)?;
        self.reshape(s, vec![count, w])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, AutodiffError> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let v: S = self.data(x).iter().copied().sum();
        self.push("sum", Tensor::scalar(v), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let d = self.data(x);
        let v: S = d.iter().copied().sum::<S>() / S::c(d.len() as f64);
        self.push("mean", Tensor::scalar(v), Op::Mean(x))
    }

    /// Sums over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let shape = self.shape(x).to_vec();
        let Some((&width, lead)) = shape.split_last() else {
            return Err(AutodiffError::ShapeMismatch { op: "sum_last", detail: "scalar input".into() });
        };
        let data: Vec<S> = self.data(x).chunks(width).map(|c| c.iter().copied().sum()).collect();
        let value = Tensor::new(lead.to_vec(), data)?;
        self.push("sum_last", value, Op::SumLast { x, width })
    }

    /// Softmax over all elements, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        let max = xv.data().iter().copied().fold(S::neg_infinity(), S::max);
        let mut e: Vec<S> = xv.data().iter().map(|&v| (v - max).exp()).collect();
        let z: S = e.iter().copied().sum();
        e.iter_mut().for_each(|v| *v /= z);
        let value = Tensor::new(xv.shape().to_vec(), e)?;
        self.push("softmax", value, Op::Softmax(x))
    }

    /// Dispatches an op by name; the typed methods are the primary interface.
    pub fn forward(&mut self, op: &str, inputs: &[Var]) -> Result<Var, AutodiffError> {
        let arity = |n: usize| -> Result<(), AutodiffError> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(AutodiffError::ShapeMismatch { op: "forward", detail: format!("{op} expects {n} inputs") })
            }
        };
        match op {
            "add" | "sub" | "mul" | "div" | "matmul" | "dot" | "cross-product-3d" | "power" | "broadcast-scale" => {
                arity(2)?;
                let (a, b) = (inputs[0], inputs[1]);
                match op {
                    "add" => self.add(a, b),
                    "sub" => self.sub(a, b),
                    "mul" => self.mul(a, b),
                    "div" => self.div(a, b),
                    "matmul" => self.matmul(a, b),
                    "dot" => self.dot(a, b),
                    "cross-product-3d" => self.cross(a, b),
                    "power" => self.pow(a, b),
                    _ => self.broadcast_scale(a, b),
                }
            }
            "concat" => self.concat(inputs),
            "sum" | "mean" | "exp" | "log" | "tanh" | "sigmoid" | "softplus" | "softmax" | "L2-norm" => {
                arity(1)?;
                let x = inputs[0];
                match op {
                    "sum" => self.sum(x),
                    "mean" => self.mean(x),
                    "exp" => self.exp(x),
                    "log" => self.log(x),
                    "tanh" => self.tanh(x),
                    "sigmoid" => self.sigmoid(x),
                    "softplus" => self.softplus(x),
                    "softmax" => self.softmax(x),
                    _ => self.l2_norm(x),
                }
            }
            _ => Err(AutodiffError::UnknownOp(op.to_string())),
        }
    }

    // ---- reverse pass ----

    /// Accumulates d(loss)/d(node) for every node on the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>, AutodiffError> {
        if self.backward_done {
            return Err(AutodiffError::BackwardTwice);
        }
        if self.nodes.is_empty() {
            return Err(AutodiffError::EmptyTape);
        }
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        let floor = self.floor();
        let mode = self.mode;
        let mut grads: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![S::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = node.value.data();
            match &node.op {
                Op::Leaf => {}
                Op::Binary(kind, a, b) => {
                    let da = self.data(*a);
                    let db = self.data(*b);
                    let (la, lb) = (da.len(), db.len());
                    let mut ga = vec![S::zero(); la];
                    let mut gb = vec![S::zero(); lb];
                    for (i, &gi) in g.iter().enumerate() {
                        let (ia, ib) = (i % la, i % lb);
                        match kind {
                            Binary::Add => {
                                ga[ia] += gi;
                                gb[ib] += gi;
                            }
                            Binary::Sub => {
                                ga[ia] += gi;
                                gb[ib] -= gi;
                            }
                            Binary::Mul => {
                                ga[ia] += gi * db[ib];
                                gb[ib] += gi * da[ia];
                            }
                            Binary::Div => {
                                let raw = db[ib];
                                let (den, clamped) = match mode {
                                    Mode::Train if raw.abs() < floor => (clamp_den(raw, floor), true),
                                    _ => (raw, false),
                                };
                                ga[ia] += gi / den;
                                if !clamped {
                                    gb[ib] -= gi * da[ia] / (den * den);
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Unary(kind, x) => {
                    let xd = self.data(*x);
                    let gx: Vec<S> = match kind {
                        Unary::Neg => g.iter().map(|&v| -v).collect(),
                        Unary::Exp => zip_map(&g, y, |gi, yi| gi * yi),
                        Unary::Log => zip_map(&g, xd, |gi, xi| {
                            if mode == Mode::Train && xi < floor {
                                S::zero()
                            } else {
                                gi / xi
                            }
                        }),
                        Unary::Tanh => zip_map(&g, y, |gi, yi| gi * (S::one() - yi * yi)),
                        Unary::Sigmoid => zip_map(&g, y, |gi, yi| gi * yi * (S::one() - yi)),
                        Unary::Softplus => zip_map(&g, xd, |gi, xi| gi * sigmoid(xi)),
                        Unary::Sin => zip_map(&g, xd, |gi, xi| gi * xi.cos()),
                        Unary::Cos => zip_map(&g, xd, |gi, xi| -gi * xi.sin()),
                        Unary::PowConst(p) => zip_map(&g, xd, |gi, xi| gi * *p * xi.powf(*p - S::one())),
                        Unary::AddConst(_) => g.clone(),
                        Unary::ScaleConst(c) => g.iter().map(|&v| v * *c).collect(),
                    };
                    accumulate(&mut grads, *x, gx);
                }
                Op::Pow(x, p) => {
                    let xd = self.data(*x);
                    let pv = self.item(*p);
                    let mut gp = S::zero();
                    let mut gx = Vec::with_capacity(xd.len());
                    for ((&gi, &xi), &yi) in g.iter().zip(xd).zip(y) {
                        let d = if xi == S::zero() {
                            if pv > S::one() {
                                S::zero()
                            } else if pv == S::one() {
                                S::one()
                            } else {
                                S::infinity()
                            }
                        } else {
                            pv * yi / xi
                        };
                        gx.push(gi * d);
                        if xi > S::zero() {
                            gp += gi * yi * xi.ln();
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *p, vec![gp]);
                }
                Op::MatMul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    let da = self.data(*a);
                    let db = self.data(*b);
                    // dA = G B^T, dB = A^T G
                    let mut ga = vec![S::zero(); m * k];
                    let mut gb = vec![S::zero(); k * n];
                    if n == 1 {
                        for i in 0..m {
                            let gi = g[i];
                            let arow = &da[i * k..(i + 1) * k];
                            let garow = &mut ga[i * k..(i + 1) * k];
                            for ((o, &bv), (gbv, &av)) in garow.iter_mut().zip(db).zip(gb.iter_mut().zip(arow)) {
                                *o = gi * bv;
                                *gbv += gi * av;
                            }
                        }
                        accumulate(&mut grads, *a, ga);
                        accumulate(&mut grads, *b, gb);
                        grads[idx] = Some(g);
                        continue;
                    }
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &db[p * n..(p + 1) * n];
                            ga[i * k + p] = dot_slice(grow, brow);
                            let av = da[i * k + p];
                            let gbrow = &mut gb[p * n..(p + 1) * n];
                            for (o, &gv) in gbrow.iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        accumulate(&mut grads, p, g[off..off + len].to_vec());
                        off += len;
                    }
                }
                Op::Slice { x, start } => {
                    let mut gx = vec![S::zero(); self.value(*x).len()];
                    gx[*start..*start + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Reshape(x) => accumulate(&mut grads, *x, g.clone()),
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    accumulate(&mut grads, *x, vec![g[0]; n]);
                }
                Op::Mean(x) => {
                    let n = self.value(*x).len();
                    accumulate(&mut grads, *x, vec![g[0] / S::c(n as f64); n]);
                }
                Op::SumLast { x, width } => {
                    let gx: Vec<S> = g.iter().flat_map(|&gi| std::iter::repeat(gi).take(*width)).collect();
                    accumulate(&mut grads, *x, gx);
                }
                Op::Softmax(x) => {
                    let gy: S = dot_slice(&g, y);
                    let gx = zip_map(&g, y, |gi, yi| yi * (gi - gy));
                    accumulate(&mut grads, *x, gx);
                }
                Op::Dot(a, b) => {
                    let ga: Vec<S> = self.data(*b).iter().map(|&v| v * g[0]).collect();
                    let gb: Vec<S> = self.data(*a).iter().map(|&v| v * g[0]).collect();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::L2Norm(x) => {
                    let norm = y[0];
                    let gx: Vec<S> = if norm == S::zero() {
                        vec![S::zero(); self.value(*x).len()]
                    } else {
                        self.data(*x).iter().map(|&v| g[0] * v / norm).collect()
                    };
                    accumulate(&mut grads, *x, gx);
                }
                Op::Cross(a, b) => {
                    let ga = cross3(self.data(*b), &g);
                    let gb = cross3(&g, self.data(*a));
                    accumulate(&mut grads, *a, ga.to_vec());
                    accumulate(&mut grads, *b, gb.to_vec());
                }
            }
            // keep the consumed gradient for callers
            grads[idx] = Some(g);
        }
        let shapes = self.nodes[..=loss.0].iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, g: Vec<S>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map<S: Scalar>(g: &[S], other: &[S], f: impl Fn(S, S) -> S) -> Vec<S> {
    g.iter().zip(other).map(|(&a, &b)| f(a, b)).collect()
}

#[inline]
pub(crate) fn dot_slice<S: Scalar>(a: &[S], b: &[S]) -> S {
    let n = a.len().min(b.len());
    let mut lanes = [S::zero(); 8];
    let (ca, cb) = (a[..n].chunks_exact(8), b[..n].chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut acc = S::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        acc += x * y;
    }
    lanes.iter().fold(acc, |s, &l| s + l)
}

#[inline]
pub(crate) fn cross3<S: Scalar>(a: &[S], b: &[S]) -> [S; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<S: Scalar>(v: S) -> S {
    // log(1 + e^v) without overflow
    v.max(S::zero()) + (-v.abs()).exp().ln_1p()
}

#[inline]
fn clamp_den<S: Scalar>(v: S, floor: S) -> S {
    if v.abs() < floor {
        if v < S::zero() {
            -floor
        } else {
            floor
        }
    } else {
        v
    }
}
