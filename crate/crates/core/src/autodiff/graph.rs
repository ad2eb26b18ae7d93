use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary elementwise op is spread over the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// `[m]` or `[1, m]` added to every row of `[n, m]`.
    Rows,
    /// One value added to everything.
    Scalar,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Pow(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>),
    L2Norm(Var),
    SumLast(Var),
    Sum(Var),
    Mean(Var),
    Gather(Var, Vec<usize>),
    Reshape(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b, _) | Op::Sub(a, b, _) | Op::Mul(a, b) | Op::Div(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Shift(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Pow(a, _)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::L2Norm(a)
            | Op::SumLast(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Gather(a, _)
            | Op::Reshape(a) => vec![*a],
            Op::Concat(vs) => vs.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Eagerly evaluated computation graph recorded for one reverse pass.
///
/// Nodes are appended in evaluation order, which is a topological order, so
/// `backward` walks the node list in reverse exactly once.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that needed one.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros of the right shape when `v` was detached or
    /// did not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Concatenation of the gradients of `vars`, in order.
    pub fn flat(&self, vars: &[Var]) -> Vec<f64> {
        let mut out = Vec::new();
        for &v in vars {
            match self.grads.get(v.0).and_then(|g| g.as_ref()) {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, self.shapes[v.0].iter().product())),
            }
        }
        out
    }
}

fn reduce_broadcast(gy: &[f64], target_len: usize, bc: Broadcast) -> Vec<f64> {
    match bc {
        Broadcast::Same => gy.to_vec(),
        Broadcast::Scalar => vec![gy.iter().sum()],
        Broadcast::Rows => {
            let mut out = vec![0.0; target_len];
            for chunk in gy.chunks(target_len) {
                for (o, g) in out.iter_mut().zip(chunk) {
                    *o += g;
                }
            }
            out
        }
    }
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn log_softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
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

    /// A leaf that gradients flow into.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant copy of `v`: same value, no gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, name: &'static str, op: Op, value: Tensor) -> Result<Var> {
        let node = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name, node });
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(node))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            node: self.nodes.len(),
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Broadcast::Same)
        } else if sb.is_empty() {
            Ok(Broadcast::Scalar)
        } else if sa.len() == 2
            && ((sb.len() == 1 && sb[0] == sa[1]) || (sb.len() == 2 && sb[0] == 1 && sb[1] == sa[1]))
        {
            Ok(Broadcast::Rows)
        } else {
            Err(self.mismatch(op, a, b))
        }
    }

    fn binary_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, Broadcast)> {
        let bc = self.broadcast_kind(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data: Vec<f64> = match bc {
            Broadcast::Same => ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Scalar => {
                let y = tb.data()[0];
                ta.data().iter().map(|&x| f(x, y)).collect()
            }
            Broadcast::Rows => {
                let m = tb.len();
                ta.data().iter().enumerate().map(|(i, &x)| f(x, tb.data()[i % m])).collect()
            }
        };
        Ok((Tensor::new(ta.shape().to_vec(), data)?, bc))
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())?;
        self.push(name, op, value)
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let av = ta[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for (o, &bv) in row.iter_mut().zip(&tb[p * m..(p + 1) * m]) {
                    *o += av * bv;
                }
            }
        }
        let value = Tensor::matrix(n, m, out)?;
        self.push("matmul", Op::MatMul(a, b), value)
    }

    /// Elementwise sum; `b` may be a row vector (added to every row) or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, bc) = self.binary_broadcast("add", a, b, |x, y| x + y)?;
        self.push("add", Op::Add(a, b, bc), value)
    }

    /// Elementwise difference with the same broadcasting as [`Graph::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, bc) = self.binary_broadcast("sub", a, b, |x, y| x - y)?;
        self.push("sub", Op::Sub(a, b, bc), value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("mul", Op::Mul(a, b), value)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("div", a, b));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x / y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("div", Op::Div(a, b), value)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, Op::Scale(a, c), |x| x * c)
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("shift", a, Op::Shift(a), |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    /// `max(x, 0)`; the hinge used by the triplet loss.
    pub fn max0(&mut self, a: Var) -> Result<Var> {
        self.relu(a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, Op::Log(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, Op::Square(a), |x| x * x)
    }

    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var> {
        self.unary("pow", a, Op::Pow(a, p), |x| x.powf(p))
    }

    fn rowwise(&mut self, name: &'static str, a: Var, op: Op, f: fn(&[f64], &mut [f64])) -> Result<Var> {
        let t = self.value(a);
        if t.rank() == 0 || t.is_empty() {
            return Err(Error::ShapeMismatch {
                op: name,
                node: self.nodes.len(),
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let c = t.cols();
        let mut out = vec![0.0; t.len()];
        for (x, o) in t.data().chunks(c).zip(out.chunks_mut(c)) {
            f(x, o);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push(name, op, value)
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.rowwise("softmax", a, Op::Softmax(a), softmax_row)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.rowwise("log_softmax", a, Op::LogSoftmax(a), log_softmax_row)
    }

    /// Joins along the last axis. All parts must have the same rank, and the
    /// same row count when they are matrices.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat parts"))?;
        let rank = self.shape(first).len();
        let rows = self.value(first).rows();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != rank || rank == 0 || self.value(p).rows() != rows {
                return Err(self.mismatch("concat", first, p));
            }
        }
        let cols: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = cols.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let shape = if rank == 2 { vec![rows, total] } else { vec![total] };
        let value = Tensor::new(shape, data)?;
        self.push("concat", Op::Concat(parts.to_vec()), value)
    }

    fn reduce_last(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(&[f64]) -> f64) -> Result<Var> {
        let t = self.value(a);
        if t.rank() == 0 {
            return Err(Error::ShapeMismatch {
                op: name,
                node: self.nodes.len(),
                lhs: vec![],
                rhs: vec![],
            });
        }
        let data: Vec<f64> = t.data().chunks(t.cols().max(1)).map(f).collect();
        let shape = if t.rank() == 2 { vec![t.shape()[0]] } else { vec![] };
        let value = Tensor::new(shape, data)?;
        self.push(name, op, value)
    }

    /// Euclidean norm over the last axis: `[n, m] -> [n]`, `[m] -> []`.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        self.reduce_last("l2_norm", a, Op::L2Norm(a), |r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
    }

    /// Sum over the last axis: `[n, m] -> [n]`, `[m] -> []`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        self.reduce_last("sum_last", a, Op::SumLast(a), |r| r.iter().sum())
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).data().iter().sum();
        self.push("sum", Op::Sum(a), Tensor::scalar(v))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Empty("mean of empty tensor"));
        }
        let v = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Op::Mean(a), Tensor::scalar(v))
    }

    /// Picks one entry per row of a matrix (`indices.len() == rows`), or the
    /// listed entries of a vector.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let data: Vec<f64> = match t.rank() {
            2 => {
                if indices.len() != t.rows() {
                    return Err(Error::ShapeMismatch {
                        op: "gather",
                        node: self.nodes.len(),
                        lhs: t.shape().to_vec(),
                        rhs: vec![indices.len()],
                    });
                }
                let c = t.cols();
                indices
                    .iter()
                    .enumerate()
                    .map(|(r, &i)| {
                        if i >= c {
                            Err(Error::OutOfRange {
                                what: "gather column",
                                index: i,
                                len: c,
                            })
                        } else {
                            Ok(t.data()[r * c + i])
                        }
                    })
                    .collect::<Result<_>>()?
            }
            1 => indices
                .iter()
                .map(|&i| {
                    t.data().get(i).copied().ok_or(Error::OutOfRange {
                        what: "gather",
                        index: i,
                        len: t.len(),
                    })
                })
                .collect::<Result<_>>()?,
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "gather",
                    node: self.nodes.len(),
                    lhs: vec![],
                    rhs: vec![indices.len()],
                })
            }
        };
        let value = Tensor::vector(data);
        self.push("gather", Op::Gather(a, indices.to_vec()), value)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                node: self.nodes.len(),
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::new(shape.to_vec(), t.data().to_vec())?;
        self.push("reshape", Op::Reshape(a), value)
    }

    /// Reverse pass from a one-element output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let out_value = self.value(out);
        if out_value.len() != 1 {
            return Err(Error::NonScalarOutput(out_value.shape().to_vec()));
        }
        let n = out.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[out.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: "backward", node: i });
                }
            }
        }
        let shapes = self.nodes[..n].iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, x) in acc.iter_mut().zip(&g) {
                    *a += x;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, y: &Tensor, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                let (ta, tb) = (val(*a), val(*b));
                if self.nodes[a.0].needs_grad {
                    let mut ga = vec![0.0; n * k];
                    for i in 0..n {
                        let grow = &gy[i * m..(i + 1) * m];
                        for p in 0..k {
                            ga[i * k + p] = grow.iter().zip(&tb[p * m..(p + 1) * m]).map(|(g, b)| g * b).sum();
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = vec![0.0; k * m];
                    for i in 0..n {
                        let grow = &gy[i * m..(i + 1) * m];
                        for p in 0..k {
                            let av = ta[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, g) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *o += av * g;
                            }
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b, bc) => {
                self.accumulate(grads, *a, gy.to_vec());
                let gb = reduce_broadcast(gy, self.value(*b).len(), *bc);
                self.accumulate(grads, *b, gb);
            }
            Op::Sub(a, b, bc) => {
                self.accumulate(grads, *a, gy.to_vec());
                let gb = reduce_broadcast(gy, self.value(*b).len(), *bc);
                self.accumulate(grads, *b, gb.into_iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ga = gy.iter().zip(tb).map(|(g, y)| g * y).collect();
                let gb = gy.iter().zip(ta).map(|(g, x)| g * x).collect();
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ga = gy.iter().zip(tb).map(|(g, y)| g / y).collect();
                let gb = gy
                    .iter()
                    .zip(ta.iter().zip(tb))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, gy.iter().map(|g| g * c).collect()),
            Op::Shift(a) | Op::Reshape(a) => self.accumulate(grads, *a, gy.to_vec()),
            Op::Relu(a) => {
                let g = gy.iter().zip(val(*a)).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                self.accumulate(grads, *a, g);
            }
            Op::Exp(a) => self.accumulate(grads, *a, gy.iter().zip(y.data()).map(|(g, y)| g * y).collect()),
            Op::Log(a) => self.accumulate(grads, *a, gy.iter().zip(val(*a)).map(|(g, x)| g / x).collect()),
            Op::Square(a) => {
                self.accumulate(grads, *a, gy.iter().zip(val(*a)).map(|(g, x)| 2.0 * g * x).collect())
            }
            Op::Pow(a, p) => {
                let g = gy
                    .iter()
                    .zip(val(*a))
                    .map(|(g, &x)| {
                        if *p == 0.0 || (x == 0.0 && *p > 1.0) {
                            0.0
                        } else {
                            g * p * x.powf(p - 1.0)
                        }
                    })
                    .collect();
                self.accumulate(grads, *a, g);
            }
            Op::Softmax(a) => {
                let c = y.cols();
                let mut g = vec![0.0; y.len()];
                for ((yr, gr), out) in y.data().chunks(c).zip(gy.chunks(c)).zip(g.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((o, y), g) in out.iter_mut().zip(yr).zip(gr) {
                        *o = y * (g - dot);
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::LogSoftmax(a) => {
                let c = y.cols();
                let mut g = vec![0.0; y.len()];
                for ((yr, gr), out) in y.data().chunks(c).zip(gy.chunks(c)).zip(g.chunks_mut(c)) {
                    let total: f64 = gr.iter().sum();
                    for ((o, ly), g) in out.iter_mut().zip(yr).zip(gr) {
                        *o = g - ly.exp() * total;
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::Concat(parts) => {
                let rows = y.rows();
                let total = y.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let mut g = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        g.extend_from_slice(&gy[r * total + offset..r * total + offset + c]);
                    }
                    offset += c;
                    self.accumulate(grads, p, g);
                }
            }
            Op::L2Norm(a) => {
                let t = self.value(*a);
                let c = t.cols();
                let mut g = vec![0.0; t.len()];
                for (r, (xr, out)) in t.data().chunks(c).zip(g.chunks_mut(c)).enumerate() {
                    let norm = y.data()[r];
                    if norm > 0.0 {
                        for (o, x) in out.iter_mut().zip(xr) {
                            *o = gy[r] * x / norm;
                        }
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::SumLast(a) => {
                let t = self.value(*a);
                let c = t.cols();
                let g = (0..t.len()).map(|i| gy[i / c]).collect();
                self.accumulate(grads, *a, g);
            }
            Op::Sum(a) => {
                let len = self.value(*a).len();
                self.accumulate(grads, *a, vec![gy[0]; len]);
            }
            Op::Mean(a) => {
                let len = self.value(*a).len();
                self.accumulate(grads, *a, vec![gy[0] / len as f64; len]);
            }
            Op::Gather(a, indices) => {
                let t = self.value(*a);
                let mut g = vec![0.0; t.len()];
                if t.rank() == 2 {
                    let c = t.cols();
                    for (r, &i) in indices.iter().enumerate() {
                        g[r * c + i] += gy[r];
                    }
                } else {
                    for (k, &i) in indices.iter().enumerate() {
                        g[i] += gy[k];
                    }
                }
                self.accumulate(grads, *a, g);
            }
        }
    }
}
