//! Array-valued evaluation graph with reverse, forward, and
//! forward-over-reverse differentiation.
//!
//! Values are dense row-major `f64` matrices. A [`Tape`] records every
//! operation as a node whose parents always have smaller indices, so the
//! graph is acyclic by construction and a single reverse sweep visits
//! nodes in a valid order.
//!
//! Three sweeps are supported over a recorded tape:
//!
//! * [`Tape::backward`]: adjoints of a scalar output (reverse mode).
//! * [`Tape::tangents`]: directional derivatives seeded on leaves (forward mode).
//! * [`Tape::backward_with_tangents`]: the reverse sweep carried out on
//!   dual numbers, which yields Hessian-vector products alongside the
//!   gradient (forward-over-reverse).

use ndarray::{concatenate, s, Array2, Axis};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a + 1 b` with `b` a single row broadcast over the rows of `a`.
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Silu(Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Var, Var),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Array2<f64>,
    requires_grad: bool,
}

/// Per-node arrays produced by a differentiation sweep. `None` means zero.
#[derive(Clone, Debug)]
pub struct NodeArrays {
    slots: Vec<Option<Array2<f64>>>,
}

/// Adjoints from a reverse sweep.
pub type Gradients = NodeArrays;
/// Directional derivatives from a forward sweep.
pub type Tangents = NodeArrays;

impl NodeArrays {
    fn empty(n: usize) -> Self {
        Self {
            slots: vec![None; n],
        }
    }

    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.slots.get(v.0).and_then(Option::as_ref)
    }

    /// The array for `v`, materialising an implicit zero with the given shape.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }

    fn accumulate(&mut self, v: Var, delta: Array2<f64>) {
        match &mut self.slots[v.0] {
            Some(acc) => *acc += &delta,
            slot @ None => *slot = Some(delta),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

fn silu(a: f64) -> f64 {
    a * sigmoid(a)
}

fn silu_d1(a: f64) -> f64 {
    let s = sigmoid(a);
    s * (1.0 + a * (1.0 - s))
}

fn silu_d2(a: f64) -> f64 {
    let s = sigmoid(a);
    s * (1.0 - s) * (2.0 + a * (1.0 - 2.0 * s))
}

fn bias_broadcast(rows: usize, b: &Array2<f64>) -> Array2<f64> {
    b.broadcast((rows, b.ncols()))
        .expect("bias is a single row")
        .to_owned()
}

fn column_sums(a: &Array2<f64>) -> Array2<f64> {
    a.sum_axis(Axis(0)).insert_axis(Axis(0))
}

fn scalar(v: f64) -> Array2<f64> {
    Array2::from_elem((1, 1), v)
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

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op) -> Var {
        let value = self.eval(&op, |v| &self.nodes[v.0].value);
        let requires_grad = match op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ConcatCols(a, b) => self.requires_grad(a) || self.requires_grad(b),
            Op::Scale(a, _) | Op::Tanh(a) | Op::Silu(a) | Op::Sum(a) | Op::Mean(a) => {
                self.requires_grad(a)
            }
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, value: Array2<f64>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push_leaf(value, true)
    }

    /// Records a constant: reverse sweeps never propagate adjoints into it
    /// or into nodes that depend only on constants.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push_leaf(value, false)
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a single-row leaf.
    pub fn row(&mut self, x: &[f64]) -> Var {
        self.leaf(Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row shape"))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.value(a).dim();
        let (rb, cb) = self.value(b).dim();
        assert_eq!(ca, rb, "matmul: ({ra}x{ca}) @ ({rb}x{cb})");
        self.push(Op::MatMul(a, b))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (_, ca) = self.value(a).dim();
        let (rb, cb) = self.value(bias).dim();
        assert!(rb == 1 && cb == ca, "add_bias: bias must be 1x{ca}, got {rb}x{cb}");
        self.push(Op::AddBias(a, bias))
    }

    fn assert_same_shape(&self, op: &str, a: Var, b: Var) {
        assert_eq!(
            self.value(a).dim(),
            self.value(b).dim(),
            "{op}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape("add", a, b);
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape("sub", a, b);
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.assert_same_shape("mul", a, b);
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.push(Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.push(Op::Tanh(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.push(Op::Silu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.push(Op::Mean(a))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.value(a).nrows(),
            self.value(b).nrows(),
            "concat_cols: row counts differ"
        );
        self.push(Op::ConcatCols(a, b))
    }

    fn eval<'a>(&'a self, op: &Op, val: impl Fn(Var) -> &'a Array2<f64>) -> Array2<f64> {
        match *op {
            Op::Leaf => unreachable!("leaves carry their own values"),
            Op::MatMul(a, b) => val(a).dot(val(b)),
            Op::AddBias(a, b) => val(a) + val(b),
            Op::Add(a, b) => val(a) + val(b),
            Op::Sub(a, b) => val(a) - val(b),
            Op::Mul(a, b) => val(a) * val(b),
            Op::Scale(a, c) => val(a) * c,
            Op::Tanh(a) => val(a).mapv(f64::tanh),
            Op::Silu(a) => val(a).mapv(silu),
            Op::Sum(a) => scalar(val(a).sum()),
            Op::Mean(a) => {
                let x = val(a);
                scalar(x.sum() / x.len() as f64)
            }
            Op::ConcatCols(a, b) => {
                concatenate(Axis(1), &[val(a).view(), val(b).view()]).expect("row counts checked")
            }
        }
    }

    /// Recomputes every non-leaf value from the recorded leaves.
    pub fn replay(&self) -> Vec<Array2<f64>> {
        let mut values: Vec<Array2<f64>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => {
                    let vals = &values;
                    self.eval(op, |v| &vals[v.0])
                }
            };
            values.push(v);
        }
        values
    }

    /// Forward-mode sweep: tangents of every node given tangents on some leaves.
    pub fn tangents(&self, seeds: &[(Var, Array2<f64>)]) -> Tangents {
        let mut t = NodeArrays::empty(self.nodes.len());
        for (v, dot) in seeds {
            assert_eq!(self.value(*v).dim(), dot.dim(), "tangent seed shape");
            t.slots[v.0] = Some(dot.clone());
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let out = match node.op {
                Op::Leaf => continue,
                Op::MatMul(a, b) => {
                    let mut acc: Option<Array2<f64>> = None;
                    if let Some(da) = t.get(a) {
                        acc = Some(da.dot(self.value(b)));
                    }
                    if let Some(db) = t.get(b) {
                        let term = self.value(a).dot(db);
                        acc = Some(match acc {
                            Some(x) => x + term,
                            None => term,
                        });
                    }
                    acc
                }
                Op::AddBias(a, b) => match (t.get(a), t.get(b)) {
                    (None, None) => None,
                    (da, db) => {
                        let rows = node.value.nrows();
                        let mut out = da.cloned().unwrap_or_else(|| Array2::zeros(node.value.dim()));
                        if let Some(db) = db {
                            out += &bias_broadcast(rows, db);
                        }
                        Some(out)
                    }
                },
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    match (t.get(a), t.get(b)) {
                        (None, None) => None,
                        (Some(da), None) => Some(da.clone()),
                        (None, Some(db)) => Some(db * sign),
                        (Some(da), Some(db)) => Some(da + &(db * sign)),
                    }
                }
                Op::Mul(a, b) => {
                    let mut acc: Option<Array2<f64>> = None;
                    if let Some(da) = t.get(a) {
                        acc = Some(da * self.value(b));
                    }
                    if let Some(db) = t.get(b) {
                        let term = self.value(a) * db;
                        acc = Some(match acc {
                            Some(x) => x + term,
                            None => term,
                        });
                    }
                    acc
                }
                Op::Scale(a, c) => t.get(a).map(|da| da * c),
                Op::Tanh(a) => t.get(a).map(|da| {
                    let mut out = node.value.mapv(|y| 1.0 - y * y);
                    out *= da;
                    out
                }),
                Op::Silu(a) => t.get(a).map(|da| {
                    let mut out = self.value(a).mapv(silu_d1);
                    out *= da;
                    out
                }),
                Op::Sum(a) => t.get(a).map(|da| scalar(da.sum())),
                Op::Mean(a) => t.get(a).map(|da| scalar(da.sum() / da.len() as f64)),
                Op::ConcatCols(a, b) => match (t.get(a), t.get(b)) {
                    (None, None) => None,
                    (da, db) => {
                        let za = da.cloned().unwrap_or_else(|| Array2::zeros(self.value(a).dim()));
                        let zb = db.cloned().unwrap_or_else(|| Array2::zeros(self.value(b).dim()));
                        Some(concatenate(Axis(1), &[za.view(), zb.view()]).expect("concat"))
                    }
                },
            };
            t.slots[i] = out;
        }
        t
    }

    /// Reverse-mode sweep from a scalar (1x1) output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        self.reverse(out, None).map(|(g, _)| g)
    }

    /// Reverse sweep on dual numbers. Returns the gradient and its
    /// directional derivative along the given primal tangents, i.e.
    /// `(∇f, (∇²f)·v)` when the tangents were seeded with `v`.
    pub fn backward_with_tangents(
        &self,
        out: Var,
        tangents: &Tangents,
    ) -> Result<(Gradients, Gradients)> {
        self.reverse(out, Some(tangents))
            .map(|(g, gd)| (g, gd.expect("dual sweep returns tangents")))
    }

    fn reverse(
        &self,
        out: Var,
        tangents: Option<&Tangents>,
    ) -> Result<(Gradients, Option<Gradients>)> {
        let (rows, cols) = self.value(out).dim();
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarOutput { rows, cols });
        }
        let n = self.nodes.len();
        let mut adj = NodeArrays::empty(n);
        let mut adj_dot = tangents.map(|_| NodeArrays::empty(n));
        adj.slots[out.0] = Some(scalar(1.0));

        for i in (0..=out.0).rev() {
            let Some(g) = adj.slots[i].take() else {
                continue;
            };
            let gd = adj_dot.as_mut().and_then(|d| d.slots[i].take());
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let td = |v: Var| tangents.and_then(|t| t.get(v));

            match node.op {
                Op::Leaf => {
                    adj.slots[i] = Some(g);
                    if let Some(d) = adj_dot.as_mut() {
                        d.slots[i] = gd;
                    }
                    continue;
                }
                Op::MatMul(a, b) => {
                    let av = self.value(a);
                    let bv = self.value(b);
                    let (need_a, need_b) = (self.requires_grad(a), self.requires_grad(b));
                    if let Some(d) = adj_dot.as_mut() {
                        if need_a {
                            let mut da: Option<Array2<f64>> = gd.as_ref().map(|gd| gd.dot(&bv.t()));
                            if let Some(tb) = td(b) {
                                let term = g.dot(&tb.t());
                                da = Some(da.map_or(term.clone(), |x| x + term));
                            }
                            if let Some(da) = da {
                                d.accumulate(a, da);
                            }
                        }
                        if need_b {
                            let mut db: Option<Array2<f64>> = gd.as_ref().map(|gd| av.t().dot(gd));
                            if let Some(ta) = td(a) {
                                let term = ta.t().dot(&g);
                                db = Some(db.map_or(term.clone(), |x| x + term));
                            }
                            if let Some(db) = db {
                                d.accumulate(b, db);
                            }
                        }
                    }
                    if need_a {
                        adj.accumulate(a, g.dot(&bv.t()));
                    }
                    if need_b {
                        adj.accumulate(b, av.t().dot(&g));
                    }
                }
                Op::AddBias(a, b) => {
                    if let (Some(d), Some(gd)) = (adj_dot.as_mut(), gd.as_ref()) {
                        d.accumulate(b, column_sums(gd));
                        d.accumulate(a, gd.clone());
                    }
                    adj.accumulate(b, column_sums(&g));
                    adj.accumulate(a, g);
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if let (Some(d), Some(gd)) = (adj_dot.as_mut(), gd.as_ref()) {
                        d.accumulate(b, gd * sign);
                        d.accumulate(a, gd.clone());
                    }
                    adj.accumulate(b, &g * sign);
                    adj.accumulate(a, g);
                }
                Op::Mul(a, b) => {
                    let av = self.value(a);
                    let bv = self.value(b);
                    if let Some(d) = adj_dot.as_mut() {
                        let mut da = gd.as_ref().map(|gd| gd * bv);
                        if let Some(tb) = td(b) {
                            let term = &g * tb;
                            da = Some(da.map_or(term.clone(), |x| x + term));
                        }
                        let mut db = gd.as_ref().map(|gd| gd * av);
                        if let Some(ta) = td(a) {
                            let term = &g * ta;
                            db = Some(db.map_or(term.clone(), |x| x + term));
                        }
                        if let Some(da) = da {
                            d.accumulate(a, da);
                        }
                        if let Some(db) = db {
                            d.accumulate(b, db);
                        }
                    }
                    adj.accumulate(a, &g * bv);
                    adj.accumulate(b, &g * av);
                }
                Op::Scale(a, c) => {
                    if let (Some(d), Some(gd)) = (adj_dot.as_mut(), gd.as_ref()) {
                        d.accumulate(a, gd * c);
                    }
                    adj.accumulate(a, g * c);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let d1 = y.mapv(|y| 1.0 - y * y);
                    if let Some(d) = adj_dot.as_mut() {
                        let mut da = gd.as_ref().map(|gd| gd * &d1);
                        if let Some(ta) = td(a) {
                            let mut term = y.mapv(|y| -2.0 * y * (1.0 - y * y));
                            term *= &g;
                            term *= ta;
                            da = Some(da.map_or(term.clone(), |x| x + term));
                        }
                        if let Some(da) = da {
                            d.accumulate(a, da);
                        }
                    }
                    adj.accumulate(a, g * d1);
                }
                Op::Silu(a) => {
                    let av = self.value(a);
                    let d1 = av.mapv(silu_d1);
                    if let Some(d) = adj_dot.as_mut() {
                        let mut da = gd.as_ref().map(|gd| gd * &d1);
                        if let Some(ta) = td(a) {
                            let mut term = av.mapv(silu_d2);
                            term *= &g;
                            term *= ta;
                            da = Some(da.map_or(term.clone(), |x| x + term));
                        }
                        if let Some(da) = da {
                            d.accumulate(a, da);
                        }
                    }
                    adj.accumulate(a, g * d1);
                }
                Op::Sum(a) | Op::Mean(a) => {
                    let shape = self.value(a).dim();
                    let k = if matches!(node.op, Op::Mean(_)) {
                        1.0 / (shape.0 * shape.1) as f64
                    } else {
                        1.0
                    };
                    if let (Some(d), Some(gd)) = (adj_dot.as_mut(), gd.as_ref()) {
                        d.accumulate(a, Array2::from_elem(shape, gd[[0, 0]] * k));
                    }
                    adj.accumulate(a, Array2::from_elem(shape, g[[0, 0]] * k));
                }
                Op::ConcatCols(a, b) => {
                    let split = self.value(a).ncols();
                    if let (Some(d), Some(gd)) = (adj_dot.as_mut(), gd.as_ref()) {
                        d.accumulate(a, gd.slice(s![.., ..split]).to_owned());
                        d.accumulate(b, gd.slice(s![.., split..]).to_owned());
                    }
                    adj.accumulate(a, g.slice(s![.., ..split]).to_owned());
                    adj.accumulate(b, g.slice(s![.., split..]).to_owned());
                }
            }
        }
        Ok((adj, adj_dot))
    }
}
