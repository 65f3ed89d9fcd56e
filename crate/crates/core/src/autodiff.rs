//! Tape-based reverse-mode differentiation.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`] holding the
//! operation kind, the parent ids and the computed value. [`Tape::gradient`]
//! walks the tape backwards, but instead of producing plain numbers it emits the
//! adjoint computation as new tape nodes. The returned gradients are therefore
//! ordinary `Var`s and can be differentiated again, which is what lets a
//! Langevin chain containing `∇ₓE` be differentiated with respect to the
//! network parameters.
//!
//! A tape is single-threaded (`RefCell` inside). Create one per evaluation; it
//! is cheap.

use std::cell::RefCell;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, EbmError, Result};
use crate::tensor::{matmul_t, Tensor};

/// Default negative slope of the leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Activation {
    /// `x · sigmoid(x)`
    Swish,
    LeakyRelu {
        slope: f64,
    },
}

impl Default for Activation {
    fn default() -> Self {
        Activation::LeakyRelu { slope: LEAKY_SLOPE }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    MatMul { ta: bool, tb: bool },
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    Offset(f64),
    Sigmoid,
    LeakyRelu(f64),
    Exp,
    Ln,
    Clamp { lo: f64, hi: f64 },
    Sum,
    SumRows,
    SumCols,
    ExpandScalar { rows: usize, cols: usize },
    ExpandRow { rows: usize },
    ExpandCol { cols: usize },
    GatherRows { idx: Rc<[usize]> },
    ScatterRows { idx: Rc<[usize]>, rows: usize },
}

struct Node {
    op: Op,
    parents: Vec<usize>,
    value: Rc<Tensor>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<usize>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, vec![], value)
    }

    /// A leaf marked as a model parameter.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        let v = self.var(value);
        self.params.borrow_mut().push(v.id);
        v
    }

    /// A value that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Const, vec![], value)
    }

    pub fn parameters(&self) -> Vec<Var<'_>> {
        self.params
            .borrow()
            .iter()
            .map(|&id| Var { tape: self, id })
            .collect()
    }

    fn push(&self, op: Op, parents: Vec<usize>, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op,
            parents,
            value: Rc::new(value),
        });
        Var { tape: self, id }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn apply(&self, op: Op, parents: &[usize]) -> Result<Var<'_>> {
        let value = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor> = parents.iter().map(|&p| nodes[p].value.as_ref()).collect();
            eval(&op, &vals)?
        };
        Ok(self.push(op, parents.to_vec(), value))
    }

    /// Infallible variant for ops whose shapes are already known to agree.
    fn apply_ok(&self, op: Op, parents: &[usize]) -> Var<'_> {
        self.apply(op, parents)
            .expect("shape-checked operation failed")
    }

    fn owns(&self, v: &Var<'_>) -> bool {
        std::ptr::eq(self, v.tape) && v.id < self.len()
    }

    /// Reverse-mode gradients of the scalar `output` with respect to each of
    /// `wrt`. The results are tape nodes and may be differentiated again. A
    /// node that `output` does not depend on gets a zero gradient.
    pub fn gradient<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        if !self.owns(&output) {
            return Err(EbmError::Lookup(output.id));
        }
        for w in wrt {
            if !self.owns(w) {
                return Err(EbmError::Lookup(w.id));
            }
        }
        if output.value().len() != 1 {
            return Err(EbmError::Contract(format!(
                "gradient() needs a scalar output, got shape {:?}",
                output.value().shape()
            )));
        }

        let out = output.id;
        let n = out + 1;
        let mut depends = vec![false; n];
        let mut lowest = n;
        for w in wrt {
            if w.id < n {
                depends[w.id] = true;
                lowest = lowest.min(w.id);
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in lowest..n {
                if !depends[i] {
                    depends[i] = nodes[i].parents.iter().any(|&p| depends[p]);
                }
            }
        }

        let mut adjoint: Vec<Option<usize>> = vec![None; n];
        if lowest < n && depends[out] {
            adjoint[out] = Some(self.constant(Tensor::ones(output.value().shape())).id);
            for i in (lowest..n).rev() {
                let Some(g) = adjoint[i] else { continue };
                let (op, parents) = {
                    let nodes = self.nodes.borrow();
                    (nodes[i].op.clone(), nodes[i].parents.clone())
                };
                let need: Vec<bool> = parents.iter().map(|&p| depends[p]).collect();
                if !need.iter().any(|&b| b) {
                    continue;
                }
                let g = Var { tape: self, id: g };
                let node = Var { tape: self, id: i };
                let contribs = backward(&op, node, &parents, g, &need)?;
                for (k, c) in contribs.into_iter().enumerate() {
                    if let Some(c) = c {
                        let p = parents[k];
                        adjoint[p] = Some(match adjoint[p] {
                            None => c.id,
                            Some(prev) => self.apply_ok(Op::Add, &[prev, c.id]).id,
                        });
                    }
                }
            }
        }

        Ok(wrt
            .iter()
            .map(|w| match adjoint.get(w.id).copied().flatten() {
                Some(id) => Var { tape: self, id },
                None => self.constant(Tensor::zeros(w.value().shape())),
            })
            .collect())
    }

    /// Recomputes every node from its parents' cached values and checks the
    /// result is bit-identical to what is cached.
    pub fn replay_matches(&self) -> bool {
        let nodes = self.nodes.borrow();
        nodes.iter().all(|node| {
            if matches!(node.op, Op::Leaf | Op::Const) {
                return true;
            }
            let vals: Vec<&Tensor> = node
                .parents
                .iter()
                .map(|&p| nodes[p].value.as_ref())
                .collect();
            match eval(&node.op, &vals) {
                Ok(t) => {
                    t.shape() == node.value.shape()
                        && t.data()
                            .iter()
                            .zip(node.value.data())
                            .all(|(a, b)| a.to_bits() == b.to_bits())
                }
                Err(_) => false,
            }
        })
    }

    /// Every node's parents precede it.
    pub fn is_topologically_ordered(&self) -> bool {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .all(|(i, n)| n.parents.iter().all(|&p| p < i))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn eval(op: &Op, p: &[&Tensor]) -> Result<Tensor> {
    Ok(match op {
        Op::Leaf | Op::Const => unreachable!("leaves are never re-evaluated"),
        Op::MatMul { ta, tb } => matmul_t(p[0], *ta, p[1], *tb)?,
        Op::Transpose => {
            require_matrix(p[0])?;
            p[0].transpose()
        }
        Op::Add => p[0].zip_map(p[1], |a, b| a + b)?,
        Op::Sub => p[0].zip_map(p[1], |a, b| a - b)?,
        Op::Mul => p[0].zip_map(p[1], |a, b| a * b)?,
        Op::Div => p[0].zip_map(p[1], |a, b| a / b)?,
        Op::Neg => p[0].map(|a| -a),
        Op::Scale(c) => p[0].map(|a| a * c),
        Op::Offset(c) => p[0].map(|a| a + c),
        Op::Sigmoid => p[0].map(sigmoid),
        Op::LeakyRelu(s) => p[0].map(|a| if a > 0.0 { a } else { s * a }),
        Op::Exp => p[0].map(f64::exp),
        Op::Ln => p[0].map(f64::ln),
        Op::Clamp { lo, hi } => p[0].map(|a| a.clamp(*lo, *hi)),
        Op::Sum => Tensor::scalar(p[0].sum()),
        Op::SumRows => {
            require_matrix(p[0])?;
            let (r, c) = (p[0].rows(), p[0].cols());
            let mut out = vec![0.0; c];
            for i in 0..r {
                for (o, v) in out.iter_mut().zip(p[0].row_slice(i)) {
                    *o += v;
                }
            }
            Tensor::row(out)
        }
        Op::SumCols => {
            require_matrix(p[0])?;
            Tensor::column(
                (0..p[0].rows())
                    .map(|i| p[0].row_slice(i).iter().sum())
                    .collect(),
            )
        }
        Op::ExpandScalar { rows, cols } => {
            if p[0].len() != 1 {
                return dim_err(format!("expand_scalar on shape {:?}", p[0].shape()));
            }
            Tensor::full(&[*rows, *cols], p[0].data()[0])
        }
        Op::ExpandRow { rows } => {
            if !p[0].is_matrix() || p[0].rows() != 1 {
                return dim_err(format!("expand_row on shape {:?}", p[0].shape()));
            }
            let row = p[0].data();
            let mut data = Vec::with_capacity(rows * row.len());
            for _ in 0..*rows {
                data.extend_from_slice(row);
            }
            Tensor::matrix(*rows, row.len(), data)?
        }
        Op::ExpandCol { cols } => {
            if !p[0].is_matrix() || p[0].cols() != 1 {
                return dim_err(format!("expand_col on shape {:?}", p[0].shape()));
            }
            let data = p[0]
                .data()
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v, *cols))
                .collect();
            Tensor::matrix(p[0].rows(), *cols, data)?
        }
        Op::GatherRows { idx } => {
            require_matrix(p[0])?;
            if let Some(&bad) = idx.iter().find(|&&i| i >= p[0].rows()) {
                return dim_err(format!("gather row {bad} of {}", p[0].rows()));
            }
            p[0].select_rows(idx)
        }
        Op::ScatterRows { idx, rows } => {
            require_matrix(p[0])?;
            if p[0].rows() != idx.len() {
                return dim_err("scatter_rows index length differs from row count");
            }
            let c = p[0].cols();
            let mut out = Tensor::zeros(&[*rows, c]);
            for (k, &i) in idx.iter().enumerate() {
                if i >= *rows {
                    return dim_err(format!("scatter row {i} of {rows}"));
                }
                for (o, v) in out.row_slice_mut(i).iter_mut().zip(p[0].row_slice(k)) {
                    *o += v;
                }
            }
            out
        }
    })
}

fn require_matrix(t: &Tensor) -> Result<()> {
    if t.is_matrix() {
        Ok(())
    } else {
        dim_err(format!("expected a matrix, got shape {:?}", t.shape()))
    }
}

/// Adjoint contributions of one node to its parents, built from tape ops.
fn backward<'t>(
    op: &Op,
    node: Var<'t>,
    parents: &[usize],
    g: Var<'t>,
    need: &[bool],
) -> Result<Vec<Option<Var<'t>>>> {
    let tape = node.tape;
    let p = |k: usize| Var {
        tape,
        id: parents[k],
    };
    let want = |k: usize| need.get(k).copied().unwrap_or(false);
    let one = |v: Var<'t>| Ok(vec![Some(v)]);
    match op {
        Op::Leaf | Op::Const => Ok(vec![]),
        Op::MatMul { ta, tb } => {
            let (a, b) = (p(0), p(1));
            let da = || -> Result<Var<'t>> {
                match (ta, tb) {
                    (false, false) => g.matmul_t(false, b, true),
                    (false, true) => g.matmul_t(false, b, false),
                    (true, false) => b.matmul_t(false, g, true),
                    (true, true) => b.matmul_t(true, g, true),
                }
            };
            let db = || -> Result<Var<'t>> {
                match (ta, tb) {
                    (false, false) => a.matmul_t(true, g, false),
                    (false, true) => g.matmul_t(true, a, false),
                    (true, false) => a.matmul_t(false, g, false),
                    (true, true) => g.matmul_t(true, a, true),
                }
            };
            Ok(vec![
                if want(0) { Some(da()?) } else { None },
                if want(1) { Some(db()?) } else { None },
            ])
        }
        Op::Transpose => one(g.transpose()?),
        Op::Add => Ok(vec![want(0).then_some(g), want(1).then_some(g)]),
        Op::Sub => Ok(vec![want(0).then_some(g), want(1).then(|| g.neg())]),
        Op::Mul => Ok(vec![
            if want(0) { Some(g.mul(p(1))?) } else { None },
            if want(1) { Some(g.mul(p(0))?) } else { None },
        ]),
        Op::Div => Ok(vec![
            if want(0) { Some(g.div(p(1))?) } else { None },
            if want(1) {
                Some(g.mul(node)?.div(p(1))?.neg())
            } else {
                None
            },
        ]),
        Op::Neg => one(g.neg()),
        Op::Scale(c) => one(g.scale(*c)),
        Op::Offset(_) => one(g),
        Op::Sigmoid => {
            let slope = node.mul(node.neg().offset(1.0))?;
            one(g.mul(slope)?)
        }
        Op::LeakyRelu(s) => {
            let mask = p(0).value().map(|x| if x > 0.0 { 1.0 } else { *s });
            one(g.mul(tape.constant(mask))?)
        }
        Op::Exp => one(g.mul(node)?),
        Op::Ln => one(g.div(p(0))?),
        Op::Clamp { lo, hi } => {
            let mask = p(0)
                .value()
                .map(|x| if x >= *lo && x <= *hi { 1.0 } else { 0.0 });
            one(g.mul(tape.constant(mask))?)
        }
        Op::Sum => {
            let v = p(0).value();
            let shape = v.shape();
            if shape.len() == 2 {
                one(g.expand_scalar(shape[0], shape[1])?)
            } else {
                Err(EbmError::Unsupported(format!(
                    "gradient of sum over non-matrix shape {shape:?}"
                )))
            }
        }
        Op::SumRows => one(g.expand_row(p(0).value().rows())?),
        Op::SumCols => one(g.expand_col(p(0).value().cols())?),
        Op::ExpandScalar { .. } => one(g.sum()),
        Op::ExpandRow { .. } => one(g.sum_rows()?),
        Op::ExpandCol { .. } => one(g.sum_cols()?),
        Op::GatherRows { idx } => {
            let rows = p(0).value().rows();
            one(tape.apply(
                Op::ScatterRows {
                    idx: Rc::clone(idx),
                    rows,
                },
                &[g.id],
            )?)
        }
        Op::ScatterRows { idx, .. } => one(tape.apply(
            Op::GatherRows {
                idx: Rc::clone(idx),
            },
            &[g.id],
        )?),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    /// Cloned value; detached from the tape.
    pub fn detach(&self) -> Tensor {
        self.value().as_ref().clone()
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(EbmError::Lookup(other.id))
        }
    }

    fn binary(self, op: Op, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        self.tape.apply(op, &[self.id, other.id])
    }

    fn unary(self, op: Op) -> Var<'t> {
        self.tape.apply_ok(op, &[self.id])
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_t(false, other, false)
    }

    /// `op(self) · op(other)`, transposing where flagged.
    pub fn matmul_t(self, ta: bool, other: Var<'t>, tb: bool) -> Result<Var<'t>> {
        self.binary(Op::MatMul { ta, tb }, other)
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        self.tape.apply(Op::Transpose, &[self.id])
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Op::Add, other)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Op::Sub, other)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Op::Mul, other)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Op::Div, other)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Op::Neg)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(c))
    }

    pub fn offset(self, c: f64) -> Var<'t> {
        self.unary(Op::Offset(c))
    }

    pub fn square(self) -> Var<'t> {
        self.tape.apply_ok(Op::Mul, &[self.id, self.id])
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.unary(Op::LeakyRelu(slope))
    }

    pub fn swish(self) -> Var<'t> {
        let s = self.sigmoid();
        self.tape.apply_ok(Op::Mul, &[self.id, s.id])
    }

    pub fn activation(self, kind: Activation) -> Var<'t> {
        match kind {
            Activation::Swish => self.swish(),
            Activation::LeakyRelu { slope } => self.leaky_relu(slope),
        }
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Ln)
    }

    /// Elementwise clamp to `[lo, hi]`; gradient passes only where the input
    /// was inside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp { lo, hi })
    }

    /// Sum of all elements, as a `[1, 1]` scalar.
    pub fn sum(self) -> Var<'t> {
        self.unary(Op::Sum)
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// `[m, n] → [1, n]`
    pub fn sum_rows(self) -> Result<Var<'t>> {
        self.tape.apply(Op::SumRows, &[self.id])
    }

    /// `[m, n] → [m, 1]`
    pub fn sum_cols(self) -> Result<Var<'t>> {
        self.tape.apply(Op::SumCols, &[self.id])
    }

    pub fn expand_scalar(self, rows: usize, cols: usize) -> Result<Var<'t>> {
        self.tape.apply(Op::ExpandScalar { rows, cols }, &[self.id])
    }

    /// Repeats a `[1, n]` row `rows` times.
    pub fn expand_row(self, rows: usize) -> Result<Var<'t>> {
        self.tape.apply(Op::ExpandRow { rows }, &[self.id])
    }

    /// Repeats a `[m, 1]` column `cols` times.
    pub fn expand_col(self, cols: usize) -> Result<Var<'t>> {
        self.tape.apply(Op::ExpandCol { cols }, &[self.id])
    }

    /// Adds a `[1, n]` bias to every row of a `[m, n]` matrix.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        let rows = self.value().rows();
        self.add(bias.expand_row(rows)?)
    }

    /// Picks rows of a `[c, n]` table, one per index.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        self.tape
            .apply(Op::GatherRows { idx: idx.into() }, &[self.id])
    }

    /// Multiplies every element by a scalar `[1, 1]` var.
    pub fn mul_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        let v = self.value();
        let e = s.expand_scalar(v.rows(), v.cols())?;
        self.mul(e)
    }

    pub fn div_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        let v = self.value();
        let e = s.expand_scalar(v.rows(), v.cols())?;
        self.div(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_of(v: Var<'_>) -> f64 {
        v.value().data()[0]
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(3.0));
        let y = x.square();
        let g = tape.gradient(y, &[x]).unwrap();
        assert_eq!(scalar_of(g[0]), 6.0);
    }

    #[test]
    fn second_order_cubic() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(2.0));
        let y = x.square().mul(x).unwrap();
        let g = tape.gradient(y, &[x]).unwrap()[0];
        assert_eq!(scalar_of(g), 12.0);
        let h = tape.gradient(g, &[x]).unwrap()[0];
        assert!((scalar_of(h) - 12.0).abs() < 1e-12);
    }

    #[test]
    fn swish_at_zero() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(0.0));
        let y = x.swish();
        assert_eq!(scalar_of(y), 0.0);
        let g = tape.gradient(y, &[x]).unwrap()[0];
        assert!((scalar_of(g) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn swish_saturates_to_identity() {
        let tape = Tape::new();
        let y = tape.constant(Tensor::scalar(40.0)).swish();
        assert!((scalar_of(y) - 40.0).abs() < 1e-9);
    }

    #[test]
    fn leaky_relu_negative_side() {
        let tape = Tape::new();
        let y = tape.constant(Tensor::scalar(-1.0)).leaky_relu(0.2);
        assert!((scalar_of(y) + 0.2).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_output_is_a_contract_error() {
        let tape = Tape::new();
        let x = tape.var(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.gradient(x, &[x]), Err(EbmError::Contract(_))));
    }

    #[test]
    fn foreign_node_is_a_lookup_error() {
        let a = Tape::new();
        let b = Tape::new();
        let x = a.var(Tensor::scalar(1.0));
        let y = b.var(Tensor::scalar(1.0));
        assert!(matches!(
            a.gradient(x.square(), &[y]),
            Err(EbmError::Lookup(_))
        ));
    }

    #[test]
    fn detached_input_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let unrelated = tape.var(Tensor::scalar(1.0));
        let y = x.mul(c).unwrap();
        let g = tape.gradient(y, &[c, unrelated]).unwrap();
        assert_eq!(scalar_of(g[1]), 0.0);
    }

    #[test]
    fn matmul_adjoint_matches_ones_times_b_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[4, 5], &mut rng);
        let b = Tensor::randn(&[5, 3], &mut rng);
        let tape = Tape::new();
        let av = tape.var(a);
        let bv = tape.constant(b.clone());
        let g = tape.gradient(av.matmul(bv).unwrap().sum(), &[av]).unwrap()[0];
        let expected = Tensor::ones(&[4, 3]).matmul(&b.transpose()).unwrap();
        for (x, y) in g.value().data().iter().zip(expected.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gather_and_scatter_are_adjoint() {
        let tape = Tape::new();
        let table = tape.var(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let picked = table.gather_rows(&[1, 1, 0]).unwrap();
        assert_eq!(picked.value().data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let g = tape.gradient(picked.sum(), &[table]).unwrap()[0];
        assert_eq!(g.value().data(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn tape_is_ordered_and_replays() {
        let tape = Tape::new();
        let x = tape.var(Tensor::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.1]]).unwrap());
        let w = tape.param(Tensor::from_rows(&[vec![0.5], vec![-0.7]]).unwrap());
        let e = x.matmul(w).unwrap().swish().sum();
        let g = tape.gradient(e, &[x, w]).unwrap();
        let _ = tape.gradient(g[0].square().sum(), &[w]).unwrap();
        assert!(tape.is_topologically_ordered());
        assert!(tape.replay_matches());
        assert_eq!(tape.parameters().len(), 1);
    }
}
