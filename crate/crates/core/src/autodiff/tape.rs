//! Tape-based reverse-mode differentiation.
//!
//! Every primitive appends one node holding its forward value. Nodes are
//! stored in creation order, so the node list is already a topological
//! order and `backward` is a single reverse sweep.

use super::tensor::{matmul_a_bt_kernel, matmul_at_b_kernel, matmul_kernel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// The closed primitive set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    MulElementwise,
    MatMul,
    Relu,
    Exp,
    Ln,
    Mean,
    Sum,
    Scale(f64),
    L2NormalizeRows,
    ConcatRows,
    Detach,
}

impl Primitive {
    fn name(self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::MulElementwise => "mul_elementwise",
            Primitive::MatMul => "matmul",
            Primitive::Relu => "relu",
            Primitive::Exp => "exp",
            Primitive::Ln => "ln",
            Primitive::Mean => "mean",
            Primitive::Sum => "sum",
            Primitive::Scale(_) => "scale",
            Primitive::L2NormalizeRows => "l2_normalize_rows",
            Primitive::ConcatRows => "concat_rows",
            Primitive::Detach => "detach",
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Unary(Primitive, Var),
    Binary(Primitive, Var, Var),
    Concat(Vec<Var>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default, Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Registers an input. Parameters are leaves with `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
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

    fn check(&self, v: Var) -> Result<&Tensor> {
        self.nodes.get(v.0).map(|n| &n.value).ok_or(Error::UnknownVar(v.0))
    }

    /// Applies `kind` to `inputs` and records the result.
    pub fn apply(&mut self, kind: Primitive, inputs: &[Var]) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let arity_error = || Error::InvalidArgument(format!("{} got {} inputs", kind.name(), inputs.len()));
        match kind {
            Primitive::ConcatRows => {
                if inputs.is_empty() {
                    return Err(arity_error());
                }
                self.concat_rows_impl(inputs)
            }
            Primitive::Add | Primitive::Sub | Primitive::MulElementwise | Primitive::MatMul => {
                let &[a, b] = inputs else {
                    return Err(arity_error());
                };
                let value = self.binary_forward(kind, a, b)?;
                let rg = self.requires_grad(a) || self.requires_grad(b);
                Ok(self.push(value, Op::Binary(kind, a, b), rg))
            }
            _ => {
                let &[a] = inputs else {
                    return Err(arity_error());
                };
                let value = self.unary_forward(kind, a)?;
                if kind == Primitive::Detach {
                    return Ok(self.push(value, Op::Leaf, false));
                }
                let rg = self.requires_grad(a);
                Ok(self.push(value, Op::Unary(kind, a), rg))
            }
        }
    }

    fn binary_forward(&self, kind: Primitive, a: Var, b: Var) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let mismatch = || Error::ShapeMismatch {
            op: kind.name(),
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        };
        if kind == Primitive::MatMul {
            if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
                return Err(mismatch());
            }
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            return Tensor::new(vec![m, n], matmul_kernel(ta.data(), tb.data(), m, k, n));
        }
        if ta.shape() != tb.shape() {
            return Err(mismatch());
        }
        let f: fn(f64, f64) -> f64 = match kind {
            Primitive::Add => |x, y| x + y,
            Primitive::Sub => |x, y| x - y,
            _ => |x, y| x * y,
        };
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn unary_forward(&self, kind: Primitive, a: Var) -> Result<Tensor> {
        let t = self.value(a);
        let map = |f: &dyn Fn(f64) -> f64| Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect());
        match kind {
            Primitive::Relu => map(&|x| if x > 0.0 { x } else { 0.0 }),
            Primitive::Exp => map(&f64::exp),
            Primitive::Ln => {
                if let Some((index, &value)) = t.data().iter().enumerate().find(|(_, &x)| x <= 0.0) {
                    return Err(Error::NonPositiveLog { index, value });
                }
                map(&f64::ln)
            }
            Primitive::Scale(c) => map(&|x| c * x),
            Primitive::Sum => Ok(Tensor::scalar(t.data().iter().sum())),
            Primitive::Mean => {
                if t.is_empty() {
                    return Err(Error::InvalidArgument("mean of empty tensor".into()));
                }
                Ok(Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64))
            }
            Primitive::L2NormalizeRows => t.l2_normalized_rows(),
            Primitive::Detach => Ok(t.clone()),
            _ => unreachable!("binary primitive routed to unary path"),
        }
    }

    fn concat_rows_impl(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = self.value(inputs[0]);
        let cols = first.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &v in inputs {
            let t = self.value(v);
            if t.shape().len() != 2 || t.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: first.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        Ok(self.push(value, Op::Concat(inputs.to_vec()), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MulElementwise, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[a])
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Ln, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[a])
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::L2NormalizeRows, &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Primitive::ConcatRows, parts)
    }

    pub fn detach(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Detach, &[a])
    }

    /// Row sums of a matrix as an `n x 1` column, via a product with a ones vector.
    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        let ones = self.constant(Tensor::filled(&[cols, 1], 1.0));
        self.matmul(a, ones)
    }

    /// Adds the `1 x n` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let rows = self.value(a).rows();
        let ones = self.constant(Tensor::filled(&[rows, 1], 1.0));
        let tiled = self.matmul(ones, bias)?;
        self.add(a, tiled)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.check(loss)?;
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::filled(lt.shape(), 1.0));
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Unary(kind, a) => {
                    let ga = self.unary_backward(*kind, *a, &node.value, &g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Binary(kind, a, b) => {
                    let (ga, gb) = self.binary_backward(*kind, *a, *b, &g);
                    if let Some(ga) = ga {
                        accumulate(&mut grads, *a, ga);
                    }
                    if let Some(gb) = gb {
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        if self.requires_grad(p) {
                            let part = g.data()[offset..offset + len].to_vec();
                            let t = Tensor::new(self.value(p).shape().to_vec(), part).expect("concat part shape");
                            accumulate(&mut grads, p, t);
                        }
                        offset += len;
                    }
                }
            }
        }
        // Only leaves keep their gradients; interior entries were taken above.
        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.requires_grad && matches!(n.op, Op::Leaf))
            .map(|(i, n)| (Var(i), n.value.shape().to_vec()))
            .collect();
        Ok(Gradients { grads, leaves })
    }

    fn unary_backward(&self, kind: Primitive, a: Var, out: &Tensor, g: &Tensor) -> Tensor {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let zip = |f: &dyn Fn(f64, f64, f64) -> f64| {
            let data = x
                .data()
                .iter()
                .zip(out.data())
                .zip(g.data())
                .map(|((&xi, &yi), &gi)| f(xi, yi, gi))
                .collect();
            Tensor::new(shape.clone(), data).expect("unary grad shape")
        };
        match kind {
            Primitive::Relu => zip(&|xi, _, gi| if xi > 0.0 { gi } else { 0.0 }),
            Primitive::Exp => zip(&|_, yi, gi| yi * gi),
            Primitive::Ln => zip(&|xi, _, gi| gi / xi),
            Primitive::Scale(c) => zip(&|_, _, gi| c * gi),
            Primitive::Sum => Tensor::filled(&shape, g.item()),
            Primitive::Mean => Tensor::filled(&shape, g.item() / x.len() as f64),
            Primitive::L2NormalizeRows => {
                // d/dx (x/|x|) applied to g: (g - y (y·g)) / |x|
                let mut res = Tensor::zeros(&shape);
                for i in 0..x.rows() {
                    let xr = x.row(i);
                    let yr = out.row(i);
                    let gr = g.row(i);
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((r, &y), &gv) in res.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *r = (gv - y * dot) / norm;
                    }
                }
                res
            }
            _ => unreachable!("{} has no unary backward", kind.name()),
        }
    }

    fn binary_backward(&self, kind: Primitive, a: Var, b: Var, g: &Tensor) -> (Option<Tensor>, Option<Tensor>) {
        let (ta, tb) = (self.value(a), self.value(b));
        let (need_a, need_b) = (self.requires_grad(a), self.requires_grad(b));
        match kind {
            Primitive::Add => (need_a.then(|| g.clone()), need_b.then(|| g.clone())),
            Primitive::Sub => {
                let neg = || Tensor::new(g.shape().to_vec(), g.data().iter().map(|v| -v).collect()).expect("neg shape");
                (need_a.then(|| g.clone()), need_b.then(neg))
            }
            Primitive::MulElementwise => {
                let prod = |other: &Tensor| {
                    let data = g.data().iter().zip(other.data()).map(|(x, y)| x * y).collect();
                    Tensor::new(g.shape().to_vec(), data).expect("mul grad shape")
                };
                (need_a.then(|| prod(tb)), need_b.then(|| prod(ta)))
            }
            Primitive::MatMul => {
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let ga = need_a.then(|| {
                    Tensor::new(vec![m, k], matmul_a_bt_kernel(g.data(), tb.data(), m, n, k)).expect("matmul grad a")
                });
                let gb = need_b.then(|| {
                    Tensor::new(vec![k, n], matmul_at_b_kernel(ta.data(), g.data(), m, k, n)).expect("matmul grad b")
                });
                (ga, gb)
            }
            _ => unreachable!("{} has no binary backward", kind.name()),
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of one backward pass, keyed by leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    leaves: Vec<(Var, Vec<usize>)>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when no differentiable path joins `v` to the loss.
    pub fn reached(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a `requires_grad` leaf; zeros when the leaf is unreachable.
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        if let Some(g) = self.reached(v) {
            return Some(g.clone());
        }
        self.leaves
            .iter()
            .find(|(l, _)| *l == v)
            .map(|(_, shape)| Tensor::zeros(shape))
    }

    /// Every `requires_grad` leaf of the tape, with zero gradient where unreachable.
    pub fn leaf_gradients(&self) -> Vec<(Var, Tensor)> {
        self.leaves
            .iter()
            .map(|(v, shape)| {
                let g = self.reached(*v).cloned().unwrap_or_else(|| Tensor::zeros(shape));
                (*v, g)
            })
            .collect()
    }
}


#[cfg(test)]
mod props {
    use proptest::prelude::*;

    use super::*;
    use crate::autodiff::finite_diff_check;

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(-2.0..2.0f64, rows * cols)
            .prop_map(move |v| Tensor::new(vec![rows, cols], v).unwrap())
    }

    /// Uses every primitive once on a 3x4 input.
    fn composite(t: &mut Tape, x: Var, w: &Tensor, b: &Tensor) -> Result<Var> {
        let w = t.constant(w.clone());
        let b = t.constant(b.clone());
        let h = t.matmul(x, w)?;
        let h = t.add_row(h, b)?;
        let r = t.relu(h)?;
        let n = t.l2_normalize_rows(x)?;
        let e = t.exp(n)?;
        let sq = t.mul(x, x)?;
        let one = t.constant(Tensor::filled(&[3, 4], 1.0));
        let pos = t.add(sq, one)?;
        let l = t.ln(pos)?;
        let d = t.sub(e, l)?;
        let s = t.scale(d, 0.5)?;
        let both = t.concat_rows(&[s, x])?;
        let rs = t.row_sums(both)?;
        let a = t.mean(rs)?;
        let c = t.sum(r)?;
        t.add(a, c)
    }

    proptest! {
        #[test]
        fn every_primitive_matches_finite_differences(x in matrix(3, 4), w in matrix(4, 2), b in matrix(1, 2)) {
            // Keep relu inputs away from the kink.
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let wv = t.constant(w.clone());
            let h = t.matmul(xv, wv).unwrap();
            let bv = t.constant(b.clone());
            let h = t.add_row(h, bv).unwrap();
            prop_assume!(t.value(h).data().iter().all(|v| v.abs() > 1e-3));
            prop_assume!((0..3).all(|i| x.row(i).iter().map(|v| v * v).sum::<f64>() > 1e-2));
            let r = finite_diff_check(|t, v| composite(t, v, &w, &b), &x, 1e-6, 1e-4).unwrap();
            prop_assert!(r.passed, "{}", r.max_rel_error);
        }

        #[test]
        fn detach_barrier_is_exact(x in matrix(2, 3)) {
            let mut t = Tape::new();
            let v = t.leaf(x, true);
            let d = t.detach(v).unwrap();
            let y = t.mul(d, d).unwrap();
            let s = t.sum(y).unwrap();
            let g = t.backward(s).unwrap();
            prop_assert!(g.wrt(v).unwrap().data().iter().all(|v| v.to_bits() == 0));
        }

        #[test]
        fn same_tape_same_bits(x in matrix(3, 4), w in matrix(4, 2), b in matrix(1, 2)) {
            let run = || {
                let mut t = Tape::new();
                let v = t.leaf(x.clone(), true);
                let y = composite(&mut t, v, &w, &b).unwrap();
                (t.value(y).item().to_bits(), t.backward(y).unwrap().wrt(v).unwrap())
            };
            let (a, b) = (run(), run());
            prop_assert_eq!(a.0, b.0);
            prop_assert!(a.1.data().iter().zip(b.1.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}
