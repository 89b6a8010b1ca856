use super::tensor::{broadcast_kind, Tensor};
use crate::{Error, Result, Scalar};
use std::collections::BTreeMap;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

/// The closed operation set. Everything else is composed from these.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    /// Differentiable leaf.
    Input,
    /// Non-differentiable leaf; no gradient ever flows into it.
    Constant,
    MatMul,
    Add,
    Mul,
    Concat,
    SliceRows { start: usize, end: usize },
    Sum,
    Mse,
    Mae,
    Tanh,
    Silu,
    Sin,
    Cos,
    /// `1 - cosine_similarity(a, b)` over flattened values.
    CosineLoss,
    /// `1 - mean_c pearson(a[:,c], b[:,c])` along the leading (time) axis.
    PearsonLoss,
}

#[derive(Clone, Debug)]
struct Node<S> {
    op: Op,
    parents: Vec<NodeId>,
    value: Tensor<S>,
    /// Depends (transitively) on an `Input` leaf.
    needs_grad: bool,
}

/// Append-only compute graph. Nodes are topologically ordered by
/// construction; values are computed eagerly as nodes are added, and the
/// backward pass visits each node exactly once in reverse order.
#[derive(Clone, Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Node ids flagged as differentiation roots.
    pub fn inputs(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.op == Op::Input)
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor<S>> {
        self.node(id).map(|n| &n.value)
    }

    pub fn terminal(&self) -> Result<NodeId> {
        if self.nodes.is_empty() {
            Err(Error::Graph("empty graph has no terminal node".into()))
        } else {
            Ok(NodeId(self.nodes.len() - 1))
        }
    }

    fn node(&self, id: NodeId) -> Result<&Node<S>> {
        self.nodes.get(id.0).ok_or(Error::UnknownNode(id.0))
    }

    pub fn input(&mut self, value: Tensor<S>) -> NodeId {
        self.push_leaf(Op::Input, value)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push_leaf(Op::Constant, value)
    }

    fn push_leaf(&mut self, op: Op, value: Tensor<S>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            parents: Vec::new(),
            value,
            needs_grad: op == Op::Input,
        });
        id
    }

    /// Replace a leaf's value (same shape). Interior values go stale until
    /// [`Graph::forward`] recomputes them.
    pub fn set_value(&mut self, id: NodeId, value: Tensor<S>) -> Result<()> {
        let node = self.nodes.get_mut(id.0).ok_or(Error::UnknownNode(id.0))?;
        if !node.parents.is_empty() {
            return Err(Error::Graph(format!("node {} is not a leaf", id.0)));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                left: node.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        node.value = value;
        Ok(())
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>) -> Result<NodeId> {
        for p in &parents {
            self.node(*p)?;
        }
        let value = self.eval(op, &parents)?;
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            parents,
            value,
            needs_grad,
        });
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul, vec![a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.push(Op::Concat, parts.to_vec())
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.push(Op::SliceRows { start, end }, vec![x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sum, vec![x])
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mse, vec![a, b])
    }

    pub fn mae(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mae, vec![a, b])
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh, vec![x])
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Silu, vec![x])
    }

    pub fn sin(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sin, vec![x])
    }

    pub fn cos(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Cos, vec![x])
    }

    pub fn cosine_loss(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::CosineLoss, vec![a, b])
    }

    pub fn pearson_loss(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::PearsonLoss, vec![a, b])
    }

    /// Multiply by a scalar constant (composed, not a separate op kind).
    pub fn scale(&mut self, x: NodeId, factor: S) -> Result<NodeId> {
        let c = self.constant(Tensor::scalar(factor)?);
        self.mul(x, c)
    }

    /// Add a constant tensor (composed).
    pub fn add_const(&mut self, x: NodeId, t: Tensor<S>) -> Result<NodeId> {
        let c = self.constant(t);
        self.add(x, c)
    }

    fn eval(&self, op: Op, parents: &[NodeId]) -> Result<Tensor<S>> {
        let p = |i: usize| -> &Tensor<S> { &self.nodes[parents[i].0].value };
        match op {
            Op::Input | Op::Constant => {
                Err(Error::Graph("leaf nodes are not evaluated".into()))
            }
            Op::MatMul => p(0).matmul(p(1)),
            Op::Add => p(0).add(p(1)),
            Op::Mul => p(0).mul(p(1)),
            Op::Concat => {
                let parts: Vec<&Tensor<S>> = parents.iter().map(|q| &self.nodes[q.0].value).collect();
                Tensor::concat_cols(&parts)
            }
            Op::SliceRows { start, end } => p(0).slice_rows(start, end),
            Op::Sum => Tensor::scalar(p(0).sum()),
            Op::Mse => Tensor::scalar(p(0).mse(p(1))?),
            Op::Mae => Tensor::scalar(p(0).mae(p(1))?),
            Op::Tanh => p(0).map("tanh", |v| v.tanh()),
            Op::Silu => p(0).map("silu", |v| v * sigmoid(v)),
            Op::Sin => p(0).map("sin", |v| v.sin()),
            Op::Cos => p(0).map("cos", |v| v.cos()),
            Op::CosineLoss => Tensor::scalar(cosine_loss_value(p(0), p(1))?),
            Op::PearsonLoss => Tensor::scalar(pearson_loss_value(p(0), p(1))?),
        }
    }

    /// Recompute every interior node from the current leaf values and return
    /// the terminal value. Intermediates stay cached for [`Graph::backward`].
    pub fn forward(&mut self) -> Result<Tensor<S>> {
        let terminal = self.terminal()?;
        for i in 0..self.nodes.len() {
            if self.nodes[i].parents.is_empty() {
                continue;
            }
            let (op, parents) = (self.nodes[i].op, self.nodes[i].parents.clone());
            self.nodes[i].value = self.eval(op, &parents)?;
        }
        Ok(self.nodes[terminal.0].value.clone())
    }

    /// Reverse pass from the (scalar) terminal node. Returns the gradient of
    /// the terminal with respect to each requested root; roots the terminal
    /// does not depend on get a zero gradient of the root's shape.
    pub fn backward(&self, roots: &[NodeId]) -> Result<BTreeMap<NodeId, Tensor<S>>> {
        let terminal = self.terminal()?;
        let t_shape = self.nodes[terminal.0].value.shape();
        if self.nodes[terminal.0].value.numel() != 1 {
            return Err(Error::TerminalNotScalar {
                shape: t_shape.to_vec(),
            });
        }
        for r in roots {
            let node = self.node(*r)?;
            if node.op == Op::Constant {
                return Err(Error::GradOfConstant(r.0));
            }
        }

        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[terminal.0] = Some(Tensor::scalar(S::one())?);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.parents.is_empty() {
                grads[i] = Some(g);
                continue;
            }
            let contribs = self.vjp(node, &g)?;
            for (p, contrib) in node.parents.iter().zip(contribs) {
                if !self.nodes[p.0].needs_grad {
                    continue;
                }
                if let Some(c) = contrib {
                    match &mut grads[p.0] {
                        Some(acc) => *acc = acc.add(&c)?,
                        slot @ None => *slot = Some(c),
                    }
                }
            }
        }

        let mut out = BTreeMap::new();
        for r in roots {
            let g = grads[r.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[r.0].value.shape()));
            out.insert(*r, g);
        }
        Ok(out)
    }

    /// Per-parent gradient contributions for one node. `None` marks a parent
    /// that receives nothing (pruned constant subtrees are filtered by the
    /// caller anyway).
    fn vjp(&self, node: &Node<S>, g: &Tensor<S>) -> Result<Vec<Option<Tensor<S>>>> {
        let pv = |i: usize| -> &Tensor<S> { &self.nodes[node.parents[i].0].value };
        match node.op {
            Op::Input | Op::Constant => Ok(vec![]),
            Op::MatMul => {
                let da = g.matmul(&pv(1).transpose())?;
                let db = pv(0).transpose().matmul(g)?;
                Ok(vec![Some(da), Some(db)])
            }
            Op::Add => {
                let kind = broadcast_kind(pv(0).shape(), pv(1).shape())
                    .expect("validated at construction");
                let db = g.reduce_to(pv(1).shape(), kind);
                Ok(vec![Some(g.clone()), Some(db)])
            }
            Op::Mul => {
                let kind = broadcast_kind(pv(0).shape(), pv(1).shape())
                    .expect("validated at construction");
                let da = g.mul(pv(1))?;
                let db = g.mul(pv(0))?.reduce_to(pv(1).shape(), kind);
                Ok(vec![Some(da), Some(db)])
            }
            Op::Concat => {
                let rows = g.rows();
                let mut out = Vec::with_capacity(node.parents.len());
                let mut offset = 0;
                for p in &node.parents {
                    let c = self.nodes[p.0].value.cols();
                    let mut part = vec![S::zero(); rows * c];
                    for r in 0..rows {
                        for j in 0..c {
                            part[r * c + j] = g.get(r, offset + j);
                        }
                    }
                    out.push(Some(Tensor::matrix(rows, c, part)?));
                    offset += c;
                }
                Ok(out)
            }
            Op::SliceRows { start, .. } => {
                let src = pv(0);
                let mut dx = Tensor::zeros(src.shape());
                let cols = src.cols();
                let flat = dx.data_mut();
                for (i, &v) in g.data().iter().enumerate() {
                    flat[start * cols + i] = v;
                }
                Ok(vec![Some(dx)])
            }
            Op::Sum => {
                let gv = g.scalar_value().expect("sum output is scalar");
                Ok(vec![Some(Tensor::full(pv(0).shape(), gv)?)])
            }
            Op::Mse => {
                let gv = g.scalar_value().expect("mse output is scalar");
                let n = S::from_real(pv(0).numel() as f64);
                let factor = S::from_real(2.0) * gv / n;
                let diff = pv(0).sub(pv(1))?;
                let da = diff.scale(factor)?;
                let db = da.scale(-S::one())?;
                Ok(vec![Some(da), Some(db)])
            }
            Op::Mae => {
                let gv = g.scalar_value().expect("mae output is scalar");
                let n = S::from_real(pv(0).numel() as f64);
                let factor = gv / n;
                let diff = pv(0).sub(pv(1))?;
                let da = diff.map("mae_grad", |d| signum0(d) * factor)?;
                let db = da.scale(-S::one())?;
                Ok(vec![Some(da), Some(db)])
            }
            Op::Tanh => {
                let y = &node.value;
                let dx = elementwise(g, y, |gi, yi| gi * (S::one() - yi * yi))?;
                Ok(vec![Some(dx)])
            }
            Op::Silu => {
                let x = pv(0);
                let dx = elementwise(g, x, |gi, xi| {
                    let s = sigmoid(xi);
                    gi * (s + xi * s * (S::one() - s))
                })?;
                Ok(vec![Some(dx)])
            }
            Op::Sin => {
                let dx = elementwise(g, pv(0), |gi, xi| gi * xi.cos())?;
                Ok(vec![Some(dx)])
            }
            Op::Cos => {
                let dx = elementwise(g, pv(0), |gi, xi| -gi * xi.sin())?;
                Ok(vec![Some(dx)])
            }
            Op::CosineLoss => {
                let gv = g.scalar_value().expect("cosine loss is scalar");
                let (da, db) = cosine_loss_grads(pv(0), pv(1), gv)?;
                Ok(vec![Some(da), Some(db)])
            }
            Op::PearsonLoss => {
                let gv = g.scalar_value().expect("pearson loss is scalar");
                let (da, db) = pearson_loss_grads(pv(0), pv(1), gv)?;
                Ok(vec![Some(da), Some(db)])
            }
        }
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

fn signum0<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        S::one()
    } else if x < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}

fn elementwise<S: Scalar>(
    g: &Tensor<S>,
    x: &Tensor<S>,
    f: impl Fn(S, S) -> S,
) -> Result<Tensor<S>> {
    let data: Vec<S> = g
        .data()
        .iter()
        .zip(x.data().iter())
        .map(|(&gi, &xi)| f(gi, xi))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b.iter()).map(|(&x, &y)| x * y).sum()
}

/// `1 - cos(a, b)` over flattened values; 0 when either side has zero norm.
pub(crate) fn cosine_loss_value<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<S> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "cosine_loss",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let na2 = dot(a.data(), a.data());
    let nb2 = dot(b.data(), b.data());
    if na2 == S::zero() || nb2 == S::zero() {
        log::warn!("cosine loss: zero-norm operand, contribution set to 0");
        return Ok(S::zero());
    }
    let cos = dot(a.data(), b.data()) / (na2.sqrt() * nb2.sqrt());
    Ok(S::one() - cos)
}

fn cosine_loss_grads<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    g: S,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let na2 = dot(a.data(), a.data());
    let nb2 = dot(b.data(), b.data());
    if na2 == S::zero() || nb2 == S::zero() {
        return Ok((Tensor::zeros(a.shape()), Tensor::zeros(b.shape())));
    }
    let (na, nb) = (na2.sqrt(), nb2.sqrt());
    let cos = dot(a.data(), b.data()) / (na * nb);
    let da: Vec<S> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&ai, &bi)| g * (cos * ai / na2 - bi / (na * nb)))
        .collect();
    let db: Vec<S> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&ai, &bi)| g * (cos * bi / nb2 - ai / (na * nb)))
        .collect();
    Ok((
        Tensor::new(a.shape().to_vec(), da)?,
        Tensor::new(b.shape().to_vec(), db)?,
    ))
}

/// Per-channel Pearson correlation along the leading axis, averaged over
/// channels, as a loss `1 - mean_c r_c`. Channels where either side has zero
/// variance contribute 0 and log a warning.
pub(crate) fn pearson_loss_value<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<S> {
    let stats = pearson_stats(a, b)?;
    let c = S::from_real(stats.len() as f64);
    let total: S = stats
        .iter()
        .map(|s| match s {
            Some(st) => S::one() - st.r,
            None => S::zero(),
        })
        .sum();
    Ok(total / c)
}

struct ChannelStats<S> {
    ca: Vec<S>,
    cb: Vec<S>,
    na: S,
    nb: S,
    r: S,
}

fn pearson_stats<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<Vec<Option<ChannelStats<S>>>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "pearson_loss",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (rows, cols) = (a.rows(), a.cols());
    let n = S::from_real(rows as f64);
    let mut out = Vec::with_capacity(cols);
    for c in 0..cols {
        let col_a: Vec<S> = (0..rows).map(|r| a.get(r, c)).collect();
        let col_b: Vec<S> = (0..rows).map(|r| b.get(r, c)).collect();
        let ma = col_a.iter().copied().sum::<S>() / n;
        let mb = col_b.iter().copied().sum::<S>() / n;
        let ca: Vec<S> = col_a.iter().map(|&v| v - ma).collect();
        let cb: Vec<S> = col_b.iter().map(|&v| v - mb).collect();
        let na2 = dot(&ca, &ca);
        let nb2 = dot(&cb, &cb);
        if na2 == S::zero() || nb2 == S::zero() {
            log::warn!("pearson loss: zero-variance overlap channel {c}, contribution set to 0");
            out.push(None);
            continue;
        }
        let (na, nb) = (na2.sqrt(), nb2.sqrt());
        let r = dot(&ca, &cb) / (na * nb);
        out.push(Some(ChannelStats { ca, cb, na, nb, r }));
    }
    Ok(out)
}

fn pearson_loss_grads<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    g: S,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let stats = pearson_stats(a, b)?;
    let (rows, cols) = (a.rows(), a.cols());
    let n = S::from_real(rows as f64);
    let inv_c = S::one() / S::from_real(cols as f64);
    let mut da = Tensor::zeros(a.shape());
    let mut db = Tensor::zeros(b.shape());
    for (c, st) in stats.iter().enumerate() {
        let Some(st) = st else { continue };
        // d r / d a = center(cb/(na*nb) - r*ca/na^2); loss term is -r/cols.
        let raw_a: Vec<S> = (0..rows)
            .map(|i| st.cb[i] / (st.na * st.nb) - st.r * st.ca[i] / (st.na * st.na))
            .collect();
        let raw_b: Vec<S> = (0..rows)
            .map(|i| st.ca[i] / (st.na * st.nb) - st.r * st.cb[i] / (st.nb * st.nb))
            .collect();
        let mean_a = raw_a.iter().copied().sum::<S>() / n;
        let mean_b = raw_b.iter().copied().sum::<S>() / n;
        for i in 0..rows {
            da.set(i, c, -g * inv_c * (raw_a[i] - mean_a));
            db.set(i, c, -g * inv_c * (raw_b[i] - mean_b));
        }
    }
    Ok((da, db))
}

#[cfg(test)]
mod tests {
    use super::*;

    type T = Tensor<f64>;
    type G = Graph<f64>;

    /// Central finite differences of a scalar-valued function of one tensor.
    fn fd_grad(f: impl Fn(&T) -> f64, x: &T, h: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(x.numel());
        for i in 0..x.numel() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            out.push((f(&plus) - f(&minus)) / (2.0 * h));
        }
        out
    }

    fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        let scale = numeric
            .iter()
            .map(|v| v.abs())
            .fold(0.0_f64, f64::max)
            .max(1e-12);
        analytic
            .iter()
            .zip(numeric.iter())
            .map(|(a, n)| (a - n).abs() / scale)
            .fold(0.0, f64::max)
    }

    #[test]
    fn forward_identity() {
        let mut g = G::new();
        let x = g.input(T::new(vec![1], vec![2.0]).unwrap());
        assert_eq!(g.value(x).unwrap().data(), &[2.0]);
        assert_eq!(g.forward().unwrap().data(), &[2.0]);
    }

    #[test]
    fn forward_sum_of_squares() {
        let mut g = G::new();
        let x = g.input(T::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let y = g.sum(sq).unwrap();
        assert_eq!(g.value(y).unwrap().data(), &[14.0]);
    }

    #[test]
    fn forward_mse_matches_scalar_evaluation() {
        // y = mse(Ax, b), checked against an independent element-by-element
        // evaluation.
        let a_vals = [[0.5, -1.0, 2.0], [1.5, 0.25, -0.75]];
        let x_vals = [0.3, -0.7, 1.1];
        let b_vals = [0.9, -0.2];

        let mut g = G::new();
        let a = g.constant(T::matrix(2, 3, a_vals.concat()).unwrap());
        let x = g.input(T::matrix(3, 1, x_vals.to_vec()).unwrap());
        let b = g.constant(T::matrix(2, 1, b_vals.to_vec()).unwrap());
        let ax = g.matmul(a, x).unwrap();
        let y = g.mse(ax, b).unwrap();

        let mut expect = 0.0;
        for (row, bv) in a_vals.iter().zip(b_vals.iter()) {
            let mut acc = 0.0;
            for (av, xv) in row.iter().zip(x_vals.iter()) {
                acc += av * xv;
            }
            expect += (acc - bv) * (acc - bv);
        }
        expect /= 2.0;
        let got = g.value(y).unwrap().scalar_value().unwrap();
        assert!((got - expect).abs() < 1e-15, "{got} vs {expect}");
    }

    #[test]
    fn backward_sum_is_ones() {
        let mut g = G::new();
        let x = g.input(T::new(vec![5], vec![1.0, -2.0, 0.5, 3.0, 4.0]).unwrap());
        g.sum(x).unwrap();
        let grads = g.backward(&[x]).unwrap();
        assert_eq!(grads[&x].data(), &[1.0; 5]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut g = G::new();
        let x = g.input(T::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        g.sum(sq).unwrap();
        let grads = g.backward(&[x]).unwrap();
        assert_eq!(grads[&x].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_mlp_matches_finite_differences() {
        // y = mse(tanh(W x + b), target), gradient w.r.t. x.
        let w = T::matrix(3, 2, vec![0.4, -0.3, 0.8, 0.1, -0.5, 0.9]).unwrap();
        let bv = T::matrix(3, 1, vec![0.05, -0.1, 0.2]).unwrap();
        let target = T::matrix(3, 1, vec![0.3, -0.6, 0.1]).unwrap();
        let x0 = T::matrix(2, 1, vec![0.7, -0.2]).unwrap();

        let eval = |x: &T| -> f64 {
            let mut g = G::new();
            let wi = g.constant(w.clone());
            let bi = g.constant(bv.clone());
            let ti = g.constant(target.clone());
            let xi = g.input(x.clone());
            let wx = g.matmul(wi, xi).unwrap();
            let z = g.add(wx, bi).unwrap();
            let h = g.tanh(z).unwrap();
            let y = g.mse(h, ti).unwrap();
            g.value(y).unwrap().scalar_value().unwrap()
        };

        let mut g = G::new();
        let wi = g.constant(w.clone());
        let bi = g.constant(bv.clone());
        let ti = g.constant(target.clone());
        let xi = g.input(x0.clone());
        let wx = g.matmul(wi, xi).unwrap();
        let z = g.add(wx, bi).unwrap();
        let h = g.tanh(z).unwrap();
        g.mse(h, ti).unwrap();
        let analytic = g.backward(&[xi]).unwrap()[&xi].clone();

        let numeric = fd_grad(eval, &x0, 1e-5);
        assert!(
            max_rel_err(analytic.data(), &numeric) < 1e-6,
            "rel err {}",
            max_rel_err(analytic.data(), &numeric)
        );
    }

    #[test]
    fn backward_of_loss_sum_is_sum_of_backwards() {
        let x0 = T::new(vec![4], vec![0.4, -1.2, 0.9, 2.2]).unwrap();
        let t1 = T::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let t2 = T::new(vec![4], vec![-0.5, 0.0, 1.5, -1.0]).unwrap();

        let build = |which: u8| -> (G, NodeId) {
            let mut g = G::new();
            let x = g.input(x0.clone());
            let c1 = g.constant(t1.clone());
            let c2 = g.constant(t2.clone());
            let l1 = g.mse(x, c1).unwrap();
            let l2 = g.mae(x, c2).unwrap();
            match which {
                1 => {
                    // rebuild so l1 is terminal
                    let mut g = G::new();
                    let x = g.input(x0.clone());
                    let c1 = g.constant(t1.clone());
                    g.mse(x, c1).unwrap();
                    return (g, x);
                }
                2 => {
                    let mut g = G::new();
                    let x = g.input(x0.clone());
                    let c2 = g.constant(t2.clone());
                    g.mae(x, c2).unwrap();
                    return (g, x);
                }
                _ => {
                    g.add(l1, l2).unwrap();
                }
            }
            (g, x)
        };

        let (g_both, x_both) = build(0);
        let (g1, x1) = build(1);
        let (g2, x2) = build(2);
        let total = g_both.backward(&[x_both]).unwrap()[&x_both].clone();
        let part1 = g1.backward(&[x1]).unwrap()[&x1].clone();
        let part2 = g2.backward(&[x2]).unwrap()[&x2].clone();
        let summed = part1.add(&part2).unwrap();
        for (a, b) in total.data().iter().zip(summed.data().iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn constants_never_get_gradients() {
        let mut g = G::new();
        let x = g.input(T::scalar(2.0).unwrap());
        let z = g.constant(T::scalar(3.0).unwrap());
        let y = g.mul(x, z).unwrap();
        g.sum(y).unwrap();
        let err = g.backward(&[z]).unwrap_err();
        assert!(matches!(err, Error::GradOfConstant(_)));
        // And the input's gradient is unaffected by the constant subtree.
        let grads = g.backward(&[x]).unwrap();
        assert_eq!(grads[&x].data(), &[3.0]);
    }

    #[test]
    fn unknown_root_is_an_error() {
        let mut g = G::new();
        let x = g.input(T::scalar(1.0).unwrap());
        g.sum(x).unwrap();
        assert!(matches!(
            g.backward(&[NodeId(99)]).unwrap_err(),
            Error::UnknownNode(99)
        ));
    }

    #[test]
    fn non_scalar_terminal_is_an_error() {
        let mut g = G::new();
        let x = g.input(T::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        g.mul(x, x).unwrap();
        assert!(matches!(
            g.backward(&[x]).unwrap_err(),
            Error::TerminalNotScalar { .. }
        ));
    }

    #[test]
    fn unused_root_gets_zero_gradient() {
        let mut g = G::new();
        let x = g.input(T::scalar(1.0).unwrap());
        let unused = g.input(T::new(vec![2], vec![5.0, 6.0]).unwrap());
        g.sum(x).unwrap();
        let grads = g.backward(&[unused]).unwrap();
        assert_eq!(grads[&unused].data(), &[0.0, 0.0]);
    }

    #[test]
    fn set_value_and_forward_recompute() {
        let mut g = G::new();
        let x = g.input(T::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let y = g.sum(sq).unwrap();
        assert_eq!(g.value(y).unwrap().data(), &[5.0]);
        g.set_value(x, T::new(vec![2], vec![3.0, 4.0]).unwrap())
            .unwrap();
        assert_eq!(g.forward().unwrap().data(), &[25.0]);
    }

    #[test]
    fn broadcast_add_backward_reduces() {
        // y = sum((X + b)^2) with b a row vector.
        let x0 = T::matrix(3, 2, vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5]).unwrap();
        let b0 = T::new(vec![2], vec![0.3, -0.4]).unwrap();
        let eval = |b: &T| -> f64 {
            let mut g = G::new();
            let x = g.constant(x0.clone());
            let bi = g.input(b.clone());
            let z = g.add(x, bi).unwrap();
            let sq = g.mul(z, z).unwrap();
            let y = g.sum(sq).unwrap();
            g.value(y).unwrap().scalar_value().unwrap()
        };
        let mut g = G::new();
        let x = g.constant(x0.clone());
        let bi = g.input(b0.clone());
        let z = g.add(x, bi).unwrap();
        let sq = g.mul(z, z).unwrap();
        g.sum(sq).unwrap();
        let analytic = g.backward(&[bi]).unwrap()[&bi].clone();
        let numeric = fd_grad(eval, &b0, 1e-6);
        assert!(max_rel_err(analytic.data(), &numeric) < 1e-7);
    }

    #[test]
    fn concat_slice_backward_matches_fd() {
        let x0 = T::matrix(4, 2, vec![0.2, -0.6, 1.4, 0.8, -0.9, 0.1, 0.55, -1.3]).unwrap();
        let c0 = T::matrix(4, 1, vec![1.0, -1.0, 0.5, 0.25]).unwrap();
        let eval = |x: &T| -> f64 {
            let mut g = G::new();
            let xi = g.input(x.clone());
            let ci = g.constant(c0.clone());
            let cat = g.concat(&[xi, ci]).unwrap();
            let top = g.slice_rows(cat, 1, 3).unwrap();
            let sq = g.mul(top, top).unwrap();
            let y = g.sum(sq).unwrap();
            g.value(y).unwrap().scalar_value().unwrap()
        };
        let mut g = G::new();
        let xi = g.input(x0.clone());
        let ci = g.constant(c0.clone());
        let cat = g.concat(&[xi, ci]).unwrap();
        let top = g.slice_rows(cat, 1, 3).unwrap();
        let sq = g.mul(top, top).unwrap();
        g.sum(sq).unwrap();
        let analytic = g.backward(&[xi]).unwrap()[&xi].clone();
        let numeric = fd_grad(eval, &x0, 1e-6);
        assert!(max_rel_err(analytic.data(), &numeric) < 1e-7);
    }

    #[test]
    fn silu_sin_cos_backward_match_fd() {
        let x0 = T::matrix(2, 3, vec![0.5, -1.2, 0.7, 2.0, -0.3, 0.9]).unwrap();
        let eval = |x: &T| -> f64 {
            let mut g = G::new();
            let xi = g.input(x.clone());
            let s = g.silu(xi).unwrap();
            let sn = g.sin(s).unwrap();
            let cs = g.cos(xi).unwrap();
            let m = g.mul(sn, cs).unwrap();
            let y = g.sum(m).unwrap();
            g.value(y).unwrap().scalar_value().unwrap()
        };
        let mut g = G::new();
        let xi = g.input(x0.clone());
        let s = g.silu(xi).unwrap();
        let sn = g.sin(s).unwrap();
        let cs = g.cos(xi).unwrap();
        let m = g.mul(sn, cs).unwrap();
        g.sum(m).unwrap();
        let analytic = g.backward(&[xi]).unwrap()[&xi].clone();
        let numeric = fd_grad(eval, &x0, 1e-6);
        assert!(max_rel_err(analytic.data(), &numeric) < 1e-7);
    }

    #[test]
    fn cosine_loss_value_and_gradient() {
        let a0 = T::matrix(3, 2, vec![0.4, 1.2, -0.8, 0.3, 2.0, -1.1]).unwrap();
        let b0 = T::matrix(3, 2, vec![0.1, 0.9, -0.2, 0.8, 1.4, -0.5]).unwrap();

        // Proportional tensors have zero cosine loss.
        let doubled = a0.scale(2.0).unwrap();
        let mut g = G::new();
        let ai = g.input(a0.clone());
        let ci = g.constant(doubled);
        let y = g.cosine_loss(ai, ci).unwrap();
        assert!(g.value(y).unwrap().scalar_value().unwrap().abs() < 1e-12);

        let eval = |a: &T| -> f64 {
            let mut g = G::new();
            let ai = g.input(a.clone());
            let bi = g.constant(b0.clone());
            let y = g.cosine_loss(ai, bi).unwrap();
            g.value(y).unwrap().scalar_value().unwrap()
        };
        let mut g = G::new();
        let ai = g.input(a0.clone());
        let bi = g.constant(b0.clone());
        g.cosine_loss(ai, bi).unwrap();
        let analytic = g.backward(&[ai]).unwrap()[&ai].clone();
        let numeric = fd_grad(eval, &a0, 1e-6);
        assert!(max_rel_err(analytic.data(), &numeric) < 1e-6);
    }

    #[test]
    fn pearson_loss_value_and_gradient() {
        let a0 = T::matrix(4, 2, vec![0.4, 1.2, -0.8, 0.3, 2.0, -1.1, 0.6, 0.9]).unwrap();
        let b0 = T::matrix(4, 2, vec![0.5, 0.9, -0.6, 0.7, 1.8, -0.9, 0.2, 1.4]).unwrap();

        // Affine images correlate perfectly, channel by channel.
        let affine = a0.scale(3.0).unwrap().add(&T::scalar(1.0).unwrap()).unwrap();
        let mut g = G::new();
        let ai = g.input(a0.clone());
        let ci = g.constant(affine);
        let y = g.pearson_loss(ai, ci).unwrap();
        assert!(g.value(y).unwrap().scalar_value().unwrap().abs() < 1e-12);

        let eval = |a: &T| -> f64 {
            let mut g = G::new();
            let ai = g.input(a.clone());
            let bi = g.constant(b0.clone());
            let y = g.pearson_loss(ai, bi).unwrap();
            g.value(y).unwrap().scalar_value().unwrap()
        };
        let mut g = G::new();
        let ai = g.input(a0.clone());
        let bi = g.constant(b0.clone());
        g.pearson_loss(ai, bi).unwrap();
        let analytic = g.backward(&[ai]).unwrap()[&ai].clone();
        let numeric = fd_grad(eval, &a0, 1e-6);
        assert!(max_rel_err(analytic.data(), &numeric) < 1e-6);
    }

    #[test]
    fn pearson_zero_variance_contributes_zero() {
        let a0 = T::matrix(3, 2, vec![1.0, 0.4, 1.0, -0.2, 1.0, 0.7]).unwrap();
        let b0 = T::matrix(3, 2, vec![0.5, 0.4, -0.6, -0.2, 1.8, 0.7]).unwrap();
        // Channel 0 of `a` is constant; only channel 1 (perfectly matching)
        // contributes, so the loss is (0 + (1 - 1)) / 2 = 0.
        let mut g = G::new();
        let ai = g.input(a0);
        let bi = g.constant(b0);
        let y = g.pearson_loss(ai, bi).unwrap();
        assert!(g.value(y).unwrap().scalar_value().unwrap().abs() < 1e-12);
    }
}
