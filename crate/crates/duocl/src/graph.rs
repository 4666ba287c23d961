//! Reverse-mode gradient computation over a fixed primitive op set.
//!
//! A [`Graph`] is a topologically ordered tape of primitive ops. Leaves are
//! either embedded constants or named slots bound at evaluation time; named
//! slots marked trainable receive gradients in the backward pass. Graphs are
//! immutable once built and may be evaluated repeatedly with fresh bindings.

use std::collections::HashMap;

use crate::error::GraphError;
use crate::tensor::{softmax_slice, Scalar, TensorOf};

pub type NodeId = usize;

#[derive(Debug, Clone)]
pub enum Op<F> {
    /// Constant tensor embedded in the graph; receives no gradient.
    Const(TensorOf<F>),
    /// Named leaf bound at evaluation time. Trainable leaves get gradients.
    Leaf { name: String, trainable: bool },
    /// Matrix times vector or matrix times matrix.
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Multiply by a compile-time scalar constant.
    Scale(NodeId, F),
    Relu(NodeId),
    /// L2 normalization with the fixed-scale branch for near-zero inputs.
    Normalize(NodeId),
    Dot(NodeId, NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Assemble scalar nodes into a vector.
    ConcatScalars(Vec<NodeId>),
    /// Stack equal-length vector nodes into a matrix, one per row.
    StackRows(Vec<NodeId>),
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Const(_) => "const",
            Op::Leaf { .. } => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Normalize(_) => "l2-normalize",
            Op::Dot(..) => "dot",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log-softmax",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::ConcatScalars(_) => "concat",
            Op::StackRows(_) => "stack-rows",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph<F> {
    nodes: Vec<Op<F>>,
}

/// Forward values for one evaluation of a graph.
#[derive(Debug)]
pub struct Evaluation<F> {
    values: Vec<TensorOf<F>>,
    /// Nodes where l2-normalize hit the degenerate-input branch.
    pub degenerate_nodes: Vec<NodeId>,
}

impl<F: Scalar> Evaluation<F> {
    pub fn value(&self, id: NodeId) -> &TensorOf<F> {
        &self.values[id]
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<F>) -> NodeId {
        self.nodes.push(op);
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, t: TensorOf<F>) -> NodeId {
        self.push(Op::Const(t))
    }

    pub fn scalar_const(&mut self, v: F) -> NodeId {
        self.constant(TensorOf::scalar(v))
    }

    /// Trainable leaf; bound at evaluation, receives a gradient.
    pub fn param(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Leaf {
            name: name.into(),
            trainable: true,
        })
    }

    /// Non-trainable leaf; bound at evaluation, no gradient.
    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Leaf {
            name: name.into(),
            trainable: false,
        })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let neg = self.scale(b, -F::one());
        self.add(a, neg)
    }

    pub fn scale(&mut self, a: NodeId, c: F) -> NodeId {
        self.push(Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn normalize(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Normalize(a))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Dot(a, b))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSoftmax(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    pub fn concat_scalars(&mut self, parts: Vec<NodeId>) -> NodeId {
        self.push(Op::ConcatScalars(parts))
    }

    pub fn stack_rows(&mut self, rows: Vec<NodeId>) -> NodeId {
        self.push(Op::StackRows(rows))
    }

    pub fn op(&self, id: NodeId) -> &Op<F> {
        &self.nodes[id]
    }

    fn shape_err(&self, node: NodeId, detail: String) -> GraphError {
        GraphError::ShapeMismatch {
            node,
            op: self.nodes[node].name().to_string(),
            detail,
        }
    }

    /// Forward pass: computes every node value in topological order.
    pub fn evaluate(
        &self,
        bindings: &HashMap<String, TensorOf<F>>,
    ) -> Result<Evaluation<F>, GraphError> {
        let mut values: Vec<TensorOf<F>> = Vec::with_capacity(self.nodes.len());
        let mut degenerate_nodes = Vec::new();
        for (id, op) in self.nodes.iter().enumerate() {
            let v = match op {
                Op::Const(t) => t.clone(),
                Op::Leaf { name, .. } => bindings
                    .get(name)
                    .cloned()
                    .ok_or_else(|| GraphError::UnboundLeaf(name.clone()))?,
                Op::MatMul(a, b) => {
                    let (ma, mb) = (&values[*a], &values[*b]);
                    if ma.rank() != 2 {
                        return Err(self.shape_err(id, format!("lhs rank {} != 2", ma.rank())));
                    }
                    match mb.rank() {
                        1 => {
                            if ma.cols() != mb.len() {
                                return Err(self.shape_err(
                                    id,
                                    format!("{}x{} times vector of {}", ma.rows(), ma.cols(), mb.len()),
                                ));
                            }
                            ma.matvec(mb)
                        }
                        2 => {
                            if ma.cols() != mb.rows() {
                                return Err(self.shape_err(
                                    id,
                                    format!(
                                        "{}x{} times {}x{}",
                                        ma.rows(),
                                        ma.cols(),
                                        mb.rows(),
                                        mb.cols()
                                    ),
                                ));
                            }
                            ma.matmul2(mb)
                        }
                        r => return Err(self.shape_err(id, format!("rhs rank {r} unsupported"))),
                    }
                }
                Op::Add(a, b) => {
                    let (ta, tb) = (&values[*a], &values[*b]);
                    if ta.shape() != tb.shape() {
                        return Err(
                            self.shape_err(id, format!("{} vs {}", ta.shape(), tb.shape()))
                        );
                    }
                    ta.add(tb)
                }
                Op::Scale(a, c) => values[*a].scale(*c),
                Op::Relu(a) => values[*a].relu(),
                Op::Normalize(a) => {
                    let (n, degenerate) = values[*a].l2_normalize();
                    if degenerate {
                        degenerate_nodes.push(id);
                    }
                    n
                }
                Op::Dot(a, b) => {
                    let (ta, tb) = (&values[*a], &values[*b]);
                    if ta.len() != tb.len() {
                        return Err(self.shape_err(id, format!("{} vs {}", ta.len(), tb.len())));
                    }
                    TensorOf::scalar(ta.dot(tb))
                }
                Op::Softmax(a) => {
                    let t = &values[*a];
                    TensorOf::new(t.shape().clone(), softmax_slice(t.data()))?
                }
                Op::LogSoftmax(a) => {
                    let t = &values[*a];
                    let m = t.data().iter().fold(F::neg_infinity(), |acc, &v| acc.max(v));
                    let lse = t
                        .data()
                        .iter()
                        .fold(F::zero(), |acc, &v| acc + (v - m).exp())
                        .ln()
                        + m;
                    TensorOf::new(
                        t.shape().clone(),
                        t.data().iter().map(|&v| v - lse).collect(),
                    )?
                }
                Op::Exp(a) => {
                    let t = &values[*a];
                    TensorOf::new(t.shape().clone(), t.data().iter().map(|&v| v.exp()).collect())?
                }
                Op::Log(a) => {
                    let t = &values[*a];
                    TensorOf::new(t.shape().clone(), t.data().iter().map(|&v| v.ln()).collect())?
                }
                Op::Sum(a) => {
                    let t = &values[*a];
                    TensorOf::scalar(t.data().iter().fold(F::zero(), |acc, &v| acc + v))
                }
                Op::Mean(a) => {
                    let t = &values[*a];
                    let n = F::from_usize(t.len()).unwrap();
                    TensorOf::scalar(t.data().iter().fold(F::zero(), |acc, &v| acc + v) / n)
                }
                Op::ConcatScalars(parts) => {
                    let mut data = Vec::with_capacity(parts.len());
                    for &p in parts {
                        let t = &values[p];
                        if t.rank() != 0 {
                            return Err(
                                self.shape_err(id, format!("part {p} has shape {}", t.shape()))
                            );
                        }
                        data.push(t.item());
                    }
                    TensorOf::vector(data)
                }
                Op::StackRows(rows) => {
                    let cols = values[rows[0]].len();
                    let mut data = Vec::with_capacity(rows.len() * cols);
                    for &r in rows {
                        let t = &values[r];
                        if t.rank() != 1 || t.len() != cols {
                            return Err(
                                self.shape_err(id, format!("row {r} has shape {}", t.shape()))
                            );
                        }
                        data.extend_from_slice(t.data());
                    }
                    TensorOf::matrix(rows.len(), cols, data)?
                }
            };
            if !v.all_finite() {
                return Err(GraphError::NonFinite {
                    node: id,
                    op: op.name().to_string(),
                });
            }
            values.push(v);
        }
        Ok(Evaluation {
            values,
            degenerate_nodes,
        })
    }

    /// Backward pass from a scalar root; returns gradients for trainable leaves.
    pub fn gradient(
        &self,
        eval: &Evaluation<F>,
        root: NodeId,
    ) -> Result<HashMap<String, TensorOf<F>>, GraphError> {
        let root_val = eval.value(root);
        if root_val.rank() != 0 {
            return Err(GraphError::NonScalarRoot {
                node: root,
                shape: format!("{}", root_val.shape()),
            });
        }
        let mut adj: Vec<Option<TensorOf<F>>> = vec![None; self.nodes.len()];
        adj[root] = Some(TensorOf::scalar(F::one()));

        let accumulate = |adj: &mut Vec<Option<TensorOf<F>>>, id: NodeId, g: TensorOf<F>| {
            match &mut adj[id] {
                Some(existing) => *existing = existing.add(&g),
                slot @ None => *slot = Some(g),
            }
        };

        for id in (0..=root).rev() {
            let Some(grad) = adj[id].clone() else {
                continue;
            };
            match &self.nodes[id] {
                Op::Const(_) | Op::Leaf { .. } => {}
                Op::MatMul(a, b) => {
                    let (ma, mb) = (eval.value(*a), eval.value(*b));
                    match mb.rank() {
                        1 => {
                            // c_i = sum_j a_ij b_j
                            let (m, k) = (ma.rows(), ma.cols());
                            let mut da = vec![F::zero(); m * k];
                            let mut db = vec![F::zero(); k];
                            for i in 0..m {
                                let gi = grad.data()[i];
                                for j in 0..k {
                                    da[i * k + j] = gi * mb.data()[j];
                                    db[j] = db[j] + gi * ma.get2(i, j);
                                }
                            }
                            accumulate(&mut adj, *a, TensorOf::matrix(m, k, da)?);
                            accumulate(&mut adj, *b, TensorOf::vector(db));
                        }
                        _ => {
                            let (m, k, n) = (ma.rows(), ma.cols(), mb.cols());
                            let mut da = vec![F::zero(); m * k];
                            let mut db = vec![F::zero(); k * n];
                            for i in 0..m {
                                for l in 0..k {
                                    let mut acc = F::zero();
                                    for j in 0..n {
                                        acc = acc + grad.data()[i * n + j] * mb.get2(l, j);
                                    }
                                    da[i * k + l] = acc;
                                }
                            }
                            for l in 0..k {
                                for j in 0..n {
                                    let mut acc = F::zero();
                                    for i in 0..m {
                                        acc = acc + ma.get2(i, l) * grad.data()[i * n + j];
                                    }
                                    db[l * n + j] = acc;
                                }
                            }
                            accumulate(&mut adj, *a, TensorOf::matrix(m, k, da)?);
                            accumulate(&mut adj, *b, TensorOf::matrix(k, n, db)?);
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, grad.clone());
                    accumulate(&mut adj, *b, grad);
                }
                Op::Scale(a, c) => accumulate(&mut adj, *a, grad.scale(*c)),
                Op::Relu(a) => {
                    let x = eval.value(*a);
                    let data = x
                        .data()
                        .iter()
                        .zip(grad.data())
                        .map(|(&xi, &gi)| if xi > F::zero() { gi } else { F::zero() })
                        .collect();
                    accumulate(&mut adj, *a, TensorOf::new(x.shape().clone(), data)?);
                }
                Op::Normalize(a) => {
                    let x = eval.value(*a);
                    let y = eval.value(id);
                    if eval.degenerate_nodes.contains(&id) {
                        // degenerate branch is a fixed linear scaling
                        accumulate(&mut adj, *a, grad.scale(F::degenerate_norm().recip()));
                    } else {
                        let n = x.norm();
                        let ydg = y.dot(&grad);
                        let data = y
                            .data()
                            .iter()
                            .zip(grad.data())
                            .map(|(&yi, &gi)| (gi - yi * ydg) / n)
                            .collect();
                        accumulate(&mut adj, *a, TensorOf::new(x.shape().clone(), data)?);
                    }
                }
                Op::Dot(a, b) => {
                    let g = grad.item();
                    let (ta, tb) = (eval.value(*a), eval.value(*b));
                    accumulate(&mut adj, *a, tb.scale(g));
                    accumulate(&mut adj, *b, ta.scale(g));
                }
                Op::Softmax(a) => {
                    let y = eval.value(id);
                    let ydg = y.dot(&grad);
                    let data = y
                        .data()
                        .iter()
                        .zip(grad.data())
                        .map(|(&yi, &gi)| yi * (gi - ydg))
                        .collect();
                    accumulate(&mut adj, *a, TensorOf::new(y.shape().clone(), data)?);
                }
                Op::LogSoftmax(a) => {
                    let x = eval.value(*a);
                    let p = softmax_slice(x.data());
                    let gsum = grad.data().iter().fold(F::zero(), |acc, &v| acc + v);
                    let data = p
                        .iter()
                        .zip(grad.data())
                        .map(|(&pi, &gi)| gi - pi * gsum)
                        .collect();
                    accumulate(&mut adj, *a, TensorOf::new(x.shape().clone(), data)?);
                }
                Op::Exp(a) => {
                    let y = eval.value(id);
                    let data = y
                        .data()
                        .iter()
                        .zip(grad.data())
                        .map(|(&yi, &gi)| yi * gi)
                        .collect();
                    accumulate(&mut adj, *a, TensorOf::new(y.shape().clone(), data)?);
                }
                Op::Log(a) => {
                    let x = eval.value(*a);
                    let data = x
                        .data()
                        .iter()
                        .zip(grad.data())
                        .map(|(&xi, &gi)| gi / xi)
                        .collect();
                    accumulate(&mut adj, *a, TensorOf::new(x.shape().clone(), data)?);
                }
                Op::Sum(a) => {
                    let x = eval.value(*a);
                    let g = grad.item();
                    accumulate(
                        &mut adj,
                        *a,
                        TensorOf::new(x.shape().clone(), vec![g; x.len()])?,
                    );
                }
                Op::Mean(a) => {
                    let x = eval.value(*a);
                    let g = grad.item() / F::from_usize(x.len()).unwrap();
                    accumulate(
                        &mut adj,
                        *a,
                        TensorOf::new(x.shape().clone(), vec![g; x.len()])?,
                    );
                }
                Op::ConcatScalars(parts) => {
                    for (k, &p) in parts.iter().enumerate() {
                        accumulate(&mut adj, p, TensorOf::scalar(grad.data()[k]));
                    }
                }
                Op::StackRows(rows) => {
                    let cols = eval.value(rows[0]).len();
                    for (k, &r) in rows.iter().enumerate() {
                        accumulate(
                            &mut adj,
                            r,
                            TensorOf::vector(grad.data()[k * cols..(k + 1) * cols].to_vec()),
                        );
                    }
                }
            }
        }

        let mut out = HashMap::new();
        for (id, op) in self.nodes.iter().enumerate() {
            if let Op::Leaf {
                name,
                trainable: true,
            } = op
            {
                let g = match adj[id].take() {
                    Some(g) => g,
                    None => eval.value(id).zeros_like(),
                };
                match out.entry(name.clone()) {
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(g);
                    }
                    std::collections::hash_map::Entry::Occupied(mut e) => {
                        let merged = e.get().add(&g);
                        e.insert(merged);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Max relative error between reverse-mode and central finite differences
    /// for `leaf`, with denominator max(|analytic|, |numeric|, 1e-8).
    pub fn grad_check(
        &self,
        bindings: &HashMap<String, TensorOf<F>>,
        root: NodeId,
        leaf: &str,
        step: F,
    ) -> Result<F, GraphError> {
        let eval = self.evaluate(bindings)?;
        let grads = self.gradient(&eval, root)?;
        let analytic = grads
            .get(leaf)
            .cloned()
            .ok_or_else(|| GraphError::UnboundLeaf(leaf.to_string()))?;
        let base = bindings
            .get(leaf)
            .ok_or_else(|| GraphError::UnboundLeaf(leaf.to_string()))?;

        let floor = F::from_f64(1e-8).unwrap();
        let two = F::from_f64(2.0).unwrap();
        let mut max_err = F::zero();
        let mut perturbed = bindings.clone();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus.data_mut()[i] = plus.data()[i] + step;
            perturbed.insert(leaf.to_string(), plus);
            let f_plus = self.evaluate(&perturbed)?.value(root).item();

            let mut minus = base.clone();
            minus.data_mut()[i] = minus.data()[i] - step;
            perturbed.insert(leaf.to_string(), minus);
            let f_minus = self.evaluate(&perturbed)?.value(root).item();

            let numeric = (f_plus - f_minus) / (two * step);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(floor);
            max_err = max_err.max((a - numeric).abs() / denom);
        }
        Ok(max_err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TensorOf;

    type T = TensorOf<f64>;

    fn bind(pairs: &[(&str, T)]) -> HashMap<String, T> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(T::vector(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        let eval = g.evaluate(&HashMap::new()).unwrap();
        assert_eq!(eval.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn normalize_three_four_five() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(T::vector(vec![3.0, 4.0]));
        let y = g.normalize(x);
        let eval = g.evaluate(&HashMap::new()).unwrap();
        assert_eq!(eval.value(y).data(), &[0.6, 0.8]);
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(T::vector(vec![0.0, 0.0, 0.0]));
        let y = g.softmax(x);
        let eval = g.evaluate(&HashMap::new()).unwrap();
        for &v in eval.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn dot_gradient_is_linear() {
        let mut g = Graph::<f64>::new();
        let w = g.param("w");
        let x = g.constant(T::vector(vec![3.0, 4.0]));
        let root = g.dot(w, x);
        let eval = g.evaluate(&bind(&[("w", T::vector(vec![1.0, 2.0]))])).unwrap();
        let grads = g.gradient(&eval, root).unwrap();
        assert_eq!(grads["w"].data(), &[3.0, 4.0]);
    }

    #[test]
    fn normalize_gradient_orthogonal_to_input() {
        // root = sum(normalize(v)) at v=[1,0]; frozen from central differences
        let mut g = Graph::<f64>::new();
        let v = g.param("v");
        let n = g.normalize(v);
        let root = g.sum(n);
        let bindings = bind(&[("v", T::vector(vec![1.0, 0.0]))]);
        let eval = g.evaluate(&bindings).unwrap();
        let grads = g.gradient(&eval, root).unwrap();
        assert!((grads["v"].data()[0] - 0.0).abs() < 1e-12);
        assert!((grads["v"].data()[1] - 1.0).abs() < 1e-12);
        let err = g.grad_check(&bindings, root, "v", 1e-5).unwrap();
        assert!(err < 1e-4, "grad check error {err}");
    }

    #[test]
    fn kl_gradient_zero_at_equality() {
        // KL(p || softmax(z)) with p = softmax(z): gradient of z vanishes
        let zv = T::vector(vec![0.3, -0.7, 1.1]);
        let p = T::vector(softmax_slice(zv.data()));
        let mut g = Graph::<f64>::new();
        let z = g.param("z");
        let pc = g.constant(p.clone());
        let logp = g.log(pc);
        let logq = g.log_softmax(z);
        let diff = g.sub(logp, logq);
        let root = g.dot(pc, diff);
        let eval = g.evaluate(&bind(&[("z", zv)])).unwrap();
        assert!(eval.value(root).item().abs() < 1e-15);
        let grads = g.gradient(&eval, root).unwrap();
        for &v in grads["z"].data() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x");
        let y = g.relu(x);
        let eval = g.evaluate(&bind(&[("x", T::vector(vec![1.0, 2.0]))])).unwrap();
        assert!(matches!(
            g.gradient(&eval, y),
            Err(GraphError::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(T::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = g.constant(T::vector(vec![0.0; 2]));
        let _c = g.matmul(a, b);
        let err = g.evaluate(&HashMap::new()).unwrap_err();
        match err {
            GraphError::ShapeMismatch { node, op, .. } => {
                assert_eq!(node, 2);
                assert_eq!(op, "matmul");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn unbound_leaf_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x");
        let _ = g.sum(x);
        assert!(matches!(
            g.evaluate(&HashMap::new()),
            Err(GraphError::UnboundLeaf(_))
        ));
    }

    #[test]
    fn constant_graph_grad_check_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x");
        let _ = x;
        let c = g.constant(T::vector(vec![1.0, 2.0]));
        let root = g.sum(c);
        let bindings = bind(&[("x", T::vector(vec![0.5, 0.5]))]);
        let err = g.grad_check(&bindings, root, "x", 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn linear_graph_grad_check_tight() {
        let mut g = Graph::<f64>::new();
        let w = g.param("w");
        let x = g.constant(T::vector(vec![3.0, 4.0]));
        let root = g.dot(w, x);
        let bindings = bind(&[("w", T::vector(vec![1.0, 2.0]))]);
        let err = g.grad_check(&bindings, root, "w", 1e-5).unwrap();
        assert!(err < 1e-10, "linear map error {err}");
    }

    #[test]
    fn shared_leaf_grads_accumulate() {
        // root = dot(x, x) => grad = 2x
        let mut g = Graph::<f64>::new();
        let x1 = g.param("x");
        let x2 = g.param("x");
        let root = g.dot(x1, x2);
        let eval = g.evaluate(&bind(&[("x", T::vector(vec![1.0, 3.0]))])).unwrap();
        let grads = g.gradient(&eval, root).unwrap();
        assert_eq!(grads["x"].data(), &[2.0, 6.0]);
    }

    #[test]
    fn evaluate_is_deterministic() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x");
        let n = g.normalize(x);
        let s = g.softmax(n);
        let root = g.sum(s);
        let bindings = bind(&[("x", T::vector(vec![0.123, -0.456, 0.789]))]);
        let a = g.evaluate(&bindings).unwrap();
        let b = g.evaluate(&bindings).unwrap();
        assert_eq!(a.value(root), b.value(root));
    }
}
