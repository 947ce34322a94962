//! Wengert tape over vector values.
//!
//! Nodes hold `Vec<f64>` values (a scalar is a vector of length one) and are
//! appended in topological order, so the backward pass is a single reverse
//! sweep. Adjoint buffers are allocated lazily: subgraphs that never receive
//! a contribution (everything behind a stop-gradient, in particular) are
//! skipped entirely.

use crate::{Error, Result};

pub type NodeId = usize;

/// Operation kind of a tape node, with input node ids.
#[derive(Debug, Clone)]
pub enum Op {
    /// Constant leaf: inputs, targets, anything not differentiated.
    Constant,
    /// Differentiable leaf: a parameter tensor; receives a gradient slot.
    Param,
    /// `w · x` where `w` is a `rows×cols` row-major matrix node.
    MatVec { w: NodeId, x: NodeId, rows: usize, cols: usize },
    /// Elementwise sum of two equal-length nodes.
    Add { a: NodeId, b: NodeId },
    /// Elementwise `max(0, a)`.
    Relu { a: NodeId },
    /// `a - logsumexp(a)`, the numerically stable log-softmax.
    LogSoftmax { a: NodeId },
    /// Scalar pick `a[idx]`.
    Index { a: NodeId, idx: usize },
    /// Elementwise `exp(a)`.
    Exp { a: NodeId },
    /// Elementwise `scale * a + shift`.
    Affine { a: NodeId, scale: f64, shift: f64 },
    /// Elementwise `a^p` on a nonnegative input.
    PowConst { a: NodeId, p: f64 },
    /// Elementwise product of two equal-length nodes.
    Mul { a: NodeId, b: NodeId },
    /// Scalar `Σ coef_i · term_i[0] + constant`.
    WeightedSum { terms: Vec<(f64, NodeId)>, constant: f64 },
    /// Identity on the value; adjoints stop here.
    StopGrad { a: NodeId },
}

struct Node {
    op: Op,
    value: Vec<f64>,
    /// False for constants and everything downstream of only-constant or
    /// stop-gradient inputs; backward never descends into such nodes.
    requires_grad: bool,
}

/// Recorded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    /// Scalar value of a length-one node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        self.nodes[id].value[0]
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn push(&mut self, op: Op, value: Vec<f64>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, requires_grad });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, value: Vec<f64>) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    pub fn param(&mut self, value: Vec<f64>) -> NodeId {
        self.push(Op::Param, value, true)
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        if self.nodes[w].value.len() != rows * cols {
            return Err(Error::input(format!(
                "matvec: weight node holds {} values, expected {rows}x{cols}",
                self.nodes[w].value.len()
            )));
        }
        if self.nodes[x].value.len() != cols {
            return Err(Error::input(format!(
                "matvec: input length {} does not match {cols} columns",
                self.nodes[x].value.len()
            )));
        }
        let mut out = vec![0.0; rows];
        {
            let wv = &self.nodes[w].value;
            let xv = &self.nodes[x].value;
            for r in 0..rows {
                let mut acc = 0.0;
                let row = &wv[r * cols..(r + 1) * cols];
                for c in 0..cols {
                    acc += row[c] * xv[c];
                }
                out[r] = acc;
            }
        }
        let rg = self.nodes[w].requires_grad || self.nodes[x].requires_grad;
        Ok(self.push(Op::MatVec { w, x, rows, cols }, out, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].value.len() != self.nodes[b].value.len() {
            return Err(Error::input("add: length mismatch"));
        }
        let out: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.nodes[a].requires_grad || self.nodes[b].requires_grad;
        Ok(self.push(Op::Add { a, b }, out, rg))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[a].value.iter().map(|&x| x.max(0.0)).collect();
        let rg = self.nodes[a].requires_grad;
        self.push(Op::Relu { a }, out, rg)
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a].value;
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        let out: Vec<f64> = v.iter().map(|&x| x - lse).collect();
        let rg = self.nodes[a].requires_grad;
        self.push(Op::LogSoftmax { a }, out, rg)
    }

    pub fn index(&mut self, a: NodeId, idx: usize) -> Result<NodeId> {
        if idx >= self.nodes[a].value.len() {
            return Err(Error::input(format!(
                "index {idx} out of range for node of length {}",
                self.nodes[a].value.len()
            )));
        }
        let out = vec![self.nodes[a].value[idx]];
        let rg = self.nodes[a].requires_grad;
        Ok(self.push(Op::Index { a, idx }, out, rg))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[a].value.iter().map(|&x| x.exp()).collect();
        let rg = self.nodes[a].requires_grad;
        self.push(Op::Exp { a }, out, rg)
    }

    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> NodeId {
        let out: Vec<f64> = self.nodes[a].value.iter().map(|&x| scale * x + shift).collect();
        let rg = self.nodes[a].requires_grad;
        self.push(Op::Affine { a, scale, shift }, out, rg)
    }

    /// Elementwise power on a nonnegative input. The derivative at zero is
    /// taken as zero, matching the one-sided limit used by the ramp factor.
    pub fn pow_const(&mut self, a: NodeId, p: f64) -> NodeId {
        let out: Vec<f64> = self.nodes[a].value.iter().map(|&x| x.max(0.0).powf(p)).collect();
        let rg = self.nodes[a].requires_grad;
        self.push(Op::PowConst { a, p }, out, rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].value.len() != self.nodes[b].value.len() {
            return Err(Error::input("mul: length mismatch"));
        }
        let out: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.nodes[a].requires_grad || self.nodes[b].requires_grad;
        Ok(self.push(Op::Mul { a, b }, out, rg))
    }

    /// Weighted sum of scalar nodes plus a constant, producing a scalar.
    pub fn weighted_sum(&mut self, terms: Vec<(f64, NodeId)>, constant: f64) -> Result<NodeId> {
        let mut acc = constant;
        for &(coef, id) in &terms {
            if self.nodes[id].value.len() != 1 {
                return Err(Error::input("weighted_sum: terms must be scalars"));
            }
            acc += coef * self.nodes[id].value[0];
        }
        let rg = terms.iter().any(|&(_, id)| self.nodes[id].requires_grad);
        Ok(self.push(Op::WeightedSum { terms, constant }, vec![acc], rg))
    }

    /// Stop-gradient: the value passes through, the adjoint does not.
    pub fn stop_grad(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a].value.clone();
        self.push(Op::StopGrad { a }, out, false)
    }

    /// Reverse sweep from a scalar root. Returns one adjoint buffer per node;
    /// nodes that received no contribution stay unallocated.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.nodes[root].value.len() != 1 {
            return Err(Error::input(format!(
                "backward root must be scalar, got length {}",
                self.nodes[root].value.len()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[root] = Some(vec![1.0]);

        for id in (0..=root).rev() {
            let Some(g) = adj[id].take() else { continue };
            // Put the buffer back for callers, then propagate to inputs.
            let node = &self.nodes[id];
            match &node.op {
                Op::Constant | Op::Param => {}
                Op::MatVec { w, x, rows, cols } => {
                    let (rows, cols) = (*rows, *cols);
                    if self.nodes[*w].requires_grad {
                        let xv = self.nodes[*x].value.clone();
                        let gw = Self::slot(&mut adj, *w, rows * cols);
                        for r in 0..rows {
                            let gr = g[r];
                            if gr != 0.0 {
                                for c in 0..cols {
                                    gw[r * cols + c] += gr * xv[c];
                                }
                            }
                        }
                    }
                    if self.nodes[*x].requires_grad {
                        let wv = self.nodes[*w].value.clone();
                        let gx = Self::slot(&mut adj, *x, cols);
                        for r in 0..rows {
                            let gr = g[r];
                            if gr != 0.0 {
                                for c in 0..cols {
                                    gx[c] += wv[r * cols + c] * gr;
                                }
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    for &inp in [a, b].iter() {
                        if self.nodes[*inp].requires_grad {
                            let ga = Self::slot(&mut adj, *inp, g.len());
                            for (s, &gi) in ga.iter_mut().zip(&g) {
                                *s += gi;
                            }
                        }
                    }
                }
                Op::Relu { a } => {
                    if self.nodes[*a].requires_grad {
                        let av = self.nodes[*a].value.clone();
                        let ga = Self::slot(&mut adj, *a, g.len());
                        for i in 0..g.len() {
                            if av[i] > 0.0 {
                                ga[i] += g[i];
                            }
                        }
                    }
                }
                Op::LogSoftmax { a } => {
                    if self.nodes[*a].requires_grad {
                        let y = node.value.clone();
                        let gsum: f64 = g.iter().sum();
                        let ga = Self::slot(&mut adj, *a, g.len());
                        for i in 0..g.len() {
                            ga[i] += g[i] - y[i].exp() * gsum;
                        }
                    }
                }
                Op::Index { a, idx } => {
                    if self.nodes[*a].requires_grad {
                        let n = self.nodes[*a].value.len();
                        let ga = Self::slot(&mut adj, *a, n);
                        ga[*idx] += g[0];
                    }
                }
                Op::Exp { a } => {
                    if self.nodes[*a].requires_grad {
                        let y = node.value.clone();
                        let ga = Self::slot(&mut adj, *a, g.len());
                        for i in 0..g.len() {
                            ga[i] += y[i] * g[i];
                        }
                    }
                }
                Op::Affine { a, scale, .. } => {
                    if self.nodes[*a].requires_grad {
                        let s = *scale;
                        let ga = Self::slot(&mut adj, *a, g.len());
                        for i in 0..g.len() {
                            ga[i] += s * g[i];
                        }
                    }
                }
                Op::PowConst { a, p } => {
                    if self.nodes[*a].requires_grad {
                        let av = self.nodes[*a].value.clone();
                        let p = *p;
                        let ga = Self::slot(&mut adj, *a, g.len());
                        for i in 0..g.len() {
                            let x = av[i];
                            if x > 0.0 {
                                ga[i] += p * x.powf(p - 1.0) * g[i];
                            }
                        }
                    }
                }
                Op::Mul { a, b } => {
                    if self.nodes[*a].requires_grad {
                        let bv = self.nodes[*b].value.clone();
                        let ga = Self::slot(&mut adj, *a, g.len());
                        for i in 0..g.len() {
                            ga[i] += bv[i] * g[i];
                        }
                    }
                    if self.nodes[*b].requires_grad {
                        let av = self.nodes[*a].value.clone();
                        let gb = Self::slot(&mut adj, *b, g.len());
                        for i in 0..g.len() {
                            gb[i] += av[i] * g[i];
                        }
                    }
                }
                Op::WeightedSum { terms, .. } => {
                    for &(coef, t) in terms {
                        if self.nodes[t].requires_grad {
                            let gt = Self::slot(&mut adj, t, 1);
                            gt[0] += coef * g[0];
                        }
                    }
                }
                Op::StopGrad { .. } => {
                    // Value-only node: nothing propagates.
                }
            }
            adj[id] = Some(g);
        }
        Ok(Gradients { adj })
    }

    fn slot<'a>(adj: &'a mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &'a mut Vec<f64> {
        adj[id].get_or_insert_with(|| vec![0.0; len])
    }
}

/// Adjoints produced by [`Tape::backward`], indexed by node id.
pub struct Gradients {
    adj: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Adjoint of a node; zeros if nothing reached it.
    pub fn get(&self, id: NodeId, len: usize) -> Vec<f64> {
        match &self.adj[id] {
            Some(v) => v.clone(),
            None => vec![0.0; len],
        }
    }

    /// Scalar adjoint of a length-one node.
    pub fn get_scalar(&self, id: NodeId) -> f64 {
        match &self.adj[id] {
            Some(v) => v[0],
            None => 0.0,
        }
    }

    pub fn reached(&self, id: NodeId) -> bool {
        self.adj[id].is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        // f(x) = x^2 at x = 3 -> df/dx = 6
        let mut t = Tape::new();
        let x = t.param(vec![3.0]);
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get_scalar(x), 6.0);
    }

    #[test]
    fn stop_grad_halts_one_path() {
        // f(x) = sg(x) * x at x = 3 -> df/dx = 3, not 6
        let mut t = Tape::new();
        let x = t.param(vec![3.0]);
        let sx = t.stop_grad(x);
        let y = t.mul(sx, x).unwrap();
        assert_eq!(t.scalar(y), 9.0);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get_scalar(x), 3.0);
    }

    #[test]
    fn stop_grad_subgraph_untouched() {
        // g(x) = sg(u(x)) * v(x): adjoint through u is exactly zero.
        let mut t = Tape::new();
        let x = t.param(vec![2.0]);
        let u = t.mul(x, x).unwrap(); // u = x^2 = 4
        let su = t.stop_grad(u);
        let v = t.affine(x, 3.0, 1.0); // v = 3x + 1 = 7
        let y = t.mul(su, v).unwrap(); // y = 4 * 7 = 28
        let g = t.backward(y).unwrap();
        // dy/dx = sg-value * dv/dx = 4 * 3 = 12
        assert_eq!(g.get_scalar(x), 12.0);
        assert!(!g.reached(u));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut t = Tape::new();
        let x = t.param(vec![1.0, 2.0]);
        let y = t.relu(x);
        assert!(t.backward(y).is_err());
    }

    #[test]
    fn log_softmax_matches_manual() {
        let mut t = Tape::new();
        let x = t.param(vec![1.0, 0.0, -1.0]);
        let y = t.log_softmax(x);
        let picked = t.index(y, 0).unwrap();
        let v = t.value(y).to_vec();
        let z: f64 = (1f64.exp() + 1.0 + (-1f64).exp()).ln();
        for (i, &xi) in [1.0, 0.0, -1.0].iter().enumerate() {
            assert!((v[i] - (xi - z)).abs() < 1e-12);
        }
        // d(-logsoftmax[0])/dx = softmax - onehot
        let neg = t.affine(picked, -1.0, 0.0);
        let g = t.backward(neg).unwrap();
        let gx = g.get(x, 3);
        let p: Vec<f64> = [1.0f64, 0.0, -1.0].iter().map(|&v| (v - z).exp()).collect();
        assert!((gx[0] - (p[0] - 1.0)).abs() < 1e-12);
        assert!((gx[1] - p[1]).abs() < 1e-12);
        assert!((gx[2] - p[2]).abs() < 1e-12);
    }

    #[test]
    fn matvec_shape_checks() {
        let mut t = Tape::new();
        let w = t.param(vec![1.0, 2.0, 3.0, 4.0]);
        let x = t.constant(vec![1.0, 1.0, 1.0]);
        assert!(t.matvec(w, x, 2, 2).is_err());
    }
}
