//! Reverse-mode differentiation over a recorded tape of matrix operations.
//!
//! Nodes hold whole matrices (a batch of states, a weight matrix), so a
//! forward pass through an MLP records a handful of nodes per layer rather
//! than one per scalar. Each operation carries a hand-derived backward rule.
//!
//! Leaves are either *parameters* (gradients are accumulated for them) or
//! *constants*. Leaves may borrow their value, so binding a field's weights
//! to a tape costs nothing.

use std::borrow::Cow;

use crate::linalg::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// `x · wᵀ`
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Broadcast a `1×n` row over every row of the first operand.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    LeakyRelu(NodeId, f64),
    Relu(NodeId),
    ConcatCols(NodeId, NodeId),
    /// `(1/rows) Σ_ij w_j a_ij²` as a `1×1` node.
    WeightedMeanSq(NodeId, Vec<f64>),
    /// Signed row-dominance score of a square matrix (see `finetune_mle`).
    Dominance(NodeId, f64),
}

struct Node<'a> {
    value: Cow<'a, Mat>,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. The graph is also the backward context of any
/// unrolled solve performed on it.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Mat> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Mat> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn grad_any(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'a Mat) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: &'a Mat) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            needs_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param_owned(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id)[(0, 0)]
    }

    pub fn matmul_nt(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let v = self.value(x).matmul_nt(self.value(w));
        let g = self.grad_any(&[x, w]);
        self.push(v, Op::MatMulNt(x, w), g)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        let g = self.grad_any(&[a, b]);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b));
        let g = self.grad_any(&[a, b]);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (r, c) = self.value(a).shape();
        assert_eq!(self.value(row).shape(), (1, c), "add_row expects a 1x{c} row");
        let mut v = self.value(a).clone();
        let b = self.value(row).data().to_vec();
        for i in 0..r {
            for (x, bj) in v.row_mut(i).iter_mut().zip(&b) {
                *x += bj;
            }
        }
        let g = self.grad_any(&[a, row]);
        self.push(v, Op::AddRow(a, row), g)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        let g = self.grad_any(&[a]);
        self.push(v, Op::Scale(a, s), g)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        let g = self.grad_any(&[a]);
        self.push(v, Op::Tanh(a), g)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let v = self.value(a).map(|x| if x >= 0.0 { x } else { slope * x });
        let g = self.grad_any(&[a]);
        self.push(v, Op::LeakyRelu(a, slope), g)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        let g = self.grad_any(&[a]);
        self.push(v, Op::Relu(a), g)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ra, ca) = self.value(a).shape();
        let (rb, cb) = self.value(b).shape();
        assert_eq!(ra, rb, "concat_cols row count");
        let mut v = Mat::zeros(ra, ca + cb);
        for i in 0..ra {
            v.row_mut(i)[..ca].copy_from_slice(self.value(a).row(i));
            v.row_mut(i)[ca..].copy_from_slice(self.value(b).row(i));
        }
        let g = self.grad_any(&[a, b]);
        self.push(v, Op::ConcatCols(a, b), g)
    }

    /// Mean over rows of the squared row norm.
    pub fn mean_sq(&mut self, a: NodeId) -> NodeId {
        let c = self.value(a).cols();
        self.weighted_mean_sq(a, vec![1.0; c])
    }

    /// Mean over rows of `Σ_j w_j a_ij²`.
    pub fn weighted_mean_sq(&mut self, a: NodeId, weights: Vec<f64>) -> NodeId {
        let m = self.value(a);
        assert_eq!(weights.len(), m.cols(), "weighted_mean_sq weight count");
        let rows = m.rows().max(1) as f64;
        let mut total = 0.0;
        for i in 0..m.rows() {
            total += m
                .row(i)
                .iter()
                .zip(&weights)
                .map(|(x, w)| w * x * x)
                .sum::<f64>();
        }
        let g = self.grad_any(&[a]);
        self.push(Mat::filled(1, 1, total / rows), Op::WeightedMeanSq(a, weights), g)
    }

    pub fn dominance(&mut self, a: NodeId, eps: f64) -> NodeId {
        let score = crate::finetune::dominance_score(self.value(a), eps);
        let g = self.grad_any(&[a]);
        self.push(Mat::filled(1, 1, score), Op::Dominance(a, eps), g)
    }

    /// Back-propagate from a `1×1` output.
    pub fn backward(&self, output: NodeId) -> Gradients {
        assert_eq!(self.value(output).shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Mat::filled(1, 1, 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMulNt(x, w) => {
                    if self.nodes[x.0].needs_grad {
                        let gx = upstream.matmul(self.value(*w));
                        accumulate(&mut grads, *x, gx);
                    }
                    if self.nodes[w.0].needs_grad {
                        let gw = upstream.matmul_tn(self.value(*x));
                        accumulate(&mut grads, *w, gw);
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut grads, *a, upstream.clone());
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut grads, *b, upstream.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut grads, *a, upstream.clone());
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut grads, *b, upstream.scale(-1.0));
                    }
                }
                Op::AddRow(a, row) => {
                    if self.nodes[row.0].needs_grad {
                        let mut gb = Mat::zeros(1, upstream.cols());
                        for i in 0..upstream.rows() {
                            for (s, u) in gb.row_mut(0).iter_mut().zip(upstream.row(i)) {
                                *s += u;
                            }
                        }
                        accumulate(&mut grads, *row, gb);
                    }
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut grads, *a, upstream.clone());
                    }
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, *a, upstream.scale(*s));
                }
                Op::Tanh(a) => {
                    let gy = upstream.zip_with(&node.value, |u, y| u * (1.0 - y * y));
                    accumulate(&mut grads, *a, gy);
                }
                Op::LeakyRelu(a, slope) => {
                    let slope = *slope;
                    let gx = upstream
                        .zip_with(self.value(*a), |u, x| if x >= 0.0 { u } else { slope * u });
                    accumulate(&mut grads, *a, gx);
                }
                Op::Relu(a) => {
                    let gx = upstream.zip_with(self.value(*a), |u, x| if x > 0.0 { u } else { 0.0 });
                    accumulate(&mut grads, *a, gx);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut grads, *a, upstream.block(0, 0, upstream.rows(), ca));
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut grads, *b, upstream.block(0, ca, upstream.rows(), cb));
                    }
                }
                Op::WeightedMeanSq(a, weights) => {
                    let u = upstream[(0, 0)];
                    let x = self.value(*a);
                    let rows = x.rows().max(1) as f64;
                    let mut gx = Mat::zeros(x.rows(), x.cols());
                    for i in 0..x.rows() {
                        for (j, w) in weights.iter().enumerate() {
                            gx[(i, j)] = u * 2.0 * w * x[(i, j)] / rows;
                        }
                    }
                    accumulate(&mut grads, *a, gx);
                }
                Op::Dominance(a, eps) => {
                    let ga = crate::finetune::dominance_score_grad(self.value(*a), *eps)
                        .scale(upstream[(0, 0)]);
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Mat>], id: NodeId, g: Mat) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
