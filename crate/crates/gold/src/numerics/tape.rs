//! Recorded computation for reverse-mode gradients.
//!
//! The op vocabulary is fixed: the architectures here are small fixed-shape
//! networks, so a closed set keeps every backward rule short and auditable.
//! Nodes are appended in forward order, which is already a topological
//! order; `backward` sweeps the node list once in reverse.

use std::collections::HashMap;
use std::sync::Arc;

use super::{logsumexp_slice, softmax_rows, Matrix, ParamStore};
use crate::error::{Error, Result};
use crate::graph::SparseMatrix;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<String> },
    MatMul(NodeId, NodeId),
    SpMatMul(Arc<SparseMatrix>, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// a (m x n) + bias (1 x n), broadcast over rows.
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId, f64),
    LogSumExpRows(NodeId),
    SoftmaxRows(NodeId),
    MeanAll(NodeId),
    SumAll(NodeId),
    GatherRows(NodeId, Arc<Vec<usize>>),
    /// Selects entry `idx[i]` from row i, producing an m x 1 column.
    PickPerRow(NodeId, Arc<Vec<usize>>),
    ConcatCols(NodeId, NodeId),
    SliceCols(NodeId, usize, usize),
}

struct Node {
    op: Op,
    value: Matrix,
}

/// Per-parameter gradients keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Gradients(pub(crate) std::collections::BTreeMap<String, Matrix>);

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.0.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.0.iter()
    }
}

/// Wengert list over the fixed op vocabulary.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    /// Record a constant leaf. No gradient is reported for it.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf { param: None }, value)
    }

    /// Record a named parameter leaf, snapshotting the current value from
    /// the store. Repeated registration of the same name returns the
    /// existing node so adjoints accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter '{name}'")))?
            .clone();
        let id = self.push(
            Op::Leaf {
                param: Some(name.to_string()),
            },
            value,
        );
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self
            .value(a)
            .matmul(self.value(b))
            .expect("tape matmul shape mismatch");
        self.push(Op::MatMul(a, b), value)
    }

    pub fn sp_matmul(&mut self, a: &Arc<SparseMatrix>, x: NodeId) -> NodeId {
        let value = a.matmul_dense(self.value(x)).expect("tape spmm shape mismatch");
        self.push(Op::SpMatMul(Arc::clone(a), x), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self
            .value(a)
            .add(self.value(b))
            .expect("tape add shape mismatch");
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self
            .value(a)
            .sub(self.value(b))
            .expect("tape sub shape mismatch");
        self.push(Op::Sub(a, b), value)
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (m, n) = (self.value(a).rows(), self.value(a).cols());
        let b = self.value(bias);
        assert!(
            b.rows() == 1 && b.cols() == n,
            "tape add_row bias must be 1x{n}, got {}x{}",
            b.rows(),
            b.cols()
        );
        let mut value = self.value(a).clone();
        for i in 0..m {
            for j in 0..n {
                let v = value.get(i, j) + b.get(0, j);
                value.set(i, j, v);
            }
        }
        self.push(Op::AddRow(a, bias), value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self
            .value(a)
            .hadamard(self.value(b))
            .expect("tape mul shape mismatch");
        self.push(Op::Mul(a, b), value)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu(x), value)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(f64::exp);
        self.push(Op::Exp(x), value)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(f64::ln);
        self.push(Op::Log(x), value)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v * v);
        self.push(Op::Square(x), value)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.value(x).scale(c);
        self.push(Op::Scale(x, c), value)
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.value(x).map(|v| v + c);
        self.push(Op::AddConst(x, c), value)
    }

    pub fn logsumexp_rows(&mut self, x: NodeId) -> NodeId {
        let value = super::logsumexp_rows(self.value(x)).expect("tape logsumexp on empty matrix");
        self.push(Op::LogSumExpRows(x), value)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let value = softmax_rows(self.value(x));
        self.push(Op::SoftmaxRows(x), value)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let value = Matrix::from_vec(1, 1, vec![self.value(x).mean_all()]).unwrap();
        self.push(Op::MeanAll(x), value)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let value = Matrix::from_vec(1, 1, vec![self.value(x).sum_all()]).unwrap();
        self.push(Op::SumAll(x), value)
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &Arc<Vec<usize>>) -> NodeId {
        let src = self.value(x);
        let mut value = Matrix::zeros(idx.len(), src.cols());
        for (out_i, &src_i) in idx.iter().enumerate() {
            assert!(src_i < src.rows(), "gather_rows index {src_i} out of range");
            for j in 0..src.cols() {
                value.set(out_i, j, src.get(src_i, j));
            }
        }
        self.push(Op::GatherRows(x, Arc::clone(idx)), value)
    }

    pub fn pick_per_row(&mut self, x: NodeId, idx: &Arc<Vec<usize>>) -> NodeId {
        let src = self.value(x);
        assert_eq!(idx.len(), src.rows(), "pick_per_row needs one index per row");
        let mut value = Matrix::zeros(src.rows(), 1);
        for (i, &j) in idx.iter().enumerate() {
            assert!(j < src.cols(), "pick_per_row column {j} out of range");
            value.set(i, 0, src.get(i, j));
        }
        self.push(Op::PickPerRow(x, Arc::clone(idx)), value)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(ma.rows(), mb.rows(), "concat_cols row mismatch");
        let (m, na, nb) = (ma.rows(), ma.cols(), mb.cols());
        let mut value = Matrix::zeros(m, na + nb);
        for i in 0..m {
            for j in 0..na {
                value.set(i, j, ma.get(i, j));
            }
            for j in 0..nb {
                value.set(i, na + j, mb.get(i, j));
            }
        }
        self.push(Op::ConcatCols(a, b), value)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let src = self.value(x);
        assert!(start + len <= src.cols(), "slice_cols out of range");
        let mut value = Matrix::zeros(src.rows(), len);
        for i in 0..src.rows() {
            for j in 0..len {
                value.set(i, j, src.get(i, start + j));
            }
        }
        self.push(Op::SliceCols(x, start, len), value)
    }

    /// Reverse sweep from a scalar loss node. Returns d(loss)/d(p) for every
    /// parameter in `store`; parameters that do not reach the loss get a
    /// zero gradient of matching shape.
    pub fn backward(&self, loss: NodeId, store: &ParamStore) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.rows() != 1 || loss_value.cols() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss node, got {}x{}",
                loss_value.rows(),
                loss_value.cols()
            )));
        }

        let mut adjoints: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoints[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0]).unwrap());

        for i in (0..self.nodes.len()).rev() {
            let grad = match adjoints[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_op(i, &grad, &mut adjoints);
            adjoints[i] = Some(grad);
        }

        let mut out = std::collections::BTreeMap::new();
        for (name, value) in store.iter() {
            let g = self
                .params
                .get(name)
                .and_then(|id| adjoints[id.0].clone())
                .unwrap_or_else(|| Matrix::zeros(value.rows(), value.cols()));
            out.insert(name.clone(), g);
        }
        Ok(Gradients(out))
    }

    fn accumulate(adjoints: &mut [Option<Matrix>], target: NodeId, delta: Matrix) {
        match &mut adjoints[target.0] {
            Some(existing) => {
                let sum = existing.add(&delta).expect("adjoint shape mismatch");
                *existing = sum;
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backward_op(&self, idx: usize, grad: &Matrix, adjoints: &mut [Option<Matrix>]) {
        match &self.nodes[idx].op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                // d_a = g @ b^T ; d_b = a^T @ g
                let bt = self.value(*b).transpose();
                let at = self.value(*a).transpose();
                Self::accumulate(adjoints, *a, grad.matmul(&bt).unwrap());
                Self::accumulate(adjoints, *b, at.matmul(grad).unwrap());
            }
            Op::SpMatMul(sp, x) => {
                Self::accumulate(adjoints, *x, sp.transpose_matmul_dense(grad).unwrap());
            }
            Op::Add(a, b) => {
                Self::accumulate(adjoints, *a, grad.clone());
                Self::accumulate(adjoints, *b, grad.clone());
            }
            Op::Sub(a, b) => {
                Self::accumulate(adjoints, *a, grad.clone());
                Self::accumulate(adjoints, *b, grad.scale(-1.0));
            }
            Op::AddRow(a, bias) => {
                Self::accumulate(adjoints, *a, grad.clone());
                let mut db = Matrix::zeros(1, grad.cols());
                for i in 0..grad.rows() {
                    for j in 0..grad.cols() {
                        let v = db.get(0, j) + grad.get(i, j);
                        db.set(0, j, v);
                    }
                }
                Self::accumulate(adjoints, *bias, db);
            }
            Op::Mul(a, b) => {
                let da = grad.hadamard(self.value(*b)).unwrap();
                let db = grad.hadamard(self.value(*a)).unwrap();
                Self::accumulate(adjoints, *a, da);
                Self::accumulate(adjoints, *b, db);
            }
            Op::Relu(x) => {
                // Subgradient at 0 is 0: only strictly positive inputs pass.
                let mask = self.value(*x).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                Self::accumulate(adjoints, *x, grad.hadamard(&mask).unwrap());
            }
            Op::Exp(x) => {
                let dx = grad.hadamard(&self.nodes[idx].value).unwrap();
                Self::accumulate(adjoints, *x, dx);
            }
            Op::Log(x) => {
                let inv = self.value(*x).map(|v| 1.0 / v);
                Self::accumulate(adjoints, *x, grad.hadamard(&inv).unwrap());
            }
            Op::Square(x) => {
                let dx = grad.hadamard(&self.value(*x).scale(2.0)).unwrap();
                Self::accumulate(adjoints, *x, dx);
            }
            Op::Scale(x, c) => {
                Self::accumulate(adjoints, *x, grad.scale(*c));
            }
            Op::AddConst(x, _) => {
                Self::accumulate(adjoints, *x, grad.clone());
            }
            Op::LogSumExpRows(x) => {
                // d_x[i, c] = g[i] * softmax(x[i, :])[c]
                let src = self.value(*x);
                let out = &self.nodes[idx].value;
                let mut dx = Matrix::zeros(src.rows(), src.cols());
                for i in 0..src.rows() {
                    let gi = grad.get(i, 0);
                    for c in 0..src.cols() {
                        dx.set(i, c, gi * (src.get(i, c) - out.get(i, 0)).exp());
                    }
                }
                Self::accumulate(adjoints, *x, dx);
            }
            Op::SoftmaxRows(x) => {
                // d_x = s * (g - sum_c g*s) per row
                let s = &self.nodes[idx].value;
                let mut dx = Matrix::zeros(s.rows(), s.cols());
                for i in 0..s.rows() {
                    let dot: f64 = (0..s.cols()).map(|c| grad.get(i, c) * s.get(i, c)).sum();
                    for c in 0..s.cols() {
                        dx.set(i, c, s.get(i, c) * (grad.get(i, c) - dot));
                    }
                }
                Self::accumulate(adjoints, *x, dx);
            }
            Op::MeanAll(x) => {
                let src = self.value(*x);
                let g = grad.get(0, 0) / (src.rows() * src.cols()) as f64;
                Self::accumulate(adjoints, *x, Matrix::filled(src.rows(), src.cols(), g));
            }
            Op::SumAll(x) => {
                let src = self.value(*x);
                let g = grad.get(0, 0);
                Self::accumulate(adjoints, *x, Matrix::filled(src.rows(), src.cols(), g));
            }
            Op::GatherRows(x, idx_list) => {
                let src = self.value(*x);
                let mut dx = Matrix::zeros(src.rows(), src.cols());
                for (out_i, &src_i) in idx_list.iter().enumerate() {
                    for j in 0..src.cols() {
                        let v = dx.get(src_i, j) + grad.get(out_i, j);
                        dx.set(src_i, j, v);
                    }
                }
                Self::accumulate(adjoints, *x, dx);
            }
            Op::PickPerRow(x, idx_list) => {
                let src = self.value(*x);
                let mut dx = Matrix::zeros(src.rows(), src.cols());
                for (i, &j) in idx_list.iter().enumerate() {
                    dx.set(i, j, grad.get(i, 0));
                }
                Self::accumulate(adjoints, *x, dx);
            }
            Op::ConcatCols(a, b) => {
                let na = self.value(*a).cols();
                let nb = self.value(*b).cols();
                let m = grad.rows();
                let mut da = Matrix::zeros(m, na);
                let mut db = Matrix::zeros(m, nb);
                for i in 0..m {
                    for j in 0..na {
                        da.set(i, j, grad.get(i, j));
                    }
                    for j in 0..nb {
                        db.set(i, j, grad.get(i, na + j));
                    }
                }
                Self::accumulate(adjoints, *a, da);
                Self::accumulate(adjoints, *b, db);
            }
            Op::SliceCols(x, start, len) => {
                let src = self.value(*x);
                let mut dx = Matrix::zeros(src.rows(), src.cols());
                for i in 0..src.rows() {
                    for j in 0..*len {
                        dx.set(i, start + j, grad.get(i, j));
                    }
                }
                Self::accumulate(adjoints, *x, dx);
            }
        }
    }

    /// Scalar convenience: logsumexp over a 1-row slice of values.
    pub fn scalar_logsumexp(values: &[f64]) -> f64 {
        logsumexp_slice(values)
    }
}
