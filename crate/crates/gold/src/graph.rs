//! Sparse graph representation, GCN adjacency normalisations, and the
//! energy propagation operator.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Undirected transductive graph: features, optional labels, named masks.
/// Edges are stored deduplicated with u < v; self-loops from the input are
/// dropped (normalisations add their own canonical self-loops).
#[derive(Debug, Clone)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    features: Matrix,
    labels: Vec<Option<usize>>,
    masks: BTreeMap<String, Vec<usize>>,
}

impl Graph {
    pub fn new(
        n: usize,
        raw_edges: &[(usize, usize)],
        features: Matrix,
        labels: Vec<Option<usize>>,
        masks: BTreeMap<String, Vec<usize>>,
    ) -> Result<Self> {
        if features.rows() != n {
            return Err(Error::dimension(format!(
                "feature matrix has {} rows for {n} nodes",
                features.rows()
            )));
        }
        if labels.len() != n {
            return Err(Error::dimension(format!(
                "label vector has {} entries for {n} nodes",
                labels.len()
            )));
        }
        if !features.all_finite() {
            return Err(Error::Numerical("non-finite feature entries".into()));
        }
        let mut edges = Vec::with_capacity(raw_edges.len());
        for &(u, v) in raw_edges {
            if u >= n || v >= n {
                return Err(Error::contract(format!(
                    "edge ({u},{v}) out of range for {n} nodes"
                )));
            }
            if u == v {
                continue; // input self-loops dropped
            }
            edges.push((u.min(v), u.max(v)));
        }
        edges.sort_unstable();
        edges.dedup();
        for (name, idx) in &masks {
            if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
                return Err(Error::contract(format!(
                    "mask '{name}' index {bad} out of range for {n} nodes"
                )));
            }
        }
        let mut masks = masks;
        for idx in masks.values_mut() {
            idx.sort_unstable();
            idx.dedup();
        }
        Ok(Graph {
            n,
            edges,
            features,
            labels,
            masks,
        })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Canonical (u < v) deduplicated edge list.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn label(&self, node: usize) -> Option<usize> {
        self.labels[node]
    }

    pub fn num_classes(&self) -> usize {
        self.labels
            .iter()
            .flatten()
            .map(|&c| c + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn mask(&self, name: &str) -> Option<&[usize]> {
        self.masks.get(name).map(|v| v.as_slice())
    }

    pub fn masks(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.masks
    }

    pub fn set_mask(&mut self, name: impl Into<String>, mut idx: Vec<usize>) -> Result<()> {
        let name = name.into();
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.n) {
            return Err(Error::contract(format!(
                "mask '{name}' index {bad} out of range"
            )));
        }
        idx.sort_unstable();
        idx.dedup();
        self.masks.insert(name, idx);
        Ok(())
    }

    /// Per-node degree over the stored undirected edges (no self-loops).
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.n];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    pub fn with_features(&self, features: Matrix) -> Result<Graph> {
        Graph::new(
            self.n,
            &self.edges,
            features,
            self.labels.clone(),
            self.masks.clone(),
        )
    }

    pub fn with_edges(&self, edges: &[(usize, usize)]) -> Result<Graph> {
        Graph::new(
            self.n,
            edges,
            self.features.clone(),
            self.labels.clone(),
            self.masks.clone(),
        )
    }
}

/// Compressed sparse row matrix; column indices sorted within each row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Build from per-row (col, value) triples; entries are sorted and
    /// validated against the shape.
    pub fn from_rows(rows: usize, cols: usize, mut entries: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        if entries.len() != rows {
            return Err(Error::dimension(format!(
                "expected {rows} entry rows, got {}",
                entries.len()
            )));
        }
        let mut row_offsets = Vec::with_capacity(rows + 1);
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        row_offsets.push(0);
        for row in entries.iter_mut() {
            row.sort_unstable_by_key(|&(c, _)| c);
            for &(c, v) in row.iter() {
                if c >= cols {
                    return Err(Error::dimension(format!(
                        "sparse column {c} out of range for {cols}"
                    )));
                }
                if !v.is_finite() {
                    return Err(Error::Numerical("non-finite sparse value".into()));
                }
                col_indices.push(c);
                values.push(v);
            }
            row_offsets.push(col_indices.len());
        }
        Ok(SparseMatrix {
            rows,
            cols,
            row_offsets,
            col_indices,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_offsets[r]..self.row_offsets[r + 1];
        self.col_indices[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    /// self @ dense
    pub fn matmul_dense(&self, x: &Matrix) -> Result<Matrix> {
        if self.cols != x.rows() {
            return Err(Error::dimension(format!(
                "sparse matmul shape mismatch: {}x{} @ {}x{}",
                self.rows,
                self.cols,
                x.rows(),
                x.cols()
            )));
        }
        let n = x.cols();
        let mut out = Matrix::zeros(self.rows, n);
        for r in 0..self.rows {
            for (c, v) in self.row_entries(r) {
                let src = x.row(c);
                let dst = &mut out.data_mut()[r * n..(r + 1) * n];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
        Ok(out)
    }

    /// self^T @ dense, computed by scatter over the CSR rows.
    pub fn transpose_matmul_dense(&self, x: &Matrix) -> Result<Matrix> {
        if self.rows != x.rows() {
            return Err(Error::dimension(format!(
                "sparse transpose matmul shape mismatch: ({}x{})^T @ {}x{}",
                self.rows,
                self.cols,
                x.rows(),
                x.cols()
            )));
        }
        let n = x.cols();
        let mut out = Matrix::zeros(self.cols, n);
        for r in 0..self.rows {
            let src = x.row(r).to_vec();
            for (c, v) in self.row_entries(r) {
                let dst = &mut out.data_mut()[c * n..(c + 1) * n];
                for (d, &s) in dst.iter_mut().zip(&src) {
                    *d += v * s;
                }
            }
        }
        Ok(out)
    }

    pub fn to_dense(&self) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row_entries(r) {
                out.set(r, c, v);
            }
        }
        out
    }
}

/// Symmetric GCN normalisation D~^{-1/2} (A + I) D~^{-1/2} with D~ the
/// degree of A + I. Isolated nodes reduce to a self-loop of weight 1.
pub fn sym_normalize(g: &Graph) -> Result<SparseMatrix> {
    let n = g.node_count();
    let mut deg = vec![1.0f64; n]; // self-loop contributes 1 everywhere
    for &(u, v) in g.edges() {
        deg[u] += 1.0;
        deg[v] += 1.0;
    }
    let inv_sqrt: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut entries: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|i| vec![(i, inv_sqrt[i] * inv_sqrt[i])])
        .collect();
    for &(u, v) in g.edges() {
        entries[u].push((v, inv_sqrt[u] * inv_sqrt[v]));
        entries[v].push((u, inv_sqrt[u] * inv_sqrt[v]));
    }
    SparseMatrix::from_rows(n, n, entries)
}

/// Random-walk normalisation D^{-1} A without self-loops. Rows of
/// degree-0 nodes are all zero.
pub fn row_normalize(g: &Graph) -> Result<SparseMatrix> {
    let n = g.node_count();
    let deg = g.degrees();
    let mut entries: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for &(u, v) in g.edges() {
        entries[u].push((v, 1.0 / deg[u] as f64));
        entries[v].push((u, 1.0 / deg[v] as f64));
    }
    SparseMatrix::from_rows(n, n, entries)
}

/// One-step propagation operator M = alpha I + (1 - alpha) D^{-1} A, with
/// isolated nodes given a unit self-loop in the neighbour term so their
/// energies are fixed points of the recursion.
pub fn propagation_operator(g: &Graph, alpha: f64) -> Result<Arc<SparseMatrix>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::contract(format!(
            "propagation alpha must lie in [0,1], got {alpha}"
        )));
    }
    let n = g.node_count();
    let deg = g.degrees();
    let mut entries: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|i| {
            let self_weight = if deg[i] == 0 { 1.0 } else { alpha };
            vec![(i, self_weight)]
        })
        .collect();
    let spread = 1.0 - alpha;
    for &(u, v) in g.edges() {
        entries[u].push((v, spread / deg[u] as f64));
        entries[v].push((u, spread / deg[v] as f64));
    }
    // Merge duplicate (i, i) pairs is unnecessary: self entries are unique.
    Ok(Arc::new(SparseMatrix::from_rows(n, n, entries)?))
}

/// Applies e <- alpha e + (1 - alpha) D^{-1} A e for `k` steps on a plain
/// column vector. Isolated nodes keep their energy unchanged.
pub fn propagate_energy(e: &Matrix, g: &Graph, alpha: f64, k: usize) -> Result<Matrix> {
    if e.rows() != g.node_count() || e.cols() != 1 {
        return Err(Error::dimension(format!(
            "energy vector must be {}x1, got {}x{}",
            g.node_count(),
            e.rows(),
            e.cols()
        )));
    }
    let op = propagation_operator(g, alpha)?;
    let mut current = e.clone();
    for _ in 0..k {
        current = op.matmul_dense(&current)?;
    }
    Ok(current)
}
