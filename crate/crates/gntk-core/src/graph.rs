//! Undirected graphs and the adjacency operators realized from them.

use std::collections::HashSet;

use nalgebra::DMatrix;
use nalgebra_sparse::{CooMatrix, CsrMatrix};

use crate::error::{Error, Result};

/// Undirected weighted graph. Each edge is stored once as `(u, v)` with `u < v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    weights: Vec<f64>,
}

impl Graph {
    /// Unit-weight graph. Rejects self-loops, out-of-range endpoints and duplicate pairs.
    pub fn new(n: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        let weights = vec![1.0; edges.len()];
        Self::with_weights(n, edges, weights)
    }

    pub fn with_weights(n: usize, edges: Vec<(usize, usize)>, weights: Vec<f64>) -> Result<Self> {
        if edges.len() != weights.len() {
            return Err(Error::Validation(format!(
                "{} edges but {} weights",
                edges.len(),
                weights.len()
            )));
        }
        let mut seen = HashSet::with_capacity(edges.len());
        let mut canon = Vec::with_capacity(edges.len());
        for (&(u, v), &w) in edges.iter().zip(&weights) {
            if u >= n || v >= n {
                return Err(Error::Format(format!(
                    "edge ({u}, {v}) out of range for {n} nodes"
                )));
            }
            if u == v {
                return Err(Error::Validation(format!("self-loop on node {u}")));
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Validation(format!(
                    "edge ({u}, {v}) has non-positive weight {w}"
                )));
            }
            let e = (u.min(v), u.max(v));
            if !seen.insert(e) {
                return Err(Error::Validation(format!("duplicate edge ({u}, {v})")));
            }
            canon.push(e);
        }
        Ok(Graph {
            n,
            edges: canon,
            weights,
        })
    }

    /// Builds a unit-weight graph from a raw edge list that may list both
    /// directions of an edge or contain self-loops. Both are dropped silently.
    pub fn from_raw_edges(n: usize, raw: &[(usize, usize)]) -> Result<Self> {
        let weighted: Vec<_> = raw.iter().map(|&(u, v)| (u, v, 1.0)).collect();
        Self::from_raw_weighted_edges(n, &weighted)
    }

    /// Like [`Graph::from_raw_edges`] with a weight per entry; a repeated pair
    /// keeps the weight of its first occurrence.
    pub fn from_raw_weighted_edges(n: usize, raw: &[(usize, usize, f64)]) -> Result<Self> {
        let mut seen = HashSet::with_capacity(raw.len());
        let mut edges = Vec::with_capacity(raw.len());
        let mut weights = Vec::with_capacity(raw.len());
        for &(u, v, w) in raw {
            if u >= n || v >= n {
                return Err(Error::Format(format!(
                    "edge ({u}, {v}) out of range for {n} nodes"
                )));
            }
            if u == v {
                continue;
            }
            let e = (u.min(v), u.max(v));
            if seen.insert(e) {
                edges.push(e);
                weights.push(w);
            }
        }
        Self::with_weights(n, edges, weights)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Weighted degree of every node.
    pub fn degrees(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for (&(u, v), &w) in self.edges.iter().zip(&self.weights) {
            d[u] += w;
            d[v] += w;
        }
        d
    }

    /// Connected-component label per node, labels numbered from 0 in order of first node.
    pub fn components(&self) -> Vec<usize> {
        let mut parent: Vec<usize> = (0..self.n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for &(u, v) in &self.edges {
            let (ru, rv) = (find(&mut parent, u), find(&mut parent, v));
            if ru != rv {
                parent[ru.max(rv)] = ru.min(rv);
            }
        }
        let mut label = vec![usize::MAX; self.n];
        let mut out = vec![0; self.n];
        let mut next = 0;
        for i in 0..self.n {
            let r = find(&mut parent, i);
            if label[r] == usize::MAX {
                label[r] = next;
                next += 1;
            }
            out[i] = label[r];
        }
        out
    }

    /// Copy of the graph with every weight set to one.
    pub fn binarized(&self) -> Graph {
        Graph {
            n: self.n,
            edges: self.edges.clone(),
            weights: vec![1.0; self.edges.len()],
        }
    }
}

/// Normalization applied when turning a graph into a matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdjacencyMode {
    /// `I_n`; the graph is ignored.
    Identity,
    /// Plain (weighted) 0-1 adjacency.
    Raw01,
    /// Adjacency plus identity.
    SelfLoops,
    /// `D - A`.
    Laplacian,
    /// `(D+I)^{-1/2} (A+I) (D+I)^{-1/2}`.
    Kipf,
    /// Any matrix supplied directly rather than realized from a graph.
    Custom,
}

impl AdjacencyMode {
    pub fn name(self) -> &'static str {
        match self {
            AdjacencyMode::Identity => "identity",
            AdjacencyMode::Raw01 => "raw01",
            AdjacencyMode::SelfLoops => "self-loops",
            AdjacencyMode::Laplacian => "laplacian",
            AdjacencyMode::Kipf => "kipf",
            AdjacencyMode::Custom => "custom",
        }
    }
}

impl std::str::FromStr for AdjacencyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" | "none" => Ok(AdjacencyMode::Identity),
            "raw01" | "0-1" | "01" | "raw" => Ok(AdjacencyMode::Raw01),
            "self-loops" | "selfloops" | "self_loops" => Ok(AdjacencyMode::SelfLoops),
            "laplacian" => Ok(AdjacencyMode::Laplacian),
            "kipf" | "gcn" => Ok(AdjacencyMode::Kipf),
            other => Err(Error::Validation(format!("unknown adjacency mode '{other}'"))),
        }
    }
}

/// Symmetric n×n matrix realized from a graph, kept in sparse form.
#[derive(Debug, Clone)]
pub struct AdjacencyOperator {
    mode: AdjacencyMode,
    matrix: CsrMatrix<f64>,
}

impl AdjacencyOperator {
    pub fn identity(n: usize) -> Self {
        AdjacencyOperator {
            mode: AdjacencyMode::Identity,
            matrix: CsrMatrix::identity(n),
        }
    }

    /// Wraps an arbitrary square matrix (not necessarily symmetric or sparse).
    /// Zero entries are dropped.
    pub fn from_dense(m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Validation(format!(
                "adjacency must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let mut coo = CooMatrix::new(m.nrows(), m.ncols());
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                if m[(i, j)] != 0.0 {
                    coo.push(i, j, m[(i, j)]);
                }
            }
        }
        Ok(AdjacencyOperator {
            mode: AdjacencyMode::Custom,
            matrix: CsrMatrix::from(&coo),
        })
    }

    /// Block-diagonal operator with `blocks` along the diagonal, in order.
    pub fn block_diagonal(blocks: &[&AdjacencyOperator]) -> Self {
        let n: usize = blocks.iter().map(|b| b.n()).sum();
        let all_identity = blocks.iter().all(|b| b.mode == AdjacencyMode::Identity);
        if all_identity {
            return Self::identity(n);
        }
        let mut coo = CooMatrix::new(n, n);
        let mut off = 0;
        for b in blocks {
            for (i, j, &v) in b.matrix.triplet_iter() {
                coo.push(off + i, off + j, v);
            }
            off += b.n();
        }
        let first = blocks.first().map(|b| b.mode);
        let mode = match first {
            Some(m) if blocks.iter().all(|b| b.mode == m) => m,
            _ => AdjacencyMode::Custom,
        };
        AdjacencyOperator {
            mode,
            matrix: CsrMatrix::from(&coo),
        }
    }

    pub fn mode(&self) -> AdjacencyMode {
        self.mode
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn nnz(&self) -> usize {
        self.matrix.nnz()
    }

    pub fn csr(&self) -> &CsrMatrix<f64> {
        &self.matrix
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.n(), self.n());
        for (i, j, &v) in self.matrix.triplet_iter() {
            d[(i, j)] += v;
        }
        d
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let t = self.matrix.transpose();
        let d = self.to_dense();
        for (i, j, &v) in t.triplet_iter() {
            if (d[(i, j)] - v).abs() > tol {
                return false;
            }
        }
        true
    }

    /// `A · M`.
    pub fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        if self.mode == AdjacencyMode::Identity {
            return m.clone();
        }
        &self.matrix * m
    }

    /// `M · Aᵀ`.
    pub fn apply_transpose_right(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        if self.mode == AdjacencyMode::Identity {
            return m.clone();
        }
        (&self.matrix * &m.transpose()).transpose()
    }

    /// `M · A`.
    pub fn apply_right(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        if self.mode == AdjacencyMode::Identity {
            return m.clone();
        }
        (&self.matrix.transpose() * &m.transpose()).transpose()
    }

    /// `A · M · Aᵀ`.
    pub fn conjugate(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        if self.mode == AdjacencyMode::Identity {
            return m.clone();
        }
        let am = &self.matrix * m;
        (&self.matrix * &am.transpose()).transpose()
    }
}

/// Realizes the matrix of `graph` under `mode`.
/// `Custom` has no graph realization and is treated as `Raw01`.
pub fn build_adjacency(graph: &Graph, mode: AdjacencyMode) -> AdjacencyOperator {
    let n = graph.n();
    let mode = match mode {
        AdjacencyMode::Identity => return AdjacencyOperator::identity(n),
        AdjacencyMode::Custom => AdjacencyMode::Raw01,
        m => m,
    };
    let deg = graph.degrees();
    let mut coo = CooMatrix::new(n, n);
    match mode {
        AdjacencyMode::Identity | AdjacencyMode::Custom => unreachable!(),
        AdjacencyMode::Raw01 | AdjacencyMode::SelfLoops => {
            for (&(u, v), &w) in graph.edges().iter().zip(graph.weights()) {
                coo.push(u, v, w);
                coo.push(v, u, w);
            }
            if mode == AdjacencyMode::SelfLoops {
                for i in 0..n {
                    coo.push(i, i, 1.0);
                }
            }
        }
        AdjacencyMode::Laplacian => {
            for (&(u, v), &w) in graph.edges().iter().zip(graph.weights()) {
                coo.push(u, v, -w);
                coo.push(v, u, -w);
            }
            for (i, &d) in deg.iter().enumerate() {
                if d != 0.0 {
                    coo.push(i, i, d);
                }
            }
        }
        AdjacencyMode::Kipf => {
            let s: Vec<f64> = deg.iter().map(|d| 1.0 / (d + 1.0).sqrt()).collect();
            for (&(u, v), &w) in graph.edges().iter().zip(graph.weights()) {
                let x = s[u] * w * s[v];
                coo.push(u, v, x);
                coo.push(v, u, x);
            }
            for i in 0..n {
                coo.push(i, i, s[i] * s[i]);
            }
        }
    }
    AdjacencyOperator {
        mode,
        matrix: CsrMatrix::from(&coo),
    }
}
