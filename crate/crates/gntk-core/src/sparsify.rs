//! Effective-resistance sparsification.
//!
//! Resistances are exact (dense factorization per connected component) up to
//! a size limit and estimated with a Johnson–Lindenstrauss sketch of
//! Laplacian solves above it. Edges are then drawn without replacement with
//! probability weight `w_e R_e` using exponential keys, which makes the kept
//! set for a smaller budget a subset of the kept set for a larger one.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::CsrMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{build_adjacency, AdjacencyMode, Graph};
use crate::linalg::cholesky_with_jitter;

/// Effective resistance of every edge, in the graph's edge order.
#[derive(Debug, Clone, PartialEq)]
pub struct ResistanceTable {
    pub edges: Vec<(usize, usize)>,
    pub weights: Vec<f64>,
    pub resistance: Vec<f64>,
}

impl ResistanceTable {
    /// `Σ_e w_e R_e`, which equals `n − #components` for exact resistances.
    pub fn weighted_sum(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.resistance)
            .map(|(w, r)| w * r)
            .sum()
    }

    /// Writes `u<TAB>v<TAB>R_e` lines.
    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        use std::fmt::Write as _;
        let path = path.as_ref();
        let mut s = String::new();
        for (&(u, v), r) in self.edges.iter().zip(&self.resistance) {
            let _ = writeln!(s, "{u}\t{v}\t{r}");
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResistanceOptions {
    /// Components up to this many nodes are solved exactly.
    pub exact_limit: usize,
    /// Sketch accuracy; the sketch uses `⌈4 ln n / ε²⌉` solves.
    pub epsilon: f64,
    pub seed: u64,
    /// Relative residual at which conjugate gradients stop.
    pub cg_tolerance: f64,
}

impl Default for ResistanceOptions {
    fn default() -> Self {
        ResistanceOptions {
            exact_limit: 5000,
            epsilon: 0.3,
            seed: 0,
            cg_tolerance: 1e-10,
        }
    }
}

/// Exact effective resistances for small components, sketched ones above 5000 nodes.
pub fn effective_resistances(graph: &Graph) -> Result<ResistanceTable> {
    effective_resistances_with(graph, &ResistanceOptions::default())
}

pub fn effective_resistances_with(graph: &Graph, opts: &ResistanceOptions) -> Result<ResistanceTable> {
    if graph.n() == 0 {
        return Err(Error::Validation("graph has no nodes".into()));
    }
    let comp = graph.components();
    let ncomp = comp.iter().max().map_or(0, |&c| c + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); ncomp];
    for (i, &c) in comp.iter().enumerate() {
        members[c].push(i);
    }
    let mut local = vec![0usize; graph.n()];
    for m in &members {
        for (k, &i) in m.iter().enumerate() {
            local[i] = k;
        }
    }
    let mut comp_edges: Vec<Vec<usize>> = vec![Vec::new(); ncomp];
    for (e, &(u, _)) in graph.edges().iter().enumerate() {
        comp_edges[comp[u]].push(e);
    }

    let mut resistance = vec![0.0; graph.num_edges()];
    let mut sketch_edges = Vec::new();
    for (c, nodes) in members.iter().enumerate() {
        if comp_edges[c].is_empty() {
            continue;
        }
        if nodes.len() > opts.exact_limit {
            sketch_edges.extend_from_slice(&comp_edges[c]);
            continue;
        }
        let size = nodes.len();
        // L + J/n is invertible on a connected component and agrees with L⁺
        // on differences e_u − e_v.
        let mut l = DMatrix::from_element(size, size, 1.0 / size as f64);
        for &e in &comp_edges[c] {
            let (u, v) = graph.edges()[e];
            let w = graph.weights()[e];
            let (a, b) = (local[u], local[v]);
            l[(a, a)] += w;
            l[(b, b)] += w;
            l[(a, b)] -= w;
            l[(b, a)] -= w;
        }
        let (chol, _) = cholesky_with_jitter(&l, 0.0)?;
        let inv = chol.inverse();
        for &e in &comp_edges[c] {
            let (u, v) = graph.edges()[e];
            let (a, b) = (local[u], local[v]);
            resistance[e] = inv[(a, a)] + inv[(b, b)] - inv[(a, b)] - inv[(b, a)];
        }
    }
    if !sketch_edges.is_empty() {
        let est = sketch_resistances(graph, opts)?;
        for e in sketch_edges {
            resistance[e] = est[e];
        }
    }
    Ok(ResistanceTable {
        edges: graph.edges().to_vec(),
        weights: graph.weights().to_vec(),
        resistance,
    })
}

fn spmv(l: &CsrMatrix<f64>, x: &DVector<f64>, out: &mut DVector<f64>) {
    for (i, row) in l.row_iter().enumerate() {
        out[i] = row
            .col_indices()
            .iter()
            .zip(row.values())
            .map(|(&j, &v)| v * x[j])
            .sum();
    }
}

/// Jacobi-preconditioned conjugate gradients for `L z = b` with `b ⊥ ker L`.
fn cg_laplacian(
    l: &CsrMatrix<f64>,
    diag: &[f64],
    b: &DVector<f64>,
    tol: f64,
) -> DVector<f64> {
    let n = b.len();
    let mut x = DVector::zeros(n);
    let mut r = b.clone();
    let precond = |r: &DVector<f64>| {
        DVector::from_iterator(n, r.iter().zip(diag).map(|(v, &d)| if d > 0.0 { v / d } else { 0.0 }))
    };
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    let bnorm = b.norm().max(f64::MIN_POSITIVE);
    let mut ap = DVector::zeros(n);
    for _ in 0..(10 * n).max(100) {
        if r.norm() <= tol * bnorm {
            break;
        }
        spmv(l, &p, &mut ap);
        let pap = p.dot(&ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        z = precond(&r);
        let rz_new = r.dot(&z);
        p = &z + &p * (rz_new / rz);
        rz = rz_new;
    }
    x
}

/// Sketched resistances `‖Q W^{1/2} B L⁺ (e_u − e_v)‖²` with a random ±1/√k matrix `Q`.
fn sketch_resistances(graph: &Graph, opts: &ResistanceOptions) -> Result<Vec<f64>> {
    let n = graph.n();
    let k = ((4.0 * (n as f64).ln()) / (opts.epsilon * opts.epsilon)).ceil().max(1.0) as usize;
    let lap = build_adjacency(graph, AdjacencyMode::Laplacian);
    let l = lap.csr();
    let diag = graph.degrees();
    let edges = graph.edges();
    let sqrt_w: Vec<f64> = graph.weights().iter().map(|w| w.sqrt()).collect();
    let solves: Vec<DVector<f64>> = (0..k)
        .into_par_iter()
        .map(|row| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(row as u64 + 1);
            let mut y = DVector::zeros(n);
            for (e, &(u, v)) in edges.iter().enumerate() {
                let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 } * sqrt_w[e];
                y[u] += s;
                y[v] -= s;
            }
            cg_laplacian(l, &diag, &y, opts.cg_tolerance)
        })
        .collect();
    let scale = 1.0 / k as f64;
    Ok(edges
        .iter()
        .map(|&(u, v)| solves.iter().map(|z| (z[u] - z[v]).powi(2)).sum::<f64>() * scale)
        .collect())
}

/// Inclusion probabilities `min(1, τ q_e)` scaled so they sum to `k`.
fn inclusion_probabilities(q: &[f64], k: usize) -> Vec<f64> {
    let m = q.len();
    if k >= m {
        return vec![1.0; m];
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| q[b].total_cmp(&q[a]));
    // The `capped` largest weights get probability one; the rest share the remaining budget.
    let mut tail: f64 = q.iter().sum();
    let mut capped = 0;
    let tau = loop {
        let tau = (k - capped) as f64 / tail;
        if capped < k && tau * q[order[capped]] > 1.0 {
            tail -= q[order[capped]];
            capped += 1;
        } else {
            break tau;
        }
    };
    q.iter().map(|&x| (tau * x).min(1.0)).collect()
}

/// Keeps `⌈keep_fraction · m⌉` edges sampled without replacement with weight
/// `w_e R_e`. Kept edges are reweighted by `w_e / p_e` (inclusion probability
/// `p_e`), or set to one when `binarize` is true.
pub fn sparsify(graph: &Graph, keep_fraction: f64, seed: u64, binarize: bool) -> Result<Graph> {
    let table = effective_resistances(graph)?;
    sparsify_with(graph, &table, keep_fraction, seed, binarize)
}

/// As [`sparsify`], reusing precomputed resistances.
pub fn sparsify_with(
    graph: &Graph,
    table: &ResistanceTable,
    keep_fraction: f64,
    seed: u64,
    binarize: bool,
) -> Result<Graph> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Validation(format!(
            "keep fraction must lie in (0, 1], got {keep_fraction}"
        )));
    }
    let m = graph.num_edges();
    let k = (keep_fraction * m as f64).ceil() as usize;
    if k == 0 {
        return Err(Error::Validation("nothing to keep: the graph has no edges".into()));
    }
    let q: Vec<f64> = graph
        .weights()
        .iter()
        .zip(&table.resistance)
        .map(|(w, r)| (w * r).max(f64::MIN_POSITIVE))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Exponential keys: the k largest values of ln(u)/q_e form a weighted sample without replacement.
    let keys: Vec<f64> = q
        .iter()
        .map(|&qe| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            u.ln() / qe
        })
        .collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order[..k].to_vec();
    kept.sort_unstable();
    let p = inclusion_probabilities(&q, k);
    let edges: Vec<(usize, usize)> = kept.iter().map(|&e| graph.edges()[e]).collect();
    let weights: Vec<f64> = kept
        .iter()
        .map(|&e| {
            if binarize {
                1.0
            } else {
                graph.weights()[e] / p[e]
            }
        })
        .collect();
    Graph::with_weights(graph.n(), edges, weights)
}
