//! Hand-written reverse-mode derivatives, explicit Jacobians and the
//! empirical NTK.
//!
//! The backward pass carries one adjoint matrix per seed. Each parameter
//! block is reported to a sink as `(scale, adjoints, input)`, from which the
//! sink either materializes gradients or accumulates Jacobian Gram entries
//! without ever forming the Jacobian:
//!
//! ```text
//! weight:     ∂/∂W = s · R Gᵀ            Gram = s² ⟨R_o GᵀG, R_p⟩
//! bias:       ∂/∂b = s · R 1             Gram = s² (R_o 1)·(R_p 1)
//! attention:  ∂/∂c₁ = ∂/∂c₂ = s · G S    Gram = 2 s² ⟨GᵀG S_o, S_p⟩
//! ```

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::gat::Placement;
use crate::graph::AdjacencyOperator;
use crate::lab::net::{flatten_layers, forward_cached, FiniteNet, ForwardCache, Layer, NetFamily};
use crate::linalg::symmetrize;

/// Largest number of Jacobian entries materialized by [`jacobian`].
pub const JACOBIAN_ENTRY_LIMIT: usize = 50_000_000;
/// Largest number of adjoint entries held at once by [`empirical_ntk`].
pub const ADJOINT_ENTRY_LIMIT: usize = 200_000_000;

pub(crate) trait Sink {
    fn weight(&mut self, layer: usize, scale: f64, adj: &[DMatrix<f64>], input: &DMatrix<f64>);
    fn bias(&mut self, layer: usize, scale: f64, adj: &[DMatrix<f64>]);
    fn attention(&mut self, layer: usize, scale: f64, score_adj: &[DMatrix<f64>], input: &DMatrix<f64>);
}

fn hcat(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks[0].nrows();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut off = 0;
    for b in blocks {
        out.columns_mut(off, b.ncols()).copy_from(b);
        off += b.ncols();
    }
    out
}

fn split_cols(m: &DMatrix<f64>, width: usize) -> Vec<DMatrix<f64>> {
    (0..m.ncols() / width)
        .map(|k| m.columns(k * width, width).into_owned())
        .collect()
}

/// `Wᵀ R_o` for every seed with one matrix product.
fn left_transpose_all(w: &DMatrix<f64>, adj: &[DMatrix<f64>], scale: f64) -> Vec<DMatrix<f64>> {
    let n = adj[0].ncols();
    split_cols(&(w.tr_mul(&hcat(adj)) * scale), n)
}

fn score_adjoint(
    placement: Placement,
    sigma1: crate::activation::Activation,
    att: &crate::lab::net::AttentionCache,
    dprob: &DMatrix<f64>,
    head: usize,
) -> Vec<f64> {
    let n = dprob.nrows();
    let masked = match placement {
        Placement::Inside => {
            let e = &att.logits[head];
            DMatrix::from_fn(n, n, |s, i| dprob[(s, i)] * sigma1.deriv(e[(s, i)]) * att.adj[(s, i)])
        }
        Placement::HadamardFirst => dprob.component_mul(&att.adj),
    };
    (0..n)
        .map(|k| {
            let total = masked.row(k).sum() + masked.column(k).sum();
            match placement {
                Placement::Inside => total,
                Placement::HadamardFirst => total * sigma1.deriv(att.scores[(k, head)]),
            }
        })
        .collect()
}

pub(crate) fn backward(
    net: &FiniteNet,
    a: &AdjacencyOperator,
    cache: &ForwardCache,
    seeds: Vec<DMatrix<f64>>,
    sink: &mut dyn Sink,
) {
    let spec = &net.spec;
    let act = spec.activation;
    let depth = net.depth();
    let mut adj_f = seeds;
    for l in (1..=depth).rev() {
        let idx = l - 1;
        let p = &net.layers[idx];
        let input = &cache.inputs[idx];
        let fan_in = input.nrows();
        let sw = spec.weight_scale(l, fan_in);
        let adj_g = if let (Some(att), NetFamily::Gat { heads, sigma1, placement }) =
            (&cache.attention[idx], spec.family)
        {
            let out = net.widths[l];
            let n = input.ncols();
            let stacked: Vec<DMatrix<f64>> = adj_f
                .iter()
                .map(|r| {
                    let mut m = DMatrix::zeros(heads * out, n);
                    for h in 0..heads {
                        m.rows_mut(h * out, out).copy_from(&(r * att.probs[h].transpose()));
                    }
                    m
                })
                .collect();
            sink.weight(idx, sw, &stacked, input);
            if p.bias.is_some() {
                sink.bias(idx, spec.bias_scale(l), &stacked);
            }
            let score_adj: Vec<DMatrix<f64>> = adj_f
                .iter()
                .map(|r| {
                    let mut s = DMatrix::zeros(n, heads);
                    for h in 0..heads {
                        let dprob = att.values.rows(h * out, out).tr_mul(r);
                        let col = score_adjoint(placement, sigma1, att, &dprob, h);
                        s.column_mut(h).copy_from_slice(&col);
                    }
                    s
                })
                .collect();
            let sc = spec.score_scale(fan_in);
            sink.attention(idx, sc, &score_adj, input);
            let c = p.attention.as_ref().expect("attention parameters");
            let csum = c.rows(0, fan_in) + c.rows(fan_in, fan_in);
            let mut adj_g = left_transpose_all(&p.weight, &stacked, sw);
            for (g, s) in adj_g.iter_mut().zip(&score_adj) {
                *g += &csum * s.transpose() * sc;
            }
            adj_g
        } else {
            let adj_z: Vec<DMatrix<f64>> = match spec.family {
                NetFamily::Gnn | NetFamily::SkipGnn => adj_f.iter().map(|r| a.apply_right(r)).collect(),
                NetFamily::Fcn | NetFamily::Gat { .. } => adj_f,
            };
            sink.weight(idx, sw, &adj_z, input);
            if p.bias.is_some() {
                sink.bias(idx, spec.bias_scale(l), &adj_z);
            }
            if l == 1 {
                break;
            }
            left_transpose_all(&p.weight, &adj_z, sw)
        };
        if l == 1 {
            break;
        }
        let prev = &cache.outputs[idx - 1];
        let dact = prev.map(|v| act.deriv(v));
        adj_f = adj_g
            .into_iter()
            .map(|g| {
                if spec.family == NetFamily::SkipGnn {
                    let d = prev.nrows();
                    g.rows(0, d).component_mul(&dact) + g.rows(d, d)
                } else {
                    g.component_mul(&dact)
                }
            })
            .collect();
    }
}

/// Materializes one gradient per seed in the parameter layout.
struct GradSink {
    grads: Vec<Vec<Layer>>,
}

impl Sink for GradSink {
    fn weight(&mut self, layer: usize, scale: f64, adj: &[DMatrix<f64>], input: &DMatrix<f64>) {
        for (g, r) in self.grads.iter_mut().zip(adj) {
            g[layer].weight += r * input.transpose() * scale;
        }
    }

    fn bias(&mut self, layer: usize, scale: f64, adj: &[DMatrix<f64>]) {
        for (g, r) in self.grads.iter_mut().zip(adj) {
            let b = g[layer].bias.as_mut().expect("bias present");
            *b += r.column_sum() * scale;
        }
    }

    fn attention(&mut self, layer: usize, scale: f64, score_adj: &[DMatrix<f64>], input: &DMatrix<f64>) {
        let d = input.nrows();
        for (g, s) in self.grads.iter_mut().zip(score_adj) {
            let v = input * s * scale;
            let c = g[layer].attention.as_mut().expect("attention present");
            let mut top = c.rows_mut(0, d);
            top += &v;
            let mut bottom = c.rows_mut(d, d);
            bottom += &v;
        }
    }
}

/// Accumulates the Jacobian Gram matrix over seeds.
struct GramSink {
    gram: DMatrix<f64>,
}

fn flat_columns(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let len = blocks[0].len();
    let mut out = DMatrix::zeros(len, blocks.len());
    for (k, b) in blocks.iter().enumerate() {
        out.column_mut(k).copy_from_slice(b.as_slice());
    }
    out
}

impl GramSink {
    fn add_inner(&mut self, left: &[DMatrix<f64>], right: &[DMatrix<f64>], factor: f64) {
        let l = flat_columns(left);
        let r = flat_columns(right);
        self.gram += l.tr_mul(&r) * factor;
    }
}

impl Sink for GramSink {
    fn weight(&mut self, _layer: usize, scale: f64, adj: &[DMatrix<f64>], input: &DMatrix<f64>) {
        let q = input.tr_mul(input);
        let left: Vec<DMatrix<f64>> = adj.iter().map(|r| r * &q).collect();
        self.add_inner(&left, adj, scale * scale);
    }

    fn bias(&mut self, _layer: usize, scale: f64, adj: &[DMatrix<f64>]) {
        let sums: Vec<DMatrix<f64>> = adj.iter().map(|r| { let s = r.column_sum(); DMatrix::from_column_slice(s.len(), 1, s.as_slice()) }).collect();
        self.add_inner(&sums, &sums, scale * scale);
    }

    fn attention(&mut self, _layer: usize, scale: f64, score_adj: &[DMatrix<f64>], input: &DMatrix<f64>) {
        let q = input.tr_mul(input);
        let left: Vec<DMatrix<f64>> = score_adj.iter().map(|s| &q * s).collect();
        self.add_inner(&left, score_adj, 2.0 * scale * scale);
    }
}

/// Output index `c + d_L·k` for the `k`-th listed node and channel `c`.
fn unit_seeds(d_out: usize, n: usize, nodes: &[usize]) -> Vec<DMatrix<f64>> {
    let mut seeds = Vec::with_capacity(d_out * nodes.len());
    for &i in nodes {
        for c in 0..d_out {
            let mut e = DMatrix::zeros(d_out, n);
            e[(c, i)] = 1.0;
            seeds.push(e);
        }
    }
    seeds
}

fn check_nodes(nodes: &[usize], n: usize) -> Result<()> {
    match nodes.iter().find(|&&i| i >= n) {
        Some(i) => Err(Error::Validation(format!("node {i} out of range for {n} nodes"))),
        None => Ok(()),
    }
}

/// Gradient of `⟨seed, F^L⟩` with respect to every parameter, in the parameter layout.
pub(crate) fn gradient_layers(
    net: &FiniteNet,
    a: &AdjacencyOperator,
    cache: &ForwardCache,
    seed: DMatrix<f64>,
) -> Vec<Layer> {
    let mut sink = GradSink {
        grads: vec![net.layers.iter().map(Layer::zeros_like).collect()],
    };
    backward(net, a, cache, vec![seed], &mut sink);
    sink.grads.pop().expect("one seed")
}

/// Jacobian of `vec(F^L)` restricted to `nodes` (rows ordered channel-fastest)
/// with respect to the flattened parameters.
pub fn jacobian(
    net: &FiniteNet,
    a: &AdjacencyOperator,
    x: &DMatrix<f64>,
    nodes: &[usize],
) -> Result<DMatrix<f64>> {
    check_nodes(nodes, x.ncols())?;
    let rows = nodes.len() * net.output_dim();
    let cols = net.num_parameters();
    if rows.saturating_mul(cols) > JACOBIAN_ENTRY_LIMIT {
        return Err(Error::Capacity(format!(
            "a {rows}x{cols} Jacobian exceeds {JACOBIAN_ENTRY_LIMIT} entries"
        )));
    }
    let cache = forward_cached(net, a, x)?;
    let seeds = unit_seeds(net.output_dim(), x.ncols(), nodes);
    let mut sink = GradSink {
        grads: vec![net.layers.iter().map(Layer::zeros_like).collect(); seeds.len()],
    };
    backward(net, a, &cache, seeds, &mut sink);
    let mut jac = DMatrix::zeros(rows, cols);
    for (r, g) in sink.grads.iter().enumerate() {
        jac.row_mut(r).tr_copy_from(&flatten_layers(g));
    }
    Ok(jac)
}

fn max_stacked_rows(net: &FiniteNet) -> usize {
    (1..=net.depth())
        .map(|l| {
            let w = net.widths[l].max(net.fan_in(l));
            if net.spec.is_attention() && l > 1 {
                w.max(net.spec.heads() * net.widths[l])
            } else {
                w
            }
        })
        .max()
        .unwrap_or(0)
}

/// Jacobian Gram `J Jᵀ` over the outputs at `nodes` (index `c + d_L·k`).
pub fn empirical_ntk_on(
    net: &FiniteNet,
    a: &AdjacencyOperator,
    x: &DMatrix<f64>,
    nodes: &[usize],
) -> Result<DMatrix<f64>> {
    check_nodes(nodes, x.ncols())?;
    let count = nodes.len() * net.output_dim();
    let held = count
        .saturating_mul(max_stacked_rows(net))
        .saturating_mul(x.ncols());
    if held > ADJOINT_ENTRY_LIMIT {
        return Err(Error::Capacity(format!(
            "{count} outputs over {} nodes need {held} adjoint entries",
            x.ncols()
        )));
    }
    let cache = forward_cached(net, a, x)?;
    let seeds = unit_seeds(net.output_dim(), x.ncols(), nodes);
    let mut sink = GramSink {
        gram: DMatrix::zeros(count, count),
    };
    backward(net, a, &cache, seeds, &mut sink);
    symmetrize(&mut sink.gram);
    Ok(sink.gram)
}

/// Jacobian Gram over all `n · d_L` outputs.
pub fn empirical_ntk(net: &FiniteNet, a: &AdjacencyOperator, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let nodes: Vec<usize> = (0..x.ncols()).collect();
    empirical_ntk_on(net, a, x, &nodes)
}
