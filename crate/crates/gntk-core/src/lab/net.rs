//! Finite-width networks in NTK parametrization.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::activation::Activation;
use crate::dataset::HyperParams;
use crate::error::{Error, Result};
use crate::gat::{GatSpec, Placement};
use crate::graph::AdjacencyOperator;
use crate::kernel::{Architecture, ModelSpec};

/// Largest `heads · n²` allowed for the dense attention matrices of a finite attention layer.
pub const ATTENTION_CELL_LIMIT: usize = 50_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NetFamily {
    Fcn,
    Gnn,
    SkipGnn,
    /// Linear first layer followed by attention layers.
    Gat {
        heads: usize,
        sigma1: Activation,
        placement: Placement,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetSpec {
    pub family: NetFamily,
    /// Layer nonlinearity (σ₂ for attention networks).
    pub activation: Activation,
    pub hp: HyperParams,
    /// Bias parameters. Always on for fcn/gnn/skip (their size is set by `σ_b²`).
    pub bias: bool,
}

impl NetSpec {
    pub fn from_model(spec: &ModelSpec) -> Self {
        let family = match spec.architecture {
            Architecture::Fcn => NetFamily::Fcn,
            Architecture::Gnn => NetFamily::Gnn,
            Architecture::SkipGnn => NetFamily::SkipGnn,
        };
        NetSpec {
            family,
            activation: spec.activation,
            hp: spec.hp,
            bias: true,
        }
    }

    pub fn from_gat(spec: &GatSpec, heads: usize) -> Self {
        NetSpec {
            family: NetFamily::Gat {
                heads,
                sigma1: spec.sigma1,
                placement: spec.placement,
            },
            activation: spec.sigma2,
            hp: spec.hp,
            bias: spec.bias,
        }
    }

    pub fn heads(&self) -> usize {
        match self.family {
            NetFamily::Gat { heads, .. } => heads,
            _ => 1,
        }
    }

    pub fn is_attention(&self) -> bool {
        matches!(self.family, NetFamily::Gat { .. })
    }

    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        self.activation.validate()?;
        if let NetFamily::Gat { heads, sigma1, placement } = self.family {
            if heads == 0 {
                return Err(Error::Validation("attention networks need at least one head".into()));
            }
            sigma1.validate()?;
            if placement == Placement::HadamardFirst && sigma1.eval(0.0) != 0.0 {
                return Err(Error::Validation(
                    "hadamard-first placement needs sigma1(0) = 0".into(),
                ));
            }
        }
        Ok(())
    }

    /// `σ_b`, or zero when biases are disabled.
    pub(crate) fn sigma_b(&self) -> f64 {
        if self.bias {
            self.hp.sigma_b2.sqrt()
        } else {
            0.0
        }
    }

    /// Prefactor of the weight product in layer `layer` (1-based) with fan-in `fan_in`.
    pub(crate) fn weight_scale(&self, layer: usize, fan_in: usize) -> f64 {
        let sw = self.hp.sigma_w2.sqrt();
        if layer == 1 && !self.hp.normalize_input_by_d0 {
            sw
        } else if self.is_attention() && layer > 1 {
            sw / ((self.heads() * fan_in) as f64).sqrt()
        } else {
            sw / (fan_in as f64).sqrt()
        }
    }

    pub(crate) fn bias_scale(&self, layer: usize) -> f64 {
        if self.is_attention() && layer > 1 {
            self.sigma_b() / (self.heads() as f64).sqrt()
        } else {
            self.sigma_b()
        }
    }

    /// Prefactor of the attention score for fan-in `fan_in`.
    pub(crate) fn score_scale(&self, fan_in: usize) -> f64 {
        self.hp.sigma_c2.sqrt() / ((2 * fan_in) as f64).sqrt()
    }
}

/// Parameters of one layer. Attention layers stack the per-head weights
/// vertically (`heads · d_out × d_in`) and keep one attention vector `[c₁; c₂]`
/// per head as a column of `attention`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DMatrix<f64>,
    pub bias: Option<DVector<f64>>,
    pub attention: Option<DMatrix<f64>>,
}

impl Layer {
    pub(crate) fn zeros_like(&self) -> Layer {
        Layer {
            weight: DMatrix::zeros(self.weight.nrows(), self.weight.ncols()),
            bias: self.bias.as_ref().map(|b| DVector::zeros(b.len())),
            attention: self
                .attention
                .as_ref()
                .map(|c| DMatrix::zeros(c.nrows(), c.ncols())),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.weight.len()
            + self.bias.as_ref().map_or(0, |b| b.len())
            + self.attention.as_ref().map_or(0, |c| c.len())
    }
}

/// Concatenates all parameters layer by layer: weight (column-major), bias, attention.
pub fn flatten_layers(layers: &[Layer]) -> DVector<f64> {
    let total = layers.iter().map(Layer::num_parameters).sum();
    let mut out = Vec::with_capacity(total);
    for l in layers {
        out.extend_from_slice(l.weight.as_slice());
        if let Some(b) = &l.bias {
            out.extend_from_slice(b.as_slice());
        }
        if let Some(c) = &l.attention {
            out.extend_from_slice(c.as_slice());
        }
    }
    DVector::from_vec(out)
}

fn unflatten_into(layers: &mut [Layer], flat: &[f64]) {
    let mut pos = 0;
    let mut take = |dst: &mut [f64]| {
        dst.copy_from_slice(&flat[pos..pos + dst.len()]);
        pos += dst.len();
    };
    for l in layers {
        take(l.weight.as_mut_slice());
        if let Some(b) = &mut l.bias {
            take(b.as_mut_slice());
        }
        if let Some(c) = &mut l.attention {
            take(c.as_mut_slice());
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteNet {
    pub spec: NetSpec,
    /// `d₀, d₁, …, d_L`.
    pub widths: Vec<usize>,
    pub layers: Vec<Layer>,
}

impl FiniteNet {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(Layer::num_parameters).sum()
    }

    pub fn parameters(&self) -> DVector<f64> {
        flatten_layers(&self.layers)
    }

    pub fn set_parameters(&mut self, flat: &DVector<f64>) -> Result<()> {
        if flat.len() != self.num_parameters() {
            return Err(Error::Validation(format!(
                "expected {} parameters, got {}",
                self.num_parameters(),
                flat.len()
            )));
        }
        unflatten_into(&mut self.layers, flat.as_slice());
        Ok(())
    }

    /// Frobenius norm of every weight matrix (attention vectors and biases excluded).
    pub(crate) fn weight_norms(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.weight.norm()).collect()
    }

    /// Row count of the input fed to layer `layer` (1-based).
    pub(crate) fn fan_in(&self, layer: usize) -> usize {
        let prev = self.widths[layer - 1];
        if layer > 1 && self.spec.family == NetFamily::SkipGnn {
            2 * prev
        } else {
            prev
        }
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

/// Draws every parameter i.i.d. from N(0, 1).
pub fn init_network(spec: &NetSpec, widths: &[usize], seed: u64) -> Result<FiniteNet> {
    spec.validate()?;
    if widths.len() < 2 {
        return Err(Error::Validation("need at least an input and an output width".into()));
    }
    if widths.iter().any(|&w| w == 0) {
        return Err(Error::Validation("widths must be positive".into()));
    }
    let depth = widths.len() - 1;
    if spec.family == NetFamily::SkipGnn && depth < 2 {
        return Err(Error::Validation(
            "skip-concatenate networks need at least two layers".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heads = spec.heads();
    let mut net = FiniteNet {
        spec: *spec,
        widths: widths.to_vec(),
        layers: Vec::with_capacity(depth),
    };
    for l in 1..=depth {
        let fan_in = net.fan_in(l);
        let out = widths[l];
        let attention_layer = spec.is_attention() && l > 1;
        let stacked = if attention_layer { heads * out } else { out };
        let weight = gaussian_matrix(&mut rng, stacked, fan_in);
        let bias = spec
            .bias
            .then(|| DVector::from_fn(stacked, |_, _| StandardNormal.sample(&mut rng)));
        let attention = attention_layer.then(|| gaussian_matrix(&mut rng, 2 * fan_in, heads));
        net.layers.push(Layer { weight, bias, attention });
    }
    Ok(net)
}

/// Attention-layer intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct AttentionCache {
    pub adj: DMatrix<f64>,
    /// Node scores, one column per head.
    pub scores: DMatrix<f64>,
    /// Masked pair scores `A_si (a_s + a_i)` per head (inside placement only).
    pub logits: Vec<DMatrix<f64>>,
    /// Attention matrices per head.
    pub probs: Vec<DMatrix<f64>>,
    /// Stacked per-head values `σ_w/√(Hd) W^h G + σ_b/√H b^h 1ᵀ`.
    pub values: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    /// Input fed to each layer; `inputs[0]` is the feature matrix.
    pub inputs: Vec<DMatrix<f64>>,
    /// Output of each layer.
    pub outputs: Vec<DMatrix<f64>>,
    pub attention: Vec<Option<AttentionCache>>,
}

impl ForwardCache {
    pub fn output(&self) -> &DMatrix<f64> {
        self.outputs.last().expect("non-empty network")
    }
}

fn check_shapes(net: &FiniteNet, a: &AdjacencyOperator, x: &DMatrix<f64>) -> Result<()> {
    if x.nrows() != net.widths[0] {
        return Err(Error::Validation(format!(
            "network expects {} input features, got {}",
            net.widths[0],
            x.nrows()
        )));
    }
    if net.spec.family != NetFamily::Fcn && a.n() != x.ncols() {
        return Err(Error::Validation(format!(
            "adjacency has {} nodes but features have {} columns",
            a.n(),
            x.ncols()
        )));
    }
    if net.spec.is_attention() {
        let cells = net.spec.heads().saturating_mul(x.ncols() * x.ncols());
        if cells > ATTENTION_CELL_LIMIT {
            return Err(Error::Capacity(format!(
                "{} heads over {} nodes exceed the dense attention limit",
                net.spec.heads(),
                x.ncols()
            )));
        }
    }
    Ok(())
}

fn add_bias(z: &mut DMatrix<f64>, bias: &DVector<f64>, scale: f64) {
    for mut col in z.column_iter_mut() {
        col.axpy(scale, bias, 1.0);
    }
}

/// Input of the next layer built from a layer output.
pub(crate) fn next_input(spec: &NetSpec, f: &DMatrix<f64>) -> DMatrix<f64> {
    let act = spec.activation;
    let g = f.map(|v| act.eval(v));
    if spec.family == NetFamily::SkipGnn {
        let (d, n) = f.shape();
        let mut stacked = DMatrix::zeros(2 * d, n);
        stacked.rows_mut(0, d).copy_from(&g);
        stacked.rows_mut(d, d).copy_from(f);
        stacked
    } else {
        g
    }
}

fn attention_forward(
    net: &FiniteNet,
    layer: usize,
    adj: &DMatrix<f64>,
    g: &DMatrix<f64>,
) -> (DMatrix<f64>, AttentionCache) {
    let spec = &net.spec;
    let NetFamily::Gat { heads, sigma1, placement } = spec.family else {
        unreachable!("attention layer in a non-attention network")
    };
    let p = &net.layers[layer - 1];
    let fan_in = g.nrows();
    let n = g.ncols();
    let out = net.widths[layer];
    let c = p.attention.as_ref().expect("attention parameters");
    let csum = c.rows(0, fan_in) + c.rows(fan_in, fan_in);
    let scores = g.tr_mul(&csum) * spec.score_scale(fan_in);
    let mut values = &p.weight * g * spec.weight_scale(layer, fan_in);
    if let Some(b) = &p.bias {
        add_bias(&mut values, b, spec.bias_scale(layer));
    }
    let mut logits = Vec::new();
    let mut probs = Vec::with_capacity(heads);
    let mut f = DMatrix::zeros(out, n);
    for h in 0..heads {
        let s = scores.column(h);
        let prob = match placement {
            Placement::Inside => {
                let e = DMatrix::from_fn(n, n, |a_, b_| adj[(a_, b_)] * (s[a_] + s[b_]));
                let pr = e.map(|v| sigma1.eval(v));
                logits.push(e);
                pr
            }
            Placement::HadamardFirst => {
                let act: Vec<f64> = s.iter().map(|&v| sigma1.eval(v)).collect();
                DMatrix::from_fn(n, n, |a_, b_| adj[(a_, b_)] * (act[a_] + act[b_]))
            }
        };
        f += values.rows(h * out, out) * &prob;
        probs.push(prob);
    }
    let cache = AttentionCache {
        adj: adj.clone(),
        scores,
        logits,
        probs,
        values,
    };
    (f, cache)
}

pub(crate) fn forward_cached(
    net: &FiniteNet,
    a: &AdjacencyOperator,
    x: &DMatrix<f64>,
) -> Result<ForwardCache> {
    check_shapes(net, a, x)?;
    let spec = &net.spec;
    let depth = net.depth();
    let dense_adj = spec.is_attention().then(|| a.to_dense());
    let mut cache = ForwardCache {
        inputs: Vec::with_capacity(depth),
        outputs: Vec::with_capacity(depth),
        attention: Vec::with_capacity(depth),
    };
    let mut input = x.clone();
    for l in 1..=depth {
        let p = &net.layers[l - 1];
        let (f, att) = if spec.is_attention() && l > 1 {
            let (f, att) = attention_forward(net, l, dense_adj.as_ref().expect("dense"), &input);
            (f, Some(att))
        } else {
            let mut z = &p.weight * &input * spec.weight_scale(l, input.nrows());
            if let Some(b) = &p.bias {
                add_bias(&mut z, b, spec.bias_scale(l));
            }
            let f = match spec.family {
                NetFamily::Fcn | NetFamily::Gat { .. } => z,
                NetFamily::Gnn | NetFamily::SkipGnn => a.apply_transpose_right(&z),
            };
            (f, None)
        };
        let next = (l < depth).then(|| next_input(spec, &f));
        cache.inputs.push(input);
        cache.outputs.push(f);
        cache.attention.push(att);
        if let Some(nx) = next {
            input = nx;
        } else {
            break;
        }
    }
    Ok(cache)
}

/// Network output `F^L` (`d_L × n`). Fully-connected networks ignore `a`.
pub fn forward(net: &FiniteNet, a: &AdjacencyOperator, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut cache = forward_cached(net, a, x)?;
    Ok(cache.outputs.pop().expect("non-empty network"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_adjacency, AdjacencyMode, Graph};

    fn dense_spec(family: NetFamily, act: Activation) -> NetSpec {
        NetSpec {
            family,
            activation: act,
            hp: HyperParams {
                sigma_b2: 0.3,
                ..HyperParams::default()
            },
            bias: true,
        }
    }

    #[test]
    fn fcn_shapes() {
        let spec = dense_spec(NetFamily::Fcn, Activation::Relu);
        let net = init_network(&spec, &[3, 5, 2], 7).unwrap();
        assert_eq!(net.layers[0].weight.shape(), (5, 3));
        assert_eq!(net.layers[1].weight.shape(), (2, 5));
        assert_eq!(net.layers[0].bias.as_ref().unwrap().len(), 5);
        assert_eq!(net.layers[1].bias.as_ref().unwrap().len(), 2);
    }

    #[test]
    fn skip_shapes_and_depth_check() {
        let spec = dense_spec(NetFamily::SkipGnn, Activation::Relu);
        let net = init_network(&spec, &[3, 5, 5, 2], 1).unwrap();
        assert_eq!(net.layers[0].weight.shape(), (5, 3));
        assert_eq!(net.layers[1].weight.shape(), (5, 10));
        assert_eq!(net.layers[2].weight.shape(), (2, 10));
        assert!(matches!(init_network(&spec, &[3, 2], 1), Err(Error::Validation(_))));
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = dense_spec(NetFamily::Gnn, Activation::Erf);
        let a = init_network(&spec, &[4, 6, 3], 11).unwrap();
        let b = init_network(&spec, &[4, 6, 3], 11).unwrap();
        let c = init_network(&spec, &[4, 6, 3], 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn linear_single_layer_is_scaled_product() {
        let mut spec = dense_spec(NetFamily::Fcn, Activation::Identity);
        spec.hp.sigma_b2 = 0.0;
        spec.hp.sigma_w2 = 2.0;
        let net = init_network(&spec, &[3, 4], 5).unwrap();
        let x = DMatrix::from_fn(3, 6, |i, j| (i as f64 - j as f64) * 0.3);
        let f = forward(&net, &AdjacencyOperator::identity(6), &x).unwrap();
        let expect = &net.layers[0].weight * &x * (2.0f64.sqrt() / 3.0f64.sqrt());
        assert!((f - expect).abs().max() < 1e-14);
    }

    #[test]
    fn gnn_with_identity_matches_fcn_bitwise() {
        let x = DMatrix::from_fn(3, 5, |i, j| ((i * 5 + j) as f64).sin());
        for act in [Activation::Relu, Activation::Erf] {
            let fcn = init_network(&dense_spec(NetFamily::Fcn, act), &[3, 8, 8, 2], 3).unwrap();
            let mut gnn = fcn.clone();
            gnn.spec.family = NetFamily::Gnn;
            let i5 = AdjacencyOperator::identity(5);
            assert_eq!(forward(&fcn, &i5, &x).unwrap(), forward(&gnn, &i5, &x).unwrap());
        }
    }

    #[test]
    fn zero_attention_vectors_silence_identity_attention() {
        let spec = NetSpec {
            family: NetFamily::Gat {
                heads: 1,
                sigma1: Activation::Identity,
                placement: Placement::Inside,
            },
            activation: Activation::Relu,
            hp: HyperParams::default(),
            bias: false,
        };
        let mut net = init_network(&spec, &[2, 4, 3], 9).unwrap();
        net.layers[1].attention.as_mut().unwrap().fill(0.0);
        let g = Graph::new(4, vec![(0, 1), (1, 2), (2, 3)]).unwrap();
        let a = build_adjacency(&g, AdjacencyMode::SelfLoops);
        let x = DMatrix::from_fn(2, 4, |i, j| (i + j) as f64 - 1.0);
        let f = forward(&net, &a, &x).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gat_attention_shapes() {
        let spec = NetSpec {
            family: NetFamily::Gat {
                heads: 3,
                sigma1: Activation::Relu,
                placement: Placement::Inside,
            },
            activation: Activation::Relu,
            hp: HyperParams::default(),
            bias: true,
        };
        let net = init_network(&spec, &[2, 4, 5], 0).unwrap();
        assert_eq!(net.layers[0].weight.shape(), (4, 2));
        assert_eq!(net.layers[1].weight.shape(), (15, 4));
        assert_eq!(net.layers[1].bias.as_ref().unwrap().len(), 15);
        assert_eq!(net.layers[1].attention.as_ref().unwrap().shape(), (8, 3));
    }

    #[test]
    fn parameter_round_trip() {
        let spec = dense_spec(NetFamily::SkipGnn, Activation::Relu);
        let mut net = init_network(&spec, &[2, 3, 3, 1], 4).unwrap();
        let p = net.parameters();
        assert_eq!(p.len(), net.num_parameters());
        let shifted = p.map(|v| v + 1.0);
        net.set_parameters(&shifted).unwrap();
        assert_eq!(net.parameters(), shifted);
        assert!(net.set_parameters(&DVector::zeros(3)).is_err());
    }
}
