//! Depth recursions for the GP covariance and NTK of fully-connected,
//! graph-convolutional and skip-concatenate networks.
//!
//! All three architectures share one recursion. With `K^l` the covariance of
//! the layer-`l` pre-activations and `Λ^l` the second moment of the layer
//! input scaled by `σ_w²` (plus `σ_b²`):
//!
//! ```text
//! Λ⁰ = σ_w² XᵀX / d₀ + σ_b²
//! K^l = A Λ^{l-1} Aᵀ
//! Λ^l = σ_w² E[σ(u)σ(u)ᵀ] + σ_b²,          u ~ N(0, K^l)
//! Λ̇^l = σ_w² E[σ̇(u)σ̇(u)ᵀ]
//! Θ¹ = K¹,  Θ^{l+1} = A (Λ^l + Λ̇^l ⊙ Θ^l) Aᵀ
//! ```
//!
//! The fully-connected case uses `A = I`. The skip-concatenate variant feeds
//! `[σ(F); F]` into every layer after the first, which replaces the two
//! expectations by `(E[σσ] + K)/2` and `(E[σ̇σ̇] + 1)/2`.

use nalgebra::DMatrix;

use crate::activation::{dual_activation, dual_activation_derivative, Activation};
use crate::dataset::HyperParams;
use crate::error::{Error, Result};
use crate::graph::AdjacencyOperator;
use crate::linalg::symmetrize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    Fcn,
    Gnn,
    SkipGnn,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Fcn => "fcn",
            Architecture::Gnn => "gnn",
            Architecture::SkipGnn => "skip-gnn",
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fcn" | "mlp" => Ok(Architecture::Fcn),
            "gnn" | "gcn" => Ok(Architecture::Gnn),
            "skip-gnn" | "skip_gnn" | "skipgnn" | "sgnn" => Ok(Architecture::SkipGnn),
            other => Err(Error::Validation(format!("unknown architecture '{other}'"))),
        }
    }
}

/// Which kernel to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelKind {
    Gp,
    Ntk,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub architecture: Architecture,
    /// Number of weight layers, at least 1.
    pub depth: usize,
    pub hp: HyperParams,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn new(architecture: Architecture, depth: usize, activation: Activation) -> Self {
        ModelSpec {
            architecture,
            depth,
            hp: HyperParams::default(),
            activation,
        }
    }

    pub fn with_hp(mut self, hp: HyperParams) -> Self {
        self.hp = hp;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Validation("depth must be at least 1".into()));
        }
        self.hp.validate()?;
        self.activation.validate()
    }
}

/// GP covariance and NTK after `layer` layers.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelState {
    pub lambda: DMatrix<f64>,
    pub theta: DMatrix<f64>,
    pub layer: usize,
}

/// `σ_w² XᵀX / d₀ + σ_b²` (the division is skipped when
/// `normalize_input_by_d0` is false).
pub fn base_kernel(x: &DMatrix<f64>, hp: &HyperParams) -> Result<DMatrix<f64>> {
    cross_base_kernel(x, x, hp)
}

pub(crate) fn cross_base_kernel(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    hp: &HyperParams,
) -> Result<DMatrix<f64>> {
    let d0 = x.nrows();
    if d0 == 0 {
        return Err(Error::Validation("feature dimension is zero".into()));
    }
    if y.nrows() != d0 {
        return Err(Error::Validation(format!(
            "feature dimensions differ: {} vs {}",
            d0,
            y.nrows()
        )));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Validation("features contain non-finite values".into()));
    }
    let scale = if hp.normalize_input_by_d0 {
        hp.sigma_w2 / d0 as f64
    } else {
        hp.sigma_w2
    };
    let mut k = x.tr_mul(y);
    k.apply(|v| *v = *v * scale + hp.sigma_b2);
    Ok(k)
}

fn check_inputs(spec: &ModelSpec, a: &AdjacencyOperator, x: &DMatrix<f64>) -> Result<()> {
    spec.validate()?;
    if spec.architecture != Architecture::Fcn && a.n() != x.ncols() {
        return Err(Error::Validation(format!(
            "adjacency has {} nodes but features have {} columns",
            a.n(),
            x.ncols()
        )));
    }
    Ok(())
}

fn propagate(spec: &ModelSpec, a: &AdjacencyOperator, m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = match spec.architecture {
        Architecture::Fcn => m.clone(),
        Architecture::Gnn | Architecture::SkipGnn => a.conjugate(m),
    };
    symmetrize(&mut out);
    out
}

/// Layer input moments `(Λ, Λ̇)` from the pre-activation covariance `k`.
fn layer_moments(
    spec: &ModelSpec,
    k: &DMatrix<f64>,
    with_derivative: bool,
) -> Result<(DMatrix<f64>, Option<DMatrix<f64>>)> {
    let hp = &spec.hp;
    let skip = spec.architecture == Architecture::SkipGnn;
    let mut lam = dual_activation(spec.activation, k)?;
    if skip {
        lam = (lam + k) * 0.5;
    }
    lam.apply(|v| *v = *v * hp.sigma_w2 + hp.sigma_b2);
    let dot = if with_derivative {
        let mut d = dual_activation_derivative(spec.activation, k)?;
        if skip {
            d.apply(|v| *v = 0.5 * (*v + 1.0));
        }
        d *= hp.sigma_w2;
        Some(d)
    } else {
        None
    };
    Ok((lam, dot))
}

fn run(
    spec: &ModelSpec,
    a: &AdjacencyOperator,
    lambda0: DMatrix<f64>,
    with_ntk: bool,
) -> Result<KernelState> {
    let mut k = propagate(spec, a, &lambda0);
    let mut theta = k.clone();
    for _ in 1..spec.depth {
        let (lam, dot) = layer_moments(spec, &k, with_ntk)?;
        if let Some(dot) = dot {
            theta = propagate(spec, a, &(dot.component_mul(&theta) + &lam));
        }
        k = propagate(spec, a, &lam);
    }
    Ok(KernelState {
        lambda: k,
        theta: if with_ntk { theta } else { DMatrix::zeros(0, 0) },
        layer: spec.depth,
    })
}

/// Output covariance and NTK in one pass.
pub fn compute_kernels(
    spec: &ModelSpec,
    a: &AdjacencyOperator,
    x: &DMatrix<f64>,
) -> Result<KernelState> {
    check_inputs(spec, a, x)?;
    run(spec, a, base_kernel(x, &spec.hp)?, true)
}

/// Covariance of one output coordinate across nodes in the infinite-width limit.
/// The adjacency is ignored for [`Architecture::Fcn`].
pub fn compute_gp(
    spec: &ModelSpec,
    a: &AdjacencyOperator,
    x: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    check_inputs(spec, a, x)?;
    Ok(run(spec, a, base_kernel(x, &spec.hp)?, false)?.lambda)
}

/// Infinite-width neural tangent kernel. The adjacency is ignored for [`Architecture::Fcn`].
pub fn compute_ntk(
    spec: &ModelSpec,
    a: &AdjacencyOperator,
    x: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    Ok(compute_kernels(spec, a, x)?.theta)
}

/// Fully-connected NTK written as a sum over layers,
/// `Θ^L = Σ_h Λ^h ⊙ Λ̇^{h+1} ⊙ ⋯ ⊙ Λ̇^{L-1}`, with the empty product equal to all-ones.
pub fn nonrecursive_ntk(spec: &ModelSpec, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spec.validate()?;
    if spec.architecture != Architecture::Fcn {
        return Err(Error::Validation(
            "the sum-of-products form is only defined for fcn".into(),
        ));
    }
    let depth = spec.depth;
    let mut lambdas = vec![base_kernel(x, &spec.hp)?];
    let mut dots: Vec<DMatrix<f64>> = Vec::with_capacity(depth);
    for l in 1..depth {
        let k = &lambdas[l - 1];
        let mut lam = dual_activation(spec.activation, k)?;
        lam.apply(|v| *v = *v * spec.hp.sigma_w2 + spec.hp.sigma_b2);
        let dot = dual_activation_derivative(spec.activation, k)? * spec.hp.sigma_w2;
        lambdas.push(lam);
        dots.push(dot);
    }
    let n = x.ncols();
    let mut theta = DMatrix::zeros(n, n);
    for (h, lam) in lambdas.iter().enumerate() {
        let mut term = lam.clone();
        for dot in &dots[h..] {
            term.component_mul_assign(dot);
        }
        theta += term;
    }
    symmetrize(&mut theta);
    Ok(theta)
}

/// Gram matrix between whole graphs for a network followed by sum pooling over nodes.
///
/// The node-level recursion runs once on the disjoint union of all graphs, so
/// every cross block sees the correct per-graph variances. Entry `(i, j)` is
/// the sum of the node-level block between graphs `i` and `j`.
pub fn inductive_gram(
    samples: &[(AdjacencyOperator, DMatrix<f64>)],
    spec: &ModelSpec,
    kind: KernelKind,
) -> Result<DMatrix<f64>> {
    spec.validate()?;
    if samples.is_empty() {
        return Ok(DMatrix::zeros(0, 0));
    }
    let d0 = samples[0].1.nrows();
    let mut offsets = Vec::with_capacity(samples.len() + 1);
    let mut total = 0;
    for (i, (a, x)) in samples.iter().enumerate() {
        if x.nrows() != d0 {
            return Err(Error::Validation(format!(
                "graph {i} has feature dimension {} instead of {d0}",
                x.nrows()
            )));
        }
        if a.n() != x.ncols() {
            return Err(Error::Validation(format!(
                "graph {i}: adjacency has {} nodes but features have {} columns",
                a.n(),
                x.ncols()
            )));
        }
        offsets.push(total);
        total += x.ncols();
    }
    offsets.push(total);
    let mut x_all = DMatrix::zeros(d0, total);
    for ((_, x), &off) in samples.iter().zip(&offsets) {
        x_all.columns_mut(off, x.ncols()).copy_from(x);
    }
    let blocks: Vec<&AdjacencyOperator> = samples.iter().map(|(a, _)| a).collect();
    let a_all = AdjacencyOperator::block_diagonal(&blocks);
    let node = match kind {
        KernelKind::Gp => compute_gp(spec, &a_all, &x_all)?,
        KernelKind::Ntk => compute_ntk(spec, &a_all, &x_all)?,
    };
    let g = samples.len();
    let mut gram = DMatrix::zeros(g, g);
    for i in 0..g {
        for j in 0..g {
            let (ri, rj) = (offsets[i], offsets[j]);
            let (ni, nj) = (offsets[i + 1] - ri, offsets[j + 1] - rj);
            gram[(i, j)] = node.view((ri, rj), (ni, nj)).sum();
        }
    }
    symmetrize(&mut gram);
    Ok(gram)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_adjacency, AdjacencyMode, Graph};
    use crate::linalg::min_eigenvalue;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hp(sigma_b2: f64, normalize: bool) -> HyperParams {
        HyperParams {
            sigma_w2: 1.0,
            sigma_b2,
            sigma_c2: 1.0,
            normalize_input_by_d0: normalize,
        }
    }

    fn random_x(d: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(d, n, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_graph(n: usize, p: f64, seed: u64) -> Graph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges = vec![];
        for u in 0..n {
            for v in (u + 1)..n {
                if rng.random_bool(p) {
                    edges.push((u, v));
                }
            }
        }
        Graph::new(n, edges).unwrap()
    }

    #[test]
    fn base_kernel_examples() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        assert_eq!(base_kernel(&i2, &hp(0.0, false)).unwrap(), i2);
        assert_eq!(base_kernel(&i2, &hp(0.0, true)).unwrap(), &i2 * 0.5);
        let x = DMatrix::from_element(2, 1, 1.0);
        let k = base_kernel(&x, &hp(0.1, true)).unwrap();
        assert!((k[(0, 0)] - 1.1).abs() < 1e-15);
        assert!(base_kernel(&DMatrix::zeros(0, 3), &hp(0.0, true)).is_err());
    }

    #[test]
    fn depth_one_is_conjugated_base() {
        let g = random_graph(6, 0.4, 1);
        let a = build_adjacency(&g, AdjacencyMode::Kipf);
        let x = random_x(3, 6, 2);
        let base = base_kernel(&x, &hp(0.2, true)).unwrap();
        let expect = a.conjugate(&base);
        for arch in [Architecture::Gnn, Architecture::SkipGnn] {
            let spec = ModelSpec::new(arch, 1, Activation::Relu).with_hp(hp(0.2, true));
            let gp = compute_gp(&spec, &a, &x).unwrap();
            let ntk = compute_ntk(&spec, &a, &x).unwrap();
            assert!((&gp - &expect).abs().max() < 1e-14);
            assert!((&ntk - &expect).abs().max() < 1e-14);
        }
        let spec = ModelSpec::new(Architecture::Fcn, 1, Activation::Relu).with_hp(hp(0.2, true));
        assert_eq!(compute_ntk(&spec, &a, &x).unwrap(), base);
    }

    #[test]
    fn linear_fcn_ntk_is_depth_times_base() {
        let x = random_x(4, 5, 3);
        for depth in 1..=5 {
            let spec = ModelSpec::new(Architecture::Fcn, depth, Activation::Identity);
            let ntk = compute_ntk(&spec, &AdjacencyOperator::identity(5), &x).unwrap();
            let base = base_kernel(&x, &spec.hp).unwrap();
            assert!((ntk - &base * depth as f64).abs().max() < 1e-12);
            let nr = nonrecursive_ntk(&spec, &x).unwrap();
            assert!((nr - base * depth as f64).abs().max() < 1e-12);
        }
    }

    #[test]
    fn gnn_with_identity_adjacency_is_fcn() {
        let x = random_x(5, 7, 4);
        let id = build_adjacency(&random_graph(7, 0.3, 5), AdjacencyMode::Identity);
        for act in [Activation::Relu, Activation::Identity, Activation::Erf] {
            for depth in 1..=5 {
                let f = ModelSpec::new(Architecture::Fcn, depth, act).with_hp(hp(0.1, true));
                let g = ModelSpec { architecture: Architecture::Gnn, ..f };
                let kf = compute_kernels(&f, &id, &x).unwrap();
                let kg = compute_kernels(&g, &id, &x).unwrap();
                assert!((&kf.lambda - &kg.lambda).abs().max() < 1e-12);
                assert!((&kf.theta - &kg.theta).abs().max() < 1e-12);
            }
        }
    }

    #[test]
    fn skip_starts_at_second_weight_layer() {
        // The second weight matrix already sees [σ(F¹); F¹], so depth 2 differs
        // from the plain network while depth 1 coincides.
        let g = random_graph(6, 0.5, 6);
        let a = build_adjacency(&g, AdjacencyMode::Kipf);
        let x = random_x(3, 6, 7);
        let plain = ModelSpec::new(Architecture::Gnn, 2, Activation::Relu);
        let skip = ModelSpec { architecture: Architecture::SkipGnn, ..plain };
        let kp = compute_gp(&plain, &a, &x).unwrap();
        let ks = compute_gp(&skip, &a, &x).unwrap();
        let k1 = a.conjugate(&base_kernel(&x, &plain.hp).unwrap());
        let e = dual_activation(Activation::Relu, &k1).unwrap();
        let expect = a.conjugate(&((e + &k1) * 0.5));
        assert!((ks - expect).abs().max() < 1e-13);
        assert!((kp - ks_plain_check(&a, &k1)).abs().max() < 1e-13);
    }

    fn ks_plain_check(a: &AdjacencyOperator, k1: &DMatrix<f64>) -> DMatrix<f64> {
        a.conjugate(&dual_activation(Activation::Relu, k1).unwrap())
    }

    #[test]
    fn nonrecursive_matches_recursive() {
        for seed in 0..10 {
            let x = random_x(4, 6, 100 + seed);
            for act in [Activation::Relu, Activation::Erf, Activation::LeakyRelu(0.2)] {
                for depth in 1..=4 {
                    let spec = ModelSpec::new(Architecture::Fcn, depth, act).with_hp(hp(0.3, true));
                    let a = compute_ntk(&spec, &AdjacencyOperator::identity(6), &x).unwrap();
                    let b = nonrecursive_ntk(&spec, &x).unwrap();
                    assert!((a - b).abs().max() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn nonrecursive_rejects_graph_models() {
        let spec = ModelSpec::new(Architecture::Gnn, 2, Activation::Relu);
        assert!(nonrecursive_ntk(&spec, &random_x(2, 2, 0)).is_err());
    }

    #[test]
    fn inductive_single_graph_collapses() {
        let g = random_graph(5, 0.5, 8);
        let a = build_adjacency(&g, AdjacencyMode::Kipf);
        let x = random_x(3, 5, 9);
        let spec = ModelSpec::new(Architecture::Gnn, 3, Activation::Relu);
        let gram = inductive_gram(&[(a.clone(), x.clone())], &spec, KernelKind::Ntk).unwrap();
        let node = compute_ntk(&spec, &a, &x).unwrap();
        assert_eq!(gram.shape(), (1, 1));
        assert!((gram[(0, 0)] - node.sum()).abs() < 1e-12 * node.sum().abs().max(1.0));
    }

    #[test]
    fn inductive_identical_graphs_equal_entries() {
        let g = random_graph(4, 0.6, 10);
        let a = build_adjacency(&g, AdjacencyMode::Kipf);
        let x = random_x(3, 4, 11);
        let spec = ModelSpec::new(Architecture::Gnn, 2, Activation::Relu);
        let gram = inductive_gram(&[(a.clone(), x.clone()), (a, x)], &spec, KernelKind::Gp).unwrap();
        let v = gram[(0, 0)];
        assert!(gram.iter().all(|&g| (g - v).abs() < 1e-12 * v.abs().max(1.0)));
    }

    #[test]
    fn inductive_cross_block_matches_direct_formula() {
        // One relu layer by hand: cross block of the two-layer GP is
        // A_i E[σσ](cross of A_i Λ⁰ A_jᵀ) A_jᵀ, with variances from each graph.
        let a1 = build_adjacency(&random_graph(3, 0.7, 12), AdjacencyMode::Kipf);
        let a2 = build_adjacency(&random_graph(4, 0.7, 13), AdjacencyMode::Kipf);
        let (x1, x2) = (random_x(2, 3, 14), random_x(2, 4, 15));
        let spec = ModelSpec::new(Architecture::Gnn, 2, Activation::Relu);
        let gram = inductive_gram(&[(a1.clone(), x1.clone()), (a2.clone(), x2.clone())], &spec, KernelKind::Gp).unwrap();
        let (d1, d2) = (a1.to_dense(), a2.to_dense());
        let k11 = &d1 * base_kernel(&x1, &spec.hp).unwrap() * d1.transpose();
        let k22 = &d2 * base_kernel(&x2, &spec.hp).unwrap() * d2.transpose();
        let k12 = &d1 * cross_base_kernel(&x1, &x2, &spec.hp).unwrap() * d2.transpose();
        let mut e = DMatrix::zeros(3, 4);
        for i in 0..3 {
            for j in 0..4 {
                e[(i, j)] = crate::activation::pair_moment(Activation::Relu, k11[(i, i)], k22[(j, j)], k12[(i, j)]).unwrap();
            }
        }
        let cross = (&d1 * e * d2.transpose()).sum();
        assert!((gram[(0, 1)] - cross).abs() < 1e-12);
    }

    #[test]
    fn inductive_dimension_mismatch() {
        let a = AdjacencyOperator::identity(2);
        let spec = ModelSpec::new(Architecture::Gnn, 2, Activation::Relu);
        let r = inductive_gram(&[(a.clone(), random_x(2, 2, 0)), (a, random_x(3, 2, 1))], &spec, KernelKind::Gp);
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn kernels_stay_psd_for_arbitrary_adjacency(
            n in 2usize..32,
            depth in 1usize..=4,
            arch in prop_oneof![Just(Architecture::Fcn), Just(Architecture::Gnn), Just(Architecture::SkipGnn)],
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let a = AdjacencyOperator::from_dense(&a).unwrap();
            let x = random_x(3, n, seed ^ 1);
            let spec = ModelSpec::new(arch, depth, Activation::Relu).with_hp(hp(0.1, true));
            let ks = compute_kernels(&spec, &a, &x).unwrap();
            for k in [ks.lambda, ks.theta] {
                let norm = crate::linalg::spectral_norm_sym(&k);
                prop_assert!(min_eigenvalue(&k) >= -1e-8 * norm);
            }
        }

        #[test]
        fn inductive_gram_is_psd(seed in any::<u64>()) {
            let mut samples = vec![];
            for g in 0..3u64 {
                let n = 2 + ((seed >> (4 * g)) % 5) as usize;
                let a = build_adjacency(&random_graph(n, 0.5, seed ^ g), AdjacencyMode::Kipf);
                samples.push((a, random_x(3, n, seed.wrapping_add(g))));
            }
            let spec = ModelSpec::new(Architecture::Gnn, 3, Activation::Relu);
            for kind in [KernelKind::Gp, KernelKind::Ntk] {
                let gram = inductive_gram(&samples, &spec, kind).unwrap();
                prop_assert_eq!(&gram, &gram.transpose());
                prop_assert!(min_eigenvalue(&gram) >= -1e-8 * crate::linalg::spectral_norm_sym(&gram));
            }
        }
    }
}
