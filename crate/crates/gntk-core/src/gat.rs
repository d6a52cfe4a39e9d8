//! GP and NTK recursions for the attention network with an elementwise
//! attention nonlinearity in place of softmax.
//!
//! The network is a linear input layer followed by `depth − 1` attention
//! layers. An attention layer maps pre-activations `F` to
//!
//! ```text
//! G = σ₂(F),   a^h = σ_c/√(2d) (c₁^h + c₂^h)ᵀ G
//! P^h_si = σ₁(A_si (a^h_s + a^h_i))           (inside placement)
//! P^h_si = A_si (σ₁(a^h_s) + σ₁(a^h_i))       (hadamard-first placement)
//! F' = Σ_h (σ_w/√(Hd) W^h G + σ_b/√H b^h 1ᵀ) P^h
//! ```
//!
//! Attention-score covariances live on ordered node pairs. Pair `(l, m)` has
//! flat index `m·n + l`, which is the column-major position of `A_lm`. The
//! lift of an n×n matrix Ω to pair space is
//! `γ_A(Ω)_{(l,m),(s,t)} = A_lm A_st (Ω_ls + Ω_lt + Ω_ms + Ω_mt)`,
//! and `bm(W, Y)_ij` is the Frobenius product of `W` with block `(i, j)` of `Y`.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::activation::{
    dual_activation, dual_activation_derivative, pair_moment, pair_moment_derivative, Activation,
};
use crate::dataset::HyperParams;
use crate::error::{Error, Result};
use crate::graph::AdjacencyOperator;
use crate::kernel::{base_kernel, KernelState};
use crate::linalg::symmetrize;

/// Largest node count for which pair-space matrices are materialized.
pub const DENSE_LIFT_LIMIT: usize = 64;

/// Where the attention nonlinearity is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Placement {
    /// `σ₁` acts on the masked pair score.
    Inside,
    /// `σ₁` acts on node scores before they are summed and masked.
    HadamardFirst,
}

impl std::str::FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "inside" => Ok(Placement::Inside),
            "hadamard_first" | "hadamard-first" | "hadamard" => Ok(Placement::HadamardFirst),
            other => Err(Error::Validation(format!("unknown placement '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatSpec {
    /// Total number of weight layers: one linear layer plus `depth − 1` attention layers.
    pub depth: usize,
    pub hp: HyperParams,
    /// Attention nonlinearity.
    pub sigma1: Activation,
    /// Layer nonlinearity.
    pub sigma2: Activation,
    pub placement: Placement,
    /// Include bias terms (experimental: the bias recursion is not backed by a derivation).
    pub bias: bool,
}

impl GatSpec {
    pub fn new(depth: usize, sigma1: Activation, sigma2: Activation) -> Self {
        GatSpec {
            depth,
            hp: HyperParams::default(),
            sigma1,
            sigma2,
            placement: Placement::Inside,
            bias: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Validation("depth must be at least 1".into()));
        }
        self.hp.validate()?;
        self.sigma1.validate()?;
        self.sigma2.validate()?;
        for act in [self.sigma1, self.sigma2] {
            if !act.has_closed_form() {
                return Err(Error::Validation(format!(
                    "{} has no closed-form dual",
                    act.name()
                )));
            }
        }
        if self.placement == Placement::HadamardFirst && self.sigma1.eval(0.0) != 0.0 {
            return Err(Error::Validation(
                "hadamard-first placement needs sigma1(0) = 0".into(),
            ));
        }
        Ok(())
    }

    fn bias2(&self) -> f64 {
        if self.bias {
            self.hp.sigma_b2
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Realization {
    Dense,
    Implicit,
}

/// The pair-space lift `γ_A(Ω)`, either materialized or evaluated on demand.
#[derive(Debug, Clone)]
pub enum LiftedKernel {
    Dense(DMatrix<f64>),
    Implicit { a: DMatrix<f64>, omega: DMatrix<f64> },
}

impl LiftedKernel {
    /// Node count `n`; the operator is n²×n².
    pub fn n(&self) -> usize {
        match self {
            LiftedKernel::Dense(m) => (m.nrows() as f64).sqrt().round() as usize,
            LiftedKernel::Implicit { a, .. } => a.nrows(),
        }
    }

    /// Entry `(r, c)` with pair indices `r = m·n + l`.
    pub fn entry(&self, r: usize, c: usize) -> f64 {
        match self {
            LiftedKernel::Dense(m) => m[(r, c)],
            LiftedKernel::Implicit { a, omega } => {
                let n = a.nrows();
                let (l, m) = (r % n, r / n);
                let (s, t) = (c % n, c / n);
                a[(l, m)]
                    * a[(s, t)]
                    * (omega[(l, s)] + omega[(l, t)] + omega[(m, s)] + omega[(m, t)])
            }
        }
    }

    pub fn to_dense(&self) -> Result<DMatrix<f64>> {
        match self {
            LiftedKernel::Dense(m) => Ok(m.clone()),
            LiftedKernel::Implicit { .. } => {
                let n = self.n();
                check_dense_limit(n)?;
                let nn = n * n;
                Ok(DMatrix::from_fn(nn, nn, |r, c| self.entry(r, c)))
            }
        }
    }

    /// `bm(W, self)`.
    pub fn contract(&self, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            LiftedKernel::Dense(m) => batch_multiply(w, m),
            LiftedKernel::Implicit { a, omega } => {
                let op = AdjacencyOperator::from_dense(a)?;
                Ok(contract_fast(&op, omega, w))
            }
        }
    }
}

fn check_dense_limit(n: usize) -> Result<()> {
    if n > DENSE_LIFT_LIMIT {
        return Err(Error::Capacity(format!(
            "pair-space matrix for {n} nodes exceeds the {DENSE_LIFT_LIMIT}-node limit"
        )));
    }
    Ok(())
}

/// Builds `γ_A(Ω)`. The dense realization is formed literally as
/// `J_A [Ω Ω; Ω Ω] J_Aᵀ` with `J_A = diag(vec A) [1⊗I, I⊗1]`.
pub fn gamma_a(a: &DMatrix<f64>, omega: &DMatrix<f64>, realization: Realization) -> Result<LiftedKernel> {
    let n = a.nrows();
    if a.ncols() != n || omega.shape() != (n, n) {
        return Err(Error::Validation(format!(
            "shapes disagree: A is {}x{}, Omega is {}x{}",
            a.nrows(),
            a.ncols(),
            omega.nrows(),
            omega.ncols()
        )));
    }
    match realization {
        Realization::Implicit => Ok(LiftedKernel::Implicit {
            a: a.clone(),
            omega: omega.clone(),
        }),
        Realization::Dense => {
            check_dense_limit(n)?;
            let ones = DMatrix::from_element(n, 1, 1.0);
            let eye = DMatrix::<f64>::identity(n, n);
            let left = ones.kronecker(&eye);
            let right = eye.kronecker(&ones);
            let mut stacked = DMatrix::zeros(n * n, 2 * n);
            stacked.columns_mut(0, n).copy_from(&left);
            stacked.columns_mut(n, n).copy_from(&right);
            let vec_a = DMatrix::from_column_slice(n * n, 1, a.as_slice());
            let j = DMatrix::from_diagonal(&vec_a.column(0)) * stacked;
            let mut block = DMatrix::zeros(2 * n, 2 * n);
            for (r, c) in [(0, 0), (0, n), (n, 0), (n, n)] {
                block.view_mut((r, c), (n, n)).copy_from(omega);
            }
            Ok(LiftedKernel::Dense(&j * block * j.transpose()))
        }
    }
}

/// `bm(X, Y)`: entry `(i, j)` is `⟨X, Y_IJ⟩_F` over the n×n blocks of `Y`.
pub fn batch_multiply(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, m) = x.shape();
    if n != m || n == 0 || y.nrows() % n != 0 || y.ncols() % n != 0 {
        return Err(Error::Validation(format!(
            "cannot split a {}x{} matrix into {}x{} blocks",
            y.nrows(),
            y.ncols(),
            n,
            m
        )));
    }
    let (zr, zc) = (y.nrows() / n, y.ncols() / n);
    Ok(DMatrix::from_fn(zr, zc, |i, j| {
        y.view((i * n, j * n), (n, n)).component_mul(x).sum()
    }))
}

/// `bm(W, γ_A(Ω))` computed with sparse-dense products:
/// `Ω⊙(AWAᵀ) + (AW⊙Ω)Aᵀ + A(WAᵀ⊙Ω) + A(W⊙Ω)Aᵀ`.
pub fn contract_fast(a: &AdjacencyOperator, omega: &DMatrix<f64>, w: &DMatrix<f64>) -> DMatrix<f64> {
    let aw = a.apply(w);
    let wat = a.apply_transpose_right(w);
    let mut m = a.apply_transpose_right(&aw).component_mul(omega);
    m += a.apply_transpose_right(&aw.component_mul(omega));
    m += a.apply(&wat.component_mul(omega));
    m += a.conjugate(&w.component_mul(omega));
    m
}

fn check_adjacency(a: &AdjacencyOperator, x: &DMatrix<f64>) -> Result<()> {
    if a.n() != x.ncols() {
        return Err(Error::Validation(format!(
            "adjacency has {} nodes but features have {} columns",
            a.n(),
            x.ncols()
        )));
    }
    if !a.is_symmetric(1e-12) {
        return Err(Error::Validation(
            "attention kernels need a symmetric adjacency".into(),
        ));
    }
    Ok(())
}

/// How each attention layer is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Path {
    /// Pick the cheapest exact path for the spec.
    Auto,
    /// Entrywise pair-space evaluation of the four-term update.
    General,
}

/// Quantities of one attention layer derived from the incoming covariance `k`.
struct LayerInputs {
    /// `E[σ₂σ₂]`.
    lam: DMatrix<f64>,
    /// `σ_w² Λ (+ σ_b²)`.
    values: DMatrix<f64>,
    /// `Θ ⊙ E[σ̇₂σ̇₂]`, present when the NTK is tracked.
    through: Option<DMatrix<f64>>,
}

fn layer_inputs(spec: &GatSpec, k: &DMatrix<f64>, theta: Option<&DMatrix<f64>>) -> Result<LayerInputs> {
    let lam = dual_activation(spec.sigma2, k)?;
    let b2 = spec.bias2();
    let values = lam.map(|v| spec.hp.sigma_w2 * v + b2);
    let through = match theta {
        Some(t) => Some(dual_activation_derivative(spec.sigma2, k)?.component_mul(t)),
        None => None,
    };
    Ok(LayerInputs { lam, values, through })
}

/// Attention layer through `contract_fast`; exact whenever the attention
/// covariance is a lift `γ_A(·)` (identity σ₁ or hadamard-first placement).
fn layer_fast(
    spec: &GatSpec,
    a: &AdjacencyOperator,
    li: &LayerInputs,
) -> Result<(DMatrix<f64>, Option<DMatrix<f64>>)> {
    let c2 = spec.hp.sigma_c2;
    let scaled = &li.lam * c2;
    let (omega, omega_dot) = if spec.sigma1.is_identity() {
        (scaled.clone(), None)
    } else {
        let dot = match li.through {
            Some(_) => Some(dual_activation_derivative(spec.sigma1, &scaled)?),
            None => None,
        };
        (dual_activation(spec.sigma1, &scaled)?, dot)
    };
    let k_next = contract_fast(a, &omega, &li.values);
    let theta_next = match &li.through {
        None => None,
        Some(t) => {
            // Score-gradient terms: σ_c²(Λ + Θ⊙Λ̇) weighted by the score derivative.
            let mut score = (&li.lam + t) * c2;
            if let Some(d) = &omega_dot {
                score.component_mul_assign(d);
            }
            let through_values = t * spec.hp.sigma_w2;
            Some(
                contract_fast(a, &(&omega + score), &li.values)
                    + contract_fast(a, &omega, &through_values),
            )
        }
    };
    Ok((k_next, theta_next))
}

/// Attention layer with σ₁ applied inside the pair score, evaluated entrywise
/// over pairs on the support of `A`.
fn layer_general(
    spec: &GatSpec,
    adj: &DMatrix<f64>,
    li: &LayerInputs,
) -> Result<(DMatrix<f64>, Option<DMatrix<f64>>)> {
    let n = adj.nrows();
    check_dense_limit(n)?;
    let c2 = spec.hp.sigma_c2;
    let act = spec.sigma1;
    let lam = &li.lam;
    // Support of each column: sources s with A_si ≠ 0.
    let support: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&s| adj[(s, i)] != 0.0)
                .map(|s| (s, adj[(s, i)]))
                .collect()
        })
        .collect();
    let four = |m: &DMatrix<f64>, s: usize, i: usize, t: usize, j: usize| {
        m[(s, t)] + m[(s, j)] + m[(i, t)] + m[(i, j)]
    };
    // Score variance of pair (s, i).
    let var: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            support[i]
                .iter()
                .map(|&(s, w)| c2 * w * w * four(lam, s, i, s, i))
                .collect()
        })
        .collect();
    let sw2 = spec.hp.sigma_w2;
    let rows: Vec<Result<Vec<(f64, f64)>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row = Vec::with_capacity(n);
            for j in 0..n {
                let (mut kk, mut tt) = (0.0, 0.0);
                for (p, &(s, ws)) in support[i].iter().enumerate() {
                    for (q, &(t, wt)) in support[j].iter().enumerate() {
                        let cov = c2 * ws * wt * four(lam, s, i, t, j);
                        let psi = pair_moment(act, var[i][p], var[j][q], cov)
                            .ok_or_else(|| Error::Validation("sigma1 lacks a closed form".into()))?;
                        kk += li.values[(s, t)] * psi;
                        if let Some(th) = &li.through {
                            let psi_dot = pair_moment_derivative(act, var[i][p], var[j][q], cov)
                                .expect("closed form checked above");
                            let cov_t = c2 * ws * wt * four(th, s, i, t, j);
                            tt += li.values[(s, t)] * (psi + (cov + cov_t) * psi_dot)
                                + sw2 * th[(s, t)] * psi;
                        }
                    }
                }
                row.push((kk, tt));
            }
            Ok(row)
        })
        .collect();
    let mut k_next = DMatrix::zeros(n, n);
    let mut t_next = DMatrix::zeros(n, n);
    for (i, row) in rows.into_iter().enumerate() {
        for (j, (kk, tt)) in row?.into_iter().enumerate() {
            k_next[(i, j)] = kk;
            t_next[(i, j)] = tt;
        }
    }
    Ok((k_next, li.through.as_ref().map(|_| t_next)))
}

fn run(
    spec: &GatSpec,
    a: &AdjacencyOperator,
    x: &DMatrix<f64>,
    with_ntk: bool,
    path: Path,
) -> Result<KernelState> {
    spec.validate()?;
    check_adjacency(a, x)?;
    let base_hp = HyperParams {
        sigma_b2: spec.bias2(),
        ..spec.hp
    };
    let mut k = base_kernel(x, &base_hp)?;
    let mut theta = k.clone();
    let use_general = match path {
        Path::General => true,
        Path::Auto => spec.placement == Placement::Inside && !spec.sigma1.is_identity(),
    };
    let dense_a = if use_general {
        check_dense_limit(a.n())?;
        Some(a.to_dense())
    } else {
        None
    };
    for _ in 1..spec.depth {
        let li = layer_inputs(spec, &k, with_ntk.then_some(&theta))?;
        let (mut k_next, t_next) = match &dense_a {
            Some(d) => layer_general(spec, d, &li)?,
            None => layer_fast(spec, a, &li)?,
        };
        symmetrize(&mut k_next);
        k = k_next;
        if let Some(mut t) = t_next {
            symmetrize(&mut t);
            theta = t;
        }
    }
    Ok(KernelState {
        lambda: k,
        theta: if with_ntk { theta } else { DMatrix::zeros(0, 0) },
        layer: spec.depth,
    })
}

/// Output covariance of the attention network in the infinite-width, infinite-head limit.
///
/// Inside placement with a non-identity σ₁ is evaluated in pair space and is
/// limited to [`DENSE_LIFT_LIMIT`] nodes.
pub fn gat_gp(spec: &GatSpec, a: &AdjacencyOperator, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(run(spec, a, x, false, Path::Auto)?.lambda)
}

/// NTK of the attention network. Identity σ₁ and hadamard-first placement use
/// the sparse fast path; other settings go through pair space.
pub fn gat_ntk(spec: &GatSpec, a: &AdjacencyOperator, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(run(spec, a, x, true, Path::Auto)?.theta)
}

/// Covariance and NTK together.
pub fn gat_kernels(spec: &GatSpec, a: &AdjacencyOperator, x: &DMatrix<f64>) -> Result<KernelState> {
    run(spec, a, x, true, Path::Auto)
}

/// The four-term NTK evaluated entrywise in pair space for any σ₁, with no
/// shortcut for identity σ₁. Only the inside placement is supported.
pub fn gat_ntk_general(spec: &GatSpec, a: &AdjacencyOperator, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if spec.placement != Placement::Inside {
        return Err(Error::Validation(
            "the pair-space evaluation covers the inside placement only".into(),
        ));
    }
    Ok(run(spec, a, x, true, Path::General)?.theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_adjacency, AdjacencyMode, Graph};
    use crate::linalg::min_eigenvalue;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sym(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &m + m.transpose()
    }

    fn random_adj(n: usize, seed: u64) -> AdjacencyOperator {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges = vec![];
        for u in 0..n {
            for v in (u + 1)..n {
                if rng.random_bool(0.4) {
                    edges.push((u, v));
                }
            }
        }
        build_adjacency(&Graph::new(n, edges).unwrap(), AdjacencyMode::SelfLoops)
    }

    #[test]
    fn gamma_scalar_case() {
        let a = DMatrix::from_element(1, 1, 1.5);
        let w = DMatrix::from_element(1, 1, 0.3);
        for r in [Realization::Dense, Realization::Implicit] {
            let g = gamma_a(&a, &w, r).unwrap().to_dense().unwrap();
            assert!((g[(0, 0)] - 4.0 * 2.25 * 0.3).abs() < 1e-15);
        }
        let op = AdjacencyOperator::from_dense(&a).unwrap();
        let om = DMatrix::from_element(1, 1, 0.7);
        let m = contract_fast(&op, &om, &w);
        assert!((m[(0, 0)] - 4.0 * 2.25 * 0.3 * 0.7).abs() < 1e-15);
    }

    #[test]
    fn zero_adjacency_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let om = sym(3, &mut rng);
        let z = DMatrix::zeros(3, 3);
        assert!(gamma_a(&z, &om, Realization::Dense).unwrap().to_dense().unwrap().iter().all(|&v| v == 0.0));
        let op = AdjacencyOperator::from_dense(&z).unwrap();
        assert!(contract_fast(&op, &om, &sym(3, &mut rng)).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_and_implicit_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in 1..=6 {
            let a = sym(n, &mut rng);
            let om = sym(n, &mut rng);
            let d = gamma_a(&a, &om, Realization::Dense).unwrap().to_dense().unwrap();
            let i = gamma_a(&a, &om, Realization::Implicit).unwrap().to_dense().unwrap();
            assert!((d - i).abs().max() < 1e-14);
        }
    }

    #[test]
    fn dense_lift_capacity() {
        let a = DMatrix::zeros(65, 65);
        assert!(matches!(gamma_a(&a, &a, Realization::Dense), Err(Error::Capacity(_))));
    }

    #[test]
    fn bm_examples() {
        let x = DMatrix::<f64>::identity(2, 2);
        let y = DMatrix::<f64>::identity(4, 4);
        assert_eq!(batch_multiply(&x, &y).unwrap(), DMatrix::from_row_slice(2, 2, &[2., 0., 0., 2.]));
        let ones = DMatrix::from_element(2, 2, 1.0);
        let c = [[1.0, 2.0], [3.0, 4.0]];
        let y = DMatrix::from_fn(4, 4, |r, s| c[r / 2][s / 2]);
        let out = batch_multiply(&ones, &y).unwrap();
        assert_eq!(out, DMatrix::from_row_slice(2, 2, &[4., 8., 12., 16.]));
        let x1 = DMatrix::from_row_slice(2, 2, &[1., 2., 3., 4.]);
        let y1 = DMatrix::from_row_slice(2, 2, &[5., 6., 7., 8.]);
        assert_eq!(batch_multiply(&x1, &y1).unwrap()[(0, 0)], 70.0);
        assert!(batch_multiply(&x1, &DMatrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn contract_fast_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..20 {
            let n = 1 + trial % 8;
            let a = sym(n, &mut rng);
            let om = sym(n, &mut rng);
            let w = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let dense = gamma_a(&a, &om, Realization::Dense).unwrap();
            let expect = dense.contract(&w).unwrap();
            let fast = contract_fast(&AdjacencyOperator::from_dense(&a).unwrap(), &om, &w);
            assert!((fast - expect).abs().max() < 1e-12);
        }
    }

    #[test]
    fn scalar_two_layer_example() {
        let a = AdjacencyOperator::from_dense(&DMatrix::from_element(1, 1, 1.0)).unwrap();
        let x = DMatrix::from_element(1, 1, 1.0);
        let spec = GatSpec::new(2, Activation::Identity, Activation::Identity);
        assert!((gat_gp(&spec, &a, &x).unwrap()[(0, 0)] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn depth_one_ntk_is_input_gram() {
        let a = random_adj(5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = DMatrix::from_fn(3, 5, |_, _| rng.random_range(-1.0..1.0));
        let mut spec = GatSpec::new(1, Activation::Relu, Activation::Relu);
        spec.hp.sigma_w2 = 1.7;
        let k = gat_ntk(&spec, &a, &x).unwrap();
        assert!((k - x.tr_mul(&x) * (1.7 / 3.0)).abs().max() < 1e-14);
    }

    #[test]
    fn corollary_matches_general_path() {
        for seed in 0..6u64 {
            let n = 2 + seed as usize % 5;
            let a = random_adj(n, 10 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = DMatrix::from_fn(3, n, |_, _| rng.random_range(-1.0..1.0));
            for depth in 1..=3 {
                for s2 in [Activation::Relu, Activation::LeakyRelu(0.2)] {
                    let mut spec = GatSpec::new(depth, Activation::Identity, s2);
                    spec.hp.sigma_c2 = 0.7;
                    let fast = gat_ntk(&spec, &a, &x).unwrap();
                    let general = gat_ntk_general(&spec, &a, &x).unwrap();
                    assert!((&fast - &general).abs().max() < 1e-10 * fast.abs().max().max(1.0));
                }
            }
        }
    }

    #[test]
    fn placements_coincide_for_identity_sigma1() {
        let a = random_adj(6, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = DMatrix::from_fn(4, 6, |_, _| rng.random_range(-1.0..1.0));
        let mut spec = GatSpec::new(3, Activation::Identity, Activation::Relu);
        let inside = gat_kernels(&spec, &a, &x).unwrap();
        spec.placement = Placement::HadamardFirst;
        let first = gat_kernels(&spec, &a, &x).unwrap();
        assert!((&inside.lambda - &first.lambda).abs().max() < 1e-12);
        assert!((&inside.theta - &first.theta).abs().max() < 1e-12);
    }

    #[test]
    fn sigma_c2_scales_linearly_for_identity_sigma1() {
        let a = random_adj(5, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = DMatrix::from_fn(3, 5, |_, _| rng.random_range(-1.0..1.0));
        let mut spec = GatSpec::new(2, Activation::Identity, Activation::Relu);
        let one = gat_gp(&spec, &a, &x).unwrap();
        spec.hp.sigma_c2 = 2.0;
        let two = gat_gp(&spec, &a, &x).unwrap();
        assert!((two - one * 2.0).abs().max() < 1e-13);
    }

    #[test]
    fn rejects_asymmetric_adjacency() {
        let a = AdjacencyOperator::from_dense(&DMatrix::from_row_slice(2, 2, &[1., 1., 0., 1.])).unwrap();
        let x = DMatrix::from_element(1, 2, 1.0);
        let spec = GatSpec::new(2, Activation::Identity, Activation::Relu);
        assert!(matches!(gat_gp(&spec, &a, &x), Err(Error::Validation(_))));
    }

    #[test]
    fn inside_nonlinear_capacity_limit() {
        let n = 65;
        let a = AdjacencyOperator::identity(n);
        let x = DMatrix::from_element(1, n, 1.0);
        let spec = GatSpec::new(2, Activation::Erf, Activation::Relu);
        assert!(matches!(gat_gp(&spec, &a, &x), Err(Error::Capacity(_))));
        let mut fast = spec;
        fast.placement = Placement::HadamardFirst;
        assert!(gat_gp(&fast, &a, &x).is_ok());
    }

    #[test]
    fn outputs_are_psd() {
        for seed in 0..8u64 {
            let n = 3 + seed as usize;
            let a = random_adj(n, 40 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = DMatrix::from_fn(3, n, |_, _| rng.random_range(-1.0..1.0));
            for placement in [Placement::Inside, Placement::HadamardFirst] {
                for s1 in [Activation::Identity, Activation::Relu] {
                    for s2 in [Activation::Relu, Activation::LeakyRelu(0.2)] {
                        let mut spec = GatSpec::new(3, s1, s2);
                        spec.placement = placement;
                        let ks = gat_kernels(&spec, &a, &x).unwrap();
                        for k in [&ks.lambda, &ks.theta] {
                            assert_eq!(k, &k.transpose());
                            assert!(min_eigenvalue(k) >= -1e-8 * crate::linalg::spectral_norm_sym(k).max(1e-300));
                        }
                    }
                }
            }
        }
    }
}
