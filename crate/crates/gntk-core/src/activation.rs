//! Pointwise nonlinearities and their Gaussian second moments.
//!
//! For `u ~ N(0, Σ)` the dual of an activation is the matrix `E[σ(u)σ(u)ᵀ]`;
//! the derivative dual is the same with `σ̇`. Both only need the 2×2
//! marginal `(Σ_ii, Σ_jj, Σ_ij)` per entry.

use std::f64::consts::{FRAC_2_SQRT_PI, PI};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::cholesky_with_jitter;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    /// Negative-side slope in `(0, 1)`.
    LeakyRelu(f64),
    Erf,
    Identity,
    /// Logistic function; Monte-Carlo only.
    Sigmoid,
    /// Monte-Carlo only.
    Exp,
}

impl Activation {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Activation::Erf => libm::erf(x),
            Activation::Identity => x,
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Exp => x.exp(),
        }
    }

    /// Derivative, taking the left limit at kinks (so `relu'(0) = 0`).
    pub fn deriv(&self, x: f64) -> f64 {
        match *self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Activation::Erf => FRAC_2_SQRT_PI * (-x * x).exp(),
            Activation::Identity => 1.0,
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 - s)
            }
            Activation::Exp => x.exp(),
        }
    }

    pub fn has_closed_form(&self) -> bool {
        !matches!(self, Activation::Sigmoid | Activation::Exp)
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Activation::Identity)
    }

    pub fn validate(&self) -> Result<()> {
        if let Activation::LeakyRelu(a) = *self {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::Validation(format!(
                    "leaky relu slope must lie in (0, 1), got {a}"
                )));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> String {
        match *self {
            Activation::Relu => "relu".into(),
            Activation::LeakyRelu(a) => format!("leaky_relu({a})"),
            Activation::Erf => "erf".into(),
            Activation::Identity => "identity".into(),
            Activation::Sigmoid => "sigmoid".into(),
            Activation::Exp => "exp".into(),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let act = match s.as_str() {
            "relu" => Activation::Relu,
            "erf" => Activation::Erf,
            "identity" | "linear" => Activation::Identity,
            "sigmoid" => Activation::Sigmoid,
            "exp" => Activation::Exp,
            "leaky_relu" | "leakyrelu" => Activation::LeakyRelu(0.2),
            _ => {
                let inner = s
                    .strip_prefix("leaky_relu(")
                    .or_else(|| s.strip_prefix("leakyrelu("))
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| Error::Validation(format!("unknown activation '{s}'")))?;
                let a = inner
                    .parse()
                    .map_err(|_| Error::Validation(format!("bad leaky relu slope '{inner}'")))?;
                Activation::LeakyRelu(a)
            }
        };
        act.validate()?;
        Ok(act)
    }
}

/// Probability that a centered Gaussian with variance `a` is positive,
/// with the degenerate variable `u ≡ 0` counted as never positive.
fn positive_mass(a: f64) -> f64 {
    if a > 0.0 {
        0.5
    } else {
        0.0
    }
}

fn correlation(a: f64, b: f64, c: f64) -> f64 {
    (c / (a * b).sqrt()).clamp(-1.0, 1.0)
}

/// `E[relu(u) relu(v)]`.
fn relu_moment(a: f64, b: f64, c: f64) -> f64 {
    if a <= 0.0 || b <= 0.0 {
        return 0.0;
    }
    let rho = correlation(a, b, c);
    (a * b).sqrt() * ((1.0 - rho * rho).sqrt() + (PI - rho.acos()) * rho) / (2.0 * PI)
}

/// `E[1{u>0} 1{v>0}]`.
fn step_moment(a: f64, b: f64, c: f64) -> f64 {
    if a <= 0.0 || b <= 0.0 {
        return 0.0;
    }
    (PI - correlation(a, b, c).acos()) / (2.0 * PI)
}

/// `E[σ(u)σ(v)]` for `(u, v)` centered Gaussian with variances `a`, `b` and covariance `c`.
/// Returns `None` for activations without a closed form.
pub fn pair_moment(act: Activation, a: f64, b: f64, c: f64) -> Option<f64> {
    Some(match act {
        Activation::Relu => relu_moment(a, b, c),
        // σ = αx + (1−α)relu(x); the cross terms E[u relu(v)] equal c/2.
        Activation::LeakyRelu(al) => al * c + (1.0 - al) * (1.0 - al) * relu_moment(a, b, c),
        Activation::Erf => {
            let s = 2.0 * c / ((1.0 + 2.0 * a) * (1.0 + 2.0 * b)).sqrt();
            (2.0 / PI) * s.clamp(-1.0, 1.0).asin()
        }
        Activation::Identity => c,
        Activation::Sigmoid | Activation::Exp => return None,
    })
}

/// `E[σ̇(u)σ̇(v)]`, same conventions as [`pair_moment`].
pub fn pair_moment_derivative(act: Activation, a: f64, b: f64, c: f64) -> Option<f64> {
    Some(match act {
        Activation::Relu => step_moment(a, b, c),
        Activation::LeakyRelu(al) => {
            al * al
                + al * (1.0 - al) * (positive_mass(a) + positive_mass(b))
                + (1.0 - al) * (1.0 - al) * step_moment(a, b, c)
        }
        Activation::Erf => {
            let det = (1.0 + 2.0 * a) * (1.0 + 2.0 * b) - 4.0 * c * c;
            (4.0 / PI) / det.max(f64::MIN_POSITIVE).sqrt()
        }
        Activation::Identity => 1.0,
        Activation::Sigmoid | Activation::Exp => return None,
    })
}

/// Applies `f(Σ_ii, Σ_jj, Σ_ij)` to every unordered pair after validating the
/// marginals. Tiny negative diagonals are clamped to zero.
pub(crate) fn pairwise_map<F>(sigma: &DMatrix<f64>, f: F) -> Result<DMatrix<f64>>
where
    F: Fn(f64, f64, f64) -> f64 + Sync,
{
    let n = sigma.nrows();
    if sigma.ncols() != n {
        return Err(Error::Validation(format!(
            "covariance must be square, got {}x{}",
            n,
            sigma.ncols()
        )));
    }
    let scale = sigma.diagonal().iter().fold(1.0f64, |m, &x| m.max(x.abs()));
    let mut diag = Vec::with_capacity(n);
    for i in 0..n {
        let d = sigma[(i, i)];
        if !d.is_finite() {
            return Err(Error::Numerical(format!("non-finite variance at index {i}")));
        }
        if d < -1e-8 * scale {
            return Err(Error::Numerical(format!(
                "covariance is not PSD: variance {d} at index {i}"
            )));
        }
        diag.push(d.max(0.0));
    }
    let rows: Vec<Result<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut col = Vec::with_capacity(n - j);
            for i in j..n {
                let c = 0.5 * (sigma[(i, j)] + sigma[(j, i)]);
                let bound = (diag[i] * diag[j]).sqrt();
                if !c.is_finite() || c.abs() > bound + 1e-9 * bound.max(1.0) {
                    return Err(Error::Numerical(format!(
                        "correlation out of range at ({i}, {j}): cov {c}, variances {} and {}",
                        diag[i], diag[j]
                    )));
                }
                col.push(f(diag[i], diag[j], c));
            }
            Ok(col)
        })
        .collect();
    let mut out = DMatrix::zeros(n, n);
    for (j, col) in rows.into_iter().enumerate() {
        for (k, v) in col?.into_iter().enumerate() {
            let i = j + k;
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

fn no_closed_form(act: Activation) -> Error {
    Error::Validation(format!(
        "{} has no closed-form dual; use the Monte-Carlo oracle",
        act.name()
    ))
}

/// `E[σ(u)σ(u)ᵀ]` for `u ~ N(0, Σ)`.
///
/// Σ is checked entrywise: variances below `-1e-8` (relative) and
/// correlations beyond `1 + 1e-9` are rejected.
pub fn dual_activation(act: Activation, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    act.validate()?;
    if !act.has_closed_form() {
        return Err(no_closed_form(act));
    }
    pairwise_map(sigma, |a, b, c| pair_moment(act, a, b, c).unwrap())
}

/// `E[σ̇(u)σ̇(u)ᵀ]` for `u ~ N(0, Σ)`; callers apply any `σ_w²` scaling.
pub fn dual_activation_derivative(act: Activation, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    act.validate()?;
    if !act.has_closed_form() {
        return Err(no_closed_form(act));
    }
    pairwise_map(sigma, |a, b, c| pair_moment_derivative(act, a, b, c).unwrap())
}

const MC_BLOCK: usize = 1 << 15;

/// Monte-Carlo estimates of the value and derivative duals for several
/// activations, all computed from one shared set of draws.
///
/// Draws are produced in fixed-size blocks, each from its own ChaCha stream,
/// and reduced in block order, so the result depends only on `seed`.
pub fn mc_dual_oracle_many(
    acts: &[Activation],
    sigma: &DMatrix<f64>,
    samples: usize,
    seed: u64,
) -> Result<Vec<(DMatrix<f64>, DMatrix<f64>)>> {
    if samples == 0 {
        return Err(Error::Validation("Monte-Carlo oracle needs at least one sample".into()));
    }
    let n = sigma.nrows();
    let (chol, _) = cholesky_with_jitter(sigma, 1e-10)?;
    let l = chol.l();
    // Jitter must not turn an exactly degenerate coordinate into noise around a kink.
    let degenerate: Vec<bool> = (0..n).map(|i| sigma[(i, i)] <= 0.0).collect();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|j| (j..n).map(move |i| (i, j))).collect();
    let np = pairs.len();
    let na = acts.len();
    let blocks = samples.div_ceil(MC_BLOCK);

    let partial: Vec<Vec<f64>> = (0..blocks)
        .into_par_iter()
        .map(|blk| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(blk as u64);
            let count = MC_BLOCK.min(samples - blk * MC_BLOCK);
            let mut acc = vec![0.0; 2 * na * np];
            let mut z = vec![0.0; n];
            let mut u = vec![0.0; n];
            let mut val = vec![0.0; n];
            let mut der = vec![0.0; n];
            for _ in 0..count {
                for zi in z.iter_mut() {
                    *zi = rng.sample(StandardNormal);
                }
                for i in 0..n {
                    let mut s = 0.0;
                    for k in 0..=i {
                        s += l[(i, k)] * z[k];
                    }
                    u[i] = if degenerate[i] { 0.0 } else { s };
                }
                for (ai, act) in acts.iter().enumerate() {
                    for i in 0..n {
                        val[i] = act.eval(u[i]);
                        der[i] = act.deriv(u[i]);
                    }
                    let base = 2 * ai * np;
                    for (p, &(i, j)) in pairs.iter().enumerate() {
                        acc[base + p] += val[i] * val[j];
                        acc[base + np + p] += der[i] * der[j];
                    }
                }
            }
            acc
        })
        .collect();

    let mut total = vec![0.0; 2 * na * np];
    for blk in &partial {
        for (t, x) in total.iter_mut().zip(blk) {
            *t += x;
        }
    }
    let inv = 1.0 / samples as f64;
    Ok((0..na)
        .map(|ai| {
            let mut v = DMatrix::zeros(n, n);
            let mut d = DMatrix::zeros(n, n);
            for (p, &(i, j)) in pairs.iter().enumerate() {
                let x = total[2 * ai * np + p] * inv;
                let y = total[2 * ai * np + np + p] * inv;
                v[(i, j)] = x;
                v[(j, i)] = x;
                d[(i, j)] = y;
                d[(j, i)] = y;
            }
            (v, d)
        })
        .collect())
}

/// Monte-Carlo estimate of `E[σ(u)σ(u)ᵀ]` (or the derivative version) with
/// `u ~ N(0, Σ)` drawn through a jittered Cholesky factor.
pub fn mc_dual_oracle(
    act: Activation,
    sigma: &DMatrix<f64>,
    samples: usize,
    seed: u64,
    derivative: bool,
) -> Result<DMatrix<f64>> {
    let (v, d) = mc_dual_oracle_many(&[act], sigma, samples, seed)?
        .pop()
        .expect("one activation requested");
    Ok(if derivative { d } else { v })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::min_eigenvalue;
    use proptest::prelude::*;

    fn m2(a: f64, c: f64, b: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[a, c, c, b])
    }

    #[test]
    fn relu_perfectly_correlated() {
        let out = dual_activation(Activation::Relu, &m2(1.0, 1.0, 1.0)).unwrap();
        assert!((out.add_scalar(-0.5)).abs().max() < 1e-15);
        let d = dual_activation_derivative(Activation::Relu, &m2(1.0, 1.0, 1.0)).unwrap();
        assert!((d.add_scalar(-0.5)).abs().max() < 1e-15);
    }

    #[test]
    fn relu_independent() {
        let out = dual_activation(Activation::Relu, &m2(1.0, 0.0, 1.0)).unwrap();
        assert!((out[(0, 1)] - 1.0 / (2.0 * PI)).abs() < 1e-15);
        assert!((out[(0, 0)] - 0.5).abs() < 1e-15);
        let d = dual_activation_derivative(Activation::Relu, &m2(1.0, 0.0, 1.0)).unwrap();
        assert!((d[(0, 1)] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn identity_dual_is_input() {
        let s = m2(2.0, 1.0, 2.0);
        assert_eq!(dual_activation(Activation::Identity, &s).unwrap(), s);
        assert_eq!(
            dual_activation_derivative(Activation::Identity, &s).unwrap(),
            DMatrix::from_element(2, 2, 1.0)
        );
    }

    #[test]
    fn relu_mc_off_diagonal() {
        let mc = mc_dual_oracle(Activation::Relu, &m2(1.0, 0.0, 1.0), 10_000_000, 3, false).unwrap();
        assert!((mc[(0, 1)] - 1.0 / (2.0 * PI)).abs() < 1e-3);
    }

    #[test]
    fn identity_mc_recovers_covariance() {
        let s = m2(2.0, 1.0, 2.0);
        let mc = mc_dual_oracle(Activation::Identity, &s, 1_000_000, 11, false).unwrap();
        assert!((mc - &s).abs().max() < 5e-3 * crate::linalg::inf_norm(&s));
    }

    #[test]
    fn zero_samples_rejected() {
        assert!(mc_dual_oracle(Activation::Relu, &m2(1.0, 0.0, 1.0), 0, 1, false).is_err());
    }

    #[test]
    fn oracle_is_deterministic() {
        let s = m2(1.0, 0.3, 2.0);
        let a = mc_dual_oracle(Activation::Erf, &s, 100_000, 5, true).unwrap();
        let b = mc_dual_oracle(Activation::Erf, &s, 100_000, 5, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_covariances() {
        assert!(matches!(
            dual_activation(Activation::Relu, &m2(1.0, 1.5, 1.0)),
            Err(Error::Numerical(_))
        ));
        assert!(matches!(
            dual_activation(Activation::Relu, &m2(-1.0, 0.0, 1.0)),
            Err(Error::Numerical(_))
        ));
        assert!(dual_activation(Activation::Sigmoid, &m2(1.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn zero_variance_row_conventions() {
        let s = m2(0.0, 0.0, 1.0);
        let leaky = Activation::LeakyRelu(0.2);
        let d = dual_activation_derivative(leaky, &s).unwrap();
        // σ̇(0) = α on the degenerate coordinate.
        assert!((d[(0, 0)] - 0.04).abs() < 1e-15);
        assert!((d[(0, 1)] - 0.2 * 0.6).abs() < 1e-15);
        let r = dual_activation_derivative(Activation::Relu, &s).unwrap();
        assert_eq!(r[(0, 1)], 0.0);
        let e = dual_activation_derivative(Activation::Erf, &s).unwrap();
        assert!((e[(0, 0)] - 4.0 / PI).abs() < 1e-15);
        assert_eq!(dual_activation(Activation::Erf, &s).unwrap()[(0, 1)], 0.0);
    }

    #[test]
    fn degenerate_rows_match_oracle() {
        let s = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 1.0, 0.4, 0.0, 0.4, 2.0]);
        let acts = [Activation::Relu, Activation::LeakyRelu(0.2), Activation::Erf];
        let mc = mc_dual_oracle_many(&acts, &s, 400_000, 9).unwrap();
        for (act, (v, d)) in acts.iter().zip(mc) {
            assert!((dual_activation(*act, &s).unwrap() - v).abs().max() < 1e-2);
            let closed = dual_activation_derivative(*act, &s).unwrap();
            assert!((&closed - &d).abs().max() < 1e-2, "{act:?} {closed} {d}");
        }
    }

    #[test]
    fn parses_names() {
        assert_eq!("relu".parse::<Activation>().unwrap(), Activation::Relu);
        assert_eq!(
            "leaky_relu(0.1)".parse::<Activation>().unwrap(),
            Activation::LeakyRelu(0.1)
        );
        assert!("leaky_relu(1.5)".parse::<Activation>().is_err());
    }

    fn psd(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
        (proptest::collection::vec(-1.0f64..1.0, n * (n + 2)), 0.1f64..3.0).prop_map(
            move |(v, s)| {
                let b = DMatrix::from_vec(n, n + 2, v);
                &b * b.transpose() * (s / (n + 2) as f64)
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn homogeneous_for_piecewise_linear(s in psd(5), c in 0.1f64..10.0) {
            for act in [Activation::Relu, Activation::LeakyRelu(0.2)] {
                let lhs = dual_activation(act, &(&s * c)).unwrap();
                let rhs = dual_activation(act, &s).unwrap() * c;
                prop_assert!((lhs - rhs).abs().max() <= 1e-12 * c.max(1.0));
            }
        }

        #[test]
        fn outputs_are_symmetric_psd(s in psd(6)) {
            for act in [Activation::Relu, Activation::LeakyRelu(0.2), Activation::Erf, Activation::Identity] {
                for out in [dual_activation(act, &s).unwrap(), dual_activation_derivative(act, &s).unwrap()] {
                    prop_assert_eq!(&out, &out.transpose());
                    prop_assert!(min_eigenvalue(&out) >= -1e-8);
                }
            }
        }

        #[test]
        fn relu_derivative_bounds(s in psd(4)) {
            let d = dual_activation_derivative(Activation::Relu, &s).unwrap();
            prop_assert!(d.iter().all(|&x| (0.0..=1.0).contains(&x)));
            for i in 0..4 {
                prop_assert!((d[(i, i)] - 0.5).abs() < 1e-15);
            }
            let v = dual_activation(Activation::Relu, &s).unwrap();
            for i in 0..4 {
                prop_assert!((v[(i, i)] - s[(i, i)] / 2.0).abs() < 1e-15 * s[(i, i)].max(1.0));
            }
        }
    }
}
