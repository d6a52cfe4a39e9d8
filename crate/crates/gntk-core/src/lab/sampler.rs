//! Monte-Carlo estimates of the output covariance of randomly initialized
//! finite networks.
//!
//! Given the input `G` of a layer, every output row of a dense layer is an
//! independent Gaussian vector over nodes with covariance
//! `A (σ_w² GᵀG / fan_in + σ_b²) Aᵀ`, and every output row of an attention
//! layer is Gaussian once the head scores are fixed. [`mc_output_covariance`]
//! samples layer outputs from these conditionals instead of drawing full
//! weight matrices, which has the same distribution at `O(width · n²)` cost
//! per layer, and averages the conditional covariance of the last layer
//! rather than its samples.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gat::Placement;
use crate::graph::AdjacencyOperator;
use crate::lab::net::{forward, init_network, next_input, NetFamily, NetSpec};
use crate::linalg::psd_sqrt;

fn sample_rows(rng: &mut ChaCha8Rng, rows: usize, cov: &DMatrix<f64>) -> DMatrix<f64> {
    let n = cov.nrows();
    let root = psd_sqrt(cov);
    let z = DMatrix::from_fn(rows, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    z * root
}

fn attention_matrix(
    adj: &DMatrix<f64>,
    scores: &[f64],
    sigma1: crate::activation::Activation,
    placement: Placement,
) -> DMatrix<f64> {
    let n = scores.len();
    match placement {
        Placement::Inside => DMatrix::from_fn(n, n, |s, i| sigma1.eval(adj[(s, i)] * (scores[s] + scores[i]))),
        Placement::HadamardFirst => {
            let act: Vec<f64> = scores.iter().map(|&v| sigma1.eval(v)).collect();
            DMatrix::from_fn(n, n, |s, i| adj[(s, i)] * (act[s] + act[i]))
        }
    }
}

/// Covariance of the next layer's output rows given its input `g`.
fn conditional_covariance(
    spec: &NetSpec,
    layer: usize,
    a: &AdjacencyOperator,
    adj: Option<&DMatrix<f64>>,
    g: &DMatrix<f64>,
    rng: &mut ChaCha8Rng,
) -> DMatrix<f64> {
    let fan_in = g.nrows();
    let sw = spec.hp.sigma_w2.sqrt();
    let w = if layer == 1 && !spec.hp.normalize_input_by_d0 {
        sw
    } else {
        sw / (fan_in as f64).sqrt()
    };
    let b2 = spec.sigma_b() * spec.sigma_b();
    let values = g.tr_mul(g).map(|v| v * w * w + b2);
    match spec.family {
        NetFamily::Fcn => values,
        NetFamily::Gnn | NetFamily::SkipGnn => a.conjugate(&values),
        NetFamily::Gat { .. } if layer == 1 => values,
        NetFamily::Gat { heads, sigma1, placement } => {
            let adj = adj.expect("dense adjacency for attention");
            let sc = spec.hp.sigma_c2.sqrt() / (fan_in as f64).sqrt();
            let score_cov = g.tr_mul(g) * (sc * sc);
            let scores = sample_rows(rng, heads, &score_cov);
            let n = g.ncols();
            let mut cov = DMatrix::zeros(n, n);
            for h in 0..heads {
                let row: Vec<f64> = scores.row(h).iter().copied().collect();
                let p = attention_matrix(adj, &row, sigma1, placement);
                cov += p.tr_mul(&(&values * &p));
            }
            cov / heads as f64
        }
    }
}

fn check(spec: &NetSpec, a: &AdjacencyOperator, x: &DMatrix<f64>, draws: usize) -> Result<()> {
    spec.validate()?;
    if draws == 0 {
        return Err(Error::Validation("need at least one draw".into()));
    }
    if spec.family != NetFamily::Fcn && a.n() != x.ncols() {
        return Err(Error::Validation(format!(
            "adjacency has {} nodes but features have {} columns",
            a.n(),
            x.ncols()
        )));
    }
    Ok(())
}

/// `E[f fᵀ]` for one output coordinate `f` of a network with `depth` layers
/// whose hidden layers all have `width` units, estimated from `draws`
/// independent initializations. Attention networks use the head count of `spec`.
pub fn mc_output_covariance(
    spec: &NetSpec,
    a: &AdjacencyOperator,
    x: &DMatrix<f64>,
    width: usize,
    depth: usize,
    draws: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    check(spec, a, x, draws)?;
    if depth == 0 || width == 0 {
        return Err(Error::Validation("depth and width must be positive".into()));
    }
    if spec.family == NetFamily::SkipGnn && depth < 2 {
        return Err(Error::Validation(
            "skip-concatenate networks need at least two layers".into(),
        ));
    }
    let adj = spec.is_attention().then(|| a.to_dense());
    let n = x.ncols();
    let parts: Vec<DMatrix<f64>> = (0..draws)
        .into_par_iter()
        .map(|d| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(d as u64);
            let mut g = x.clone();
            for layer in 1..depth {
                let cov = conditional_covariance(spec, layer, a, adj.as_ref(), &g, &mut rng);
                let f = sample_rows(&mut rng, width, &cov);
                g = next_input(spec, &f);
            }
            conditional_covariance(spec, depth, a, adj.as_ref(), &g, &mut rng)
        })
        .collect();
    let mut total = DMatrix::zeros(n, n);
    for p in &parts {
        total += p;
    }
    Ok(total / draws as f64)
}

/// The same estimate computed by drawing full networks and running [`forward`].
/// Costly; intended as an oracle at small widths.
pub fn mc_output_covariance_direct(
    spec: &NetSpec,
    a: &AdjacencyOperator,
    x: &DMatrix<f64>,
    widths: &[usize],
    draws: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    check(spec, a, x, draws)?;
    let n = x.ncols();
    let outs: Vec<Result<DMatrix<f64>>> = (0..draws)
        .into_par_iter()
        .map(|d| {
            let net = init_network(spec, widths, seed.wrapping_mul(1_000_003).wrapping_add(d as u64))?;
            let f = forward(&net, a, x)?;
            let row = f.row(0).transpose();
            Ok(&row * row.transpose())
        })
        .collect();
    let mut total = DMatrix::zeros(n, n);
    for o in outs {
        total += o?;
    }
    Ok(total / draws as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::Activation;
    use crate::dataset::HyperParams;
    use crate::gat::{gat_gp, GatSpec};
    use crate::graph::{build_adjacency, AdjacencyMode, Graph};
    use crate::kernel::{base_kernel, compute_gp, Architecture, ModelSpec};
    use crate::linalg::rel_frobenius;

    fn setup() -> (AdjacencyOperator, AdjacencyOperator, DMatrix<f64>) {
        let g = Graph::new(6, vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 3)]).unwrap();
        let x = DMatrix::from_fn(3, 6, |i, j| ((i * 6 + j) as f64 * 0.9).cos());
        (
            build_adjacency(&g, AdjacencyMode::Kipf),
            build_adjacency(&g, AdjacencyMode::SelfLoops),
            x,
        )
    }

    fn hp() -> HyperParams {
        HyperParams {
            sigma_w2: 1.5,
            sigma_b2: 0.1,
            sigma_c2: 1.0,
            normalize_input_by_d0: true,
        }
    }

    #[test]
    fn single_layer_is_exact() {
        let (a, _, x) = setup();
        let spec = ModelSpec::new(Architecture::Gnn, 1, Activation::Relu).with_hp(hp());
        let mc = mc_output_covariance(&NetSpec::from_model(&spec), &a, &x, 10, 1, 3, 0).unwrap();
        let expect = a.conjugate(&base_kernel(&x, &hp()).unwrap());
        assert!((mc - expect).abs().max() < 1e-12);
    }

    #[test]
    fn conditional_sampler_agrees_with_full_networks() {
        let (a, sl, x) = setup();
        let gat = GatSpec {
            hp: hp(),
            ..GatSpec::new(2, Activation::Relu, Activation::Relu)
        };
        let cases = [
            (NetSpec::from_model(&ModelSpec::new(Architecture::Gnn, 3, Activation::Relu).with_hp(hp())), &a),
            (NetSpec::from_model(&ModelSpec::new(Architecture::SkipGnn, 3, Activation::Erf).with_hp(hp())), &a),
            (NetSpec::from_gat(&gat, 3), &sl),
        ];
        for (spec, adj) in cases {
            let depth = if spec.is_attention() { 2 } else { 3 };
            let mut widths = vec![3];
            widths.extend(std::iter::repeat_n(6, depth - 1));
            widths.push(1);
            let cond = mc_output_covariance(&spec, adj, &x, 6, depth, 20_000, 1).unwrap();
            let direct = mc_output_covariance_direct(&spec, adj, &x, &widths, 20_000, 2).unwrap();
            assert!(rel_frobenius(&cond, &direct) < 0.05, "{:?}", spec.family);
        }
    }

    #[test]
    fn wide_networks_approach_the_kernel() {
        let (a, sl, x) = setup();
        let model = ModelSpec::new(Architecture::Gnn, 3, Activation::Relu).with_hp(hp());
        let gp = compute_gp(&model, &a, &x).unwrap();
        let mc = mc_output_covariance(&NetSpec::from_model(&model), &a, &x, 512, 3, 400, 3).unwrap();
        assert!(rel_frobenius(&mc, &gp) < 0.05);

        let gat = GatSpec {
            hp: hp(),
            ..GatSpec::new(2, Activation::Relu, Activation::Relu)
        };
        let gp = gat_gp(&gat, &sl, &x).unwrap();
        let mc = mc_output_covariance(&NetSpec::from_gat(&gat, 512), &sl, &x, 512, 2, 400, 4).unwrap();
        assert!(rel_frobenius(&mc, &gp) < 0.05);
    }

    #[test]
    fn deterministic_for_a_seed() {
        let (a, _, x) = setup();
        let spec = NetSpec::from_model(&ModelSpec::new(Architecture::Fcn, 2, Activation::Erf));
        let p = mc_output_covariance(&spec, &a, &x, 8, 2, 50, 9).unwrap();
        let q = mc_output_covariance(&spec, &a, &x, 8, 2, 50, 9).unwrap();
        assert_eq!(p, q);
        assert!(mc_output_covariance(&spec, &a, &x, 8, 2, 0, 9).is_err());
    }
}
