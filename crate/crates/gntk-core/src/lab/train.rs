//! Full-batch training of finite networks with drift tracking.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::dataset::{Split, SplitMask};
use crate::error::{Error, Result};
use crate::gat::{gat_ntk, GatSpec};
use crate::graph::AdjacencyOperator;
use crate::kernel::{compute_ntk, Architecture, ModelSpec};
use crate::lab::grad::{empirical_ntk_on, gradient_layers};
use crate::lab::net::{flatten_layers, forward, forward_cached, init_network, FiniteNet, NetFamily, NetSpec};
use crate::predictor::{krr_solve, Targets};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Gd,
    /// β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gd" | "sgd" => Ok(Optimizer::Gd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(Error::Validation(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    /// `½ Σ_{i ∈ train} ‖F_i − y_i‖²` with one-hot targets for classes.
    Mse,
    /// Mean softmax cross-entropy over train nodes.
    CrossEntropy,
}

impl std::str::FromStr for Loss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(Loss::Mse),
            "cross_entropy" | "cross-entropy" | "ce" => Ok(Loss::CrossEntropy),
            other => Err(Error::Validation(format!("unknown loss '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub lr: f64,
    pub epochs: usize,
    pub loss: Loss,
    /// Empirical-NTK drift is recorded every this many epochs (and at the
    /// last one); zero disables it.
    pub track_ntk_every: usize,
}

impl TrainConfig {
    pub fn new(optimizer: Optimizer, lr: f64, epochs: usize, loss: Loss) -> Self {
        TrainConfig {
            optimizer,
            lr,
            epochs,
            loss,
            track_ntk_every: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Train accuracy for classification targets.
    pub accuracy: Option<f64>,
    pub weight_drift: f64,
    pub ntk_drift: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainingTrace {
    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    /// Most recent recorded NTK drift.
    pub fn last_ntk_drift(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.ntk_drift)
    }

    /// `epoch,loss,accuracy,weight_drift,ntk_drift`; missing values are left empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,accuracy,weight_drift,ntk_drift\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.epoch,
                r.loss,
                opt(r.accuracy),
                r.weight_drift,
                opt(r.ntk_drift)
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Loss and its gradient with respect to the network output.
struct Objective {
    train: Vec<usize>,
    loss: Loss,
    /// `d_L × n` regression or one-hot targets (mse).
    targets: DMatrix<f64>,
    /// Class of each train node, aligned with `train`.
    classes: Option<Vec<usize>>,
    /// Subtracted from the network output before the loss.
    offset: Option<DMatrix<f64>>,
}

impl Objective {
    fn new(targets: &Targets, mask: &SplitMask, d_out: usize, loss: Loss) -> Result<Self> {
        let n = targets.len();
        if mask.len() != n {
            return Err(Error::Validation(format!("mask has {} entries for {n} nodes", mask.len())));
        }
        let train = mask.indices(Split::Train);
        if train.is_empty() {
            return Err(Error::Validation("train split is empty".into()));
        }
        let mut y = DMatrix::zeros(d_out, n);
        let classes = match targets {
            Targets::Classes { labels, num_classes } => {
                if *num_classes != d_out {
                    return Err(Error::Validation(format!(
                        "network has {d_out} outputs for {num_classes} classes"
                    )));
                }
                let mut cls = Vec::with_capacity(train.len());
                for &i in &train {
                    let c = labels[i]
                        .ok_or_else(|| Error::Validation(format!("train node {i} is unlabeled")))?;
                    y[(c, i)] = 1.0;
                    cls.push(c);
                }
                Some(cls)
            }
            Targets::Values(v) => {
                if loss == Loss::CrossEntropy {
                    return Err(Error::Validation("cross-entropy needs class labels".into()));
                }
                if d_out != 1 {
                    return Err(Error::Validation(format!(
                        "regression needs one output, network has {d_out}"
                    )));
                }
                for &i in &train {
                    if v[i].is_nan() {
                        return Err(Error::Validation(format!("train node {i} is unlabeled")));
                    }
                    y[(0, i)] = v[i];
                }
                None
            }
        };
        Ok(Objective {
            train,
            loss,
            targets: y,
            classes,
            offset: None,
        })
    }

    fn evaluate(&self, raw: &DMatrix<f64>) -> (f64, DMatrix<f64>, Option<f64>) {
        let f = match &self.offset {
            Some(o) => raw - o,
            None => raw.clone(),
        };
        let mut grad = DMatrix::zeros(f.nrows(), f.ncols());
        let mut loss = 0.0;
        match self.loss {
            Loss::Mse => {
                for &i in &self.train {
                    let r = f.column(i) - self.targets.column(i);
                    loss += 0.5 * r.norm_squared();
                    grad.set_column(i, &r);
                }
            }
            Loss::CrossEntropy => {
                let cls = self.classes.as_ref().expect("classes for cross-entropy");
                let m = self.train.len() as f64;
                for (&i, &c) in self.train.iter().zip(cls) {
                    let col = f.column(i);
                    let top = col.max();
                    let exp = col.map(|v| (v - top).exp());
                    let z = exp.sum();
                    loss += (z.ln() + top - col[c]) / m;
                    let mut g = exp / z;
                    g[c] -= 1.0;
                    grad.set_column(i, &(g / m));
                }
            }
        }
        let accuracy = self.classes.as_ref().map(|cls| {
            let hits = self
                .train
                .iter()
                .zip(cls)
                .filter(|&(&i, &c)| f.column(i).argmax().0 == c)
                .count();
            hits as f64 / self.train.len() as f64
        });
        (loss, grad, accuracy)
    }
}

fn weight_drift(net: &FiniteNet, init: &[DMatrix<f64>], init_norm: f64) -> f64 {
    let moved: f64 = net
        .layers
        .iter()
        .zip(init)
        .map(|(l, w0)| (&l.weight - w0).norm())
        .sum();
    moved / init_norm
}

struct Adam {
    m: DVector<f64>,
    v: DVector<f64>,
    t: i32,
}

impl Adam {
    fn step(&mut self, params: &mut DVector<f64>, grad: &DVector<f64>, lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for k in 0..params.len() {
            let g = grad[k];
            self.m[k] = B1 * self.m[k] + (1.0 - B1) * g;
            self.v[k] = B2 * self.v[k] + (1.0 - B2) * g * g;
            params[k] -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + EPS);
        }
    }
}

fn run_training(
    net: &mut FiniteNet,
    a: &AdjacencyOperator,
    x: &DMatrix<f64>,
    objective: &Objective,
    config: &TrainConfig,
) -> Result<TrainingTrace> {
    if !(config.lr > 0.0 && config.lr.is_finite()) {
        return Err(Error::Validation(format!("learning rate must be positive, got {}", config.lr)));
    }
    let init_weights: Vec<DMatrix<f64>> = net.layers.iter().map(|l| l.weight.clone()).collect();
    let init_norm: f64 = net.weight_norms().iter().sum();
    let track = config.track_ntk_every > 0;
    let ntk0 = if track {
        Some(empirical_ntk_on(net, a, x, &objective.train)?)
    } else {
        None
    };
    let mut adam = Adam {
        m: DVector::zeros(net.num_parameters()),
        v: DVector::zeros(net.num_parameters()),
        t: 0,
    };
    let mut trace = TrainingTrace::default();
    for epoch in 0..=config.epochs {
        let cache = forward_cached(net, a, x)?;
        let (loss, seed, accuracy) = objective.evaluate(cache.output());
        let ntk_due = track && (epoch % config.track_ntk_every == 0 || epoch == config.epochs);
        let ntk_drift = match (&ntk0, ntk_due, loss.is_finite()) {
            (Some(k0), true, true) => {
                let k = empirical_ntk_on(net, a, x, &objective.train)?;
                Some((k - k0).norm() / k0.norm())
            }
            _ => None,
        };
        trace.records.push(TraceRecord {
            epoch,
            loss,
            accuracy,
            weight_drift: weight_drift(net, &init_weights, init_norm),
            ntk_drift,
        });
        if !loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                trace: Box::new(trace),
            });
        }
        if epoch == config.epochs {
            break;
        }
        let grad = flatten_layers(&gradient_layers(net, a, &cache, seed));
        let mut params = net.parameters();
        match config.optimizer {
            Optimizer::Gd => params.axpy(-config.lr, &grad, 1.0),
            Optimizer::Adam => adam.step(&mut params, &grad, config.lr),
        }
        net.set_parameters(&params)?;
    }
    Ok(trace)
}

/// Full-batch training on the train split. Epoch 0 records the initial state;
/// epoch `t` records the state after `t` updates.
pub fn train(
    net: &mut FiniteNet,
    a: &AdjacencyOperator,
    x: &DMatrix<f64>,
    targets: &Targets,
    mask: &SplitMask,
    config: &TrainConfig,
) -> Result<TrainingTrace> {
    let objective = Objective::new(targets, mask, net.output_dim(), config.loss)?;
    run_training(net, a, x, &objective, config)
}

/// Test-node predictions of a trained wide network next to kernel regression
/// with the matching closed-form NTK.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelComparison {
    pub test_nodes: Vec<usize>,
    /// `d_L × |test|` outputs of the trained network minus its initial outputs.
    pub network: DMatrix<f64>,
    /// Kernel regression at zero ridge, same layout.
    pub kernel: DMatrix<f64>,
    pub max_deviation: f64,
    pub final_loss: f64,
}

/// Closed-form NTK of the architecture a [`NetSpec`] instantiates.
pub fn matching_ntk(spec: &NetSpec, depth: usize, a: &AdjacencyOperator, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    match spec.family {
        NetFamily::Gat { sigma1, placement, .. } => {
            let g = GatSpec {
                depth,
                hp: spec.hp,
                sigma1,
                sigma2: spec.activation,
                placement,
                bias: spec.bias,
            };
            gat_ntk(&g, a, x)
        }
        fam => {
            let arch = match fam {
                NetFamily::Fcn => Architecture::Fcn,
                NetFamily::Gnn => Architecture::Gnn,
                _ => Architecture::SkipGnn,
            };
            let mut hp = spec.hp;
            if !spec.bias {
                hp.sigma_b2 = 0.0;
            }
            compute_ntk(&ModelSpec::new(arch, depth, spec.activation).with_hp(hp), a, x)
        }
    }
}

/// Trains a network of the given widths with gradient descent on the
/// centered output `F(θ_t) − F(θ_0)` under the mse loss, then compares its
/// test predictions with `K_{test,train} K_{train,train}⁻¹ Y`.
#[allow(clippy::too_many_arguments)]
pub fn kernel_vs_network_prediction(
    spec: &NetSpec,
    widths: &[usize],
    seed: u64,
    a: &AdjacencyOperator,
    x: &DMatrix<f64>,
    targets: &Targets,
    mask: &SplitMask,
    lr: f64,
    epochs: usize,
) -> Result<KernelComparison> {
    let mut net = init_network(spec, widths, seed)?;
    let mut objective = Objective::new(targets, mask, net.output_dim(), Loss::Mse)?;
    let f0 = forward(&net, a, x)?;
    objective.offset = Some(f0.clone());
    let config = TrainConfig {
        optimizer: Optimizer::Gd,
        lr,
        epochs,
        loss: Loss::Mse,
        track_ntk_every: 0,
    };
    let trace = run_training(&mut net, a, x, &objective, &config)?;
    let test_nodes = mask.indices(Split::Test);
    let centered = forward(&net, a, x)? - f0;
    let network = centered.select_columns(&test_nodes);

    let k = matching_ntk(spec, net.depth(), a, x)?;
    let y_train = objective.targets.select_columns(&objective.train).transpose();
    let (fit, _) = krr_solve(&k, &objective.train, &y_train, 0.0, 1e-10, false)?;
    let kernel = fit.transpose().select_columns(&test_nodes);
    let max_deviation = (&network - &kernel).abs().max();
    Ok(KernelComparison {
        test_nodes,
        network,
        kernel,
        max_deviation,
        final_loss: trace.last().map_or(f64::NAN, |r| r.loss),
    })
}
