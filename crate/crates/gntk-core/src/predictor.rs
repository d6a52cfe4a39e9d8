//! Kernel ridge regression on a transductive split, ridge grid search and
//! task metrics.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::dataset::{NodeDataset, Split, SplitMask, Task};
use crate::error::{Error, Result};
use crate::linalg::cholesky_with_jitter;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    R2,
}

impl Metric {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Classification => Metric::Accuracy,
            Task::Regression => Metric::R2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::R2 => "r2",
        }
    }
}

/// `count` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count <= 1 {
        return vec![lo; count];
    }
    let (a, b) = (lo.ln(), hi.ln());
    let mut grid: Vec<f64> = (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect();
    grid[0] = lo;
    grid[count - 1] = hi;
    grid
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub lambda_grid: Vec<f64>,
    pub metric: Metric,
    /// First diagonal jitter tried by the factorization.
    pub jitter: f64,
}

impl FitConfig {
    pub fn new(metric: Metric) -> Self {
        FitConfig {
            lambda_grid: log_grid(1e-3, 10.0, 25),
            metric,
            jitter: 1e-10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_grid.is_empty() {
            return Err(Error::Validation("lambda grid is empty".into()));
        }
        if self.lambda_grid.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::Validation("lambda grid values must be positive".into()));
        }
        if self.lambda_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Validation("lambda grid must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// Regression targets or class labels for every node.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes {
        labels: Vec<Option<usize>>,
        num_classes: usize,
    },
    Values(Vec<f64>),
}

impl Targets {
    pub fn from_dataset(ds: &NodeDataset) -> Result<Self> {
        match ds.task {
            Task::Classification => Ok(Targets::Classes {
                labels: ds.class_labels(),
                num_classes: ds
                    .num_classes
                    .ok_or_else(|| Error::Validation("missing num_classes".into()))?,
            }),
            Task::Regression => Ok(Targets::Values(ds.labels.clone())),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn columns(&self) -> usize {
        match self {
            Targets::Classes { num_classes, .. } => *num_classes,
            Targets::Values(_) => 1,
        }
    }

    /// Target row of node `i`: one-hot for classes.
    fn row(&self, i: usize) -> Result<Vec<f64>> {
        match self {
            Targets::Classes { labels, num_classes } => {
                let c = labels[i].ok_or_else(|| {
                    Error::Validation(format!("node {i} is used for fitting but unlabeled"))
                })?;
                let mut r = vec![0.0; *num_classes];
                r[c] = 1.0;
                Ok(r)
            }
            Targets::Values(v) => {
                if v[i].is_nan() {
                    return Err(Error::Validation(format!(
                        "node {i} is used for fitting but unlabeled"
                    )));
                }
                Ok(vec![v[i]])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `n × c` scores: one column per class, or a single regression column.
    pub values: DMatrix<f64>,
    /// Row-wise argmax for classification, lowest index on ties.
    pub hard_labels: Option<Vec<usize>>,
    /// Posterior variance per node, when requested.
    pub variance: Option<Vec<f64>>,
}

fn argmax_rows(v: &DMatrix<f64>) -> Vec<usize> {
    (0..v.nrows())
        .map(|i| {
            let mut best = 0;
            for c in 1..v.ncols() {
                if v[(i, c)] > v[(i, best)] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn check_kernel(k: &DMatrix<f64>, n: usize) -> Result<()> {
    if k.shape() != (n, n) {
        return Err(Error::Validation(format!(
            "kernel is {}x{} but there are {n} nodes",
            k.nrows(),
            k.ncols()
        )));
    }
    Ok(())
}

/// `K_{·,train} (K_{train,train} + λI)⁻¹ Y` for a dense target block `Y`,
/// plus the posterior variance of every node when asked.
pub fn krr_solve(
    k: &DMatrix<f64>,
    train: &[usize],
    y: &DMatrix<f64>,
    lambda: f64,
    jitter: f64,
    with_variance: bool,
) -> Result<(DMatrix<f64>, Option<Vec<f64>>)> {
    let n = k.nrows();
    let m = train.len();
    let mut ktt = k.select_rows(train).select_columns(train);
    for i in 0..m {
        ktt[(i, i)] += lambda;
    }
    let (chol, _) = cholesky_with_jitter(&ktt, jitter)?;
    let alpha = chol.solve(y);
    let k_all_train = k.select_columns(train);
    let values = &k_all_train * alpha;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("kernel regression produced non-finite values".into()));
    }
    let variance = with_variance.then(|| {
        let solved = chol.solve(&k_all_train.transpose());
        (0..n)
            .map(|i| k[(i, i)] - k_all_train.row(i).dot(&solved.column(i).transpose()))
            .collect()
    });
    Ok((values, variance))
}

/// Fits `K_{·,train} (K_{train,train} + λI)⁻¹ Y_train` for every node.
///
/// `λ = 0` is allowed and means plain interpolation with jitter only.
pub fn krr_predict(
    k: &DMatrix<f64>,
    targets: &Targets,
    mask: &SplitMask,
    lambda: f64,
    jitter: f64,
    with_variance: bool,
) -> Result<Prediction> {
    let n = targets.len();
    check_kernel(k, n)?;
    if mask.len() != n {
        return Err(Error::Validation(format!(
            "mask has {} entries for {n} nodes",
            mask.len()
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Validation(format!("ridge must be non-negative, got {lambda}")));
    }
    let train = mask.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Validation("train split is empty".into()));
    }
    let m = train.len();
    let c = targets.columns();
    let mut y = DMatrix::zeros(m, c);
    for (r, &i) in train.iter().enumerate() {
        for (col, v) in targets.row(i)?.into_iter().enumerate() {
            y[(r, col)] = v;
        }
    }
    let (values, variance) = krr_solve(k, &train, &y, lambda, jitter, with_variance)?;
    let hard_labels = matches!(targets, Targets::Classes { .. }).then(|| argmax_rows(&values));
    Ok(Prediction {
        values,
        hard_labels,
        variance,
    })
}

/// Accuracy or R² over `nodes`. R² is measured against the mean of those nodes.
pub fn evaluate(pred: &Prediction, targets: &Targets, nodes: &[usize], metric: Metric) -> Result<f64> {
    if nodes.is_empty() {
        return Err(Error::Validation("cannot evaluate on an empty node set".into()));
    }
    match metric {
        Metric::Accuracy => {
            let (Targets::Classes { labels, .. }, Some(hard)) = (targets, &pred.hard_labels) else {
                return Err(Error::Validation("accuracy needs class labels".into()));
            };
            let mut hits = 0usize;
            for &i in nodes {
                let y = labels[i]
                    .ok_or_else(|| Error::Validation(format!("node {i} has no label")))?;
                hits += usize::from(hard[i] == y);
            }
            Ok(hits as f64 / nodes.len() as f64)
        }
        Metric::R2 => {
            let Targets::Values(y) = targets else {
                return Err(Error::Validation("R² needs real-valued targets".into()));
            };
            if let Some(&i) = nodes.iter().find(|&&i| y[i].is_nan()) {
                return Err(Error::Validation(format!("node {i} has no target")));
            }
            let mean = nodes.iter().map(|&i| y[i]).sum::<f64>() / nodes.len() as f64;
            let ss_tot: f64 = nodes.iter().map(|&i| (y[i] - mean).powi(2)).sum();
            let ss_res: f64 = nodes
                .iter()
                .map(|&i| (y[i] - pred.values[(i, 0)]).powi(2))
                .sum();
            if ss_tot == 0.0 {
                if ss_res == 0.0 {
                    return Ok(1.0);
                }
                return Err(Error::Degenerate(
                    "targets are constant on the evaluated nodes, R² is -inf".into(),
                ));
            }
            Ok(1.0 - ss_res / ss_tot)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub best_lambda: f64,
    pub val_score: f64,
    /// `None` when the split has no test nodes.
    pub test_score: Option<f64>,
    /// Validation score for every grid value, in grid order.
    pub scores: Vec<(f64, f64)>,
}

/// Picks the ridge with the best validation score (smallest ridge on ties) and
/// reports the test score at that ridge.
pub fn grid_search(
    k: &DMatrix<f64>,
    targets: &Targets,
    mask: &SplitMask,
    config: &FitConfig,
) -> Result<GridResult> {
    config.validate()?;
    let val = mask.indices(Split::Val);
    if val.is_empty() {
        return Err(Error::Validation("validation split is empty".into()));
    }
    let scores: Vec<f64> = config
        .lambda_grid
        .par_iter()
        .map(|&l| {
            let p = krr_predict(k, targets, mask, l, config.jitter, false)?;
            evaluate(&p, targets, &val, config.metric)
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    let best_lambda = config.lambda_grid[best];
    let test = mask.indices(Split::Test);
    let test_score = if test.is_empty() {
        None
    } else {
        let p = krr_predict(k, targets, mask, best_lambda, config.jitter, false)?;
        Some(evaluate(&p, targets, &test, config.metric)?)
    };
    Ok(GridResult {
        best_lambda,
        val_score: scores[best],
        test_score,
        scores: config.lambda_grid.iter().copied().zip(scores).collect(),
    })
}
