//! Node datasets, split masks and the on-disk bundle format.
//!
//! A bundle is a directory holding `meta.json`, `edges.tsv`, `features.csv`
//! (one row per node), `labels.csv` and `split.csv`. `edges.tsv` may carry
//! a third column with the edge weight; it is written only for weighted graphs.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Regression,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Classification => "classification",
            Task::Regression => "regression",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
    None,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::None => "none",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "none" | "" => Ok(Split::None),
            other => Err(Error::Format(format!("unknown split tag '{other}'"))),
        }
    }
}

/// Assignment of every node to exactly one of train, val, test or none.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMask {
    pub assignment: Vec<Split>,
}

impl SplitMask {
    pub fn new(assignment: Vec<Split>) -> Self {
        SplitMask { assignment }
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    /// Node indices carrying `which`, in increasing order.
    pub fn indices(&self, which: Split) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == which)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, which: Split) -> usize {
        self.assignment.iter().filter(|&&s| s == which).count()
    }
}

/// Kernel hyperparameters shared by every architecture.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams {
    pub sigma_w2: f64,
    pub sigma_b2: f64,
    /// Attention-score variance, read only by the attention kernels.
    pub sigma_c2: f64,
    /// Divide the input Gram by the feature dimension.
    pub normalize_input_by_d0: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            sigma_w2: 1.0,
            sigma_b2: 0.0,
            sigma_c2: 1.0,
            normalize_input_by_d0: true,
        }
    }
}

impl HyperParams {
    /// Defaults for a task: unit weight variances, bias variance 0 for
    /// classification and 0.1 for regression.
    pub fn for_task(task: Task) -> Self {
        HyperParams {
            sigma_b2: match task {
                Task::Classification => 0.0,
                Task::Regression => 0.1,
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_w2 > 0.0 && self.sigma_w2.is_finite()) {
            return Err(Error::Validation(format!(
                "sigma_w2 must be positive, got {}",
                self.sigma_w2
            )));
        }
        if !(self.sigma_b2 >= 0.0 && self.sigma_b2.is_finite()) {
            return Err(Error::Validation(format!(
                "sigma_b2 must be non-negative, got {}",
                self.sigma_b2
            )));
        }
        if !(self.sigma_c2 >= 0.0 && self.sigma_c2.is_finite()) {
            return Err(Error::Validation(format!(
                "sigma_c2 must be non-negative, got {}",
                self.sigma_c2
            )));
        }
        Ok(())
    }
}

/// A single graph with node features and labels.
#[derive(Debug, Clone)]
pub struct NodeDataset {
    pub name: String,
    pub graph: Graph,
    /// `d₀ × n`, one column per node.
    pub features: DMatrix<f64>,
    /// Class index (as a float) or regression target; `-1` or NaN marks unlabeled nodes.
    pub labels: Vec<f64>,
    pub task: Task,
    pub num_classes: Option<usize>,
}

impl NodeDataset {
    pub fn n(&self) -> usize {
        self.graph.n()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_labeled(&self, i: usize) -> bool {
        let y = self.labels[i];
        match self.task {
            Task::Classification => y.is_finite() && y >= 0.0,
            Task::Regression => y.is_finite(),
        }
    }

    /// Integer class labels, `None` for unlabeled nodes.
    pub fn class_labels(&self) -> Vec<Option<usize>> {
        (0..self.n())
            .map(|i| self.is_labeled(i).then(|| self.labels[i] as usize))
            .collect()
    }

    /// Checks shapes and label encoding.
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.features.ncols() != n {
            return Err(Error::Validation(format!(
                "features have {} columns for {} nodes",
                self.features.ncols(),
                n
            )));
        }
        if self.labels.len() != n {
            return Err(Error::Validation(format!(
                "{} labels for {} nodes",
                self.labels.len(),
                n
            )));
        }
        if self.task == Task::Classification {
            let c = self.num_classes.ok_or_else(|| {
                Error::Validation("classification dataset without num_classes".into())
            })?;
            for (i, &y) in self.labels.iter().enumerate() {
                if self.is_labeled(i) && (y.fract() != 0.0 || y as usize >= c) {
                    return Err(Error::Validation(format!(
                        "label {y} at node {i} is not a class index below {c}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Checks that `mask` partitions the nodes, has a nonempty train set and
/// only marks labeled nodes as train or val.
pub fn validate_split(mask: &SplitMask, dataset: &NodeDataset) -> Result<()> {
    if mask.len() != dataset.n() {
        return Err(Error::Validation(format!(
            "split has {} entries for {} nodes",
            mask.len(),
            dataset.n()
        )));
    }
    if mask.count(Split::Train) == 0 {
        return Err(Error::Validation("train split is empty".into()));
    }
    for (i, s) in mask.assignment.iter().enumerate() {
        if matches!(s, Split::Train | Split::Val) && !dataset.is_labeled(i) {
            return Err(Error::Validation(format!(
                "node {i} is in the {} split but has no label",
                s.name()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    name: String,
    n: usize,
    d: usize,
    task: Task,
    num_classes: Option<usize>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_f64(tok: &str, file: &str, line: usize) -> Result<f64> {
    let t = tok.trim();
    if t.eq_ignore_ascii_case("nan") {
        return Ok(f64::NAN);
    }
    t.parse()
        .map_err(|_| Error::Format(format!("{file}:{line}: cannot parse '{t}' as a number")))
}

/// Reads and validates a bundle directory.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<(NodeDataset, SplitMask)> {
    let dir = dir.as_ref();
    let meta: Meta = serde_json::from_str(&read(&dir.join("meta.json"))?)
        .map_err(|e| Error::Format(format!("meta.json: {e}")))?;
    let n = meta.n;

    let mut raw = Vec::new();
    for (ln, l) in lines(&read(&dir.join("edges.tsv"))?) {
        let mut it = l.split_whitespace();
        let (a, b) = match (it.next(), it.next()) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Format(format!("edges.tsv:{ln}: expected two columns"))),
        };
        let parse = |t: &str| {
            t.parse::<usize>()
                .map_err(|_| Error::Format(format!("edges.tsv:{ln}: bad node index '{t}'")))
        };
        let w = match it.next() {
            Some(t) => parse_f64(t, "edges.tsv", ln)?,
            None => 1.0,
        };
        raw.push((parse(a)?, parse(b)?, w));
    }
    let graph = Graph::from_raw_weighted_edges(n, &raw)?;

    let feat_text = read(&dir.join("features.csv"))?;
    let mut features = DMatrix::zeros(meta.d, n);
    let mut rows = 0;
    for (ln, l) in lines(&feat_text) {
        if rows >= n {
            return Err(Error::Format(format!("features.csv has more than {n} rows")));
        }
        let mut cols = 0;
        for tok in l.split(',') {
            if cols >= meta.d {
                return Err(Error::Format(format!(
                    "features.csv:{ln}: more than {} columns",
                    meta.d
                )));
            }
            features[(cols, rows)] = parse_f64(tok, "features.csv", ln)?;
            cols += 1;
        }
        if cols != meta.d {
            return Err(Error::Format(format!(
                "features.csv:{ln}: {cols} columns, expected {}",
                meta.d
            )));
        }
        rows += 1;
    }
    if rows != n {
        return Err(Error::Format(format!("features.csv has {rows} rows, expected {n}")));
    }

    let labels: Vec<f64> = lines(&read(&dir.join("labels.csv"))?)
        .map(|(ln, l)| parse_f64(l, "labels.csv", ln))
        .collect::<Result<_>>()?;
    if labels.len() != n {
        return Err(Error::Format(format!(
            "labels.csv has {} rows, expected {n}",
            labels.len()
        )));
    }

    let split_text = read(&dir.join("split.csv"))?;
    let assignment: Vec<Split> = split_text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if assignment.len() != n {
        return Err(Error::Format(format!(
            "split.csv has {} rows, expected {n}",
            assignment.len()
        )));
    }

    let ds = NodeDataset {
        name: meta.name,
        graph,
        features,
        labels,
        task: meta.task,
        num_classes: meta.num_classes,
    };
    ds.validate()?;
    let mask = SplitMask::new(assignment);
    validate_split(&mask, &ds)?;
    Ok((ds, mask))
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Writes `dataset` and `mask` as a bundle, creating `dir` if needed.
/// Floats are written in shortest round-trip form.
pub fn write_bundle(dir: impl AsRef<Path>, dataset: &NodeDataset, mask: &SplitMask) -> Result<()> {
    use std::fmt::Write as _;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = Meta {
        name: dataset.name.clone(),
        n: dataset.n(),
        d: dataset.feature_dim(),
        task: dataset.task,
        num_classes: dataset.num_classes,
    };
    let meta_json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Format(format!("meta.json: {e}")))?;
    write_file(&dir.join("meta.json"), &meta_json)?;

    let mut s = String::new();
    let weighted = dataset.graph.weights().iter().any(|&w| w != 1.0);
    for (&(u, v), &w) in dataset.graph.edges().iter().zip(dataset.graph.weights()) {
        if weighted {
            let _ = writeln!(s, "{u}\t{v}\t{w}");
        } else {
            let _ = writeln!(s, "{u}\t{v}");
        }
    }
    write_file(&dir.join("edges.tsv"), &s)?;

    s.clear();
    for j in 0..dataset.n() {
        for i in 0..dataset.feature_dim() {
            if i > 0 {
                s.push(',');
            }
            let _ = write!(s, "{}", dataset.features[(i, j)]);
        }
        s.push('\n');
    }
    write_file(&dir.join("features.csv"), &s)?;

    s.clear();
    for &y in &dataset.labels {
        match dataset.task {
            Task::Classification if y.is_finite() && y >= 0.0 => {
                let _ = writeln!(s, "{}", y as i64);
            }
            Task::Classification => s.push_str("-1\n"),
            Task::Regression => {
                let _ = writeln!(s, "{y}");
            }
        }
    }
    write_file(&dir.join("labels.csv"), &s)?;

    s.clear();
    for sp in &mask.assignment {
        s.push_str(sp.name());
        s.push('\n');
    }
    write_file(&dir.join("split.csv"), &s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy(n: usize) -> NodeDataset {
        let edges = (1..n).map(|i| (i - 1, i)).collect();
        NodeDataset {
            name: "toy".into(),
            graph: Graph::new(n, edges).unwrap(),
            features: DMatrix::from_fn(3, n, |i, j| (i as f64 + 1.0) / (j as f64 + 3.0)),
            labels: (0..n).map(|i| (i % 2) as f64).collect(),
            task: Task::Classification,
            num_classes: Some(2),
        }
    }

    #[test]
    fn split_examples() {
        let ds = toy(2);
        assert!(validate_split(&SplitMask::new(vec![Split::Train, Split::Test]), &ds).is_ok());
        assert!(matches!(
            validate_split(&SplitMask::new(vec![Split::None, Split::None]), &ds),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn unlabeled_train_node_is_rejected() {
        let mut ds = toy(3);
        ds.labels[1] = -1.0;
        let m = SplitMask::new(vec![Split::Train, Split::Train, Split::Test]);
        assert!(validate_split(&m, &ds).is_err());
        let m = SplitMask::new(vec![Split::Train, Split::Test, Split::Test]);
        assert!(validate_split(&m, &ds).is_ok());
    }

    #[test]
    fn out_of_range_edge_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy(10);
        let mask = SplitMask::new(vec![Split::Train; 10]);
        write_bundle(dir.path(), &ds, &mask).unwrap();
        fs::write(dir.path().join("edges.tsv"), "0\t1\n3\t99\n").unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn weighted_edges_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = toy(4);
        ds.graph = Graph::with_weights(4, vec![(0, 1), (1, 2), (2, 3)], vec![0.5, 2.0, 1.0]).unwrap();
        let mask = SplitMask::new(vec![Split::Train; 4]);
        write_bundle(dir.path(), &ds, &mask).unwrap();
        let text = fs::read_to_string(dir.path().join("edges.tsv")).unwrap();
        assert_eq!(text, "0\t1\t0.5\n1\t2\t2\n2\t3\t1\n");
        assert_eq!(load_bundle(dir.path()).unwrap().0.graph, ds.graph);
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::Io { .. })));
    }

    #[test]
    fn empty_train_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy(4);
        write_bundle(dir.path(), &ds, &SplitMask::new(vec![Split::Test; 4])).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn task_defaults() {
        assert_eq!(HyperParams::for_task(Task::Classification).sigma_b2, 0.0);
        assert_eq!(HyperParams::for_task(Task::Regression).sigma_b2, 0.1);
        assert!(HyperParams { sigma_w2: 0.0, ..Default::default() }.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn bundle_round_trip(
            n in 2usize..30,
            seed_feats in proptest::collection::vec(-1e6f64..1e6, 60),
            regression in any::<bool>(),
        ) {
            let mut ds = toy(n);
            let d = ds.feature_dim();
            for j in 0..n {
                for i in 0..d {
                    ds.features[(i, j)] = seed_feats[(i * 7 + j) % seed_feats.len()] / 3.7;
                }
            }
            if regression {
                ds.task = Task::Regression;
                ds.num_classes = None;
                ds.labels = (0..n).map(|i| if i == n - 1 { f64::NAN } else { i as f64 / 7.0 }).collect();
            } else {
                ds.labels[n - 1] = -1.0;
            }
            let mut assign = vec![Split::Train; n];
            assign[n - 1] = Split::None;
            let mask = SplitMask::new(assign);
            let dir = tempfile::tempdir().unwrap();
            write_bundle(dir.path(), &ds, &mask).unwrap();
            let (back, back_mask) = load_bundle(dir.path()).unwrap();
            prop_assert_eq!(back_mask, mask);
            prop_assert_eq!(back.graph, ds.graph);
            prop_assert_eq!(back.task, ds.task);
            prop_assert_eq!(back.num_classes, ds.num_classes);
            prop_assert!((back.features - &ds.features).abs().max() <= 1e-15 * ds.features.abs().max());
            for (a, b) in back.labels.iter().zip(&ds.labels) {
                prop_assert!(a == b || (a.is_nan() && b.is_nan()));
            }
        }
    }
}
