//! Flat `key = value` settings. A config file is read first and command-line
//! flags override it; anything still unset falls back to [`DEFAULTS`].

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{config_err, CliResult};

pub struct DefaultEntry {
    pub key: &'static str,
    /// `auto` marks a value that depends on other settings; `-` means required.
    pub value: &'static str,
    pub why: &'static str,
}

const fn d(key: &'static str, value: &'static str, why: &'static str) -> DefaultEntry {
    DefaultEntry { key, value, why }
}

pub const DEFAULTS: &[DefaultEntry] = &[
    d("dataset", "-", "bundle directory; required by kernel, fit, simulate and sparsify"),
    d("out", "auto", "kernel: kernel.bin; fit: results/results.csv; simulate: simulate/; sparsify: required; report: <results>/report.csv"),
    d("seed", "0", "fixed seed so reruns are byte-identical"),
    d("threads", "auto", "all available cores"),
    d("model", "gntk", "graph network NTK, the headline kernel"),
    d("arch", "gnn", "finite network trained by simulate: fcn, gnn, skip-gnn or gat"),
    d("depth", "auto", "2 layers for every model except skip-concatenate networks, which use 3 because skips only act from the third layer"),
    d("adjacency", "auto", "kipf for gnn and skip-gnn; self-loops (0-1 adjacency plus identity) for attention models; ignored by fcn"),
    d("activation", "relu", "relu nonlinearity in every hidden layer"),
    d("attention_activation", "relu", "elementwise attention nonlinearity replacing softmax; must vanish at 0 for hadamard-first placement"),
    d("placement", "inside", "attention nonlinearity applied to the masked pair score"),
    d("sigma_w2", "1", "weight variance set to one"),
    d("sigma_c2", "1", "attention-score variance set to one"),
    d("sigma_b2", "auto", "0 for classification, 0.1 for regression"),
    d("normalize_input", "true", "divide the input Gram by the feature dimension"),
    d("gat_bias", "false", "attention layers without bias by default"),
    d("kernel", "-", "GNTKMAT1 kernel file read by fit"),
    d("label", "auto", "model name recorded by fit: taken from the kernel's .json sidecar, else the file stem"),
    d("grid", "0.001:10:25", "ridge grid searched on the validation split between 0.001 and 10, 25 log-spaced points"),
    d("jitter", "1e-10", "first diagonal jitter tried by the Cholesky factorization"),
    d("widths", "10,100,1000", "hidden widths compared by simulate"),
    d("heads", "auto", "attention heads equal to the hidden width"),
    d("optimizer", "gd", "full-batch gradient descent"),
    d("lr", "0.001", "learning rate used in the width study"),
    d("epochs", "100", "training length of the width study"),
    d("loss", "mse", "squared loss, under which wide networks follow kernel regression"),
    d("track_ntk_every", "10", "empirical NTK drift cadence in epochs; 0 disables it"),
    d("keep", "0.5", "fraction of edges kept by the sparsifier"),
    d("binarize", "true", "sparsified edges get weight one, giving a 0-1 adjacency again"),
    d("resistance_epsilon", "0.3", "sketch accuracy for graphs above exact_limit nodes"),
    d("exact_limit", "5000", "largest component solved with a dense pseudoinverse"),
    d("results", "results", "directory of results CSVs read by report"),
];

fn canonical(key: &str) -> String {
    key.trim().trim_start_matches("--").replace('-', "_").to_ascii_lowercase()
}

/// Drops a `#` comment that is not inside double quotes.
fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => quoted = !quoted,
            '#' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

fn default_entry(key: &str) -> Option<&'static DefaultEntry> {
    DEFAULTS.iter().find(|e| e.key == key)
}

/// The defaults table, formatted as a config file.
pub fn explain_defaults() -> String {
    let width = DEFAULTS.iter().map(|e| e.key.len() + e.value.len()).max().unwrap_or(0) + 4;
    let mut s = String::new();
    for e in DEFAULTS {
        let line = format!("{} = {}", e.key, e.value);
        s.push_str(&format!("{line:<width$}# {}\n", e.why));
    }
    s
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    /// Parses `key = value` lines. `#` starts a comment, values may be quoted.
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut s = Settings::default();
        for (i, raw) in text.lines().enumerate() {
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("config line {}: expected key = value", i + 1)))?;
            let key = canonical(k);
            if default_entry(&key).is_none() {
                return Err(config_err(format!("config line {}: unknown key '{}'", i + 1, k.trim())));
            }
            let v = v.trim();
            let v = v
                .strip_prefix('"')
                .and_then(|x| x.strip_suffix('"'))
                .unwrap_or(v);
            s.values.insert(key, v.to_string());
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: Option<String>) {
        if let Some(v) = value {
            self.values.insert(canonical(key), v);
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> CliResult<Option<T>>
    where
        T::Err: Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| config_err(format!("invalid value '{v}' for {key}: {e}"))),
        }
    }

    /// The set value, or the fixed default from [`DEFAULTS`].
    pub fn get_or_default<T: FromStr>(&self, key: &str) -> CliResult<T>
    where
        T::Err: Display,
    {
        if let Some(v) = self.get(key)? {
            return Ok(v);
        }
        let entry = default_entry(key).expect("key listed in DEFAULTS");
        entry
            .value
            .parse()
            .map_err(|_| config_err(format!("{key} has no fixed default and must be given")))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> CliResult<T>
    where
        T::Err: Display,
    {
        self.get(key)?
            .ok_or_else(|| config_err(format!("missing required setting --{}", key.replace('_', "-"))))
    }
}

/// `lo:hi:count` log-spaced, or an explicit comma-separated list.
pub fn parse_grid(text: &str) -> CliResult<Vec<f64>> {
    let bad = || config_err(format!("invalid grid '{text}': expected lo:hi:count or a comma list"));
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() == 3 {
        let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
        let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
        let count: usize = parts[2].trim().parse().map_err(|_| bad())?;
        if count == 0 || !(lo > 0.0) || hi < lo {
            return Err(bad());
        }
        return Ok(gntk_core::predictor::log_grid(lo, hi, count));
    }
    text.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| bad()))
        .collect()
}

pub fn parse_list<T: FromStr>(key: &str, text: &str) -> CliResult<Vec<T>> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| config_err(format!("invalid entry '{}' in {key}", t.trim())))
        })
        .collect()
}
