use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use gntk_core::dataset::{load_bundle, write_bundle, NodeDataset, SplitMask};
use gntk_core::io::{read_kernel, write_kernel};
use gntk_core::kernel::KernelKind;
use gntk_core::lab::{init_network, train, Loss, Optimizer, TrainConfig, TrainingTrace};
use gntk_core::predictor::{grid_search, FitConfig, Metric, Targets};
use gntk_core::sparsify::{effective_resistances_with, sparsify_with, ResistanceOptions};
use gntk_core::{build_adjacency, Error};
use rayon::prelude::*;
use serde_json::{json, Map, Value};

use crate::error::{config_err, CliError, CliResult};
use crate::model::{self, Family, ModelName};
use crate::report::{aggregate, append_row, read_rows, result_files, ResultRow, REPORT_FILE};
use crate::settings::{parse_grid, parse_list, Settings};

fn dataset(settings: &Settings) -> CliResult<(NodeDataset, SplitMask)> {
    let dir: PathBuf = settings.require("dataset")?;
    Ok(load_bundle(dir)?)
}

fn out_path(settings: &Settings, fallback: &str) -> CliResult<PathBuf> {
    Ok(settings.get("out")?.unwrap_or_else(|| PathBuf::from(fallback)))
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| config_err(format!("cannot create {}: {e}", dir.display())))
        }
        _ => Ok(()),
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Computes a closed-form kernel over all nodes of a bundle and writes it as
/// a GNTKMAT1 file plus a `.json` sidecar describing the model.
pub fn kernel(settings: &Settings) -> CliResult<()> {
    let (ds, _) = dataset(settings)?;
    let name: ModelName = settings.get_or_default("model")?;
    let resolved = model::resolve(settings, name.family, ds.task)?;
    let a = build_adjacency(&ds.graph, resolved.adjacency);
    let k = model::compute_kernel(&resolved.model, name.kind, &a, &ds.features)?;
    let out = out_path(settings, "kernel.bin")?;
    ensure_parent(&out)?;
    write_kernel(&out, &k)?;

    let mut spec = Map::new();
    for (key, value) in model::describe(&resolved.model, resolved.adjacency) {
        spec.insert(key.to_string(), Value::String(value));
    }
    let meta = json!({
        "model": name.label(),
        "kind": match name.kind { KernelKind::Gp => "gp", KernelKind::Ntk => "ntk" },
        "dataset": ds.name,
        "n": ds.n(),
        "spec": spec,
    });
    let text = serde_json::to_string_pretty(&meta).expect("json value serializes");
    let side = sidecar(&out);
    fs::write(&side, text + "\n").map_err(|e| config_err(format!("cannot write {}: {e}", side.display())))?;
    println!("{} kernel for {} ({n}x{n}) -> {}", name.label(), ds.name, out.display(), n = ds.n());
    Ok(())
}

fn model_label(settings: &Settings, kernel_path: &Path) -> CliResult<String> {
    if let Some(l) = settings.get::<String>("label")? {
        return Ok(l);
    }
    if let Ok(text) = fs::read_to_string(sidecar(kernel_path)) {
        if let Some(m) = serde_json::from_str::<Value>(&text).ok().and_then(|v| v["model"].as_str().map(String::from)) {
            return Ok(m);
        }
    }
    Ok(kernel_path
        .file_stem()
        .map_or_else(|| "kernel".to_string(), |s| s.to_string_lossy().into_owned()))
}

/// Seconds since the epoch, or `SOURCE_DATE_EPOCH` when set for reproducible output.
fn timestamp() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()))
}

/// Ridge grid search with a precomputed kernel; appends one results row.
pub fn fit(settings: &Settings) -> CliResult<()> {
    let kernel_path: PathBuf = settings.require("kernel")?;
    let (ds, mask) = dataset(settings)?;
    let k = read_kernel(&kernel_path)?;
    if k.nrows() != ds.n() {
        return Err(config_err(format!(
            "kernel {} has {} nodes but dataset {} has {}",
            kernel_path.display(),
            k.nrows(),
            ds.name,
            ds.n()
        )));
    }
    let metric = Metric::for_task(ds.task);
    let config = FitConfig {
        lambda_grid: parse_grid(&settings.get_or_default::<String>("grid")?)?,
        metric,
        jitter: settings.get_or_default("jitter")?,
    };
    let targets = Targets::from_dataset(&ds)?;
    let res = grid_search(&k, &targets, &mask, &config)?;
    let row = ResultRow {
        model: model_label(settings, &kernel_path)?,
        dataset: ds.name.clone(),
        lambda: res.best_lambda,
        val_score: res.val_score,
        test_score: res.test_score,
        metric: Some(metric.name().to_string()),
        timestamp: Some(timestamp()),
    };
    let out = out_path(settings, "results/results.csv")?;
    append_row(&out, &row)?;
    println!(
        "{} on {}: lambda {} val {} {:.4} test {}",
        row.model,
        row.dataset,
        row.lambda,
        metric.name(),
        row.val_score,
        row.test_score.map_or("-".to_string(), |t| format!("{t:.4}"))
    );
    Ok(())
}

/// Trains one finite network per width and writes `trace_w<width>.csv` for each.
pub fn simulate(settings: &Settings) -> CliResult<()> {
    let (ds, mask) = dataset(settings)?;
    let family: Family = settings.get_or_default("arch")?;
    let resolved = model::resolve(settings, family, ds.task)?;
    let a = build_adjacency(&ds.graph, resolved.adjacency);
    let targets = Targets::from_dataset(&ds)?;
    let d_out = ds.num_classes.unwrap_or(1);
    let widths: Vec<usize> = parse_list("widths", &settings.get_or_default::<String>("widths")?)?;
    if widths.is_empty() || widths.contains(&0) {
        return Err(config_err("widths must be positive"));
    }
    let config = TrainConfig {
        optimizer: settings.get_or_default::<Optimizer>("optimizer")?,
        lr: settings.get_or_default("lr")?,
        epochs: settings.get_or_default("epochs")?,
        loss: settings.get_or_default::<Loss>("loss")?,
        track_ntk_every: settings.get_or_default("track_ntk_every")?,
    };
    let heads: Option<usize> = settings.get("heads")?;
    let seed: u64 = settings.get_or_default("seed")?;
    let depth = model::depth(&resolved.model);
    let out = out_path(settings, "simulate")?;
    fs::create_dir_all(&out).map_err(|e| config_err(format!("cannot create {}: {e}", out.display())))?;

    let runs: Vec<(usize, gntk_core::Result<TrainingTrace>)> = widths
        .par_iter()
        .map(|&w| {
            let spec = model::net_spec(&resolved.model, heads.unwrap_or(w));
            let mut layer_widths = vec![ds.feature_dim()];
            layer_widths.extend(std::iter::repeat_n(w, depth - 1));
            layer_widths.push(d_out);
            let run = init_network(&spec, &layer_widths, seed)
                .and_then(|mut net| train(&mut net, &a, &ds.features, &targets, &mask, &config));
            (w, run)
        })
        .collect();

    println!("width  loss  accuracy  weight_drift  ntk_drift");
    let mut failure: Option<CliError> = None;
    for (w, run) in runs {
        let path = out.join(format!("trace_w{w}.csv"));
        let trace = match run {
            Ok(t) => t,
            Err(Error::Diverged { epoch, trace }) => {
                trace.write_csv(&path)?;
                eprintln!("width {w}: diverged at epoch {epoch}; partial trace in {}", path.display());
                failure.get_or_insert(CliError::Core(Error::Diverged { epoch, trace }));
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        trace.write_csv(&path)?;
        let last = trace.last().expect("trace has epoch 0");
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        println!(
            "{w}  {:.6}  {}  {:.6}  {}",
            last.loss,
            opt(last.accuracy),
            last.weight_drift,
            opt(trace.last_ntk_drift())
        );
    }
    failure.map_or(Ok(()), Err)
}

/// Writes a sparsified copy of a bundle and its edge resistances.
pub fn sparsify(settings: &Settings) -> CliResult<()> {
    let (mut ds, mask) = dataset(settings)?;
    let out: PathBuf = settings.require("out")?;
    let keep: f64 = settings.get_or_default("keep")?;
    let seed: u64 = settings.get_or_default("seed")?;
    let binarize: bool = settings.get_or_default("binarize")?;
    let opts = ResistanceOptions {
        exact_limit: settings.get_or_default("exact_limit")?,
        epsilon: settings.get_or_default("resistance_epsilon")?,
        seed,
        ..ResistanceOptions::default()
    };
    let table = effective_resistances_with(&ds.graph, &opts)?;
    let before = ds.graph.num_edges();
    ds.graph = sparsify_with(&ds.graph, &table, keep, seed, binarize)?;
    write_bundle(&out, &ds, &mask)?;
    table.write_tsv(out.join("edges_resistance.tsv"))?;
    println!("{}: kept {} of {before} edges -> {}", ds.name, ds.graph.num_edges(), out.display());
    Ok(())
}

/// Aggregates every results CSV in a directory into per-task tables.
pub fn report(settings: &Settings) -> CliResult<()> {
    let dir: PathBuf = settings.get_or_default("results")?;
    let mut rows = Vec::new();
    for f in result_files(&dir)? {
        rows.extend(read_rows(&f)?);
    }
    if rows.is_empty() {
        return Err(config_err(format!("no results found in {}", dir.display())));
    }
    let report = aggregate(rows);
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let out = out_path(settings, &dir.join(REPORT_FILE).to_string_lossy())?;
    ensure_parent(&out)?;
    report.write_csv(&out)?;
    print!("{}", report.to_text());
    Ok(())
}
