use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod error;
mod model;
mod report;
mod settings;

use error::{config_err, CliResult};
use settings::Settings;

/// Infinite-width graph kernels, kernel regression, sparsification and
/// finite-width simulations.
#[derive(Debug, Parser)]
#[command(name = "gntk", version)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,

    /// Dataset bundle directory.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Flat `key = value` file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print every default with its rationale and exit.
    #[arg(long, global = true)]
    explain_defaults: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute a closed-form kernel over all nodes of a bundle.
    Kernel(KernelArgs),
    /// Ridge grid search with a precomputed kernel.
    Fit(FitArgs),
    /// Train finite networks of several widths and record drift traces.
    Simulate(SimulateArgs),
    /// Effective-resistance edge sparsification.
    Sparsify(SparsifyArgs),
    /// Aggregate results CSVs into tables.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[arg(long)]
    depth: Option<String>,
    /// identity, raw01, self-loops, laplacian or kipf.
    #[arg(long)]
    adjacency: Option<String>,
    /// relu, leaky_relu, erf, identity, ...
    #[arg(long)]
    activation: Option<String>,
    /// Attention nonlinearity of attention models.
    #[arg(long)]
    attention_activation: Option<String>,
    /// inside or hadamard_first.
    #[arg(long)]
    placement: Option<String>,
    #[arg(long)]
    sigma_w2: Option<String>,
    #[arg(long)]
    sigma_b2: Option<String>,
    #[arg(long)]
    sigma_c2: Option<String>,
    /// Divide the input Gram by the feature dimension (true/false).
    #[arg(long)]
    normalize_input: Option<String>,
    /// Bias terms in attention layers (true/false).
    #[arg(long)]
    gat_bias: Option<String>,
}

impl ModelArgs {
    fn pairs(self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("depth", self.depth),
            ("adjacency", self.adjacency),
            ("activation", self.activation),
            ("attention_activation", self.attention_activation),
            ("placement", self.placement),
            ("sigma_w2", self.sigma_w2),
            ("sigma_b2", self.sigma_b2),
            ("sigma_c2", self.sigma_c2),
            ("normalize_input", self.normalize_input),
            ("gat_bias", self.gat_bias),
        ]
    }
}

#[derive(Debug, Args)]
struct KernelArgs {
    /// ntk, nngp, gntk, gnngp, skip-gntk, skip-gnngp, gat-ntk or gat-gp.
    #[arg(long)]
    model: Option<String>,
    #[command(flatten)]
    spec: ModelArgs,
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Kernel file written by `kernel`.
    #[arg(long)]
    kernel: Option<String>,
    /// Ridge grid, `lo:hi:count` (log-spaced) or a comma list.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    jitter: Option<String>,
    /// Model name recorded in the results row.
    #[arg(long)]
    label: Option<String>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// fcn, gnn, skip-gnn or gat.
    #[arg(long)]
    arch: Option<String>,
    #[command(flatten)]
    spec: ModelArgs,
    /// Comma-separated hidden widths.
    #[arg(long)]
    widths: Option<String>,
    /// Attention heads (default: the hidden width).
    #[arg(long)]
    heads: Option<String>,
    /// gd or adam.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    /// mse or cross_entropy.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    track_ntk_every: Option<String>,
}

#[derive(Debug, Args)]
struct SparsifyArgs {
    /// Fraction of edges kept, in (0, 1].
    #[arg(long)]
    keep: Option<String>,
    /// Unit weights on kept edges (true/false).
    #[arg(long)]
    binarize: Option<String>,
    #[arg(long)]
    resistance_epsilon: Option<String>,
    #[arg(long)]
    exact_limit: Option<String>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Directory of results CSVs.
    #[arg(long)]
    results: Option<String>,
}

type Handler = fn(&Settings) -> CliResult<()>;

fn settings_for(cli: Cli) -> CliResult<(Option<Handler>, Settings, Option<usize>)> {
    let mut s = match &cli.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    let path = |p: Option<PathBuf>| p.map(|p| p.to_string_lossy().into_owned());
    s.set("dataset", path(cli.dataset));
    s.set("out", path(cli.out));
    s.set("seed", cli.seed.map(|v| v.to_string()));
    s.set("threads", cli.threads.map(|v| v.to_string()));
    let (handler, pairs): (Option<Handler>, Vec<(&str, Option<String>)>) = match cli.command {
        None => (None, vec![]),
        Some(Command::Kernel(a)) => {
            let mut p = vec![("model", a.model)];
            p.extend(a.spec.pairs());
            (Some(commands::kernel), p)
        }
        Some(Command::Fit(a)) => (
            Some(commands::fit),
            vec![("kernel", a.kernel), ("grid", a.grid), ("jitter", a.jitter), ("label", a.label)],
        ),
        Some(Command::Simulate(a)) => {
            let mut p = vec![("arch", a.arch)];
            p.extend(a.spec.pairs());
            p.extend([
                ("widths", a.widths),
                ("heads", a.heads),
                ("optimizer", a.optimizer),
                ("lr", a.lr),
                ("epochs", a.epochs),
                ("loss", a.loss),
                ("track_ntk_every", a.track_ntk_every),
            ]);
            (Some(commands::simulate), p)
        }
        Some(Command::Sparsify(a)) => (
            Some(commands::sparsify),
            vec![
                ("keep", a.keep),
                ("binarize", a.binarize),
                ("resistance_epsilon", a.resistance_epsilon),
                ("exact_limit", a.exact_limit),
            ],
        ),
        Some(Command::Report(a)) => (Some(commands::report), vec![("results", a.results)]),
    };
    for (k, v) in pairs {
        s.set(k, v);
    }
    let threads = s.get::<usize>("threads")?;
    Ok((handler, s, threads))
}

fn run(cli: Cli) -> CliResult<()> {
    let explain = cli.explain_defaults;
    let (handler, settings, threads) = settings_for(cli)?;
    if explain {
        print!("{}", settings::explain_defaults());
        return Ok(());
    }
    let handler = handler.ok_or_else(|| config_err("no command given; see --help"))?;
    if let Some(t) = threads {
        if t == 0 {
            return Err(config_err("threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| config_err(format!("cannot start thread pool: {e}")))?;
    }
    handler(&settings)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
