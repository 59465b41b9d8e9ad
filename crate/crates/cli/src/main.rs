mod config;
mod error;
mod manifest;
mod stages;

use clap::{Parser, Subcommand};
use config::RunConfig;
use error::CliError;
use manifest::OutDir;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "umbrella", about = "Umbrella forests, insulated rays and trapping random walks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat key=value config file; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    dim: Option<usize>,
    #[arg(long, global = true)]
    window: Option<i64>,
    #[arg(long, global = true)]
    margin: Option<i64>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    replicas: Option<u64>,
    #[arg(long, global = true)]
    horizon: Option<u32>,
    /// Worker cap; 0 uses every core.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra key=value overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Check parameters and print the resolved constants.
    Validate,
    /// Sample the two heavy-tailed fields.
    Gen,
    /// Build the two umbrella forests from the field dumps.
    Forest,
    /// Censored h and H with tail tables.
    Metrics,
    /// Pruning, leaves and insulation layers.
    Prune,
    /// Exit tables, the patched environment and the exact invariant suite.
    Env,
    /// Trapping walks from the deepest ray start of each forest.
    Walk,
    /// Monte Carlo tail of h over independent windows.
    Tails,
    /// Covariance decay table.
    Mixing,
    /// Brute-force comparisons on every box up to the given side.
    Oracle {
        #[arg(long)]
        max_box: Option<i64>,
    },
    /// Collect every stage output into report.json.
    Report,
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &cli.config {
        cfg.load_file(p)?;
    }
    let flags: [(&str, Option<String>); 10] = [
        ("seed", cli.seed.map(|v| v.to_string())),
        ("dim", cli.dim.map(|v| v.to_string())),
        ("window", cli.window.map(|v| v.to_string())),
        ("margin", cli.margin.map(|v| v.to_string())),
        ("beta", cli.beta.map(|v| v.to_string())),
        ("replicas", cli.replicas.map(|v| v.to_string())),
        ("horizon", cli.horizon.map(|v| v.to_string())),
        ("threads", cli.threads.map(|v| v.to_string())),
        ("out", cli.out.as_ref().map(|v| v.display().to_string())),
        ("max_box", if let Command::Oracle { max_box } = cli.command { max_box.map(|v| v.to_string()) } else { None }),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<stages::Outcome, CliError> {
    let cfg = resolve(cli)?;
    cfg.validate()?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global().map_err(|e| CliError::Config(e.to_string()))?;
    }
    let mut out = OutDir::open(&cfg.out, cfg.hash(), cfg.to_map())?;
    match cli.command {
        Command::Validate => stages::validate(&cfg, &mut out),
        Command::Gen => stages::gen(&cfg, &mut out),
        Command::Forest => stages::forest(&cfg, &mut out),
        Command::Metrics => stages::metrics(&cfg, &mut out),
        Command::Prune => stages::prune(&cfg, &mut out),
        Command::Env => stages::env(&cfg, &mut out),
        Command::Walk => stages::walk(&cfg, &mut out),
        Command::Tails => stages::tails(&cfg, &mut out),
        Command::Mixing => stages::mixing(&cfg, &mut out),
        Command::Oracle { .. } => stages::oracle(&cfg, &mut out),
        Command::Report => stages::report(&cfg, &mut out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(o) => {
            println!("{}", o.summary);
            if o.ok {
                ExitCode::SUCCESS
            } else {
                eprintln!("invariant failure");
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
