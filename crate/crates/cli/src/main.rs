mod arena;
mod compas;
mod config;
mod output;
mod synth;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use crate::config::{RunConfig, OUT_ENV};

#[derive(Parser, Debug)]
#[command(name = "covrank", version, about = "Stratified pairwise rankings and minimum-size coverage portfolios")]
struct Cli {
    /// TOML config file.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Output root; overrides the environment and the config file.
    #[arg(long, global = true, env = OUT_ENV)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Vote file (JSONL or CSV).
    #[arg(long, global = true)]
    votes: Option<PathBuf>,
    /// Any config key, e.g. `--set select.nu=0.9`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the global ranking and one ranking per eligible stratum.
    Fit(FitArgs),
    /// Build the ranking error matrix and per-stratum diagnostics.
    Coverage(CoverageArgs),
    /// Select minimum-size portfolios at every λ.
    Select(SelectArgs),
    /// Extrapolate ranking portfolios to LLM orderings.
    LlmPortfolio(LlmArgs),
    /// Train the fairness-regularized classifier ensemble and report on it.
    Compas(CompasArgs),
    /// Generate a synthetic vote set with known ground truth.
    Synth(SynthArgs),
    /// Run fit, coverage, select and llm-portfolio, plus compas when configured.
    Report,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Comma-separated stratification schemes.
    #[arg(long, value_delimiter = ',')]
    schemes: Vec<String>,
    #[arg(long)]
    min_votes: Option<usize>,
    #[arg(long)]
    tie_weight: Option<f64>,
}

#[derive(Args, Debug)]
struct CoverageArgs {
    #[arg(long)]
    stream: bool,
    #[arg(long)]
    csv: bool,
}

#[derive(Args, Debug)]
struct SelectArgs {
    #[arg(long)]
    nu: Option<f64>,
    /// Comma-separated λ values.
    #[arg(long, value_delimiter = ',')]
    lambdas: Vec<f64>,
    /// Comma-separated methods: greedy, lp, exact, phase2.
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
}

#[derive(Args, Debug)]
struct LlmArgs {
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    eval_lambda: Option<f64>,
    #[arg(long)]
    ranking_lambda: Option<f64>,
}

#[derive(Args, Debug)]
struct CompasArgs {
    /// Tabular CSV.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    n_votes: Option<usize>,
    /// Mixture spec file (JSON or TOML).
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    tabular_rows: Option<usize>,
}

fn quoted(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn list<T: ToString>(items: &[T], quote: bool) -> String {
    let parts: Vec<String> = items.iter().map(|x| if quote { quoted(&x.to_string()) } else { x.to_string() }).collect();
    format!("[{}]", parts.join(", "))
}

impl Cli {
    /// Folds every flag into `key=value` overrides applied after `--set`.
    fn overrides(&self) -> Vec<String> {
        let mut o = self.set.clone();
        let path = |p: &PathBuf| quoted(&p.to_string_lossy());
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        if let Some(t) = self.threads {
            o.push(format!("threads={t}"));
        }
        if let Some(v) = &self.votes {
            o.push(format!("input.votes={}", path(v)));
        }
        match &self.command {
            Command::Fit(a) => {
                if !a.schemes.is_empty() {
                    o.push(format!("fit.schemes={}", list(&a.schemes, true)));
                }
                if let Some(m) = a.min_votes {
                    o.push(format!("fit.min_votes={m}"));
                }
                if let Some(t) = a.tie_weight {
                    o.push(format!("fit.tie_weight={t:?}"));
                }
            }
            Command::Coverage(a) => {
                if a.stream {
                    o.push("coverage.stream=true".into());
                }
                if a.csv {
                    o.push("coverage.csv=true".into());
                }
            }
            Command::Select(a) => {
                if let Some(nu) = a.nu {
                    o.push(format!("select.nu={nu:?}"));
                }
                if !a.lambdas.is_empty() {
                    let l: Vec<String> = a.lambdas.iter().map(|x| format!("{x:?}")).collect();
                    o.push(format!("coverage.lambdas={}", list(&l, false)));
                }
                if !a.methods.is_empty() {
                    o.push(format!("select.methods={}", list(&a.methods, true)));
                }
            }
            Command::LlmPortfolio(a) => {
                if let Some(k) = a.k {
                    o.push(format!("llm.k={k}"));
                }
                if let Some(l) = a.eval_lambda {
                    o.push(format!("llm.eval_lambda={l:?}"));
                }
                if let Some(l) = a.ranking_lambda {
                    o.push(format!("llm.ranking_lambda={l:?}"));
                }
            }
            Command::Compas(a) => {
                if let Some(d) = &a.data {
                    o.push(format!("compas.data={}", path(d)));
                }
            }
            Command::Synth(a) => {
                if let Some(p) = &a.preset {
                    o.push(format!("synth.preset={}", quoted(p)));
                }
                if let Some(n) = a.n_votes {
                    o.push(format!("synth.n_votes={n}"));
                }
                if let Some(s) = &a.spec {
                    o.push(format!("synth.spec={}", path(s)));
                }
                if let Some(n) = a.tabular_rows {
                    o.push(format!("synth.tabular_rows={n}"));
                }
            }
            Command::Report => {}
        }
        o
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides(), cli.out.clone())?;
    if cfg.threads > 0 {
        // fails only if a pool already exists, which is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    match &cli.command {
        Command::Fit(_) => arena::cmd_fit(&cfg),
        Command::Coverage(_) => arena::cmd_coverage(&cfg),
        Command::Select(_) => arena::cmd_select(&cfg),
        Command::LlmPortfolio(_) => arena::cmd_llm_portfolio(&cfg),
        Command::Compas(_) => compas::cmd_compas(&cfg),
        Command::Synth(_) => synth::cmd_synth(&cfg),
        Command::Report => cmd_report(&cfg),
    }
}

fn cmd_report(cfg: &RunConfig) -> Result<()> {
    arena::cmd_fit(cfg)?;
    arena::cmd_coverage(cfg)?;
    arena::cmd_select(cfg)?;
    arena::cmd_llm_portfolio(cfg)?;
    if cfg.compas.data.is_some() {
        compas::cmd_compas(cfg)?;
    }
    output::write_json(&cfg.out.join("manifest.json"), cfg)?;
    Ok(())
}

/// 2 validation, 3 infeasible, 4 I/O, 1 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<covrank::Error>() {
            return match e {
                covrank::Error::Infeasible { .. } => 3,
                covrank::Error::Io(_) => 4,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 4;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
