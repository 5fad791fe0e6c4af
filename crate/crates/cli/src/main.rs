use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use btw_cli::{cmd_bound, cmd_extinction_stats, cmd_simulate, cmd_verify, CliError, RunConfig, SeedRange};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "btwlab", version, about = "Stochastic sign fast diffusion: simulation and extinction checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Inclusive range such as `0..15`.
    #[arg(long, global = true)]
    seeds: Option<String>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    horizon: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one path and write series.csv and summary.json.
    Simulate,
    /// Extinction times over a seed range, written to stats.csv.
    ExtinctionStats,
    /// Oracles plus every monitor; exit status 1 if any fails.
    Verify,
    /// Bound constants and a 100-point table of B(t).
    Bound,
}

fn load(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(s) = &cli.seeds {
        cfg.seeds = Some(SeedRange::parse(s)?);
    }
    if let Some(w) = cli.workers {
        cfg.workers = Some(w);
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(h) = cli.horizon {
        cfg.horizon = h;
    }
    Ok(cfg)
}

fn print_json(v: &impl serde::Serialize) {
    match serde_json::to_string_pretty(v) {
        Ok(s) => emit(&format!("{s}\n")),
        Err(e) => eprintln!("could not render output: {e}"),
    }
}

/// Writes to stdout, tolerating a closed pipe.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn run(cli: &Cli) -> Result<bool, CliError> {
    let cfg = load(cli)?;
    match cli.command {
        Command::Simulate => {
            let s = cmd_simulate(&cfg)?;
            print_json(&serde_json::json!({
                "extinction_time": s.extinction_time,
                "censored": s.censored,
                "min_value": s.min_value,
                "out": cfg.out,
            }));
            Ok(true)
        }
        Command::ExtinctionStats => {
            let seeds = cfg.seeds.unwrap_or(SeedRange {
                start: cfg.seed,
                end: cfg.seed,
            });
            let workers = cfg
                .workers
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let s = cmd_extinction_stats(&cfg, seeds, workers)?;
            print_json(&s);
            Ok(true)
        }
        Command::Verify => {
            let r = cmd_verify(&cfg)?;
            print_json(&r);
            Ok(r.pass)
        }
        Command::Bound => {
            let b = cmd_bound(&cfg)?;
            let p = &b.params;
            let q = if b.q_is_infinite {
                "inf (alpha taken as its limit 0)".to_string()
            } else {
                p.q.to_string()
            };
            let mut text = format!(
                "d = {}\np = {}\np_tilde = {}\nq = {q}\nalpha = {}\nC_w = {}\nC1_hat = {}\nt0_hat = {}\n",
                p.d, p.p, p.p_tilde, p.alpha, p.c_w, p.c1_hat, p.t0_hat
            );
            text += &format!(
                "x0_norm_p = {}\neps_star = {}\ng_floor = {}\nL_star = {}\n",
                b.x0_norm_p, b.eps_star, b.g_floor, b.l_star
            );
            text += &b.table_csv();
            emit(&text);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
