//! Argument parsing and output formatting.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::{self, CliError, CliResult};
use crate::config::ExperimentConfig;
use rcs_core::selection::ORACLE_CAP;

#[derive(Debug, Parser)]
#[command(name = "rcs", version, about = "Robustness-aware coreset selection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset file.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write a run directory.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Run directory (defaults to `output`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one selection round and print the coreset.
    Select {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// rcs or random.
        #[arg(long)]
        method: Option<String>,
        /// Subset fraction.
        #[arg(long)]
        k: Option<String>,
        /// CSV destination; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare greedy selection with exhaustive search.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Batches to select (defaults to the subset fraction's budget).
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long, default_value_t = ORACLE_CAP)]
        cap: u128,
    },
    /// Recompute coreset diagnostics of finished runs.
    Analyze {
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
    },
    /// Linear probe of a checkpoint's embeddings.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Labeled dataset file; the configured data is used when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn resolve(common: &Common, mut extra: Vec<(String, String)>, seed_key: &str) -> CliResult<ExperimentConfig> {
    let mut overrides = Vec::new();
    for a in &common.set {
        let (k, v) = a
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set `{a}` is not of the form KEY=VALUE")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(s) = common.seed {
        overrides.push((seed_key.to_string(), s.to_string()));
    }
    overrides.append(&mut extra);
    commands::load_config(common.config.as_deref(), &overrides)
}

fn write_out(out: &mut dyn Write, text: &str) -> CliResult<()> {
    out.write_all(text.as_bytes()).map_err(|e| CliError::Runtime(format!("stdout: {e}")))
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> CliResult<()> {
    match cmd {
        Command::Gen { common, out: path } => {
            // For `gen` the seed flag picks the data seed.
            let cfg = resolve(&common, Vec::new(), "data.seed")?;
            let d = commands::cmd_gen(&cfg, &path)?;
            write_out(
                out,
                &format!("wrote {} points of dimension {} ({} classes) to {}\n", d.len(), d.dim(), d.classes(), path.display()),
            )
        }
        Command::Pretrain { common, out: dir } => {
            let cfg = resolve(&common, Vec::new(), "seed")?;
            let dir = dir.unwrap_or_else(|| cfg.output.clone());
            let s = commands::cmd_pretrain(&cfg, &dir)?;
            write_out(
                out,
                &format!(
                    "run {}: {} epochs, {} selection rounds, final RD {}\n\
                     gradient evaluations {} (predicted {}), full-set cost {}, speedup {:.3}\n\
                     wall time {:.3}s, selection {:.3}s\n",
                    s.dir.display(),
                    s.epochs,
                    s.rounds,
                    s.final_rd,
                    s.report.actual,
                    s.report.predicted,
                    s.report.full_set,
                    s.report.eval_speedup,
                    s.report.wall_time.as_secs_f64(),
                    s.report.selection_time.as_secs_f64()
                ),
            )
        }
        Command::Select {
            common,
            checkpoint,
            method,
            k,
            out: path,
        } => {
            let mut extra = Vec::new();
            if let Some(m) = method {
                extra.push(("selection.method".to_string(), m));
            }
            if let Some(k) = k {
                extra.push(("selection.fraction".to_string(), k));
            }
            let cfg = resolve(&common, extra, "seed")?;
            let r = commands::cmd_select(&cfg, checkpoint.as_deref())?;
            match path {
                Some(p) => {
                    r.save_csv(&p)?;
                    let ids: Vec<String> = r.selected.iter().map(|b| b.to_string()).collect();
                    write_out(out, &format!("selected batches: {}\ngradient evaluations: {}\n", ids.join(" "), r.grad_evals))
                }
                None => {
                    let mut buf = Vec::new();
                    r.write_csv(&mut buf)?;
                    write_out(out, &String::from_utf8_lossy(&buf))
                }
            }
        }
        Command::Oracle {
            common,
            checkpoint,
            budget,
            cap,
        } => {
            let cfg = resolve(&common, Vec::new(), "seed")?;
            let s = commands::cmd_oracle(&cfg, checkpoint.as_deref(), budget, cap)?;
            let r = &s.report;
            let ids = |v: &[usize]| v.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(" ");
            write_out(
                out,
                &format!(
                    "budget {} of {} batches, {} subsets enumerated\n\
                     greedy {{{}}} G = {}\noracle {{{}}} G* = {}\nG(empty) = {}\n\
                     sigma = {}, gamma* = {}, kN = {}\n\
                     lhs G(greedy) = {}\nrhs G* - (G* + kN*sigma)*exp(-gamma*) = {}\n\
                     ratio {} normalized {}{}\n{}\n",
                    s.budget,
                    s.greedy.num_batches,
                    s.oracle.evaluations,
                    ids(&s.greedy.selected),
                    r.g_greedy,
                    ids(&s.oracle.best),
                    r.g_star,
                    r.g_empty,
                    r.sigma,
                    r.gamma_star,
                    r.kn,
                    r.lhs,
                    r.rhs,
                    r.ratio,
                    r.normalized_ratio,
                    if r.weak { " (weak bound)" } else { "" },
                    if r.passed() { "PASS" } else { "FAIL" }
                ),
            )?;
            if r.passed() {
                Ok(())
            } else {
                Err(CliError::Runtime("guarantee check failed".into()))
            }
        }
        Command::Analyze { runs } => {
            write_out(out, "run,rounds,mean_mmd,logged_rd,recomputed_rd,rd_abs_diff\n")?;
            for dir in runs {
                let a = commands::cmd_analyze(&dir)?;
                write_out(
                    out,
                    &format!(
                        "{},{},{},{},{},{}\n",
                        dir.display(),
                        a.rounds.len(),
                        a.mean_mmd(),
                        a.logged_rd,
                        a.recomputed_rd,
                        (a.logged_rd - a.recomputed_rd).abs()
                    ),
                )?;
            }
            Ok(())
        }
        Command::Probe {
            common,
            checkpoint,
            data,
        } => {
            let cfg = resolve(&common, Vec::new(), "seed")?;
            let r = commands::cmd_probe(&cfg, &checkpoint, data.as_deref())?;
            write_out(
                out,
                &format!(
                    "train_accuracy,test_accuracy,iterations,final_loss\n{},{},{},{}\n",
                    r.train_accuracy, r.test_accuracy, r.iterations, r.final_loss
                ),
            )
        }
    }
}

/// Runs the command line `args` (program name first) and returns the exit
/// code: 0 on success, 1 on usage errors, 2 on runtime errors.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let kind = if e.exit_code() == 1 { "usage error" } else { "error" };
            let _ = writeln!(err, "{kind}: {}", e.message());
            e.exit_code()
        }
    }
}
