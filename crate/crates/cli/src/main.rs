use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rhsim_core::attack::{check_feasibility, Feasibility};
use rhsim_core::runner::{
    parse_configs, records_csv, records_json, records_table, replicate_table1, replicate_table2, run_batch,
    run_expressive_config, sweep_configs, RunRecord, ScenarioConfig, EXPRESSIVE_FIXTURE,
};

#[derive(Parser)]
#[command(name = "rhsim", version, about = "Deterministic rowhammer attack simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Override the seed of every scenario in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write the report here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Worker threads for batches; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    /// One JSON object per line.
    Records,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Run every scenario of a config file.
    Run { config: PathBuf },
    /// Check the technique combination without simulating.
    Feasibility { config: PathBuf },
    /// Replicate the attack table from the bundled scenarios.
    Table1,
    /// Replicate the countermeasure table from the bundled scenarios.
    Table2,
    /// Multi-round UID attack; the bundled scenario when no config is given.
    Expressive { config: Option<PathBuf> },
    /// Run a config once per value of a numeric parameter.
    Sweep {
        config: PathBuf,
        /// Dotted key, e.g. `attack.budget`.
        #[arg(long)]
        param: String,
        /// `start:end:step`, end inclusive.
        #[arg(long)]
        range: String,
    },
}

/// Bad input; reported with exit code 2.
struct Usage(anyhow::Error);

impl<E: Into<anyhow::Error>> From<E> for Usage {
    fn from(e: E) -> Self {
        Usage(e.into())
    }
}

fn read(path: &Path) -> Result<String, Usage> {
    Ok(fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)
}

fn load(path: &Path, seed: Option<u64>) -> Result<Vec<ScenarioConfig>, Usage> {
    let text = read(path)?;
    let mut cfgs = parse_configs(&text).with_context(|| format!("parsing {}", path.display()))?;
    reseed(&mut cfgs, seed);
    Ok(cfgs)
}

fn reseed(cfgs: &mut [ScenarioConfig], seed: Option<u64>) {
    if let Some(s) = seed {
        for c in cfgs {
            c.seed = s;
        }
    }
}

fn render(records: &[RunRecord], format: Format) -> Result<String> {
    Ok(match format {
        Format::Table => records_table(records),
        Format::Records => records_json(records),
        Format::Csv => records_csv(records)?,
    })
}

fn batch(cfgs: &[ScenarioConfig], jobs: usize) -> Result<Vec<RunRecord>, Usage> {
    let mut out = Vec::new();
    for r in run_batch(cfgs, jobs) {
        match r {
            Ok(r) => out.push(r),
            Err(e) => return Err(anyhow::anyhow!("{}: {}", e.name, e.message).into()),
        }
    }
    Ok(out)
}

fn json_lines<T: serde::Serialize>(items: &[T]) -> Result<String> {
    let mut s = String::new();
    for i in items {
        s += &serde_json::to_string(i)?;
        s.push('\n');
    }
    Ok(s)
}

/// Report text and whether every expectation held.
fn execute(cli: &Cli) -> Result<(String, bool), Usage> {
    match &cli.command {
        Command::Run { config } => {
            let recs = batch(&load(config, cli.seed)?, cli.jobs)?;
            Ok((render(&recs, cli.format)?, true))
        }
        Command::Feasibility { config } => {
            let cfgs = load(config, cli.seed)?;
            let verdicts: Vec<(String, Feasibility)> =
                cfgs.iter().map(|c| (c.name.clone(), check_feasibility(&c.scenario(), c.dram.policy))).collect();
            let text = match cli.format {
                Format::Table => verdicts
                    .iter()
                    .map(|(n, v)| match v {
                        Feasibility::Feasible { notes } if notes.is_empty() => format!("{n}: feasible\n"),
                        Feasibility::Feasible { notes } => format!("{n}: feasible ({})\n", notes.join("; ")),
                        Feasibility::Infeasible { reason } => format!("{n}: infeasible ({reason})\n"),
                    })
                    .collect(),
                _ => json_lines(&verdicts)?,
            };
            Ok((text, true))
        }
        Command::Table1 => {
            let r = replicate_table1()?;
            let text = match cli.format {
                Format::Table => r.render(),
                _ => json_lines(&r.rows)?,
            };
            Ok((text, r.all_match()))
        }
        Command::Table2 => {
            let r = replicate_table2()?;
            let text = match cli.format {
                Format::Table => r.render(),
                _ => json_lines(&r.rows)?,
            };
            Ok((text, r.all_match()))
        }
        Command::Expressive { config } => {
            let mut cfgs = match config {
                Some(p) => load(p, None)?,
                None => parse_configs(EXPRESSIVE_FIXTURE)?,
            };
            reseed(&mut cfgs, cli.seed);
            let mut recs = Vec::new();
            for c in &cfgs {
                recs.push(run_expressive_config(c)?);
            }
            let ok = recs.iter().all(|r| r.outcome.is_success());
            let text = match cli.format {
                Format::Table => {
                    let mut t = records_table(&recs);
                    for r in &recs {
                        for (i, round) in r.outcome.rounds.iter().enumerate() {
                            if let Some(f) = &round.disk_field {
                                t += &format!("{} loop {}: disk {}\n", r.name, i + 1, String::from_utf8_lossy(f));
                            }
                        }
                    }
                    t
                }
                f => render(&recs, f)?,
            };
            Ok((text, ok))
        }
        Command::Sweep { config, param, range } => {
            let mut cfgs = sweep_configs(&read(config)?, param, range)?;
            reseed(&mut cfgs, cli.seed);
            let mut recs = batch(&cfgs, cli.jobs)?;
            // Keep the range order so the output plots directly.
            recs.sort_by_key(|r| cfgs.iter().position(|c| c.name == r.name));
            Ok((render(&recs, cli.format)?, true))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started = std::time::Instant::now();
    let (text, ok) = match execute(&cli) {
        Ok(r) => r,
        Err(Usage(e)) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    match &cli.out {
        Some(p) => {
            if let Err(e) = fs::write(p, &text) {
                eprintln!("error: writing {}: {e}", p.display());
                return ExitCode::from(2);
            }
        }
        None => print!("{text}"),
    }
    if cli.format == Format::Table {
        eprintln!("wall time {:.3} s", started.elapsed().as_secs_f64());
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
