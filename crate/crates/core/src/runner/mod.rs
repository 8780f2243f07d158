//! Scenario files, batch execution, and table replication.

mod config;
mod tables;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{run_expressive_attack, run_scenario, AttackOutcome, Status, World};
use crate::defense::{evaluate, Verdict};

pub use config::{
    deep_merge, expand_variants, parse_config, parse_configs, parse_range, set_path, sweep_configs, ConfigError,
    FaultSpec, FaultsSection, Role, ScenarioConfig, SCHEMA_VERSION,
};
pub use tables::{
    replicate_table1, replicate_table1_from, replicate_table2, replicate_table2_from, table1_fixtures, table2_fixtures,
    Corpus, ReplicationError, Table1Report, Table1Row, Table2Report, Table2Row, TABLE1_COLUMNS,
};

/// The two-round UID attack used by the `expressive` command.
pub const EXPRESSIVE_FIXTURE: &str = include_str!("../../fixtures/expressive.toml");

/// Result of running one scenario config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub digest: String,
    pub seed: u64,
    pub role: Option<Role>,
    /// Present when the config lists defenses.
    pub verdict: Option<Verdict>,
    pub outcome: AttackOutcome,
    /// Canonical text of the config that produced this record.
    pub config: String,
}

impl RunRecord {
    pub fn status(&self) -> &Status {
        &self.outcome.status
    }
}

/// Runs a config: plain if it has no defenses, otherwise as a defense
/// evaluation whose outcome is the defended run.
pub fn run_config(cfg: &ScenarioConfig) -> Result<RunRecord, ConfigError> {
    let world = cfg.world()?;
    let s = cfg.scenario();
    let err = |e: crate::attack::WorldError| ConfigError::Constraint(e.to_string());
    let (verdict, outcome) = if cfg.defenses.is_empty() {
        (None, run_scenario(&s, &mut World::new(&world).map_err(err)?))
    } else {
        let ev = evaluate(&s, &world, &cfg.defenses).map_err(err)?;
        (Some(ev.verdict), ev.defended.unwrap_or(ev.baseline))
    };
    Ok(RunRecord {
        name: cfg.name.clone(),
        digest: cfg.digest(),
        seed: cfg.seed,
        role: cfg.role,
        verdict,
        outcome,
        config: cfg.canonical_toml(),
    })
}

/// Multi-round run over `target.bits`, defenses included in the world.
pub fn run_expressive_config(cfg: &ScenarioConfig) -> Result<RunRecord, ConfigError> {
    let mut world = cfg.world()?;
    world.defenses = cfg.defenses.clone();
    let s = cfg.scenario();
    let mut w = World::new(&world).map_err(|e| ConfigError::Constraint(e.to_string()))?;
    let outcome = run_expressive_attack(&s.target.bits, &s, &mut w);
    Ok(RunRecord {
        name: cfg.name.clone(),
        digest: cfg.digest(),
        seed: cfg.seed,
        role: cfg.role,
        verdict: None,
        outcome,
        config: cfg.canonical_toml(),
    })
}

/// A config of a batch that could not be run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchError {
    pub name: String,
    pub digest: String,
    pub message: String,
}

/// Runs configs on `parallelism` threads (0 picks the core count). The
/// result order follows the config digests, so it does not depend on
/// scheduling; a failing config only fails its own entry.
pub fn run_batch(configs: &[ScenarioConfig], parallelism: usize) -> Vec<Result<RunRecord, BatchError>> {
    let one = |cfg: &ScenarioConfig| {
        run_config(cfg).map_err(|e| BatchError {
            name: cfg.name.clone(),
            digest: cfg.digest(),
            message: e.to_string(),
        })
    };
    let mut out: Vec<Result<RunRecord, BatchError>> = match rayon::ThreadPoolBuilder::new().num_threads(parallelism).build() {
        Ok(pool) => pool.install(|| configs.par_iter().map(one).collect()),
        Err(_) => configs.iter().map(one).collect(),
    };
    let key = |r: &Result<RunRecord, BatchError>| match r {
        Ok(r) => (r.digest.clone(), r.name.clone()),
        Err(e) => (e.digest.clone(), e.name.clone()),
    };
    out.sort_by_key(key);
    out
}

/// One JSON object per line.
pub fn records_json(records: &[RunRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
        .collect()
}

/// Flat per-run columns, one CSV row per record.
pub fn records_csv(records: &[RunRecord]) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "name", "digest", "seed", "status", "failed_stage", "failed_round", "verdict", "rounds", "flips", "activations",
        "footprint", "ticks",
    ])?;
    for r in records {
        let o = &r.outcome;
        let flips: usize = o.rounds.iter().map(|x| x.flips.len()).sum();
        w.write_record([
            r.name.clone(),
            r.digest.clone(),
            r.seed.to_string(),
            status_text(&o.status),
            o.failed_stage.map(|s| format!("{s:?}").to_uppercase()).unwrap_or_default(),
            o.failed_round.map(|n| n.to_string()).unwrap_or_default(),
            r.verdict.as_ref().map(|v| format!("{v:?}")).unwrap_or_default(),
            o.rounds.len().to_string(),
            flips.to_string(),
            o.activations.to_string(),
            o.footprint.to_string(),
            o.ticks.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn status_text(s: &Status) -> String {
    match s {
        Status::Detected(by) => format!("Detected({by})"),
        other => format!("{other:?}"),
    }
}

pub fn records_table(records: &[RunRecord]) -> String {
    let mut out = format!("{:<40} {:<22} {:<6} {:<6} {:<16}\n", "name", "status", "stage", "round", "verdict");
    for r in records {
        let o = &r.outcome;
        out += &format!(
            "{:<40} {:<22} {:<6} {:<6} {:<16}\n",
            r.name,
            status_text(&o.status),
            o.failed_stage.map(|s| format!("{s:?}").to_uppercase()).unwrap_or_else(|| "-".into()),
            o.failed_round.map(|n| n.to_string()).unwrap_or_else(|| "-".into()),
            r.verdict.as_ref().map(|v| format!("{v:?}")).unwrap_or_else(|| "-".into()),
        );
    }
    out
}
