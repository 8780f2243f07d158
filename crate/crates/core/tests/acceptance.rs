//! One line per acceptance criterion; exits non-zero if any fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::invariants::{
    check_bijection, check_buddy, check_file_ops, check_guard_isolation, random_buddy_ops, random_file_ops, sampled,
};
use common::oracle::{oracle_flips, probabilistic_tally, random_case, simulate, sorted};
use rhsim_core::attack::{check_feasibility, Bypass, Origin, Status};
use rhsim_core::dram::{FlipDirection, RowBufferPolicy};
use rhsim_core::osmem::{default_passwd, parse_records, PasswdField};
use rhsim_core::runner::{
    parse_config, records_json, replicate_table1, replicate_table2, run_batch, run_config, run_expressive_config,
    table1_fixtures, table2_fixtures, ScenarioConfig, EXPRESSIVE_FIXTURE,
};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn within(limit: Duration, t: Instant, detail: String) -> Check {
    let e = t.elapsed();
    if e < limit {
        Ok(format!("{detail}, {:.2} s", e.as_secs_f64()))
    } else {
        Err(format!("{detail}, but took {:.2} s (limit {} s)", e.as_secs_f64(), limit.as_secs()))
    }
}

fn table1() -> Check {
    let t = Instant::now();
    let r = replicate_table1().map_err(|e| e.to_string())?;
    if !r.all_match() {
        return Err(r.mismatches().join("; "));
    }
    let runs: usize = r.rows.iter().map(|row| row.runs.len()).sum();
    within(Duration::from_secs(30), t, format!("{} rows from {runs} executed scenarios", r.rows.len()))
}

fn table2() -> Check {
    let t = Instant::now();
    let r = replicate_table2().map_err(|e| e.to_string())?;
    if !r.all_match() {
        return Err(r.mismatches().join("; "));
    }
    let bypasses = [
        ("ANVIL", "anvil one-location"),
        ("ECC", "ecc crafted multi-bit"),
        ("TRR", "trr far flips"),
        ("G-CATT", "g-catt shared binary"),
    ];
    for (row, run) in bypasses {
        let ok = r.row(row).is_some_and(|row| row.bypasses().any(|b| b.name == run));
        if !ok {
            return Err(format!("{run} does not bypass {row}"));
        }
    }
    within(Duration::from_secs(60), t, format!("{} rows, 4 bypasses", r.rows.len()))
}

fn expressive() -> Check {
    let t = Instant::now();
    let passwd = default_passwd();
    let rec = parse_records(&passwd).into_iter().find(|r| r.name == "alice").ok_or("no alice")?;
    let start = &passwd[rec.field(PasswdField::Uid)];
    if start != [0x31, 0x30, 0x30, 0x31] {
        return Err(format!("initial UID bytes {start:02x?}"));
    }
    let cfg = parse_config(EXPRESSIVE_FIXTURE).map_err(|e| e.to_string())?;
    let a = run_expressive_config(&cfg).map_err(|e| e.to_string())?;
    let b = run_expressive_config(&cfg).map_err(|e| e.to_string())?;
    if a != b {
        return Err("two runs with the same seed differ".into());
    }
    let o = &a.outcome;
    if o.status != Status::Success {
        return Err(format!("ended {:?} at {:?}", o.status, o.failed_stage));
    }
    let fields: Vec<&[u8]> = o.rounds.iter().filter_map(|r| r.disk_field.as_deref()).collect();
    if fields != [&b"0001"[..], &b"0000"[..]] {
        return Err(format!("disk states {fields:?}"));
    }
    let flips: Vec<_> = o.rounds.iter().flat_map(|r| &r.flips).collect();
    if flips.len() != 2 || flips.iter().any(|f| f.direction != FlipDirection::OneToZero) {
        return Err(format!("{} persisted flips", flips.len()));
    }
    if o.rounds.iter().any(|r| r.persisted != Some(true)) {
        return Err("a round did not persist".into());
    }
    within(Duration::from_secs(5), t, "31 30 30 31 -> 30 30 30 31 -> 30 30 30 30, two 1->0 flips".into())
}

fn oracle() -> Check {
    for seed in 0..1000u64 {
        let case = random_case(seed, 1.0);
        if sorted(simulate(&case, seed)) != sorted(oracle_flips(&case)) {
            return Err(format!("trace {seed} differs from the window-count oracle"));
        }
    }
    let (observed, expected, sigma) = probabilistic_tally(0.3);
    if (observed as f64 - expected).abs() > 3.0 * sigma {
        return Err(format!("p=0.3: observed {observed}, expected {expected:.1} ± {:.1}", 3.0 * sigma));
    }
    Ok(format!("10^3 traces exact; p=0.3 observed {observed} vs {expected:.1} ± {:.1}", 3.0 * sigma))
}

fn corpus() -> Vec<ScenarioConfig> {
    table1_fixtures().unwrap().into_iter().chain(table2_fixtures().unwrap()).flat_map(|(_, c)| c).collect()
}

fn report(configs: &[ScenarioConfig], threads: usize) -> Result<String, String> {
    let recs = run_batch(configs, threads).into_iter().collect::<Result<Vec<_>, _>>().map_err(|e| e.message)?;
    Ok(records_json(&recs))
}

fn invariants() -> Check {
    let tag = |name: &'static str| move |e: String| format!("{name}: {e}");
    sampled(300, random_file_ops, check_file_ops).map_err(tag("dirty bit / sync_flush"))?;
    sampled(300, random_buddy_ops, check_buddy).map_err(tag("buddy conservation"))?;
    check_bijection().map_err(tag("bijection"))?;
    check_guard_isolation().map_err(tag("guard rows"))?;
    let configs = corpus();
    let serial = report(&configs, 1)?;
    if report(&configs, 1)? != serial {
        return Err("determinism: equal seeds gave different reports".into());
    }
    let mut reversed = configs.clone();
    reversed.reverse();
    if report(&reversed, 8)? != serial {
        return Err("batch: 8 threads differ from 1".into());
    }
    Ok("dirty bit, sync_flush, buddy, bijection, guard rows, determinism, parallelism".into())
}

fn named(name: &str) -> ScenarioConfig {
    let mut c = corpus().into_iter().find(|c| c.name == name).expect(name);
    c.defenses.clear();
    c
}

fn pair(what: &str, accepted: ScenarioConfig, change: impl Fn(&mut ScenarioConfig)) -> Result<(), String> {
    let mut rejected = accepted.clone();
    change(&mut rejected);
    let feasible = |c: &ScenarioConfig| check_feasibility(&c.scenario(), c.dram.policy).is_feasible();
    let status = |c: &ScenarioConfig| run_config(c).map(|r| r.outcome.status).map_err(|e| e.to_string());
    if feasible(&rejected) || status(&rejected)? != Status::InfeasibleCombination {
        return Err(format!("{what}: modified scenario was not rejected"));
    }
    if !feasible(&accepted) || status(&accepted)? != Status::Success {
        return Err(format!("{what}: sibling {} did not run to success", accepted.name));
    }
    Ok(())
}

fn feasibility() -> Check {
    pair("Website without Ba1", named("rowhammer-js from a page"), |c| c.attack.bypass = Bypass::Ba1)?;
    pair("Network without C2", named("throwhammer"), |c| c.environment.remote_observable = false)?;
    pair("Network C1 on DPRO", named("nethammer partitioned cache"), |c| {
        c.target.class = rhsim_core::attack::TargetClass::Dpuo
    })?;
    pair("A3 needs privilege", named("one-bit-flips"), |c| c.attack.origin = Origin::UPro)?;
    pair("Bb3 needs closed rows", named("anvil one-location"), |c| c.dram.policy = RowBufferPolicy::OpenPage)?;
    Ok("4 constraints, each with a rejected scenario and an accepted sibling".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 6] = [
        ("table 1 replication", table1),
        ("table 2 replication", table2),
        ("expressive attack", expressive),
        ("fault-engine oracle", oracle),
        ("invariant suites", invariants),
        ("feasibility matrix", feasibility),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("criterion {}: PASS {name} ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL {name} ({why})", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
