use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{parse_configs, run_batch, BatchError, ConfigError, Role, RunRecord, ScenarioConfig};
use crate::attack::{Bypass, EvMethod, Lp, Origin, Pattern, Stage, TargetClass, TechniqueTrace};
use crate::defense::{reliable, Verdict};

pub const TABLE1_COLUMNS: [&str; 20] = [
    "UPro", "PPro", "Web", "Net", "EPRO", "EPUO", "DPRO", "DPUO", "A1", "A2", "A3", "A4", "Ba1", "Ba2", "Ba3", "Bb1",
    "Bb2", "Bb3", "C1", "C2",
];

macro_rules! fixture {
    ($dir:literal, $name:literal) => {
        ($name, include_str!(concat!("../../fixtures/", $dir, "/", $name, ".toml")))
    };
}

/// Attack name, expected checkmarks, fixture slug and text.
const TABLE1: [(&str, &[&str], (&str, &str)); 18] = [
    ("Flipping bits", &["UPro", "EPRO", "A1", "Bb1", "Bb2", "C1"], fixture!("table1", "flipping-bits")),
    ("Gain kernel", &["UPro", "EPRO", "DPUO", "A1", "Ba1", "Bb1", "C1", "C2"], fixture!("table1", "gain-kernel")),
    ("New approach", &["UPro", "EPRO", "DPUO", "A1", "Ba1", "Bb1", "C1", "C2"], fixture!("table1", "new-approach")),
    ("Rowhammer.js", &["UPro", "Web", "DPUO", "A1", "Ba2", "Bb1", "C2"], fixture!("table1", "rowhammer-js")),
    ("Dedup est machina", &["Web", "EPUO", "A2", "Ba2", "Bb1", "C2"], fixture!("table1", "dedup-est-machina")),
    ("One bit flips", &["PPro", "EPRO", "A3", "Ba1", "Bb2", "C1"], fixture!("table1", "one-bit-flips")),
    ("Flip feng shui", &["PPro", "EPRO", "A3", "Ba1", "Bb2", "C1"], fixture!("table1", "flip-feng-shui")),
    ("Drammer", &["UPro", "DPUO", "A2", "Ba3", "Bb2", "C2"], fixture!("table1", "drammer")),
    ("Curious case", &["PPro", "EPUO", "A4", "Ba1", "Ba2", "Bb1", "C2"], fixture!("table1", "curious-case")),
    ("Good go bad", &["UPro", "EPRO", "A1", "Ba2", "Bb1", "C1"], fixture!("table1", "good-go-bad")),
    ("SGX-bomb", &["UPro", "EPUO", "A4", "Ba1", "Bb2", "C2"], fixture!("table1", "sgx-bomb")),
    ("Another flip", &["UPro", "DPRO", "A4", "Ba1", "Bb3", "C1"], fixture!("table1", "another-flip")),
    ("Glitch", &["Web", "EPUO", "A2", "Ba2", "Bb2", "C2"], fixture!("table1", "glitch")),
    ("Throwhammer", &["Net", "DPUO", "A2", "Ba3", "Bb2", "C2"], fixture!("table1", "throwhammer")),
    ("RAMpage", &["UPro", "DPUO", "A2", "Ba3", "Bb2", "C2"], fixture!("table1", "rampage")),
    ("Still hammerable", &["UPro", "DPUO", "A2", "Ba1", "Bb1", "C2"], fixture!("table1", "still-hammerable")),
    ("PFA", &["PPro", "DPRO", "A4", "Ba1", "Bb2", "C1"], fixture!("table1", "pfa")),
    (
        "Nethammer",
        &["Net", "EPUO", "DPRO", "DPUO", "A4", "Ba1", "Ba2", "Ba3", "Bb3", "C1", "C2"],
        fixture!("table1", "nethammer"),
    ),
];

/// Countermeasure, affected primitive, reliable, fixture.
const TABLE2: [(&str, Stage, bool, (&str, &str)); 13] = [
    ("B-CATT", Stage::Lp, false, fixture!("table2", "b-catt")),
    ("Detect memory footprint", Stage::Lp, false, fixture!("table2", "footprint")),
    ("ECC", Stage::Rh, false, fixture!("table2", "ecc")),
    ("TRR", Stage::Rh, false, fixture!("table2", "trr")),
    ("PRA", Stage::Rh, true, fixture!("table2", "pra")),
    ("ANVIL", Stage::Rh, false, fixture!("table2", "anvil")),
    ("Disallow clflush", Stage::Rh, false, fixture!("table2", "disallow-clflush")),
    ("Double refresh rate", Stage::Rh, false, fixture!("table2", "double-refresh")),
    ("Detect with hash tree", Stage::Rh, true, fixture!("table2", "hash-tree")),
    ("G-CATT", Stage::Ev, false, fixture!("table2", "g-catt")),
    ("GuardION", Stage::Ev, true, fixture!("table2", "guardion")),
    ("ALIS", Stage::Ev, true, fixture!("table2", "alis")),
    ("ZebRAM", Stage::Ev, true, fixture!("table2", "zebram")),
];

#[derive(Debug, thiserror::Error)]
pub enum ReplicationError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("corpus has no scenario for row {0:?}")]
    MissingRow(String),
}

/// Corpus entries, keyed by fixture slug.
pub type Corpus = [(&'static str, Vec<ScenarioConfig>)];

fn lookup<'a>(corpus: &'a Corpus, slug: &str, row: &str) -> Result<&'a [ScenarioConfig], ReplicationError> {
    corpus
        .iter()
        .find(|(s, c)| *s == slug && !c.is_empty())
        .map(|(_, c)| c.as_slice())
        .ok_or_else(|| ReplicationError::MissingRow(row.to_string()))
}

/// Runs every config of the rows and splits the results per row.
fn run_rows(rows: &[&[ScenarioConfig]], parallelism: usize) -> Vec<(Vec<RunRecord>, Vec<BatchError>)> {
    let all: Vec<ScenarioConfig> = rows.iter().flat_map(|c| c.iter().cloned()).collect();
    let results = run_batch(&all, parallelism);
    rows.iter()
        .map(|configs| {
            let digests: BTreeSet<String> = configs.iter().map(|c| c.digest()).collect();
            let mut runs = Vec::new();
            let mut errors = Vec::new();
            for r in &results {
                match r {
                    Ok(r) if digests.contains(&r.digest) => runs.push(r.clone()),
                    Err(e) if digests.contains(&e.digest) => errors.push(e.clone()),
                    _ => {}
                }
            }
            (runs, errors)
        })
        .collect()
}

fn load(text: &str) -> Result<Vec<ScenarioConfig>, ConfigError> {
    parse_configs(text)
}

/// Fixture slug and parsed configs for every row of the attack table.
pub fn table1_fixtures() -> Result<Vec<(&'static str, Vec<ScenarioConfig>)>, ConfigError> {
    TABLE1.iter().map(|(_, _, (slug, text))| Ok((*slug, load(text)?))).collect()
}

pub fn table2_fixtures() -> Result<Vec<(&'static str, Vec<ScenarioConfig>)>, ConfigError> {
    TABLE2.iter().map(|(_, _, _, (slug, text))| Ok((*slug, load(text)?))).collect()
}

/// Columns checked by a trace, in `TABLE1_COLUMNS` order.
pub fn trace_marks(t: &TechniqueTrace) -> BTreeSet<&'static str> {
    let mut m = BTreeSet::new();
    m.extend(t.origin.map(|o| match o {
        Origin::UPro => "UPro",
        Origin::PPro => "PPro",
        Origin::Website => "Web",
        Origin::Network => "Net",
    }));
    m.extend(t.class.map(|c| match c {
        TargetClass::Epro => "EPRO",
        TargetClass::Epuo => "EPUO",
        TargetClass::Dpro => "DPRO",
        TargetClass::Dpuo => "DPUO",
    }));
    m.extend(t.lp.and_then(|l| match l {
        Lp::A1 => Some("A1"),
        Lp::A2 => Some("A2"),
        Lp::A3 => Some("A3"),
        Lp::A4 => Some("A4"),
        Lp::Natural => None,
    }));
    m.extend(t.bypass.and_then(|b| match b {
        Bypass::Ba1 => Some("Ba1"),
        Bypass::Ba2 => Some("Ba2"),
        Bypass::Ba3 => Some("Ba3"),
        Bypass::Direct => None,
    }));
    m.extend(t.pattern.map(|p| match p {
        Pattern::Bb1 => "Bb1",
        Pattern::Bb2 => "Bb2",
        Pattern::Bb3 => "Bb3",
    }));
    m.extend(t.ev.map(|e| match e {
        EvMethod::C1 => "C1",
        EvMethod::C2 => "C2",
    }));
    m
}

fn row_bits(marks: &BTreeSet<&str>) -> Vec<bool> {
    TABLE1_COLUMNS.iter().map(|c| marks.contains(c)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub attack: String,
    pub expected: Vec<bool>,
    pub observed: Vec<bool>,
    pub all_succeeded: bool,
    pub runs: Vec<RunRecord>,
    pub errors: Vec<BatchError>,
}

impl Table1Row {
    pub fn matches(&self) -> bool {
        self.all_succeeded && self.expected == self.observed
    }

    pub fn mismatches(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mark = |b: bool| if b { "x" } else { "." };
        for (i, c) in TABLE1_COLUMNS.iter().enumerate() {
            if self.expected[i] != self.observed[i] {
                out.push(format!(
                    "{}: column {c} expected {} observed {}",
                    self.attack,
                    mark(self.expected[i]),
                    mark(self.observed[i])
                ));
            }
        }
        for r in self.runs.iter().filter(|r| !r.outcome.is_success()) {
            out.push(format!("{}: scenario {} ended {:?}", self.attack, r.name, r.outcome.status));
        }
        for e in &self.errors {
            out.push(format!("{}: scenario {} failed: {}", self.attack, e.name, e.message));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Report {
    pub rows: Vec<Table1Row>,
}

impl Table1Report {
    pub fn all_match(&self) -> bool {
        self.rows.len() == TABLE1.len() && self.rows.iter().all(Table1Row::matches)
    }

    pub fn mismatches(&self) -> Vec<String> {
        self.rows.iter().flat_map(Table1Row::mismatches).collect()
    }

    pub fn render(&self) -> String {
        let mut out = format!("{:<20}", "attack");
        for c in TABLE1_COLUMNS {
            out += &format!("{c:>5}");
        }
        out += "  result\n";
        for r in &self.rows {
            out += &format!("{:<20}", r.attack);
            for (e, o) in r.expected.iter().zip(&r.observed) {
                let cell = match (e, o) {
                    (true, true) => "x",
                    (false, false) => ".",
                    (true, false) => "-x",
                    (false, true) => "+x",
                };
                out += &format!("{cell:>5}");
            }
            out += if r.matches() { "  ok\n" } else { "  MISMATCH\n" };
        }
        for m in self.mismatches() {
            out += &format!("mismatch: {m}\n");
        }
        out
    }
}

/// Runs every attack fixture; the checkmarks of a row are the union of the
/// techniques its variants actually exercised.
pub fn replicate_table1() -> Result<Table1Report, ReplicationError> {
    replicate_table1_from(&table1_fixtures()?, 0)
}

pub fn replicate_table1_from(corpus: &Corpus, parallelism: usize) -> Result<Table1Report, ReplicationError> {
    let configs: Vec<&[ScenarioConfig]> =
        TABLE1.iter().map(|(attack, _, (slug, _))| lookup(corpus, slug, attack)).collect::<Result<_, _>>()?;
    let results = run_rows(&configs, parallelism);
    let mut rows = Vec::new();
    for (((attack, marks, _), (runs, errors)), cfgs) in TABLE1.iter().zip(results).zip(&configs) {
        let mut seen = BTreeSet::new();
        for r in &runs {
            seen.extend(trace_marks(&r.outcome.trace));
        }
        rows.push(Table1Row {
            attack: attack.to_string(),
            expected: row_bits(&marks.iter().copied().collect()),
            observed: row_bits(&seen),
            all_succeeded: runs.len() == cfgs.len() && runs.iter().all(|r| r.outcome.is_success()),
            runs,
            errors,
        });
    }
    Ok(Table1Report { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Row {
    pub countermeasure: String,
    pub expected_primitive: Stage,
    pub expected_reliable: bool,
    /// Stage at which the canonical attack was blocked.
    pub observed_primitive: Option<Stage>,
    pub observed_reliable: bool,
    pub runs: Vec<RunRecord>,
    pub errors: Vec<BatchError>,
}

impl Table2Row {
    pub fn matches(&self) -> bool {
        self.observed_primitive == Some(self.expected_primitive) && self.observed_reliable == self.expected_reliable
    }

    pub fn mismatches(&self) -> Vec<String> {
        let stage = |s: Option<Stage>| s.map(|s| format!("{s:?}").to_uppercase()).unwrap_or_else(|| "none".into());
        let mut out = Vec::new();
        if self.observed_primitive != Some(self.expected_primitive) {
            out.push(format!(
                "{}: primitive expected {} observed {}",
                self.countermeasure,
                stage(Some(self.expected_primitive)),
                stage(self.observed_primitive)
            ));
        }
        if self.observed_reliable != self.expected_reliable {
            out.push(format!(
                "{}: reliable expected {} observed {}",
                self.countermeasure, self.expected_reliable, self.observed_reliable
            ));
        }
        for e in &self.errors {
            out.push(format!("{}: scenario {} failed: {}", self.countermeasure, e.name, e.message));
        }
        out
    }

    pub fn bypasses(&self) -> impl Iterator<Item = &RunRecord> {
        self.runs.iter().filter(|r| r.verdict == Some(Verdict::Bypassed))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Report {
    pub rows: Vec<Table2Row>,
    pub notes: Vec<String>,
}

impl Table2Report {
    pub fn all_match(&self) -> bool {
        self.rows.len() == TABLE2.len() && self.rows.iter().all(Table2Row::matches)
    }

    pub fn mismatches(&self) -> Vec<String> {
        self.rows.iter().flat_map(Table2Row::mismatches).collect()
    }

    pub fn row(&self, name: &str) -> Option<&Table2Row> {
        self.rows.iter().find(|r| r.countermeasure == name)
    }

    pub fn render(&self) -> String {
        let mark = |b: bool| if b { "yes" } else { "no" };
        let stage = |s: Option<Stage>| s.map(|s| format!("{s:?}").to_uppercase()).unwrap_or_else(|| "-".into());
        let mut out = format!(
            "{:<24} {:>9} {:>9} {:>9} {:>9}  result\n",
            "countermeasure", "primitive", "observed", "reliable", "observed"
        );
        for r in &self.rows {
            out += &format!(
                "{:<24} {:>9} {:>9} {:>9} {:>9}  {}\n",
                r.countermeasure,
                stage(Some(r.expected_primitive)),
                stage(r.observed_primitive),
                mark(r.expected_reliable),
                mark(r.observed_reliable),
                if r.matches() { "ok" } else { "MISMATCH" }
            );
        }
        for m in self.mismatches() {
            out += &format!("mismatch: {m}\n");
        }
        for n in &self.notes {
            out += &format!("note: {n}\n");
        }
        out
    }
}

/// Evaluates every countermeasure fixture. The primitive is where the
/// canonical attack stops; reliability means no scenario got through.
pub fn replicate_table2() -> Result<Table2Report, ReplicationError> {
    replicate_table2_from(&table2_fixtures()?, 0)
}

pub fn replicate_table2_from(corpus: &Corpus, parallelism: usize) -> Result<Table2Report, ReplicationError> {
    let configs: Vec<&[ScenarioConfig]> =
        TABLE2.iter().map(|(name, _, _, (slug, _))| lookup(corpus, slug, name)).collect::<Result<_, _>>()?;
    let results = run_rows(&configs, parallelism);
    let mut rows = Vec::new();
    for ((name, primitive, reliable_expected, _), (runs, errors)) in TABLE2.iter().zip(results) {
        let observed_primitive = runs
            .iter()
            .find(|r| r.role == Some(Role::Canonical))
            .and_then(|r| match r.verdict {
                Some(Verdict::Blocked(s)) => Some(s),
                _ => None,
            });
        let verdicts: Vec<Verdict> = runs.iter().filter_map(|r| r.verdict.clone()).collect();
        let applicable = errors.is_empty() && !verdicts.is_empty() && !verdicts.contains(&Verdict::NotApplicable);
        rows.push(Table2Row {
            countermeasure: name.to_string(),
            expected_primitive: *primitive,
            expected_reliable: *reliable_expected,
            observed_primitive,
            observed_reliable: applicable && reliable(&verdicts),
            runs,
            errors,
        });
    }
    let notes = vec![PRA_NOTE.to_string()];
    Ok(Table2Report { rows, notes })
}

const PRA_NOTE: &str = "PRA is listed as reliable, and every probe here is blocked, \
but its effectiveness on real hardware has not been confirmed";
