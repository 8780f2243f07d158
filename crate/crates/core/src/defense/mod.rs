//! Countermeasures as hooks on activation, allocation and read paths.

mod ecc;
mod evaluate;
mod guard;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dram::{Dram, DramConfig, RefreshMode, RowAddr};
use crate::osmem::{AllocKind, OsError, OsState};

pub use ecc::{Ecc, MemPort, WordStatus};
pub use evaluate::{evaluate, reliable, Evaluation, Verdict};
pub use guard::{GuardRows, ZoneSplit};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DefenseError {
    #[error("invalid {name} parameter: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error(transparent)]
    Os(#[from] OsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Countermeasure {
    DoubleRefresh,
    /// Refresh each adjacent row with probability `p` per activation.
    Para { p: f64 },
    /// With probability `p`, refresh every row within `reach`.
    Pra {
        p: f64,
        #[serde(default = "two")]
        reach: u32,
    },
    Trr {
        threshold: u32,
        #[serde(default = "one")]
        radius: u32,
    },
    Ecc {
        #[serde(default = "eight")]
        word_bytes: u32,
    },
    Anvil { miss_threshold: u32, window: u64 },
    /// Blacklists every frame whose row holds a known fault at install time.
    #[serde(rename = "b-catt")]
    Bcatt,
    #[serde(rename = "g-catt")]
    Gcatt { kernel_rows: u32, gap_rows: u32 },
    #[serde(rename = "guardion")]
    GuardIon {
        #[serde(default = "one")]
        guard_rows: u32,
    },
    Alis {
        #[serde(default = "one")]
        guard_rows: u32,
    },
    #[serde(rename = "zebram")]
    ZebRam,
    Footprint { max_fraction: f64 },
    DisallowClflush,
    HashTree {
        scan_interval: u64,
        hot_threshold: u64,
        #[serde(default = "two")]
        coverage: u32,
    },
}

fn one() -> u32 {
    1
}
fn two() -> u32 {
    2
}
fn eight() -> u32 {
    8
}

impl Countermeasure {
    pub fn name(&self) -> &'static str {
        match self {
            Countermeasure::DoubleRefresh => "double-refresh",
            Countermeasure::Para { .. } => "para",
            Countermeasure::Pra { .. } => "pra",
            Countermeasure::Trr { .. } => "trr",
            Countermeasure::Ecc { .. } => "ecc",
            Countermeasure::Anvil { .. } => "anvil",
            Countermeasure::Bcatt => "b-catt",
            Countermeasure::Gcatt { .. } => "g-catt",
            Countermeasure::GuardIon { .. } => "guardion",
            Countermeasure::Alis { .. } => "alis",
            Countermeasure::ZebRam => "zebram",
            Countermeasure::Footprint { .. } => "footprint",
            Countermeasure::DisallowClflush => "disallow-clflush",
            Countermeasure::HashTree { .. } => "hash-tree",
        }
    }

    pub fn validate(&self) -> Result<(), DefenseError> {
        let bad = |reason: &str| {
            Err(DefenseError::InvalidParameter {
                name: self.name(),
                reason: reason.into(),
            })
        };
        match *self {
            Countermeasure::Para { p } | Countermeasure::Pra { p, .. } if !(p > 0.0 && p <= 1.0) => {
                bad("probability must lie in (0, 1]")
            }
            Countermeasure::Pra { reach: 0, .. } => bad("reach must be at least 1"),
            Countermeasure::Trr { threshold, radius } if threshold == 0 || radius == 0 => {
                bad("threshold and radius must be at least 1")
            }
            Countermeasure::Ecc { word_bytes } if word_bytes == 0 || !word_bytes.is_power_of_two() => {
                bad("word_bytes must be a power of two")
            }
            Countermeasure::Anvil { miss_threshold, window } if miss_threshold == 0 || window == 0 => {
                bad("miss_threshold and window must be at least 1")
            }
            Countermeasure::GuardIon { guard_rows: 0 } | Countermeasure::Alis { guard_rows: 0 } => {
                bad("guard_rows must be at least 1")
            }
            Countermeasure::Gcatt { kernel_rows: 0, .. } => bad("kernel_rows must be at least 1"),
            Countermeasure::Footprint { max_fraction } if !(max_fraction > 0.0 && max_fraction <= 1.0) => {
                bad("max_fraction must lie in (0, 1]")
            }
            Countermeasure::HashTree { scan_interval, hot_threshold, .. }
                if scan_interval == 0 || hot_threshold == 0 =>
            {
                bad("scan_interval and hot_threshold must be at least 1")
            }
            _ => Ok(()),
        }
    }
}

/// Installed countermeasures plus their runtime state.
#[derive(Debug, Clone)]
pub struct Defenses {
    list: Vec<Countermeasure>,
    rng: ChaCha8Rng,
    trr_counts: BTreeMap<RowAddr, u32>,
    anvil_window: BTreeMap<u32, VecDeque<(u64, u32)>>,
    last_scan: u64,
    ecc_crafted: bool,
}

impl Defenses {
    pub fn new(list: Vec<Countermeasure>, seed: u64) -> Result<Self, DefenseError> {
        for c in &list {
            c.validate()?;
        }
        Ok(Self {
            list,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_defe),
            trr_counts: BTreeMap::new(),
            anvil_window: BTreeMap::new(),
            last_scan: 0,
            ecc_crafted: false,
        })
    }

    pub fn none() -> Self {
        Self::new(Vec::new(), 0).expect("empty list is valid")
    }

    pub fn list(&self) -> &[Countermeasure] {
        &self.list
    }

    pub fn is_empty(&self) -> bool {
        self.list.is_empty()
    }

    /// Marks co-word flips as crafted to slip past ECC.
    pub fn set_ecc_crafted(&mut self, crafted: bool) {
        self.ecc_crafted = crafted;
    }

    pub fn adjust_dram(&self, cfg: &mut DramConfig) {
        if self.list.contains(&Countermeasure::DoubleRefresh) {
            cfg.refresh.mode = RefreshMode::Doubled;
        }
    }

    /// Allocation-time constraints; must run before the kernel boots.
    pub fn install(&self, os: &mut OsState, dram: &Dram) -> Result<(), DefenseError> {
        let g = *dram.geometry();
        let rows: Vec<RowAddr> = os.allocator().rows().to_vec();
        let mut reserve = BTreeSet::new();
        for c in &self.list {
            match *c {
                Countermeasure::Bcatt => {
                    let bad: BTreeSet<RowAddr> = dram.faults().rows(&g).into_iter().collect();
                    reserve.extend((0..rows.len() as u64).filter(|&f| bad.contains(&rows[f as usize])));
                }
                Countermeasure::Gcatt { kernel_rows, gap_rows } => {
                    let z = ZoneSplit { kernel_rows, gap_rows };
                    reserve.extend((0..rows.len() as u64).filter(|&f| z.is_gap(rows[f as usize])));
                    os.allocator_mut().add_policy(Arc::new(z));
                }
                Countermeasure::GuardIon { guard_rows } => {
                    os.allocator_mut().add_policy(Arc::new(GuardRows {
                        kind: AllocKind::Dma,
                        rows: guard_rows,
                    }));
                }
                Countermeasure::Alis { guard_rows } => {
                    os.allocator_mut().add_policy(Arc::new(GuardRows {
                        kind: AllocKind::NetBuffer,
                        rows: guard_rows,
                    }));
                }
                Countermeasure::ZebRam => {
                    reserve.extend((0..rows.len() as u64).filter(|&f| rows[f as usize].row % 2 == 1));
                }
                _ => {}
            }
        }
        for f in reserve {
            os.allocator_mut().reserve(f)?;
        }
        Ok(())
    }

    pub fn flush_allowed(&self) -> bool {
        !self.list.contains(&Countermeasure::DisallowClflush)
    }

    pub fn ecc(&self) -> Option<Ecc> {
        self.list.iter().find_map(|c| match *c {
            Countermeasure::Ecc { word_bytes } => Some(Ecc {
                word_bytes,
                crafted_pass: self.ecc_crafted,
            }),
            _ => None,
        })
    }

    /// Runs after every array activation; returns the rows refreshed early.
    pub fn on_activate(&mut self, row: RowAddr, tick: u64, dram: &mut Dram) -> Vec<RowAddr> {
        let rows_per_bank = dram.geometry().rows_per_bank;
        let around = |reach: u32| -> Vec<RowAddr> {
            let lo = row.row.saturating_sub(reach);
            let hi = (row.row + reach).min(rows_per_bank - 1);
            (lo..=hi)
                .filter(|&r| r != row.row)
                .map(|r| RowAddr { bank: row.bank, row: r })
                .collect()
        };
        let mut refresh = Vec::new();
        for c in &self.list {
            match *c {
                Countermeasure::Para { p } => {
                    for n in around(1) {
                        if self.rng.random_bool(p) {
                            refresh.push(n);
                        }
                    }
                }
                Countermeasure::Pra { p, reach } => {
                    if self.rng.random_bool(p) {
                        refresh.extend(around(reach));
                    }
                }
                Countermeasure::Trr { threshold, radius } => {
                    let n = self.trr_counts.entry(row).or_insert(0);
                    *n += 1;
                    if *n >= threshold {
                        *n = 0;
                        refresh.extend(around(radius));
                    }
                }
                Countermeasure::Anvil { miss_threshold, window } => {
                    let w = self.anvil_window.entry(row.bank).or_default();
                    w.push_back((tick, row.row));
                    while w.front().is_some_and(|&(t, _)| t + window <= tick) {
                        w.pop_front();
                    }
                    let distinct: BTreeSet<u32> = w.iter().map(|&(_, r)| r).collect();
                    // A single row gives no locality signal to the second stage.
                    if w.len() as u32 >= miss_threshold && distinct.len() >= 2 {
                        for r in distinct {
                            let lo = r.saturating_sub(1);
                            let hi = (r + 1).min(rows_per_bank - 1);
                            refresh.extend(
                                (lo..=hi).filter(|&x| x != r).map(|x| RowAddr { bank: row.bank, row: x }),
                            );
                        }
                        w.clear();
                    }
                }
                _ => {}
            }
        }
        refresh.sort();
        refresh.dedup();
        for r in &refresh {
            dram.refresh_row(*r);
        }
        refresh
    }

    /// Fraction of frames held by `uid` above the detector's limit.
    pub fn footprint_alarm(&self, os: &OsState, uid: u32) -> Option<&'static str> {
        self.list.iter().find_map(|c| match *c {
            Countermeasure::Footprint { max_fraction } => {
                let used = os.footprint(uid) as f64 / os.total_frames() as f64;
                (used > max_fraction).then_some(c.name())
            }
            _ => None,
        })
    }

    /// Periodic integrity scan; `force` runs it regardless of the interval.
    pub fn scan(&mut self, dram: &Dram, tick: u64, force: bool) -> Option<&'static str> {
        let (interval, hot, coverage) = self.list.iter().find_map(|c| match *c {
            Countermeasure::HashTree { scan_interval, hot_threshold, coverage } => {
                Some((scan_interval, hot_threshold, coverage))
            }
            _ => None,
        })?;
        if !force && tick < self.last_scan + interval {
            return None;
        }
        self.last_scan = tick;
        let g = *dram.geometry();
        let mut rows = BTreeSet::new();
        for bank in 0..g.total_banks() {
            for r in 0..g.rows_per_bank {
                let flat = (bank * g.rows_per_bank + r) as usize;
                if dram.ledger().lifetime_count(flat) >= hot {
                    let lo = r.saturating_sub(coverage);
                    let hi = (r + coverage).min(g.rows_per_bank - 1);
                    rows.extend((lo..=hi).map(|x| RowAddr { bank, row: x }));
                }
            }
        }
        rows.into_iter()
            .any(|r| dram.row_bytes(r) != dram.written_row_bytes(r))
            .then_some("hash-tree")
    }
}
