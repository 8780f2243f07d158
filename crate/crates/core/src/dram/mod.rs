//! DRAM geometry, row buffers, refresh and the disturbance-fault engine.

mod dump;
mod fault;
mod geometry;
mod refresh;

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dump::{dump_rows, parse_dump, DumpRow};
pub use fault::{generate, stripe, FaultEntry, FaultGenParams, FaultMap, FlipDirection, StripeParams};
pub use geometry::{map_address, unmap_address, AddressMapping, DramCoordinate, DramGeometry, RowAddr};
pub use refresh::{RefreshConfig, RefreshMode};

use refresh::RefreshSchedule;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DramError {
    #[error("physical address {phys:#x} outside capacity {capacity:#x}")]
    AddressOutOfRange { phys: u64, capacity: u64 },
    #[error("coordinate out of range: {0:?}")]
    CoordinateOutOfRange(DramCoordinate),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("refresh interval {0} must be at least 2")]
    InvalidRefresh(u64),
    #[error("invalid row buffer policy: {0}")]
    InvalidPolicy(String),
    #[error("invalid fault entry: {0}")]
    InvalidFault(String),
    #[error("malformed dump line {line}: {reason}")]
    Dump { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowBufferPolicy {
    #[default]
    OpenPage,
    ClosePage,
    /// Open-page until the bank sits idle for this many ticks.
    Adaptive(u64),
}

impl RowBufferPolicy {
    pub fn validate(&self) -> Result<(), DramError> {
        match self {
            RowBufferPolicy::Adaptive(0) => {
                Err(DramError::InvalidPolicy("adaptive idle threshold must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DramConfig {
    pub geometry: DramGeometry,
    pub mapping: AddressMapping,
    pub policy: RowBufferPolicy,
    pub refresh: RefreshConfig,
}

impl DramConfig {
    pub fn validate(&self) -> Result<(), DramError> {
        self.geometry.validate()?;
        self.mapping.validate(&self.geometry)?;
        self.policy.validate()?;
        self.refresh.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ServedFrom {
    RowBuffer,
    RowArray,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipRecord {
    pub tick: u64,
    pub victim: DramCoordinate,
    pub direction: FlipDirection,
    pub aggressor: RowAddr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationResult {
    pub served_from: ServedFrom,
    pub flips: Vec<FlipRecord>,
}

/// Per-row activation counts since each row's own last refresh.
#[derive(Debug, Clone, Default)]
pub struct ActivationLedger {
    window: Vec<u32>,
    lifetime: Vec<u64>,
    max_window: u32,
    total: u64,
}

impl ActivationLedger {
    fn new(rows: usize) -> Self {
        Self {
            window: vec![0; rows],
            lifetime: vec![0; rows],
            max_window: 0,
            total: 0,
        }
    }

    pub fn window_count(&self, flat_row: usize) -> u32 {
        self.window[flat_row]
    }

    pub fn lifetime_count(&self, flat_row: usize) -> u64 {
        self.lifetime[flat_row]
    }

    /// Largest count any row reached inside one of its refresh windows.
    pub fn max_window_count(&self) -> u32 {
        self.max_window
    }

    pub fn total(&self) -> u64 {
        self.total
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct BankBuffer {
    open_row: Option<u32>,
    last_access: u64,
}

#[derive(Debug, Clone)]
struct FaultEngine {
    entries: Vec<FaultEntry>,
    by_row: HashMap<RowAddr, Vec<usize>>,
    max_radius: u32,
    fired: Vec<bool>,
    pressure: Vec<BTreeMap<u32, u32>>,
}

impl FaultEngine {
    fn new(geometry: &DramGeometry, map: &FaultMap) -> Self {
        let entries = map.entries().to_vec();
        let mut by_row: HashMap<RowAddr, Vec<usize>> = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            by_row.entry(geometry.row_of(&e.victim)).or_default().push(i);
        }
        Self {
            max_radius: entries.iter().map(|e| e.blast_radius).max().unwrap_or(0),
            fired: vec![false; entries.len()],
            pressure: vec![BTreeMap::new(); entries.len()],
            entries,
            by_row,
        }
    }
}

/// One simulated DRAM device.
#[derive(Debug, Clone)]
pub struct Dram {
    config: DramConfig,
    data: Vec<u8>,
    written: Vec<u8>,
    buffers: Vec<BankBuffer>,
    ledger: ActivationLedger,
    engine: FaultEngine,
    faults: FaultMap,
    schedule: RefreshSchedule,
    rng: ChaCha8Rng,
    flips: Vec<FlipRecord>,
    tick: u64,
}

impl Dram {
    pub fn new(config: DramConfig, faults: FaultMap, seed: u64) -> Result<Self, DramError> {
        config.validate()?;
        let g = config.geometry;
        let faults = FaultMap::new(&g, faults.entries().to_vec())?;
        let cap = g.capacity() as usize;
        Ok(Self {
            data: vec![0; cap],
            written: vec![0; cap],
            buffers: vec![BankBuffer::default(); g.total_banks() as usize],
            ledger: ActivationLedger::new(g.total_rows() as usize),
            engine: FaultEngine::new(&g, &faults),
            schedule: RefreshSchedule::new(&config.refresh, g.rows_per_bank),
            faults,
            rng: ChaCha8Rng::seed_from_u64(seed),
            flips: Vec::new(),
            tick: 0,
            config,
        })
    }

    pub fn config(&self) -> &DramConfig {
        &self.config
    }

    pub fn geometry(&self) -> &DramGeometry {
        &self.config.geometry
    }

    pub fn faults(&self) -> &FaultMap {
        &self.faults
    }

    pub fn ledger(&self) -> &ActivationLedger {
        &self.ledger
    }

    pub fn flips(&self) -> &[FlipRecord] {
        &self.flips
    }

    pub fn now(&self) -> u64 {
        self.tick
    }

    pub fn refresh_interval(&self) -> u64 {
        self.schedule.interval()
    }

    /// Adds cells that become vulnerable after start-up (e.g. aging).
    pub fn add_faults(&mut self, extra: &FaultMap) -> Result<(), DramError> {
        self.faults.extend(&self.config.geometry, extra)?;
        let old_fired = std::mem::take(&mut self.engine.fired);
        let old_pressure = std::mem::take(&mut self.engine.pressure);
        self.engine = FaultEngine::new(&self.config.geometry, &self.faults);
        for (i, (f, p)) in old_fired.into_iter().zip(old_pressure).enumerate() {
            self.engine.fired[i] = f;
            self.engine.pressure[i] = p;
        }
        Ok(())
    }

    pub fn map(&self, phys: u64) -> Result<DramCoordinate, DramError> {
        map_address(phys, &self.config.geometry, &self.config.mapping)
    }

    pub fn unmap(&self, c: &DramCoordinate) -> Result<u64, DramError> {
        unmap_address(c, &self.config.geometry, &self.config.mapping)
    }

    pub fn row_of_phys(&self, phys: u64) -> Result<RowAddr, DramError> {
        Ok(self.config.geometry.row_of(&self.map(phys)?))
    }

    fn flat_row(&self, r: RowAddr) -> usize {
        r.bank as usize * self.config.geometry.rows_per_bank as usize + r.row as usize
    }

    /// Opens the coordinate's row and runs the fault engine.
    pub fn activate(&mut self, coord: DramCoordinate, tick: u64) -> Result<ActivationResult, DramError> {
        let g = self.config.geometry;
        g.check(&coord.with_bit(0))?;
        self.refresh_step(tick);
        self.tick = self.tick.max(tick);
        let row = g.row_of(&coord);
        let buf = &mut self.buffers[row.bank as usize];
        let hit = match self.config.policy {
            RowBufferPolicy::OpenPage => buf.open_row == Some(row.row),
            RowBufferPolicy::ClosePage => false,
            RowBufferPolicy::Adaptive(idle) => {
                buf.open_row == Some(row.row) && tick.saturating_sub(buf.last_access) < idle
            }
        };
        buf.last_access = tick;
        buf.open_row = match self.config.policy {
            RowBufferPolicy::ClosePage => None,
            _ => Some(row.row),
        };
        if hit {
            return Ok(ActivationResult {
                served_from: ServedFrom::RowBuffer,
                flips: Vec::new(),
            });
        }
        let flat = self.flat_row(row);
        self.ledger.window[flat] += 1;
        self.ledger.lifetime[flat] += 1;
        self.ledger.total += 1;
        self.ledger.max_window = self.ledger.max_window.max(self.ledger.window[flat]);
        let flips = self.disturb_neighbours(row, tick);
        Ok(ActivationResult {
            served_from: ServedFrom::RowArray,
            flips,
        })
    }

    fn disturb_neighbours(&mut self, aggressor: RowAddr, tick: u64) -> Vec<FlipRecord> {
        let g = self.config.geometry;
        let r = self.engine.max_radius;
        if r == 0 {
            return Vec::new();
        }
        let lo = aggressor.row.saturating_sub(r);
        let hi = (aggressor.row + r).min(g.rows_per_bank - 1);
        let mut out = Vec::new();
        for vr in lo..=hi {
            if vr == aggressor.row {
                continue;
            }
            let victim_row = RowAddr { bank: aggressor.bank, row: vr };
            let Some(idxs) = self.engine.by_row.get(&victim_row) else {
                continue;
            };
            for &i in idxs {
                let e = self.engine.entries[i];
                if vr.abs_diff(aggressor.row) > e.blast_radius {
                    continue;
                }
                let count = self.engine.pressure[i].entry(aggressor.row).or_insert(0);
                *count += 1;
                if *count != e.threshold || self.engine.fired[i] {
                    continue;
                }
                let cell = g.cell_index(&e.victim);
                let mask = 1u8 << e.victim.bit;
                let is_set = self.data[cell] & mask != 0;
                if is_set != e.direction.pre_value() {
                    continue;
                }
                if e.probability < 1.0 && !self.rng.random_bool(e.probability) {
                    continue;
                }
                self.data[cell] ^= mask;
                self.engine.fired[i] = true;
                let rec = FlipRecord {
                    tick,
                    victim: e.victim,
                    direction: e.direction,
                    aggressor,
                };
                self.flips.push(rec);
                out.push(rec);
            }
        }
        out
    }

    /// Applies every scheduled refresh up to and including `tick`.
    pub fn refresh_step(&mut self, tick: u64) -> Vec<RowAddr> {
        let rows = self.schedule.advance(tick);
        let banks = self.config.geometry.total_banks();
        let mut out = Vec::with_capacity(rows.len() * banks as usize);
        for row in rows {
            for bank in 0..banks {
                let r = RowAddr { bank, row };
                self.refresh_row(r);
                out.push(r);
            }
        }
        out
    }

    /// Recharges one row: clears its ledger count, the pressure it has
    /// built on neighbours, and any pressure targeting its own cells.
    pub fn refresh_row(&mut self, r: RowAddr) {
        let flat = self.flat_row(r);
        self.ledger.window[flat] = 0;
        if let Some(idxs) = self.engine.by_row.get(&r) {
            for &i in idxs {
                self.engine.pressure[i].clear();
                self.engine.fired[i] = false;
            }
        }
        let radius = self.engine.max_radius;
        if radius == 0 {
            return;
        }
        let lo = r.row.saturating_sub(radius);
        let hi = (r.row + radius).min(self.config.geometry.rows_per_bank - 1);
        for vr in lo..=hi {
            if let Some(idxs) = self.engine.by_row.get(&RowAddr { bank: r.bank, row: vr }) {
                for &i in idxs {
                    self.engine.pressure[i].remove(&r.row);
                }
            }
        }
    }

    pub fn read_bits(&self, coord: &DramCoordinate) -> Result<u8, DramError> {
        self.config.geometry.check(&coord.with_bit(0))?;
        Ok(self.data[self.config.geometry.cell_index(coord)])
    }

    pub fn write_bits(&mut self, coord: &DramCoordinate, value: u8) -> Result<(), DramError> {
        self.config.geometry.check(&coord.with_bit(0))?;
        let i = self.config.geometry.cell_index(coord);
        self.data[i] = value;
        self.written[i] = value;
        Ok(())
    }

    /// Value last stored by a legitimate write, ignoring disturbance flips.
    pub fn written_bits(&self, coord: &DramCoordinate) -> Result<u8, DramError> {
        self.config.geometry.check(&coord.with_bit(0))?;
        Ok(self.written[self.config.geometry.cell_index(coord)])
    }

    /// Flips one cell outside the fault engine (test injection).
    pub fn inject_flip(&mut self, coord: &DramCoordinate) -> Result<(), DramError> {
        self.config.geometry.check(coord)?;
        let i = self.config.geometry.cell_index(coord);
        self.data[i] ^= 1 << coord.bit;
        Ok(())
    }

    pub fn read_phys(&self, phys: u64) -> Result<u8, DramError> {
        self.read_bits(&self.map(phys)?)
    }

    pub fn write_phys(&mut self, phys: u64, value: u8) -> Result<(), DramError> {
        let c = self.map(phys)?;
        self.write_bits(&c, value)
    }

    pub fn written_phys(&self, phys: u64) -> Result<u8, DramError> {
        self.written_bits(&self.map(phys)?)
    }

    pub fn read_range(&self, phys: u64, len: usize) -> Result<Vec<u8>, DramError> {
        (0..len as u64).map(|i| self.read_phys(phys + i)).collect()
    }

    pub fn write_range(&mut self, phys: u64, bytes: &[u8]) -> Result<(), DramError> {
        for (i, b) in bytes.iter().enumerate() {
            self.write_phys(phys + i as u64, *b)?;
        }
        Ok(())
    }

    /// Raw bytes of one row, in column order.
    pub fn row_bytes(&self, r: RowAddr) -> &[u8] {
        let base = self.config.geometry.row_base(r);
        &self.data[base..base + self.config.geometry.bytes_per_row as usize]
    }

    /// What the last legitimate writes left in the row.
    pub fn written_row_bytes(&self, r: RowAddr) -> &[u8] {
        let base = self.config.geometry.row_base(r);
        &self.written[base..base + self.config.geometry.bytes_per_row as usize]
    }
}
