//! Single-level sliced LRU cache sitting in front of DRAM.

mod eviction;

use std::collections::VecDeque;
use std::io::Write;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dram::{ActivationResult, Dram, DramError};

pub use eviction::{build_eviction_set, EvictionSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CacheError {
    #[error("invalid cache config: {0}")]
    InvalidConfig(String),
    #[error("address {0:#x} outside physical memory")]
    OutOfRange(u64),
    #[error("uncached region {0:#x?} overlaps an existing region")]
    Overlap(Range<u64>),
    #[error("candidate pool holds fewer than {ways} addresses congruent with {target:#x}")]
    InsufficientCongruent { target: u64, ways: u32 },
    #[error(transparent)]
    Dram(#[from] DramError),
}

/// Physical address → slice selection.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum SliceHash {
    /// Slice = (line / sets_per_slice) mod slices.
    #[default]
    Modulo,
    /// Bit `i` of the slice index is the parity of `phys & masks[i]`.
    XorMasks { masks: Vec<u64> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheConfig {
    pub slices: u32,
    pub sets_per_slice: u32,
    pub ways: u32,
    pub line_bytes: u32,
    #[serde(default)]
    pub slice_hash: SliceHash,
    /// Ways left to the partition when allocation is restricted (CAT).
    #[serde(default)]
    pub cat_ways: Option<u32>,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            slices: 2,
            sets_per_slice: 8,
            ways: 4,
            line_bytes: 64,
            slice_hash: SliceHash::Modulo,
            cat_ways: None,
        }
    }
}

impl CacheConfig {
    pub fn validate(&self) -> Result<(), CacheError> {
        let bad = |m: &str| Err(CacheError::InvalidConfig(m.into()));
        if self.slices == 0 || self.sets_per_slice == 0 || self.ways == 0 || self.line_bytes == 0 {
            return bad("all counts must be at least 1");
        }
        if !self.line_bytes.is_power_of_two() {
            return bad("line_bytes must be a power of two");
        }
        if let SliceHash::XorMasks { masks } = &self.slice_hash {
            if 1u64.checked_shl(masks.len() as u32) != Some(self.slices as u64) {
                return bad("xor slice hash needs log2(slices) masks");
            }
        }
        if let Some(c) = self.cat_ways {
            if c == 0 || c > self.ways {
                return bad("cat_ways must lie in 1..=ways");
            }
        }
        Ok(())
    }

    pub fn effective_ways(&self) -> u32 {
        self.cat_ways.unwrap_or(self.ways)
    }

    pub fn line_of(&self, phys: u64) -> u64 {
        phys / self.line_bytes as u64
    }

    pub fn slice_of(&self, phys: u64) -> u32 {
        match &self.slice_hash {
            SliceHash::Modulo => ((self.line_of(phys) / self.sets_per_slice as u64) % self.slices as u64) as u32,
            SliceHash::XorMasks { masks } => masks
                .iter()
                .enumerate()
                .map(|(i, m)| ((phys & m).count_ones() & 1) << i)
                .sum(),
        }
    }

    pub fn set_of(&self, phys: u64) -> u32 {
        (self.line_of(phys) % self.sets_per_slice as u64) as u32
    }

    /// Congruence class (slice, set) of an address.
    pub fn class_of(&self, phys: u64) -> (u32, u32) {
        (self.slice_of(phys), self.set_of(phys))
    }

    fn set_index(&self, phys: u64) -> usize {
        let (slice, set) = self.class_of(phys);
        (slice * self.sets_per_slice + set) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UncachedKind {
    Dma,
    Rdma,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UncachedRegion {
    pub range: Range<u64>,
    pub kind: UncachedKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessKind {
    Normal,
    /// Streaming load that skips cache allocation.
    NonTemporal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Hit,
    Miss,
    Uncached,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacheAccess {
    pub outcome: Outcome,
    /// Present whenever the access reached DRAM.
    pub activation: Option<ActivationResult>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub tick: u64,
    pub address: u64,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheCounters {
    pub hits: u64,
    pub misses: u64,
    pub uncached: u64,
}

/// Hit/miss observation without touching DRAM: the only signal eviction-set
/// discovery is allowed to use.
pub trait CacheProbe {
    fn probe(&mut self, phys: u64) -> Outcome;
    fn associativity(&self) -> u32;
}

#[derive(Debug, Clone)]
pub struct CacheState {
    config: CacheConfig,
    capacity: u64,
    sets: Vec<VecDeque<u64>>,
    counters: CacheCounters,
    uncached: Vec<UncachedRegion>,
    trace: Option<Vec<TraceRecord>>,
}

impl CacheState {
    pub fn new(config: CacheConfig, capacity: u64) -> Result<Self, CacheError> {
        config.validate()?;
        Ok(Self {
            sets: vec![VecDeque::new(); (config.slices * config.sets_per_slice) as usize],
            config,
            capacity,
            counters: CacheCounters::default(),
            uncached: Vec::new(),
            trace: None,
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn counters(&self) -> CacheCounters {
        self.counters
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> &[TraceRecord] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn add_uncached(&mut self, range: Range<u64>, kind: UncachedKind) -> Result<(), CacheError> {
        if range.start >= range.end || range.end > self.capacity {
            return Err(CacheError::OutOfRange(range.end));
        }
        if self.uncached.iter().any(|r| r.range.start < range.end && range.start < r.range.end) {
            return Err(CacheError::Overlap(range));
        }
        self.uncached.push(UncachedRegion { range, kind });
        Ok(())
    }

    pub fn uncached_kind(&self, phys: u64) -> Option<UncachedKind> {
        self.uncached.iter().find(|r| r.range.contains(&phys)).map(|r| r.kind)
    }

    pub fn is_resident(&self, phys: u64) -> bool {
        let line = self.config.line_of(phys);
        self.sets[self.config.set_index(phys)].contains(&line)
    }

    /// Looks up and updates LRU state; returns whether the line was resident.
    fn touch(&mut self, phys: u64) -> bool {
        let line = self.config.line_of(phys);
        let ways = self.config.effective_ways() as usize;
        let set = &mut self.sets[self.config.set_index(phys)];
        if let Some(pos) = set.iter().position(|&l| l == line) {
            set.remove(pos);
            set.push_front(line);
            true
        } else {
            set.push_front(line);
            set.truncate(ways);
            false
        }
    }

    fn record(&mut self, tick: u64, address: u64, outcome: Outcome) {
        match outcome {
            Outcome::Hit => self.counters.hits += 1,
            Outcome::Miss => self.counters.misses += 1,
            Outcome::Uncached => self.counters.uncached += 1,
        }
        if let Some(t) = &mut self.trace {
            t.push(TraceRecord { tick, address, outcome });
        }
    }

    pub fn access(&mut self, phys: u64, tick: u64, dram: &mut Dram) -> Result<CacheAccess, CacheError> {
        self.access_kind(phys, tick, AccessKind::Normal, dram)
    }

    pub fn access_kind(
        &mut self,
        phys: u64,
        tick: u64,
        kind: AccessKind,
        dram: &mut Dram,
    ) -> Result<CacheAccess, CacheError> {
        if phys >= self.capacity {
            return Err(CacheError::OutOfRange(phys));
        }
        let outcome = if kind == AccessKind::NonTemporal || self.uncached_kind(phys).is_some() {
            Outcome::Uncached
        } else if self.touch(phys) {
            Outcome::Hit
        } else {
            Outcome::Miss
        };
        self.record(tick, phys, outcome);
        let activation = match outcome {
            Outcome::Hit => None,
            _ => Some(dram.activate(dram.map(phys)?, tick)?),
        };
        Ok(CacheAccess { outcome, activation })
    }

    pub fn flush_line(&mut self, phys: u64) {
        let line = self.config.line_of(phys);
        let idx = self.config.set_index(phys);
        self.sets[idx].retain(|&l| l != line);
    }

    /// Touches every member; returns the tick after the last access.
    pub fn evict_via_set(&mut self, set: &EvictionSet, tick: u64, dram: &mut Dram) -> Result<u64, CacheError> {
        let mut t = tick;
        for &m in &set.members {
            self.access(m, t, dram)?;
            t += 1;
        }
        Ok(t)
    }
}

impl CacheProbe for CacheState {
    fn probe(&mut self, phys: u64) -> Outcome {
        if self.uncached_kind(phys).is_some() {
            Outcome::Uncached
        } else if self.touch(phys) {
            Outcome::Hit
        } else {
            Outcome::Miss
        }
    }

    fn associativity(&self) -> u32 {
        self.config.effective_ways()
    }
}

/// Writes a hit/miss trace as `tick,address,outcome` CSV.
pub fn write_trace_csv<W: Write>(records: &[TraceRecord], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
