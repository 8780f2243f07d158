use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DramCoordinate, DramError, DramGeometry, RowAddr};

/// Which way a disturbance flip changes the cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlipDirection {
    OneToZero,
    ZeroToOne,
}

impl FlipDirection {
    /// Bit value the cell must hold for the flip to be possible.
    pub fn pre_value(self) -> bool {
        matches!(self, FlipDirection::OneToZero)
    }
}

/// A single vulnerable cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultEntry {
    pub victim: DramCoordinate,
    pub direction: FlipDirection,
    pub threshold: u32,
    pub probability: f64,
    pub blast_radius: u32,
}

impl FaultEntry {
    pub fn new(victim: DramCoordinate, direction: FlipDirection, threshold: u32) -> Self {
        Self {
            victim,
            direction,
            threshold,
            probability: 1.0,
            blast_radius: 1,
        }
    }

    pub fn with_probability(mut self, p: f64) -> Self {
        self.probability = p;
        self
    }

    pub fn with_radius(mut self, r: u32) -> Self {
        self.blast_radius = r;
        self
    }
}

/// Validated set of vulnerable cells, at most one per bit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FaultMap {
    entries: Vec<FaultEntry>,
}

impl FaultMap {
    pub fn new(geometry: &DramGeometry, entries: Vec<FaultEntry>) -> Result<Self, DramError> {
        let mut seen = HashSet::new();
        for e in &entries {
            geometry.check(&e.victim)?;
            if e.threshold == 0 {
                return Err(DramError::InvalidFault("threshold must be at least 1".into()));
            }
            if e.blast_radius == 0 {
                return Err(DramError::InvalidFault("blast_radius must be at least 1".into()));
            }
            if !(e.probability > 0.0 && e.probability <= 1.0) {
                return Err(DramError::InvalidFault(format!(
                    "flip probability {} outside (0, 1]",
                    e.probability
                )));
            }
            if !seen.insert(e.victim) {
                return Err(DramError::InvalidFault(format!(
                    "duplicate entry for {:?}",
                    e.victim
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[FaultEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Merges another map, rejecting overlapping victims.
    pub fn extend(&mut self, geometry: &DramGeometry, other: &FaultMap) -> Result<(), DramError> {
        let mut all = self.entries.clone();
        all.extend_from_slice(&other.entries);
        *self = FaultMap::new(geometry, all)?;
        Ok(())
    }

    /// Rows (flat bank index) holding at least one vulnerable cell.
    pub fn rows(&self, geometry: &DramGeometry) -> Vec<RowAddr> {
        let mut rows: Vec<RowAddr> = self.entries.iter().map(|e| geometry.row_of(&e.victim)).collect();
        rows.sort();
        rows.dedup();
        rows
    }
}

/// Parameters of a randomly generated fault map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultGenParams {
    pub seed: u64,
    /// Chance that a unit holds one vulnerable cell.
    pub density: f64,
    #[serde(default = "default_unit_bytes")]
    pub unit_bytes: u32,
    /// Fraction of generated cells flipping 1→0.
    #[serde(default = "half")]
    pub one_to_zero: f64,
    /// Relative weights for blast radius 1, 2, ...
    #[serde(default = "radius_one")]
    pub radius_weights: Vec<u32>,
    #[serde(default = "default_threshold")]
    pub threshold: u32,
    #[serde(default = "one")]
    pub probability: f64,
}

fn default_unit_bytes() -> u32 {
    256
}
fn half() -> f64 {
    0.5
}
fn radius_one() -> Vec<u32> {
    vec![1]
}
fn default_threshold() -> u32 {
    64
}
fn one() -> f64 {
    1.0
}

/// Same-offset vulnerable cell repeated across rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StripeParams {
    pub byte: u32,
    pub bit: u8,
    pub direction: FlipDirection,
    #[serde(default = "default_threshold")]
    pub threshold: u32,
    #[serde(default = "one")]
    pub probability: f64,
    #[serde(default = "radius_one_u32")]
    pub blast_radius: u32,
    /// Only rows with `row % row_step == row_phase` get an entry.
    #[serde(default = "step_one")]
    pub row_step: u32,
    #[serde(default)]
    pub row_phase: u32,
}

fn radius_one_u32() -> u32 {
    1
}
fn step_one() -> u32 {
    1
}

pub fn generate(geometry: &DramGeometry, p: &FaultGenParams) -> Result<FaultMap, DramError> {
    if !(0.0..=1.0).contains(&p.density) || !(0.0..=1.0).contains(&p.one_to_zero) {
        return Err(DramError::InvalidFault("density and one_to_zero must lie in [0, 1]".into()));
    }
    if p.unit_bytes == 0 || p.radius_weights.iter().all(|&w| w == 0) {
        return Err(DramError::InvalidFault("unit_bytes and radius_weights must be non-zero".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let capacity = geometry.capacity();
    let units = capacity.div_ceil(p.unit_bytes as u64);
    let total_weight: u32 = p.radius_weights.iter().sum();
    let mut entries = Vec::new();
    for u in 0..units {
        if !rng.random_bool(p.density) {
            continue;
        }
        let start = u * p.unit_bytes as u64;
        let len = (p.unit_bytes as u64).min(capacity - start);
        let flat = start + rng.random_range(0..len);
        let bit = rng.random_range(0..8u8);
        let direction = if rng.random_bool(p.one_to_zero) {
            FlipDirection::OneToZero
        } else {
            FlipDirection::ZeroToOne
        };
        let mut pick = rng.random_range(0..total_weight);
        let mut radius = 1;
        for (i, &w) in p.radius_weights.iter().enumerate() {
            if pick < w {
                radius = i as u32 + 1;
                break;
            }
            pick -= w;
        }
        let row_bytes = geometry.bytes_per_row as u64;
        let flat_row = flat / row_bytes;
        let r = RowAddr {
            bank: (flat_row / geometry.rows_per_bank as u64) as u32,
            row: (flat_row % geometry.rows_per_bank as u64) as u32,
        };
        let victim = geometry.coordinate_of(r, (flat % row_bytes) as u32, bit);
        entries.push(FaultEntry {
            victim,
            direction,
            threshold: p.threshold,
            probability: p.probability,
            blast_radius: radius,
        });
    }
    FaultMap::new(geometry, entries)
}

pub fn stripe(geometry: &DramGeometry, p: &StripeParams) -> Result<FaultMap, DramError> {
    if p.row_step == 0 {
        return Err(DramError::InvalidFault("row_step must be at least 1".into()));
    }
    let mut entries = Vec::new();
    for bank in 0..geometry.total_banks() {
        for row in (0..geometry.rows_per_bank).filter(|r| r % p.row_step == p.row_phase) {
            let victim = geometry.coordinate_of(RowAddr { bank, row }, p.byte, p.bit);
            entries.push(FaultEntry {
                victim,
                direction: p.direction,
                threshold: p.threshold,
                probability: p.probability,
                blast_radius: p.blast_radius,
            });
        }
    }
    FaultMap::new(geometry, entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_victims_rejected() {
        let g = DramGeometry::default();
        let c = g.coordinate_of(RowAddr { bank: 0, row: 3 }, 5, 1);
        let e = FaultEntry::new(c, FlipDirection::OneToZero, 4);
        assert!(FaultMap::new(&g, vec![e, e]).is_err());
        assert!(FaultMap::new(&g, vec![e]).is_ok());
    }

    #[test]
    fn bad_parameters_rejected() {
        let g = DramGeometry::default();
        let c = g.coordinate_of(RowAddr { bank: 0, row: 3 }, 5, 1);
        let base = FaultEntry::new(c, FlipDirection::OneToZero, 4);
        for bad in [
            FaultEntry { threshold: 0, ..base },
            FaultEntry { blast_radius: 0, ..base },
            FaultEntry { probability: 0.0, ..base },
            FaultEntry { probability: 1.5, ..base },
        ] {
            assert!(FaultMap::new(&g, vec![bad]).is_err());
        }
    }

    #[test]
    fn generation_is_seeded() {
        let g = DramGeometry::default();
        let p = FaultGenParams {
            seed: 9,
            density: 0.3,
            unit_bytes: 256,
            one_to_zero: 0.5,
            radius_weights: vec![3, 1],
            threshold: 10,
            probability: 1.0,
        };
        let a = generate(&g, &p).unwrap();
        let b = generate(&g, &p).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty());
        assert!(a.entries().iter().all(|e| (1..=2).contains(&e.blast_radius)));
    }

    #[test]
    fn stripe_covers_selected_rows() {
        let g = DramGeometry::default();
        let p = StripeParams {
            byte: 3,
            bit: 0,
            direction: FlipDirection::OneToZero,
            threshold: 8,
            probability: 1.0,
            blast_radius: 1,
            row_step: 2,
            row_phase: 1,
        };
        let m = stripe(&g, &p).unwrap();
        assert_eq!(m.len(), 2 * 64);
        assert!(m.entries().iter().all(|e| e.victim.row % 2 == 1 && e.victim.byte == 3));
    }
}
