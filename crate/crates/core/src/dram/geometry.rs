use serde::{Deserialize, Serialize};

use super::DramError;

/// Channel → DIMM → rank → bank → row hierarchy of a memory system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DramGeometry {
    pub channels: u32,
    pub dimms_per_channel: u32,
    pub ranks_per_dimm: u32,
    pub banks_per_rank: u32,
    pub rows_per_bank: u32,
    pub bytes_per_row: u32,
}

impl Default for DramGeometry {
    fn default() -> Self {
        Self {
            channels: 1,
            dimms_per_channel: 1,
            ranks_per_dimm: 1,
            banks_per_rank: 2,
            rows_per_bank: 128,
            bytes_per_row: 256,
        }
    }
}

impl DramGeometry {
    pub fn new(
        channels: u32,
        dimms_per_channel: u32,
        ranks_per_dimm: u32,
        banks_per_rank: u32,
        rows_per_bank: u32,
        bytes_per_row: u32,
    ) -> Result<Self, DramError> {
        let g = Self {
            channels,
            dimms_per_channel,
            ranks_per_dimm,
            banks_per_rank,
            rows_per_bank,
            bytes_per_row,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), DramError> {
        let counts = [
            ("channels", self.channels),
            ("dimms_per_channel", self.dimms_per_channel),
            ("ranks_per_dimm", self.ranks_per_dimm),
            ("banks_per_rank", self.banks_per_rank),
            ("rows_per_bank", self.rows_per_bank),
            ("bytes_per_row", self.bytes_per_row),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(DramError::InvalidGeometry(format!("{name} must be at least 1")));
            }
        }
        if !self.bytes_per_row.is_power_of_two() {
            return Err(DramError::InvalidGeometry(
                "bytes_per_row must be a power of two".into(),
            ));
        }
        Ok(())
    }

    /// Total capacity in bytes (product of every level).
    pub fn capacity(&self) -> u64 {
        self.total_banks() as u64 * self.rows_per_bank as u64 * self.bytes_per_row as u64
    }

    /// Number of independent banks across the whole system.
    pub fn total_banks(&self) -> u32 {
        self.channels * self.dimms_per_channel * self.ranks_per_dimm * self.banks_per_rank
    }

    pub fn total_rows(&self) -> u64 {
        self.total_banks() as u64 * self.rows_per_bank as u64
    }

    /// Flat bank index of a coordinate.
    pub fn bank_index(&self, c: &DramCoordinate) -> u32 {
        ((c.channel * self.dimms_per_channel + c.dimm) * self.ranks_per_dimm + c.rank)
            * self.banks_per_rank
            + c.bank
    }

    pub fn row_of(&self, c: &DramCoordinate) -> RowAddr {
        RowAddr {
            bank: self.bank_index(c),
            row: c.row,
        }
    }

    /// Offset of the coordinate's byte inside the flat cell array.
    pub(crate) fn cell_index(&self, c: &DramCoordinate) -> usize {
        self.row_base(self.row_of(c)) + c.byte as usize
    }

    pub(crate) fn row_base(&self, r: RowAddr) -> usize {
        (r.bank as usize * self.rows_per_bank as usize + r.row as usize) * self.bytes_per_row as usize
    }

    /// Expands a flat bank index and row back into a full coordinate.
    pub fn coordinate_of(&self, r: RowAddr, byte: u32, bit: u8) -> DramCoordinate {
        let mut b = r.bank;
        let bank = b % self.banks_per_rank;
        b /= self.banks_per_rank;
        let rank = b % self.ranks_per_dimm;
        b /= self.ranks_per_dimm;
        let dimm = b % self.dimms_per_channel;
        let channel = b / self.dimms_per_channel;
        DramCoordinate {
            channel,
            dimm,
            rank,
            bank,
            row: r.row,
            byte,
            bit,
        }
    }

    pub fn check(&self, c: &DramCoordinate) -> Result<(), DramError> {
        let ok = c.channel < self.channels
            && c.dimm < self.dimms_per_channel
            && c.rank < self.ranks_per_dimm
            && c.bank < self.banks_per_rank
            && c.row < self.rows_per_bank
            && c.byte < self.bytes_per_row
            && c.bit < 8;
        if ok {
            Ok(())
        } else {
            Err(DramError::CoordinateOutOfRange(*c))
        }
    }
}

/// Location of a single bit inside the DRAM hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DramCoordinate {
    pub channel: u32,
    pub dimm: u32,
    pub rank: u32,
    pub bank: u32,
    pub row: u32,
    #[serde(rename = "byte")]
    pub byte: u32,
    #[serde(default)]
    pub bit: u8,
}

impl DramCoordinate {
    pub fn with_bit(mut self, bit: u8) -> Self {
        self.bit = bit;
        self
    }
}

/// A row identified by its flat bank index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RowAddr {
    pub bank: u32,
    pub row: u32,
}

impl RowAddr {
    pub fn distance(&self, other: &RowAddr) -> Option<u32> {
        (self.bank == other.bank).then(|| self.row.abs_diff(other.row))
    }
}

/// Physical address → coordinate decomposition.
///
/// `RowMajor` places the byte offset in the low bits, then row, bank, rank,
/// DIMM and channel. `XorBank` additionally XORs the low row bits selected by
/// `row_mask` into the bank index (requires a power-of-two bank count).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum AddressMapping {
    #[default]
    RowMajor,
    XorBank { row_mask: u32 },
}

impl AddressMapping {
    pub fn validate(&self, g: &DramGeometry) -> Result<(), DramError> {
        match *self {
            AddressMapping::RowMajor => Ok(()),
            AddressMapping::XorBank { row_mask } => {
                if !g.banks_per_rank.is_power_of_two() || row_mask >= g.banks_per_rank {
                    Err(DramError::InvalidGeometry(
                        "xor-bank mapping needs a power-of-two bank count and row_mask < banks_per_rank"
                            .into(),
                    ))
                } else {
                    Ok(())
                }
            }
        }
    }

    fn bank_xor(&self, row: u32) -> u32 {
        match *self {
            AddressMapping::RowMajor => 0,
            AddressMapping::XorBank { row_mask } => row & row_mask,
        }
    }
}

/// Decomposes a physical address into its DRAM coordinate (bit index 0).
pub fn map_address(
    phys: u64,
    geometry: &DramGeometry,
    mapping: &AddressMapping,
) -> Result<DramCoordinate, DramError> {
    if phys >= geometry.capacity() {
        return Err(DramError::AddressOutOfRange {
            phys,
            capacity: geometry.capacity(),
        });
    }
    let mut a = phys;
    let byte = (a % geometry.bytes_per_row as u64) as u32;
    a /= geometry.bytes_per_row as u64;
    let row = (a % geometry.rows_per_bank as u64) as u32;
    a /= geometry.rows_per_bank as u64;
    let bank = (a % geometry.banks_per_rank as u64) as u32 ^ mapping.bank_xor(row);
    a /= geometry.banks_per_rank as u64;
    let rank = (a % geometry.ranks_per_dimm as u64) as u32;
    a /= geometry.ranks_per_dimm as u64;
    let dimm = (a % geometry.dimms_per_channel as u64) as u32;
    let channel = (a / geometry.dimms_per_channel as u64) as u32;
    Ok(DramCoordinate {
        channel,
        dimm,
        rank,
        bank,
        row,
        byte,
        bit: 0,
    })
}

/// Inverse of [`map_address`]; the bit index is ignored.
pub fn unmap_address(
    c: &DramCoordinate,
    geometry: &DramGeometry,
    mapping: &AddressMapping,
) -> Result<u64, DramError> {
    geometry.check(&c.with_bit(0))?;
    let bank = c.bank ^ mapping.bank_xor(c.row);
    let mut a = c.channel as u64;
    a = a * geometry.dimms_per_channel as u64 + c.dimm as u64;
    a = a * geometry.ranks_per_dimm as u64 + c.rank as u64;
    a = a * geometry.banks_per_rank as u64 + bank as u64;
    a = a * geometry.rows_per_bank as u64 + c.row as u64;
    Ok(a * geometry.bytes_per_row as u64 + c.byte as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> DramGeometry {
        DramGeometry::new(1, 1, 1, 2, 4, 64).unwrap()
    }

    #[test]
    fn zero_address_is_origin() {
        let c = map_address(0, &DramGeometry::default(), &AddressMapping::RowMajor).unwrap();
        assert_eq!(c, DramCoordinate { channel: 0, dimm: 0, rank: 0, bank: 0, row: 0, byte: 0, bit: 0 });
    }

    #[test]
    fn second_row_of_first_bank() {
        let c = map_address(64, &toy(), &AddressMapping::RowMajor).unwrap();
        assert_eq!((c.bank, c.row, c.byte), (0, 1, 0));
    }

    #[test]
    fn capacity_is_out_of_range() {
        let g = toy();
        assert!(matches!(
            map_address(g.capacity(), &g, &AddressMapping::RowMajor),
            Err(DramError::AddressOutOfRange { .. })
        ));
    }

    #[test]
    fn toy_geometry_bijection_against_enumeration() {
        // Brute-force inverse: enumerate every coordinate in hierarchy order
        // and index it by the address it must come from.
        let g = toy();
        let mut expected = Vec::new();
        for bank in 0..2 {
            for row in 0..4 {
                for byte in 0..64 {
                    expected.push((bank, row, byte));
                }
            }
        }
        assert_eq!(expected.len(), 512);
        for (phys, &(bank, row, byte)) in expected.iter().enumerate() {
            let c = map_address(phys as u64, &g, &AddressMapping::RowMajor).unwrap();
            assert_eq!((c.bank, c.row, c.byte), (bank, row, byte));
            assert_eq!(unmap_address(&c, &g, &AddressMapping::RowMajor).unwrap(), phys as u64);
        }
    }

    #[test]
    fn invalid_geometries_rejected() {
        assert!(DramGeometry::new(0, 1, 1, 1, 1, 64).is_err());
        assert!(DramGeometry::new(1, 1, 1, 1, 1, 48).is_err());
        let g = toy();
        assert!(AddressMapping::XorBank { row_mask: 2 }.validate(&g).is_err());
        assert!(AddressMapping::XorBank { row_mask: 1 }.validate(&g).is_ok());
    }
}
