use std::fmt::Write as _;

use super::{Dram, DramError, DramGeometry, RowAddr};

/// One non-zero row recovered from a text dump.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DumpRow {
    pub row: RowAddr,
    pub bytes: Vec<u8>,
}

/// Line-oriented hex dump of every row holding a non-zero byte.
///
/// ```text
/// # dram-dump v1 banks=2 rows=128 bytes=256
/// 0 17 3a783a...
/// ```
pub fn dump_rows(dram: &Dram) -> String {
    let g = dram.geometry();
    let mut out = format!(
        "# dram-dump v1 banks={} rows={} bytes={}\n",
        g.total_banks(),
        g.rows_per_bank,
        g.bytes_per_row
    );
    for bank in 0..g.total_banks() {
        for row in 0..g.rows_per_bank {
            let r = RowAddr { bank, row };
            let bytes = dram.row_bytes(r);
            if bytes.iter().any(|&b| b != 0) {
                let _ = writeln!(out, "{bank} {row} {}", hex::encode(bytes));
            }
        }
    }
    out
}

pub fn parse_dump(text: &str, geometry: &DramGeometry) -> Result<Vec<DumpRow>, DramError> {
    let err = |line: usize, reason: &str| DramError::Dump {
        line,
        reason: reason.to_string(),
    };
    let mut lines = text.lines().enumerate();
    let expected = format!(
        "# dram-dump v1 banks={} rows={} bytes={}",
        geometry.total_banks(),
        geometry.rows_per_bank,
        geometry.bytes_per_row
    );
    match lines.next() {
        Some((_, h)) if h.trim() == expected => {}
        _ => return Err(err(1, "missing or mismatched header")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(b), Some(r), Some(h), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(err(n, "expected `bank row hex`"));
        };
        let bank: u32 = b.parse().map_err(|_| err(n, "bad bank index"))?;
        let row: u32 = r.parse().map_err(|_| err(n, "bad row index"))?;
        if bank >= geometry.total_banks() || row >= geometry.rows_per_bank {
            return Err(err(n, "row outside geometry"));
        }
        let bytes = hex::decode(h).map_err(|_| err(n, "bad hex"))?;
        if bytes.len() != geometry.bytes_per_row as usize {
            return Err(err(n, "row length mismatch"));
        }
        rows.push(DumpRow {
            row: RowAddr { bank, row },
            bytes,
        });
    }
    Ok(rows)
}

impl Dram {
    /// Overwrites rows from a parsed dump as legitimate writes.
    pub fn load_rows(&mut self, rows: &[DumpRow]) -> Result<(), DramError> {
        let g = *self.geometry();
        for r in rows {
            for (i, b) in r.bytes.iter().enumerate() {
                self.write_bits(&g.coordinate_of(r.row, i as u32, 0), *b)?;
            }
        }
        Ok(())
    }
}
