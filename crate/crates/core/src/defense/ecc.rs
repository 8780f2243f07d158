use crate::dram::Dram;
use crate::osmem::{OsError, PhysMem};

/// Per-word error-correcting code on the read path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ecc {
    pub word_bytes: u32,
    /// Three or more co-word flips crafted to look like a valid codeword.
    pub crafted_pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WordStatus {
    Clean,
    Corrected,
    Uncorrectable,
    /// Enough flips to reach another valid codeword; passes unnoticed.
    Undetected,
}

impl Ecc {
    fn word_of(&self, phys: u64) -> u64 {
        phys - phys % self.word_bytes as u64
    }

    pub fn status(&self, dram: &Dram, phys: u64) -> Result<WordStatus, OsError> {
        let w = self.word_of(phys);
        let data = dram.read_range(w, self.word_bytes as usize)?;
        let mut diff = 0;
        for (i, b) in data.iter().enumerate() {
            diff += (b ^ dram.written_phys(w + i as u64)?).count_ones();
        }
        Ok(match diff {
            0 => WordStatus::Clean,
            1 => WordStatus::Corrected,
            2 => WordStatus::Uncorrectable,
            _ if self.crafted_pass => WordStatus::Undetected,
            _ => WordStatus::Uncorrectable,
        })
    }
}

/// Byte port over DRAM, optionally behind ECC. Every OS and attacker
/// read goes through one of these.
pub struct MemPort<'a> {
    pub dram: &'a mut Dram,
    pub ecc: Option<Ecc>,
}

impl<'a> MemPort<'a> {
    pub fn new(dram: &'a mut Dram, ecc: Option<Ecc>) -> Self {
        Self { dram, ecc }
    }
}

impl PhysMem for MemPort<'_> {
    fn read(&mut self, phys: u64, len: usize) -> Result<Vec<u8>, OsError> {
        let Some(ecc) = self.ecc else {
            return Ok(self.dram.read_range(phys, len)?);
        };
        let mut out = Vec::with_capacity(len);
        for a in phys..phys + len as u64 {
            let b = match ecc.status(self.dram, a)? {
                WordStatus::Corrected => self.dram.written_phys(a)?,
                WordStatus::Uncorrectable => return Err(OsError::Uncorrectable { phys: ecc.word_of(a) }),
                WordStatus::Clean | WordStatus::Undetected => self.dram.read_phys(a)?,
            };
            out.push(b);
        }
        Ok(out)
    }

    fn write(&mut self, phys: u64, bytes: &[u8]) -> Result<(), OsError> {
        if let Some(ecc) = self.ecc {
            // Partial-word stores are read-modify-write, which scrubs.
            let mut w = ecc.word_of(phys);
            while w < phys + bytes.len() as u64 {
                if ecc.status(self.dram, w)? == WordStatus::Corrected {
                    for a in w..w + ecc.word_bytes as u64 {
                        let v = self.dram.written_phys(a)?;
                        self.dram.write_phys(a, v)?;
                    }
                }
                w += ecc.word_bytes as u64;
            }
        }
        Ok(self.dram.write_range(phys, bytes)?)
    }
}
