use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub const PTE_PRESENT: u64 = 1;
pub const PTE_WRITABLE: u64 = 1 << 1;
pub const PTE_USER: u64 = 1 << 2;
pub const PTE_FRAME_SHIFT: u32 = 12;

/// Decoded page-table entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pte {
    pub present: bool,
    pub writable: bool,
    pub user: bool,
    pub frame: u64,
}

impl Pte {
    pub fn encode(&self) -> u64 {
        let mut v = self.frame << PTE_FRAME_SHIFT;
        if self.present {
            v |= PTE_PRESENT;
        }
        if self.writable {
            v |= PTE_WRITABLE;
        }
        if self.user {
            v |= PTE_USER;
        }
        v
    }

    pub fn decode(v: u64) -> Self {
        Pte {
            present: v & PTE_PRESENT != 0,
            writable: v & PTE_WRITABLE != 0,
            user: v & PTE_USER != 0,
            frame: v >> PTE_FRAME_SHIFT,
        }
    }
}

/// Privileged interfaces a process may use.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Creds {
    pub pagemap_read: bool,
    pub dedup_control: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mapping {
    pub frame: u64,
    pub writable: bool,
    /// Copy-on-write after a dedup merge.
    pub cow: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Process {
    pub pid: u32,
    pub uid: u32,
    pub name: String,
    pub creds: Creds,
    /// Page-table pages; virtual page `v` lives in `pt_pages[v / per_page]`.
    pub pt_pages: Vec<Option<u64>>,
    pub mappings: BTreeMap<u64, Mapping>,
    pub next_vpage: u64,
}

impl Process {
    pub fn new(pid: u32, uid: u32, name: &str, creds: Creds) -> Self {
        Process {
            pid,
            uid,
            name: name.to_string(),
            creds,
            pt_pages: Vec::new(),
            mappings: BTreeMap::new(),
            next_vpage: 0,
        }
    }
}
