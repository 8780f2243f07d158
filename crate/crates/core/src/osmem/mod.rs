//! Frame allocation, page tables, page cache with write-back, and dedup.

mod buddy;
mod dedup;
mod files;
mod pagecache;
mod process;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dram::{Dram, DramError, RowAddr};

pub use buddy::{AllocKind, AllocRequest, BuddyAllocator, FrameTag, FrameView, PlacementPolicy};
pub use files::{
    default_disk, default_passwd, default_shadow, default_sudo, login_uid, parse_records, Actor, Disk,
    FileMode, FileObject, PasswdField, PasswdRecord, OPCODE_JE, OPCODE_JNE, PASSWD, SHADOW, SUDO,
    SUDO_CHECK_OFFSET,
};
pub use pagecache::PageCacheEntry;
pub use process::{Creds, Mapping, Process, Pte, PTE_FRAME_SHIFT};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OsError {
    #[error("order {0} exceeds the allocator maximum")]
    OrderTooLarge(u32),
    #[error("out of memory for an order-{order} block")]
    OutOfMemory { order: u32 },
    #[error("frame {0} is not free")]
    FrameBusy(u64),
    #[error("frame {0} is not the start of a live allocation")]
    NotAllocated(u64),
    #[error("no such file: {0}")]
    NoSuchFile(String),
    #[error("no such process: {0}")]
    NoSuchProcess(u32),
    #[error("no record for user {0}")]
    NoSuchRecord(String),
    #[error("virtual page {vpage} of pid {pid} is not mapped")]
    NotMapped { pid: u32, vpage: u64 },
    #[error("permission denied: {0}")]
    PermissionDenied(String),
    #[error("value length {got} differs from field length {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("uncorrectable memory error at {phys:#x}")]
    Uncorrectable { phys: u64 },
    #[error("invalid os config: {0}")]
    InvalidConfig(String),
    #[error("malformed manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error(transparent)]
    Dram(#[from] DramError),
}

/// Byte-level memory port. Defenses that sit on the read path (ECC)
/// implement this around a `Dram`.
pub trait PhysMem {
    fn read(&mut self, phys: u64, len: usize) -> Result<Vec<u8>, OsError>;
    fn write(&mut self, phys: u64, bytes: &[u8]) -> Result<(), OsError>;
}

impl PhysMem for Dram {
    fn read(&mut self, phys: u64, len: usize) -> Result<Vec<u8>, OsError> {
        Ok(self.read_range(phys, len)?)
    }

    fn write(&mut self, phys: u64, bytes: &[u8]) -> Result<(), OsError> {
        Ok(self.write_range(phys, bytes)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OsConfig {
    /// Defaults to the DRAM row size.
    #[serde(default)]
    pub page_bytes: Option<u32>,
    #[serde(default = "default_kernel_frames")]
    pub kernel_boot_frames: u64,
    #[serde(default = "default_cycle")]
    pub reclaim_cycle: usize,
    #[serde(default = "default_max_order")]
    pub max_order: u32,
}

fn default_kernel_frames() -> u64 {
    8
}
fn default_cycle() -> usize {
    4
}
fn default_max_order() -> u32 {
    4
}

impl Default for OsConfig {
    fn default() -> Self {
        Self {
            page_bytes: None,
            kernel_boot_frames: default_kernel_frames(),
            reclaim_cycle: default_cycle(),
            max_order: default_max_order(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OsState {
    config: OsConfig,
    page_bytes: u64,
    alloc: BuddyAllocator,
    disk: Disk,
    page_cache: BTreeMap<(String, u32), PageCacheEntry>,
    reclaim: VecDeque<u64>,
    procs: BTreeMap<u32, Process>,
    next_pid: u32,
    created: BTreeMap<u64, u64>,
    seq: u64,
    mergeable: BTreeSet<(u32, u64)>,
    disk_writes: u64,
}

impl OsState {
    /// Lays frames over DRAM rows; nothing is allocated yet.
    pub fn new(config: OsConfig, dram: &Dram) -> Result<Self, OsError> {
        let g = *dram.geometry();
        let page_bytes = config.page_bytes.unwrap_or(g.bytes_per_row);
        if page_bytes < 8 || !page_bytes.is_power_of_two() || page_bytes > g.bytes_per_row {
            return Err(OsError::InvalidConfig(
                "page_bytes must be a power of two between 8 and bytes_per_row".into(),
            ));
        }
        if config.reclaim_cycle == 0 {
            return Err(OsError::InvalidConfig("reclaim_cycle must be at least 1".into()));
        }
        let frames = g.capacity() / page_bytes as u64;
        if config.kernel_boot_frames >= frames {
            return Err(OsError::InvalidConfig("kernel_boot_frames exceeds memory".into()));
        }
        let rows: Vec<RowAddr> = (0..frames)
            .map(|f| dram.row_of_phys(f * page_bytes as u64))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            alloc: BuddyAllocator::new(rows, config.max_order),
            page_bytes: page_bytes as u64,
            config,
            disk: default_disk(),
            page_cache: BTreeMap::new(),
            reclaim: VecDeque::new(),
            procs: BTreeMap::new(),
            next_pid: 1,
            created: BTreeMap::new(),
            seq: 0,
            mergeable: BTreeSet::new(),
            disk_writes: 0,
        })
    }

    /// Takes the kernel image frames, lowest addresses first.
    pub fn boot(&mut self) -> Result<Vec<u64>, OsError> {
        (0..self.config.kernel_boot_frames)
            .map(|_| {
                self.alloc.alloc_req(AllocRequest {
                    order: 0,
                    tag: FrameTag::Kernel,
                    kind: AllocKind::Kernel,
                })
            })
            .collect()
    }

    pub fn config(&self) -> &OsConfig {
        &self.config
    }

    pub fn page_bytes(&self) -> u64 {
        self.page_bytes
    }

    pub fn allocator(&self) -> &BuddyAllocator {
        &self.alloc
    }

    pub fn allocator_mut(&mut self) -> &mut BuddyAllocator {
        &mut self.alloc
    }

    pub fn disk(&self) -> &Disk {
        &self.disk
    }

    pub fn disk_writes(&self) -> u64 {
        self.disk_writes
    }

    pub fn frame_phys(&self, frame: u64) -> u64 {
        frame * self.page_bytes
    }

    pub fn frame_of_phys(&self, phys: u64) -> u64 {
        phys / self.page_bytes
    }

    pub fn frame_row(&self, frame: u64) -> RowAddr {
        self.alloc.row_of(frame)
    }

    pub fn total_frames(&self) -> u64 {
        self.alloc.total_frames()
    }

    /// Adds a file before any simulation starts.
    pub fn create_file(&mut self, path: &str, content: Vec<u8>, mode: FileMode) {
        self.disk.put(path, FileObject { content, mode });
    }

    pub fn spawn(&mut self, uid: u32, name: &str, creds: Creds) -> u32 {
        let pid = self.next_pid;
        self.next_pid += 1;
        self.procs.insert(pid, Process::new(pid, uid, name, creds));
        pid
    }

    pub fn process(&self, pid: u32) -> Result<&Process, OsError> {
        self.procs.get(&pid).ok_or(OsError::NoSuchProcess(pid))
    }

    fn process_mut(&mut self, pid: u32) -> Result<&mut Process, OsError> {
        self.procs.get_mut(&pid).ok_or(OsError::NoSuchProcess(pid))
    }

    fn ptes_per_page(&self) -> u64 {
        self.page_bytes / 8
    }

    /// Allocates one frame and records its creation order.
    pub fn alloc_frame(&mut self, tag: FrameTag, kind: AllocKind) -> Result<u64, OsError> {
        let f = self.alloc.alloc_req(AllocRequest { order: 0, tag, kind })?;
        self.seq += 1;
        self.created.insert(f, self.seq);
        Ok(f)
    }

    pub fn free_frame(&mut self, frame: u64) -> Result<(), OsError> {
        self.created.remove(&frame);
        self.alloc.free(frame)
    }

    fn pte_phys(&mut self, pid: u32, vpage: u64, mem: &mut dyn PhysMem) -> Result<u64, OsError> {
        let per = self.ptes_per_page();
        let idx = (vpage / per) as usize;
        let uid = self.process(pid)?.uid;
        let existing = self.process(pid)?.pt_pages.get(idx).copied().flatten();
        let pt = match existing {
            Some(pt) => pt,
            None => {
                let pt = self.alloc_frame(FrameTag::PageTable(uid), AllocKind::PageTable)?;
                mem.write(self.frame_phys(pt), &vec![0; self.page_bytes as usize])?;
                let p = self.process_mut(pid)?;
                if p.pt_pages.len() <= idx {
                    p.pt_pages.resize(idx + 1, None);
                }
                p.pt_pages[idx] = Some(pt);
                pt
            }
        };
        Ok(self.frame_phys(pt) + (vpage % per) * 8)
    }

    fn write_pte(&mut self, pid: u32, vpage: u64, pte: Pte, mem: &mut dyn PhysMem) -> Result<(), OsError> {
        let at = self.pte_phys(pid, vpage, mem)?;
        mem.write(at, &pte.encode().to_le_bytes())
    }

    pub fn map_frame(
        &mut self,
        pid: u32,
        vpage: u64,
        frame: u64,
        writable: bool,
        mem: &mut dyn PhysMem,
    ) -> Result<(), OsError> {
        self.install(pid, vpage, Mapping { frame, writable, cow: false }, mem)
    }

    fn install(&mut self, pid: u32, vpage: u64, m: Mapping, mem: &mut dyn PhysMem) -> Result<(), OsError> {
        let pte = Pte {
            present: true,
            writable: m.writable,
            user: true,
            frame: m.frame,
        };
        self.write_pte(pid, vpage, pte, mem)?;
        let p = self.process_mut(pid)?;
        p.mappings.insert(vpage, m);
        p.next_vpage = p.next_vpage.max(vpage + 1);
        Ok(())
    }

    /// Maps fresh zeroed frames at the next free virtual pages.
    pub fn mmap_anon(
        &mut self,
        pid: u32,
        pages: u64,
        kind: AllocKind,
        mem: &mut dyn PhysMem,
    ) -> Result<Vec<(u64, u64)>, OsError> {
        let uid = self.process(pid)?.uid;
        let mut out = Vec::new();
        for _ in 0..pages {
            let f = self.alloc_frame(FrameTag::User(uid), kind)?;
            mem.write(self.frame_phys(f), &vec![0; self.page_bytes as usize])?;
            let v = self.process(pid)?.next_vpage;
            self.map_frame(pid, v, f, true, mem)?;
            out.push((v, f));
        }
        Ok(out)
    }

    /// Maps an existing frame at the next free virtual page.
    pub fn map_shared(&mut self, pid: u32, frame: u64, mem: &mut dyn PhysMem) -> Result<u64, OsError> {
        let v = self.process(pid)?.next_vpage;
        self.map_frame(pid, v, frame, true, mem)?;
        Ok(v)
    }

    pub fn unmap(&mut self, pid: u32, vpage: u64, mem: &mut dyn PhysMem) -> Result<Mapping, OsError> {
        let m = self
            .process_mut(pid)?
            .mappings
            .remove(&vpage)
            .ok_or(OsError::NotMapped { pid, vpage })?;
        let at = self.pte_phys(pid, vpage, mem)?;
        mem.write(at, &[0; 8])?;
        Ok(m)
    }

    /// Unmaps and frees the frame once nothing else maps it.
    pub fn release(&mut self, pid: u32, vpage: u64, mem: &mut dyn PhysMem) -> Result<(), OsError> {
        let m = self.unmap(pid, vpage, mem)?;
        if self.mappers(m.frame) == 0 && matches!(self.alloc.tag(m.frame), FrameTag::User(_)) {
            self.free_frame(m.frame)?;
        }
        Ok(())
    }

    pub fn mappers(&self, frame: u64) -> usize {
        self.procs
            .values()
            .flat_map(|p| p.mappings.values())
            .filter(|m| m.frame == frame)
            .count()
    }

    /// Hardware-style walk: reads the PTE from memory, so flipped entries
    /// resolve wherever their bits now point.
    pub fn walk(&mut self, pid: u32, vpage: u64, mem: &mut dyn PhysMem) -> Result<Option<Pte>, OsError> {
        let per = self.ptes_per_page();
        let Some(pt) = self.process(pid)?.pt_pages.get((vpage / per) as usize).copied().flatten() else {
            return Ok(None);
        };
        let raw = mem.read(self.frame_phys(pt) + (vpage % per) * 8, 8)?;
        let pte = Pte::decode(u64::from_le_bytes(raw.try_into().expect("8 bytes")));
        Ok(pte.present.then_some(pte))
    }

    /// `/proc/self/pagemap`-style lookup of the true backing frame.
    pub fn pagemap_query(&self, pid: u32, vpage: u64) -> Result<u64, OsError> {
        let p = self.process(pid)?;
        if !p.creds.pagemap_read {
            return Err(OsError::PermissionDenied("pagemap requires privilege".into()));
        }
        p.mappings.get(&vpage).map(|m| m.frame).ok_or(OsError::NotMapped { pid, vpage })
    }

    pub fn os_read(
        &mut self,
        pid: u32,
        vpage: u64,
        offset: u64,
        len: usize,
        mem: &mut dyn PhysMem,
    ) -> Result<Vec<u8>, OsError> {
        let m = *self.process(pid)?.mappings.get(&vpage).ok_or(OsError::NotMapped { pid, vpage })?;
        mem.read(self.frame_phys(m.frame) + offset, len)
    }

    /// Store through a mapping; shared copy-on-write frames are split first.
    pub fn os_write(
        &mut self,
        pid: u32,
        vpage: u64,
        offset: u64,
        bytes: &[u8],
        mem: &mut dyn PhysMem,
    ) -> Result<u64, OsError> {
        let mut m = *self.process(pid)?.mappings.get(&vpage).ok_or(OsError::NotMapped { pid, vpage })?;
        if m.cow {
            if self.mappers(m.frame) > 1 {
                let uid = self.process(pid)?.uid;
                let copy = self.alloc_frame(FrameTag::User(uid), AllocKind::Normal)?;
                let content = mem.read(self.frame_phys(m.frame), self.page_bytes as usize)?;
                mem.write(self.frame_phys(copy), &content)?;
                m.frame = copy;
            }
            m = Mapping { frame: m.frame, writable: true, cow: false };
            self.install(pid, vpage, m, mem)?;
        }
        if !m.writable {
            return Err(OsError::PermissionDenied("read-only mapping".into()));
        }
        mem.write(self.frame_phys(m.frame) + offset, bytes)?;
        Ok(m.frame)
    }

    /// Frames charged to `uid`, page tables included.
    pub fn footprint(&self, uid: u32) -> u64 {
        self.alloc
            .count_tag(|t| t == FrameTag::User(uid) || t == FrameTag::PageTable(uid))
    }
}
