use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AttackScenario, Bypass, Lp, ObjectKind, Origin, TargetBit, TargetClass};
use crate::cache::{CacheConfig, CacheError, CacheState, UncachedKind};
use crate::defense::{Countermeasure, DefenseError, Defenses, MemPort};
use crate::dram::{Dram, DramConfig, DramCoordinate, DramError, FaultMap, FlipDirection, RowAddr};
use crate::osmem::{
    parse_records, AllocKind, Creds, FileMode, FrameTag, OsConfig, OsError, OsState, PasswdField, Pte, PASSWD,
    SUDO, SUDO_CHECK_OFFSET,
};

pub const ATTACKER_UID: u32 = 1001;
pub const NETWORK_UID: u32 = 65534;
pub(crate) const VICTIM_FILE: &str = "/var/lib/victim/object";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WorldConfig {
    pub dram: DramConfig,
    pub faults: FaultMap,
    /// Cells that turn vulnerable after defenses were installed.
    pub late_faults: FaultMap,
    pub cache: CacheConfig,
    pub os: OsConfig,
    pub defenses: Vec<Countermeasure>,
    pub seed: u64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error(transparent)]
    Dram(#[from] DramError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Os(#[from] OsError),
    #[error(transparent)]
    Defense(#[from] DefenseError),
}

/// Where the victim object ended up.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Victim {
    PageTable { pid: u32, base: u64, frame: u64 },
    Anon { pid: u32, vpage: u64, frame: u64 },
    File { path: String, frame: u64 },
}

impl Victim {
    pub fn frame(&self) -> u64 {
        match *self {
            Victim::PageTable { frame, .. } | Victim::Anon { frame, .. } | Victim::File { frame, .. } => frame,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Attacker {
    pub uid: u32,
    pub name: String,
    pub pid: u32,
    pub victim_pid: Option<u32>,
    /// Frames the attacker can hammer through its bypass.
    pub frames: BTreeSet<u64>,
    pub kind: Option<AllocKind>,
    pub uncached: Option<UncachedKind>,
    /// Data frame every sprayed page-table entry points at.
    pub d_frame: Option<u64>,
    pub next_pt_base: u64,
    pub seeded: bool,
}

/// One isolated simulation instance.
#[derive(Debug, Clone)]
pub struct World {
    pub dram: Dram,
    pub cache: CacheState,
    pub os: OsState,
    pub defenses: Defenses,
    pub tick: u64,
    pub(crate) att: Attacker,
}

impl World {
    pub fn new(cfg: &WorldConfig) -> Result<Self, WorldError> {
        let defenses = Defenses::new(cfg.defenses.clone(), cfg.seed)?;
        let mut dram_cfg = cfg.dram;
        defenses.adjust_dram(&mut dram_cfg);
        let mut dram = Dram::new(dram_cfg, cfg.faults.clone(), cfg.seed)?;
        let mut os = OsState::new(cfg.os.clone(), &dram)?;
        defenses.install(&mut os, &dram)?;
        os.boot()?;
        dram.add_faults(&cfg.late_faults)?;
        let cache = CacheState::new(cfg.cache.clone(), dram.geometry().capacity())?;
        Ok(Self {
            dram,
            cache,
            os,
            defenses,
            tick: 0,
            att: Attacker::default(),
        })
    }

    /// Runs `f` with the OS and a read port that honours ECC.
    pub fn with_port<R>(&mut self, f: impl FnOnce(&mut OsState, &mut MemPort) -> R) -> R {
        let ecc = self.defenses.ecc();
        let mut port = MemPort::new(&mut self.dram, ecc);
        f(&mut self.os, &mut port)
    }

    pub fn attacker_uid(&self) -> u32 {
        self.att.uid
    }

    /// Sets up attacker and victim principals for a scenario.
    pub(crate) fn prepare(&mut self, s: &AttackScenario) -> Result<(), OsError> {
        if self.att.pid != 0 {
            return Ok(());
        }
        let a = &s.attack;
        let network = a.origin == Origin::Network;
        self.att.uid = if network { NETWORK_UID } else { ATTACKER_UID };
        self.att.name = if network { "nobody".into() } else { "alice".into() };
        let creds = Creds {
            pagemap_read: a.origin == Origin::PPro,
            dedup_control: a.origin == Origin::PPro,
        };
        self.att.pid = self.os.spawn(self.att.uid, &self.att.name.clone(), creds);
        self.att.kind = Some(match (network, a.bypass) {
            (true, _) => AllocKind::NetBuffer,
            (false, Bypass::Ba3) => AllocKind::Dma,
            _ => AllocKind::Normal,
        });
        if a.bypass == Bypass::Ba3 {
            self.att.uncached = Some(if network { UncachedKind::Rdma } else { UncachedKind::Dma });
        }
        self.self_check_classes(s);
        let victim_uid = if s.target.class.privilege_differs() { 0 } else { self.att.uid };
        match s.target.object {
            ObjectKind::PageTable => {
                let uid = self.att.uid;
                let d = self.os.alloc_frame(FrameTag::User(uid), AllocKind::Normal)?;
                let page = self.os.page_bytes() as usize;
                self.with_port(|os, p| crate::osmem::PhysMem::write(p, os.frame_phys(d), &vec![0x41; page]))?;
                self.att.d_frame = Some(d);
                if self.att.kind == Some(AllocKind::Normal) && self.att.uncached.is_none() {
                    self.att.frames.insert(d);
                }
            }
            ObjectKind::Pointer if a.lp == Lp::A4 => {
                let mut content = vec![0; self.os.page_bytes() as usize];
                let off = s.target.offset as usize;
                content[off..off + 8].copy_from_slice(&s.target.value.to_le_bytes());
                let mode = FileMode {
                    owner: victim_uid,
                    owner_writable: true,
                    world_readable: s.target.class.readable(),
                };
                self.os.create_file(VICTIM_FILE, content, mode);
            }
            ObjectKind::Pointer => {
                let pid = self.os.spawn(victim_uid, "victim", Creds::default());
                // A stack page, so later objects need no fresh page-table page.
                self.with_port(|os, p| os.mmap_anon(pid, 1, AllocKind::Normal, p))?;
                self.att.victim_pid = Some(pid);
            }
            _ => {}
        }
        Ok(())
    }

    fn self_check_classes(&self, s: &AttackScenario) {
        debug_assert!(s.target.object != ObjectKind::PageTable || s.target.class == TargetClass::Dpuo);
    }

    /// Allocates one frame the attacker can hammer.
    pub(crate) fn alloc_attacker(&mut self) -> Result<u64, OsError> {
        let kind = self.att.kind.unwrap_or(AllocKind::Normal);
        let f = self.os.alloc_frame(FrameTag::User(self.att.uid), kind)?;
        if let Some(k) = self.att.uncached {
            let phys = self.os.frame_phys(f);
            if self.cache.uncached_kind(phys).is_none() {
                self.cache
                    .add_uncached(phys..phys + self.os.page_bytes(), k)
                    .map_err(|e| OsError::InvalidConfig(e.to_string()))?;
            }
        }
        self.att.frames.insert(f);
        Ok(f)
    }

    /// Plain attacker memory that is not reachable through the bypass.
    pub(crate) fn alloc_padding(&mut self) -> Result<u64, OsError> {
        self.os.alloc_frame(FrameTag::User(self.att.uid), AllocKind::Normal)
    }

    pub(crate) fn victim_path(s: &AttackScenario) -> Option<&'static str> {
        match s.target.object {
            ObjectKind::PasswdUid => Some(PASSWD),
            ObjectKind::Opcode => Some(SUDO),
            ObjectKind::Pointer if s.attack.lp == Lp::A4 => Some(VICTIM_FILE),
            _ => None,
        }
    }

    /// Brings one instance of the victim object into memory.
    pub(crate) fn create_victim(&mut self, s: &AttackScenario) -> Result<Victim, OsError> {
        if let Some(path) = Self::victim_path(s) {
            let e = self.with_port(|os, p| os.load_file(path, p))?;
            return Ok(Victim::File { path: path.into(), frame: e[0].frame });
        }
        match s.target.object {
            ObjectKind::PageTable => {
                let pid = self.att.pid;
                let d = self.att.d_frame.expect("prepared");
                let per = self.os.page_bytes() / 8;
                let base = self.att.next_pt_base;
                self.att.next_pt_base += per;
                for v in base..base + per {
                    self.with_port(|os, p| os.map_frame(pid, v, d, true, p))?;
                }
                let frame = self.os.process(pid)?.pt_pages[(base / per) as usize].expect("just mapped");
                Ok(Victim::PageTable { pid, base, frame })
            }
            _ => {
                let pid = self.att.victim_pid.expect("prepared");
                let off = s.target.offset as u64;
                let value = s.target.value.to_le_bytes();
                let (vpage, frame) = self.with_port(|os, p| {
                    let (v, f) = os.mmap_anon(pid, 1, AllocKind::Normal, p)?[0];
                    os.os_write(pid, v, off, &value, p)?;
                    Ok::<_, OsError>((v, f))
                })?;
                Ok(Victim::Anon { pid, vpage, frame })
            }
        }
    }

    /// Page content the victim object will have once placed.
    pub(crate) fn expected_page(&self, s: &AttackScenario) -> Vec<u8> {
        let n = self.os.page_bytes() as usize;
        let mut page = vec![0; n];
        if let Some(path) = Self::victim_path(s) {
            let c = &self.os.disk().get(path).expect("victim file exists").content;
            let k = c.len().min(n);
            page[..k].copy_from_slice(&c[..k]);
            return page;
        }
        match s.target.object {
            ObjectKind::PageTable => {
                let pte = Pte {
                    present: true,
                    writable: true,
                    user: true,
                    frame: self.att.d_frame.expect("prepared"),
                };
                for slot in page.chunks_mut(8) {
                    slot.copy_from_slice(&pte.encode().to_le_bytes());
                }
            }
            _ => {
                let off = s.target.offset as usize;
                page[off..off + 8].copy_from_slice(&s.target.value.to_le_bytes());
            }
        }
        page
    }

    /// Byte offset of the attacked field for passwd targets.
    pub(crate) fn uid_field_start(page: &[u8], user: &str) -> Option<usize> {
        parse_records(page)
            .into_iter()
            .find(|r| r.name == user)
            .map(|r| r.field(PasswdField::Uid).start)
    }

    /// Cells whose flip would serve the attack, as (offset, bit, direction).
    pub(crate) fn relevant_cells(
        &self,
        s: &AttackScenario,
        page: &[u8],
        focus: Option<TargetBit>,
    ) -> Vec<(u32, u8, FlipDirection)> {
        let dir = |byte: u8, bit: u8| {
            if byte >> bit & 1 == 1 {
                FlipDirection::OneToZero
            } else {
                FlipDirection::ZeroToOne
            }
        };
        let mut out = Vec::new();
        match s.target.object {
            ObjectKind::PageTable => {
                let d = self.att.d_frame.expect("prepared");
                let total = self.os.total_frames();
                for slot in 0..page.len() / 8 {
                    for k in 0..(64 - crate::osmem::PTE_FRAME_SHIFT) {
                        let pos = crate::osmem::PTE_FRAME_SHIFT + k;
                        if (d ^ (1u64 << k)) >= total {
                            continue;
                        }
                        let off = slot * 8 + pos as usize / 8;
                        let bit = (pos % 8) as u8;
                        out.push((off as u32, bit, dir(page[off], bit)));
                    }
                }
            }
            ObjectKind::Pointer => {
                for off in s.target.offset..s.target.offset + 8 {
                    for bit in 0..8 {
                        out.push((off, bit, dir(page[off as usize], bit)));
                    }
                }
            }
            ObjectKind::Opcode => {
                out.push((SUDO_CHECK_OFFSET as u32, 0, FlipDirection::OneToZero));
            }
            ObjectKind::PasswdUid => {
                let (Some(tb), Some(start)) = (focus, Self::uid_field_start(page, &s.target.user)) else {
                    return out;
                };
                let off = start + tb.byte as usize;
                if off < page.len() && dir(page[off], tb.bit) == tb.direction {
                    out.push((off as u32, tb.bit, tb.direction));
                }
            }
        }
        out
    }

    pub(crate) fn fault_index(&self) -> HashMap<DramCoordinate, FlipDirection> {
        self.dram.faults().entries().iter().map(|e| (e.victim, e.direction)).collect()
    }

    /// Whether the frame holds a known vulnerable cell at a useful spot.
    pub(crate) fn has_useful_fault(
        &self,
        frame: u64,
        cells: &[(u32, u8, FlipDirection)],
        index: &HashMap<DramCoordinate, FlipDirection>,
    ) -> bool {
        let base = self.os.frame_phys(frame);
        cells.iter().any(|&(off, bit, dir)| {
            self.dram
                .map(base + off as u64)
                .is_ok_and(|c| index.get(&c.with_bit(bit)) == Some(&dir))
        })
    }

    /// Rows of hammerable attacker frames, minus the given frame's row.
    pub(crate) fn owned_rows(&self, except: Option<u64>) -> BTreeSet<RowAddr> {
        let skip = except.map(|f| self.os.frame_row(f));
        self.att
            .frames
            .iter()
            .map(|&f| self.os.frame_row(f))
            .filter(|r| Some(*r) != skip)
            .collect()
    }
}
