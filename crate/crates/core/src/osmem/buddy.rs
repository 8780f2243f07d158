use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Debug;
use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::OsError;
use crate::dram::RowAddr;

/// Who owns a physical frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameTag {
    Free,
    Kernel,
    /// Page-table page of a process owned by `uid`.
    PageTable(u32),
    User(u32),
    PageCache,
    /// Evicted page-cache frame parked in the reclaim ring.
    Reclaim,
    /// Blacklisted or guard frame, never handed out.
    Reserved,
}

impl FrameTag {
    pub fn is_kernel_domain(self) -> bool {
        matches!(self, FrameTag::Kernel | FrameTag::PageTable(_))
    }

    pub fn is_user_domain(self) -> bool {
        matches!(self, FrameTag::User(_) | FrameTag::PageCache | FrameTag::Reclaim)
    }
}

/// What an allocation is for; placement policies key off this.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AllocKind {
    Normal,
    Dma,
    NetBuffer,
    PageTable,
    PageCache,
    Kernel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocRequest {
    pub order: u32,
    pub tag: FrameTag,
    pub kind: AllocKind,
}

/// Read-only view a placement policy may consult.
pub struct FrameView<'a> {
    pub tags: &'a [FrameTag],
    pub rows: &'a [RowAddr],
}

impl FrameView<'_> {
    /// Frames whose row lies in `bank` at `row`.
    pub fn frames_in_row(&self, r: RowAddr) -> impl Iterator<Item = u64> + '_ {
        self.rows.iter().enumerate().filter(move |(_, x)| **x == r).map(|(f, _)| f as u64)
    }
}

/// Constraint hook installed by defenses.
pub trait PlacementPolicy: Debug + Send + Sync {
    fn permits(&self, frames: Range<u64>, req: &AllocRequest, view: &FrameView) -> bool;

    /// Frames that must stay unused while this allocation lives.
    fn guards_for(&self, _frames: Range<u64>, _req: &AllocRequest, _view: &FrameView) -> Vec<u64> {
        Vec::new()
    }
}

/// Lowest-address-first buddy allocator over physical frames.
#[derive(Debug, Clone)]
pub struct BuddyAllocator {
    max_order: u32,
    free: Vec<BTreeSet<u64>>,
    tags: Vec<FrameTag>,
    rows: Vec<RowAddr>,
    policies: Vec<Arc<dyn PlacementPolicy>>,
    guard_refs: Vec<u32>,
    guards_of: BTreeMap<u64, Vec<u64>>,
    orders: BTreeMap<u64, u32>,
}

impl BuddyAllocator {
    /// `rows[f]` is the DRAM row backing frame `f`.
    pub fn new(rows: Vec<RowAddr>, max_order: u32) -> Self {
        let total = rows.len() as u64;
        let mut free = vec![BTreeSet::new(); max_order as usize + 1];
        let mut f = 0;
        while f < total {
            let mut o = max_order;
            while o > 0 && (f % (1 << o) != 0 || f + (1 << o) > total) {
                o -= 1;
            }
            free[o as usize].insert(f);
            f += 1 << o;
        }
        Self {
            max_order,
            free,
            tags: vec![FrameTag::Free; total as usize],
            guard_refs: vec![0; total as usize],
            rows,
            policies: Vec::new(),
            guards_of: BTreeMap::new(),
            orders: BTreeMap::new(),
        }
    }

    pub fn total_frames(&self) -> u64 {
        self.tags.len() as u64
    }

    pub fn max_order(&self) -> u32 {
        self.max_order
    }

    pub fn free_frames(&self) -> u64 {
        self.free.iter().enumerate().map(|(o, s)| s.len() as u64 * (1 << o)).sum()
    }

    /// Free blocks as (start, order), lowest address first.
    pub fn free_blocks(&self) -> Vec<(u64, u32)> {
        let mut v: Vec<(u64, u32)> = self
            .free
            .iter()
            .enumerate()
            .flat_map(|(o, s)| s.iter().map(move |&f| (f, o as u32)))
            .collect();
        v.sort();
        v
    }

    pub fn tag(&self, frame: u64) -> FrameTag {
        self.tags[frame as usize]
    }

    pub fn tags(&self) -> &[FrameTag] {
        &self.tags
    }

    pub fn row_of(&self, frame: u64) -> RowAddr {
        self.rows[frame as usize]
    }

    pub fn rows(&self) -> &[RowAddr] {
        &self.rows
    }

    pub fn set_tag(&mut self, frame: u64, tag: FrameTag) {
        self.tags[frame as usize] = tag;
    }

    pub fn add_policy(&mut self, p: Arc<dyn PlacementPolicy>) {
        self.policies.push(p);
    }

    fn view(&self) -> FrameView<'_> {
        FrameView {
            tags: &self.tags,
            rows: &self.rows,
        }
    }

    fn is_free(&self, frame: u64) -> bool {
        self.tags.get(frame as usize) == Some(&FrameTag::Free)
    }

    pub fn alloc(&mut self, order: u32, tag: FrameTag) -> Result<u64, OsError> {
        self.alloc_req(AllocRequest {
            order,
            tag,
            kind: AllocKind::Normal,
        })
    }

    pub fn alloc_req(&mut self, req: AllocRequest) -> Result<u64, OsError> {
        if req.order > self.max_order {
            return Err(OsError::OrderTooLarge(req.order));
        }
        let size = 1u64 << req.order;
        let mut chosen = None;
        'blocks: for (start, o) in self.free_blocks() {
            if o < req.order {
                continue;
            }
            for sub in (start..start + (1 << o)).step_by(size as usize) {
                let range = sub..sub + size;
                let view = self.view();
                if !self.policies.iter().all(|p| p.permits(range.clone(), &req, &view)) {
                    continue;
                }
                let mut guards: Vec<u64> =
                    self.policies.iter().flat_map(|p| p.guards_for(range.clone(), &req, &view)).collect();
                guards.sort();
                guards.dedup();
                let guards_ok = guards.iter().all(|&g| {
                    !range.contains(&g)
                        && (g as usize) < self.tags.len()
                        && (self.is_free(g) || self.guard_refs[g as usize] > 0)
                });
                if guards_ok {
                    chosen = Some((start, o, sub, guards));
                    break 'blocks;
                }
            }
        }
        let Some((block, block_order, sub, guards)) = chosen else {
            return Err(OsError::OutOfMemory { order: req.order });
        };
        self.carve(block, block_order, sub, req.order);
        for f in sub..sub + size {
            self.tags[f as usize] = req.tag;
        }
        for &g in &guards {
            if self.guard_refs[g as usize] == 0 {
                self.reserve(g)?;
            }
            self.guard_refs[g as usize] += 1;
        }
        if !guards.is_empty() {
            self.guards_of.insert(sub, guards);
        }
        self.orders.insert(sub, req.order);
        Ok(sub)
    }

    /// Splits the free block `(block, block_order)` until `target` of
    /// `order` is isolated; the other halves go back on the free lists.
    fn carve(&mut self, block: u64, block_order: u32, target: u64, order: u32) {
        self.free[block_order as usize].remove(&block);
        let (mut cur, mut o) = (block, block_order);
        while o > order {
            o -= 1;
            let half = 1u64 << o;
            if target < cur + half {
                self.free[o as usize].insert(cur + half);
            } else {
                self.free[o as usize].insert(cur);
                cur += half;
            }
        }
    }

    fn containing_free_block(&self, frame: u64) -> Option<(u64, u32)> {
        (0..=self.max_order).find_map(|o| {
            let start = frame & !((1u64 << o) - 1);
            self.free[o as usize].contains(&start).then_some((start, o))
        })
    }

    /// Takes one specific free frame out of circulation.
    pub fn reserve(&mut self, frame: u64) -> Result<(), OsError> {
        let (start, o) = self.containing_free_block(frame).ok_or(OsError::FrameBusy(frame))?;
        self.carve(start, o, frame, 0);
        self.tags[frame as usize] = FrameTag::Reserved;
        Ok(())
    }

    /// Claims a specific free frame with a tag (used for page-cache reuse
    /// and boot-time placement).
    pub fn claim(&mut self, frame: u64, tag: FrameTag) -> Result<(), OsError> {
        let (start, o) = self.containing_free_block(frame).ok_or(OsError::FrameBusy(frame))?;
        self.carve(start, o, frame, 0);
        self.tags[frame as usize] = tag;
        self.orders.insert(frame, 0);
        Ok(())
    }

    pub fn free(&mut self, start: u64) -> Result<(), OsError> {
        let order = self.orders.remove(&start).ok_or(OsError::NotAllocated(start))?;
        for f in start..start + (1 << order) {
            self.tags[f as usize] = FrameTag::Free;
        }
        self.release_block(start, order);
        if let Some(guards) = self.guards_of.remove(&start) {
            for g in guards {
                self.guard_refs[g as usize] -= 1;
                if self.guard_refs[g as usize] == 0 {
                    self.tags[g as usize] = FrameTag::Free;
                    self.release_block(g, 0);
                }
            }
        }
        Ok(())
    }

    fn release_block(&mut self, mut start: u64, mut order: u32) {
        while order < self.max_order {
            let buddy = start ^ (1 << order);
            if !self.free[order as usize].remove(&buddy) {
                break;
            }
            start = start.min(buddy);
            order += 1;
        }
        self.free[order as usize].insert(start);
    }

    /// Order of a live allocation starting at `start`.
    pub fn order_of(&self, start: u64) -> Option<u32> {
        self.orders.get(&start).copied()
    }

    pub fn count_tag(&self, pred: impl Fn(FrameTag) -> bool) -> u64 {
        self.tags.iter().filter(|t| pred(**t)).count() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(n: u32) -> Vec<RowAddr> {
        (0..n).map(|row| RowAddr { bank: 0, row }).collect()
    }

    #[test]
    fn order_zero_until_exhaustion() {
        let mut a = BuddyAllocator::new(rows(16), 3);
        let got: Vec<u64> = (0..16).map(|_| a.alloc(0, FrameTag::User(1)).unwrap()).collect();
        assert_eq!(got, (0..16).collect::<Vec<_>>());
        assert!(matches!(a.alloc(0, FrameTag::User(1)), Err(OsError::OutOfMemory { .. })));
    }

    #[test]
    fn buddies_coalesce() {
        let mut a = BuddyAllocator::new(rows(2), 1);
        let x = a.alloc(0, FrameTag::User(1)).unwrap();
        let y = a.alloc(0, FrameTag::User(1)).unwrap();
        a.free(x).unwrap();
        assert_eq!(a.free_blocks(), vec![(0, 0)]);
        a.free(y).unwrap();
        assert_eq!(a.free_blocks(), vec![(0, 1)]);
    }

    #[test]
    fn occupy_free_one_request_returns_it() {
        let mut a = BuddyAllocator::new(rows(32), 4);
        let held: Vec<u64> = (0..32).map(|_| a.alloc(0, FrameTag::User(7)).unwrap()).collect();
        a.free(held[21]).unwrap();
        assert_eq!(a.alloc(0, FrameTag::PageTable(0)).unwrap(), 21);
    }

    #[test]
    fn non_power_of_two_totals_are_covered() {
        let a = BuddyAllocator::new(rows(13), 3);
        assert_eq!(a.free_frames(), 13);
        assert_eq!(a.free_blocks(), vec![(0, 3), (8, 2), (12, 0)]);
    }

    #[test]
    fn reserve_and_claim_take_specific_frames() {
        let mut a = BuddyAllocator::new(rows(8), 3);
        a.reserve(5).unwrap();
        a.claim(2, FrameTag::PageCache).unwrap();
        assert_eq!(a.tag(5), FrameTag::Reserved);
        assert!(a.reserve(5).is_err());
        assert_eq!(a.free_frames(), 6);
        a.free(2).unwrap();
        assert_eq!(a.free_frames(), 7);
    }

    #[derive(Debug)]
    struct Guarded;
    impl PlacementPolicy for Guarded {
        fn permits(&self, _: Range<u64>, _: &AllocRequest, _: &FrameView) -> bool {
            true
        }
        fn guards_for(&self, f: Range<u64>, req: &AllocRequest, _: &FrameView) -> Vec<u64> {
            if req.kind == AllocKind::Dma {
                vec![f.start.wrapping_sub(1), f.end]
            } else {
                vec![]
            }
        }
    }

    #[test]
    fn guards_are_reserved_and_released() {
        let mut a = BuddyAllocator::new(rows(8), 3);
        a.add_policy(Arc::new(Guarded));
        let req = AllocRequest { order: 0, tag: FrameTag::User(1), kind: AllocKind::Dma };
        // Frame 0 has no lower neighbour, so the first legal slot is 1.
        let d = a.alloc_req(req).unwrap();
        assert_eq!(d, 1);
        assert_eq!((a.tag(0), a.tag(2)), (FrameTag::Reserved, FrameTag::Reserved));
        a.free(d).unwrap();
        assert_eq!(a.free_frames(), 8);
    }
}
