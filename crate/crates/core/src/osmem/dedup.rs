use std::collections::BTreeMap;

use super::{FrameTag, Mapping, OsError, OsState, PhysMem};

impl OsState {
    /// Marks a page as a merge candidate (`madvise(MADV_MERGEABLE)`).
    pub fn register_mergeable(&mut self, pid: u32, vpage: u64) -> Result<(), OsError> {
        if !self.process(pid)?.mappings.contains_key(&vpage) {
            return Err(OsError::NotMapped { pid, vpage });
        }
        self.mergeable.insert((pid, vpage));
        Ok(())
    }

    /// Merges byte-identical candidate pages onto the earliest-created frame.
    /// Returns how many frames were folded away.
    pub fn dedup_merge_pass(&mut self, mem: &mut dyn PhysMem) -> Result<usize, OsError> {
        let mut by_content: BTreeMap<Vec<u8>, Vec<(u32, u64, u64)>> = BTreeMap::new();
        let candidates: Vec<(u32, u64)> = self.mergeable.iter().copied().collect();
        for (pid, vpage) in candidates {
            let Some(m) = self.process(pid)?.mappings.get(&vpage).copied() else {
                self.mergeable.remove(&(pid, vpage));
                continue;
            };
            let content = mem.read(self.frame_phys(m.frame), self.page_bytes as usize)?;
            by_content.entry(content).or_default().push((pid, vpage, m.frame));
        }
        let mut merged = 0;
        for group in by_content.into_values() {
            let canonical = group
                .iter()
                .map(|&(_, _, f)| f)
                .min_by_key(|f| (self.created.get(f).copied().unwrap_or(u64::MAX), *f))
                .expect("non-empty group");
            if group.iter().all(|&(_, _, f)| f == canonical) {
                continue;
            }
            for &(pid, vpage, frame) in &group {
                let m = Mapping { frame: canonical, writable: false, cow: true };
                self.install(pid, vpage, m, mem)?;
                if frame != canonical && self.mappers(frame) == 0 {
                    if matches!(self.alloc.tag(frame), FrameTag::User(_)) {
                        self.free_frame(frame)?;
                    }
                    merged += 1;
                }
            }
        }
        Ok(merged)
    }
}
