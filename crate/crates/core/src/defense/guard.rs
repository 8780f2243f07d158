use std::ops::Range;

use crate::dram::RowAddr;
use crate::osmem::{AllocKind, AllocRequest, FrameView, PlacementPolicy};

/// Static kernel/user split: kernel-domain frames live in the low rows of
/// every bank, user-domain frames above a band of gap rows.
#[derive(Debug, Clone, Copy)]
pub struct ZoneSplit {
    pub kernel_rows: u32,
    pub gap_rows: u32,
}

impl ZoneSplit {
    pub fn is_gap(&self, r: RowAddr) -> bool {
        r.row >= self.kernel_rows && r.row < self.kernel_rows + self.gap_rows
    }
}

impl PlacementPolicy for ZoneSplit {
    fn permits(&self, frames: Range<u64>, req: &AllocRequest, view: &FrameView) -> bool {
        frames.into_iter().all(|f| {
            let row = view.rows[f as usize].row;
            if req.tag.is_kernel_domain() {
                row < self.kernel_rows
            } else {
                row >= self.kernel_rows + self.gap_rows
            }
        })
    }
}

/// Keeps `rows` unused rows on each side of every allocation of `kind`.
#[derive(Debug, Clone, Copy)]
pub struct GuardRows {
    pub kind: AllocKind,
    pub rows: u32,
}

impl PlacementPolicy for GuardRows {
    fn permits(&self, _frames: Range<u64>, _req: &AllocRequest, _view: &FrameView) -> bool {
        true
    }

    fn guards_for(&self, frames: Range<u64>, req: &AllocRequest, view: &FrameView) -> Vec<u64> {
        if req.kind != self.kind {
            return Vec::new();
        }
        let own: Vec<RowAddr> = frames.clone().map(|f| view.rows[f as usize]).collect();
        let mut out = Vec::new();
        for (g, r) in view.rows.iter().enumerate() {
            let g = g as u64;
            if frames.contains(&g) || own.contains(r) {
                continue;
            }
            if own.iter().any(|o| o.bank == r.bank && o.row.abs_diff(r.row) <= self.rows) {
                out.push(g);
            }
        }
        out
    }
}
