use std::collections::{BTreeSet, HashSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rhsim_core::defense::GuardRows;
use rhsim_core::dram::{map_address, unmap_address, AddressMapping, Dram, DramConfig, DramGeometry, FaultMap, RowAddr};
use rhsim_core::osmem::{
    Actor, AllocKind, AllocRequest, BuddyAllocator, FrameTag, OsConfig, OsState, PasswdField, PASSWD, SHADOW,
};

pub fn geometries() -> Vec<DramGeometry> {
    let mut out = Vec::new();
    for channels in [1, 2] {
        for dimms in [1, 2] {
            for ranks in [1, 3] {
                for banks in [1, 2, 4] {
                    for rows in [1, 5, 16] {
                        for bytes in [8, 64, 256] {
                            let g = DramGeometry::new(channels, dimms, ranks, banks, rows, bytes).unwrap();
                            if g.capacity() <= 1 << 16 {
                                out.push(g);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Every address of every small geometry maps to a distinct cell and back.
pub fn check_bijection() -> Result<(), String> {
    for g in geometries() {
        let mut mappings = vec![AddressMapping::RowMajor];
        if g.banks_per_rank > 1 {
            mappings.push(AddressMapping::XorBank { row_mask: g.banks_per_rank - 1 });
        }
        for m in mappings {
            let mut seen = HashSet::new();
            for phys in 0..g.capacity() {
                let c = map_address(phys, &g, &m).map_err(|e| e.to_string())?;
                g.check(&c).map_err(|e| e.to_string())?;
                if !seen.insert(c) {
                    return Err(format!("{g:?} {m:?} collides at {phys}"));
                }
                if unmap_address(&c, &g, &m).ok() != Some(phys) {
                    return Err(format!("{g:?} {m:?} does not invert at {phys}"));
                }
            }
            if map_address(g.capacity(), &g, &m).is_ok() {
                return Err(format!("{g:?} accepts an address past capacity"));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub enum BuddyOp {
    Alloc(u32),
    Free(usize),
}

pub fn run_buddy(ops: &[BuddyOp]) -> (BuddyAllocator, Vec<Option<u64>>) {
    let rows = (0..64).map(|row| RowAddr { bank: 0, row }).collect();
    let mut a = BuddyAllocator::new(rows, 4);
    let mut live: Vec<u64> = Vec::new();
    let mut trace = Vec::new();
    for op in ops {
        match op {
            BuddyOp::Alloc(o) => {
                let r = a.alloc(*o, FrameTag::User(1)).ok();
                if let Some(f) = r {
                    live.push(f);
                }
                trace.push(r);
            }
            BuddyOp::Free(i) if !live.is_empty() => {
                let f = live.remove(i % live.len());
                a.free(f).unwrap();
            }
            BuddyOp::Free(_) => {}
        }
    }
    (a, trace)
}

/// Independent model: a plain set of free frames, coalesced from scratch.
fn oracle_blocks(free: &BTreeSet<u64>, max_order: u32) -> Vec<(u64, u32)> {
    let mut out = Vec::new();
    let mut f = 0;
    while f < 64 {
        if !free.contains(&f) {
            f += 1;
            continue;
        }
        let mut o = max_order;
        loop {
            let size = 1u64 << o;
            if f % size == 0 && (f..f + size).all(|x| free.contains(&x)) {
                break;
            }
            o -= 1;
        }
        out.push((f, o));
        f += 1 << o;
    }
    out
}

pub fn check_buddy(ops: &[BuddyOp]) -> Result<(), String> {
    let (a, trace) = run_buddy(ops);
    let allocated = a.count_tag(|t| t != FrameTag::Free);
    if a.free_frames() + allocated != a.total_frames() {
        return Err(format!("{} free + {allocated} used != {}", a.free_frames(), a.total_frames()));
    }
    let free: BTreeSet<u64> = (0..64).filter(|&f| a.tag(f) == FrameTag::Free).collect();
    if a.free_blocks() != oracle_blocks(&free, 4) {
        return Err("free lists not fully coalesced".into());
    }
    if run_buddy(ops).1 != trace {
        return Err("allocation trace differs between runs".into());
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub enum FileOp {
    Flip(u64, u8),
    Chsh,
    Passwd,
    Sync,
    Drop,
    Read,
}

/// Flips never mark a page dirty; only sync_flush changes the disk.
pub fn check_file_ops(ops: &[FileOp]) -> Result<(), String> {
    let mut d = Dram::new(DramConfig::default(), FaultMap::empty(), 0).unwrap();
    let mut os = OsState::new(OsConfig::default(), &d).unwrap();
    os.boot().unwrap();
    os.load_file(PASSWD, &mut d).unwrap();
    let alice = Actor { uid: 1001, name: "alice".into() };
    let shells: [&[u8]; 2] = [b"/bin/sh", b"/bin/zz"];
    let mut n = 0;
    for op in ops {
        let before = os.disk().clone();
        let dirty_before: Vec<bool> = os.page_cache_entries().map(|e| e.dirty).collect();
        match op {
            FileOp::Flip(off, bit) => {
                if let Some(e) = os.cached(PASSWD, 0).cloned() {
                    let c = d.map(os.frame_phys(e.frame) + off).unwrap().with_bit(*bit);
                    d.inject_flip(&c).unwrap();
                }
                let dirty_after: Vec<bool> = os.page_cache_entries().map(|e| e.dirty).collect();
                if dirty_after != dirty_before {
                    return Err(format!("flip at {off}.{bit} changed dirty bits"));
                }
            }
            FileOp::Chsh => {
                n += 1;
                // A flip may have broken the record; a refusal is fine.
                let _ = os.legit_write("alice", PasswdField::Shell, shells[n % 2], &alice, &mut d);
            }
            FileOp::Passwd => {
                let _ = os.legit_write("alice", PasswdField::Password, b"$6$pe$Vq1ZUn2w", &alice, &mut d);
            }
            FileOp::Sync => {
                os.sync_flush(&mut d).unwrap();
            }
            FileOp::Drop => {
                os.drop_clean(PASSWD).unwrap();
                os.drop_clean(SHADOW).unwrap();
            }
            FileOp::Read => {
                os.read_file(PASSWD, &mut d).unwrap();
            }
        }
        if !matches!(op, FileOp::Sync) && os.disk() != &before {
            return Err(format!("disk changed on {op:?}"));
        }
    }
    Ok(())
}

pub fn random_buddy_ops(rng: &mut ChaCha8Rng) -> Vec<BuddyOp> {
    (0..rng.random_range(1..200))
        .map(|_| if rng.random_bool(0.5) { BuddyOp::Alloc(rng.random_range(0..4)) } else { BuddyOp::Free(rng.random::<u32>() as usize) })
        .collect()
}

pub fn random_file_ops(rng: &mut ChaCha8Rng) -> Vec<FileOp> {
    (0..rng.random_range(1..60))
        .map(|_| match rng.random_range(0..6) {
            0 => FileOp::Flip(rng.random_range(0..72), rng.random_range(0..8)),
            1 => FileOp::Chsh,
            2 => FileOp::Passwd,
            3 => FileOp::Sync,
            4 => FileOp::Drop,
            _ => FileOp::Read,
        })
        .collect()
}

/// Runs `check` on `n` seeded op sequences.
pub fn sampled<T>(
    n: u64,
    gen: impl Fn(&mut ChaCha8Rng) -> Vec<T>,
    check: impl Fn(&[T]) -> Result<(), String>,
) -> Result<(), String> {
    for seed in 0..n {
        let ops = gen(&mut ChaCha8Rng::seed_from_u64(seed));
        check(&ops).map_err(|e| format!("seed {seed}: {e}"))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
enum GuardOp {
    Normal,
    Dma,
    FreeOldest,
}

const GUARD_OPS: [GuardOp; 3] = [GuardOp::Normal, GuardOp::Dma, GuardOp::FreeOldest];

fn frame_rows(banks: u32, rows: u32, per_row: u32) -> Vec<RowAddr> {
    let mut out = Vec::new();
    for bank in 0..banks {
        for row in 0..rows {
            for _ in 0..per_row {
                out.push(RowAddr { bank, row });
            }
        }
    }
    out
}

fn isolation(a: &BuddyAllocator, dma: &[u64], guard: u32) -> Result<(), String> {
    for &d in dma {
        let rd = a.row_of(d);
        for (f, tag) in a.tags().iter().enumerate() {
            let r = a.row_of(f as u64);
            if r.bank != rd.bank || r.row == rd.row || r.row.abs_diff(rd.row) > guard {
                continue;
            }
            if !matches!(tag, FrameTag::Free | FrameTag::Reserved) {
                return Err(format!("frame {f} ({tag:?}) within {guard} rows of dma frame {d}"));
            }
        }
    }
    Ok(())
}

/// Every op sequence of length `len` on one geometry.
fn exhaust(banks: u32, nrows: u32, per_row: u32, guard: u32, len: u32) -> Result<(), String> {
    for code in 0..3u32.pow(len) {
        let mut a = BuddyAllocator::new(frame_rows(banks, nrows, per_row), 2);
        a.add_policy(Arc::new(GuardRows { kind: AllocKind::Dma, rows: guard }));
        let frames = a.total_frames();
        let mut live: Vec<(u64, bool)> = Vec::new();
        let mut c = code;
        let at = |e: String| format!("banks={banks} rows={nrows} per_row={per_row} guard={guard} code={code}: {e}");
        for _ in 0..len {
            let op = GUARD_OPS[(c % 3) as usize];
            c /= 3;
            match op {
                GuardOp::FreeOldest => {
                    if !live.is_empty() {
                        let (f, _) = live.remove(0);
                        a.free(f).map_err(|e| at(e.to_string()))?;
                    }
                }
                GuardOp::Normal | GuardOp::Dma => {
                    let dma = matches!(op, GuardOp::Dma);
                    let req = AllocRequest {
                        order: 0,
                        tag: FrameTag::User(7),
                        kind: if dma { AllocKind::Dma } else { AllocKind::Normal },
                    };
                    if let Ok(f) = a.alloc_req(req) {
                        live.push((f, dma));
                    }
                }
            }
            let dma: Vec<u64> = live.iter().filter(|l| l.1).map(|l| l.0).collect();
            isolation(&a, &dma, guard).map_err(at)?;
        }
        for (f, _) in live.drain(..) {
            a.free(f).map_err(|e| at(e.to_string()))?;
        }
        if a.free_frames() != frames {
            return Err(at("guards leaked after freeing everything".into()));
        }
    }
    Ok(())
}

/// No allocated frame ever sits within guard distance of a DMA frame, over
/// every short op sequence on small geometries.
pub fn check_guard_isolation() -> Result<(), String> {
    for banks in 1..=2 {
        for nrows in [4, 5, 8] {
            for per_row in 1..=2 {
                for guard in 1..=2 {
                    exhaust(banks, nrows, per_row, guard, 6)?;
                }
            }
        }
    }
    Ok(())
}
