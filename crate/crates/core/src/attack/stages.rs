use std::collections::BTreeSet;

use super::world::{Victim, World};
use super::{AttackScenario, Bypass, EvMethod, FlushMode, Lp, ObjectKind, Origin, Pattern, Placement, Stage, Status};
use super::{TargetBit, Verification};
use crate::cache::{build_eviction_set, AccessKind, EvictionSet};
use crate::defense::WordStatus;
use crate::dram::{ActivationResult, FlipRecord, RowAddr, RowBufferPolicy, ServedFrom};
use crate::osmem::{login_uid, parse_records, Actor, FileMode, OsError, PasswdField, PhysMem, OPCODE_JE, PASSWD};

/// Why a round stopped early.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Halt {
    pub status: Status,
    pub stage: Stage,
    pub note: String,
}

impl Halt {
    fn new(status: Status, stage: Stage, note: impl Into<String>) -> Self {
        Self { status, stage, note: note.into() }
    }
}

fn os_halt(stage: Stage, status: Status) -> impl Fn(OsError) -> Halt {
    move |e| Halt::new(status.clone(), stage, e.to_string())
}

/// Aggressor rows for hammering `victim` from the rows the attacker owns.
pub(crate) fn aggressors_for(
    victim: RowAddr,
    owned: &BTreeSet<RowAddr>,
    pattern: Pattern,
    distance: u32,
) -> Option<Vec<RowAddr>> {
    let same: Vec<u32> = owned
        .iter()
        .filter(|r| r.bank == victim.bank && r.row.abs_diff(victim.row) >= distance)
        .map(|r| r.row)
        .collect();
    let at = |row| RowAddr { bank: victim.bank, row };
    let below = same.iter().copied().filter(|&r| r < victim.row).max();
    let above = same.iter().copied().filter(|&r| r > victim.row).min();
    let nearest = match (below, above) {
        (Some(b), Some(a)) if victim.row - b <= a - victim.row => Some(b),
        (Some(_), Some(a)) => Some(a),
        (b, a) => b.or(a),
    }?;
    match pattern {
        Pattern::Bb2 => Some(vec![at(below?), at(above?)]),
        Pattern::Bb3 => Some(vec![at(nearest)]),
        Pattern::Bb1 => {
            // A far row on the same side forces row-buffer conflicts without
            // disturbing the victim.
            let far = same
                .iter()
                .copied()
                .filter(|&r| (r < victim.row) == (nearest < victim.row) && r.abs_diff(nearest) > 1)
                .max_by_key(|&r| r.abs_diff(victim.row));
            let far = far.filter(|&r| r.abs_diff(victim.row) > 1)?;
            Some(vec![at(nearest), at(far)])
        }
    }
}

type Cells = Vec<(u32, u8, crate::dram::FlipDirection)>;

fn usable(w: &World, s: &AttackScenario, frame: u64, cells: &Cells) -> bool {
    let index = w.fault_index();
    w.has_useful_fault(frame, cells, &index)
        && aggressors_for(
            w.os.frame_row(frame),
            &w.owned_rows(Some(frame)),
            s.attack.pattern,
            s.attack.aggressor_distance,
        )
        .is_some()
}

fn placed(w: &World, v: &Victim, attempts: u32) -> Placement {
    Placement {
        frame: v.frame(),
        row: w.os.frame_row(v.frame()),
        attempts,
    }
}

const NO_SPOT: &str = "no vulnerable cell at a target-relevant offset";

/// Location preparation.
pub(crate) fn lp(w: &mut World, s: &AttackScenario, focus: Option<TargetBit>) -> Result<(Victim, Placement), Halt> {
    let fail = |note: &str| Halt::new(Status::PlacementFailed, Stage::Lp, note);
    let oom = os_halt(Stage::Lp, Status::PlacementFailed);
    let page = w.expected_page(s);
    let cells = w.relevant_cells(s, &page, focus);
    let cap = s.attack.lp_attempts.unwrap_or(u32::MAX);
    let out = match s.attack.lp {
        Lp::Natural => {
            let v = w.create_victim(s).map_err(&oom)?;
            let p = placed(w, &v, 1);
            (v, p)
        }
        Lp::A1 => {
            let mut copies = Vec::new();
            let mut hit = None;
            for step in 1..=cap {
                match w.create_victim(s) {
                    Ok(v) => copies.push(v),
                    Err(_) => break,
                }
                if let Some(v) = copies.iter().find(|v| usable(w, s, v.frame(), &cells)) {
                    hit = Some((v.clone(), step));
                    break;
                }
                if w.alloc_attacker().is_err() {
                    break;
                }
            }
            let (v, step) = hit.ok_or_else(|| fail(NO_SPOT))?;
            let p = placed(w, &v, step);
            (v, p)
        }
        Lp::A2 => {
            while w.alloc_attacker().is_ok() {}
            while w.alloc_padding().is_ok() {}
            let frames: Vec<u64> = w.att.frames.iter().copied().collect();
            let target = frames
                .into_iter()
                .find(|&f| usable(w, s, f, &cells))
                .ok_or_else(|| fail(NO_SPOT))?;
            w.att.frames.remove(&target);
            w.os.free_frame(target).map_err(&oom)?;
            let v = w.create_victim(s).map_err(&oom)?;
            if v.frame() != target {
                return Err(fail("victim did not take the released frame"));
            }
            let p = placed(w, &v, 1);
            (v, p)
        }
        Lp::A3 => {
            let mut target = None;
            for step in 1..=cap {
                if w.alloc_attacker().is_err() {
                    break;
                }
                if let Some(f) = w.att.frames.iter().copied().find(|&f| usable(w, s, f, &cells)) {
                    target = Some((f, step));
                    break;
                }
            }
            let (target, step) = target.ok_or_else(|| fail(NO_SPOT))?;
            let apid = w.att.pid;
            let avpage = w
                .with_port(|os, p| {
                    let v = os.map_shared(apid, target, p)?;
                    p.write(os.frame_phys(target), &page)?;
                    Ok(v)
                })
                .map_err(&oom)?;
            let Victim::Anon { pid, vpage, .. } = w.create_victim(s).map_err(&oom)? else {
                return Err(fail("deduplication needs an anonymous victim page"));
            };
            w.with_port(|os, p| {
                os.register_mergeable(apid, avpage)?;
                os.register_mergeable(pid, vpage)?;
                os.dedup_merge_pass(p)
            })
            .map_err(&oom)?;
            let frame = w.os.process(pid).map_err(&oom)?.mappings[&vpage].frame;
            if frame != target {
                return Err(fail("merge kept a different frame"));
            }
            w.att.frames.remove(&target);
            let v = Victim::Anon { pid, vpage, frame };
            let p = placed(w, &v, step);
            (v, p)
        }
        Lp::A4 => {
            if !w.att.seeded {
                seed_ring(w, s).map_err(&oom)?;
            }
            let path = World::victim_path(s).expect("file target");
            let tries = s.attack.lp_attempts.unwrap_or(2 * w.os.config().reclaim_cycle as u32 + 1);
            let mut hit = None;
            for k in 1..=tries {
                if w.os.cached(path, 0).is_some() {
                    w.os.drop_clean(path).map_err(&oom)?;
                }
                let v = w.create_victim(s).map_err(&oom)?;
                if usable(w, s, v.frame(), &cells) {
                    hit = Some((v, k));
                    break;
                }
            }
            let (v, k) = hit.ok_or_else(|| fail(NO_SPOT))?;
            let p = placed(w, &v, k);
            (v, p)
        }
    };
    if let Some(name) = w.defenses.footprint_alarm(&w.os, w.att.uid) {
        return Err(Halt::new(Status::Detected(name.into()), Stage::Lp, "memory footprint alarm"));
    }
    Ok(out)
}

/// Interleaves hammer frames with one-page scratch files, then drops the
/// files so their frames wait in the reclaim ring between hammer rows.
fn seed_ring(w: &mut World, s: &AttackScenario) -> Result<(), OsError> {
    let cycle = w.os.config().reclaim_cycle;
    let network = s.attack.origin == Origin::Network;
    let owner = if network { 0 } else { w.att.uid };
    let page = vec![0; w.os.page_bytes() as usize];
    let mut paths = Vec::new();
    for i in 0..cycle {
        w.alloc_attacker()?;
        let path = if network {
            format!("/srv/www/page{i}")
        } else {
            format!("/home/{}/scratch{i}", w.att.name)
        };
        let mode = FileMode { owner, owner_writable: true, world_readable: true };
        w.os.create_file(&path, page.clone(), mode);
        w.with_port(|os, p| os.load_file(&path, p))?;
        paths.push(path);
    }
    w.alloc_attacker()?;
    for p in &paths {
        w.os.drop_clean(p)?;
    }
    w.att.seeded = true;
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Hammered {
    pub aggressors: Vec<RowAddr>,
    pub accesses: u64,
    pub flips: Vec<FlipRecord>,
}

/// Lowest attacker frame in a row, as a physical address.
fn row_phys(w: &World, r: RowAddr) -> u64 {
    let f = w
        .att
        .frames
        .iter()
        .copied()
        .find(|&f| w.os.frame_row(f) == r)
        .expect("aggressor rows come from owned frames");
    w.os.frame_phys(f)
}

fn eviction_sets(w: &mut World, victim: RowAddr, aggs: &[u64]) -> Option<Vec<EvictionSet>> {
    let line = w.cache.config().line_bytes as u64;
    let page = w.os.page_bytes();
    let agg_rows: BTreeSet<RowAddr> = aggs.iter().map(|&a| w.dram.row_of_phys(a).expect("mapped")).collect();
    let need = (w.cache.config().slices * w.cache.config().sets_per_slice * w.cache.config().effective_ways()) as u64 * 2;
    let pool = |w: &World| -> Vec<u64> {
        w.att
            .frames
            .iter()
            .filter(|&&f| {
                let r = w.os.frame_row(f);
                r != victim && !agg_rows.contains(&r)
            })
            .flat_map(|&f| (0..page / line).map(move |i| f * page + i * line))
            .collect()
    };
    let mut extra = 0;
    while (pool(w).len() as u64) < need && extra < 32 {
        let Ok(f) = w.alloc_padding() else { break };
        w.att.frames.insert(f);
        extra += 1;
    }
    let candidates = pool(w);
    aggs.iter()
        .map(|&a| build_eviction_set(&mut w.cache, a, &candidates, line as u32).ok())
        .collect()
}

/// One memory access the way the bypass performs it.
fn touch(w: &mut World, s: &AttackScenario, phys: u64) -> Result<Option<ActivationResult>, String> {
    let t = w.tick;
    w.tick += 1;
    let r = match (s.attack.bypass, s.attack.ba1_mode) {
        (Bypass::Direct, _) => {
            let c = w.dram.map(phys).map_err(|e| e.to_string())?;
            Some(w.dram.activate(c, t).map_err(|e| e.to_string())?)
        }
        (Bypass::Ba1, FlushMode::NonTemporal) => {
            w.cache
                .access_kind(phys, t, AccessKind::NonTemporal, &mut w.dram)
                .map_err(|e| e.to_string())?
                .activation
        }
        _ => w.cache.access(phys, t, &mut w.dram).map_err(|e| e.to_string())?.activation,
    };
    Ok(r)
}

/// Runs defense hooks after an array activation.
fn after_activation(w: &mut World, phys: u64) -> Result<(), Halt> {
    let row = w.dram.row_of_phys(phys).expect("mapped");
    let t = w.tick;
    w.defenses.on_activate(row, t, &mut w.dram);
    if let Some(name) = w.defenses.scan(&w.dram, t, false) {
        return Err(Halt::new(Status::Detected(name.into()), Stage::Rh, "integrity scan"));
    }
    Ok(())
}

fn record(
    w: &mut World,
    phys: u64,
    r: Option<ActivationResult>,
    flips: &mut Vec<FlipRecord>,
) -> Result<(), Halt> {
    if let Some(a) = r {
        flips.extend(a.flips);
        if a.served_from == ServedFrom::RowArray {
            after_activation(w, phys)?;
        }
    }
    Ok(())
}

/// Row hammering against the placed victim.
pub(crate) fn rh(w: &mut World, s: &AttackScenario, victim: &Victim) -> Result<Hammered, (Halt, Hammered)> {
    let vrow = w.os.frame_row(victim.frame());
    let owned = w.owned_rows(Some(victim.frame()));
    let Some(aggressors) = aggressors_for(vrow, &owned, s.attack.pattern, s.attack.aggressor_distance) else {
        return Err((Halt::new(Status::NoFlip, Stage::Rh, "no aggressor rows available"), Hammered::default()));
    };
    let mut out = Hammered { aggressors: aggressors.clone(), ..Default::default() };
    let phys: Vec<u64> = aggressors.iter().map(|&r| row_phys(w, r)).collect();
    let sets = if s.attack.bypass == Bypass::Ba2 {
        match eviction_sets(w, vrow, &phys) {
            Some(v) => v,
            None => return Err((Halt::new(Status::NoFlip, Stage::Rh, "eviction sets not found"), out)),
        }
    } else {
        Vec::new()
    };
    let idle = match (s.attack.pattern, w.dram.config().policy) {
        (Pattern::Bb3, RowBufferPolicy::Adaptive(i)) => i,
        _ => 0,
    };
    let flush = s.attack.bypass == Bypass::Ba1 && s.attack.ba1_mode == FlushMode::Clflush && w.defenses.flush_allowed();
    let geometry = *w.dram.geometry();
    let hit_victim = |f: &[FlipRecord]| f.iter().any(|x| geometry.row_of(&x.victim) == vrow);
    'hammer: while out.accesses < s.attack.budget {
        for (i, &a) in phys.iter().enumerate() {
            if out.accesses >= s.attack.budget {
                break 'hammer;
            }
            out.accesses += 1;
            let r = touch(w, s, a).map_err(|e| (Halt::new(Status::NoFlip, Stage::Rh, e), out.clone()))?;
            record(w, a, r, &mut out.flips).map_err(|h| (h, out.clone()))?;
            if flush {
                w.cache.flush_line(a);
            }
            if let Some(set) = sets.get(i) {
                for &m in &set.members {
                    let r = touch(w, s, m).map_err(|e| (Halt::new(Status::NoFlip, Stage::Rh, e), out.clone()))?;
                    record(w, m, r, &mut out.flips).map_err(|h| (h, out.clone()))?;
                }
            }
            w.tick += idle;
            if hit_victim(&out.flips) {
                break 'hammer;
            }
        }
    }
    let t = w.tick;
    if let Some(name) = w.defenses.scan(&w.dram, t, true) {
        return Err((Halt::new(Status::Detected(name.into()), Stage::Rh, "integrity scan"), out));
    }
    // Any flip counts here; whether it hit the target is for EV to say.
    let visible = match w.defenses.ecc() {
        None => out.flips.len(),
        Some(ecc) => {
            let mut n = 0;
            for f in &out.flips {
                let p = w.dram.unmap(&f.victim).expect("valid coordinate");
                match ecc.status(&w.dram, p) {
                    Ok(WordStatus::Uncorrectable) => {
                        return Err((Halt::new(Status::Detected("ecc".into()), Stage::Rh, "uncorrectable word"), out));
                    }
                    Ok(WordStatus::Corrected) => {}
                    _ => n += 1,
                }
            }
            n
        }
    };
    if visible == 0 {
        return Err((Halt::new(Status::NoFlip, Stage::Rh, "no visible flip"), out));
    }
    Ok(out)
}

fn uid_field(page: &[u8], user: &str) -> Option<Vec<u8>> {
    parse_records(page)
        .into_iter()
        .find(|r| r.name == user)
        .map(|r| page[r.field(PasswdField::Uid)].to_vec())
}

/// Field bytes expected after `focus` flips in `before`.
pub(crate) fn flipped_field(before: &[u8], focus: TargetBit) -> Vec<u8> {
    let mut v = before.to_vec();
    if let Some(b) = v.get_mut(focus.byte as usize) {
        *b ^= 1 << focus.bit;
    }
    v
}

/// Exploit verification. `field_before` is the UID field as it was on disk.
pub(crate) fn ev(
    w: &mut World,
    s: &AttackScenario,
    victim: &Victim,
    focus: Option<TargetBit>,
    field_before: Option<&[u8]>,
    flips: &[FlipRecord],
) -> Verification {
    let base = w.os.frame_phys(victim.frame());
    let page_len = w.os.page_bytes() as usize;
    let verified = match victim {
        Victim::PageTable { pid, base: vbase, .. } => {
            let d = w.att.d_frame.expect("prepared");
            let per = w.os.page_bytes() / 8;
            let (pid, vbase) = (*pid, *vbase);
            (vbase..vbase + per).any(|v| {
                w.with_port(|os, p| os.walk(pid, v, p))
                    .ok()
                    .flatten()
                    .is_some_and(|pte| pte.frame != d)
            })
        }
        _ => {
            let page = w.with_port(|_, p| p.read(base, page_len)).unwrap_or_default();
            match s.target.object {
                ObjectKind::Pointer => {
                    let off = s.target.offset as usize;
                    page.get(off..off + 8)
                        .is_some_and(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")) != s.target.value)
                }
                ObjectKind::Opcode => page.get(crate::osmem::SUDO_CHECK_OFFSET) == Some(&OPCODE_JE),
                ObjectKind::PasswdUid => match (focus, field_before) {
                    (Some(f), Some(before)) => {
                        let want = flipped_field(before, f);
                        match s.attack.ev {
                            EvMethod::C1 => uid_field(&page, &s.target.user) == Some(want),
                            EvMethod::C2 => {
                                let parsed = std::str::from_utf8(&want).ok().and_then(|x| x.parse::<u32>().ok());
                                parsed.is_some() && login_uid(&page, &s.target.user) == parsed
                            }
                        }
                    }
                    _ => false,
                },
                ObjectKind::PageTable => false,
            }
        }
    };
    if verified {
        return Verification::Verified;
    }
    let range = base..base + page_len as u64;
    let in_frame = flips
        .iter()
        .any(|f| w.dram.unmap(&f.victim).is_ok_and(|p| range.contains(&p)));
    if in_frame {
        Verification::WrongFlip
    } else {
        Verification::Unobservable
    }
}

/// State escalation: get the flipped page written back to disk.
pub(crate) fn se(w: &mut World, s: &AttackScenario, victim: &Victim, want: &[u8]) -> Result<(), Halt> {
    let not = |n: &str| Halt::new(Status::NotPersisted, Stage::Se, n);
    let Victim::File { path, .. } = victim else {
        return Err(not("no write-back path for an anonymous page"));
    };
    if path != PASSWD || s.target.user != w.att.name {
        return Err(not("no legitimate write reaches this page"));
    }
    let actor = Actor { uid: w.att.uid, name: w.att.name.clone() };
    let user = s.target.user.clone();
    w.with_port(|os, p| {
        let page = os.read_file(PASSWD, p)?;
        let rec = parse_records(&page)
            .into_iter()
            .find(|r| r.name == user)
            .ok_or_else(|| OsError::NoSuchRecord(user.clone()))?;
        let shell = page[rec.field(PasswdField::Shell)].to_vec();
        os.legit_write(&user, PasswdField::Shell, &shell, &actor, p)?;
        os.sync_flush(p)
    })
    .map_err(|e| not(&e.to_string()))?;
    if disk_uid_field(w, &user).as_deref() != Some(want) {
        return Err(not("disk does not hold the flip"));
    }
    Ok(())
}

pub(crate) fn disk_uid_field(w: &World, user: &str) -> Option<Vec<u8>> {
    uid_field(&w.os.disk().get(PASSWD)?.content, user)
}
