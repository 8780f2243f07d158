use super::stages::{disk_uid_field, ev, flipped_field, lp, rh, se, Halt};
use super::world::World;
use super::{
    check_feasibility, AttackOutcome, AttackScenario, Feasibility, ObjectKind, RoundRecord, Stage, Status, TargetBit,
    TechniqueTrace, Verification,
};

fn finish(
    w: &World,
    status: Status,
    failed: Option<(Stage, usize)>,
    feasibility: Feasibility,
    trace: TechniqueTrace,
    rounds: Vec<RoundRecord>,
) -> AttackOutcome {
    AttackOutcome {
        status,
        failed_stage: failed.map(|f| f.0),
        failed_round: failed.map(|f| f.1),
        feasibility,
        trace,
        rounds,
        footprint: w.os.footprint(w.attacker_uid()),
        activations: w.dram.ledger().total(),
        ticks: w.tick,
    }
}

/// One LP, RH, EV, SE pass. Fills `rec` and `trace` as stages complete.
fn round(
    w: &mut World,
    s: &AttackScenario,
    focus: Option<TargetBit>,
    rec: &mut RoundRecord,
    trace: &mut TechniqueTrace,
) -> Result<(), Halt> {
    let passwd = s.target.object == ObjectKind::PasswdUid;
    let before = if passwd { disk_uid_field(w, &s.target.user) } else { None };
    let (victim, placement) = lp(w, s, focus)?;
    rec.placement = Some(placement);
    trace.lp = Some(s.attack.lp);
    let hammered = rh(w, s, &victim);
    let h = match hammered {
        Ok(h) => h,
        Err((halt, h)) => {
            rec.aggressors = h.aggressors;
            rec.hammer_accesses = h.accesses;
            rec.flips = h.flips;
            return Err(halt);
        }
    };
    rec.aggressors = h.aggressors;
    rec.hammer_accesses = h.accesses;
    rec.flips = h.flips;
    trace.bypass = Some(s.attack.bypass);
    trace.pattern = Some(s.attack.pattern);
    let v = ev(w, s, &victim, focus, before.as_deref(), &rec.flips);
    rec.verification = Some(v);
    trace.ev = Some(s.attack.ev);
    if v != Verification::Verified {
        let note = match v {
            Verification::WrongFlip => "flip landed outside the target bits",
            _ => "no observable effect on the target",
        };
        return Err(Halt {
            status: Status::WrongFlip,
            stage: Stage::Ev,
            note: note.into(),
        });
    }
    if s.attack.se_enabled {
        trace.se = true;
        let want = match (focus, &before) {
            (Some(f), Some(b)) => flipped_field(b, f),
            _ => Vec::new(),
        };
        let r = se(w, s, &victim, &want);
        rec.persisted = Some(r.is_ok());
        r?;
    }
    Ok(())
}

fn run_rounds(s: &AttackScenario, bits: Option<&[TargetBit]>, w: &mut World) -> AttackOutcome {
    let mut trace = TechniqueTrace::default();
    let feasibility = match s.validate() {
        Err(reason) => Feasibility::Infeasible { reason },
        Ok(()) => check_feasibility(s, w.dram.config().policy),
    };
    if !feasibility.is_feasible() {
        return finish(w, Status::InfeasibleCombination, None, feasibility, trace, Vec::new());
    }
    trace.origin = Some(s.attack.origin);
    trace.class = Some(s.target.class);
    w.defenses.set_ecc_crafted(s.attack.ecc_crafted);
    if let Err(e) = w.prepare(s) {
        let rec = RoundRecord {
            note: Some(e.to_string()),
            ..Default::default()
        };
        return finish(w, Status::PlacementFailed, Some((Stage::Lp, 1)), feasibility, trace, vec![rec]);
    }
    let focuses: Vec<Option<TargetBit>> = match (s.target.object, bits) {
        (_, Some(b)) => b.iter().copied().map(Some).collect(),
        (ObjectKind::PasswdUid, None) => s.target.bits.iter().copied().map(Some).collect(),
        _ => vec![None],
    };
    let mut rounds = Vec::new();
    for (i, focus) in focuses.into_iter().enumerate() {
        let mut rec = RoundRecord::default();
        let r = round(w, s, focus, &mut rec, &mut trace);
        if s.target.object == ObjectKind::PasswdUid {
            rec.disk_field = disk_uid_field(w, &s.target.user);
        }
        if let Err(h) = r {
            rec.note = Some(h.note);
            rounds.push(rec);
            return finish(w, h.status, Some((h.stage, i + 1)), feasibility, trace, rounds);
        }
        rounds.push(rec);
    }
    finish(w, Status::Success, None, feasibility, trace, rounds)
}

/// Runs a scenario in a freshly built world. Passwd targets take one round
/// per listed bit; everything else takes one round.
pub fn run_scenario(s: &AttackScenario, w: &mut World) -> AttackOutcome {
    run_rounds(s, None, w)
}

/// Loops LP, RH, EV, SE once per bit so that each persisted flip survives
/// the next reload. An empty bit list succeeds with no rounds.
pub fn run_expressive_attack(bits: &[TargetBit], s: &AttackScenario, w: &mut World) -> AttackOutcome {
    run_rounds(s, Some(bits), w)
}
