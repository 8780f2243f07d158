use serde::{Deserialize, Serialize};

use super::{CacheError, CacheProbe, Outcome};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictionSet {
    pub target: u64,
    pub members: Vec<u64>,
}

/// Access target, then the candidates, then target again: a miss on the
/// second target access means the candidates evict it.
fn evicts<P: CacheProbe>(probe: &mut P, target: u64, candidates: &[u64]) -> bool {
    probe.probe(target);
    for &c in candidates {
        probe.probe(c);
    }
    probe.probe(target) == Outcome::Miss
}

/// Finds `ways` addresses congruent with `target` purely from hit/miss
/// observations, using group-testing reduction.
pub fn build_eviction_set<P: CacheProbe>(
    probe: &mut P,
    target: u64,
    pool: &[u64],
    line_bytes: u32,
) -> Result<EvictionSet, CacheError> {
    let ways = probe.associativity() as usize;
    let line = |a: u64| a / line_bytes as u64;
    let mut set: Vec<u64> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for &a in pool {
        if line(a) != line(target) && seen.insert(line(a)) {
            set.push(a);
        }
    }
    let fail = CacheError::InsufficientCongruent { target, ways: ways as u32 };
    if set.len() < ways || !evicts(probe, target, &set) {
        return Err(fail);
    }
    while set.len() > ways {
        let groups = ways + 1;
        let n = set.len();
        let mut reduced = false;
        // Even split keeps all ways+1 groups non-empty, so one group must be
        // free of some ways-sized congruent subset.
        for g in 0..groups {
            let (lo, hi) = (g * n / groups, (g + 1) * n / groups);
            let rest: Vec<u64> = set[..lo].iter().chain(&set[hi..]).copied().collect();
            if evicts(probe, target, &rest) {
                set = rest;
                reduced = true;
                break;
            }
        }
        if !reduced {
            return Err(fail);
        }
    }
    Ok(EvictionSet { target, members: set })
}
