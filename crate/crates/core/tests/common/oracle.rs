use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rhsim_core::dram::{
    AddressMapping, Dram, DramConfig, DramCoordinate, DramGeometry, FaultEntry, FaultMap,
    FlipDirection, RefreshConfig, RefreshMode, RowAddr, RowBufferPolicy,
};

#[derive(Debug, Clone)]
pub struct Case {
    pub config: DramConfig,
    pub entries: Vec<FaultEntry>,
    pub init: Vec<(DramCoordinate, u8)>,
    pub trace: Vec<(RowAddr, u64)>,
}

pub fn random_case(seed: u64, probability: f64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let banks = rng.random_range(1..=2u32);
    let rows = rng.random_range(3..=16u32);
    let geometry = DramGeometry::new(1, 1, 1, banks, rows, 8).unwrap();
    let policy = match rng.random_range(0..3) {
        0 => RowBufferPolicy::OpenPage,
        1 => RowBufferPolicy::ClosePage,
        _ => RowBufferPolicy::Adaptive(rng.random_range(1..4)),
    };
    let mode = if rng.random_bool(0.5) { RefreshMode::Standard } else { RefreshMode::Doubled };
    let refresh = RefreshConfig { interval: rng.random_range(4..48), mode };
    let config = DramConfig { geometry, mapping: AddressMapping::RowMajor, policy, refresh };

    let mut seen = BTreeSet::new();
    let mut entries = Vec::new();
    for _ in 0..rng.random_range(0..=3) {
        let r = RowAddr { bank: rng.random_range(0..banks), row: rng.random_range(0..rows) };
        let c = geometry.coordinate_of(r, rng.random_range(0..8), rng.random_range(0..8));
        if !seen.insert(c) {
            continue;
        }
        let dir = if rng.random_bool(0.5) { FlipDirection::OneToZero } else { FlipDirection::ZeroToOne };
        entries.push(
            FaultEntry::new(c, dir, rng.random_range(1..7))
                .with_radius(rng.random_range(1..=2))
                .with_probability(probability),
        );
    }

    let init = (0..banks)
        .flat_map(|bank| (0..rows).map(move |row| RowAddr { bank, row }))
        .flat_map(|r| (0..8).map(move |b| (r, b)))
        .map(|(r, b)| (geometry.coordinate_of(r, b, 0), rng.random()))
        .collect();

    // Hot rows near the victims make threshold crossings likely.
    let mut hot: Vec<RowAddr> = entries
        .iter()
        .flat_map(|e| {
            let v = geometry.row_of(&e.victim);
            [v.row.saturating_sub(1), v.row + 1, v.row.saturating_sub(2), v.row + 2]
                .into_iter()
                .filter(|&r| r < rows)
                .map(move |row| RowAddr { bank: v.bank, row })
        })
        .collect();
    hot.push(RowAddr { bank: 0, row: 0 });
    let len = rng.random_range(20..200);
    let mut tick = 0u64;
    let mut trace = Vec::with_capacity(len);
    for _ in 0..len {
        tick += rng.random_range(1..=3);
        let row = if rng.random_bool(0.8) {
            hot[rng.random_range(0..hot.len())]
        } else {
            RowAddr { bank: rng.random_range(0..banks), row: rng.random_range(0..rows) }
        };
        trace.push((row, tick));
    }
    Case { config, entries, init, trace }
}

pub fn simulate(case: &Case, seed: u64) -> Vec<(u64, DramCoordinate)> {
    let g = case.config.geometry;
    let faults = FaultMap::new(&g, case.entries.clone()).unwrap();
    let mut d = Dram::new(case.config, faults, seed).unwrap();
    for (c, v) in &case.init {
        d.write_bits(c, *v).unwrap();
    }
    for (r, t) in &case.trace {
        d.activate(g.coordinate_of(*r, 0, 0), *t).unwrap();
    }
    d.flips().iter().map(|f| (f.tick, f.victim)).collect()
}

/// Last refresh of `row` at or before `tick`, straight from the schedule formula.
pub fn last_refresh(row: u32, rows: u32, interval: u64, tick: u64) -> Option<u64> {
    let phase = row as u64 * interval / rows as u64;
    (tick >= phase).then(|| tick - (tick - phase) % interval)
}

/// Which trace positions actually open a row, by a one-entry buffer per bank.
pub fn array_activations(case: &Case) -> Vec<bool> {
    let mut open: Vec<Option<(u32, u64)>> = vec![None; case.config.geometry.total_banks() as usize];
    case.trace
        .iter()
        .map(|(r, t)| {
            let slot = &mut open[r.bank as usize];
            let hit = match case.config.policy {
                RowBufferPolicy::OpenPage => matches!(slot, Some((row, _)) if *row == r.row),
                RowBufferPolicy::ClosePage => false,
                RowBufferPolicy::Adaptive(idle) => {
                    matches!(slot, Some((row, last)) if *row == r.row && t - *last < idle)
                }
            };
            *slot = Some((r.row, *t));
            !hit
        })
        .collect()
}

/// Threshold-crossing events per entry: (trace index, tick), ignoring whether
/// earlier crossings fired.
pub fn crossings(case: &Case) -> Vec<Vec<(usize, u64)>> {
    let g = case.config.geometry;
    let interval = case.config.refresh.effective_interval();
    let opened = array_activations(case);
    case.entries
        .iter()
        .map(|e| {
            let v = g.row_of(&e.victim);
            let mut out = Vec::new();
            for (i, (a, t)) in case.trace.iter().enumerate() {
                if !opened[i] || a.bank != v.bank || a.row == v.row || a.row.abs_diff(v.row) > e.blast_radius {
                    continue;
                }
                let start = [last_refresh(a.row, g.rows_per_bank, interval, *t), last_refresh(v.row, g.rows_per_bank, interval, *t)]
                    .into_iter()
                    .flatten()
                    .max();
                let count = (0..=i)
                    .filter(|&j| opened[j] && case.trace[j].0 == *a && start.is_none_or(|s| case.trace[j].1 >= s))
                    .count();
                if count == e.threshold as usize {
                    out.push((i, *t));
                }
            }
            out
        })
        .collect()
}

pub fn initial_bit(case: &Case, c: &DramCoordinate) -> bool {
    let byte = case.init.iter().find(|(k, _)| k.with_bit(0) == c.with_bit(0)).unwrap().1;
    byte & (1 << c.bit) != 0
}

/// Deterministic oracle: first crossing in any window while the bit still
/// holds its pre-flip value fires, nothing else does.
pub fn oracle_flips(case: &Case) -> Vec<(u64, DramCoordinate)> {
    let mut fired = Vec::new();
    for (e, xs) in case.entries.iter().zip(crossings(case)) {
        if initial_bit(case, &e.victim) != e.direction.pre_value() {
            continue;
        }
        if let Some(&(i, t)) = xs.first() {
            fired.push((i, t, e.victim));
        }
    }
    fired.sort_by_key(|(i, _, c)| (*i, *c));
    fired.into_iter().map(|(_, t, c)| (t, c)).collect()
}

pub fn sorted(mut v: Vec<(u64, DramCoordinate)>) -> Vec<(u64, DramCoordinate)> {
    v.sort();
    v
}


/// Binomial tally over 10^3 random cases: (observed, expected, sigma).
pub fn probabilistic_tally(p: f64) -> (usize, f64, f64) {
    let mut expected = 0.0;
    let mut variance = 0.0;
    let mut observed = 0usize;
    for seed in 0..1000u64 {
        let case = random_case(seed, p);
        for (e, xs) in case.entries.iter().zip(crossings(&case)) {
            if initial_bit(&case, &e.victim) != e.direction.pre_value() {
                continue;
            }
            let q = 1.0 - (1.0 - p).powi(xs.len() as i32);
            expected += q;
            variance += q * (1.0 - q);
        }
        observed += simulate(&case, seed ^ 0xdead_beef).len();
    }
    (observed, expected, variance.sqrt())
}
