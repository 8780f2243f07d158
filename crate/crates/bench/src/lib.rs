//! Inputs shared by the benchmarks.

use rhsim_core::dram::{Dram, DramConfig, FaultMap, RowAddr};
use rhsim_core::runner::{table1_fixtures, table2_fixtures, ScenarioConfig};

/// Every bundled table scenario.
pub fn corpus() -> Vec<ScenarioConfig> {
    let t1 = table1_fixtures().expect("bundled fixtures parse");
    let t2 = table2_fixtures().expect("bundled fixtures parse");
    t1.into_iter().chain(t2).flat_map(|(_, c)| c).collect()
}

/// Alternates two rows of bank 0 for `n` activations; returns flips seen.
pub fn double_sided(n: u64) -> usize {
    let cfg = DramConfig::default();
    let mut d = Dram::new(cfg, FaultMap::empty(), 0).expect("default geometry is valid");
    let g = cfg.geometry;
    let a = g.coordinate_of(RowAddr { bank: 0, row: 9 }, 0, 0);
    let b = g.coordinate_of(RowAddr { bank: 0, row: 11 }, 0, 0);
    for t in 0..n {
        let c = if t % 2 == 0 { a } else { b };
        d.activate(c, t).expect("coordinate is in range");
    }
    d.flips().len()
}
