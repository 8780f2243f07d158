use bitflags::bitflags;
use serde::{Deserialize, Serialize};

use super::{AttackScenario, Bypass, Environment, EvMethod, FlushMode, Lp, Origin, Pattern};
use crate::dram::RowBufferPolicy;

bitflags! {
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
    pub struct Capabilities: u16 {
        const FLUSH_INSTRUCTION = 1;
        const NON_TEMPORAL = 1 << 1;
        const PAGEMAP_READ = 1 << 2;
        const UNCACHED_DMA = 1 << 3;
        const UNCACHED_RDMA = 1 << 4;
        const EVICTION_SETS = 1 << 5;
        const HUGE_PAGES = 1 << 6;
        const DEDUP_CONTROL = 1 << 7;
        const NATIVE_CODE = 1 << 8;
        const PACKET_ONLY = 1 << 9;
    }
}

/// Capability set of an origin; network conditionals come from the
/// declared victim properties.
pub fn capabilities(origin: Origin, env: &Environment) -> Capabilities {
    let upro = Capabilities::FLUSH_INSTRUCTION
        | Capabilities::NON_TEMPORAL
        | Capabilities::UNCACHED_DMA
        | Capabilities::EVICTION_SETS
        | Capabilities::HUGE_PAGES
        | Capabilities::NATIVE_CODE;
    match origin {
        Origin::UPro => upro,
        Origin::PPro => upro | Capabilities::PAGEMAP_READ | Capabilities::DEDUP_CONTROL,
        Origin::Website => Capabilities::EVICTION_SETS | Capabilities::HUGE_PAGES,
        Origin::Network => {
            let mut c = Capabilities::PACKET_ONLY;
            c.set(Capabilities::EVICTION_SETS, env.victim_cat);
            c.set(Capabilities::UNCACHED_RDMA, env.victim_rdma);
            c.set(Capabilities::FLUSH_INSTRUCTION, env.victim_flushes_packets);
            c
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Feasibility {
    Feasible { notes: Vec<String> },
    Infeasible { reason: String },
}

impl Feasibility {
    pub fn is_feasible(&self) -> bool {
        matches!(self, Feasibility::Feasible { .. })
    }
}

/// Depends only on the origin's capabilities, the chosen techniques, the
/// declared victim properties and the DRAM row-buffer policy.
pub fn check_feasibility(s: &AttackScenario, policy: RowBufferPolicy) -> Feasibility {
    let a = &s.attack;
    let caps = capabilities(a.origin, &s.environment);
    let no = |reason: &str| Feasibility::Infeasible { reason: reason.into() };
    match (a.bypass, a.ba1_mode) {
        (Bypass::Ba1, FlushMode::Clflush) if !caps.contains(Capabilities::FLUSH_INSTRUCTION) => {
            return no("Ba1 needs a flush instruction, which this origin cannot issue");
        }
        (Bypass::Ba1, FlushMode::NonTemporal) if !caps.contains(Capabilities::NON_TEMPORAL) => {
            return no("Ba1 with non-temporal access needs native code");
        }
        (Bypass::Ba2, _) if !caps.contains(Capabilities::EVICTION_SETS) => {
            return no("Ba2 needs eviction-set construction");
        }
        (Bypass::Ba3, _) if !caps.intersects(Capabilities::UNCACHED_DMA | Capabilities::UNCACHED_RDMA) => {
            return no("Ba3 needs uncached DMA or RDMA memory");
        }
        (Bypass::Direct, _) if !s.environment.cache_disabled => {
            return no("direct hammering needs a memory path without a cache");
        }
        _ => {}
    }
    let mut notes = Vec::new();
    match a.pattern {
        Pattern::Bb2
            if !caps.intersects(Capabilities::PAGEMAP_READ | Capabilities::HUGE_PAGES) && a.lp != Lp::A2 =>
        {
            return no("Bb2 needs physical address knowledge or contiguous memory");
        }
        Pattern::Bb3 if policy == RowBufferPolicy::OpenPage => {
            return no("Bb3 needs a close-page or adaptive row-buffer policy");
        }
        Pattern::Bb3 if a.origin == Origin::Website => {
            notes.push("one-location hammering from a website has no published precedent".into());
        }
        _ => {}
    }
    if a.lp == Lp::A3 && !caps.contains(Capabilities::DEDUP_CONTROL) {
        return no("A3 needs control over memory deduplication, which requires privilege");
    }
    match a.ev {
        EvMethod::C1 if !s.target.class.readable() => {
            return no("C1 needs a target the attacker can read");
        }
        EvMethod::C2 if a.origin == Origin::Network && !s.environment.remote_observable => {
            return no("C2 from the network needs victim behaviour that is observable remotely");
        }
        _ => {}
    }
    Feasibility::Feasible { notes }
}

#[cfg(test)]
mod tests {
    use super::super::{AttackParams, ObjectKind, Target, TargetClass};
    use super::*;

    fn scenario(origin: Origin, lp: Lp, bypass: Bypass, pattern: Pattern, ev: EvMethod) -> AttackScenario {
        AttackScenario {
            attack: AttackParams {
                origin,
                lp,
                bypass,
                pattern,
                ev,
                se_enabled: false,
                budget: 100,
                aggressor_distance: 1,
                ba1_mode: FlushMode::Clflush,
                ecc_crafted: false,
                lp_attempts: None,
            },
            target: Target::new(TargetClass::Dpuo, ObjectKind::PageTable),
            environment: Environment::default(),
        }
    }

    #[test]
    fn drammer_shape_is_feasible() {
        let s = scenario(Origin::UPro, Lp::A2, Bypass::Ba3, Pattern::Bb2, EvMethod::C2);
        assert!(check_feasibility(&s, RowBufferPolicy::OpenPage).is_feasible());
    }

    #[test]
    fn website_cannot_flush() {
        let s = scenario(Origin::Website, Lp::A1, Bypass::Ba1, Pattern::Bb1, EvMethod::C2);
        assert!(!check_feasibility(&s, RowBufferPolicy::OpenPage).is_feasible());
    }

    #[test]
    fn website_one_location_carries_a_note() {
        let s = scenario(Origin::Website, Lp::A1, Bypass::Ba2, Pattern::Bb3, EvMethod::C2);
        match check_feasibility(&s, RowBufferPolicy::ClosePage) {
            Feasibility::Feasible { notes } => assert_eq!(notes.len(), 1),
            f => panic!("{f:?}"),
        }
    }

    #[test]
    fn network_flags_are_conditional() {
        let mut s = scenario(Origin::Network, Lp::A2, Bypass::Ba3, Pattern::Bb2, EvMethod::C2);
        s.environment.remote_observable = true;
        assert!(!check_feasibility(&s, RowBufferPolicy::OpenPage).is_feasible());
        s.environment.victim_rdma = true;
        assert!(check_feasibility(&s, RowBufferPolicy::OpenPage).is_feasible());
        let caps = capabilities(Origin::Network, &Environment::default());
        assert!(caps.contains(Capabilities::PACKET_ONLY) && !caps.contains(Capabilities::NATIVE_CODE));
    }
}
