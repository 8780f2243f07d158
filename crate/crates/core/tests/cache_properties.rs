use proptest::prelude::*;
use rhsim_core::cache::{
    build_eviction_set, AccessKind, CacheConfig, CacheState, Outcome, SliceHash, UncachedKind,
};
use rhsim_core::dram::{Dram, DramConfig, FaultMap};

fn dram() -> Dram {
    Dram::new(DramConfig::default(), FaultMap::empty(), 0).unwrap()
}

fn config_strategy() -> impl Strategy<Value = CacheConfig> {
    (0u32..3, 0u32..4, 1u32..5, prop::bool::ANY).prop_flat_map(|(slice_bits, set_bits, ways, xor)| {
        let slices = 1 << slice_bits;
        let masks = prop::collection::vec(1u64..(1 << 16), slice_bits as usize);
        masks.prop_map(move |masks| CacheConfig {
            slices,
            sets_per_slice: 1 << set_bits,
            ways,
            line_bytes: 64,
            slice_hash: if xor && slices > 1 { SliceHash::XorMasks { masks } } else { SliceHash::Modulo },
            cat_ways: None,
        })
    })
}

proptest! {
    #[test]
    fn forwarded_traffic_is_misses_plus_uncached(
        ops in prop::collection::vec((0u64..4096, 0u8..4), 1..500)
    ) {
        let mut d = dram();
        let mut c = CacheState::new(CacheConfig::default(), d.geometry().capacity()).unwrap();
        c.add_uncached(0x8000..0x9000, UncachedKind::Dma).unwrap();
        let mut forwarded = 0u64;
        for (t, (line, op)) in ops.into_iter().enumerate() {
            let phys = line * 16;
            let t = t as u64;
            let r = match op {
                0 => { c.flush_line(phys); continue; }
                1 => c.access_kind(phys, t, AccessKind::NonTemporal, &mut d).unwrap(),
                _ => c.access(phys, t, &mut d).unwrap(),
            };
            forwarded += r.activation.is_some() as u64;
        }
        let k = c.counters();
        prop_assert_eq!(forwarded, k.misses + k.uncached);
    }

    #[test]
    fn evict_via_set_always_evicts(cfg in config_strategy(), target_line in 0u64..1024) {
        let mut d = dram();
        let mut c = CacheState::new(cfg.clone(), d.geometry().capacity()).unwrap();
        let pool: Vec<u64> = (0..1024).map(|l| l * 64).collect();
        let target = target_line * 64;
        let set = match build_eviction_set(&mut c, target, &pool, 64) {
            Ok(s) => s,
            Err(_) => {
                // Only legitimate when the pool really lacks congruent lines.
                let n = pool.iter().filter(|&&a| a != target && cfg.class_of(a) == cfg.class_of(target)).count();
                prop_assert!(n < cfg.ways as usize);
                return Ok(());
            }
        };
        prop_assert!(set.members.len() >= cfg.ways as usize);
        prop_assert!(set.members.iter().all(|&m| cfg.class_of(m) == cfg.class_of(target)));
        c.access(target, 0, &mut d).unwrap();
        let t = c.evict_via_set(&set, 1, &mut d).unwrap();
        prop_assert_eq!(c.access(target, t, &mut d).unwrap().outcome, Outcome::Miss);
    }

    #[test]
    fn discovery_is_blind_to_hash_labels(
        masks in prop::collection::vec(1u64..(1 << 14), 2),
        target_line in 0u64..256,
    ) {
        // Reordering masks permutes slice labels but keeps the observable
        // congruence classes, so discovery must return the same members.
        let base = CacheConfig {
            slices: 4,
            sets_per_slice: 4,
            ways: 3,
            line_bytes: 64,
            slice_hash: SliceHash::XorMasks { masks: masks.clone() },
            cat_ways: None,
        };
        let swapped = CacheConfig {
            slice_hash: SliceHash::XorMasks { masks: vec![masks[1], masks[0]] },
            ..base.clone()
        };
        let pool: Vec<u64> = (0..256).map(|l| l * 64).collect();
        let a = build_eviction_set(&mut CacheState::new(base, 1 << 16).unwrap(), target_line * 64, &pool, 64);
        let b = build_eviction_set(&mut CacheState::new(swapped, 1 << 16).unwrap(), target_line * 64, &pool, 64);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn repeated_evict_and_access_reaches_target_row(n in 1usize..20) {
        let mut d = dram();
        let cfg = CacheConfig::default();
        let mut c = CacheState::new(cfg, d.geometry().capacity()).unwrap();
        let pool: Vec<u64> = (0..1024).map(|l| l * 64).collect();
        let target = 0x3000;
        let set = build_eviction_set(&mut c, target, &pool, 64).unwrap();
        let mut target_activations = 0;
        let mut t = 0;
        for _ in 0..n {
            t = c.evict_via_set(&set, t, &mut d).unwrap();
            let r = c.access(target, t, &mut d).unwrap();
            t += 1;
            target_activations += r.activation.is_some() as usize;
        }
        prop_assert_eq!(target_activations, n);
    }
}
