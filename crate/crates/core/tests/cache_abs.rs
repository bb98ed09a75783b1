mod common;

use common::StampLru;
use ctmit::cache_abs::{analyze, initial_state, join, transfer, AbstractCacheState, AccessEvent, CacheConfig, Classification, MemBlock};
use ctmit::ir::parse::parse_module;
use ctmit::ir::Module;
use ctmit::sim::{random_inputs, Compiled, SimOptions};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn block(k: u8) -> MemBlock {
    MemBlock::new("t", k as u64)
}

/// Concrete LRU age (1 = youngest) from the timestamp oracle.
fn concrete_age(c: &StampLru, b: &MemBlock) -> Option<u32> {
    c.contents().iter().position(|x| x == b).map(|p| p as u32 + 1)
}

fn sound(s: &AbstractCacheState, c: &StampLru) -> bool {
    s.ages.iter().all(|(b, &a)| concrete_age(c, b).is_some_and(|x| x <= a))
}

fn arb_state(universe: u8, n: u32) -> impl Strategy<Value = AbstractCacheState> {
    prop::collection::btree_map(0..universe, 1..=n, 0..=universe as usize)
        .prop_map(|m| AbstractCacheState::from_pairs(m.into_iter().map(|(k, a)| (block(k), a))))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn join_is_a_semilattice(a in arb_state(8, 4), b in arb_state(8, 4), c in arb_state(8, 4)) {
        prop_assert_eq!(join(&a, &b), join(&b, &a));
        prop_assert_eq!(join(&a, &a), a.clone());
        prop_assert_eq!(join(&join(&a, &b), &c), join(&a, &join(&b, &c)));
    }

    /// Abstract ages bound concrete ages along any access sequence, whether
    /// each access is known exactly or only as a set of candidates.
    #[test]
    fn transfer_bounds_concrete_ages(
        lines in 1usize..=6,
        steps in prop::collection::vec((0u8..10, prop::collection::vec(0u8..10, 0..4)), 1..60),
    ) {
        let cfg = CacheConfig::new(lines, 64).unwrap();
        let mut c = StampLru::new(lines);
        let mut s = initial_state(&cfg);
        for (actual, extra) in steps {
            let ev = if extra.is_empty() {
                AccessEvent::Deterministic(block(actual))
            } else {
                let mut cands: Vec<MemBlock> = extra.iter().map(|&k| block(k)).collect();
                cands.push(block(actual));
                cands.sort();
                cands.dedup();
                if cands.len() == 1 { AccessEvent::Deterministic(cands.remove(0)) } else { AccessEvent::Nondet(cands) }
            };
            let before = concrete_age(&c, &block(actual));
            if let AccessEvent::Deterministic(b) = &ev {
                if s.age(b).is_some() {
                    prop_assert!(before.is_some(), "predicted hit missed");
                }
            }
            s = transfer(&s, &ev, &cfg);
            c.access(&block(actual));
            prop_assert!(sound(&s, &c), "{:?} vs {:?}", s, c.contents());
            prop_assert!(s.ages.values().all(|&a| (1..=lines as u32).contains(&a)));
        }
    }

    #[test]
    fn join_of_sound_states_is_sound(
        lines in 1usize..=6,
        a in prop::collection::vec(0u8..10, 0..30),
        b in prop::collection::vec(0u8..10, 0..30),
        tail in prop::collection::vec(0u8..10, 0..30),
    ) {
        let cfg = CacheConfig::new(lines, 64).unwrap();
        let walk = |seq: &[u8]| {
            let mut c = StampLru::new(lines);
            let mut s = initial_state(&cfg);
            for &k in seq {
                s = transfer(&s, &AccessEvent::Deterministic(block(k)), &cfg);
                c.access(&block(k));
            }
            (s, c)
        };
        let ((sa, mut ca), (sb, mut cb)) = (walk(&a), walk(&b));
        let mut j = join(&sa, &sb);
        prop_assert!(sound(&j, &ca) && sound(&j, &cb));
        for &k in &tail {
            j = transfer(&j, &AccessEvent::Deterministic(block(k)), &cfg);
            ca.access(&block(k));
            cb.access(&block(k));
            prop_assert!(sound(&j, &ca) && sound(&j, &cb));
        }
    }

    /// The analysis' state before every site bounds the simulator's cache
    /// at that point, for random programs and small caches.
    #[test]
    fn analysis_bounds_simulated_cache(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m: Module = parse_module(&common::random_program(&mut rng)).unwrap();
        let cfg = common::small_cache(&mut rng);
        let a = analyze(&m, m.entry_function().unwrap(), &cfg);
        let c = Compiled::new(&m).unwrap();
        let opts = SimOptions { cache: cfg, ..Default::default() };
        for _ in 0..3 {
            let mut inputs = random_inputs(&m, &mut rng, false);
            inputs.extend(random_inputs(&m, &mut rng, true));
            let mut bad = None;
            c.run_observed(&inputs, &opts, &mut |site, cache| {
                if bad.is_some() {
                    return;
                }
                if let Some(s) = a.states.get(site) {
                    for (b, &age) in &s.ages {
                        if !cache.age(b).is_some_and(|x| x <= age) {
                            bad = Some(format!("{site:?}: {b:?} bound {age}, actual {:?}", cache.age(b)));
                        }
                    }
                }
            })
            .unwrap();
            prop_assert!(bad.is_none(), "{}", bad.unwrap());
        }
    }
}

#[test]
fn led_lookups_stay_on_one_line() {
    let m = ctmit::ir::inline_all(&ctmit::corpus::load("led_subcell").unwrap()).unwrap();
    let f = m.entry_function().unwrap();
    let a = analyze(&m, f, &CacheConfig::default());
    let leaks = ctmit::sensitivity::detect_leaks(&m, &ctmit::sensitivity::propagate_taint(&m));
    assert!(!leaks.lut_accesses.is_empty());
    for l in &leaks.lut_accesses {
        assert!(matches!(a.events.get(&l.site()), Some(AccessEvent::Deterministic(_))), "{:?}", l.site());
    }
}

#[test]
fn unmitigated_sub_bytes_is_unknown_everywhere() {
    let m = ctmit::corpus::load("subbytes").unwrap();
    let f = m.entry_function().unwrap();
    let a = analyze(&m, f, &CacheConfig::default());
    let leaks = ctmit::sensitivity::detect_leaks(&m, &ctmit::sensitivity::propagate_taint(&m));
    assert_eq!(leaks.lut_accesses.len(), 16);
    for l in &leaks.lut_accesses {
        assert_eq!(a.class(&l.site()), Some(Classification::Unknown), "{:?}", l.site());
    }
}
