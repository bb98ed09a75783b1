mod common;

use common::Shape;
use ctmit::cache_abs::CacheConfig;
use ctmit::ir::parse::parse_module;
use ctmit::ir::validate::validate;
use ctmit::ir::Module;
use ctmit::sensitivity::{detect_leaks, propagate_taint};
use ctmit::sim::{check_constant_time, random_inputs, Compiled, Inputs, Sampler, SimOptions};
use ctmit::transform_branch::{fold_ctsel, lower_ctsel, repair_branches, CtselMode};
use ctmit::transform_lut::{lut_repair_pass, predict_original, predict_overhead, LutOptions, Strategy};
use ctmit::{mitigate, Error, MitigateOptions};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const REPAIRABLE: Shape = Shape { loops_in_arms: false, secret_branches: true, statements: 24 };

fn program(seed: u64, shape: Shape) -> Module {
    parse_module(&common::random_program_with(&mut ChaCha8Rng::seed_from_u64(seed), shape)).unwrap()
}

fn full_inputs(m: &Module, rng: &mut ChaCha8Rng) -> Inputs {
    let mut i = random_inputs(m, rng, false);
    i.extend(random_inputs(m, rng, true));
    i
}

fn assert_same_results(a: &Module, b: &Module, seed: u64, n: usize) -> Result<(), TestCaseError> {
    let (ca, cb) = (Compiled::new(a).unwrap(), Compiled::new(b).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for _ in 0..n {
        let i = full_inputs(a, &mut rng);
        let (ta, tb) = (ca.run(&i, &SimOptions::default()).unwrap(), cb.run(&i, &SimOptions::default()).unwrap());
        prop_assert_eq!(ta.ret, tb.ret);
        prop_assert_eq!(&ta.memory, &tb.memory);
    }
    Ok(())
}

fn variants() -> Vec<MitigateOptions> {
    let mut v = Vec::new();
    for strategy in Strategy::ALL {
        for optimize in [false, true] {
            for ctsel in [CtselMode::Native, CtselMode::Bitwise] {
                v.push(MitigateOptions { lut: LutOptions { strategy, optimize, ..Default::default() }, ctsel });
            }
        }
    }
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(250))]

    #[test]
    fn branch_repair_removes_secret_branches(seed in any::<u64>()) {
        let m = program(seed, REPAIRABLE);
        let (out, rep) = repair_branches(&m).unwrap();
        prop_assert!(validate(&out).is_empty(), "{:?}", validate(&out));
        prop_assert!(propagate_taint(&out).branches.is_empty());
        prop_assert_eq!(rep.mitigated.len(), propagate_taint(&m).branches.len());
        assert_same_results(&m, &out, seed, 8)?;
        let mut folded = out.clone();
        *folded.entry_function_mut().unwrap() = fold_ctsel(out.entry_function().unwrap());
        prop_assert!(validate(&folded).is_empty());
        prop_assert!(folded.entry_function().unwrap().instr_count() <= out.entry_function().unwrap().instr_count());
        assert_same_results(&m, &folded, seed, 8)?;
        for mode in [CtselMode::Native, CtselMode::Bitwise] {
            let mut low = folded.clone();
            *low.entry_function_mut().unwrap() = lower_ctsel(folded.entry_function().unwrap(), mode);
            prop_assert!(validate(&low).is_empty());
            assert_same_results(&m, &low, seed, 8)?;
        }
    }

    /// Some loops nested in secret arms are beyond the repair; those must be
    /// refused, and everything accepted must be correct and constant-time.
    #[test]
    fn nested_loops_are_repaired_or_refused(seed in any::<u64>()) {
        let m = program(seed, Shape::default());
        match mitigate(&m, &MitigateOptions::default()) {
            Ok((out, _)) => {
                assert_same_results(&m, &out, seed, 4)?;
                let public = random_inputs(&m, &mut ChaCha8Rng::seed_from_u64(seed), false);
                let v = check_constant_time(&out, &public, Sampler::Random { seed, trials: 16 }, &SimOptions::default()).unwrap();
                prop_assert!(v.constant_time, "delta {}", v.max_cycle_delta);
            }
            Err(e) => prop_assert!(matches!(e, Error::Transform { .. }), "{e}"),
        }
    }

    #[test]
    fn table_repair_keeps_results(seed in any::<u64>()) {
        let m = program(seed, Shape { secret_branches: false, ..REPAIRABLE });
        let leaks = detect_leaks(&m, &propagate_taint(&m));
        for strategy in Strategy::ALL {
            for optimize in [false, true] {
                let opts = LutOptions { strategy, optimize, ..Default::default() };
                let (out, plan) = lut_repair_pass(&m, &leaks, &opts).unwrap();
                prop_assert!(validate(&out).is_empty(), "{:?}", validate(&out));
                prop_assert_eq!(plan.accesses.len(), leaks.lut_accesses.len());
                assert_same_results(&m, &out, seed, 4)?;
            }
        }
    }

    #[test]
    fn second_table_repair_changes_nothing(seed in any::<u64>()) {
        let m = program(seed, Shape { secret_branches: false, ..REPAIRABLE });
        let leaks = detect_leaks(&m, &propagate_taint(&m));
        let (once, _) = lut_repair_pass(&m, &leaks, &LutOptions::default()).unwrap();
        let again = detect_leaks(&once, &propagate_taint(&once));
        let (twice, plan) = lut_repair_pass(&once, &again, &LutOptions::default()).unwrap();
        prop_assert_eq!(plan.rewrites, 0);
        prop_assert_eq!(twice, once);
    }

    /// End to end: every repaired program computes the same thing and runs in
    /// the same number of cycles whatever the secret.
    #[test]
    fn mitigated_programs_are_constant_time(seed in any::<u64>()) {
        let m = program(seed, REPAIRABLE);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let public = random_inputs(&m, &mut rng, false);
        for opts in variants() {
            let (out, _) = mitigate(&m, &opts).unwrap();
            assert_same_results(&m, &out, seed, 4)?;
            let v = check_constant_time(&out, &public, Sampler::Random { seed, trials: 24 }, &SimOptions::default()).unwrap();
            prop_assert!(v.constant_time, "{:?} delta {}", opts, v.max_cycle_delta);
            prop_assert!(v.same_block_trace);
        }
    }

    #[test]
    fn prediction_counts_add_up(k in 1u64..4096, n in 1u64..4096, cls in prop::sample::select(vec![1u64, 4, 16, 32, 64, 128])) {
        let lines = n.div_ceil(cls);
        for s in Strategy::ALL {
            let p = predict_overhead(k, n, cls, s).unwrap();
            prop_assert_eq!(p.accesses, p.misses + p.hits);
            prop_assert_eq!(p.misses, lines);
        }
        let o = predict_original(k, n, cls).unwrap();
        prop_assert!(1 <= o.min_misses && o.min_misses <= o.max_misses && o.max_misses <= k.min(lines));
    }
}

#[test]
fn zero_sized_predictions_are_rejected() {
    assert!(predict_overhead(0, 256, 64, Strategy::ByteAccess).is_err());
    assert!(predict_overhead(16, 0, 64, Strategy::LineAccess).is_err());
    assert!(predict_original(16, 256, 0).is_err());
}

#[test]
fn small_caches_still_preserve_results() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for seed in 0..40 {
        let m = program(seed, REPAIRABLE);
        let cache: CacheConfig = common::small_cache(&mut rng);
        let opts = MitigateOptions { lut: LutOptions { cache, ..Default::default() }, ..Default::default() };
        let (out, _) = mitigate(&m, &opts).unwrap();
        assert_same_results(&m, &out, seed, 4).unwrap();
    }
}
