mod common;

use ctmit::ir::cfg::{Cfg, DomTree, PostDomTree};
use ctmit::ir::inline::inline_all;
use ctmit::ir::loops::find_loops;
use ctmit::ir::parse::parse_module;
use ctmit::ir::peel::peel_first_iteration;
use ctmit::ir::print::print_module;
use ctmit::ir::validate::validate;
use ctmit::ir::{Instr, Module};
use ctmit::sim::{random_inputs, run, Inputs, SimOptions};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn program(seed: u64) -> Module {
    let src = common::random_program(&mut ChaCha8Rng::seed_from_u64(seed));
    let m = parse_module(&src).unwrap_or_else(|e| panic!("{e}\n{src}"));
    assert!(validate(&m).is_empty(), "{:?}\n{src}", validate(&m));
    m
}

fn inputs(m: &Module, seed: u64) -> Inputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut i = random_inputs(m, &mut rng, false);
    i.extend(random_inputs(m, &mut rng, true));
    i
}

/// `a` post-dominates `b` when no return is reachable from `b` once `a` is gone.
fn brute_post_dominates(m: &Module, a: usize, b: usize) -> bool {
    let f = m.entry_function().unwrap();
    let cfg = Cfg::new(f);
    if a == b {
        return true;
    }
    let mut seen = vec![false; cfg.len()];
    let mut stack = vec![b];
    seen[b] = true;
    while let Some(x) = stack.pop() {
        if cfg.succs[x].is_empty() {
            return false;
        }
        for &s in &cfg.succs[x] {
            if s != a && !seen[s] {
                seen[s] = true;
                stack.push(s);
            }
        }
    }
    true
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn print_parse_round_trip(seed in any::<u64>()) {
        let m = program(seed);
        let text = print_module(&m);
        let again = parse_module(&text).unwrap();
        prop_assert_eq!(&again, &m);
        prop_assert_eq!(print_module(&again), text);
    }

    #[test]
    fn dominators_match_definition(seed in any::<u64>()) {
        let m = program(seed);
        let f = m.entry_function().unwrap();
        let cfg = Cfg::new(f);
        let dt = DomTree::new(&cfg);
        let brute = common::brute_dominators(f);
        for a in 0..cfg.len() {
            for b in 0..cfg.len() {
                prop_assert_eq!(dt.dominates(a, b), brute[a][b], "{} dom {}", a, b);
            }
        }
    }

    #[test]
    fn post_dominators_match_definition(seed in any::<u64>()) {
        let m = program(seed);
        let f = m.entry_function().unwrap();
        let cfg = Cfg::new(f);
        let pdt = PostDomTree::new(f, &cfg);
        for a in 0..cfg.len() {
            for b in 0..cfg.len() {
                prop_assert_eq!(pdt.post_dominates(a, b), brute_post_dominates(&m, a, b), "{} pdom {}", a, b);
            }
        }
    }

    #[test]
    fn loop_bounds_cover_observed_trips(seed in any::<u64>()) {
        let m = program(seed);
        let f = m.entry_function().unwrap();
        let cfg = Cfg::new(f);
        let t = run(&m, &inputs(&m, seed), &SimOptions::default()).unwrap();
        for l in find_loops(f) {
            let bound = l.bound.expect("generated loops have constant trip counts");
            let h = cfg.idx(&l.header).unwrap();
            let mut run_len = 0u64;
            let mut prev: Option<usize> = None;
            for &b in &t.blocks {
                if b == h {
                    let entered = prev.is_none_or(|p| !l.contains(&cfg.labels[p]));
                    run_len = if entered { 1 } else { run_len + 1 };
                    prop_assert!(run_len <= bound, "header {} ran {} > {}", l.header, run_len, bound);
                }
                prev = Some(b);
            }
        }
    }

    #[test]
    fn peeling_preserves_results(seed in any::<u64>()) {
        let m = program(seed);
        let f = m.entry_function().unwrap();
        let base = run(&m, &inputs(&m, seed), &SimOptions::default()).unwrap();
        for l in find_loops(f) {
            if l.bound < Some(2) {
                prop_assert!(peel_first_iteration(f, &l).is_err());
                continue;
            }
            let mut pm = m.clone();
            *pm.entry_function_mut().unwrap() = peel_first_iteration(f, &l).unwrap();
            prop_assert!(validate(&pm).is_empty(), "{:?}", validate(&pm));
            let t = run(&pm, &inputs(&m, seed), &SimOptions::default()).unwrap();
            prop_assert_eq!(t.ret, base.ret);
            prop_assert_eq!(&t.memory, &base.memory);
            prop_assert_eq!(t.hits + t.misses, base.hits + base.misses);
        }
    }
}

#[test]
fn inlining_removes_calls_and_keeps_results() {
    let src = "
global tab: [i32; 4] = [10, 20, 30, 40]
fn pick(a: ptr<i32,4>, k: i32) -> i32 {
b0:
  %m = and i32 %k, 3
  %v = load i32 %a[%m]
  ret %v
}
fn twice(x: i32) -> i32 {
b0:
  %y = add i32 %x, %x
  ret %y
}
entry fn main(k: i32) -> i32 {
b0:
  %a = call i32 @pick(@tab, %k)
  %b = call i32 @twice(%a)
  %c = call i32 @pick(@tab, %b)
  ret %c
}";
    let m = parse_module(src).unwrap();
    let flat = inline_all(&m).unwrap();
    assert!(validate(&flat).is_empty());
    let f = flat.entry_function().unwrap();
    assert!(f.blocks.iter().flat_map(|b| &b.instrs).all(|i| !matches!(i, Instr::Call { .. })));
    for k in 0..8i64 {
        let t = run(&flat, &[("k".to_string(), ctmit::sim::Value::Scalar(k))].into(), &SimOptions::default()).unwrap();
        let a = [10, 20, 30, 40][(k & 3) as usize];
        assert_eq!(t.ret, Some([10, 20, 30, 40][((2 * a) & 3) as usize]));
    }
}

#[test]
fn corpus_round_trips_through_text() {
    for name in ctmit::corpus::names() {
        let m = ctmit::corpus::load(name).unwrap();
        assert_eq!(parse_module(&print_module(&m)).unwrap(), m, "{name}");
    }
}
