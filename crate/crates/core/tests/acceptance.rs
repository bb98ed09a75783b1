//! End-to-end acceptance checks. Run with `cargo test --test acceptance`;
//! prints one PASS/FAIL line per check and exits non-zero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use ctmit::cache_abs::{analyze, join, transfer, AbstractCacheState, AccessEvent, CacheConfig, Classification, MemBlock};
use ctmit::corpus;
use ctmit::ir::{inline_all, Module};
use ctmit::sensitivity::{detect_leaks, propagate_taint};
use ctmit::sim::{
    check_constant_time, random_inputs, run, secret_bits, secret_samples, Compiled, ConcreteCache, Inputs, Sampler,
    SimOptions, Value,
};
use ctmit::transform_branch::CtselMode;
use ctmit::transform_lut::{predict_overhead, LutOptions, OverheadPrediction, Strategy};
use ctmit::{mitigate, MitigateOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < limit, || format!("{what} took {t:.2?}, limit {limit:?}"))
}

fn opts_for(strategy: Strategy, optimize: bool, cache: CacheConfig, ctsel: CtselMode) -> MitigateOptions {
    MitigateOptions { lut: LutOptions { strategy, optimize, cache }, ctsel }
}

fn default_opts() -> MitigateOptions {
    MitigateOptions::default()
}

fn load(name: &str) -> Module {
    inline_all(&corpus::load(name).expect("corpus program")).expect("inlines")
}

/// One secret-indexed lookup into an N-byte table per iteration of a
/// K-iteration loop.
fn lookup_loop(k: u64, n: u64) -> Module {
    let src = format!(
        "global T: [i8; {n}]
         entry fn bench(s: ptr<i8,{k}> secret) -> void {{
         e:
           br l
         l:
           %i = phi i32 [0, e], [%i1, l]
           %x = load i8 %s[%i]
           %xi = zext i8 %x to i32
           %j = and i32 %xi, {mask}
           %y = load i8 @T[%j]
           store i8 %s[%i], %y
           %i1 = add i32 %i, 1
           %c = icmp ult i32 %i1, {k}
           condbr %c, l, x
         x:
           ret
         }}",
        mask = n - 1
    );
    ctmit::load_module(&src).expect("benchmark parses")
}

fn overhead_model_matches_simulation() -> Outcome {
    let start = Instant::now();
    let expect = [
        (Strategy::ByteAccess, (4096, 4, 4092)),
        (Strategy::LineAccess, (64, 4, 60)),
        (Strategy::PreloadFirstIter, (19, 4, 15)),
    ];
    for (s, (a, m, h)) in expect {
        let p = predict_overhead(16, 256, 64, s).map_err(|e| e.to_string())?;
        ensure(p == OverheadPrediction { accesses: a, misses: m, hits: h }, || format!("{s}: predicted {p:?}"))?;
    }
    let mut grid = Vec::new();
    for k in [1u64, 4, 16] {
        for n in [16u64, 64, 256] {
            for cls in [16u64, 64] {
                for s in Strategy::ALL {
                    grid.push((k, n, cls, s));
                }
            }
        }
    }
    let checked: Vec<usize> = grid
        .par_iter()
        .map(|&(k, n, cls, s)| -> Result<usize, String> {
            let cache = CacheConfig::new(512, cls).unwrap();
            let m = lookup_loop(k, n);
            let (out, _) = mitigate(&m, &opts_for(s, s == Strategy::PreloadFirstIter, cache, CtselMode::Native))
                .map_err(|e| format!("K={k} N={n} CLS={cls} {s}: {e}"))?;
            let want = predict_overhead(k, n, cls, s).unwrap();
            let sim = SimOptions { cache, ..Default::default() };
            let samples = secret_samples(&out, Sampler::Random { seed: k * 1000 + n + cls, trials: 6 }).unwrap();
            for secret in &samples {
                let t = run(&out, secret, &sim).map_err(|e| e.to_string())?;
                let (hits, misses) = t.objects.get("@T").copied().unwrap_or((0, 0));
                let got = OverheadPrediction { accesses: hits + misses, misses, hits };
                ensure(got == want, || format!("K={k} N={n} CLS={cls} {s}: simulated {got:?}, predicted {want:?}"))?;
            }
            Ok(samples.len())
        })
        .collect::<Result<_, _>>()?;
    within(start, Duration::from_secs(1), "grid")?;
    Ok(format!("{} configurations, {} simulations, {:.2?}", grid.len(), checked.iter().sum::<usize>(), start.elapsed()))
}

fn sbox_misses(m: &Module, block: [i64; 16]) -> Result<u64, String> {
    let inputs = Inputs::from([("block".to_string(), Value::Array(block.to_vec()))]);
    let t = run(m, &inputs, &SimOptions::default()).map_err(|e| e.to_string())?;
    Ok(t.objects.get("@sbox").map(|x| x.1).unwrap_or(0))
}

fn sub_bytes_miss_counts() -> Outcome {
    let m = load("subbytes");
    for v in 0..256 {
        let got = sbox_misses(&m, [v; 16])?;
        ensure(got == 1, || format!("all bytes {v:#x}: {got} misses"))?;
    }
    let spread = [0x00, 0x40, 0x80, 0xc0, 0x01, 0x41, 0x81, 0xc1, 0x02, 0x42, 0x82, 0xc2, 0x03, 0x43, 0x83, 0xc3];
    let got = sbox_misses(&m, spread)?;
    ensure(got == 4, || format!("four-line secret: {got} misses"))?;
    Ok("equal bytes: 1 miss for all 256 values; four lines: 4 misses".into())
}

fn sampler_for(m: &Module, seed: u64) -> Sampler {
    if secret_bits(m) <= 16 {
        Sampler::Exhaustive
    } else {
        Sampler::Random { seed, trials: 1000 }
    }
}

fn public_inputs(m: &Module, seed: u64) -> Inputs {
    random_inputs(m, &mut ChaCha8Rng::seed_from_u64(seed), false)
}

fn every_sensitive_access_single_line(m: &Module) -> bool {
    let leaks = detect_leaks(m, &propagate_taint(m));
    let a = analyze(m, m.entry_function().unwrap(), &CacheConfig::default());
    leaks
        .lut_accesses
        .iter()
        .all(|l| matches!(a.events.get(&l.site()), Some(AccessEvent::Deterministic(_))))
}

fn constant_time_after_repair() -> Outcome {
    let start = Instant::now();
    let sim = SimOptions::default();
    let mut lines = Vec::new();
    for (k, e) in corpus::CORPUS.iter().enumerate() {
        let m = load(e.name);
        let leaks = detect_leaks(&m, &propagate_taint(&m));
        let public = public_inputs(&m, 100 + k as u64);
        let sampler = sampler_for(&m, 200 + k as u64);
        let before = check_constant_time(&m, &public, sampler, &sim).map_err(|err| format!("{}: {err}", e.name))?;
        let (out, _) = mitigate(&m, &default_opts()).map_err(|err| format!("{}: {err}", e.name))?;
        let after = check_constant_time(&out, &public, sampler, &sim).map_err(|err| format!("{}: {err}", e.name))?;
        match e.name {
            // Leak is real but not witnessed by sampling; detection is checked separately.
            "aes_key_schedule" => {}
            // A one-line table: the touched line never depends on the secret.
            "led_subcell" => ensure(before.max_cycle_delta == 0 && every_sensitive_access_single_line(&m), || {
                format!("led_subcell: delta {} before repair", before.max_cycle_delta)
            })?,
            _ if !leaks.is_empty() => ensure(before.max_cycle_delta > 0, || format!("{}: no variation before repair", e.name))?,
            _ => {}
        }
        ensure(after.max_cycle_delta == 0, || format!("{}: delta {} after repair", e.name, after.max_cycle_delta))?;
        lines.push(format!("{} {}->{}", e.name, before.max_cycle_delta, after.max_cycle_delta));
    }
    within(start, Duration::from_secs(120), "corpus check")?;
    Ok(format!("{} ({:.2?})", lines.join(", "), start.elapsed()))
}

fn full_inputs(m: &Module, rng: &mut ChaCha8Rng) -> Inputs {
    let mut i = random_inputs(m, rng, false);
    i.extend(random_inputs(m, rng, true));
    i
}

fn results_unchanged_by_repair() -> Outcome {
    let mut variants = Vec::new();
    for e in corpus::CORPUS {
        for s in Strategy::ALL {
            for optimize in [true, false] {
                for ctsel in [CtselMode::Native, CtselMode::Bitwise] {
                    variants.push((e.name, s, optimize, ctsel));
                }
            }
        }
    }
    let sim = SimOptions::default();
    let runs: Vec<usize> = variants
        .par_iter()
        .map(|&(name, s, optimize, ctsel)| -> Result<usize, String> {
            let label = format!("{name} {s} optimize={optimize} {ctsel:?}");
            let m = load(name);
            let (out, _) = mitigate(&m, &opts_for(s, optimize, CacheConfig::default(), ctsel))
                .map_err(|e| format!("{label}: {e}"))?;
            let (a, b) = (Compiled::new(&m).unwrap(), Compiled::new(&out).unwrap());
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            for _ in 0..1000 {
                let inputs = full_inputs(&m, &mut rng);
                let x = a.run(&inputs, &sim).map_err(|e| e.to_string())?;
                let y = b.run(&inputs, &sim).map_err(|e| format!("{label}: {e}"))?;
                ensure((x.ret, &x.memory) == (y.ret, &y.memory), || format!("{label}: outputs differ on {inputs:?}"))?;
            }
            Ok(1000)
        })
        .collect::<Result<_, _>>()?;
    Ok(format!("{} variants x 1000 inputs, {} runs", variants.len(), runs.iter().sum::<usize>()))
}

fn must_hit_is_sound() -> Outcome {
    let programs = 10_000u64;
    let tallies: Vec<(usize, usize)> = (0..programs)
        .into_par_iter()
        .map(|seed| -> Result<(usize, usize), String> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let src = common::random_program(&mut rng);
            let m = ctmit::load_module(&src).map_err(|e| format!("seed {seed}: {e}\n{src}"))?;
            let f = m.entry_function().unwrap();
            let cache = common::small_cache(&mut rng);
            let a = analyze(&m, f, &cache);
            let sim = SimOptions { cache, ..Default::default() };
            let mut checked = 0;
            for _ in 0..3 {
                let inputs = full_inputs(&m, &mut rng);
                let t = run(&m, &inputs, &sim).map_err(|e| format!("seed {seed}: {e}"))?;
                for (site, c) in &a.classes {
                    if *c == Classification::MustHit {
                        if let Some(tally) = t.sites.get(site) {
                            ensure(tally.misses == 0, || format!("seed {seed}: MustHit site {site} missed\n{src}"))?;
                            checked += tally.hits as usize;
                        }
                    }
                }
            }
            Ok((a.must_hit_count(), checked))
        })
        .collect::<Result<_, _>>()?;
    let sites: usize = tallies.iter().map(|t| t.0).sum();
    let visits: usize = tallies.iter().map(|t| t.1).sum();
    ensure(sites > 0, || "no MustHit sites generated".into())?;
    Ok(format!("{programs} programs, {sites} MustHit sites, {visits} visits, 0 violations"))
}

fn state(pairs: &[(&str, u32)]) -> AbstractCacheState {
    AbstractCacheState::from_pairs(pairs.iter().map(|(n, a)| (MemBlock::new(*n, 0), *a)))
}

fn access(name: &str) -> AccessEvent {
    AccessEvent::Deterministic(MemBlock::new(name, 0))
}

fn abstract_cache_vectors() -> Outcome {
    let cfg = CacheConfig::new(4, 64).unwrap();
    let cases = [
        (
            "renew of an uncached block",
            transfer(&state(&[("a", 1), ("b", 2), ("c", 3), ("d", 4)]), &access("e"), &cfg),
            state(&[("a", 2), ("b", 3), ("c", 4), ("e", 1)]),
        ),
        (
            "renew of a cached block",
            transfer(&state(&[("a", 1), ("e", 2), ("b", 3), ("c", 4)]), &access("e"), &cfg),
            state(&[("a", 2), ("e", 1), ("b", 3), ("c", 4)]),
        ),
        (
            "join",
            join(&state(&[("a", 1), ("b", 2), ("c", 3), ("d", 4)]), &state(&[("e", 1), ("c", 2), ("a", 3), ("d", 4)])),
            state(&[("a", 3), ("c", 3), ("d", 4)]),
        ),
        (
            "uncertain access within one line",
            transfer(&state(&[("sbox", 1)]), &AccessEvent::Nondet(vec![MemBlock::new("sbox", 0)]), &cfg),
            state(&[("sbox", 1)]),
        ),
    ];
    for (what, got, want) in &cases {
        ensure(got == want, || format!("{what}: got {got:?}, want {want:?}"))?;
    }
    let s = state(&[("a", 1), ("b", 3)]);
    ensure(join(&s, &s) == s, || "join is not idempotent".into())?;
    Ok(format!("{} vectors", cases.len() + 1))
}

fn optimization_effectiveness() -> Outcome {
    let led = load("led_subcell");
    let (_, rep) = mitigate(&led, &default_opts()).map_err(|e| e.to_string())?;
    ensure(rep.tables.rewrites == 0, || format!("led_subcell: {} rewrites", rep.tables.rewrites))?;
    let sb = load("subbytes");
    let (_, with) = mitigate(&sb, &default_opts()).map_err(|e| e.to_string())?;
    let (_, without) = mitigate(&sb, &opts_for(Strategy::PreloadFirstIter, false, CacheConfig::default(), CtselMode::Native))
        .map_err(|e| e.to_string())?;
    let (w, wo) = (with.tables.rewritten_contexts(), without.tables.rewritten_contexts());
    ensure((w, wo) == (1, 16), || format!("subbytes rewritten contexts {w} with, {wo} without"))?;
    let sim = SimOptions::default();
    for e in corpus::CORPUS {
        let m = load(e.name);
        let (a, _) = mitigate(&m, &default_opts()).map_err(|err| err.to_string())?;
        let (b, _) = mitigate(&m, &opts_for(Strategy::PreloadFirstIter, false, CacheConfig::default(), CtselMode::Native))
            .map_err(|err| err.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let inputs = full_inputs(&m, &mut rng);
            let x = run(&a, &inputs, &sim).map_err(|err| err.to_string())?.cycles;
            let y = run(&b, &inputs, &sim).map_err(|err| err.to_string())?.cycles;
            ensure(x <= y, || format!("{}: {x} cycles optimized vs {y} unoptimized", e.name))?;
        }
    }
    Ok(format!("led_subcell 0 rewrites; subbytes contexts {w} vs {wo}; optimized never slower"))
}

fn detection_counts() -> Outcome {
    let mu = load("mu");
    let r = detect_leaks(&mu, &propagate_taint(&mu));
    ensure(r.totals.if_sensitive == 3, || format!("mu: {} sensitive conditionals", r.totals.if_sensitive))?;

    let ek = load("expand_key");
    let r = detect_leaks(&ek, &propagate_taint(&ek));
    ensure(r.totals.if_total >= 1 && r.conditionals.is_empty(), || format!("expand_key: flagged {:?}", r.conditionals))?;

    let ks = load("aes_key_schedule");
    let r = detect_leaks(&ks, &propagate_taint(&ks));
    let a = analyze(&ks, ks.entry_function().unwrap(), &CacheConfig::default());
    let class_of = |table: &str| -> Vec<Classification> {
        r.lut_accesses
            .iter()
            .filter(|l| l.array.as_deref() == Some(table))
            .map(|l| a.class(&l.site()).unwrap_or(Classification::Unknown))
            .collect()
    };
    let (se, td) = (class_of("@SE"), class_of("@TD"));
    ensure(!se.is_empty() && se.iter().all(|c| *c == Classification::Unknown), || format!("SE accesses: {se:?}"))?;
    ensure(!td.is_empty() && td.iter().all(|c| *c == Classification::MustHit), || format!("TD accesses: {td:?}"))?;
    Ok(format!("mu 3 IFs; key_length branch unflagged; SE {} Unknown, TD {} MustHit", se.len(), td.len()))
}

fn lru_matches_reference() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for seq in 0..1000 {
        let n = rng.random_range(1..=8);
        let cfg = CacheConfig::new(n, 64).unwrap();
        let mut fast = ConcreteCache::new(cfg);
        let mut slow = common::StampLru::new(n);
        let objects = rng.random_range(1..=4);
        let lines = rng.random_range(1..=6);
        for step in 0..10_000 {
            let b = MemBlock::new(format!("o{}", rng.random_range(0..objects)), rng.random_range(0..lines));
            let (x, y) = (fast.access(b.clone()), slow.access(&b));
            ensure(x == y, || format!("sequence {seq} step {step}: hit {x} vs reference {y}"))?;
        }
        ensure(fast.contents() == slow.contents().as_slice(), || format!("sequence {seq}: final contents differ"))?;
    }
    Ok("1000 sequences of 10000 accesses".into())
}

fn main() {
    let checks: [(&str, fn() -> Outcome); 9] = [
        ("overhead model matches simulation", overhead_model_matches_simulation),
        ("sub_bytes miss counts", sub_bytes_miss_counts),
        ("constant time after repair", constant_time_after_repair),
        ("results unchanged by repair", results_unchanged_by_repair),
        ("must-hit soundness", must_hit_is_sound),
        ("abstract cache vectors", abstract_cache_vectors),
        ("optimization effectiveness", optimization_effectiveness),
        ("detection counts", detection_counts),
        ("lru matches reference", lru_matches_reference),
    ];
    let mut failed = 0;
    for (k, (name, check)) in checks.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("[{}] PASS {name}: {detail} ({:.2?})", k + 1, start.elapsed()),
            Err(why) => {
                failed += 1;
                println!("[{}] FAIL {name}: {why}", k + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
