#![allow(dead_code)]

use std::collections::HashMap;
use std::fmt::Write;

use ctmit::cache_abs::{CacheConfig, MemBlock};
use ctmit::ir::{Cfg, Function};
use rand::seq::IndexedRandom;
use rand::Rng;

/// Recency-timestamp LRU: every resident block remembers when it was last
/// touched, and the stalest one is evicted.
pub struct StampLru {
    capacity: usize,
    clock: u64,
    stamps: HashMap<MemBlock, u64>,
}

impl StampLru {
    pub fn new(capacity: usize) -> Self {
        StampLru { capacity, clock: 0, stamps: HashMap::new() }
    }

    pub fn access(&mut self, b: &MemBlock) -> bool {
        self.clock += 1;
        let hit = self.stamps.contains_key(b);
        if !hit && self.stamps.len() == self.capacity {
            let victim = self.stamps.iter().min_by_key(|(_, t)| **t).map(|(k, _)| k.clone()).unwrap();
            self.stamps.remove(&victim);
        }
        self.stamps.insert(b.clone(), self.clock);
        hit
    }

    /// Resident blocks, most recent first.
    pub fn contents(&self) -> Vec<MemBlock> {
        let mut v: Vec<(&MemBlock, &u64)> = self.stamps.iter().collect();
        v.sort_by(|a, b| b.1.cmp(a.1));
        v.into_iter().map(|(k, _)| k.clone()).collect()
    }
}

/// Dominator sets by definition: `a` dominates `b` when `b` cannot be
/// reached from the entry once `a` is removed.
pub fn brute_dominators(f: &Function) -> Vec<Vec<bool>> {
    let cfg = Cfg::new(f);
    let n = cfg.len();
    let reach = |skip: Option<usize>| {
        let mut seen = vec![false; n];
        if skip == Some(0) {
            return seen;
        }
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(b) = stack.pop() {
            for &s in &cfg.succs[b] {
                if Some(s) != skip && !seen[s] {
                    seen[s] = true;
                    stack.push(s);
                }
            }
        }
        seen
    };
    let all = reach(None);
    let mut dom = vec![vec![false; n]; n];
    for a in 0..n {
        let without = reach(Some(a));
        for b in 0..n {
            dom[a][b] = all[b] && (a == b || !without[b]);
        }
    }
    dom
}

/// A random cache configuration with at most 8 lines.
pub fn small_cache<R: Rng>(rng: &mut R) -> CacheConfig {
    CacheConfig::new(rng.random_range(1..=8), *[4u64, 8, 16, 32, 64].choose(rng).unwrap()).unwrap()
}

struct Gen<'a, R: Rng> {
    rng: &'a mut R,
    out: String,
    regs: usize,
    blocks: usize,
    arrays: Vec<(String, &'static str, u64)>,
    budget: usize,
    shape: Shape,
    /// Registers known not to depend on the secret.
    public: Vec<String>,
}

/// Knobs for [`random_program_with`].
#[derive(Debug, Clone, Copy)]
pub struct Shape {
    /// Allow loops inside the arms of a conditional.
    pub loops_in_arms: bool,
    /// Allow branches on values derived from the secret.
    pub secret_branches: bool,
    pub statements: usize,
}

impl Default for Shape {
    fn default() -> Self {
        Shape { loops_in_arms: true, secret_branches: true, statements: 24 }
    }
}

impl<R: Rng> Gen<'_, R> {
    fn reg(&mut self) -> String {
        self.regs += 1;
        format!("v{}", self.regs)
    }

    fn label(&mut self) -> String {
        self.blocks += 1;
        format!("L{}", self.blocks)
    }

    /// A value to branch on, honouring `secret_branches`.
    fn branchable(&mut self, pool: &[String]) -> Option<String> {
        let ok: Vec<&String> = pool.iter().filter(|r| self.shape.secret_branches || self.public.contains(*r)).collect();
        ok.choose(self.rng).map(|r| (*r).clone())
    }

    fn index(&mut self, pool: &[String], len: u64) -> String {
        if self.rng.random_bool(0.3) || pool.is_empty() {
            return self.rng.random_range(0..len).to_string();
        }
        let r = pool.choose(self.rng).unwrap().clone();
        let d = self.reg();
        writeln!(self.out, "  %{d} = and i32 %{r}, {}", len - 1).unwrap();
        format!("%{d}")
    }

    /// Emits statements into the open block `cur`; returns the open block
    /// at the end.
    fn seq(&mut self, mut cur: String, pool: &mut Vec<String>, depth: usize, in_arm: bool) -> String {
        let n = self.rng.random_range(1..=5);
        for _ in 0..n {
            if self.budget == 0 {
                break;
            }
            self.budget -= 1;
            let pick = self.rng.random_range(0..10);
            match pick {
                0..=3 => {
                    let (name, ty, len) = self.arrays.choose(self.rng).unwrap().clone();
                    let idx = self.index(pool, len);
                    let v = self.reg();
                    writeln!(self.out, "  %{v} = load {ty} @{name}[{idx}]").unwrap();
                    if ty == "i8" {
                        let w = self.reg();
                        writeln!(self.out, "  %{w} = zext i8 %{v} to i32").unwrap();
                        pool.push(w);
                    } else {
                        pool.push(v);
                    }
                }
                4..=5 => {
                    let (name, ty, len) = self.arrays.choose(self.rng).unwrap().clone();
                    let idx = self.index(pool, len);
                    let val = match pool.choose(self.rng) {
                        Some(r) if ty == "i8" => {
                            let t = self.reg();
                            writeln!(self.out, "  %{t} = trunc i32 %{r} to i8").unwrap();
                            format!("%{t}")
                        }
                        Some(r) => format!("%{r}"),
                        None => "7".to_string(),
                    };
                    writeln!(self.out, "  store {ty} @{name}[{idx}], {val}").unwrap();
                }
                6 => {
                    let k = self.rng.random_range(0..8);
                    let (v, w) = (self.reg(), self.reg());
                    writeln!(self.out, "  %{v} = load i8 %s[{k}]").unwrap();
                    writeln!(self.out, "  %{w} = zext i8 %{v} to i32").unwrap();
                    pool.push(w);
                }
                7 if depth < 3 && self.branchable(pool).is_some() => {
                    let a = self.branchable(pool).unwrap();
                    let c = self.reg();
                    let k = self.rng.random_range(0..256);
                    writeln!(self.out, "  %{c} = icmp ult i32 %{a}, {k}").unwrap();
                    let (t, e, j) = (self.label(), self.label(), self.label());
                    writeln!(self.out, "  condbr %{c}, {t}, {e}").unwrap();
                    for arm in [&t, &e] {
                        writeln!(self.out, "{arm}:").unwrap();
                        let mut inner = pool.clone();
                        self.seq(arm.clone(), &mut inner, depth + 1, true);
                        writeln!(self.out, "  br {j}").unwrap();
                    }
                    writeln!(self.out, "{j}:").unwrap();
                    cur = j;
                }
                8 if depth < 3 && (!in_arm || self.shape.loops_in_arms) => {
                    let trips = self.rng.random_range(1..=4);
                    let h = self.label();
                    let x = self.label();
                    let (i, i1, c) = (self.reg(), self.reg(), self.reg());
                    writeln!(self.out, "  br {h}").unwrap();
                    writeln!(self.out, "{h}:").unwrap();
                    let marker = self.out.len();
                    let mut inner = pool.clone();
                    inner.push(i.clone());
                    self.public.push(i.clone());
                    let latch = self.seq(h.clone(), &mut inner, depth + 1, in_arm);
                    writeln!(self.out, "  %{i1} = add i32 %{i}, 1").unwrap();
                    writeln!(self.out, "  %{c} = icmp ult i32 %{i1}, {trips}").unwrap();
                    writeln!(self.out, "  condbr %{c}, {h}, {x}").unwrap();
                    self.out.insert_str(marker, &format!("  %{i} = phi i32 [0, {cur}], [%{i1}, {latch}]\n"));
                    writeln!(self.out, "{x}:").unwrap();
                    cur = x;
                }
                _ => {
                    if let (Some(a), Some(b)) = (pool.choose(self.rng).cloned(), pool.choose(self.rng).cloned()) {
                        let d = self.reg();
                        let op = ["add", "xor", "mul", "sub"].choose(self.rng).unwrap();
                        writeln!(self.out, "  %{d} = {op} i32 %{a}, %{b}").unwrap();
                        pool.push(d);
                    }
                }
            }
        }
        cur
    }
}

/// A random, valid, terminating program over a few small global tables and
/// an 8-byte secret `s`. Every array index is masked into range.
pub fn random_program<R: Rng>(rng: &mut R) -> String {
    random_program_with(rng, Shape::default())
}

pub fn random_program_with<R: Rng>(rng: &mut R, shape: Shape) -> String {
    let mut arrays = Vec::new();
    let n_arrays = rng.random_range(1..=4);
    for k in 0..n_arrays {
        let ty = if rng.random_bool(0.5) { "i8" } else { "i32" };
        let len = 1u64 << rng.random_range(0..=6);
        arrays.push((format!("g{k}"), ty, len));
    }
    let mut g = Gen { rng, out: String::new(), regs: 0, blocks: 0, arrays: arrays.clone(), budget: shape.statements, shape, public: vec!["p".into()] };
    let mut head = String::new();
    for (name, ty, len) in &arrays {
        writeln!(head, "global {name}: [{ty}; {len}]").unwrap();
    }
    writeln!(head, "entry fn main(s: ptr<i8,8> secret, p: i32) -> i32 {{").unwrap();
    writeln!(g.out, "L0:").unwrap();
    let mut pool = vec!["p".to_string()];
    g.seq("L0".into(), &mut pool, 0, false);
    writeln!(g.out, "  ret %{}", pool.last().unwrap()).unwrap();
    g.out.push_str("}\n");
    head + &g.out
}
