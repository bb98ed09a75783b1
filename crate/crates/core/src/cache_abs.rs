//! MUST-HIT analysis for a fully associative LRU data cache.
//!
//! The abstract state maps memory blocks to an upper bound on their LRU age.
//! A block missing from the map may be outside the cache.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ir::cfg::Cfg;
use crate::ir::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CacheConfig {
    /// Number of cache lines (N).
    pub lines: usize,
    /// Line size in bytes (CLS).
    pub line_size: u64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig { lines: 512, line_size: 64 }
    }
}

impl CacheConfig {
    pub fn new(lines: usize, line_size: u64) -> Result<Self> {
        let c = CacheConfig { lines, line_size };
        c.check()?;
        Ok(c)
    }

    pub fn check(&self) -> Result<()> {
        if self.lines == 0 {
            return Err(Error::Config("the cache needs at least one line".into()));
        }
        if !self.line_size.is_power_of_two() {
            return Err(Error::Config(format!("line size {} is not a power of two", self.line_size)));
        }
        Ok(())
    }

    /// The bound value standing for "possibly evicted".
    fn bottom(&self) -> u32 {
        self.lines as u32 + 1
    }
}

/// One cache line's worth of a memory object.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct MemBlock {
    /// `@name` for globals, `%name` for entry-function parameters.
    pub object: String,
    pub line: u64,
}

impl MemBlock {
    pub fn new(object: impl Into<String>, line: u64) -> Self {
        MemBlock { object: object.into(), line }
    }
}

impl fmt::Display for MemBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.object, self.line)
    }
}

/// Where an access lands: object, byte offset of element 0, element type and
/// element count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessLayout {
    pub object: String,
    pub base: u64,
    pub elem: Ty,
    pub len: u64,
}

impl AccessLayout {
    pub fn line_of(&self, index: u64, cfg: &CacheConfig) -> u64 {
        (self.base + index * self.elem.bytes()) / cfg.line_size
    }

    pub fn lines(&self, cfg: &CacheConfig) -> std::ops::RangeInclusive<u64> {
        self.line_of(0, cfg)..=self.line_of(self.len - 1, cfg)
    }
}

fn object_name(base: &MemBase) -> String {
    match base {
        MemBase::Global(g) => format!("@{g}"),
        MemBase::Param(p) => format!("%{p}"),
    }
}

/// Resolves the memory touched by `mem` inside `f`.
pub fn access_layout(m: &Module, f: &Function, mem: &MemRef) -> Option<AccessLayout> {
    let object = object_name(&mem.base);
    match &mem.field {
        None => {
            let (elem, len) = m.array_shape(f, mem)?;
            Some(AccessLayout { object, base: 0, elem, len })
        }
        Some(field) => {
            let rec = m.record_layout_of(f, &mem.base)?;
            let k = rec.fields.iter().position(|fd| &fd.name == field)?;
            let base = rec.layout()[k];
            let (elem, len) = match rec.fields[k].ty {
                FieldTy::Scalar(t) => (t, 1),
                FieldTy::Array(t, n) => (t, n),
            };
            Some(AccessLayout { object, base, elem, len })
        }
    }
}

/// The cache footprint of one access.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum AccessEvent {
    Deterministic(MemBlock),
    Nondet(Vec<MemBlock>),
}

impl AccessEvent {
    pub fn candidates(&self) -> Vec<MemBlock> {
        match self {
            AccessEvent::Deterministic(b) => vec![b.clone()],
            AccessEvent::Nondet(c) => c.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AbstractCacheState {
    /// Upper age bounds in `1..=N`. Absent blocks are unbounded.
    pub ages: BTreeMap<MemBlock, u32>,
}

impl AbstractCacheState {
    pub fn age(&self, b: &MemBlock) -> Option<u32> {
        self.ages.get(b).copied()
    }

    pub fn from_pairs<I: IntoIterator<Item = (MemBlock, u32)>>(pairs: I) -> Self {
        AbstractCacheState { ages: pairs.into_iter().collect() }
    }

    fn bound(&self, b: &MemBlock, cfg: &CacheConfig) -> u32 {
        self.age(b).unwrap_or(cfg.bottom())
    }

    /// Ages every block younger than `limit` by one, dropping those that
    /// fall out of the cache.
    fn age_younger_than(&mut self, limit: u32, cfg: &CacheConfig) {
        let n = cfg.lines as u32;
        self.ages.retain(|_, a| {
            if *a < limit {
                *a += 1;
            }
            *a <= n
        });
    }
}

/// The cold-cache state.
pub fn initial_state(_cfg: &CacheConfig) -> AbstractCacheState {
    AbstractCacheState::default()
}

pub fn transfer(s: &AbstractCacheState, e: &AccessEvent, cfg: &CacheConfig) -> AbstractCacheState {
    let mut out = s.clone();
    match e {
        AccessEvent::Deterministic(v) => {
            let av = s.bound(v, cfg);
            out.ages.remove(v);
            out.age_younger_than(av, cfg);
            out.ages.insert(v.clone(), 1);
        }
        AccessEvent::Nondet(cands) => {
            let a_star = cands.iter().map(|c| s.bound(c, cfg)).max().unwrap_or(0);
            out.age_younger_than(a_star, cfg);
        }
    }
    out
}

/// Pointwise maximum; a block unbounded on either side stays unbounded.
pub fn join(a: &AbstractCacheState, b: &AbstractCacheState) -> AbstractCacheState {
    let mut ages = BTreeMap::new();
    for (k, &x) in &a.ages {
        if let Some(&y) = b.ages.get(k) {
            ages.insert(k.clone(), x.max(y));
        }
    }
    AbstractCacheState { ages }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Classification {
    MustHit,
    Unknown,
}

/// Unsigned value range of a register.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interval {
    pub lo: u64,
    pub hi: u64,
}

impl Interval {
    fn full(ty: Ty) -> Self {
        Interval { lo: 0, hi: ty.mask() }
    }

    fn exact(v: u64) -> Self {
        Interval { lo: v, hi: v }
    }

    fn hull(self, o: Interval) -> Self {
        Interval { lo: self.lo.min(o.lo), hi: self.hi.max(o.hi) }
    }

    fn constant(self) -> Option<u64> {
        (self.lo == self.hi).then_some(self.lo)
    }
}

/// Flow-insensitive interval analysis over the SSA registers of `f`.
pub fn value_ranges(f: &Function) -> HashMap<String, Interval> {
    let mut iv: HashMap<String, Interval> = HashMap::new();
    let types = f.reg_types();
    for p in &f.params {
        if let ParamTy::Scalar(t) = p.ty {
            iv.insert(p.name.clone(), Interval::full(t));
        }
    }
    let get = |iv: &HashMap<String, Interval>, o: &Operand, ty: Ty| -> Option<Interval> {
        match o {
            Operand::Imm(v) => Some(Interval::exact(ty.wrap(*v as u64))),
            Operand::Reg(r) => iv.get(r).copied(),
        }
    };
    let eval = |iv: &HashMap<String, Interval>, ins: &Instr| -> Option<Interval> {
        Some(match ins {
            Instr::Const { ty, value, .. } => Interval::exact(ty.wrap(*value as u64)),
            Instr::Icmp { .. } => Interval { lo: 0, hi: 1 },
            Instr::Load { ty, .. } | Instr::LoadField { ty, .. } => Interval::full(*ty),
            Instr::Call { ret: RetTy::Int(t), .. } => Interval::full(*t),
            Instr::Call { .. } | Instr::Store { .. } | Instr::StoreField { .. } => return None,
            Instr::Ctsel { ty, t, e, .. } => get(iv, t, *ty)?.hull(get(iv, e, *ty)?),
            Instr::Phi { ty, incoming, .. } => {
                let mut acc: Option<Interval> = None;
                for (v, _) in incoming {
                    // Values not computed yet are skipped; the fixpoint revisits.
                    if let Some(x) = get(iv, v, *ty) {
                        acc = Some(acc.map_or(x, |a| a.hull(x)));
                    }
                }
                acc?
            }
            Instr::Cast { op, from, value, to, .. } => {
                let x = get(iv, value, *from)?;
                match op {
                    CastOp::Zext => x,
                    CastOp::Sext if x.hi <= from.mask() >> 1 => x,
                    CastOp::Trunc if x.hi <= to.mask() => x,
                    _ => Interval::full(*to),
                }
            }
            Instr::Bin { op, ty, a, b, .. } => {
                let x = get(iv, a, *ty)?;
                let y = get(iv, b, *ty)?;
                let full = Interval::full(*ty);
                let mask = ty.mask();
                match op {
                    BinOp::Add => match (x.hi.checked_add(y.hi), x.lo.checked_add(y.lo)) {
                        (Some(h), Some(l)) if h <= mask => Interval { lo: l, hi: h },
                        _ => full,
                    },
                    BinOp::Sub => match (x.lo.checked_sub(y.hi), x.hi.checked_sub(y.lo)) {
                        (Some(l), Some(h)) => Interval { lo: l, hi: h },
                        _ => full,
                    },
                    BinOp::Mul => match (x.hi.checked_mul(y.hi), x.lo.checked_mul(y.lo)) {
                        (Some(h), Some(l)) if h <= mask => Interval { lo: l, hi: h },
                        _ => full,
                    },
                    BinOp::And => Interval { lo: 0, hi: x.hi.min(y.hi) },
                    BinOp::Or | BinOp::Xor => {
                        let top = x.hi.max(y.hi);
                        let hi = if top == 0 { 0 } else { u64::MAX >> top.leading_zeros() };
                        Interval { lo: 0, hi: hi & mask }
                    }
                    BinOp::Shl => match y.constant() {
                        Some(k) if k < ty.bits() as u64 && (x.hi << k) >> k == x.hi && x.hi << k <= mask => {
                            Interval { lo: x.lo << k, hi: x.hi << k }
                        }
                        _ => full,
                    },
                    BinOp::Lshr => match y.constant() {
                        Some(k) if k < 64 => Interval { lo: x.lo >> k, hi: x.hi >> k },
                        _ => Interval { lo: 0, hi: x.hi },
                    },
                }
            }
        })
    };
    // Bounded iteration; whatever has not settled is widened to its type.
    let rounds = 2 * f.blocks.len() + 8;
    let mut stable = false;
    for _ in 0..rounds {
        let mut changed = false;
        for b in &f.blocks {
            for ins in &b.instrs {
                let Some(d) = ins.dst() else { continue };
                if let Some(x) = eval(&iv, ins) {
                    let merged = match iv.get(d) {
                        Some(old) if ins.is_phi() => old.hull(x),
                        _ => x,
                    };
                    if iv.get(d) != Some(&merged) {
                        iv.insert(d.to_string(), merged);
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            stable = true;
            break;
        }
    }
    if !stable {
        // Widen: anything still moving gets its full type range, then settle
        // the dependents once more.
        let mut widened = iv.clone();
        for b in &f.blocks {
            for ins in b.instrs.iter().filter(|i| i.is_phi()) {
                if let (Some(d), Some(t)) = (ins.dst(), ins.dst_ty()) {
                    widened.insert(d.to_string(), Interval::full(t));
                }
            }
        }
        iv = widened;
        for _ in 0..rounds {
            let mut changed = false;
            for b in &f.blocks {
                for ins in b.instrs.iter().filter(|i| !i.is_phi()) {
                    let Some(d) = ins.dst() else { continue };
                    if let Some(x) = eval(&iv, ins) {
                        if iv.get(d) != Some(&x) {
                            iv.insert(d.to_string(), x);
                            changed = true;
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
    }
    for (r, t) in types {
        iv.entry(r).or_insert(Interval::full(t));
    }
    iv
}

/// Cache footprint of the memory access `ins` given value ranges.
pub fn classify_access(
    m: &Module,
    f: &Function,
    ins: &Instr,
    ranges: &HashMap<String, Interval>,
    cfg: &CacheConfig,
) -> Option<AccessEvent> {
    let mem = ins.mem()?;
    let lay = access_layout(m, f, mem)?;
    let (lo, hi) = match ins {
        Instr::Load { index, .. } | Instr::Store { index, .. } => match index {
            Operand::Imm(v) => (*v as u64, *v as u64),
            Operand::Reg(r) => match ranges.get(r) {
                Some(x) => (x.lo, x.hi),
                None => (0, u64::MAX),
            },
        },
        _ => (0, 0),
    };
    // Out-of-range indices trap, so only in-bounds elements can be touched.
    let last = lay.len - 1;
    if lo > last {
        return Some(AccessEvent::Nondet(lay.lines(cfg).map(|l| MemBlock::new(&lay.object, l)).collect()));
    }
    let (l0, l1) = (lay.line_of(lo, cfg), lay.line_of(hi.min(last), cfg));
    if l0 == l1 {
        Some(AccessEvent::Deterministic(MemBlock::new(&lay.object, l0)))
    } else {
        Some(AccessEvent::Nondet((l0..=l1).map(|l| MemBlock::new(&lay.object, l)).collect()))
    }
}

/// Result of [`analyze`]: per access site, its event, the abstract state just
/// before it, and the resulting classification.
#[derive(Debug, Clone, Default, Serialize)]
pub struct CacheAnalysis {
    pub classes: BTreeMap<Site, Classification>,
    pub events: BTreeMap<Site, AccessEvent>,
    #[serde(skip)]
    pub states: BTreeMap<Site, AbstractCacheState>,
}

impl CacheAnalysis {
    pub fn class(&self, site: &Site) -> Option<Classification> {
        self.classes.get(site).copied()
    }

    pub fn must_hit_count(&self) -> usize {
        self.classes.values().filter(|c| **c == Classification::MustHit).count()
    }
}

/// Forward fixpoint of the MUST-HIT analysis over `f`, starting cold.
pub fn analyze(m: &Module, f: &Function, cfg: &CacheConfig) -> CacheAnalysis {
    let ranges = value_ranges(f);
    let graph = Cfg::new(f);
    let n = graph.len();
    let mut events: Vec<Vec<Option<AccessEvent>>> = Vec::with_capacity(n);
    for b in &f.blocks {
        events.push(b.instrs.iter().map(|i| classify_access(m, f, i, &ranges, cfg)).collect());
    }
    let run_block = |s: &AbstractCacheState, bi: usize| {
        let mut s = s.clone();
        for e in events[bi].iter().flatten() {
            s = transfer(&s, e, cfg);
        }
        s
    };
    let mut out: Vec<Option<AbstractCacheState>> = vec![None; n];
    let mut order = vec![usize::MAX; n];
    for (k, &b) in graph.rpo.iter().enumerate() {
        order[b] = k;
    }
    let in_state = |out: &[Option<AbstractCacheState>], bi: usize| -> Option<AbstractCacheState> {
        if bi == 0 {
            return Some(initial_state(cfg));
        }
        let mut acc: Option<AbstractCacheState> = None;
        for &p in &graph.preds[bi] {
            if let Some(s) = &out[p] {
                acc = Some(match acc {
                    None => s.clone(),
                    Some(a) => join(&a, s),
                });
            }
        }
        acc
    };
    let mut work: std::collections::BTreeSet<(usize, usize)> = std::collections::BTreeSet::new();
    if n > 0 {
        work.insert((0, 0));
    }
    while let Some((_, bi)) = work.pop_first() {
        let Some(s_in) = in_state(&out, bi) else { continue };
        let s_out = run_block(&s_in, bi);
        if out[bi].as_ref() != Some(&s_out) {
            out[bi] = Some(s_out);
            for &s in &graph.succs[bi] {
                work.insert((order[s], s));
            }
        }
    }
    let mut res = CacheAnalysis::default();
    for (bi, b) in f.blocks.iter().enumerate() {
        let Some(mut s) = in_state(&out, bi) else { continue };
        for (ii, e) in events[bi].iter().enumerate() {
            let Some(e) = e else { continue };
            let site = Site::new(&b.label, ii);
            let hit = e.candidates().iter().all(|c| s.age(c).is_some());
            res.classes.insert(site.clone(), if hit { Classification::MustHit } else { Classification::Unknown });
            res.events.insert(site.clone(), e.clone());
            res.states.insert(site, s.clone());
            s = transfer(&s, e, cfg);
        }
    }
    res
}

#[cfg(test)]
mod tests {
    use super::*;

    fn st(pairs: &[(&str, u32)]) -> AbstractCacheState {
        AbstractCacheState::from_pairs(pairs.iter().map(|(n, a)| (MemBlock::new(*n, 0), *a)))
    }

    #[test]
    fn join_is_pointwise_max_with_bottom() {
        let a = st(&[("a", 1), ("b", 2), ("c", 3), ("d", 4)]);
        let b = st(&[("a", 3), ("c", 2), ("d", 4)]);
        assert_eq!(join(&a, &b), st(&[("a", 3), ("c", 3), ("d", 4)]));
    }

    #[test]
    fn cold_state_absorbs_join() {
        let cfg = CacheConfig::default();
        let s = st(&[("a", 1)]);
        assert_eq!(join(&initial_state(&cfg), &s), initial_state(&cfg));
    }

    #[test]
    fn config_checks() {
        assert!(CacheConfig::new(0, 64).is_err());
        assert!(CacheConfig::new(4, 48).is_err());
        assert!(CacheConfig::new(4, 16).is_ok());
    }
}
