//! Repair of cache-timing leaks at secret-indexed table accesses.
//!
//! An access `T[idx]` with a secret `idx` touches a secret-dependent cache
//! line. Each strategy makes the set of touched lines independent of `idx`:
//! reading every element, reading one element per line, preloading every
//! line at function entry, or sweeping the lines only in the first iteration
//! of the enclosing loop so that later iterations provably hit.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::cache_abs::{access_layout, analyze, AccessEvent, AccessLayout, CacheConfig, Classification};
use crate::error::{Error, Result};
use crate::ir::edit::{self, Namer};
use crate::ir::*;
use crate::sensitivity::{LeakReport, SiteKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    ByteAccess,
    LineAccess,
    PreloadAll,
    #[default]
    PreloadFirstIter,
}

impl Strategy {
    pub const ALL: [Strategy; 4] =
        [Strategy::ByteAccess, Strategy::LineAccess, Strategy::PreloadAll, Strategy::PreloadFirstIter];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::ByteAccess => "byte",
            Strategy::LineAccess => "line",
            Strategy::PreloadAll => "preload",
            Strategy::PreloadFirstIter => "first-iter",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}` (expected byte, line, preload or first-iter)")))
    }
}

/// Table accesses, misses and hits for one table in one loop context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OverheadPrediction {
    pub accesses: u64,
    pub misses: u64,
    pub hits: u64,
}

/// Unmitigated behaviour: the miss count depends on the secret.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OriginalRange {
    pub accesses: u64,
    pub min_misses: u64,
    pub max_misses: u64,
}

fn table_lines(k: u64, n: u64, cls: u64) -> Result<u64> {
    if k == 0 || n == 0 || cls == 0 {
        return Err(Error::Config(format!("K, N and CLS must be positive (got K={k}, N={n}, CLS={cls})")));
    }
    Ok(n.div_ceil(cls))
}

/// Cost of `k` accesses to a byte table of `n` bytes with `cls`-byte lines,
/// starting cold.
pub fn predict_overhead(k: u64, n: u64, cls: u64, strategy: Strategy) -> Result<OverheadPrediction> {
    let m = table_lines(k, n, cls)?;
    let (accesses, hits) = match strategy {
        Strategy::ByteAccess => (k * n, k * n - m),
        Strategy::LineAccess => (k * m, k * m - m),
        Strategy::PreloadAll => (k + m, k),
        Strategy::PreloadFirstIter => (k + m - 1, k - 1),
    };
    Ok(OverheadPrediction { accesses, misses: m, hits })
}

pub fn predict_original(k: u64, n: u64, cls: u64) -> Result<OriginalRange> {
    let m = table_lines(k, n, cls)?;
    Ok(OriginalRange { accesses: k, min_misses: 1, max_misses: m.min(k) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessStatus {
    Rewritten,
    Preloaded,
    SkippedMustHit,
    /// Every candidate index lies in one cache line, so the line touched
    /// does not depend on the secret.
    SkippedSingleLine,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlannedAccess {
    pub site: Site,
    pub kind: SiteKind,
    pub table: String,
    pub strategy: Strategy,
    pub status: AccessStatus,
    /// Cache lines spanned by the table.
    pub lines: u64,
    /// Dynamic instances per function call: product of enclosing loop bounds.
    pub contexts: u64,
    pub rewritten_contexts: u64,
    pub skipped_contexts: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PeeledLoop {
    pub header: String,
    pub bound: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct MitigationPlan {
    pub function: String,
    pub strategy: Strategy,
    pub optimize: bool,
    pub accesses: Vec<PlannedAccess>,
    pub peeled: Vec<PeeledLoop>,
    pub preloaded: Vec<String>,
    /// Sweeps and preloads inserted.
    pub rewrites: usize,
}

impl MitigationPlan {
    pub fn rewritten_contexts(&self) -> u64 {
        self.accesses.iter().map(|a| a.rewritten_contexts).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LutOptions {
    pub strategy: Strategy,
    pub optimize: bool,
    pub cache: CacheConfig,
}

impl Default for LutOptions {
    fn default() -> Self {
        LutOptions { strategy: Strategy::default(), optimize: true, cache: CacheConfig::default() }
    }
}

fn index_of(ins: &Instr) -> Option<&Operand> {
    match ins {
        Instr::Load { index, .. } | Instr::Store { index, .. } => Some(index),
        _ => None,
    }
}

fn tag_of(ins: &Instr) -> Option<u32> {
    match ins {
        Instr::Load { tag, .. } | Instr::Store { tag, .. } => *tag,
        _ => None,
    }
}

fn set_tag(ins: &mut Instr, v: Option<u32>) {
    if let Instr::Load { tag, .. } | Instr::Store { tag, .. } = ins {
        *tag = v;
    }
}

fn contexts_of(loops: &[LoopInfo], block: &str) -> u64 {
    loops.iter().filter(|l| l.contains(block)).map(|l| l.bound.unwrap_or(1)).product()
}

fn index_type(f: &Function, idx: &Operand) -> Ty {
    match idx {
        Operand::Imm(_) => Ty::I64,
        Operand::Reg(r) => f.reg_types().get(r).copied().unwrap_or(Ty::I64),
    }
}

/// Widens the access index to i64, appending any cast to `out`.
fn widen_index(f: &Function, namer: &mut Namer, idx: &Operand, out: &mut Vec<Instr>) -> Operand {
    let ty = index_type(f, idx);
    if ty == Ty::I64 {
        return idx.clone();
    }
    let w = namer.reg();
    out.push(Instr::Cast { dst: w.clone(), op: CastOp::Zext, from: ty, value: idx.clone(), to: Ty::I64 });
    Operand::Reg(w)
}

/// First element index of each cache line the table spans.
fn line_starts(lay: &AccessLayout, cfg: &CacheConfig) -> Vec<u64> {
    let elem = lay.elem.bytes();
    lay.lines(cfg)
        .map(|l| {
            let start = l * cfg.line_size;
            if start <= lay.base {
                0
            } else {
                (start - lay.base).div_ceil(elem)
            }
        })
        .collect()
}

fn bin(dst: &str, op: BinOp, ty: Ty, a: Operand, b: Operand) -> Instr {
    Instr::Bin { dst: dst.to_string(), op, ty, a, b }
}

/// Replaces the access at `bi`/`ii` with one read per cache line, starting at
/// the index's offset within its line and selecting the wanted element with
/// `ctsel`. Returns false when the table is not line aligned.
fn line_sweep(m: &Module, f: &mut Function, namer: &mut Namer, bi: usize, ii: usize, cfg: &CacheConfig) -> Result<bool> {
    let ins = f.blocks[bi].instrs[ii].clone();
    let mem = ins.mem().expect("table access").clone();
    let lay = access_layout(m, f, &mem).ok_or_else(|| Error::transform(&f.name, &f.blocks[bi].label, "unknown table"))?;
    let elem = lay.elem.bytes();
    if lay.base % cfg.line_size != 0 || cfg.line_size % elem != 0 {
        return Ok(false);
    }
    let epl = cfg.line_size / elem;
    let lines = lay.len.div_ceil(epl);
    let idx = index_of(&ins).expect("indexed").clone();
    let ty = lay.elem;
    let mut out = Vec::new();
    let wide = widen_index(f, namer, &idx, &mut out);
    let low = if lines == 1 {
        wide.clone()
    } else {
        let r = namer.reg();
        out.push(bin(&r, BinOp::And, Ty::I64, wide.clone(), Operand::Imm(epl as i64 - 1)));
        Operand::Reg(r)
    };
    let mut acc: Option<Operand> = None;
    for k in 0..lines {
        let start = k * epl;
        let mut j = low.clone();
        if k > 0 {
            let r = namer.reg();
            out.push(bin(&r, BinOp::Add, Ty::I64, low.clone(), Operand::Imm(start as i64)));
            j = Operand::Reg(r);
        }
        if lines > 1 && start + epl > lay.len {
            let (c, r) = (namer.reg(), namer.reg());
            out.push(Instr::Icmp { dst: c.clone(), pred: Pred::Ult, ty: Ty::I64, a: j.clone(), b: Operand::Imm(lay.len as i64) });
            out.push(Instr::Ctsel { dst: r.clone(), ty: Ty::I64, cond: Operand::Reg(c), t: j, e: Operand::Imm(start as i64) });
            j = Operand::Reg(r);
        }
        let last = k + 1 == lines;
        match &ins {
            Instr::Load { dst, .. } => {
                let v = if last && lines == 1 { dst.clone() } else { namer.reg() };
                out.push(Instr::Load { dst: v.clone(), ty, mem: mem.clone(), index: j.clone(), tag: None });
                acc = Some(match acc {
                    None => Operand::Reg(v),
                    Some(prev) => {
                        let eq = namer.reg();
                        let sel = if last { dst.clone() } else { namer.reg() };
                        out.push(Instr::Icmp { dst: eq.clone(), pred: Pred::Eq, ty: Ty::I64, a: j, b: wide.clone() });
                        out.push(Instr::Ctsel { dst: sel.clone(), ty, cond: Operand::Reg(eq), t: Operand::Reg(v), e: prev });
                        Operand::Reg(sel)
                    }
                });
            }
            Instr::Store { value, .. } if lines == 1 => {
                out.push(Instr::Store { ty, mem: mem.clone(), index: j, value: value.clone(), tag: None });
            }
            Instr::Store { value, .. } => {
                let (o, eq, n) = (namer.reg(), namer.reg(), namer.reg());
                out.push(Instr::Load { dst: o.clone(), ty, mem: mem.clone(), index: j.clone(), tag: None });
                out.push(Instr::Icmp { dst: eq.clone(), pred: Pred::Eq, ty: Ty::I64, a: j.clone(), b: wide.clone() });
                out.push(Instr::Ctsel { dst: n.clone(), ty, cond: Operand::Reg(eq), t: value.clone(), e: Operand::Reg(o) });
                out.push(Instr::Store { ty, mem: mem.clone(), index: j, value: Operand::Reg(n), tag: None });
            }
            _ => unreachable!("table access"),
        }
    }
    f.blocks[bi].instrs.splice(ii..=ii, out);
    Ok(true)
}

/// Replaces the access at `bi`/`ii` with a loop reading every element.
fn byte_sweep(m: &Module, f: &mut Function, namer: &mut Namer, bi: usize, ii: usize) -> Result<()> {
    let ins = f.blocks[bi].instrs[ii].clone();
    let mem = ins.mem().expect("table access").clone();
    let label = f.blocks[bi].label.clone();
    let lay = access_layout(m, f, &mem).ok_or_else(|| Error::transform(&f.name, &label, "unknown table"))?;
    let ty = lay.elem;
    let idx = index_of(&ins).expect("indexed").clone();
    let mut pre = Vec::new();
    let wide = widen_index(f, namer, &idx, &mut pre);
    let n_pre = pre.len();
    f.blocks[bi].instrs.splice(ii..ii, pre);
    let after = edit::split_block(f, namer, &label, ii + n_pre);
    let sweep = namer.block();
    f.block_mut(&label).expect("split").term = Terminator::Br(sweep.clone());

    let (j, jn, eq, more) = (namer.reg(), namer.reg(), namer.reg(), namer.reg());
    let mut blk = Block::new(&sweep, Terminator::CondBr { cond: Operand::reg(&more), t: sweep.clone(), f: after.clone() });
    blk.bound = Some(lay.len);
    blk.instrs.push(Instr::Phi {
        dst: j.clone(),
        ty: Ty::I64,
        incoming: vec![(Operand::Imm(0), label.clone()), (Operand::reg(&jn), sweep.clone())],
    });
    let eq_instr = Instr::Icmp { dst: eq.clone(), pred: Pred::Eq, ty: Ty::I64, a: Operand::reg(&j), b: wide };
    match &ins {
        Instr::Load { dst, .. } => {
            let (acc, v, next) = (namer.reg(), namer.reg(), namer.reg());
            blk.instrs.push(Instr::Phi {
                dst: acc.clone(),
                ty,
                incoming: vec![(Operand::Imm(0), label.clone()), (Operand::reg(&next), sweep.clone())],
            });
            blk.instrs.push(Instr::Load { dst: v.clone(), ty, mem: mem.clone(), index: Operand::reg(&j), tag: None });
            blk.instrs.push(eq_instr);
            blk.instrs.push(Instr::Ctsel { dst: next.clone(), ty, cond: Operand::reg(&eq), t: Operand::Reg(v), e: Operand::Reg(acc) });
            edit::replace_uses(f, dst, &Operand::Reg(next));
        }
        Instr::Store { value, .. } => {
            let (o, n) = (namer.reg(), namer.reg());
            blk.instrs.push(Instr::Load { dst: o.clone(), ty, mem: mem.clone(), index: Operand::reg(&j), tag: None });
            blk.instrs.push(eq_instr);
            blk.instrs.push(Instr::Ctsel { dst: n.clone(), ty, cond: Operand::reg(&eq), t: value.clone(), e: Operand::Reg(o) });
            blk.instrs.push(Instr::Store { ty, mem: mem.clone(), index: Operand::reg(&j), value: Operand::Reg(n), tag: None });
        }
        _ => unreachable!("table access"),
    }
    blk.instrs.push(bin(&jn, BinOp::Add, Ty::I64, Operand::reg(&j), Operand::Imm(1)));
    blk.instrs.push(Instr::Icmp { dst: more, pred: Pred::Ult, ty: Ty::I64, a: Operand::reg(&jn), b: Operand::Imm(lay.len as i64) });
    // The original instruction heads the split-off block.
    let ai = f.block_index(&after).expect("split");
    f.blocks[ai].instrs.remove(0);
    f.blocks.insert(ai, blk);
    Ok(())
}

/// Touches every line of `mem` at the top of the entry block.
fn preload(m: &Module, f: &mut Function, namer: &mut Namer, mem: &MemRef, cfg: &CacheConfig) -> Result<()> {
    let lay = access_layout(m, f, mem).ok_or_else(|| Error::transform(&f.name, &f.blocks[0].label, "unknown table"))?;
    let loads: Vec<Instr> = line_starts(&lay, cfg)
        .into_iter()
        .map(|i| Instr::Load { dst: namer.reg(), ty: lay.elem, mem: mem.clone(), index: Operand::Imm(i as i64), tag: None })
        .collect();
    let at = f.blocks[0].phi_count();
    f.blocks[0].instrs.splice(at..at, loads);
    Ok(())
}

struct Origin {
    site: Site,
    kind: SiteKind,
    table: MemRef,
    lines: u64,
    contexts: u64,
    rewritten: u64,
    strategy: Strategy,
    fallback: Option<String>,
}

enum Step {
    Sweep { bi: usize, ii: usize, origin: usize, contexts: u64 },
    Peel(LoopInfo),
    Preload { origin: usize, why: Option<String> },
    Done,
}

/// Finds the next instance to act on. Instances still carrying an origin tag
/// have not been rewritten.
fn next_step(
    m: &Module,
    f: &Function,
    opts: &LutOptions,
    peeled: &HashSet<String>,
    preloaded: &BTreeSet<String>,
) -> Step {
    let loops = find_loops(f);
    let analysis = if opts.optimize { Some(analyze(m, f, &opts.cache)) } else { None };
    for (bi, b) in f.blocks.iter().enumerate() {
        for (ii, ins) in b.instrs.iter().enumerate() {
            let Some(origin) = tag_of(ins) else { continue };
            let origin = origin as usize;
            if preloaded.contains(&ins.mem().expect("table access").to_string()) {
                continue;
            }
            if let Some(a) = &analysis {
                let site = Site::new(&b.label, ii);
                let multi_line = matches!(a.events.get(&site), Some(AccessEvent::Nondet(_)));
                if !multi_line || a.class(&site) == Some(Classification::MustHit) {
                    continue;
                }
            }
            let contexts = contexts_of(&loops, &b.label);
            return match opts.strategy {
                Strategy::PreloadAll => Step::Preload { origin, why: None },
                Strategy::PreloadFirstIter if opts.optimize => {
                    let enclosing: Vec<&LoopInfo> = loops.iter().filter(|l| l.contains(&b.label)).collect();
                    if let Some(l) = enclosing.iter().find(|l| l.bound.is_none()) {
                        let why = format!("loop `{}` has no static bound; preloading at entry instead", l.header);
                        return Step::Preload { origin, why: Some(why) };
                    }
                    match enclosing.iter().find(|l| l.bound.unwrap_or(0) >= 2 && !peeled.contains(&l.header)) {
                        Some(l) => Step::Peel((*l).clone()),
                        None => Step::Sweep { bi, ii, origin, contexts },
                    }
                }
                _ => Step::Sweep { bi, ii, origin, contexts },
            };
        }
    }
    Step::Done
}

/// Mitigates every sensitive table access of `leaks` in the entry function.
/// With `optimize`, accesses the cache analysis proves to hit, or whose
/// candidate indices all share one line, are left alone, and the default
/// strategy peels the first iteration of the enclosing loop so that only
/// that iteration needs a sweep.
pub fn lut_repair_pass(m: &Module, leaks: &LeakReport, opts: &LutOptions) -> Result<(Module, MitigationPlan)> {
    opts.cache.check()?;
    let entry = m.entry_function().ok_or_else(|| Error::Config("module has no entry function".into()))?;
    let mut f = entry.clone();
    let loops = find_loops(&f);
    let mut origins: Vec<Origin> = Vec::new();
    for leak in leaks.lut_accesses.iter().filter(|l| l.function == f.name) {
        let site = leak.site();
        let bi = f.block_index(&site.block).ok_or_else(|| Error::Input(format!("leak site {site} not found")))?;
        let ins = f.blocks[bi].instrs.get_mut(site.index).filter(|i| index_of(i).is_some());
        let Some(ins) = ins else { return Err(Error::Input(format!("leak site {site} is not a table access"))) };
        set_tag(ins, Some(origins.len() as u32));
        let table = ins.mem().expect("table access").clone();
        let lines = access_layout(m, entry, &table).map(|l| l.lines(&opts.cache).count() as u64).unwrap_or(1);
        origins.push(Origin {
            contexts: contexts_of(&loops, &site.block),
            site,
            kind: leak.kind,
            table,
            lines,
            rewritten: 0,
            strategy: opts.strategy,
            fallback: None,
        });
    }

    let mut namer = Namer::new(&f);
    let mut peeled_headers: HashSet<String> = HashSet::new();
    let mut plan = MitigationPlan { function: f.name.clone(), strategy: opts.strategy, optimize: opts.optimize, ..Default::default() };
    let mut preloaded: BTreeSet<String> = BTreeSet::new();
    let limit = 64 * (f.instr_count() + origins.len() + 16);
    for _ in 0..limit {
        match next_step(m, &f, opts, &peeled_headers, &preloaded) {
            Step::Done => break,
            Step::Sweep { bi, ii, origin, contexts } => {
                let o = &mut origins[origin];
                let done = match opts.strategy {
                    Strategy::ByteAccess => false,
                    _ => line_sweep(m, &mut f, &mut namer, bi, ii, &opts.cache)?,
                };
                if !done {
                    if opts.strategy != Strategy::ByteAccess {
                        o.strategy = Strategy::ByteAccess;
                        o.fallback = Some("table is not line aligned; reading every element instead".into());
                    }
                    byte_sweep(m, &mut f, &mut namer, bi, ii)?;
                }
                o.rewritten += contexts;
                plan.rewrites += 1;
            }
            Step::Peel(l) => {
                f = peel_first_iteration(&f, &l)?;
                namer = Namer::new(&f);
                peeled_headers.insert(l.header.clone());
                plan.peeled.push(PeeledLoop { header: l.header, bound: l.bound.unwrap_or(0) });
            }
            Step::Preload { origin, why } => {
                let o = &mut origins[origin];
                if why.is_some() {
                    o.strategy = Strategy::PreloadAll;
                    o.fallback = why;
                }
                let table = o.table.clone();
                preload(m, &mut f, &mut namer, &table, &opts.cache)?;
                preloaded.insert(table.to_string());
                plan.preloaded.push(table.to_string());
                plan.rewrites += 1;
            }
        }
    }
    if !matches!(next_step(m, &f, opts, &peeled_headers, &preloaded), Step::Done) {
        return Err(Error::transform(&f.name, &f.blocks[0].label, "table repair did not converge"));
    }

    // Instances still tagged were left alone; note why.
    let analysis = analyze(m, &f, &opts.cache);
    let mut single_line = vec![false; origins.len()];
    for b in f.blocks.iter_mut() {
        for (ii, ins) in b.instrs.iter_mut().enumerate() {
            if let Some(t) = tag_of(ins) {
                let ev = analysis.events.get(&Site::new(&b.label, ii));
                single_line[t as usize] |= matches!(ev, Some(AccessEvent::Deterministic(_)));
            }
            set_tag(ins, None);
        }
    }

    for (k, o) in origins.into_iter().enumerate() {
        let table = o.table.to_string();
        let status = if o.rewritten > 0 {
            AccessStatus::Rewritten
        } else if preloaded.contains(&table) {
            AccessStatus::Preloaded
        } else if single_line[k] {
            AccessStatus::SkippedSingleLine
        } else {
            AccessStatus::SkippedMustHit
        };
        plan.accesses.push(PlannedAccess {
            site: o.site,
            kind: o.kind,
            table,
            strategy: o.strategy,
            status,
            lines: o.lines,
            contexts: o.contexts,
            rewritten_contexts: o.rewritten.min(o.contexts),
            skipped_contexts: o.contexts.saturating_sub(o.rewritten),
            fallback: o.fallback,
        });
    }
    let mut out = m.clone();
    *out.entry_function_mut().expect("entry") = f;
    Ok((out, plan))
}
