//! Cycle-counting interpreter with a concrete LRU data cache.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache_abs::{access_layout, CacheConfig, MemBlock};
use crate::error::{Error, Result};
use crate::ir::*;

/// Cycle cost of each instruction class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CostModel {
    /// const, binops, icmp and casts.
    pub alu: u64,
    pub branch: u64,
    /// Charged per phi when entering a block.
    pub phi: u64,
    pub ctsel: u64,
    pub ret: u64,
    pub call: u64,
    pub hit: u64,
    pub miss: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel { alu: 1, branch: 1, phi: 1, ctsel: 3, ret: 0, call: 0, hit: 1, miss: 100 }
    }
}

impl CostModel {
    pub fn with_memory(hit: u64, miss: u64) -> Result<Self> {
        let c = CostModel { hit, miss, ..Default::default() };
        c.check()?;
        Ok(c)
    }

    pub fn check(&self) -> Result<()> {
        if self.miss <= self.hit {
            return Err(Error::Config(format!("miss cost {} must exceed hit cost {}", self.miss, self.hit)));
        }
        Ok(())
    }
}

/// Most-recent-first list of at most N resident blocks.
#[derive(Debug, Clone)]
pub struct ConcreteCache {
    cfg: CacheConfig,
    lines: Vec<MemBlock>,
}

impl ConcreteCache {
    pub fn new(cfg: CacheConfig) -> Self {
        ConcreteCache { cfg, lines: Vec::with_capacity(cfg.lines) }
    }

    /// Touches `b`; returns true on a hit.
    pub fn access(&mut self, b: MemBlock) -> bool {
        match self.lines.iter().position(|x| *x == b) {
            Some(pos) => {
                self.lines[..=pos].rotate_right(1);
                true
            }
            None => {
                if self.lines.len() == self.cfg.lines {
                    self.lines.pop();
                }
                self.lines.insert(0, b);
                false
            }
        }
    }

    /// LRU age (1 = most recent) of `b`, or `None` when not cached.
    pub fn age(&self, b: &MemBlock) -> Option<u32> {
        self.lines.iter().position(|x| x == b).map(|p| p as u32 + 1)
    }

    pub fn contents(&self) -> &[MemBlock] {
        &self.lines
    }
}

/// A concrete input value for one parameter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Scalar(i64),
    Array(Vec<i64>),
    Record(BTreeMap<String, Value>),
}

/// Parameter name to value. Missing parameters start as zero.
pub type Inputs = BTreeMap<String, Value>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SiteTally {
    pub hits: u64,
    pub misses: u64,
    /// Outcome of the first visit (true = hit).
    pub first_hit: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TimingTrace {
    pub cycles: u64,
    pub cpu_cycles: u64,
    pub hits: u64,
    pub misses: u64,
    pub sites: BTreeMap<Site, SiteTally>,
    /// Hits and misses per memory object.
    pub objects: BTreeMap<String, (u64, u64)>,
    /// Indices of the executed blocks, in order.
    pub blocks: Vec<usize>,
    pub ret: Option<u64>,
    /// Final contents of every memory object, keyed like `@sbox` or `@ctx.f`.
    pub memory: BTreeMap<String, Vec<u64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimOptions {
    pub cost: CostModel,
    pub cache: CacheConfig,
    pub max_steps: u64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { cost: CostModel::default(), cache: CacheConfig::default(), max_steps: 50_000_000 }
    }
}

#[derive(Clone, Copy)]
enum Src {
    Reg(u32),
    Imm(u64),
}

#[derive(Clone)]
struct Slot {
    storage: usize,
    object: u32,
    base: u64,
    elem: Ty,
    len: u64,
}

#[derive(Clone)]
enum Op {
    Const { dst: u32, v: u64 },
    Bin { dst: u32, op: BinOp, ty: Ty, a: Src, b: Src },
    Icmp { dst: u32, pred: Pred, ty: Ty, a: Src, b: Src },
    Cast { dst: u32, op: CastOp, from: Ty, to: Ty, v: Src },
    Load { dst: u32, slot: u32, index: Src, site: u32 },
    Store { slot: u32, index: Src, value: Src, site: u32 },
    Ctsel { dst: u32, ty: Ty, c: Src, t: Src, e: Src },
}

#[derive(Clone)]
enum Term {
    Br(usize),
    CondBr(Src, usize, usize),
    Ret(Option<Src>),
}

#[derive(Clone)]
struct CBlock {
    phis: Vec<(u32, Ty, Vec<(usize, Src)>)>,
    ops: Vec<Op>,
    term: Term,
}

/// A function lowered to slot-indexed form for fast repeated execution.
#[derive(Clone)]
pub struct Compiled {
    blocks: Vec<CBlock>,
    nregs: usize,
    params: Vec<(Param, Option<u32>)>,
    slots: Vec<Slot>,
    /// Storage cells: name, element type, length, initial contents.
    storage: Vec<(String, Ty, Vec<u64>)>,
    objects: Vec<String>,
    sites: Vec<Site>,
    /// For each entry parameter of pointer or record kind, the storage
    /// indices backing it (one per field for records).
    param_storage: HashMap<String, Vec<(Option<String>, usize)>>,
}

fn compile_err(f: &Function, block: &str, msg: impl Into<String>) -> Error {
    Error::transform(&f.name, block, msg)
}

impl Compiled {
    pub fn new(m: &Module) -> Result<Compiled> {
        let f = m.entry_function().ok_or_else(|| Error::Config("module has no entry function".into()))?;
        Compiled::for_function(m, f)
    }

    pub fn for_function(m: &Module, f: &Function) -> Result<Compiled> {
        let mut regs: HashMap<String, u32> = HashMap::new();
        let intern = |r: &str, regs: &mut HashMap<String, u32>| -> u32 {
            let n = regs.len() as u32;
            *regs.entry(r.to_string()).or_insert(n)
        };
        let mut params = Vec::new();
        for p in &f.params {
            let slot = match p.ty {
                ParamTy::Scalar(_) => Some(intern(&p.name, &mut regs)),
                _ => None,
            };
            params.push((p.clone(), slot));
        }
        for b in &f.blocks {
            for i in &b.instrs {
                if let Some(d) = i.dst() {
                    intern(d, &mut regs);
                }
            }
        }
        // Storage: one cell per global array, per record field, per pointer param.
        let mut storage: Vec<(String, Ty, Vec<u64>)> = Vec::new();
        let mut storage_idx: HashMap<String, usize> = HashMap::new();
        for a in &m.arrays {
            let init = match &a.init {
                Some(v) => v.iter().map(|x| a.elem.wrap(*x as u64)).collect(),
                None => vec![0; a.len as usize],
            };
            storage_idx.insert(format!("@{}", a.name), storage.len());
            storage.push((format!("@{}", a.name), a.elem, init));
        }
        let add_record = |obj: &str, rec: &GlobalRecord, storage: &mut Vec<(String, Ty, Vec<u64>)>, idx: &mut HashMap<String, usize>| {
            let mut v = Vec::new();
            for fd in &rec.fields {
                let key = format!("{obj}.{}", fd.name);
                let len = match fd.ty {
                    FieldTy::Scalar(_) => 1,
                    FieldTy::Array(_, n) => n as usize,
                };
                idx.insert(key.clone(), storage.len());
                v.push((Some(fd.name.clone()), storage.len()));
                storage.push((key, fd.ty.elem(), vec![0; len]));
            }
            v
        };
        for r in &m.records {
            add_record(&format!("@{}", r.name), r, &mut storage, &mut storage_idx);
        }
        let mut param_storage = HashMap::new();
        for p in &f.params {
            match &p.ty {
                ParamTy::Ptr(t, n) => {
                    let key = format!("%{}", p.name);
                    storage_idx.insert(key.clone(), storage.len());
                    param_storage.insert(p.name.clone(), vec![(None, storage.len())]);
                    storage.push((key, *t, vec![0; *n as usize]));
                }
                ParamTy::Rec(r) => {
                    let rec = m.record(r).ok_or_else(|| compile_err(f, "", format!("unknown record `{r}`")))?;
                    let v = add_record(&format!("%{}", p.name), rec, &mut storage, &mut storage_idx);
                    param_storage.insert(p.name.clone(), v);
                }
                ParamTy::Scalar(_) => {}
            }
        }

        let labels: HashMap<&str, usize> = f.blocks.iter().enumerate().map(|(i, b)| (b.label.as_str(), i)).collect();
        let target = |l: &str, from: &str| labels.get(l).copied().ok_or_else(|| compile_err(f, from, format!("unknown block `{l}`")));
        let mut objects: Vec<String> = Vec::new();
        let mut object_idx: HashMap<String, u32> = HashMap::new();
        let mut slots: Vec<Slot> = Vec::new();
        let mut slot_idx: HashMap<MemRef, u32> = HashMap::new();
        let mut sites = Vec::new();
        let mut blocks = Vec::new();
        for b in &f.blocks {
            let src = |o: &Operand| -> Result<Src> {
                Ok(match o {
                    Operand::Imm(v) => Src::Imm(*v as u64),
                    Operand::Reg(r) => Src::Reg(*regs.get(r).ok_or_else(|| compile_err(f, &b.label, format!("undefined `%{r}`")))?),
                })
            };
            let mut phis = Vec::new();
            let mut ops = Vec::new();
            for (ii, ins) in b.instrs.iter().enumerate() {
                let dst = ins.dst().map(|d| regs[d]);
                let mut slot_of = |mem: &MemRef| -> Result<u32> {
                    if let Some(&s) = slot_idx.get(mem) {
                        return Ok(s);
                    }
                    let lay = access_layout(m, f, mem).ok_or_else(|| compile_err(f, &b.label, format!("unresolved memory `{mem}`")))?;
                    let key = mem.to_string();
                    let storage = *storage_idx.get(&key).ok_or_else(|| compile_err(f, &b.label, format!("no storage for `{mem}`")))?;
                    let n = objects.len() as u32;
                    let object = *object_idx.entry(lay.object.clone()).or_insert_with(|| {
                        objects.push(lay.object.clone());
                        n
                    });
                    let s = slots.len() as u32;
                    slots.push(Slot { storage, object, base: lay.base, elem: lay.elem, len: lay.len });
                    slot_idx.insert(mem.clone(), s);
                    Ok(s)
                };
                let op = match ins {
                    Instr::Phi { ty, incoming, .. } => {
                        let mut inc = Vec::new();
                        for (v, p) in incoming {
                            inc.push((target(p, &b.label)?, src(v)?));
                        }
                        phis.push((dst.unwrap(), *ty, inc));
                        continue;
                    }
                    Instr::Const { ty, value, .. } => Op::Const { dst: dst.unwrap(), v: ty.wrap(*value as u64) },
                    Instr::Bin { op, ty, a, b: bb, .. } => Op::Bin { dst: dst.unwrap(), op: *op, ty: *ty, a: src(a)?, b: src(bb)? },
                    Instr::Icmp { pred, ty, a, b: bb, .. } => Op::Icmp { dst: dst.unwrap(), pred: *pred, ty: *ty, a: src(a)?, b: src(bb)? },
                    Instr::Cast { op, from, value, to, .. } => Op::Cast { dst: dst.unwrap(), op: *op, from: *from, to: *to, v: src(value)? },
                    Instr::Ctsel { ty, cond, t, e, .. } => Op::Ctsel { dst: dst.unwrap(), ty: *ty, c: src(cond)?, t: src(t)?, e: src(e)? },
                    Instr::Load { mem, index, .. } => {
                        sites.push(Site::new(&b.label, ii));
                        Op::Load { dst: dst.unwrap(), slot: slot_of(mem)?, index: src(index)?, site: sites.len() as u32 - 1 }
                    }
                    Instr::LoadField { mem, .. } => {
                        sites.push(Site::new(&b.label, ii));
                        Op::Load { dst: dst.unwrap(), slot: slot_of(mem)?, index: Src::Imm(0), site: sites.len() as u32 - 1 }
                    }
                    Instr::Store { mem, index, value, .. } => {
                        sites.push(Site::new(&b.label, ii));
                        Op::Store { slot: slot_of(mem)?, index: src(index)?, value: src(value)?, site: sites.len() as u32 - 1 }
                    }
                    Instr::StoreField { mem, value, .. } => {
                        sites.push(Site::new(&b.label, ii));
                        Op::Store { slot: slot_of(mem)?, index: Src::Imm(0), value: src(value)?, site: sites.len() as u32 - 1 }
                    }
                    Instr::Call { .. } => return Err(compile_err(f, &b.label, "calls must be inlined before simulation")),
                };
                ops.push(op);
            }
            let term = match &b.term {
                Terminator::Br(t) => Term::Br(target(t, &b.label)?),
                Terminator::CondBr { cond, t, f: e } => Term::CondBr(src(cond)?, target(t, &b.label)?, target(e, &b.label)?),
                Terminator::Ret(v) => Term::Ret(v.as_ref().map(&src).transpose()?),
            };
            blocks.push(CBlock { phis, ops, term });
        }
        Ok(Compiled { blocks, nregs: regs.len(), params, slots, storage, objects, sites, param_storage })
    }

    /// Every memory access site, in block and instruction order.
    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    fn bind_inputs(&self, inputs: &Inputs, regs: &mut [u64], mem: &mut [Vec<u64>]) -> Result<()> {
        for name in inputs.keys() {
            if !self.params.iter().any(|(p, _)| &p.name == name) {
                return Err(Error::Input(format!("no parameter named `{name}`")));
            }
        }
        for (p, slot) in &self.params {
            let Some(v) = inputs.get(&p.name) else { continue };
            match (&p.ty, v) {
                (ParamTy::Scalar(t), Value::Scalar(x)) => regs[slot.unwrap() as usize] = t.wrap(*x as u64),
                (ParamTy::Ptr(t, n), Value::Array(xs)) => {
                    if xs.len() as u64 != *n {
                        return Err(Error::Input(format!("`{}` needs {n} elements, got {}", p.name, xs.len())));
                    }
                    let cell = self.param_storage[&p.name][0].1;
                    mem[cell] = xs.iter().map(|x| t.wrap(*x as u64)).collect();
                }
                (ParamTy::Rec(_), Value::Record(fields)) => {
                    for (fname, fv) in fields {
                        let Some((_, cell)) = self.param_storage[&p.name].iter().find(|(n, _)| n.as_deref() == Some(fname)) else {
                            return Err(Error::Input(format!("record `{}` has no field `{fname}`", p.name)));
                        };
                        let (_, t, ref cur) = self.storage[*cell];
                        let vals: Vec<i64> = match fv {
                            Value::Scalar(x) => vec![*x],
                            Value::Array(xs) => xs.clone(),
                            Value::Record(_) => return Err(Error::Input(format!("field `{fname}` cannot be a record"))),
                        };
                        if vals.len() != cur.len() {
                            return Err(Error::Input(format!("field `{}.{fname}` needs {} elements", p.name, cur.len())));
                        }
                        mem[*cell] = vals.iter().map(|x| t.wrap(*x as u64)).collect();
                    }
                }
                _ => return Err(Error::Input(format!("value for `{}` has the wrong shape", p.name))),
            }
        }
        Ok(())
    }

    /// Runs the function once from a cold cache.
    pub fn run(&self, inputs: &Inputs, opts: &SimOptions) -> Result<TimingTrace> {
        self.run_observed(inputs, opts, &mut |_, _| {})
    }

    /// Like [`Compiled::run`], calling `observe` with each access site and
    /// the cache state just before the access.
    pub fn run_observed(
        &self,
        inputs: &Inputs,
        opts: &SimOptions,
        observe: &mut dyn FnMut(&Site, &ConcreteCache),
    ) -> Result<TimingTrace> {
        let cost = &opts.cost;
        let cfg = opts.cache;
        let mut regs = vec![0u64; self.nregs];
        let mut mem: Vec<Vec<u64>> = self.storage.iter().map(|(_, _, v)| v.clone()).collect();
        self.bind_inputs(inputs, &mut regs, &mut mem)?;
        let mut cache = ConcreteCache::new(cfg);
        let mut site_tally = vec![SiteTally::default(); self.sites.len()];
        let mut obj_tally = vec![(0u64, 0u64); self.objects.len()];
        let mut tr = TimingTrace::default();
        let mut cpu = 0u64;
        let mut steps = 0u64;
        let (mut bi, mut prev) = (0usize, usize::MAX);
        let val = |regs: &[u64], s: Src, ty: Ty| match s {
            Src::Reg(r) => regs[r as usize],
            Src::Imm(v) => ty.wrap(v),
        };
        let mut touch = |slot: &Slot, idx: u64, site: u32, cache: &mut ConcreteCache, tr: &mut TimingTrace| -> Result<()> {
            if idx >= slot.len {
                return Err(Error::Trap {
                    site: self.sites[site as usize].to_string(),
                    message: format!("index {idx} out of bounds for {} elements", slot.len),
                });
            }
            let block = MemBlock::new(&self.objects[slot.object as usize], (slot.base + idx * slot.elem.bytes()) / cfg.line_size);
            observe(&self.sites[site as usize], cache);
            let hit = cache.access(block);
            let t = &mut site_tally[site as usize];
            let o = &mut obj_tally[slot.object as usize];
            if hit {
                tr.hits += 1;
                t.hits += 1;
                o.0 += 1;
            } else {
                tr.misses += 1;
                t.misses += 1;
                o.1 += 1;
            }
            t.first_hit.get_or_insert(hit);
            Ok(())
        };
        loop {
            tr.blocks.push(bi);
            let b = &self.blocks[bi];
            if !b.phis.is_empty() {
                let vals: Vec<u64> = b
                    .phis
                    .iter()
                    .map(|(_, ty, inc)| {
                        inc.iter().find(|(p, _)| *p == prev).map(|(_, s)| val(&regs, *s, *ty)).unwrap_or(0)
                    })
                    .collect();
                for ((dst, _, _), v) in b.phis.iter().zip(vals) {
                    regs[*dst as usize] = v;
                }
                cpu += cost.phi * b.phis.len() as u64;
            }
            steps += b.ops.len() as u64 + 1;
            if steps > opts.max_steps {
                return Err(Error::StepLimit(opts.max_steps));
            }
            for op in &b.ops {
                match *op {
                    Op::Const { dst, v } => {
                        regs[dst as usize] = v;
                        cpu += cost.alu;
                    }
                    Op::Bin { dst, op, ty, a, b } => {
                        regs[dst as usize] = op.eval(ty, val(&regs, a, ty), val(&regs, b, ty));
                        cpu += cost.alu;
                    }
                    Op::Icmp { dst, pred, ty, a, b } => {
                        regs[dst as usize] = pred.eval(ty, val(&regs, a, ty), val(&regs, b, ty)) as u64;
                        cpu += cost.alu;
                    }
                    Op::Cast { dst, op, from, to, v } => {
                        regs[dst as usize] = op.eval(from, to, val(&regs, v, from));
                        cpu += cost.alu;
                    }
                    Op::Ctsel { dst, ty, c, t, e } => {
                        let c = val(&regs, c, Ty::I1) & 1;
                        regs[dst as usize] = if c != 0 { val(&regs, t, ty) } else { val(&regs, e, ty) };
                        cpu += cost.ctsel;
                    }
                    Op::Load { dst, slot, index, site } => {
                        let s = &self.slots[slot as usize];
                        let idx = val(&regs, index, Ty::I64);
                        touch(s, idx, site, &mut cache, &mut tr)?;
                        regs[dst as usize] = mem[s.storage][idx as usize];
                    }
                    Op::Store { slot, index, value, site } => {
                        let s = &self.slots[slot as usize];
                        let idx = val(&regs, index, Ty::I64);
                        touch(s, idx, site, &mut cache, &mut tr)?;
                        mem[s.storage][idx as usize] = val(&regs, value, s.elem) & s.elem.mask();
                    }
                }
            }
            prev = bi;
            match b.term {
                Term::Br(t) => {
                    cpu += cost.branch;
                    bi = t;
                }
                Term::CondBr(c, t, e) => {
                    cpu += cost.branch;
                    bi = if val(&regs, c, Ty::I1) & 1 != 0 { t } else { e };
                }
                Term::Ret(v) => {
                    cpu += cost.ret;
                    tr.ret = v.map(|s| match s {
                        Src::Reg(r) => regs[r as usize],
                        Src::Imm(x) => x,
                    });
                    break;
                }
            }
        }
        tr.cpu_cycles = cpu;
        tr.cycles = cpu + tr.hits * cost.hit + tr.misses * cost.miss;
        tr.sites = self.sites.iter().cloned().zip(site_tally).collect();
        tr.objects = self.objects.iter().cloned().zip(obj_tally).collect();
        tr.memory = self.storage.iter().zip(mem).map(|((name, _, _), v)| (name.clone(), v)).collect();
        Ok(tr)
    }
}

/// Simulates the entry function of `m` on `inputs`.
pub fn run(m: &Module, inputs: &Inputs, opts: &SimOptions) -> Result<TimingTrace> {
    Compiled::new(m)?.run(inputs, opts)
}

/// How secret inputs are drawn for [`check_constant_time`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Sampler {
    /// Every assignment of the secret bits; at most 2^16 of them.
    Exhaustive,
    /// All-zero and all-ones secrets, then seeded random ones.
    Random { seed: u64, trials: usize },
}

fn param_bits(m: &Module, p: &Param) -> u64 {
    match &p.ty {
        ParamTy::Scalar(t) => t.bits() as u64,
        ParamTy::Ptr(t, n) => t.bits() as u64 * n,
        ParamTy::Rec(r) => m
            .record(r)
            .map(|rec| rec.fields.iter().map(|f| f.ty.elem().bits() as u64 * f.ty.byte_size() / f.ty.elem().bytes()).sum())
            .unwrap_or(0),
    }
}

/// Total number of secret input bits of the entry function.
pub fn secret_bits(m: &Module) -> u64 {
    m.entry_function().map(|f| f.params.iter().filter(|p| p.secret).map(|p| param_bits(m, p)).sum()).unwrap_or(0)
}

/// Builds a value for `p` by drawing each scalar element from `draw`.
fn make_value(m: &Module, p: &Param, draw: &mut dyn FnMut(Ty) -> i64) -> Value {
    match &p.ty {
        ParamTy::Scalar(t) => Value::Scalar(draw(*t)),
        ParamTy::Ptr(t, n) => Value::Array((0..*n).map(|_| draw(*t)).collect()),
        ParamTy::Rec(r) => {
            let mut fields = BTreeMap::new();
            if let Some(rec) = m.record(r) {
                for fd in &rec.fields {
                    let v = match fd.ty {
                        FieldTy::Scalar(t) => Value::Scalar(draw(t)),
                        FieldTy::Array(t, n) => Value::Array((0..n).map(|_| draw(t)).collect()),
                    };
                    fields.insert(fd.name.clone(), v);
                }
            }
            Value::Record(fields)
        }
    }
}

/// Random values for the selected parameters of the entry function.
pub fn random_inputs<R: Rng>(m: &Module, rng: &mut R, secret: bool) -> Inputs {
    let mut out = Inputs::new();
    if let Some(f) = m.entry_function() {
        for p in f.params.iter().filter(|p| p.secret == secret) {
            out.insert(p.name.clone(), make_value(m, p, &mut |t| rng.random::<u64>() as i64 & t.mask() as i64));
        }
    }
    out
}

/// The secret assignments a sampler produces.
pub fn secret_samples(m: &Module, sampler: Sampler) -> Result<Vec<Inputs>> {
    let f = m.entry_function().ok_or_else(|| Error::Config("module has no entry function".into()))?;
    let secrets: Vec<&Param> = f.params.iter().filter(|p| p.secret).collect();
    match sampler {
        Sampler::Exhaustive => {
            let bits = secret_bits(m);
            if bits > 16 {
                return Err(Error::Config(format!("exhaustive sampling needs at most 16 secret bits, found {bits}")));
            }
            Ok((0..1u64 << bits)
                .map(|word| {
                    let mut shift = 0;
                    let mut draw = |t: Ty| {
                        let v = (word >> shift) & t.mask();
                        shift += t.bits();
                        v as i64
                    };
                    secrets.iter().map(|p| (p.name.clone(), make_value(m, p, &mut draw))).collect()
                })
                .collect())
        }
        Sampler::Random { seed, trials } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = Vec::with_capacity(trials);
            for k in 0..trials {
                let inputs = match k {
                    0 => secrets.iter().map(|p| (p.name.clone(), make_value(m, p, &mut |_| 0))).collect(),
                    1 => secrets.iter().map(|p| (p.name.clone(), make_value(m, p, &mut |t| t.mask() as i64))).collect(),
                    _ => random_inputs(m, &mut rng, true),
                };
                out.push(inputs);
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LeakVerdict {
    pub constant_time: bool,
    pub max_cycle_delta: u64,
    pub min_cycles: u64,
    pub max_cycles: u64,
    /// Secrets giving the fewest and the most cycles, when they differ.
    pub witness: Option<(Inputs, Inputs)>,
    pub trials: usize,
    pub same_block_trace: bool,
    pub same_site_misses: bool,
}

/// Simulates `m` with fixed public inputs over sampled secrets and compares
/// total cycle counts.
pub fn check_constant_time(m: &Module, public: &Inputs, sampler: Sampler, opts: &SimOptions) -> Result<LeakVerdict> {
    let compiled = Compiled::new(m)?;
    let samples = secret_samples(m, sampler)?;
    if samples.is_empty() {
        return Err(Error::Config("no trials requested".into()));
    }
    let results: Vec<(u64, u64, u64)> = samples
        .par_iter()
        .map(|secret| {
            let mut inputs = public.clone();
            inputs.extend(secret.clone());
            let t = compiled.run(&inputs, opts)?;
            Ok((t.cycles, hash_of(&t.blocks), hash_of(&t.sites.values().map(|s| s.misses).collect::<Vec<_>>())))
        })
        .collect::<Result<_>>()?;
    let (mut lo, mut hi) = (0usize, 0usize);
    for (k, r) in results.iter().enumerate() {
        if r.0 < results[lo].0 {
            lo = k;
        }
        if r.0 > results[hi].0 {
            hi = k;
        }
    }
    let delta = results[hi].0 - results[lo].0;
    Ok(LeakVerdict {
        constant_time: delta == 0,
        max_cycle_delta: delta,
        min_cycles: results[lo].0,
        max_cycles: results[hi].0,
        witness: (delta > 0).then(|| (samples[lo].clone(), samples[hi].clone())),
        trials: samples.len(),
        same_block_trace: results.iter().all(|r| r.1 == results[0].1),
        same_site_misses: results.iter().all(|r| r.2 == results[0].2),
    })
}

fn hash_of<T: std::hash::Hash>(v: &T) -> u64 {
    use std::hash::{DefaultHasher, Hasher};
    let mut h = DefaultHasher::new();
    v.hash(&mut h);
    h.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SiteBehavior {
    AlwaysHit,
    AlwaysMiss,
    FirstMissThenHit,
    Mixed,
}

/// Aggregates per-site hit/miss behavior over several runs of one function.
/// Sites never visited are left out.
pub fn classify_site_behavior(traces: &[TimingTrace]) -> Result<BTreeMap<Site, SiteBehavior>> {
    let mut out: BTreeMap<Site, SiteBehavior> = BTreeMap::new();
    let Some(first) = traces.first() else { return Ok(out) };
    for t in traces {
        if t.sites.len() != first.sites.len() || !t.sites.keys().eq(first.sites.keys()) {
            return Err(Error::Input("traces come from different programs".into()));
        }
    }
    for site in first.sites.keys() {
        let mut agg: Option<SiteBehavior> = None;
        for t in traces {
            let s = t.sites[site];
            let b = match (s.hits, s.misses) {
                (0, 0) => continue,
                (_, 0) => SiteBehavior::AlwaysHit,
                (0, _) => SiteBehavior::AlwaysMiss,
                (_, 1) if s.first_hit == Some(false) => SiteBehavior::FirstMissThenHit,
                _ => SiteBehavior::Mixed,
            };
            agg = Some(match agg {
                None => b,
                Some(a) if a == b => a,
                Some(_) => SiteBehavior::Mixed,
            });
        }
        if let Some(b) = agg {
            out.insert(site.clone(), b);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn module(src: &str) -> Module {
        crate::load_module(src).unwrap()
    }

    #[test]
    fn three_binops_cost_three() {
        let m = module("fn main(a: i32) -> i32 { b0: %x = add i32 %a, 1 %y = mul i32 %x, 3 %z = xor i32 %y, 7 ret %z }");
        let t = run(&m, &Inputs::from([("a".into(), Value::Scalar(2))]), &SimOptions::default()).unwrap();
        assert_eq!(t.cycles, 3);
        assert_eq!((t.hits, t.misses), (0, 0));
        assert_eq!(t.ret, Some(((2 + 1) * 3) ^ 7));
    }

    #[test]
    fn cold_load_misses() {
        let m = module("global g: [i8; 4] = [1, 2, 3, 4] fn main() -> i8 { b0: %x = load i8 @g[2] ret %x }");
        let t = run(&m, &Inputs::new(), &SimOptions::default()).unwrap();
        assert_eq!(t.misses, 1);
        assert_eq!(t.cycles, 100);
        assert_eq!(t.ret, Some(3));
    }

    #[test]
    fn out_of_bounds_traps_with_site() {
        let m = module("global g: [i8; 4] fn main(i: i32) -> i8 { b0: %x = load i8 @g[%i] ret %x }");
        let e = run(&m, &Inputs::from([("i".into(), Value::Scalar(4))]), &SimOptions::default()).unwrap_err();
        assert!(matches!(e, Error::Trap { ref site, .. } if site == "b0#0"), "{e}");
    }

    #[test]
    fn lru_evicts_oldest() {
        let cfg = CacheConfig { lines: 2, line_size: 64 };
        let mut c = ConcreteCache::new(cfg);
        let b = |l| MemBlock::new("@t", l);
        assert!(!c.access(b(0)));
        assert!(!c.access(b(1)));
        assert!(c.access(b(0)));
        assert!(!c.access(b(2)));
        assert_eq!(c.contents(), &[b(2), b(0)]);
        assert_eq!(c.age(&b(0)), Some(2));
    }

    #[test]
    fn step_limit_guards_nontermination() {
        let m = module("fn main() -> void { e: br h  h: br h }");
        let opts = SimOptions { max_steps: 1000, ..Default::default() };
        assert!(matches!(run(&m, &Inputs::new(), &opts), Err(Error::StepLimit(1000))));
    }

    #[test]
    fn ignoring_the_secret_is_constant_time() {
        let m = module("fn main(k: i8 secret, x: i8) -> i8 { b0: %y = add i8 %x, 1 ret %y }");
        let v = check_constant_time(&m, &Inputs::new(), Sampler::Exhaustive, &SimOptions::default()).unwrap();
        assert!(v.constant_time);
        assert_eq!(v.trials, 256);
    }

    #[test]
    fn single_trial_is_trivially_constant_time() {
        let m = module("fn main(k: i8 secret) -> i8 { e: %c = icmp eq i8 %k, 0 condbr %c, t, x  t: br x  x: ret %k }");
        let v = check_constant_time(&m, &Inputs::new(), Sampler::Random { seed: 1, trials: 1 }, &SimOptions::default()).unwrap();
        assert!(v.constant_time);
        let v = check_constant_time(&m, &Inputs::new(), Sampler::Exhaustive, &SimOptions::default()).unwrap();
        assert!(!v.constant_time);
        assert!(!v.same_block_trace);
    }
}
