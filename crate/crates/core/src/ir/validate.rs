//! Structural, SSA and type checks for modules.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::Serialize;

use super::cfg::{Cfg, DomTree};
use super::*;

/// One violated invariant. `location` is `function:block` or a global name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub location: String,
    pub invariant: String,
    pub message: String,
}

impl Diagnostic {
    pub fn new(location: impl Into<String>, invariant: impl Into<String>, message: impl Into<String>) -> Self {
        Diagnostic { location: location.into(), invariant: invariant.into(), message: message.into() }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}: {}", self.location, self.invariant, self.message)
    }
}

/// Checks every module invariant. The result is empty iff the module is valid.
pub fn validate(m: &Module) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    check_globals(m, &mut out);
    if m.entry.is_empty() || m.function(&m.entry).is_none() {
        out.push(Diagnostic::new(
            "module",
            "entry function",
            if m.entry.is_empty() {
                "no entry function: mark one `entry` or name it `main`".to_string()
            } else {
                format!("entry function `{}` does not exist", m.entry)
            },
        ));
    }
    let mut fnames = HashSet::new();
    for f in &m.functions {
        if !fnames.insert(f.name.as_str()) {
            out.push(Diagnostic::new(&f.name, "duplicate name", format!("function `{}` defined twice", f.name)));
        }
        if m.array(&f.name).is_some() || m.record(&f.name).is_some() {
            out.push(Diagnostic::new(&f.name, "duplicate name", format!("`{}` names both a function and a global", f.name)));
        }
    }
    check_recursion(m, &mut out);
    for f in &m.functions {
        FunctionChecker::new(m, f, &mut out).run();
    }
    out
}

fn check_globals(m: &Module, out: &mut Vec<Diagnostic>) {
    let mut names = HashSet::new();
    for a in &m.arrays {
        if !names.insert(a.name.as_str()) {
            out.push(Diagnostic::new(&a.name, "duplicate name", format!("global `{}` defined twice", a.name)));
        }
        if a.len == 0 {
            out.push(Diagnostic::new(&a.name, "array length", "arrays need at least one element"));
        }
        if let Some(init) = &a.init {
            if init.len() as u64 != a.len {
                out.push(Diagnostic::new(
                    &a.name,
                    "array init length",
                    format!("{} initializers for {} elements", init.len(), a.len),
                ));
            }
        }
    }
    for r in &m.records {
        if !names.insert(r.name.as_str()) {
            out.push(Diagnostic::new(&r.name, "duplicate name", format!("global `{}` defined twice", r.name)));
        }
        let mut fields = HashSet::new();
        for fd in &r.fields {
            if !fields.insert(fd.name.as_str()) {
                out.push(Diagnostic::new(
                    &r.name,
                    "duplicate name",
                    format!("field `{}` defined twice", fd.name),
                ));
            }
            if let FieldTy::Array(_, 0) = fd.ty {
                out.push(Diagnostic::new(&r.name, "array length", format!("field `{}` has no elements", fd.name)));
            }
        }
        if r.fields.is_empty() {
            out.push(Diagnostic::new(&r.name, "record fields", "records need at least one field"));
        }
    }
}

fn callees(f: &Function) -> Vec<&str> {
    f.blocks
        .iter()
        .flat_map(|b| b.instrs.iter())
        .filter_map(|i| match i {
            Instr::Call { callee, .. } => Some(callee.as_str()),
            _ => None,
        })
        .collect()
}

/// Names of functions on a call-graph cycle, if any.
pub(crate) fn find_recursion(m: &Module) -> Option<Vec<String>> {
    let idx: HashMap<&str, usize> = m.functions.iter().enumerate().map(|(i, f)| (f.name.as_str(), i)).collect();
    let n = m.functions.len();
    let edges: Vec<Vec<usize>> = m
        .functions
        .iter()
        .map(|f| callees(f).into_iter().filter_map(|c| idx.get(c).copied()).collect())
        .collect();
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut state = vec![0u8; n];
    fn dfs(v: usize, edges: &[Vec<usize>], state: &mut [u8], stack: &mut Vec<usize>) -> Option<Vec<usize>> {
        state[v] = 1;
        stack.push(v);
        for &w in &edges[v] {
            if state[w] == 1 {
                let pos = stack.iter().position(|&x| x == w).unwrap();
                return Some(stack[pos..].to_vec());
            }
            if state[w] == 0 {
                if let Some(c) = dfs(w, edges, state, stack) {
                    return Some(c);
                }
            }
        }
        stack.pop();
        state[v] = 2;
        None
    }
    for v in 0..n {
        if state[v] == 0 {
            let mut stack = Vec::new();
            if let Some(cycle) = dfs(v, &edges, &mut state, &mut stack) {
                return Some(cycle.into_iter().map(|i| m.functions[i].name.clone()).collect());
            }
        }
    }
    None
}

fn check_recursion(m: &Module, out: &mut Vec<Diagnostic>) {
    if let Some(cycle) = find_recursion(m) {
        out.push(Diagnostic::new(
            &cycle[0],
            "recursion rejected",
            format!("call cycle {}", cycle.join(" -> ")),
        ));
    }
}

/// Where a register gets its value.
#[derive(Clone, Copy)]
enum DefSite {
    Param,
    Instr(usize, usize),
}

struct FunctionChecker<'a> {
    m: &'a Module,
    f: &'a Function,
    out: &'a mut Vec<Diagnostic>,
    types: HashMap<&'a str, Ty>,
    defs: HashMap<&'a str, DefSite>,
}

impl<'a> FunctionChecker<'a> {
    fn new(m: &'a Module, f: &'a Function, out: &'a mut Vec<Diagnostic>) -> Self {
        FunctionChecker { m, f, out, types: HashMap::new(), defs: HashMap::new() }
    }

    fn report(&mut self, block: &str, invariant: &str, message: String) {
        let loc = if block.is_empty() { self.f.name.clone() } else { format!("{}:{}", self.f.name, block) };
        self.out.push(Diagnostic::new(loc, invariant, message));
    }

    fn run(&mut self) {
        let f = self.f;
        if f.blocks.is_empty() {
            self.report("", "function body", "function has no blocks".into());
            return;
        }
        let mut labels = HashSet::new();
        for b in &f.blocks {
            if !labels.insert(b.label.as_str()) {
                self.report(&b.label, "duplicate name", format!("block `{}` defined twice", b.label));
            }
        }
        for p in &f.params {
            if self.defs.insert(&p.name, DefSite::Param).is_some() {
                self.report("", "duplicate name", format!("parameter `{}` declared twice", p.name));
            }
            match &p.ty {
                ParamTy::Scalar(t) => {
                    self.types.insert(&p.name, *t);
                }
                ParamTy::Ptr(_, 0) => {
                    self.report("", "array length", format!("parameter `{}` points to zero elements", p.name))
                }
                ParamTy::Ptr(..) => {}
                ParamTy::Rec(r) => {
                    if self.m.record(r).is_none() {
                        self.report("", "unknown memory", format!("record type `{r}` does not exist"));
                    }
                }
            }
        }
        for (bi, b) in f.blocks.iter().enumerate() {
            for (ii, ins) in b.instrs.iter().enumerate() {
                if let Some(d) = ins.dst() {
                    if self.defs.insert(d, DefSite::Instr(bi, ii)).is_some() {
                        self.report(&b.label, "SSA single definition", format!("register `%{d}` defined more than once"));
                    }
                    if let Some(t) = ins.dst_ty() {
                        self.types.insert(d, t);
                    }
                }
            }
            for s in b.term.successors() {
                if !labels.contains(s) {
                    self.report(&b.label, "unknown block", format!("branch to undefined block `{s}`"));
                }
            }
        }

        let cfg = Cfg::new(f);
        let dt = DomTree::new(&cfg);
        if !cfg.preds[0].is_empty() {
            self.report(&f.blocks[0].label, "entry has predecessors", "the entry block must not be a branch target".into());
        }
        for b in 0..cfg.len() {
            if !cfg.reachable[b] {
                self.report(&cfg.labels[b], "unreachable block", "block is not reachable from the entry".into());
            }
        }

        for (bi, b) in f.blocks.iter().enumerate() {
            let mut seen_non_phi = false;
            for (ii, ins) in b.instrs.iter().enumerate() {
                if ins.is_phi() {
                    if seen_non_phi {
                        self.report(&b.label, "phi not at block head", format!("phi `%{}` follows a non-phi instruction", ins.dst().unwrap()));
                    }
                    self.check_phi(&cfg, &dt, bi, ins);
                } else {
                    seen_non_phi = true;
                    for op in ins.operands() {
                        self.check_use(&dt, bi, ii, op);
                    }
                }
                self.check_instr(&b.label, ins);
            }
            for op in b.term.operands() {
                self.check_use(&dt, bi, b.instrs.len(), op);
            }
            self.check_term(&b.label, &b.term);
        }
    }

    fn check_use(&mut self, dt: &DomTree, bi: usize, ii: usize, op: &Operand) {
        let Operand::Reg(r) = op else { return };
        let label = self.f.blocks[bi].label.clone();
        match self.defs.get(r.as_str()).copied() {
            None => self.report(&label, "undefined register", format!("`%{r}` is never defined")),
            Some(DefSite::Param) => {}
            Some(DefSite::Instr(db, di)) => {
                if !dt.reachable[bi] {
                    return;
                }
                let ok = if db == bi { di < ii } else { dt.dominates(db, bi) };
                if !ok {
                    self.report(&label, "SSA dominance violated", format!("`%{r}` is used where its definition does not dominate"));
                }
            }
        }
    }

    fn check_phi(&mut self, cfg: &Cfg, dt: &DomTree, bi: usize, ins: &Instr) {
        let Instr::Phi { dst, incoming, .. } = ins else { return };
        let label = self.f.blocks[bi].label.clone();
        let preds: Vec<&str> = cfg.unique_preds(bi).into_iter().map(|p| cfg.labels[p].as_str()).collect();
        let mut seen = HashSet::new();
        for (v, from) in incoming {
            if !seen.insert(from.as_str()) {
                self.report(&label, "phi incomplete", format!("phi `%{dst}` lists `{from}` twice"));
            }
            match cfg.idx(from) {
                Some(p) if preds.contains(&from.as_str()) => {
                    // A phi operand is used at the end of its predecessor.
                    let end = self.f.blocks[p].instrs.len() + 1;
                    self.check_use(dt, p, end, v);
                }
                _ => self.report(&label, "phi incomplete", format!("phi `%{dst}` names `{from}`, which is not a predecessor")),
            }
        }
        for p in preds {
            if !seen.contains(p) {
                self.report(&label, "phi incomplete", format!("phi `%{dst}` has no value for predecessor `{p}`"));
            }
        }
    }

    fn op_ty(&self, op: &Operand) -> Option<Ty> {
        match op {
            Operand::Reg(r) => self.types.get(r.as_str()).copied(),
            Operand::Imm(_) => None,
        }
    }

    fn expect_ty(&mut self, block: &str, what: &str, op: &Operand, want: Ty) {
        if let Some(t) = self.op_ty(op) {
            if t != want {
                self.report(block, "type mismatch", format!("{what} has type {t}, expected {want}"));
            }
        }
    }

    fn expect_int(&mut self, block: &str, what: &str, op: &Operand) {
        if let Operand::Reg(r) = op {
            if self.defs.contains_key(r.as_str()) && !self.types.contains_key(r.as_str()) {
                self.report(block, "type mismatch", format!("{what} `%{r}` is not a scalar"));
            }
        }
    }

    fn check_mem_array(&mut self, block: &str, mem: &MemRef, ty: Ty) {
        match self.m.array_shape(self.f, mem) {
            Some((elem, _)) if elem == ty => {}
            Some((elem, _)) => self.report(block, "type mismatch", format!("`{mem}` holds {elem}, accessed as {ty}")),
            None => self.report(block, "unknown memory", format!("`{mem}` is not an array")),
        }
    }

    fn check_instr(&mut self, block: &str, ins: &Instr) {
        match ins {
            Instr::Const { .. } => {}
            Instr::Bin { ty, a, b, .. } | Instr::Icmp { ty, a, b, .. } => {
                self.expect_ty(block, "operand", a, *ty);
                self.expect_ty(block, "operand", b, *ty);
            }
            Instr::Cast { op, from, value, to, .. } => {
                self.expect_ty(block, "cast operand", value, *from);
                let ok = match op {
                    CastOp::Zext | CastOp::Sext => to.bits() > from.bits(),
                    CastOp::Trunc => to.bits() < from.bits(),
                };
                if !ok {
                    self.report(block, "type mismatch", format!("cannot {} {from} to {to}", op.name()));
                }
            }
            Instr::Load { ty, mem, index, .. } => {
                self.check_mem_array(block, mem, *ty);
                self.expect_int(block, "index", index);
            }
            Instr::Store { ty, mem, index, value, .. } => {
                self.check_mem_array(block, mem, *ty);
                self.expect_int(block, "index", index);
                self.expect_ty(block, "stored value", value, *ty);
            }
            Instr::LoadField { ty, mem, .. } | Instr::StoreField { ty, mem, .. } => {
                match self.m.field_scalar(self.f, mem) {
                    Some(t) if t == *ty => {}
                    Some(t) => self.report(block, "type mismatch", format!("`{mem}` holds {t}, accessed as {ty}")),
                    None => self.report(block, "unknown memory", format!("`{mem}` is not a scalar record field")),
                }
                if let Instr::StoreField { value, .. } = ins {
                    self.expect_ty(block, "stored value", value, *ty);
                }
            }
            Instr::Phi { ty, incoming, .. } => {
                for (v, _) in incoming {
                    self.expect_ty(block, "phi operand", v, *ty);
                }
            }
            Instr::Ctsel { ty, cond, t, e, .. } => {
                self.expect_ty(block, "ctsel condition", cond, Ty::I1);
                self.expect_ty(block, "ctsel operand", t, *ty);
                self.expect_ty(block, "ctsel operand", e, *ty);
            }
            Instr::Call { dst, ret, callee, args } => self.check_call(block, dst.as_deref(), *ret, callee, args),
        }
    }

    fn check_call(&mut self, block: &str, dst: Option<&str>, ret: RetTy, callee: &str, args: &[CallArg]) {
        let Some(g) = self.m.function(callee) else {
            self.report(block, "unknown callee", format!("function `@{callee}` does not exist"));
            return;
        };
        if g.ret != ret {
            self.report(block, "type mismatch", format!("`@{callee}` does not return the declared type"));
        }
        if dst.is_some() && ret == RetTy::Void {
            self.report(block, "type mismatch", "a void call cannot define a register".into());
        }
        if args.len() != g.params.len() {
            self.report(block, "type mismatch", format!("`@{callee}` takes {} arguments, {} given", g.params.len(), args.len()));
            return;
        }
        for (a, p) in args.iter().zip(&g.params) {
            match (&p.ty, a) {
                (ParamTy::Scalar(t), CallArg::Value(v)) => self.expect_ty(block, "argument", v, *t),
                (ParamTy::Ptr(t, n), CallArg::Mem(mem)) => match self.m.array_shape(self.f, mem) {
                    Some((elem, len)) if elem == *t && len >= *n => {}
                    _ => self.report(block, "type mismatch", format!("`{mem}` does not fit ptr<{t},{n}>")),
                },
                (ParamTy::Rec(r), CallArg::Mem(mem)) if mem.field.is_none() => {
                    match self.m.record_layout_of(self.f, &mem.base) {
                        Some(rec) if &rec.name == r => {}
                        _ => self.report(block, "type mismatch", format!("`{mem}` is not a `{r}` record")),
                    }
                }
                _ => self.report(block, "type mismatch", format!("argument for `{}` has the wrong kind", p.name)),
            }
        }
    }

    fn check_term(&mut self, block: &str, term: &Terminator) {
        match term {
            Terminator::Br(_) => {}
            Terminator::CondBr { cond, .. } => self.expect_ty(block, "branch condition", cond, Ty::I1),
            Terminator::Ret(v) => match (self.f.ret, v) {
                (RetTy::Void, None) => {}
                (RetTy::Int(t), Some(v)) => self.expect_ty(block, "return value", v, t),
                (RetTy::Void, Some(_)) => self.report(block, "type mismatch", "void function returns a value".into()),
                (RetTy::Int(_), None) => self.report(block, "type mismatch", "missing return value".into()),
            },
        }
    }
}
