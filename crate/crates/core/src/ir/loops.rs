//! Natural loops and static trip bounds.

use std::collections::HashMap;

use serde::Serialize;

use super::cfg::{Cfg, DomTree};
use super::*;

/// Cap on constant-folded iteration counts.
pub const MAX_FOLDED_TRIPS: u64 = 1 << 20;

/// A natural loop. `bound` is the maximum number of times the header runs
/// each time the loop is entered.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LoopInfo {
    pub header: String,
    /// Sources of back edges into the header.
    pub latches: Vec<String>,
    /// Every block of the loop, header included, in function order.
    pub body: Vec<String>,
    /// Edges leaving the loop as (inside block, outside block).
    pub exits: Vec<(String, String)>,
    pub bound: Option<u64>,
    /// Header of the innermost enclosing loop.
    pub parent: Option<String>,
    pub depth: usize,
}

impl LoopInfo {
    pub fn contains(&self, label: &str) -> bool {
        self.body.iter().any(|b| b == label)
    }

    /// Distinct blocks outside the loop that exit edges lead to.
    pub fn exit_blocks(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for (_, o) in &self.exits {
            if !out.contains(o) {
                out.push(o.clone());
            }
        }
        out
    }
}

/// Finds all natural loops, outermost first (then by header position).
pub fn find_loops(f: &Function) -> Vec<LoopInfo> {
    let cfg = Cfg::new(f);
    let dt = DomTree::new(&cfg);
    let mut by_header: HashMap<usize, Vec<usize>> = HashMap::new();
    for b in 0..cfg.len() {
        if !cfg.reachable[b] {
            continue;
        }
        for &s in &cfg.succs[b] {
            if dt.dominates(s, b) {
                let l = by_header.entry(s).or_default();
                if !l.contains(&b) {
                    l.push(b);
                }
            }
        }
    }
    let mut raw: Vec<(usize, Vec<usize>, Vec<bool>)> = Vec::new();
    let mut headers: Vec<usize> = by_header.keys().copied().collect();
    headers.sort_unstable();
    for h in headers {
        let latches = by_header[&h].clone();
        let mut inside = vec![false; cfg.len()];
        inside[h] = true;
        let mut stack: Vec<usize> = Vec::new();
        for &l in &latches {
            if !inside[l] {
                inside[l] = true;
                stack.push(l);
            }
        }
        while let Some(b) = stack.pop() {
            for &p in &cfg.preds[b] {
                if !inside[p] && cfg.reachable[p] {
                    inside[p] = true;
                    stack.push(p);
                }
            }
        }
        raw.push((h, latches, inside));
    }
    let size = |i: usize| raw[i].2.iter().filter(|x| **x).count();
    let mut infos = Vec::new();
    for (i, (h, latches, inside)) in raw.iter().enumerate() {
        // Innermost strictly enclosing loop = smallest other loop containing this header.
        let parent = (0..raw.len())
            .filter(|&j| j != i && raw[j].2[*h] && size(j) > size(i))
            .min_by_key(|&j| size(j));
        let depth = (0..raw.len()).filter(|&j| j != i && raw[j].2[*h] && size(j) > size(i)).count();
        let body: Vec<String> = (0..cfg.len()).filter(|&b| inside[b]).map(|b| cfg.labels[b].clone()).collect();
        let mut exits = Vec::new();
        for b in (0..cfg.len()).filter(|&b| inside[b]) {
            for &s in &cfg.succs[b] {
                if !inside[s] {
                    let e = (cfg.labels[b].clone(), cfg.labels[s].clone());
                    if !exits.contains(&e) {
                        exits.push(e);
                    }
                }
            }
        }
        let mut info = LoopInfo {
            header: cfg.labels[*h].clone(),
            latches: latches.iter().map(|&l| cfg.labels[l].clone()).collect(),
            body,
            exits,
            bound: None,
            parent: parent.map(|j| cfg.labels[raw[j].0].clone()),
            depth,
        };
        info.bound = f.blocks[*h].bound.or_else(|| fold_trip_count(f, &cfg, &dt, &info));
        infos.push(info);
    }
    infos.sort_by_key(|l| (l.depth, f.block_index(&l.header)));
    infos
}

/// Constant folder over the function's definitions. Header phis of the loop
/// being folded are looked up in `env`; other values must be built from
/// constants.
struct Folder<'a> {
    f: &'a Function,
    defs: HashMap<&'a str, &'a Instr>,
}

impl<'a> Folder<'a> {
    fn new(f: &'a Function) -> Self {
        let mut defs = HashMap::new();
        for b in &f.blocks {
            for i in &b.instrs {
                if let Some(d) = i.dst() {
                    defs.insert(d, i);
                }
            }
        }
        Folder { f, defs }
    }

    fn ty_of(&self, op: &Operand) -> Option<Ty> {
        match op {
            Operand::Reg(r) => self.defs.get(r.as_str()).and_then(|i| i.dst_ty()).or_else(|| {
                self.f.param(r).and_then(|p| match p.ty {
                    ParamTy::Scalar(t) => Some(t),
                    _ => None,
                })
            }),
            Operand::Imm(_) => None,
        }
    }

    fn eval(&self, op: &Operand, ty: Ty, env: &HashMap<String, u64>, depth: usize) -> Option<u64> {
        match op {
            Operand::Imm(v) => Some(ty.wrap(*v as u64)),
            Operand::Reg(r) => {
                if let Some(v) = env.get(r) {
                    return Some(*v);
                }
                if depth > 64 {
                    return None;
                }
                let ins = *self.defs.get(r.as_str())?;
                let d = depth + 1;
                match ins {
                    Instr::Const { ty, value, .. } => Some(ty.wrap(*value as u64)),
                    Instr::Bin { op, ty, a, b, .. } => {
                        Some(op.eval(*ty, self.eval(a, *ty, env, d)?, self.eval(b, *ty, env, d)?))
                    }
                    Instr::Icmp { pred, ty, a, b, .. } => {
                        Some(pred.eval(*ty, self.eval(a, *ty, env, d)?, self.eval(b, *ty, env, d)?) as u64)
                    }
                    Instr::Cast { op, from, value, to, .. } => {
                        Some(op.eval(*from, *to, self.eval(value, *from, env, d)?))
                    }
                    Instr::Phi { ty, incoming, .. } if incoming.len() == 1 => self.eval(&incoming[0].0, *ty, env, d),
                    _ => None,
                }
            }
        }
    }
}

/// Folds the trip count of a loop with a single exiting block whose exit
/// condition is computable from header phis with constant initial values.
fn fold_trip_count(f: &Function, cfg: &Cfg, dt: &DomTree, l: &LoopInfo) -> Option<u64> {
    let mut exiting: Vec<&str> = l.exits.iter().map(|(i, _)| i.as_str()).collect();
    exiting.dedup();
    if exiting.len() != 1 || l.latches.len() != 1 {
        return None;
    }
    let xb = f.block(exiting[0])?;
    let latch = &l.latches[0];
    if !dt.dominates(cfg.idx(exiting[0])?, cfg.idx(latch)?) {
        return None;
    }
    let Terminator::CondBr { cond, t, .. } = &xb.term else { return None };
    let exit_on_true = !l.contains(t);
    let header = f.block(&l.header)?;
    let folder = Folder::new(f);

    // Header phis with a single outside incoming value and a latch value.
    let mut inits = HashMap::new();
    let mut steps: Vec<(String, Ty, Operand)> = Vec::new();
    for ins in header.phis() {
        let Instr::Phi { dst, ty, incoming } = ins else { continue };
        let outside: Vec<&Operand> = incoming.iter().filter(|(_, p)| !l.contains(p)).map(|(v, _)| v).collect();
        let from_latch = incoming.iter().find(|(_, p)| p == latch).map(|(v, _)| v.clone());
        if outside.len() != 1 {
            continue;
        }
        let Some(next) = from_latch else { continue };
        if let Some(v) = folder.eval(outside[0], *ty, &HashMap::new(), 0) {
            inits.insert(dst.clone(), v);
            steps.push((dst.clone(), *ty, next));
        }
    }
    let cond_ty = folder.ty_of(cond).unwrap_or(Ty::I1);
    let mut env = inits;
    let mut trips = 1u64;
    loop {
        let c = folder.eval(cond, cond_ty, &env, 0)? != 0;
        if c == exit_on_true {
            return Some(trips);
        }
        if trips >= MAX_FOLDED_TRIPS {
            return None;
        }
        let mut next = HashMap::new();
        for (dst, ty, op) in &steps {
            if let Some(v) = folder.eval(op, *ty, &env, 0) {
                next.insert(dst.clone(), v);
            }
        }
        env = next;
        trips += 1;
    }
}
