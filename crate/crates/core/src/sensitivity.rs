//! Secret-dependence analysis and leak detection.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::ir::cfg::{control_region, Cfg, PostDomTree};
use crate::ir::*;

/// Taint facts for the entry function of a module.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SensitivityMap {
    pub function: String,
    pub regs: BTreeSet<String>,
    /// Arrays are tainted as a whole (`@sbox`, `%a`); records per field
    /// (`@ctx.key_enc`).
    pub memory: BTreeSet<MemRef>,
    /// Conditional branches with a tainted condition.
    pub branches: BTreeSet<Site>,
}

impl SensitivityMap {
    pub fn is_tainted(&self, op: &Operand) -> bool {
        op.as_reg().is_some_and(|r| self.regs.contains(r))
    }

    pub fn is_mem_tainted(&self, mem: &MemRef) -> bool {
        self.memory.contains(mem)
    }
}

/// Computes the least fixed point of data and control dependence on the
/// secret parameters of the entry function.
pub fn propagate_taint(m: &Module) -> SensitivityMap {
    let Some(f) = m.entry_function() else { return SensitivityMap::default() };
    propagate_taint_fn(m, f)
}

pub fn propagate_taint_fn(m: &Module, f: &Function) -> SensitivityMap {
    let mut s = SensitivityMap { function: f.name.clone(), ..Default::default() };
    for p in f.params.iter().filter(|p| p.secret) {
        match &p.ty {
            ParamTy::Scalar(_) => {
                s.regs.insert(p.name.clone());
            }
            ParamTy::Ptr(..) => {
                s.memory.insert(MemRef::param(&p.name));
            }
            ParamTy::Rec(r) => {
                if let Some(rec) = m.record(r) {
                    for fd in &rec.fields {
                        s.memory.insert(MemRef::param(&p.name).with_field(&fd.name));
                    }
                }
            }
        }
    }
    let cfg = Cfg::new(f);
    let pdt = PostDomTree::new(f, &cfg);
    let regions: Vec<Option<Vec<usize>>> = f
        .blocks
        .iter()
        .enumerate()
        .map(|(bi, b)| matches!(b.term, Terminator::CondBr { .. }).then(|| control_region(&cfg, &pdt, bi)))
        .collect();

    loop {
        let mut changed = false;
        // Blocks control dependent on a tainted branch, and blocks that are
        // either such a branch or inside its region (for phi merging).
        let mut in_region = vec![false; cfg.len()];
        let mut feeds_merge = vec![false; cfg.len()];
        for (bi, b) in f.blocks.iter().enumerate() {
            if let Terminator::CondBr { cond, .. } = &b.term {
                if s.is_tainted(cond) {
                    if s.branches.insert(Site::new(&b.label, b.instrs.len())) {
                        changed = true;
                    }
                    feeds_merge[bi] = true;
                    for &r in regions[bi].as_ref().unwrap() {
                        in_region[r] = true;
                        feeds_merge[r] = true;
                    }
                }
            }
        }
        for (bi, b) in f.blocks.iter().enumerate() {
            for ins in &b.instrs {
                let mut t = in_region[bi] || ins.operands().iter().any(|o| s.is_tainted(o));
                match ins {
                    Instr::Load { mem, .. } | Instr::LoadField { mem, .. } => t |= s.is_mem_tainted(mem),
                    Instr::Phi { incoming, .. } => {
                        t |= incoming.iter().any(|(_, p)| cfg.idx(p).is_some_and(|pi| feeds_merge[pi]));
                    }
                    Instr::Store { mem, .. } | Instr::StoreField { mem, .. } => {
                        if t && s.memory.insert(mem.clone()) {
                            changed = true;
                        }
                        continue;
                    }
                    Instr::Call { args, .. } => {
                        // Only reachable before inlining: be conservative.
                        for a in args {
                            if let CallArg::Mem(mem) = a {
                                t |= s.is_mem_tainted(mem);
                            }
                        }
                    }
                    _ => {}
                }
                if t {
                    if let Some(d) = ins.dst() {
                        if s.regs.insert(d.to_string()) {
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            return s;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SiteKind {
    Condbr,
    Load,
    Store,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LeakSite {
    pub function: String,
    pub block: String,
    pub index: usize,
    pub kind: SiteKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub array: Option<String>,
}

impl LeakSite {
    pub fn site(&self) -> Site {
        Site::new(&self.block, self.index)
    }
}

/// Static leak counts per function.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LeakTotals {
    pub if_total: usize,
    pub if_sensitive: usize,
    pub lut_total: usize,
    pub lut_sensitive: usize,
    pub lut_access_total: usize,
    pub lut_access_sensitive: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LeakReport {
    pub conditionals: Vec<LeakSite>,
    pub lut_accesses: Vec<LeakSite>,
    pub totals: LeakTotals,
}

impl LeakReport {
    pub fn is_empty(&self) -> bool {
        self.conditionals.is_empty() && self.lut_accesses.is_empty()
    }
}

/// Lists every branch on a tainted condition and every array access with a
/// tainted index, in block and instruction order.
pub fn detect_leaks(m: &Module, s: &SensitivityMap) -> LeakReport {
    let mut r = LeakReport::default();
    let Some(f) = m.function(&s.function) else { return r };
    let mut arrays = BTreeSet::new();
    let mut sensitive_arrays = BTreeSet::new();
    for b in &f.blocks {
        for (ii, ins) in b.instrs.iter().enumerate() {
            let (kind, mem, index) = match ins {
                Instr::Load { mem, index, .. } => (SiteKind::Load, mem, index),
                Instr::Store { mem, index, .. } => (SiteKind::Store, mem, index),
                _ => continue,
            };
            r.totals.lut_access_total += 1;
            arrays.insert(mem.to_string());
            if s.is_tainted(index) {
                sensitive_arrays.insert(mem.to_string());
                r.lut_accesses.push(LeakSite {
                    function: f.name.clone(),
                    block: b.label.clone(),
                    index: ii,
                    kind,
                    array: Some(mem.to_string()),
                });
            }
        }
        if let Terminator::CondBr { cond, .. } = &b.term {
            r.totals.if_total += 1;
            if s.is_tainted(cond) {
                r.conditionals.push(LeakSite {
                    function: f.name.clone(),
                    block: b.label.clone(),
                    index: b.instrs.len(),
                    kind: SiteKind::Condbr,
                    array: None,
                });
            }
        }
    }
    r.totals.if_sensitive = r.conditionals.len();
    r.totals.lut_access_sensitive = r.lut_accesses.len();
    r.totals.lut_total = arrays.len();
    r.totals.lut_sensitive = sensitive_arrays.len();
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    fn taint(src: &str) -> (Module, SensitivityMap) {
        let m = inline_all(&parse_module(src).unwrap()).unwrap();
        let s = propagate_taint(&m);
        (m, s)
    }

    #[test]
    fn msb_mask_is_tainted() {
        let (_, s) = taint("fn main(a: i8 secret, x: i8) -> i8 { b0: %b = and i8 %a, 0x80 %c = add i8 %x, 1 ret %b }");
        assert!(s.regs.contains("b"));
        assert!(!s.regs.contains("c"));
    }

    #[test]
    fn control_dependence_taints_merge() {
        let (m, s) = taint(
            "fn main(a: i8 secret) -> i8 {
             e: %c = icmp eq i8 %a, 0x10
                condbr %c, t, f
             t: br x
             f: br x
             x: %b = phi i8 [1, t], [0, f]
                ret %b }",
        );
        assert!(s.regs.contains("b"));
        let r = detect_leaks(&m, &s);
        assert_eq!(r.totals.if_sensitive, 1);
        assert_eq!(r.conditionals[0].index, 1);
    }

    #[test]
    fn unused_secret_reports_nothing() {
        let (m, s) = taint("fn main(a: i8 secret, x: i8) -> i8 { b0: %c = add i8 %x, 1 ret %c }");
        assert!(detect_leaks(&m, &s).is_empty());
    }
}
