//! Low-level rewriting helpers shared by the passes.

use std::collections::{HashMap, HashSet};

use super::cfg::Cfg;
use super::*;

/// Hands out fresh `t<n>` registers and `bb<n>` labels that do not clash
/// with anything already in the function.
#[derive(Debug, Clone)]
pub struct Namer {
    next_reg: u64,
    next_block: u64,
}

fn numeric_suffix(s: &str, prefix: &str) -> Option<u64> {
    s.strip_prefix(prefix).and_then(|rest| rest.parse().ok())
}

impl Namer {
    pub fn new(f: &Function) -> Namer {
        let mut next_reg = 0;
        let mut next_block = 0;
        for p in &f.params {
            if let Some(n) = numeric_suffix(&p.name, "t") {
                next_reg = next_reg.max(n + 1);
            }
        }
        for b in &f.blocks {
            if let Some(n) = numeric_suffix(&b.label, "bb") {
                next_block = next_block.max(n + 1);
            }
            for i in &b.instrs {
                if let Some(n) = i.dst().and_then(|d| numeric_suffix(d, "t")) {
                    next_reg = next_reg.max(n + 1);
                }
            }
        }
        Namer { next_reg, next_block }
    }

    pub fn reg(&mut self) -> String {
        let r = format!("t{}", self.next_reg);
        self.next_reg += 1;
        r
    }

    pub fn block(&mut self) -> String {
        let b = format!("bb{}", self.next_block);
        self.next_block += 1;
        b
    }
}

/// Renames the predecessor `from` to `to` in the phis of block `b`.
pub fn rename_phi_pred(f: &mut Function, b: &str, from: &str, to: &str) {
    if let Some(block) = f.block_mut(b) {
        for ins in block.instrs.iter_mut() {
            if let Instr::Phi { incoming, .. } = ins {
                for (_, p) in incoming.iter_mut() {
                    if p == from {
                        *p = to.to_string();
                    }
                }
            }
        }
    }
}

/// Drops the incoming entry for predecessor `pred` from the phis of `b`.
pub fn remove_phi_pred(f: &mut Function, b: &str, pred: &str) {
    if let Some(block) = f.block_mut(b) {
        for ins in block.instrs.iter_mut() {
            if let Instr::Phi { incoming, .. } = ins {
                incoming.retain(|(_, p)| p != pred);
            }
        }
    }
}

/// Splits block `label` before instruction `at`. The tail (instructions from
/// `at` on plus the terminator) moves to a new block placed right after the
/// original, which now ends in `br` to it. Returns the new label.
pub fn split_block(f: &mut Function, namer: &mut Namer, label: &str, at: usize) -> String {
    let new_label = namer.block();
    let bi = f.block_index(label).expect("block exists");
    let block = &mut f.blocks[bi];
    let tail: Vec<Instr> = block.instrs.drain(at..).collect();
    let term = std::mem::replace(&mut block.term, Terminator::Br(new_label.clone()));
    let succs: Vec<String> = term.successors().iter().map(|s| s.to_string()).collect();
    let new_block = Block { label: new_label.clone(), bound: None, instrs: tail, term };
    f.blocks.insert(bi + 1, new_block);
    for s in succs {
        rename_phi_pred(f, &s, label, &new_label);
    }
    new_label
}

/// Replaces every use of register `from` (instructions and terminators) with `to`.
pub fn replace_uses(f: &mut Function, from: &str, to: &Operand) {
    for b in f.blocks.iter_mut() {
        for ins in b.instrs.iter_mut() {
            for op in ins.operands_mut() {
                if op.as_reg() == Some(from) {
                    *op = to.clone();
                }
            }
        }
        for op in b.term.operands_mut() {
            if op.as_reg() == Some(from) {
                *op = to.clone();
            }
        }
    }
}

/// Applies a register substitution map to every operand in the function.
pub fn substitute(f: &mut Function, map: &HashMap<String, Operand>) {
    if map.is_empty() {
        return;
    }
    let resolve = |op: &mut Operand| {
        let mut guard = 0;
        while let Operand::Reg(r) = op {
            match map.get(r.as_str()) {
                Some(v) if guard < 64 => {
                    *op = v.clone();
                    guard += 1;
                }
                _ => break,
            }
        }
    };
    for b in f.blocks.iter_mut() {
        for ins in b.instrs.iter_mut() {
            for op in ins.operands_mut() {
                resolve(op);
            }
        }
        for op in b.term.operands_mut() {
            resolve(op);
        }
    }
}

/// Removes phis that have a single incoming value or whose incoming values
/// are all identical (ignoring self references), substituting the value.
pub fn remove_trivial_phis(f: &mut Function) -> bool {
    let mut any = false;
    loop {
        let mut map = HashMap::new();
        for b in &f.blocks {
            for ins in b.phis() {
                let Instr::Phi { dst, incoming, .. } = ins else { continue };
                let mut vals = incoming.iter().map(|(v, _)| v).filter(|v| v.as_reg() != Some(dst.as_str()));
                let Some(first) = vals.next() else { continue };
                if vals.all(|v| v == first) {
                    map.insert(dst.clone(), first.clone());
                }
            }
        }
        if map.is_empty() {
            return any;
        }
        any = true;
        for b in f.blocks.iter_mut() {
            b.instrs.retain(|i| !(i.is_phi() && map.contains_key(i.dst().unwrap())));
        }
        substitute(f, &map);
    }
}

/// Drops blocks unreachable from the entry, cleaning up phi entries that
/// referenced them.
pub fn remove_unreachable(f: &mut Function) -> bool {
    let cfg = Cfg::new(f);
    let dead: HashSet<String> = (0..cfg.len()).filter(|&b| !cfg.reachable[b]).map(|b| cfg.labels[b].clone()).collect();
    if dead.is_empty() {
        return false;
    }
    f.blocks.retain(|b| !dead.contains(&b.label));
    for b in f.blocks.iter_mut() {
        for ins in b.instrs.iter_mut() {
            if let Instr::Phi { incoming, .. } = ins {
                incoming.retain(|(_, p)| !dead.contains(p));
            }
        }
    }
    true
}

/// Merges `a -> b` when `a` ends in `br b`, `b` has `a` as its only
/// predecessor and `b` is not the entry. Single-incoming phis in `b` are
/// substituted away. Repeats to a fixed point.
pub fn merge_chains(f: &mut Function) -> bool {
    let mut any = false;
    'outer: loop {
        let cfg = Cfg::new(f);
        for a in 0..cfg.len() {
            let Terminator::Br(target) = &f.blocks[a].term else { continue };
            let Some(b) = cfg.idx(target) else { continue };
            if b == 0 || b == a || cfg.preds[b].len() != 1 {
                continue;
            }
            // The merged block keeps `a`'s label; a bound annotation on `b`
            // would otherwise be lost, so leave annotated blocks alone.
            if f.blocks[b].bound.is_some() && f.blocks[b].bound != f.blocks[a].bound {
                continue;
            }
            let a_label = f.blocks[a].label.clone();
            let b_label = f.blocks[b].label.clone();
            let mut moved = f.blocks[b].clone();
            let mut map = HashMap::new();
            moved.instrs.retain(|i| {
                if let Instr::Phi { dst, incoming, .. } = i {
                    map.insert(dst.clone(), incoming[0].0.clone());
                    false
                } else {
                    true
                }
            });
            let succs: Vec<String> = moved.term.successors().iter().map(|s| s.to_string()).collect();
            let blk = &mut f.blocks[a];
            blk.instrs.extend(moved.instrs);
            blk.term = moved.term;
            f.blocks.remove(b);
            for s in succs {
                rename_phi_pred(f, &s, &b_label, &a_label);
            }
            substitute(f, &map);
            any = true;
            continue 'outer;
        }
        return any;
    }
}

/// Unreachable-block removal followed by chain merging.
pub fn simplify_cfg(f: &mut Function) -> bool {
    let a = remove_unreachable(f);
    let b = merge_chains(f);
    a || b
}

/// Rewrites uses of a value that now has several definitions, inserting phis
/// where control flow from different definitions meets.
///
/// `defs` maps a block label to the operand holding the value at the end of
/// that block. Call [`SsaUpdater::value_at_end`] for phi uses and
/// [`SsaUpdater::value_at_start`] for ordinary uses in blocks without a
/// definition.
pub struct SsaUpdater {
    ty: Ty,
    defs: HashMap<String, Operand>,
    at_end: HashMap<String, Operand>,
    pub inserted: Vec<(String, Instr)>,
}

impl SsaUpdater {
    pub fn new(ty: Ty, defs: HashMap<String, Operand>) -> SsaUpdater {
        SsaUpdater { ty, defs, at_end: HashMap::new(), inserted: Vec::new() }
    }

    pub fn value_at_end(&mut self, f: &Function, cfg: &Cfg, namer: &mut Namer, block: &str) -> Operand {
        if let Some(v) = self.defs.get(block) {
            return v.clone();
        }
        self.value_at_start(f, cfg, namer, block)
    }

    pub fn value_at_start(&mut self, f: &Function, cfg: &Cfg, namer: &mut Namer, block: &str) -> Operand {
        if let Some(v) = self.at_end.get(block) {
            return v.clone();
        }
        let b = cfg.idx(block).expect("block in cfg");
        let preds = cfg.unique_preds(b);
        match preds.len() {
            // Only reachable on paths without a definition; any value works.
            0 => Operand::Imm(0),
            1 => {
                let p = cfg.labels[preds[0]].clone();
                let v = self.value_at_end(f, cfg, namer, &p);
                self.at_end.insert(block.to_string(), v.clone());
                v
            }
            _ => {
                let dst = namer.reg();
                self.at_end.insert(block.to_string(), Operand::Reg(dst.clone()));
                let mut incoming = Vec::new();
                for p in preds {
                    let pl = cfg.labels[p].clone();
                    let v = self.value_at_end(f, cfg, namer, &pl);
                    incoming.push((v, pl));
                }
                self.inserted.push((block.to_string(), Instr::Phi { dst: dst.clone(), ty: self.ty, incoming }));
                Operand::Reg(dst)
            }
        }
    }

    /// Places the phis created so far at the head of their blocks.
    pub fn commit(&mut self, f: &mut Function) {
        for (label, phi) in self.inserted.drain(..) {
            let b = f.block_mut(&label).expect("block exists");
            b.instrs.insert(0, phi);
        }
    }
}

/// Function-wide map from register to (block index, instruction index).
pub fn def_sites(f: &Function) -> HashMap<String, (usize, usize)> {
    let mut m = HashMap::new();
    for (bi, b) in f.blocks.iter().enumerate() {
        for (ii, ins) in b.instrs.iter().enumerate() {
            if let Some(d) = ins.dst() {
                m.insert(d.to_string(), (bi, ii));
            }
        }
    }
    m
}

/// Number of uses of each register, counting terminators.
pub fn use_counts(f: &Function) -> HashMap<String, usize> {
    let mut m = HashMap::new();
    for b in &f.blocks {
        for ins in &b.instrs {
            for op in ins.operands() {
                if let Operand::Reg(r) = op {
                    *m.entry(r.clone()).or_insert(0) += 1;
                }
            }
        }
        for op in b.term.operands() {
            if let Operand::Reg(r) = op {
                *m.entry(r.clone()).or_insert(0) += 1;
            }
        }
    }
    m
}

/// Removes side-effect-free instructions whose result is never used.
pub fn remove_dead_code(f: &mut Function) -> bool {
    let mut any = false;
    loop {
        let uses = use_counts(f);
        let mut removed = false;
        for b in f.blocks.iter_mut() {
            let before = b.instrs.len();
            b.instrs.retain(|i| {
                let pure = matches!(
                    i,
                    Instr::Const { .. } | Instr::Bin { .. } | Instr::Icmp { .. } | Instr::Cast { .. } | Instr::Phi { .. } | Instr::Ctsel { .. }
                );
                !(pure && i.dst().is_some_and(|d| !uses.contains_key(d)))
            });
            removed |= b.instrs.len() != before;
        }
        if !removed {
            return any;
        }
        any = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{parse_module, validate};

    #[test]
    fn namer_skips_existing_names() {
        let m = parse_module("fn main() -> i32 { bb3: %t7 = const i32 1 ret %t7 }").unwrap();
        let mut n = Namer::new(&m.functions[0]);
        assert_eq!(n.reg(), "t8");
        assert_eq!(n.block(), "bb4");
    }

    #[test]
    fn split_then_merge_restores_block() {
        let mut m = parse_module(
            "fn main(c: i1) -> i32 { e: %a = const i32 1 %b = add i32 %a, 2 condbr %c, x, y  x: br z  y: br z  z: %r = phi i32 [%a, x], [%b, y] ret %r }",
        )
        .unwrap();
        let orig = m.clone();
        let f = &mut m.functions[0];
        let mut n = Namer::new(f);
        let nb = split_block(f, &mut n, "e", 1);
        assert_eq!(f.blocks[1].label, nb);
        assert!(validate(&m).is_empty());
        merge_chains(&mut m.functions[0]);
        assert_eq!(m, orig);
    }

    #[test]
    fn trivial_phis_disappear() {
        let mut m = parse_module(
            "fn main(c: i1) -> i32 { e: condbr %c, x, y  x: br z  y: br z  z: %r = phi i32 [5, x], [5, y] ret %r }",
        )
        .unwrap();
        assert!(remove_trivial_phis(&mut m.functions[0]));
        assert_eq!(m.functions[0].blocks[3].term, Terminator::Ret(Some(Operand::Imm(5))));
    }
}
