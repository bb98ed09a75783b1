//! Peeling the first iteration off a loop.

use std::collections::{HashMap, HashSet};

use super::cfg::Cfg;
use super::edit::{Namer, SsaUpdater};
use super::inline::clone_blocks;
use super::*;
use crate::error::{Error, Result};

/// Clones one iteration of `l` in front of it. The original loop then runs the
/// remaining `bound - 1` iterations. Values defined in the loop and used after
/// it are merged with phis.
pub fn peel_first_iteration(f: &Function, l: &LoopInfo) -> Result<Function> {
    let bound = l.bound.ok_or_else(|| Error::UnboundableLoop { function: f.name.clone(), header: l.header.clone() })?;
    if bound < 2 {
        return Err(Error::transform(&f.name, &l.header, format!("trip bound {bound} is below 2")));
    }
    let mut f = f.clone();
    let mut namer = Namer::new(&f);
    let in_loop: HashSet<&str> = l.body.iter().map(|s| s.as_str()).collect();
    let body: Vec<Block> = f.blocks.iter().filter(|b| in_loop.contains(b.label.as_str())).cloned().collect();
    let mut cloned = clone_blocks(&body, &mut namer, &HashMap::new());
    let h = l.header.clone();
    let h2 = cloned.labels[&h].clone();
    let rename = |o: &Operand, regs: &HashMap<String, String>| match o {
        Operand::Reg(r) => regs.get(r).map(|n| Operand::Reg(n.clone())).unwrap_or_else(|| o.clone()),
        imm => imm.clone(),
    };

    let cfg = Cfg::new(&f);
    let hi = cfg.idx(&h).expect("header");
    let outside_preds: Vec<String> = cfg
        .unique_preds(hi)
        .into_iter()
        .map(|p| cfg.labels[p].clone())
        .filter(|p| !in_loop.contains(p.as_str()))
        .collect();
    let clone_latches: Vec<String> = l.latches.iter().map(|x| cloned.labels[x].clone()).collect();

    // The copied header only keeps its entries from outside the loop.
    let mut subst = HashMap::new();
    {
        let ch = cloned.blocks.iter_mut().find(|b| b.label == h2).expect("cloned header");
        ch.bound = None;
        ch.instrs.retain_mut(|i| {
            let Instr::Phi { dst, incoming, .. } = i else { return true };
            incoming.retain(|(_, p)| outside_preds.contains(p));
            if incoming.len() == 1 {
                subst.insert(dst.clone(), incoming[0].0.clone());
                false
            } else {
                true
            }
        });
    }
    for b in cloned.blocks.iter_mut() {
        b.term.retarget(&h2, &h);
        for i in b.instrs.iter_mut() {
            for o in i.operands_mut() {
                if let Some(v) = o.as_reg().and_then(|r| subst.get(r)) {
                    *o = v.clone();
                }
            }
        }
        for o in b.term.operands_mut() {
            if let Some(v) = o.as_reg().and_then(|r| subst.get(r)) {
                *o = v.clone();
            }
        }
    }
    let resolve = |o: &Operand, regs: &HashMap<String, String>| {
        let v = rename(o, regs);
        match v.as_reg().and_then(|r| subst.get(r)) {
            Some(s) => s.clone(),
            None => v,
        }
    };

    for p in &outside_preds {
        f.block_mut(p).expect("pred").term.retarget(&h, &h2);
    }
    // Original header phis now receive the peeled iteration's latch values.
    {
        let regs = &cloned.regs;
        let hb = f.block_mut(&h).expect("header");
        hb.bound = hb.bound.map(|b| b - 1);
        for i in hb.instrs.iter_mut() {
            let Instr::Phi { incoming, .. } = i else { continue };
            let mut from_latches = Vec::new();
            for (v, p) in incoming.iter() {
                if let Some(k) = l.latches.iter().position(|x| x == p) {
                    from_latches.push((resolve(v, regs), clone_latches[k].clone()));
                }
            }
            incoming.retain(|(_, p)| !outside_preds.contains(p));
            incoming.extend(from_latches);
        }
    }
    // Exit phis gain entries for the copied exiting blocks.
    for (x, y) in &l.exits {
        let x2 = cloned.labels[x].clone();
        let regs = &cloned.regs;
        let yb = f.block_mut(y).expect("exit");
        for i in yb.instrs.iter_mut() {
            let Instr::Phi { incoming, .. } = i else { continue };
            if incoming.iter().any(|(_, p)| *p == x2) {
                continue;
            }
            if let Some((v, _)) = incoming.iter().find(|(_, p)| p == x).cloned() {
                incoming.push((resolve(&v, regs), x2.clone()));
            }
        }
    }
    let pos = f.block_index(&h).expect("header");
    let clone_labels: HashSet<String> = cloned.blocks.iter().map(|b| b.label.clone()).collect();
    for (k, b) in cloned.blocks.drain(..).enumerate() {
        f.blocks.insert(pos + k, b);
    }

    repair_live_outs(&mut f, &mut namer, &in_loop, &clone_labels, &cloned.labels, &cloned.regs, &subst);
    Ok(f)
}

/// Rewrites uses outside the loop of values defined inside it, now that each
/// value has a second definition in the peeled copy.
fn repair_live_outs(
    f: &mut Function,
    namer: &mut Namer,
    in_loop: &HashSet<&str>,
    clones: &HashSet<String>,
    labels: &HashMap<String, String>,
    regs: &HashMap<String, String>,
    subst: &HashMap<String, Operand>,
) {
    let types = f.reg_types();
    let def_block: HashMap<String, String> = f
        .blocks
        .iter()
        .filter(|b| in_loop.contains(b.label.as_str()))
        .flat_map(|b| b.instrs.iter().filter_map(|i| i.dst()).map(|d| (d.to_string(), b.label.clone())))
        .collect();
    let outside = |l: &str| !in_loop.contains(l) && !clones.contains(l);

    let mut live_out: Vec<String> = Vec::new();
    for b in f.blocks.iter().filter(|b| outside(&b.label)) {
        let mut note = |r: &str| {
            if def_block.contains_key(r) && !live_out.iter().any(|x| x == r) {
                live_out.push(r.to_string());
            }
        };
        for i in &b.instrs {
            match i {
                Instr::Phi { incoming, .. } => {
                    for (v, p) in incoming {
                        if outside(p) {
                            if let Some(r) = v.as_reg() {
                                note(r);
                            }
                        }
                    }
                }
                _ => {
                    for o in i.operands() {
                        if let Some(r) = o.as_reg() {
                            note(r);
                        }
                    }
                }
            }
        }
        for o in b.term.operands() {
            if let Some(r) = o.as_reg() {
                note(r);
            }
        }
    }

    for r in live_out {
        let cfg = Cfg::new(f);
        let copy = regs.get(&r).map(|n| subst.get(n).cloned().unwrap_or_else(|| Operand::Reg(n.clone())));
        let Some(copy) = copy else { continue };
        let mut defs = HashMap::new();
        defs.insert(def_block[&r].clone(), Operand::Reg(r.clone()));
        defs.insert(labels[&def_block[&r]].clone(), copy);
        let mut up = SsaUpdater::new(types[&r], defs);
        let mut edits: Vec<(usize, usize, Option<usize>, Operand)> = Vec::new();
        for (bi, b) in f.blocks.iter().enumerate() {
            if !outside(&b.label) {
                continue;
            }
            for (ii, i) in b.instrs.iter().enumerate() {
                if let Instr::Phi { incoming, .. } = i {
                    for (k, (v, p)) in incoming.iter().enumerate() {
                        if v.as_reg() == Some(r.as_str()) && outside(p) {
                            let nv = up.value_at_end(f, &cfg, namer, p);
                            edits.push((bi, ii, Some(k), nv));
                        }
                    }
                } else if i.operands().iter().any(|o| o.as_reg() == Some(r.as_str())) {
                    let nv = up.value_at_start(f, &cfg, namer, &b.label);
                    edits.push((bi, ii, None, nv));
                }
            }
            if b.term.operands().iter().any(|o| o.as_reg() == Some(r.as_str())) {
                let nv = up.value_at_start(f, &cfg, namer, &b.label);
                edits.push((bi, usize::MAX, None, nv));
            }
        }
        for (bi, ii, k, nv) in edits {
            let b = &mut f.blocks[bi];
            if ii == usize::MAX {
                for o in b.term.operands_mut() {
                    if o.as_reg() == Some(r.as_str()) {
                        *o = nv.clone();
                    }
                }
                continue;
            }
            match (k, &mut b.instrs[ii]) {
                (Some(k), Instr::Phi { incoming, .. }) => incoming[k].0 = nv,
                (_, ins) => {
                    for o in ins.operands_mut() {
                        if o.as_reg() == Some(r.as_str()) {
                            *o = nv.clone();
                        }
                    }
                }
            }
        }
        up.commit(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{find_loops, parse_module, validate};

    const LOOP16: &str = "global block: [i8; 16]
        fn main() -> i8 {
        e: br h
        h: %i = phi i32 [0, e], [%n, h]
           %v = trunc i32 %i to i8
           store i8 @block[%i], %v
           %n = add i32 %i, 1
           %c = icmp ult i32 %n, 16
           condbr %c, h, x
        x: ret %v }";

    #[test]
    fn peeled_loop_runs_one_fewer_iteration() {
        let m = parse_module(LOOP16).unwrap();
        let f = &m.functions[0];
        let l = &find_loops(f)[0];
        let g = peel_first_iteration(f, l).unwrap();
        let mut m2 = m.clone();
        m2.functions[0] = g.clone();
        assert!(validate(&m2).is_empty(), "{:?}\n{}", validate(&m2), crate::ir::print_module(&m2));
        let ls = find_loops(&g);
        assert_eq!(ls.len(), 1);
        assert_eq!(ls[0].bound, Some(15));
        // The peeled copy stores to block[0] with a constant index.
        assert!(g.blocks[1].instrs.iter().any(|i| matches!(i, Instr::Store { index: Operand::Imm(0), .. })));
    }

    #[test]
    fn unbounded_loop_is_rejected() {
        let m = parse_module(
            "fn main(k: i32) -> void { e: br h  h: %i = phi i32 [0, e], [%n, h] %n = add i32 %i, 1 %c = icmp ult i32 %n, %k condbr %c, h, x  x: ret }",
        )
        .unwrap();
        let f = &m.functions[0];
        let l = &find_loops(f)[0];
        assert!(matches!(peel_first_iteration(f, l), Err(Error::UnboundableLoop { .. })));
    }
}
