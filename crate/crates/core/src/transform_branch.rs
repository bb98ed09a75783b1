//! Removal of secret-dependent control flow.
//!
//! Sensitive branches are turned into straight-line code: both arms always
//! run, stores inside an arm write back `ctsel(cond, new, old)`, and the phis
//! where the arms meet become `ctsel`s. Loops that leave early on a secret
//! condition are first rewritten to run a fixed number of passes under a
//! guard flag, so that their exits become ordinary branches.

use std::collections::{HashMap, HashSet, VecDeque};
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ir::cfg::{control_region, Cfg, DomTree, PostDomTree};
use crate::ir::edit::{self, Namer};
use crate::ir::*;
use crate::sensitivity::{propagate_taint_fn, SensitivityMap};

/// A standardized conditional: `entry` ends in `condbr cond`, the THEN arm
/// runs from `then_blocks[0]` to its last element, likewise ELSE, and both
/// last elements jump straight to `exit`, which has no other predecessors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchRegion {
    pub entry: String,
    pub cond: Operand,
    pub then_blocks: Vec<String>,
    pub else_blocks: Vec<String>,
    pub exit: String,
}

impl BranchRegion {
    fn then_end(&self) -> &str {
        self.then_blocks.last().expect("arm is never empty")
    }

    fn else_end(&self) -> &str {
        self.else_blocks.last().expect("arm is never empty")
    }
}

/// What [`branch_repair_pass`] did.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BranchRepair {
    #[serde(skip)]
    pub function: Option<Function>,
    /// Branch sites replaced, as they were labelled when replaced.
    pub mitigated: Vec<Site>,
    /// Headers of loops rewritten to a fixed number of passes.
    pub loops_rewritten: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CtselMode {
    Bitwise,
    #[default]
    Native,
}

impl FromStr for CtselMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bitwise" => Ok(CtselMode::Bitwise),
            "native" => Ok(CtselMode::Native),
            _ => Err(Error::Config(format!("unknown ctsel mode `{s}` (expected bitwise or native)"))),
        }
    }
}

fn tainted_branches(f: &Function, s: &SensitivityMap) -> Vec<usize> {
    f.blocks
        .iter()
        .enumerate()
        .filter(|(_, b)| matches!(&b.term, Terminator::CondBr { cond, .. } if s.is_tainted(cond)))
        .map(|(i, _)| i)
        .collect()
}

/// First loop (outermost first) that can leave early on a secret condition.
fn find_sensitive_loop(f: &Function, s: &SensitivityMap, loops: &[LoopInfo], done: &HashSet<String>) -> Option<LoopInfo> {
    let cfg = Cfg::new(f);
    let pdt = PostDomTree::new(f, &cfg);
    let tainted = tainted_branches(f, s);
    for l in loops.iter().filter(|l| !done.contains(&l.header)) {
        let mut controlled: HashSet<usize> = HashSet::new();
        for &e in tainted.iter().filter(|&&e| l.contains(&cfg.labels[e])) {
            controlled.insert(e);
            controlled.extend(control_region(&cfg, &pdt, e));
        }
        let leaks = l.exits.iter().any(|(u, _)| cfg.idx(u).is_some_and(|ui| controlled.contains(&ui)));
        if leaks {
            return Some(l.clone());
        }
    }
    None
}

struct LoopVar {
    ty: Ty,
    g: String,
    o: String,
    init: Vec<(Operand, String)>,
    back: Vec<(Operand, String)>,
    exit: Vec<(Operand, String)>,
}

/// Rewrites `l` to run exactly `bound` passes. Each pass is guarded by an
/// `alive` flag that the former exit edges clear; values leaving the loop are
/// carried in phis until the last pass. Returns the new header too.
fn rewrite_loop(f: &Function, l: &LoopInfo, loops: &[LoopInfo]) -> Result<(Function, String)> {
    let err = |msg: &str| Error::transform(&f.name, &l.header, msg);
    let passes = l.bound.ok_or_else(|| Error::UnboundableLoop { function: f.name.clone(), header: l.header.clone() })?;
    let in_loop: HashSet<String> = l.body.iter().cloned().collect();
    if loops.iter().any(|o| o.header != l.header && in_loop.contains(&o.header)) {
        return Err(err("loop nested inside a secret-dependent loop"));
    }
    let exits = l.exit_blocks();
    if exits.len() != 1 {
        return Err(err("a secret-dependent loop must leave through a single block"));
    }
    for b in f.blocks.iter().filter(|b| in_loop.contains(&b.label)) {
        if matches!(b.term, Terminator::Ret(_)) {
            return Err(err("return inside a secret-dependent loop"));
        }
    }
    let x = exits[0].clone();
    let h = l.header.clone();
    let mut f = f.clone();
    let mut namer = Namer::new(&f);
    let cfg = Cfg::new(&f);
    let types = f.reg_types();
    let hi = cfg.idx(&h).expect("header");
    let outside: Vec<String> =
        cfg.unique_preds(hi).into_iter().map(|p| cfg.labels[p].clone()).filter(|p| !in_loop.contains(p)).collect();

    let (nh, sk, nl, nx) = (namer.block(), namer.block(), namer.block(), namer.block());
    let back_blocks: Vec<(String, String)> = l.latches.iter().map(|lt| (lt.clone(), namer.block())).collect();
    let mut exiting: Vec<String> = Vec::new();
    for (u, _) in &l.exits {
        if !exiting.contains(u) {
            exiting.push(u.clone());
        }
    }
    let exit_blocks: Vec<(String, String)> = exiting.iter().map(|u| (u.clone(), namer.block())).collect();

    let mut vars: Vec<LoopVar> = Vec::new();
    let mut in_subst: HashMap<String, Operand> = HashMap::new();
    let mut out_subst: HashMap<String, Operand> = HashMap::new();
    let zero_init = |outside: &[String]| outside.iter().map(|q| (Operand::Imm(0), q.clone())).collect::<Vec<_>>();

    // Header phis.
    let header = f.block(&h).expect("header").clone();
    for ins in header.phis() {
        let Instr::Phi { dst, ty, incoming } = ins else { continue };
        let (g, o) = (namer.reg(), namer.reg());
        let pick = |from: &str| incoming.iter().find(|(_, p)| p == from).map(|(v, _)| v.clone());
        let init = outside.iter().map(|q| (pick(q).unwrap_or(Operand::Imm(0)), q.clone())).collect();
        let back = back_blocks.iter().map(|(lt, be)| (pick(lt).unwrap_or(Operand::Imm(0)), be.clone())).collect();
        let exit = exit_blocks.iter().map(|(_, ex)| (Operand::reg(&g), ex.clone())).collect();
        in_subst.insert(dst.clone(), Operand::reg(&g));
        out_subst.insert(dst.clone(), Operand::reg(&o));
        vars.push(LoopVar { ty: *ty, g, o, init, back, exit });
    }

    // Values defined in the loop and used after it.
    let defined: HashSet<String> = f
        .blocks
        .iter()
        .filter(|b| in_loop.contains(&b.label))
        .flat_map(|b| b.instrs.iter().filter(|i| !i.is_phi() || b.label != h).filter_map(|i| i.dst().map(str::to_string)))
        .collect();
    let mut live_out: Vec<String> = Vec::new();
    for b in f.blocks.iter().filter(|b| !in_loop.contains(&b.label)) {
        let mut note = |o: &Operand| {
            if let Some(r) = o.as_reg() {
                if defined.contains(r) && !live_out.iter().any(|x| x == r) {
                    live_out.push(r.to_string());
                }
            }
        };
        for ins in &b.instrs {
            match ins {
                Instr::Phi { incoming, .. } => {
                    for (v, p) in incoming {
                        if !in_loop.contains(p) {
                            note(v);
                        }
                    }
                }
                _ => ins.operands().into_iter().for_each(&mut note),
            }
        }
        b.term.operands().into_iter().for_each(&mut note);
    }
    for r in &live_out {
        let (g, o) = (namer.reg(), namer.reg());
        let back = back_blocks.iter().map(|(_, be)| (Operand::reg(&g), be.clone())).collect();
        let exit = exit_blocks.iter().map(|(_, ex)| (Operand::reg(r), ex.clone())).collect();
        out_subst.insert(r.clone(), Operand::reg(&o));
        vars.push(LoopVar { ty: types[r], g, o, init: zero_init(&outside), back, exit });
    }

    // Phis in the exit block fed from inside the loop.
    let mut x_phis: Vec<(usize, String)> = Vec::new();
    let xb = f.block(&x).expect("exit").clone();
    for (k, ins) in xb.phis().enumerate() {
        let Instr::Phi { ty, incoming, .. } = ins else { continue };
        let (g, o) = (namer.reg(), namer.reg());
        let back = back_blocks.iter().map(|(_, be)| (Operand::reg(&g), be.clone())).collect();
        let exit = exit_blocks
            .iter()
            .map(|(u, ex)| {
                let v = incoming.iter().find(|(_, p)| p == u).map(|(v, _)| v.clone()).unwrap_or(Operand::Imm(0));
                (v, ex.clone())
            })
            .collect();
        x_phis.push((k, o.clone()));
        vars.push(LoopVar { ty: *ty, g, o, init: zero_init(&outside), back, exit });
    }

    let (b, bn, alive, alive_o, more) = (namer.reg(), namer.reg(), namer.reg(), namer.reg(), namer.reg());
    let mut nh_block = Block::new(&nh, Terminator::CondBr { cond: Operand::reg(&alive), t: h.clone(), f: sk.clone() });
    nh_block.bound = Some(passes);
    let mut inc: Vec<(Operand, String)> = outside.iter().map(|q| (Operand::Imm(0), q.clone())).collect();
    inc.push((Operand::reg(&bn), nl.clone()));
    nh_block.instrs.push(Instr::Phi { dst: b.clone(), ty: Ty::I32, incoming: inc });
    let mut inc: Vec<(Operand, String)> = outside.iter().map(|q| (Operand::Imm(1), q.clone())).collect();
    inc.push((Operand::reg(&alive_o), nl.clone()));
    nh_block.instrs.push(Instr::Phi { dst: alive.clone(), ty: Ty::I1, incoming: inc });
    for v in &vars {
        let mut inc = v.init.clone();
        inc.push((Operand::reg(&v.o), nl.clone()));
        nh_block.instrs.push(Instr::Phi { dst: v.g.clone(), ty: v.ty, incoming: inc });
    }

    let mut nl_block = Block::new(&nl, Terminator::CondBr { cond: Operand::reg(&more), t: nh.clone(), f: nx.clone() });
    let mut inc: Vec<(Operand, String)> = Vec::new();
    inc.extend(back_blocks.iter().map(|(_, be)| (Operand::Imm(1), be.clone())));
    inc.extend(exit_blocks.iter().map(|(_, ex)| (Operand::Imm(0), ex.clone())));
    inc.push((Operand::Imm(0), sk.clone()));
    nl_block.instrs.push(Instr::Phi { dst: alive_o, ty: Ty::I1, incoming: inc });
    for v in &vars {
        let mut inc: Vec<(Operand, String)> = v.back.clone();
        inc.extend(v.exit.iter().cloned());
        inc.push((Operand::reg(&v.g), sk.clone()));
        nl_block.instrs.push(Instr::Phi { dst: v.o.clone(), ty: v.ty, incoming: inc });
    }
    nl_block.instrs.push(Instr::Bin { dst: bn.clone(), op: BinOp::Add, ty: Ty::I32, a: Operand::reg(&b), b: Operand::Imm(1) });
    nl_block.instrs.push(Instr::Icmp {
        dst: more,
        pred: Pred::Ult,
        ty: Ty::I32,
        a: Operand::reg(&bn),
        b: Operand::Imm(passes as i64),
    });

    // Rewire the edges.
    for q in &outside {
        f.block_mut(q).expect("pred").term.retarget(&h, &nh);
    }
    for (lt, be) in &back_blocks {
        f.block_mut(lt).expect("latch").term.retarget(&h, be);
    }
    for (u, ex) in &exit_blocks {
        f.block_mut(u).expect("exiting block").term.retarget(&x, ex);
    }
    {
        let hb = f.block_mut(&h).expect("header");
        hb.bound = None;
        hb.instrs.retain(|i| !i.is_phi());
    }
    {
        let xb = f.block_mut(&x).expect("exit");
        let mut k = 0;
        for ins in xb.instrs.iter_mut() {
            let Instr::Phi { incoming, .. } = ins else { break };
            incoming.retain(|(_, p)| !in_loop.contains(p));
            if let Some((_, o)) = x_phis.iter().find(|(j, _)| *j == k) {
                incoming.push((Operand::reg(o), nx.clone()));
            }
            k += 1;
        }
    }

    // Loop-side values refer to the carried copies of the header phis.
    let subst_block = |blk: &mut Block, map: &HashMap<String, Operand>| {
        for ins in blk.instrs.iter_mut() {
            for o in ins.operands_mut() {
                if let Some(v) = o.as_reg().and_then(|r| map.get(r)) {
                    *o = v.clone();
                }
            }
        }
        for o in blk.term.operands_mut() {
            if let Some(v) = o.as_reg().and_then(|r| map.get(r)) {
                *o = v.clone();
            }
        }
    };
    subst_block(&mut nl_block, &in_subst);
    for blk in f.blocks.iter_mut() {
        if in_loop.contains(&blk.label) {
            subst_block(blk, &in_subst);
        } else {
            subst_block(blk, &out_subst);
        }
    }

    let hpos = f.block_index(&h).expect("header");
    f.blocks.insert(hpos, nh_block);
    let last = f.blocks.iter().rposition(|b| in_loop.contains(&b.label)).expect("loop body");
    let mut tail = vec![Block::new(&sk, Terminator::Br(nl.clone()))];
    for (_, be) in &back_blocks {
        tail.push(Block::new(be, Terminator::Br(nl.clone())));
    }
    for (_, ex) in &exit_blocks {
        tail.push(Block::new(ex, Terminator::Br(nl.clone())));
    }
    tail.push(nl_block);
    tail.push(Block::new(&nx, Terminator::Br(x.clone())));
    for (k, blk) in tail.into_iter().enumerate() {
        f.blocks.insert(last + 1 + k, blk);
    }
    Ok((f, nh))
}

/// Rewrites every loop that can exit on a secret condition into a loop that
/// always runs its static bound, with the former exits guarded by flags.
/// Returns the new function and the headers of the rewritten loops.
pub fn standardize(m: &Module, f: &Function, s: &SensitivityMap) -> Result<(Function, Vec<String>)> {
    let mut f = f.clone();
    let mut s = s.clone();
    let mut rewritten = Vec::new();
    // The fixed-pass replacements count with a tainted counter when they sit
    // under a secret branch, but never exit early.
    let mut fixed = HashSet::new();
    loop {
        let loops = find_loops(&f);
        let Some(l) = find_sensitive_loop(&f, &s, &loops, &fixed) else { break };
        let (g, nh) = rewrite_loop(&f, &l, &loops)?;
        f = g;
        fixed.insert(nh);
        rewritten.push(l.header);
        s = propagate_taint_fn(m, &f);
    }
    Ok((f, rewritten))
}

fn arm_blocks(cfg: &Cfg, start: usize, stop: usize) -> Vec<usize> {
    if start == stop {
        return Vec::new();
    }
    let mut seen = vec![false; cfg.len()];
    let mut order = vec![start];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    while let Some(b) = queue.pop_front() {
        for &s in &cfg.succs[b] {
            if s != stop && !seen[s] {
                seen[s] = true;
                order.push(s);
                queue.push_back(s);
            }
        }
    }
    order
}

/// Gives an arm a single closing block that ends in `br exit`, creating one
/// when the arm is empty or leaves through several edges.
fn close_arm(f: &mut Function, namer: &mut Namer, entry: &str, arm: &mut Vec<String>, exit: &str, then_side: bool) {
    if arm.is_empty() {
        let end = namer.block();
        if let Terminator::CondBr { t, f: e, .. } = &mut f.block_mut(entry).expect("entry").term {
            if then_side {
                *t = end.clone();
            } else {
                *e = end.clone();
            }
        }
        edit::rename_phi_pred(f, exit, entry, &end);
        let pos = f.block_index(entry).expect("entry") + 1;
        f.blocks.insert(pos, Block::new(&end, Terminator::Br(exit.to_string())));
        arm.push(end);
        return;
    }
    let leaving: Vec<String> =
        arm.iter().filter(|b| f.block(b).expect("arm").term.successors().contains(&exit)).cloned().collect();
    if leaving.len() == 1 && f.block(&leaving[0]).expect("arm").term == Terminator::Br(exit.to_string()) {
        let end = leaving[0].clone();
        arm.retain(|b| *b != end);
        arm.push(end);
        return;
    }
    let end = namer.block();
    let mut blk = Block::new(&end, Terminator::Br(exit.to_string()));
    let phis: Vec<Instr> = f.block(exit).expect("exit").phis().cloned().collect();
    let mut new_vals = Vec::new();
    for ins in &phis {
        let Instr::Phi { ty, incoming, .. } = ins else { continue };
        let from_arm: Vec<(Operand, String)> = incoming.iter().filter(|(_, p)| leaving.contains(p)).cloned().collect();
        if from_arm.len() == 1 {
            new_vals.push(from_arm[0].0.clone());
        } else {
            let r = namer.reg();
            blk.instrs.push(Instr::Phi { dst: r.clone(), ty: *ty, incoming: from_arm });
            new_vals.push(Operand::Reg(r));
        }
    }
    {
        let xb = f.block_mut(exit).expect("exit");
        for (ins, v) in xb.instrs.iter_mut().zip(new_vals) {
            if let Instr::Phi { incoming, .. } = ins {
                incoming.retain(|(_, p)| !leaving.contains(p));
                incoming.push((v, end.clone()));
            }
        }
    }
    for l in &leaving {
        f.block_mut(l).expect("arm").term.retarget(exit, &end);
    }
    let pos = f.block_index(exit).expect("exit");
    f.blocks.insert(pos, blk);
    arm.push(end);
}

/// Brings the conditional ending block `entry` into [`BranchRegion`] shape.
pub fn standardize_region(f: &Function, entry: &str) -> Result<(Function, BranchRegion)> {
    let err = |msg: &str| Error::transform(&f.name, entry, msg);
    let cfg = Cfg::new(f);
    let e = cfg.idx(entry).ok_or_else(|| err("no such block"))?;
    let Terminator::CondBr { cond, t, f: el } = &f.blocks[e].term else {
        return Err(err("block does not end in a conditional branch"));
    };
    if t == el {
        return Err(err("both arms lead to the same block"));
    }
    let pdt = PostDomTree::new(f, &cfg);
    let x = pdt.ipdom[e].ok_or_else(|| err("a branch arm leaves the function"))?;
    let (ti, ei) = (cfg.idx(t).expect("target"), cfg.idx(el).expect("target"));
    let then_arm = arm_blocks(&cfg, ti, x);
    let else_arm = arm_blocks(&cfg, ei, x);
    if then_arm.contains(&e) || else_arm.contains(&e) {
        return Err(err("a branch arm loops back to its condition"));
    }
    if then_arm.iter().any(|b| else_arm.contains(b)) {
        return Err(err("branch arms overlap"));
    }
    let dt = DomTree::new(&cfg);
    for arm in [&then_arm, &else_arm] {
        for &b in arm.iter() {
            for &p in &cfg.preds[b] {
                if p != e && !arm.contains(&p) {
                    return Err(err("branch region has a side entry"));
                }
                if arm.contains(&p) && dt.dominates(b, p) {
                    return Err(err("loop inside a secret-dependent region"));
                }
            }
            if f.blocks[b].instrs.iter().any(|i| matches!(i, Instr::Call { .. })) {
                return Err(err("call inside a secret-dependent region"));
            }
        }
    }

    let mut f = f.clone();
    let mut namer = Namer::new(&f);
    let cond = cond.clone();
    let x_label = cfg.labels[x].clone();
    let mut then_blocks: Vec<String> = then_arm.iter().map(|&b| cfg.labels[b].clone()).collect();
    let mut else_blocks: Vec<String> = else_arm.iter().map(|&b| cfg.labels[b].clone()).collect();
    close_arm(&mut f, &mut namer, entry, &mut then_blocks, &x_label, true);
    close_arm(&mut f, &mut namer, entry, &mut else_blocks, &x_label, false);
    let (t_end, e_end) = (then_blocks.last().unwrap().clone(), else_blocks.last().unwrap().clone());

    let cfg = Cfg::new(&f);
    let xi = cfg.idx(&x_label).expect("exit");
    let preds: Vec<String> = cfg.unique_preds(xi).into_iter().map(|p| cfg.labels[p].clone()).collect();
    let mut exit = x_label.clone();
    if preds.len() != 2 {
        // The merge point is shared with other paths: give the region its own.
        let x2 = namer.block();
        let mut blk = Block::new(&x2, Terminator::Br(x_label.clone()));
        let xb = f.block_mut(&x_label).expect("exit");
        for ins in xb.instrs.iter_mut() {
            let Instr::Phi { ty, incoming, .. } = ins else { break };
            let mine: Vec<(Operand, String)> =
                incoming.iter().filter(|(_, p)| *p == t_end || *p == e_end).cloned().collect();
            incoming.retain(|(_, p)| *p != t_end && *p != e_end);
            let r = namer.reg();
            blk.instrs.push(Instr::Phi { dst: r.clone(), ty: *ty, incoming: mine });
            incoming.push((Operand::Reg(r), x2.clone()));
        }
        f.block_mut(&t_end).unwrap().term.retarget(&x_label, &x2);
        f.block_mut(&e_end).unwrap().term.retarget(&x_label, &x2);
        let pos = f.block_index(&x_label).expect("exit");
        f.blocks.insert(pos, blk);
        exit = x2;
    }
    let region = BranchRegion { entry: entry.to_string(), cond, then_blocks, else_blocks, exit };
    Ok((f, region))
}

fn guard_stores(blk: &mut Block, namer: &mut Namer, cond: &Operand, then_side: bool, fname: &str) -> Result<()> {
    let mut out = Vec::with_capacity(blk.instrs.len());
    let pick = |new: Operand, old: Operand| if then_side { (new, old) } else { (old, new) };
    for ins in blk.instrs.drain(..) {
        match ins {
            Instr::Store { ty, mem, index, value, tag } => {
                let (l, s) = (namer.reg(), namer.reg());
                let (t, e) = pick(value, Operand::reg(&l));
                out.push(Instr::Load { dst: l, ty, mem: mem.clone(), index: index.clone(), tag: None });
                out.push(Instr::Ctsel { dst: s.clone(), ty, cond: cond.clone(), t, e });
                out.push(Instr::Store { ty, mem, index, value: Operand::Reg(s), tag });
            }
            Instr::StoreField { ty, mem, value } => {
                let (l, s) = (namer.reg(), namer.reg());
                let (t, e) = pick(value, Operand::reg(&l));
                out.push(Instr::LoadField { dst: l, ty, mem: mem.clone() });
                out.push(Instr::Ctsel { dst: s.clone(), ty, cond: cond.clone(), t, e });
                out.push(Instr::StoreField { ty, mem, value: Operand::Reg(s) });
            }
            Instr::Call { .. } => {
                return Err(Error::transform(fname, &blk.label, "call inside a secret-dependent region"));
            }
            other => out.push(other),
        }
    }
    blk.instrs = out;
    Ok(())
}

/// Linearizes a standardized region: THEN runs, then ELSE, then the exit.
pub fn mitigate_branch(f: &Function, r: &BranchRegion) -> Result<Function> {
    let mut f = f.clone();
    let mut namer = Namer::new(&f);
    for (blocks, then_side) in [(&r.then_blocks, true), (&r.else_blocks, false)] {
        for l in blocks {
            let name = f.name.clone();
            let blk = f.block_mut(l).ok_or_else(|| Error::transform(&name, l, "no such block"))?;
            guard_stores(blk, &mut namer, &r.cond, then_side, &name)?;
        }
    }
    let (t_end, e_end) = (r.then_end().to_string(), r.else_end().to_string());
    let name = f.name.clone();
    let xb = f.block_mut(&r.exit).ok_or_else(|| Error::transform(&name, &r.exit, "no such block"))?;
    for ins in xb.instrs.iter_mut() {
        let Instr::Phi { dst, ty, incoming } = ins else { break };
        let find = |p: &str| incoming.iter().find(|(_, q)| q == p).map(|(v, _)| v.clone());
        let (Some(t), Some(e)) = (find(&t_end), find(&e_end)) else {
            return Err(Error::transform(&name, &r.exit, "merge phi lacks an arm"));
        };
        *ins = Instr::Ctsel { dst: dst.clone(), ty: *ty, cond: r.cond.clone(), t, e };
    }
    f.block_mut(&r.entry).expect("entry").term = Terminator::Br(r.then_blocks[0].clone());
    f.block_mut(&t_end).expect("arm").term.retarget(&r.exit, &r.else_blocks[0]);
    edit::rename_phi_pred(&mut f, &r.else_blocks[0], &r.entry, &t_end);
    edit::remove_trivial_phis(&mut f);
    Ok(f)
}

/// Removes every branch on a secret condition from `f`, innermost first.
pub fn branch_repair_pass(m: &Module, f: &Function, s: &SensitivityMap) -> Result<BranchRepair> {
    let (mut f, loops_rewritten) = standardize(m, f, s)?;
    let mut mitigated = Vec::new();
    loop {
        let s = propagate_taint_fn(m, &f);
        let cfg = Cfg::new(&f);
        let dt = DomTree::new(&cfg);
        let Some(e) = tainted_branches(&f, &s).into_iter().max_by_key(|&b| (dt.depth(b), b)) else { break };
        let label = cfg.labels[e].clone();
        mitigated.push(Site::new(&label, f.blocks[e].instrs.len()));
        if let Terminator::CondBr { t, f: el, .. } = &f.blocks[e].term {
            if t == el {
                f.blocks[e].term = Terminator::Br(t.clone());
                edit::remove_trivial_phis(&mut f);
                edit::simplify_cfg(&mut f);
                continue;
            }
        }
        let (g, region) = standardize_region(&f, &label)?;
        f = mitigate_branch(&g, &region)?;
        edit::simplify_cfg(&mut f);
    }
    Ok(BranchRepair { function: Some(f), mitigated, loops_rewritten })
}

/// Runs [`branch_repair_pass`] on the entry function of an inlined module.
pub fn repair_branches(m: &Module) -> Result<(Module, BranchRepair)> {
    let f = m.entry_function().ok_or_else(|| Error::Config("module has no entry function".into()))?;
    let s = propagate_taint_fn(m, f);
    let mut rep = branch_repair_pass(m, f, &s)?;
    let mut out = m.clone();
    *out.entry_function_mut().expect("entry") = rep.function.take().expect("function");
    Ok((out, rep))
}

fn load_of(i: &Instr) -> Option<(&str, &MemRef, Option<&Operand>)> {
    match i {
        Instr::Load { dst, mem, index, .. } => Some((dst, mem, Some(index))),
        Instr::LoadField { dst, mem, .. } => Some((dst, mem, None)),
        _ => None,
    }
}

fn store_of(i: &Instr) -> Option<(&MemRef, Option<&Operand>, &Operand)> {
    match i {
        Instr::Store { mem, index, value, .. } => Some((mem, Some(index), value)),
        Instr::StoreField { mem, value, .. } => Some((mem, None, value)),
        _ => None,
    }
}

/// A guarded store `store A[i], ctsel(c, .., ..)` where one ctsel side is a
/// fresh load of `A[i]`.
struct Guarded {
    load: usize,
    sel: usize,
    store: usize,
    cond: Operand,
    /// True when the store keeps the old value unless `cond` holds.
    when_true: bool,
    value: Operand,
}

fn guarded_store(b: &Block, at: usize, uses: &HashMap<String, usize>) -> Option<Guarded> {
    let (mem, index, value) = store_of(&b.instrs[at])?;
    let s = value.as_reg()?;
    if uses.get(s) != Some(&1) {
        return None;
    }
    let sel = b.instrs[..at].iter().position(|i| i.dst() == Some(s))?;
    let Instr::Ctsel { cond, t, e, .. } = &b.instrs[sel] else { return None };
    let is_load = |o: &Operand| -> Option<usize> {
        let r = o.as_reg()?;
        let k = b.instrs[..sel].iter().position(|i| i.dst() == Some(r))?;
        let (_, lm, li) = load_of(&b.instrs[k])?;
        (lm == mem && li == index && uses.get(r) == Some(&1)).then_some(k)
    };
    let (load, when_true, value) = match (is_load(t), is_load(e)) {
        (None, Some(k)) => (k, true, t.clone()),
        (Some(k), None) => (k, false, e.clone()),
        _ => return None,
    };
    // Nothing else may touch the location between the load and the store.
    let touches = |i: &Instr| i.mem() == Some(mem);
    if b.instrs[load + 1..at].iter().any(touches) {
        return None;
    }
    Some(Guarded { load, sel, store: at, cond: cond.clone(), when_true, value })
}

/// Merges a pair of complementary guarded stores to the same location into
/// a single store of `ctsel(c, vT, vE)`, or of `vT` when both values agree.
pub fn fold_ctsel(f: &Function) -> Function {
    let mut f = f.clone();
    'again: loop {
        let uses = edit::use_counts(&f);
        for b in f.blocks.iter_mut() {
            for p1 in 0..b.instrs.len() {
                let Some(g1) = guarded_store(b, p1, &uses) else { continue };
                let (mem, index, _) = store_of(&b.instrs[p1]).unwrap();
                let (mem, index) = (mem.clone(), index.cloned());
                let Some(p2) = (p1 + 1..b.instrs.len()).find(|&k| store_of(&b.instrs[k]).is_some_and(|(m, i, _)| *m == mem && i.cloned() == index))
                else {
                    continue;
                };
                let Some(g2) = guarded_store(b, p2, &uses) else { continue };
                if g2.load < p1 || g2.cond != g1.cond || g2.when_true == g1.when_true {
                    continue;
                }
                if b.instrs[p1 + 1..g2.load].iter().any(|i| i.mem() == Some(&mem)) {
                    continue;
                }
                let (vt, ve) = if g1.when_true { (g1.value, g2.value) } else { (g2.value, g1.value) };
                let sel_dst = b.instrs[g2.sel].dst().unwrap().to_string();
                if vt == ve {
                    if let Some((_, _, v)) = store_of_mut(&mut b.instrs[g2.store]) {
                        *v = vt;
                    }
                    let mut dead = vec![g1.load, g1.sel, g1.store, g2.load, g2.sel];
                    dead.sort_unstable();
                    for k in dead.into_iter().rev() {
                        b.instrs.remove(k);
                    }
                } else {
                    let ty = b.instrs[g2.sel].dst_ty().unwrap();
                    b.instrs[g2.sel] = Instr::Ctsel { dst: sel_dst, ty, cond: g1.cond, t: vt, e: ve };
                    let mut dead = vec![g1.load, g1.sel, g1.store, g2.load];
                    dead.sort_unstable();
                    for k in dead.into_iter().rev() {
                        b.instrs.remove(k);
                    }
                }
                continue 'again;
            }
        }
        return f;
    }
}

fn store_of_mut(i: &mut Instr) -> Option<(&MemRef, Option<&Operand>, &mut Operand)> {
    match i {
        Instr::Store { mem, index, value, .. } => Some((mem, Some(index), value)),
        Instr::StoreField { mem, value, .. } => Some((mem, None, value)),
        _ => None,
    }
}

/// Lowers `ctsel` to masking arithmetic, or leaves it as a primitive.
pub fn lower_ctsel(f: &Function, mode: CtselMode) -> Function {
    let mut f = f.clone();
    if mode == CtselMode::Native {
        return f;
    }
    let mut namer = Namer::new(&f);
    for b in f.blocks.iter_mut() {
        let mut out = Vec::with_capacity(b.instrs.len());
        for ins in b.instrs.drain(..) {
            let Instr::Ctsel { dst, ty, cond, t, e } = ins else {
                out.push(ins);
                continue;
            };
            let c = if ty == Ty::I1 {
                cond
            } else {
                let w = namer.reg();
                out.push(Instr::Cast { dst: w.clone(), op: CastOp::Zext, from: Ty::I1, value: cond, to: ty });
                Operand::Reg(w)
            };
            let (c0, c1, a, bb) = (namer.reg(), namer.reg(), namer.reg(), namer.reg());
            let bin = |dst: &str, op: BinOp, a: Operand, b: Operand| Instr::Bin { dst: dst.to_string(), op, ty, a, b };
            out.push(bin(&c0, BinOp::Sub, c, Operand::Imm(1)));
            out.push(bin(&c1, BinOp::Xor, Operand::reg(&c0), Operand::Imm(-1)));
            out.push(bin(&a, BinOp::And, Operand::reg(&c0), e));
            out.push(bin(&bb, BinOp::And, Operand::reg(&c1), t));
            out.push(bin(&dst, BinOp::Or, Operand::reg(&a), Operand::reg(&bb)));
        }
        b.instrs = out;
    }
    f
}
