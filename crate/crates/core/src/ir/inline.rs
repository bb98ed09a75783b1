//! Mandatory inlining of every call.

use std::collections::HashMap;

use super::edit::{self, Namer};
use super::validate::find_recursion;
use super::*;
use crate::error::{Error, Result};

/// Copies of a set of blocks with fresh labels and registers.
pub(crate) struct Cloned {
    pub blocks: Vec<Block>,
    pub labels: HashMap<String, String>,
    pub regs: HashMap<String, String>,
}

/// Clones `blocks`, renaming every defined register and every label. Branch
/// targets and phi predecessors inside the set are redirected to the copies;
/// references to outside labels are left alone. `subst` rewrites operands that
/// refer to values outside the set (e.g. parameters).
pub(crate) fn clone_blocks(blocks: &[Block], namer: &mut Namer, subst: &HashMap<String, Operand>) -> Cloned {
    let mut labels = HashMap::new();
    let mut regs = HashMap::new();
    for b in blocks {
        labels.insert(b.label.clone(), namer.block());
        for i in &b.instrs {
            if let Some(d) = i.dst() {
                regs.insert(d.to_string(), namer.reg());
            }
        }
    }
    let map_op = |o: &mut Operand| {
        if let Operand::Reg(r) = o {
            if let Some(n) = regs.get(r.as_str()) {
                *r = n.clone();
            } else if let Some(v) = subst.get(r.as_str()) {
                *o = v.clone();
            }
        }
    };
    let mut out = Vec::with_capacity(blocks.len());
    for b in blocks {
        let mut nb = b.clone();
        nb.label = labels[&b.label].clone();
        for i in nb.instrs.iter_mut() {
            if let Some(d) = i.dst_mut() {
                *d = regs[d.as_str()].clone();
            }
            for o in i.operands_mut() {
                map_op(o);
            }
            if let Instr::Phi { incoming, .. } = i {
                for (_, p) in incoming.iter_mut() {
                    if let Some(n) = labels.get(p.as_str()) {
                        *p = n.clone();
                    }
                }
            }
        }
        for o in nb.term.operands_mut() {
            map_op(o);
        }
        for s in nb.term.successors_mut() {
            if let Some(n) = labels.get(s.as_str()) {
                *s = n.clone();
            }
        }
        out.push(nb);
    }
    Cloned { blocks: out, labels, regs }
}

fn find_call(f: &Function) -> Option<(usize, usize)> {
    for (bi, b) in f.blocks.iter().enumerate() {
        for (ii, i) in b.instrs.iter().enumerate() {
            if matches!(i, Instr::Call { .. }) {
                return Some((bi, ii));
            }
        }
    }
    None
}

fn inline_call(m: &Module, f: &mut Function, bi: usize, ii: usize) -> Result<()> {
    let Instr::Call { dst, ret, callee, args } = f.blocks[bi].instrs[ii].clone() else { unreachable!() };
    let g = m
        .function(&callee)
        .ok_or_else(|| Error::transform(&f.name, &f.blocks[bi].label, format!("unknown callee `@{callee}`")))?;
    let mut namer = Namer::new(f);
    let label = f.blocks[bi].label.clone();

    // Continuation gets the instructions after the call.
    let cont = edit::split_block(f, &mut namer, &label, ii + 1);
    f.blocks[bi].instrs.pop();

    let mut subst = HashMap::new();
    let mut mem_subst: HashMap<String, MemRef> = HashMap::new();
    for (p, a) in g.params.iter().zip(&args) {
        match a {
            CallArg::Value(v) => {
                subst.insert(p.name.clone(), v.clone());
            }
            CallArg::Mem(r) => {
                mem_subst.insert(p.name.clone(), r.clone());
            }
        }
    }
    let mut cloned = clone_blocks(&g.blocks, &mut namer, &subst);
    let mut returns: Vec<(Option<Operand>, String)> = Vec::new();
    for b in cloned.blocks.iter_mut() {
        for i in b.instrs.iter_mut() {
            if let Some(mem) = i.mem_mut() {
                if let MemBase::Param(p) = &mem.base {
                    if let Some(actual) = mem_subst.get(p) {
                        let field = mem.field.take().or_else(|| actual.field.clone());
                        *mem = MemRef { base: actual.base.clone(), field };
                    }
                }
            }
            if let Instr::Call { args, .. } = i {
                for a in args.iter_mut() {
                    if let CallArg::Mem(mem) = a {
                        if let MemBase::Param(p) = &mem.base {
                            if let Some(actual) = mem_subst.get(p) {
                                let field = mem.field.take().or_else(|| actual.field.clone());
                                *mem = MemRef { base: actual.base.clone(), field };
                            }
                        }
                    }
                }
            }
        }
        if let Terminator::Ret(v) = &b.term {
            returns.push((v.clone(), b.label.clone()));
            b.term = Terminator::Br(cont.clone());
        }
    }
    let entry_label = cloned.labels[&g.blocks[0].label].clone();
    f.blocks[bi].term = Terminator::Br(entry_label);
    for (k, b) in cloned.blocks.drain(..).enumerate() {
        f.blocks.insert(bi + 1 + k, b);
    }

    if let (Some(d), RetTy::Int(ty)) = (dst, ret) {
        let incoming: Vec<(Operand, String)> =
            returns.into_iter().map(|(v, b)| (v.unwrap_or(Operand::Imm(0)), b)).collect();
        let cb = f.block_mut(&cont).expect("continuation");
        cb.instrs.insert(0, Instr::Phi { dst: d, ty, incoming });
    }
    Ok(())
}

/// Inlines every call in every function. The result has no `call`
/// instructions; callee bodies are cloned with fresh names per call site.
pub fn inline_all(m: &Module) -> Result<Module> {
    if let Some(cycle) = find_recursion(m) {
        return Err(Error::Recursion(cycle.join(" -> ")));
    }
    let mut out = m.clone();
    for fi in 0..out.functions.len() {
        let mut f = out.functions[fi].clone();
        let mut changed = false;
        while let Some((bi, ii)) = find_call(&f) {
            inline_call(&out, &mut f, bi, ii)?;
            changed = true;
        }
        if changed {
            edit::remove_trivial_phis(&mut f);
            edit::simplify_cfg(&mut f);
        }
        out.functions[fi] = f;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{parse_module, validate};

    #[test]
    fn no_calls_is_identity() {
        let m = parse_module("fn main(a: i32) -> i32 { b0: %x = add i32 %a, 1 ret %x }").unwrap();
        assert_eq!(inline_all(&m).unwrap(), m);
    }

    #[test]
    fn two_sites_get_independent_copies() {
        let src = "global g: [i8; 4]
            fn h(p: ptr<i8,4>, v: i8) -> i8 { b0: %x = load i8 %p[%v] %y = add i8 %x, %v ret %y }
            fn main(a: i8) -> i8 { b0: %r1 = call i8 @h(@g, %a) %r2 = call i8 @h(@g, %r1) ret %r2 }";
        let m = parse_module(src).unwrap();
        let out = inline_all(&m).unwrap();
        assert!(validate(&out).is_empty(), "{:?}", validate(&out));
        let f = out.function("main").unwrap();
        assert_eq!(f.blocks.len(), 1);
        let loads = f.blocks[0].instrs.iter().filter(|i| matches!(i, Instr::Load { .. })).count();
        assert_eq!(loads, 2);
        assert!(f.blocks[0].instrs.iter().all(|i| !matches!(i, Instr::Call { .. })));
    }

    #[test]
    fn recursion_is_an_error() {
        let m = parse_module("fn main() -> void { b0: call void @main() ret }").unwrap();
        assert!(matches!(inline_all(&m), Err(Error::Recursion(_))));
    }
}
