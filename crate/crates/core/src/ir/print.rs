//! Pretty-printer producing text that [`super::parse_module`] reads back.

use std::fmt::Write;

use super::*;

fn op(o: &Operand) -> String {
    match o {
        Operand::Reg(r) => format!("%{r}"),
        Operand::Imm(v) => v.to_string(),
    }
}

fn ret_ty(r: RetTy) -> &'static str {
    match r {
        RetTy::Void => "void",
        RetTy::Int(t) => t.name(),
    }
}

fn field_ty(t: FieldTy) -> String {
    match t {
        FieldTy::Scalar(t) => t.name().to_string(),
        FieldTy::Array(t, n) => format!("[{t}; {n}]"),
    }
}

pub fn print_instr(i: &Instr) -> String {
    match i {
        Instr::Const { dst, ty, value } => format!("%{dst} = const {ty} {value}"),
        Instr::Bin { dst, op: o, ty, a, b } => format!("%{dst} = {} {ty} {}, {}", o.name(), op(a), op(b)),
        Instr::Icmp { dst, pred, ty, a, b } => format!("%{dst} = icmp {} {ty} {}, {}", pred.name(), op(a), op(b)),
        Instr::Cast { dst, op: c, from, value, to } => format!("%{dst} = {} {from} {} to {to}", c.name(), op(value)),
        Instr::Load { dst, ty, mem, index, .. } => format!("%{dst} = load {ty} {mem}[{}]", op(index)),
        Instr::Store { ty, mem, index, value, .. } => format!("store {ty} {mem}[{}], {}", op(index), op(value)),
        Instr::LoadField { dst, ty, mem } => format!("%{dst} = loadfield {ty} {mem}"),
        Instr::StoreField { ty, mem, value } => format!("storefield {ty} {mem}, {}", op(value)),
        Instr::Phi { dst, ty, incoming } => {
            let arms: Vec<String> = incoming.iter().map(|(v, b)| format!("[{}, {b}]", op(v))).collect();
            format!("%{dst} = phi {ty} {}", arms.join(", "))
        }
        Instr::Ctsel { dst, ty, cond, t, e } => format!("%{dst} = ctsel {ty} {}, {}, {}", op(cond), op(t), op(e)),
        Instr::Call { dst, ret, callee, args } => {
            let args: Vec<String> = args
                .iter()
                .map(|a| match a {
                    CallArg::Value(v) => op(v),
                    CallArg::Mem(m) => m.to_string(),
                })
                .collect();
            let lhs = dst.as_ref().map(|d| format!("%{d} = ")).unwrap_or_default();
            format!("{lhs}call {} @{callee}({})", ret_ty(*ret), args.join(", "))
        }
    }
}

pub fn print_terminator(t: &Terminator) -> String {
    match t {
        Terminator::Br(b) => format!("br {b}"),
        Terminator::CondBr { cond, t, f } => format!("condbr {}, {t}, {f}", op(cond)),
        Terminator::Ret(Some(v)) => format!("ret {}", op(v)),
        Terminator::Ret(None) => "ret".to_string(),
    }
}

pub fn print_function(f: &Function, is_entry: bool) -> String {
    let mut s = String::new();
    let params: Vec<String> = f
        .params
        .iter()
        .map(|p| {
            let ty = match &p.ty {
                ParamTy::Scalar(t) => t.name().to_string(),
                ParamTy::Ptr(t, n) => format!("ptr<{t},{n}>"),
                ParamTy::Rec(r) => format!("rec<{r}>"),
            };
            let secret = if p.secret { " secret" } else { "" };
            format!("{}: {ty}{secret}", p.name)
        })
        .collect();
    let entry = if is_entry { "entry " } else { "" };
    let _ = writeln!(s, "{entry}fn {}({}) -> {} {{", f.name, params.join(", "), ret_ty(f.ret));
    for b in &f.blocks {
        match b.bound {
            Some(n) => {
                let _ = writeln!(s, "{} bound={n}:", b.label);
            }
            None => {
                let _ = writeln!(s, "{}:", b.label);
            }
        }
        for i in &b.instrs {
            let _ = writeln!(s, "  {}", print_instr(i));
        }
        let _ = writeln!(s, "  {}", print_terminator(&b.term));
    }
    s.push_str("}\n");
    s
}

/// Renders a module as TIR text.
pub fn print_module(m: &Module) -> String {
    let mut s = String::new();
    for a in &m.arrays {
        let _ = write!(s, "global {}: [{}; {}]", a.name, a.elem, a.len);
        if let Some(init) = &a.init {
            s.push_str(" = [");
            for (i, v) in init.iter().enumerate() {
                if i > 0 {
                    s.push_str(if i % 16 == 0 { ",\n  " } else { ", " });
                }
                if *v >= 0 {
                    let _ = write!(s, "{v:#04x}");
                } else {
                    let _ = write!(s, "{v}");
                }
            }
            s.push(']');
        }
        s.push('\n');
    }
    for r in &m.records {
        let fields: Vec<String> = r.fields.iter().map(|f| format!("{}: {}", f.name, field_ty(f.ty))).collect();
        let _ = writeln!(s, "record {} {{ {} }}", r.name, fields.join(", "));
    }
    for f in &m.functions {
        if !s.is_empty() {
            s.push('\n');
        }
        s.push_str(&print_function(f, f.name == m.entry));
    }
    s
}
