//! TIR: a small SSA intermediate representation.
//!
//! A [`Module`] holds global arrays, global records and functions. Functions are
//! lists of basic blocks; every block carries its instructions and exactly one
//! terminator. Registers and block labels are plain strings, which keeps the
//! textual form and the in-memory form in one-to-one correspondence.

pub mod cfg;
pub mod edit;
pub mod inline;
pub mod loops;
pub mod parse;
pub mod peel;
pub mod print;
pub mod validate;

use std::fmt;

pub use cfg::{Cfg, DomTree, PostDomTree};
pub use inline::inline_all;
pub use loops::{find_loops, LoopInfo};
pub use parse::parse_module;
pub use peel::peel_first_iteration;
pub use print::print_module;
pub use validate::{validate, Diagnostic};

/// Integer widths supported by the IR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Ty {
    I1,
    I8,
    I16,
    I32,
    I64,
}

impl Ty {
    pub fn bits(self) -> u32 {
        match self {
            Ty::I1 => 1,
            Ty::I8 => 8,
            Ty::I16 => 16,
            Ty::I32 => 32,
            Ty::I64 => 64,
        }
    }

    /// Storage size in bytes when the type is an array element or record field.
    pub fn bytes(self) -> u64 {
        match self {
            Ty::I1 | Ty::I8 => 1,
            Ty::I16 => 2,
            Ty::I32 => 4,
            Ty::I64 => 8,
        }
    }

    pub fn mask(self) -> u64 {
        match self {
            Ty::I64 => u64::MAX,
            t => (1u64 << t.bits()) - 1,
        }
    }

    /// Truncates a raw word to this width.
    pub fn wrap(self, v: u64) -> u64 {
        v & self.mask()
    }

    /// Sign-extends a width-masked value to a full i64.
    pub fn signed(self, v: u64) -> i64 {
        let bits = self.bits();
        if bits == 64 {
            v as i64
        } else {
            let shift = 64 - bits;
            ((v << shift) as i64) >> shift
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ty::I1 => "i1",
            Ty::I8 => "i8",
            Ty::I16 => "i16",
            Ty::I32 => "i32",
            Ty::I64 => "i64",
        }
    }

    pub fn from_name(s: &str) -> Option<Ty> {
        Some(match s {
            "i1" => Ty::I1,
            "i8" => Ty::I8,
            "i16" => Ty::I16,
            "i32" => Ty::I32,
            "i64" => Ty::I64,
            _ => return None,
        })
    }
}

impl fmt::Display for Ty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalArray {
    pub name: String,
    pub elem: Ty,
    pub len: u64,
    pub init: Option<Vec<i64>>,
}

impl GlobalArray {
    pub fn byte_size(&self) -> u64 {
        self.elem.bytes() * self.len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldTy {
    Scalar(Ty),
    Array(Ty, u64),
}

impl FieldTy {
    pub fn elem(self) -> Ty {
        match self {
            FieldTy::Scalar(t) | FieldTy::Array(t, _) => t,
        }
    }

    pub fn byte_size(self) -> u64 {
        match self {
            FieldTy::Scalar(t) => t.bytes(),
            FieldTy::Array(t, n) => t.bytes() * n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordField {
    pub name: String,
    pub ty: FieldTy,
}

/// A global record. It is both a layout (usable as `rec<name>` parameter type)
/// and a statically allocated instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalRecord {
    pub name: String,
    pub fields: Vec<RecordField>,
}

impl GlobalRecord {
    pub fn field(&self, name: &str) -> Option<&RecordField> {
        self.fields.iter().find(|f| f.name == name)
    }

    /// Byte offset of every field, each naturally aligned to its element size.
    pub fn layout(&self) -> Vec<u64> {
        let mut off = 0u64;
        self.fields
            .iter()
            .map(|f| {
                let align = f.ty.elem().bytes();
                off = off.div_ceil(align) * align;
                let at = off;
                off += f.ty.byte_size();
                at
            })
            .collect()
    }

    pub fn byte_size(&self) -> u64 {
        let layout = self.layout();
        match (layout.last(), self.fields.last()) {
            (Some(off), Some(f)) => off + f.ty.byte_size(),
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParamTy {
    Scalar(Ty),
    /// Reference to an array of `len` elements.
    Ptr(Ty, u64),
    /// Reference to a record with the layout of the named global record.
    Rec(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Param {
    pub name: String,
    pub ty: ParamTy,
    pub secret: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetTy {
    Void,
    Int(Ty),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Operand {
    Reg(String),
    Imm(i64),
}

impl Operand {
    pub fn reg(name: impl Into<String>) -> Self {
        Operand::Reg(name.into())
    }

    pub fn as_reg(&self) -> Option<&str> {
        match self {
            Operand::Reg(r) => Some(r),
            Operand::Imm(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MemBase {
    Global(String),
    Param(String),
}

impl MemBase {
    pub fn name(&self) -> &str {
        match self {
            MemBase::Global(n) | MemBase::Param(n) => n,
        }
    }
}

/// An addressable memory object: an array (global or pointer parameter), or a
/// field of a record (global or record parameter).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MemRef {
    pub base: MemBase,
    pub field: Option<String>,
}

impl MemRef {
    pub fn global(name: impl Into<String>) -> Self {
        MemRef { base: MemBase::Global(name.into()), field: None }
    }

    pub fn param(name: impl Into<String>) -> Self {
        MemRef { base: MemBase::Param(name.into()), field: None }
    }

    pub fn with_field(mut self, field: impl Into<String>) -> Self {
        self.field = Some(field.into());
        self
    }
}

impl fmt::Display for MemRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.base {
            MemBase::Global(n) => write!(f, "@{n}")?,
            MemBase::Param(n) => write!(f, "%{n}")?,
        }
        if let Some(field) = &self.field {
            write!(f, ".{field}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    And,
    Or,
    Xor,
    Shl,
    Lshr,
}

impl BinOp {
    pub const ALL: [BinOp; 8] = [
        BinOp::Add,
        BinOp::Sub,
        BinOp::Mul,
        BinOp::And,
        BinOp::Or,
        BinOp::Xor,
        BinOp::Shl,
        BinOp::Lshr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::And => "and",
            BinOp::Or => "or",
            BinOp::Xor => "xor",
            BinOp::Shl => "shl",
            BinOp::Lshr => "lshr",
        }
    }

    /// Evaluates on width-masked operands; shifts by at least the width yield 0.
    pub fn eval(self, ty: Ty, a: u64, b: u64) -> u64 {
        let r = match self {
            BinOp::Add => a.wrapping_add(b),
            BinOp::Sub => a.wrapping_sub(b),
            BinOp::Mul => a.wrapping_mul(b),
            BinOp::And => a & b,
            BinOp::Or => a | b,
            BinOp::Xor => a ^ b,
            BinOp::Shl => {
                if b >= ty.bits() as u64 {
                    0
                } else {
                    a << b
                }
            }
            BinOp::Lshr => {
                if b >= ty.bits() as u64 {
                    0
                } else {
                    a >> b
                }
            }
        };
        ty.wrap(r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pred {
    Eq,
    Ne,
    Ult,
    Slt,
    Ule,
    Sle,
}

impl Pred {
    pub const ALL: [Pred; 6] = [Pred::Eq, Pred::Ne, Pred::Ult, Pred::Slt, Pred::Ule, Pred::Sle];

    pub fn name(self) -> &'static str {
        match self {
            Pred::Eq => "eq",
            Pred::Ne => "ne",
            Pred::Ult => "ult",
            Pred::Slt => "slt",
            Pred::Ule => "ule",
            Pred::Sle => "sle",
        }
    }

    pub fn eval(self, ty: Ty, a: u64, b: u64) -> bool {
        match self {
            Pred::Eq => a == b,
            Pred::Ne => a != b,
            Pred::Ult => a < b,
            Pred::Ule => a <= b,
            Pred::Slt => ty.signed(a) < ty.signed(b),
            Pred::Sle => ty.signed(a) <= ty.signed(b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CastOp {
    Zext,
    Sext,
    Trunc,
}

impl CastOp {
    pub fn name(self) -> &'static str {
        match self {
            CastOp::Zext => "zext",
            CastOp::Sext => "sext",
            CastOp::Trunc => "trunc",
        }
    }

    pub fn eval(self, from: Ty, to: Ty, v: u64) -> u64 {
        match self {
            CastOp::Zext | CastOp::Trunc => to.wrap(v),
            CastOp::Sext => to.wrap(from.signed(v) as u64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CallArg {
    Value(Operand),
    Mem(MemRef),
}

/// Non-terminator instructions.
///
/// `Load` and `Store` carry a `tag` used by mitigation passes to follow an
/// access through cloning; it is never printed and parsing always yields
/// `None`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Instr {
    Const { dst: String, ty: Ty, value: i64 },
    Bin { dst: String, op: BinOp, ty: Ty, a: Operand, b: Operand },
    Icmp { dst: String, pred: Pred, ty: Ty, a: Operand, b: Operand },
    Cast { dst: String, op: CastOp, from: Ty, value: Operand, to: Ty },
    Load { dst: String, ty: Ty, mem: MemRef, index: Operand, tag: Option<u32> },
    Store { ty: Ty, mem: MemRef, index: Operand, value: Operand, tag: Option<u32> },
    LoadField { dst: String, ty: Ty, mem: MemRef },
    StoreField { ty: Ty, mem: MemRef, value: Operand },
    Phi { dst: String, ty: Ty, incoming: Vec<(Operand, String)> },
    Ctsel { dst: String, ty: Ty, cond: Operand, t: Operand, e: Operand },
    Call { dst: Option<String>, ret: RetTy, callee: String, args: Vec<CallArg> },
}

impl Instr {
    pub fn dst(&self) -> Option<&str> {
        match self {
            Instr::Const { dst, .. }
            | Instr::Bin { dst, .. }
            | Instr::Icmp { dst, .. }
            | Instr::Cast { dst, .. }
            | Instr::Load { dst, .. }
            | Instr::LoadField { dst, .. }
            | Instr::Phi { dst, .. }
            | Instr::Ctsel { dst, .. } => Some(dst),
            Instr::Call { dst, .. } => dst.as_deref(),
            Instr::Store { .. } | Instr::StoreField { .. } => None,
        }
    }

    pub fn dst_mut(&mut self) -> Option<&mut String> {
        match self {
            Instr::Const { dst, .. }
            | Instr::Bin { dst, .. }
            | Instr::Icmp { dst, .. }
            | Instr::Cast { dst, .. }
            | Instr::Load { dst, .. }
            | Instr::LoadField { dst, .. }
            | Instr::Phi { dst, .. }
            | Instr::Ctsel { dst, .. } => Some(dst),
            Instr::Call { dst, .. } => dst.as_mut(),
            Instr::Store { .. } | Instr::StoreField { .. } => None,
        }
    }

    /// Type of the defined register, if any.
    pub fn dst_ty(&self) -> Option<Ty> {
        match self {
            Instr::Const { ty, .. }
            | Instr::Bin { ty, .. }
            | Instr::Load { ty, .. }
            | Instr::LoadField { ty, .. }
            | Instr::Phi { ty, .. }
            | Instr::Ctsel { ty, .. } => Some(*ty),
            Instr::Icmp { .. } => Some(Ty::I1),
            Instr::Cast { to, .. } => Some(*to),
            Instr::Call { ret: RetTy::Int(t), dst: Some(_), .. } => Some(*t),
            _ => None,
        }
    }

    /// Value operands, in a fixed order. Phi incoming values are included.
    pub fn operands(&self) -> Vec<&Operand> {
        match self {
            Instr::Const { .. } | Instr::LoadField { .. } => vec![],
            Instr::Bin { a, b, .. } | Instr::Icmp { a, b, .. } => vec![a, b],
            Instr::Cast { value, .. } | Instr::StoreField { value, .. } => vec![value],
            Instr::Load { index, .. } => vec![index],
            Instr::Store { index, value, .. } => vec![index, value],
            Instr::Phi { incoming, .. } => incoming.iter().map(|(v, _)| v).collect(),
            Instr::Ctsel { cond, t, e, .. } => vec![cond, t, e],
            Instr::Call { args, .. } => args
                .iter()
                .filter_map(|a| match a {
                    CallArg::Value(v) => Some(v),
                    CallArg::Mem(_) => None,
                })
                .collect(),
        }
    }

    pub fn operands_mut(&mut self) -> Vec<&mut Operand> {
        match self {
            Instr::Const { .. } | Instr::LoadField { .. } => vec![],
            Instr::Bin { a, b, .. } | Instr::Icmp { a, b, .. } => vec![a, b],
            Instr::Cast { value, .. } | Instr::StoreField { value, .. } => vec![value],
            Instr::Load { index, .. } => vec![index],
            Instr::Store { index, value, .. } => vec![index, value],
            Instr::Phi { incoming, .. } => incoming.iter_mut().map(|(v, _)| v).collect(),
            Instr::Ctsel { cond, t, e, .. } => vec![cond, t, e],
            Instr::Call { args, .. } => args
                .iter_mut()
                .filter_map(|a| match a {
                    CallArg::Value(v) => Some(v),
                    CallArg::Mem(_) => None,
                })
                .collect(),
        }
    }

    pub fn mem(&self) -> Option<&MemRef> {
        match self {
            Instr::Load { mem, .. }
            | Instr::Store { mem, .. }
            | Instr::LoadField { mem, .. }
            | Instr::StoreField { mem, .. } => Some(mem),
            _ => None,
        }
    }

    pub fn mem_mut(&mut self) -> Option<&mut MemRef> {
        match self {
            Instr::Load { mem, .. }
            | Instr::Store { mem, .. }
            | Instr::LoadField { mem, .. }
            | Instr::StoreField { mem, .. } => Some(mem),
            _ => None,
        }
    }

    pub fn is_phi(&self) -> bool {
        matches!(self, Instr::Phi { .. })
    }

    /// True for instructions that go through the data cache.
    pub fn is_memory_access(&self) -> bool {
        self.mem().is_some()
    }

    pub fn opcode(&self) -> &'static str {
        match self {
            Instr::Const { .. } => "const",
            Instr::Bin { op, .. } => op.name(),
            Instr::Icmp { .. } => "icmp",
            Instr::Cast { op, .. } => op.name(),
            Instr::Load { .. } => "load",
            Instr::Store { .. } => "store",
            Instr::LoadField { .. } => "loadfield",
            Instr::StoreField { .. } => "storefield",
            Instr::Phi { .. } => "phi",
            Instr::Ctsel { .. } => "ctsel",
            Instr::Call { .. } => "call",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Terminator {
    Br(String),
    CondBr { cond: Operand, t: String, f: String },
    Ret(Option<Operand>),
}

impl Terminator {
    pub fn successors(&self) -> Vec<&str> {
        match self {
            Terminator::Br(t) => vec![t],
            Terminator::CondBr { t, f, .. } => vec![t, f],
            Terminator::Ret(_) => vec![],
        }
    }

    pub fn successors_mut(&mut self) -> Vec<&mut String> {
        match self {
            Terminator::Br(t) => vec![t],
            Terminator::CondBr { t, f, .. } => vec![t, f],
            Terminator::Ret(_) => vec![],
        }
    }

    pub fn operands(&self) -> Vec<&Operand> {
        match self {
            Terminator::CondBr { cond, .. } => vec![cond],
            Terminator::Ret(Some(v)) => vec![v],
            _ => vec![],
        }
    }

    pub fn operands_mut(&mut self) -> Vec<&mut Operand> {
        match self {
            Terminator::CondBr { cond, .. } => vec![cond],
            Terminator::Ret(Some(v)) => vec![v],
            _ => vec![],
        }
    }

    /// Replaces every edge to `from` with an edge to `to`.
    pub fn retarget(&mut self, from: &str, to: &str) {
        for s in self.successors_mut() {
            if s == from {
                *s = to.to_string();
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub label: String,
    /// Declared maximum number of times this block executes per entry, when it
    /// heads a loop (`bb1 bound=32:` in text).
    pub bound: Option<u64>,
    pub instrs: Vec<Instr>,
    pub term: Terminator,
}

impl Block {
    pub fn new(label: impl Into<String>, term: Terminator) -> Self {
        Block { label: label.into(), bound: None, instrs: Vec::new(), term }
    }

    pub fn phis(&self) -> impl Iterator<Item = &Instr> {
        self.instrs.iter().take_while(|i| i.is_phi())
    }

    pub fn phi_count(&self) -> usize {
        self.instrs.iter().take_while(|i| i.is_phi()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Function {
    pub name: String,
    pub params: Vec<Param>,
    pub ret: RetTy,
    pub blocks: Vec<Block>,
}

impl Function {
    pub fn block(&self, label: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.label == label)
    }

    pub fn block_mut(&mut self, label: &str) -> Option<&mut Block> {
        self.blocks.iter_mut().find(|b| b.label == label)
    }

    pub fn block_index(&self, label: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.label == label)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Every register defined in the function (parameters included), with its type.
    pub fn reg_types(&self) -> std::collections::HashMap<String, Ty> {
        let mut m = std::collections::HashMap::new();
        for p in &self.params {
            if let ParamTy::Scalar(t) = p.ty {
                m.insert(p.name.clone(), t);
            }
        }
        for b in &self.blocks {
            for i in &b.instrs {
                if let (Some(d), Some(t)) = (i.dst(), i.dst_ty()) {
                    m.insert(d.to_string(), t);
                }
            }
        }
        m
    }

    /// Number of non-terminator instructions plus terminators.
    pub fn instr_count(&self) -> usize {
        self.blocks.iter().map(|b| b.instrs.len() + 1).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Module {
    pub arrays: Vec<GlobalArray>,
    pub records: Vec<GlobalRecord>,
    pub functions: Vec<Function>,
    pub entry: String,
}

impl Module {
    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn function_mut(&mut self, name: &str) -> Option<&mut Function> {
        self.functions.iter_mut().find(|f| f.name == name)
    }

    pub fn entry_function(&self) -> Option<&Function> {
        self.function(&self.entry)
    }

    pub fn entry_function_mut(&mut self) -> Option<&mut Function> {
        let e = self.entry.clone();
        self.function_mut(&e)
    }

    pub fn array(&self, name: &str) -> Option<&GlobalArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn record(&self, name: &str) -> Option<&GlobalRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    /// Element type and length of the array designated by `mem` inside `f`.
    pub fn array_shape(&self, f: &Function, mem: &MemRef) -> Option<(Ty, u64)> {
        match (&mem.base, &mem.field) {
            (MemBase::Global(g), None) => self.array(g).map(|a| (a.elem, a.len)),
            (MemBase::Param(p), None) => match &f.param(p)?.ty {
                ParamTy::Ptr(t, n) => Some((*t, *n)),
                _ => None,
            },
            (base, Some(field)) => match self.record_layout_of(f, base)?.field(field)?.ty {
                FieldTy::Array(t, n) => Some((t, n)),
                FieldTy::Scalar(_) => None,
            },
        }
    }

    /// Type of the scalar record field designated by `mem` inside `f`.
    pub fn field_scalar(&self, f: &Function, mem: &MemRef) -> Option<Ty> {
        let field = mem.field.as_ref()?;
        match self.record_layout_of(f, &mem.base)?.field(field)?.ty {
            FieldTy::Scalar(t) => Some(t),
            FieldTy::Array(..) => None,
        }
    }

    /// The record layout behind a memory base (a global record or a `rec<..>` param).
    pub fn record_layout_of(&self, f: &Function, base: &MemBase) -> Option<&GlobalRecord> {
        match base {
            MemBase::Global(g) => self.record(g),
            MemBase::Param(p) => match &f.param(p)?.ty {
                ParamTy::Rec(r) => self.record(r),
                _ => None,
            },
        }
    }
}

/// A program point: instruction `index` of block `block`. The terminator of a
/// block is addressed with `index == instrs.len()`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site {
    pub block: String,
    pub index: usize,
}

impl Site {
    pub fn new(block: impl Into<String>, index: usize) -> Site {
        Site { block: block.into(), index }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.block, self.index)
    }
}

impl serde::Serialize for Site {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl serde::Serialize for MemRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}
