//! Recursive-descent parser for the TIR text format.
//!
//! Parsing is purely syntactic: names are not resolved and types are not
//! checked here. Run [`super::validate`] on the result for that.

use super::*;
use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.line, self.col, self.message)
    }
}

impl std::error::Error for ParseError {}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Reg(String),
    Global(String),
    Int(i64),
    Punct(char),
    Arrow,
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "`{s}`"),
            Tok::Reg(s) => write!(f, "`%{s}`"),
            Tok::Global(s) => write!(f, "`@{s}`"),
            Tok::Int(v) => write!(f, "`{v}`"),
            Tok::Punct(c) => write!(f, "`{c}`"),
            Tok::Arrow => f.write_str("`->`"),
            Tok::Eof => f.write_str("end of input"),
        }
    }
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    line: usize,
    col: usize,
}

fn is_name_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

fn lex(src: &str) -> Result<Vec<Spanned>, ParseError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out: Vec<Spanned> = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    let mut bracket_depth = 0i32;
    let err = |line, col, message: String| ParseError { line, col, message };

    while i < chars.len() {
        let c = chars[i];
        let (tl, tc) = (line, col);
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        if c == ';' {
            // `[i8; 256]` uses `;` as a separator; everywhere else it opens a comment.
            let after_type = matches!(out.last(), Some(Spanned { tok: Tok::Ident(s), .. }) if Ty::from_name(s).is_some());
            if bracket_depth > 0 && after_type {
                out.push(Spanned { tok: Tok::Punct(';'), line: tl, col: tc });
                i += 1;
                col += 1;
                continue;
            }
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        if c == '-' && chars.get(i + 1) == Some(&'>') {
            out.push(Spanned { tok: Tok::Arrow, line: tl, col: tc });
            i += 2;
            col += 2;
            continue;
        }
        if c.is_ascii_digit() || (c == '-' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = i;
            if c == '-' {
                i += 1;
            }
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let text: String = chars[start..i].iter().collect();
            col += i - start;
            let (neg, body) = match text.strip_prefix('-') {
                Some(b) => (true, b),
                None => (false, text.as_str()),
            };
            let parsed = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
                u64::from_str_radix(hex, 16).ok()
            } else {
                body.parse::<u64>().ok()
            };
            let v = parsed.ok_or_else(|| err(tl, tc, format!("malformed integer literal `{text}`")))?;
            let v = if neg {
                if v > i64::MAX as u64 + 1 {
                    return Err(err(tl, tc, format!("integer literal `{text}` out of range")));
                }
                (v as i64).wrapping_neg()
            } else {
                v as i64
            };
            out.push(Spanned { tok: Tok::Int(v), line: tl, col: tc });
            continue;
        }
        if c == '%' || c == '@' {
            let start = i + 1;
            let mut j = start;
            while j < chars.len() && is_name_char(chars[j]) {
                j += 1;
            }
            if j == start {
                return Err(err(tl, tc, format!("expected a name after `{c}`")));
            }
            let name: String = chars[start..j].iter().collect();
            col += j - i;
            i = j;
            let tok = if c == '%' { Tok::Reg(name) } else { Tok::Global(name) };
            out.push(Spanned { tok, line: tl, col: tc });
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && is_name_char(chars[i]) {
                i += 1;
            }
            col += i - start;
            out.push(Spanned { tok: Tok::Ident(chars[start..i].iter().collect()), line: tl, col: tc });
            continue;
        }
        if "(){}[]<>,:=.".contains(c) {
            match c {
                '[' => bracket_depth += 1,
                ']' => bracket_depth -= 1,
                _ => {}
            }
            out.push(Spanned { tok: Tok::Punct(c), line: tl, col: tc });
            i += 1;
            col += 1;
            continue;
        }
        return Err(err(tl, tc, format!("unexpected character `{c}`")));
    }
    out.push(Spanned { tok: Tok::Eof, line, col });
    Ok(out)
}

const INSTR_KEYWORDS: &[&str] = &["store", "storefield", "call", "br", "condbr", "ret"];

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
    /// Pointer and record parameters of the function being parsed; `%name`
    /// in a memory position resolves against these.
    mem_params: Vec<String>,
}

type PResult<T> = Result<T, ParseError>;

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].tok
    }

    fn peek_at(&self, k: usize) -> &Tok {
        let i = (self.pos + k).min(self.toks.len() - 1);
        &self.toks[i].tok
    }

    fn next(&mut self) -> Tok {
        let t = self.toks[self.pos].tok.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error<T>(&self, message: impl Into<String>) -> PResult<T> {
        let s = &self.toks[self.pos];
        Err(ParseError { line: s.line, col: s.col, message: message.into() })
    }

    fn expect_punct(&mut self, c: char) -> PResult<()> {
        if *self.peek() == Tok::Punct(c) {
            self.next();
            Ok(())
        } else {
            self.error(format!("expected `{c}`, found {}", self.peek()))
        }
    }

    fn eat_punct(&mut self, c: char) -> bool {
        if *self.peek() == Tok::Punct(c) {
            self.next();
            true
        } else {
            false
        }
    }

    fn is_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s == kw)
    }

    fn expect_keyword(&mut self, kw: &str) -> PResult<()> {
        if self.is_keyword(kw) {
            self.next();
            Ok(())
        } else {
            self.error(format!("expected `{kw}`, found {}", self.peek()))
        }
    }

    fn ident(&mut self) -> PResult<String> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                self.next();
                Ok(s)
            }
            t => self.error(format!("expected a name, found {t}")),
        }
    }

    fn int(&mut self) -> PResult<i64> {
        match self.peek().clone() {
            Tok::Int(v) => {
                self.next();
                Ok(v)
            }
            t => self.error(format!("expected an integer, found {t}")),
        }
    }

    fn uint(&mut self) -> PResult<u64> {
        let v = self.int()?;
        if v < 0 {
            self.pos -= 1;
            return self.error("expected a non-negative integer");
        }
        Ok(v as u64)
    }

    fn ty(&mut self) -> PResult<Ty> {
        match self.peek().clone() {
            Tok::Ident(s) => match Ty::from_name(&s) {
                Some(t) => {
                    self.next();
                    Ok(t)
                }
                None => self.error(format!("unknown type `{s}`")),
            },
            t => self.error(format!("expected a type, found {t}")),
        }
    }

    fn ret_ty(&mut self) -> PResult<RetTy> {
        if self.is_keyword("void") {
            self.next();
            Ok(RetTy::Void)
        } else {
            Ok(RetTy::Int(self.ty()?))
        }
    }

    fn module(&mut self) -> PResult<Module> {
        let mut m = Module { arrays: vec![], records: vec![], functions: vec![], entry: String::new() };
        let mut marked_entry: Option<String> = None;
        loop {
            match self.peek().clone() {
                Tok::Eof => break,
                Tok::Ident(kw) if kw == "global" => m.arrays.push(self.global()?),
                Tok::Ident(kw) if kw == "record" => m.records.push(self.record()?),
                Tok::Ident(kw) if kw == "entry" || kw == "fn" => {
                    let is_entry = kw == "entry";
                    if is_entry {
                        self.next();
                        if marked_entry.is_some() {
                            return self.error("more than one function is marked `entry`");
                        }
                    }
                    let f = self.function()?;
                    if is_entry {
                        marked_entry = Some(f.name.clone());
                    }
                    m.functions.push(f);
                }
                t => return self.error(format!("expected `global`, `record` or `fn`, found {t}")),
            }
        }
        m.entry = match marked_entry {
            Some(e) => e,
            None if m.functions.iter().any(|f| f.name == "main") => "main".into(),
            None if m.functions.len() == 1 => m.functions[0].name.clone(),
            None => String::new(),
        };
        Ok(m)
    }

    fn global(&mut self) -> PResult<GlobalArray> {
        self.expect_keyword("global")?;
        let name = self.ident()?;
        self.expect_punct(':')?;
        self.expect_punct('[')?;
        let elem = self.ty()?;
        self.expect_punct(';')?;
        let len = self.uint()?;
        self.expect_punct(']')?;
        let init = if self.eat_punct('=') {
            self.expect_punct('[')?;
            let mut vals = Vec::new();
            if !self.eat_punct(']') {
                loop {
                    vals.push(self.int()?);
                    if self.eat_punct(']') {
                        break;
                    }
                    self.expect_punct(',')?;
                    if self.eat_punct(']') {
                        break;
                    }
                }
            }
            Some(vals)
        } else {
            None
        };
        Ok(GlobalArray { name, elem, len, init })
    }

    fn field_ty(&mut self) -> PResult<FieldTy> {
        if self.eat_punct('[') {
            let t = self.ty()?;
            self.expect_punct(';')?;
            let n = self.uint()?;
            self.expect_punct(']')?;
            Ok(FieldTy::Array(t, n))
        } else {
            Ok(FieldTy::Scalar(self.ty()?))
        }
    }

    fn record(&mut self) -> PResult<GlobalRecord> {
        self.expect_keyword("record")?;
        let name = self.ident()?;
        self.expect_punct('{')?;
        let mut fields = Vec::new();
        while !self.eat_punct('}') {
            let fname = self.ident()?;
            self.expect_punct(':')?;
            let ty = self.field_ty()?;
            fields.push(RecordField { name: fname, ty });
            if !self.eat_punct(',') {
                self.expect_punct('}')?;
                break;
            }
        }
        Ok(GlobalRecord { name, fields })
    }

    fn param(&mut self) -> PResult<Param> {
        let name = self.ident()?;
        self.expect_punct(':')?;
        let ty = if self.is_keyword("ptr") {
            self.next();
            self.expect_punct('<')?;
            let t = self.ty()?;
            self.expect_punct(',')?;
            let n = self.uint()?;
            self.expect_punct('>')?;
            ParamTy::Ptr(t, n)
        } else if self.is_keyword("rec") {
            self.next();
            self.expect_punct('<')?;
            let r = self.ident()?;
            self.expect_punct('>')?;
            ParamTy::Rec(r)
        } else {
            ParamTy::Scalar(self.ty()?)
        };
        let secret = if self.is_keyword("secret") {
            self.next();
            true
        } else {
            false
        };
        Ok(Param { name, ty, secret })
    }

    fn function(&mut self) -> PResult<Function> {
        self.expect_keyword("fn")?;
        let name = self.ident()?;
        self.expect_punct('(')?;
        let mut params = Vec::new();
        if !self.eat_punct(')') {
            loop {
                params.push(self.param()?);
                if self.eat_punct(')') {
                    break;
                }
                self.expect_punct(',')?;
            }
        }
        self.mem_params = params
            .iter()
            .filter(|p| !matches!(p.ty, ParamTy::Scalar(_)))
            .map(|p| p.name.clone())
            .collect();
        if *self.peek() != Tok::Arrow {
            return self.error(format!("expected `->`, found {}", self.peek()));
        }
        self.next();
        let ret = self.ret_ty()?;
        self.expect_punct('{')?;
        let mut blocks = Vec::new();
        while !self.eat_punct('}') {
            blocks.push(self.block()?);
        }
        if blocks.is_empty() {
            return self.error(format!("function `{name}` has no blocks"));
        }
        Ok(Function { name, params, ret, blocks })
    }

    fn block(&mut self) -> PResult<Block> {
        let label = match self.peek().clone() {
            Tok::Ident(s) if !INSTR_KEYWORDS.contains(&s.as_str()) => {
                self.next();
                s
            }
            t => return self.error(format!("expected a block label, found {t}")),
        };
        let mut bound = None;
        if self.is_keyword("bound") {
            self.next();
            self.expect_punct('=')?;
            bound = Some(self.uint()?);
        }
        self.expect_punct(':')?;
        let mut instrs = Vec::new();
        loop {
            if let Some(term) = self.terminator()? {
                return Ok(Block { label, bound, instrs, term });
            }
            match self.peek() {
                Tok::Reg(_) => instrs.push(self.assignment()?),
                Tok::Ident(s) if s == "store" || s == "storefield" || s == "call" => {
                    instrs.push(self.effect()?)
                }
                Tok::Ident(_) if matches!(self.peek_at(1), Tok::Punct(':')) || self.is_keyword_at(1, "bound") => {
                    return self.error(format!("block `{label}` has no terminator"))
                }
                Tok::Punct('}') | Tok::Eof => return self.error(format!("block `{label}` has no terminator")),
                Tok::Ident(s) => return self.error(format!("unknown instruction `{s}`")),
                t => return self.error(format!("expected an instruction, found {t}")),
            }
        }
    }

    fn is_keyword_at(&self, k: usize, kw: &str) -> bool {
        matches!(self.peek_at(k), Tok::Ident(s) if s == kw)
    }

    fn label(&mut self) -> PResult<String> {
        self.ident()
    }

    fn terminator(&mut self) -> PResult<Option<Terminator>> {
        let kw = match self.peek() {
            Tok::Ident(s) => s.clone(),
            _ => return Ok(None),
        };
        let term = match kw.as_str() {
            "br" => {
                self.next();
                Terminator::Br(self.label()?)
            }
            "condbr" => {
                self.next();
                let cond = self.operand()?;
                self.expect_punct(',')?;
                let t = self.label()?;
                self.expect_punct(',')?;
                let f = self.label()?;
                Terminator::CondBr { cond, t, f }
            }
            "ret" => {
                self.next();
                if self.is_keyword("void") {
                    self.next();
                    Terminator::Ret(None)
                } else if matches!(self.peek(), Tok::Reg(_) | Tok::Int(_)) {
                    Terminator::Ret(Some(self.operand()?))
                } else {
                    Terminator::Ret(None)
                }
            }
            _ => return Ok(None),
        };
        Ok(Some(term))
    }

    fn operand(&mut self) -> PResult<Operand> {
        match self.peek().clone() {
            Tok::Reg(r) => {
                self.next();
                Ok(Operand::Reg(r))
            }
            Tok::Int(v) => {
                self.next();
                Ok(Operand::Imm(v))
            }
            t => self.error(format!("expected a register or integer, found {t}")),
        }
    }

    fn mem_ref(&mut self) -> PResult<MemRef> {
        let base = match self.peek().clone() {
            Tok::Global(g) => MemBase::Global(g),
            Tok::Reg(p) => MemBase::Param(p),
            t => return self.error(format!("expected a memory reference, found {t}")),
        };
        self.next();
        let field = if self.eat_punct('.') { Some(self.ident()?) } else { None };
        Ok(MemRef { base, field })
    }

    fn assignment(&mut self) -> PResult<Instr> {
        let dst = match self.next() {
            Tok::Reg(r) => r,
            _ => unreachable!(),
        };
        self.expect_punct('=')?;
        let op = self.ident()?;
        if let Some(bin) = BinOp::ALL.iter().find(|b| b.name() == op) {
            let ty = self.ty()?;
            let a = self.operand()?;
            self.expect_punct(',')?;
            let b = self.operand()?;
            return Ok(Instr::Bin { dst, op: *bin, ty, a, b });
        }
        let cast = match op.as_str() {
            "zext" => Some(CastOp::Zext),
            "sext" => Some(CastOp::Sext),
            "trunc" => Some(CastOp::Trunc),
            _ => None,
        };
        if let Some(cop) = cast {
            let from = self.ty()?;
            let value = self.operand()?;
            self.expect_keyword("to")?;
            let to = self.ty()?;
            return Ok(Instr::Cast { dst, op: cop, from, value, to });
        }
        match op.as_str() {
            "const" => {
                let ty = self.ty()?;
                let value = self.int()?;
                Ok(Instr::Const { dst, ty, value })
            }
            "icmp" => {
                let pname = self.ident()?;
                let pred = match Pred::ALL.iter().find(|p| p.name() == pname) {
                    Some(p) => *p,
                    None => {
                        self.pos -= 1;
                        return self.error(format!("unknown icmp predicate `{pname}`"));
                    }
                };
                let ty = self.ty()?;
                let a = self.operand()?;
                self.expect_punct(',')?;
                let b = self.operand()?;
                Ok(Instr::Icmp { dst, pred, ty, a, b })
            }
            "load" => {
                let ty = self.ty()?;
                let mem = self.mem_ref()?;
                self.expect_punct('[')?;
                let index = self.operand()?;
                self.expect_punct(']')?;
                Ok(Instr::Load { dst, ty, mem, index, tag: None })
            }
            "loadfield" => {
                let ty = self.ty()?;
                let mem = self.mem_ref()?;
                Ok(Instr::LoadField { dst, ty, mem })
            }
            "phi" => {
                let ty = self.ty()?;
                let mut incoming = Vec::new();
                loop {
                    self.expect_punct('[')?;
                    let v = self.operand()?;
                    self.expect_punct(',')?;
                    let b = self.label()?;
                    self.expect_punct(']')?;
                    incoming.push((v, b));
                    if !self.eat_punct(',') {
                        break;
                    }
                }
                Ok(Instr::Phi { dst, ty, incoming })
            }
            "ctsel" => {
                let ty = self.ty()?;
                let cond = self.operand()?;
                self.expect_punct(',')?;
                let t = self.operand()?;
                self.expect_punct(',')?;
                let e = self.operand()?;
                Ok(Instr::Ctsel { dst, ty, cond, t, e })
            }
            "call" => self.call(Some(dst)),
            _ => {
                self.pos -= 1;
                self.error(format!("unknown instruction `{op}`"))
            }
        }
    }

    fn call(&mut self, dst: Option<String>) -> PResult<Instr> {
        let ret = self.ret_ty()?;
        let callee = match self.next() {
            Tok::Global(g) => g,
            t => {
                self.pos -= 1;
                return self.error(format!("expected `@function`, found {t}"));
            }
        };
        self.expect_punct('(')?;
        let mut args = Vec::new();
        if !self.eat_punct(')') {
            loop {
                let arg = match self.peek().clone() {
                    Tok::Global(_) => CallArg::Mem(self.mem_ref()?),
                    Tok::Reg(r) if self.mem_params.contains(&r) => CallArg::Mem(self.mem_ref()?),
                    _ => CallArg::Value(self.operand()?),
                };
                args.push(arg);
                if self.eat_punct(')') {
                    break;
                }
                self.expect_punct(',')?;
            }
        }
        Ok(Instr::Call { dst, ret, callee, args })
    }

    fn effect(&mut self) -> PResult<Instr> {
        let kw = self.ident()?;
        match kw.as_str() {
            "store" => {
                let ty = self.ty()?;
                let mem = self.mem_ref()?;
                self.expect_punct('[')?;
                let index = self.operand()?;
                self.expect_punct(']')?;
                self.expect_punct(',')?;
                let value = self.operand()?;
                Ok(Instr::Store { ty, mem, index, value, tag: None })
            }
            "storefield" => {
                let ty = self.ty()?;
                let mem = self.mem_ref()?;
                self.expect_punct(',')?;
                let value = self.operand()?;
                Ok(Instr::StoreField { ty, mem, value })
            }
            "call" => self.call(None),
            _ => unreachable!(),
        }
    }
}

/// Parses TIR source text into a [`Module`].
pub fn parse_module(src: &str) -> Result<Module, ParseError> {
    let toks = lex(src)?;
    let mut p = Parser { toks, pos: 0, mem_params: Vec::new() };
    p.module()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_module() {
        let m = parse_module("fn main() -> i32 { b0: ret 0 }").unwrap();
        assert_eq!(m.functions.len(), 1);
        assert_eq!(m.functions[0].blocks.len(), 1);
        assert_eq!(m.entry, "main");
        assert_eq!(m.functions[0].blocks[0].term, Terminator::Ret(Some(Operand::Imm(0))));
    }

    #[test]
    fn semicolon_is_separator_in_array_types_and_comment_elsewhere() {
        let src = "global sbox: [i8; 4] = [0x63, 0x7c, 0x77, 0x7b] ; the table\n\
                   fn main() -> i8 { ; comment\n b0: %x = load i8 @sbox[1] ; load\n ret %x }";
        let m = parse_module(src).unwrap();
        assert_eq!(m.arrays[0].len, 4);
        assert_eq!(m.arrays[0].init.as_deref(), Some(&[0x63, 0x7c, 0x77, 0x7b][..]));
        assert_eq!(m.functions[0].blocks[0].instrs.len(), 1);
    }

    #[test]
    fn unknown_instruction_reports_position() {
        let e = parse_module("fn main() -> i32 {\nb0:\n  %x = frob i32 1, 2\n  ret %x }").unwrap_err();
        assert_eq!(e.line, 3);
        assert!(e.message.contains("unknown instruction `frob`"), "{e}");
    }

    #[test]
    fn missing_terminator_is_rejected() {
        let e = parse_module("fn main() -> i32 { b0: %x = add i32 1, 2 b1: ret %x }").unwrap_err();
        assert!(e.message.contains("no terminator"), "{e}");
    }

    #[test]
    fn pointer_params_resolve_as_memory_in_calls() {
        let src = "fn h(p: ptr<i8,4>) -> void { b0: ret }\n\
                   entry fn main(a: ptr<i8,4> secret, x: i8) -> void { b0: call void @h(%a) call void @h(@g) ret }\n\
                   global g: [i8; 4]";
        let m = parse_module(src).unwrap();
        assert_eq!(m.entry, "main");
        let Instr::Call { args, .. } = &m.functions[1].blocks[0].instrs[0] else { panic!() };
        assert_eq!(args[0], CallArg::Mem(MemRef::param("a")));
        assert!(m.functions[1].params[0].secret);
    }

    #[test]
    fn block_bound_annotation() {
        let m = parse_module("fn main() -> void { b0: br b1 b1 bound=32: br b2 b2: ret }").unwrap();
        assert_eq!(m.functions[0].blocks[1].bound, Some(32));
    }
}
