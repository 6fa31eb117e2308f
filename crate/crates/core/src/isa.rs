//! MiniASM: a small register machine language with two surface dialects.
//!
//! Programs are parsed from line-oriented text (see `docs/miniasm.md`),
//! validated, and each procedure is partitioned into basic blocks with the
//! classic leaders rule.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NUM_REGS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Opcode {
    Mov,
    Add,
    Sub,
    Mul,
    CmpFlag,
    Ld,
    St,
    Jmp,
    BrTrue,
    BrFalse,
    Call,
    Ret,
    Halt,
}

impl Opcode {
    pub const ALL: [Opcode; 13] = [
        Opcode::Mov,
        Opcode::Add,
        Opcode::Sub,
        Opcode::Mul,
        Opcode::CmpFlag,
        Opcode::Ld,
        Opcode::St,
        Opcode::Jmp,
        Opcode::BrTrue,
        Opcode::BrFalse,
        Opcode::Call,
        Opcode::Ret,
        Opcode::Halt,
    ];

    /// True for opcodes that end a basic block.
    pub fn is_control_flow(self) -> bool {
        matches!(
            self,
            Opcode::Jmp | Opcode::BrTrue | Opcode::BrFalse | Opcode::Call | Opcode::Ret | Opcode::Halt
        )
    }

    pub fn arity(self) -> usize {
        match self {
            Opcode::Mov | Opcode::Ld | Opcode::St => 2,
            Opcode::Add | Opcode::Sub | Opcode::Mul | Opcode::CmpFlag => 3,
            Opcode::Jmp | Opcode::BrTrue | Opcode::BrFalse | Opcode::Call => 1,
            Opcode::Ret | Opcode::Halt => 0,
        }
    }

    fn index(self) -> usize {
        Opcode::ALL.iter().position(|&o| o == self).unwrap()
    }
}

/// Comparison used by `cmpflag`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Relation {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl Relation {
    pub const ALL: [Relation; 6] = [
        Relation::Eq,
        Relation::Ne,
        Relation::Lt,
        Relation::Le,
        Relation::Gt,
        Relation::Ge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Relation::Eq => "eq",
            Relation::Ne => "ne",
            Relation::Lt => "lt",
            Relation::Le => "le",
            Relation::Gt => "gt",
            Relation::Ge => "ge",
        }
    }

    pub fn from_name(s: &str) -> Option<Relation> {
        Relation::ALL.into_iter().find(|r| r.name() == s)
    }

    pub fn eval(self, a: i64, b: i64) -> bool {
        match self {
            Relation::Eq => a == b,
            Relation::Ne => a != b,
            Relation::Lt => a < b,
            Relation::Le => a <= b,
            Relation::Gt => a > b,
            Relation::Ge => a >= b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Reg(pub u8);

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operand {
    Reg(Reg),
    Imm(i64),
    Mem { base: Reg, offset: i64 },
    Label(String),
    Proc(String),
    Rel(Relation),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenKind {
    Opcode,
    Register,
    Immediate,
    MemRef,
    Label,
    ProcName,
    Relation,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub kind: TokenKind,
}

impl Token {
    fn new(text: impl Into<String>, kind: TokenKind) -> Token {
        Token { text: text.into(), kind }
    }
}

/// One instruction in canonical operand order.
///
/// Canonical orders: `mov rd, src`; `add rd, ra, src`; `cmpflag rel, ra, src`;
/// `ld rd, [rb+imm]`; `st [rb+imm], rs`; `jmp|br_* label`; `call proc`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub opcode: Opcode,
    pub operands: Vec<Operand>,
}

impl Instruction {
    pub fn new(opcode: Opcode, operands: Vec<Operand>) -> Instruction {
        Instruction { opcode, operands }
    }

    /// Label target of a jump or branch.
    pub fn label_target(&self) -> Option<&str> {
        match (self.opcode, self.operands.first()) {
            (Opcode::Jmp | Opcode::BrTrue | Opcode::BrFalse, Some(Operand::Label(l))) => Some(l),
            _ => None,
        }
    }

    pub fn call_target(&self) -> Option<&str> {
        match (self.opcode, self.operands.first()) {
            (Opcode::Call, Some(Operand::Proc(p))) => Some(p),
            _ => None,
        }
    }

    /// Memory operand of `ld`/`st`.
    pub fn mem_operand(&self) -> Option<(Reg, i64)> {
        self.operands.iter().find_map(|o| match o {
            Operand::Mem { base, offset } => Some((*base, *offset)),
            _ => None,
        })
    }

    /// Checks operand kinds against the opcode's signature.
    pub fn check_shape(&self) -> Result<(), String> {
        use Operand as O;
        if self.operands.len() != self.opcode.arity() {
            return Err(format!(
                "{:?} expects {} operands, found {}",
                self.opcode,
                self.opcode.arity(),
                self.operands.len()
            ));
        }
        let is_src = |o: &Operand| matches!(o, O::Reg(_) | O::Imm(_));
        let ok = match (self.opcode, self.operands.as_slice()) {
            (Opcode::Mov, [O::Reg(_), s]) => is_src(s),
            (Opcode::Add | Opcode::Sub | Opcode::Mul, [O::Reg(_), O::Reg(_), s]) => is_src(s),
            (Opcode::CmpFlag, [O::Rel(_), O::Reg(_), s]) => is_src(s),
            (Opcode::Ld, [O::Reg(_), O::Mem { .. }]) => true,
            (Opcode::St, [O::Mem { .. }, O::Reg(_)]) => true,
            (Opcode::Jmp | Opcode::BrTrue | Opcode::BrFalse, [O::Label(_)]) => true,
            (Opcode::Call, [O::Proc(_)]) => true,
            (Opcode::Ret | Opcode::Halt, []) => true,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(format!("bad operands for {:?}", self.opcode))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasicBlock {
    pub id: usize,
    pub instructions: Vec<Instruction>,
}

impl BasicBlock {
    pub fn terminator(&self) -> &Instruction {
        self.instructions.last().expect("basic blocks are non-empty")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Procedure {
    pub name: String,
    pub blocks: Vec<BasicBlock>,
    /// Label name to the block it starts.
    pub labels: BTreeMap<String, usize>,
}

impl Procedure {
    pub const ENTRY_BLOCK: usize = 0;

    /// Builds a procedure from a flat instruction list and label positions.
    pub fn from_instructions(
        name: impl Into<String>,
        instructions: Vec<Instruction>,
        labels: &BTreeMap<String, usize>,
    ) -> Procedure {
        let blocks = partition_blocks(instructions, labels);
        let mut starts = Vec::with_capacity(blocks.len());
        let mut at = 0;
        for b in &blocks {
            starts.push(at);
            at += b.instructions.len();
        }
        let labels = labels
            .iter()
            .map(|(l, &idx)| {
                let block = starts.binary_search(&idx).expect("label targets are leaders");
                (l.clone(), block)
            })
            .collect();
        Procedure { name: name.into(), blocks, labels }
    }

    pub fn instruction_count(&self) -> usize {
        self.blocks.iter().map(|b| b.instructions.len()).sum()
    }

    pub fn instructions(&self) -> impl Iterator<Item = &Instruction> {
        self.blocks.iter().flat_map(|b| b.instructions.iter())
    }

    pub fn block_of_label(&self, label: &str) -> Option<usize> {
        self.labels.get(label).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dialect {
    DialectA,
    DialectB,
}

const MNEMONICS_A: [&str; 13] = [
    "mov", "add", "sub", "mul", "cmp", "ld", "st", "jmp", "brt", "brf", "call", "ret", "halt",
];
const MNEMONICS_B: [&str; 13] = [
    "movz", "addx", "subx", "mulx", "cmpx", "ldr", "str", "b", "cbt", "cbf", "bl", "retx", "hlt",
];

impl Dialect {
    pub const ALL: [Dialect; 2] = [Dialect::DialectA, Dialect::DialectB];

    pub fn mnemonic(self, op: Opcode) -> &'static str {
        self.mnemonics()[op.index()]
    }

    pub fn opcode(self, mnemonic: &str) -> Option<Opcode> {
        self.mnemonics()
            .iter()
            .position(|&m| m == mnemonic)
            .map(|i| Opcode::ALL[i])
    }

    pub fn mnemonics(self) -> &'static [&'static str; 13] {
        match self {
            Dialect::DialectA => &MNEMONICS_A,
            Dialect::DialectB => &MNEMONICS_B,
        }
    }

    pub fn reg_prefix(self) -> char {
        match self {
            Dialect::DialectA => 'r',
            Dialect::DialectB => 'x',
        }
    }

    pub fn reg_name(self, r: Reg) -> String {
        format!("{}{}", self.reg_prefix(), r.0)
    }

    pub fn parse_reg(self, s: &str) -> Option<Reg> {
        let rest = s.strip_prefix(self.reg_prefix())?;
        if rest.len() != 1 {
            return None;
        }
        let n: u8 = rest.parse().ok()?;
        ((n as usize) < NUM_REGS).then_some(Reg(n))
    }

    pub fn tag(self) -> &'static str {
        match self {
            Dialect::DialectA => "A",
            Dialect::DialectB => "B",
        }
    }

    /// Maps a surface token of this dialect onto the other dialect's spelling.
    pub fn translate_token(self, to: Dialect, text: &str) -> String {
        if let Some(op) = self.opcode(text) {
            return to.mnemonic(op).to_string();
        }
        if let Some(r) = self.parse_reg(text) {
            return to.reg_name(r);
        }
        text.to_string()
    }
}

impl fmt::Display for Dialect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    pub procedures: IndexMap<String, Procedure>,
    pub entry: String,
    pub dialect: Dialect,
}

impl Program {
    pub fn procedure(&self, name: &str) -> Option<&Procedure> {
        self.procedures.get(name)
    }

    pub fn proc_index(&self, name: &str) -> Option<usize> {
        self.procedures.get_index_of(name)
    }

    /// Same program rendered for another dialect. Semantics are unchanged.
    pub fn with_dialect(&self, dialect: Dialect) -> Program {
        Program { dialect, ..self.clone() }
    }

    /// Checks the cross-procedure invariants.
    pub fn validate(&self) -> Result<(), ParseError> {
        if !self.procedures.contains_key(&self.entry) {
            return Err(ParseError::UndefinedProcedure { line: 0, name: self.entry.clone() });
        }
        for p in self.procedures.values() {
            for ins in p.instructions() {
                if let Some(t) = ins.call_target() {
                    if !self.procedures.contains_key(t) {
                        return Err(ParseError::UndefinedProcedure { line: 0, name: t.to_string() });
                    }
                }
                if let Some(l) = ins.label_target() {
                    if !p.labels.contains_key(l) {
                        return Err(ParseError::UndefinedLabel { line: 0, label: l.to_string() });
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("line {line}: syntax error: {reason}")]
    SyntaxError { line: usize, reason: String },
    #[error("line {line}: unknown mnemonic `{mnemonic}`")]
    UnknownMnemonic { line: usize, mnemonic: String },
    #[error("line {line}: undefined label `{label}`")]
    UndefinedLabel { line: usize, label: String },
    #[error("line {line}: undefined procedure `{name}`")]
    UndefinedProcedure { line: usize, name: String },
}

/// Splits a flat instruction sequence into basic blocks.
///
/// Leaders are index 0, every label target, and every index following a
/// control-flow instruction.
pub fn partition_blocks(
    instructions: Vec<Instruction>,
    labels: &BTreeMap<String, usize>,
) -> Vec<BasicBlock> {
    let n = instructions.len();
    let mut leaders = BTreeSet::new();
    if n > 0 {
        leaders.insert(0);
    }
    for &idx in labels.values() {
        if idx < n {
            leaders.insert(idx);
        }
    }
    for (i, ins) in instructions.iter().enumerate() {
        if ins.opcode.is_control_flow() && i + 1 < n {
            leaders.insert(i + 1);
        }
    }
    let mut blocks = Vec::with_capacity(leaders.len());
    let mut current = Vec::new();
    for (i, ins) in instructions.into_iter().enumerate() {
        if i > 0 && leaders.contains(&i) {
            let id = blocks.len();
            blocks.push(BasicBlock { id, instructions: std::mem::take(&mut current) });
        }
        current.push(ins);
    }
    if !current.is_empty() {
        let id = blocks.len();
        blocks.push(BasicBlock { id, instructions: current });
    }
    blocks
}

/// Token sequence of an instruction in canonical operand order.
pub fn tokenize_instruction(ins: &Instruction, dialect: Dialect) -> Vec<Token> {
    let mut out = Vec::with_capacity(1 + 2 * ins.operands.len());
    out.push(Token::new(dialect.mnemonic(ins.opcode), TokenKind::Opcode));
    for op in &ins.operands {
        match op {
            Operand::Reg(r) => out.push(Token::new(dialect.reg_name(*r), TokenKind::Register)),
            Operand::Imm(v) => out.push(Token::new(v.to_string(), TokenKind::Immediate)),
            Operand::Mem { base, offset } => {
                out.push(Token::new(dialect.reg_name(*base), TokenKind::Register));
                out.push(Token::new("+", TokenKind::MemRef));
                out.push(Token::new(offset.to_string(), TokenKind::Immediate));
            }
            Operand::Label(l) => out.push(Token::new(l.clone(), TokenKind::Label)),
            Operand::Proc(p) => out.push(Token::new(p.clone(), TokenKind::ProcName)),
            Operand::Rel(r) => out.push(Token::new(r.name(), TokenKind::Relation)),
        }
    }
    out
}

/// Token texts only.
pub fn token_texts(ins: &Instruction, dialect: Dialect) -> Vec<String> {
    tokenize_instruction(ins, dialect).into_iter().map(|t| t.text).collect()
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

struct LineParser {
    dialect: Dialect,
    line: usize,
}

impl LineParser {
    fn syntax(&self, reason: impl Into<String>) -> ParseError {
        ParseError::SyntaxError { line: self.line, reason: reason.into() }
    }

    fn reg(&self, s: &str) -> Result<Reg, ParseError> {
        self.dialect
            .parse_reg(s)
            .ok_or_else(|| self.syntax(format!("expected register, found `{s}`")))
    }

    fn imm(&self, s: &str) -> Result<i64, ParseError> {
        s.parse::<i64>().map_err(|_| self.syntax(format!("expected integer, found `{s}`")))
    }

    fn src(&self, s: &str) -> Result<Operand, ParseError> {
        match self.dialect.parse_reg(s) {
            Some(r) => Ok(Operand::Reg(r)),
            None => Ok(Operand::Imm(self.imm(s)?)),
        }
    }

    fn mem(&self, s: &str) -> Result<Operand, ParseError> {
        let inner = s
            .strip_prefix('[')
            .and_then(|s| s.strip_suffix(']'))
            .ok_or_else(|| self.syntax(format!("expected memory operand, found `{s}`")))?;
        let (base, off) = inner
            .split_once('+')
            .ok_or_else(|| self.syntax("memory operand must be [reg+offset]"))?;
        let offset = self.imm(off.trim())?;
        if offset < 0 {
            return Err(self.syntax("memory offset must be non-negative"));
        }
        Ok(Operand::Mem { base: self.reg(base.trim())?, offset })
    }

    fn label(&self, s: &str) -> Result<Operand, ParseError> {
        if is_ident(s) {
            Ok(Operand::Label(s.to_string()))
        } else {
            Err(self.syntax(format!("bad label `{s}`")))
        }
    }

    fn instruction(&self, text: &str) -> Result<Instruction, ParseError> {
        let (mnemonic, rest) = match text.split_once(char::is_whitespace) {
            Some((m, r)) => (m, r.trim()),
            None => (text, ""),
        };
        let opcode = self.dialect.opcode(mnemonic).ok_or_else(|| ParseError::UnknownMnemonic {
            line: self.line,
            mnemonic: mnemonic.to_string(),
        })?;
        let args: Vec<&str> = if rest.is_empty() {
            Vec::new()
        } else {
            rest.split(',').map(str::trim).collect()
        };
        if args.len() != opcode.arity() {
            return Err(self.syntax(format!(
                "`{mnemonic}` takes {} operand(s), found {}",
                opcode.arity(),
                args.len()
            )));
        }
        let operands = match opcode {
            Opcode::Mov => vec![Operand::Reg(self.reg(args[0])?), self.src(args[1])?],
            Opcode::Add | Opcode::Sub | Opcode::Mul => vec![
                Operand::Reg(self.reg(args[0])?),
                Operand::Reg(self.reg(args[1])?),
                self.src(args[2])?,
            ],
            Opcode::CmpFlag => {
                let rel = Relation::from_name(args[0])
                    .ok_or_else(|| self.syntax(format!("unknown relation `{}`", args[0])))?;
                vec![Operand::Rel(rel), Operand::Reg(self.reg(args[1])?), self.src(args[2])?]
            }
            Opcode::Ld => vec![Operand::Reg(self.reg(args[0])?), self.mem(args[1])?],
            Opcode::St => match self.dialect {
                Dialect::DialectA => vec![self.mem(args[0])?, Operand::Reg(self.reg(args[1])?)],
                Dialect::DialectB => vec![self.mem(args[1])?, Operand::Reg(self.reg(args[0])?)],
            },
            Opcode::Jmp | Opcode::BrTrue | Opcode::BrFalse => vec![self.label(args[0])?],
            Opcode::Call => {
                if !is_ident(args[0]) {
                    return Err(self.syntax(format!("bad procedure name `{}`", args[0])));
                }
                vec![Operand::Proc(args[0].to_string())]
            }
            Opcode::Ret | Opcode::Halt => Vec::new(),
        };
        Ok(Instruction { opcode, operands })
    }
}

struct PendingProc {
    name: String,
    line: usize,
    instructions: Vec<Instruction>,
    lines: Vec<usize>,
    labels: BTreeMap<String, usize>,
}

fn finish_proc(p: PendingProc, calls: &mut Vec<(usize, String)>) -> Result<Procedure, ParseError> {
    let Some(last) = p.instructions.last() else {
        return Err(ParseError::SyntaxError { line: p.line, reason: format!("procedure `{}` is empty", p.name) });
    };
    if !matches!(last.opcode, Opcode::Jmp | Opcode::Ret | Opcode::Halt) {
        return Err(ParseError::SyntaxError {
            line: *p.lines.last().unwrap(),
            reason: format!("procedure `{}` falls off its end", p.name),
        });
    }
    for (label, &idx) in &p.labels {
        if idx >= p.instructions.len() {
            return Err(ParseError::SyntaxError {
                line: p.line,
                reason: format!("label `{label}` does not precede an instruction"),
            });
        }
    }
    for (ins, &line) in p.instructions.iter().zip(&p.lines) {
        if let Some(l) = ins.label_target() {
            if !p.labels.contains_key(l) {
                return Err(ParseError::UndefinedLabel { line, label: l.to_string() });
            }
        }
        if let Some(t) = ins.call_target() {
            calls.push((line, t.to_string()));
        }
    }
    Ok(Procedure::from_instructions(p.name, p.instructions, &p.labels))
}

/// Parses MiniASM text in the given dialect.
pub fn parse_program(text: &str, dialect: Dialect) -> Result<Program, ParseError> {
    let mut procedures: IndexMap<String, Procedure> = IndexMap::new();
    let mut entry: Option<String> = None;
    let mut current: Option<PendingProc> = None;
    let mut calls = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let code = raw.split(';').next().unwrap_or("").trim();
        if code.is_empty() {
            continue;
        }
        let lp = LineParser { dialect, line };
        if let Some(name) = code.strip_prefix(".entry") {
            let name = name.trim();
            if !is_ident(name) || entry.is_some() {
                return Err(lp.syntax("malformed or duplicate .entry directive"));
            }
            entry = Some(name.to_string());
            continue;
        }
        if let Some(rest) = code.strip_prefix("proc ") {
            let name = rest
                .trim()
                .strip_suffix(':')
                .map(str::trim)
                .filter(|n| is_ident(n))
                .ok_or_else(|| lp.syntax("expected `proc <name>:`"))?;
            if let Some(p) = current.take() {
                let proc_ = finish_proc(p, &mut calls)?;
                procedures.insert(proc_.name.clone(), proc_);
            }
            if procedures.contains_key(name) {
                return Err(lp.syntax(format!("duplicate procedure `{name}`")));
            }
            current = Some(PendingProc {
                name: name.to_string(),
                line,
                instructions: Vec::new(),
                lines: Vec::new(),
                labels: BTreeMap::new(),
            });
            continue;
        }
        let Some(p) = current.as_mut() else {
            return Err(lp.syntax("instruction outside of a procedure"));
        };
        if let Some(label) = code.strip_suffix(':') {
            let label = label.trim();
            if !is_ident(label) {
                return Err(lp.syntax(format!("bad label `{label}`")));
            }
            if p.labels.insert(label.to_string(), p.instructions.len()).is_some() {
                return Err(lp.syntax(format!("duplicate label `{label}`")));
            }
            continue;
        }
        p.instructions.push(lp.instruction(code)?);
        p.lines.push(line);
    }
    if let Some(p) = current.take() {
        let proc_ = finish_proc(p, &mut calls)?;
        procedures.insert(proc_.name.clone(), proc_);
    }
    if procedures.is_empty() {
        return Err(ParseError::SyntaxError { line: 0, reason: "no procedures".into() });
    }
    for (line, target) in calls {
        if !procedures.contains_key(&target) {
            return Err(ParseError::UndefinedProcedure { line, name: target });
        }
    }
    let entry = entry.unwrap_or_else(|| "main".to_string());
    if !procedures.contains_key(&entry) {
        return Err(ParseError::UndefinedProcedure { line: 0, name: entry });
    }
    Ok(Program { procedures, entry, dialect })
}

fn format_operand(op: &Operand, dialect: Dialect) -> String {
    match op {
        Operand::Reg(r) => dialect.reg_name(*r),
        Operand::Imm(v) => v.to_string(),
        Operand::Mem { base, offset } => format!("[{}+{}]", dialect.reg_name(*base), offset),
        Operand::Label(l) => l.clone(),
        Operand::Proc(p) => p.clone(),
        Operand::Rel(r) => r.name().to_string(),
    }
}

/// Surface text of one instruction.
pub fn format_instruction(ins: &Instruction, dialect: Dialect) -> String {
    let mnemonic = dialect.mnemonic(ins.opcode);
    let mut ops: Vec<String> = ins.operands.iter().map(|o| format_operand(o, dialect)).collect();
    if ins.opcode == Opcode::St && dialect == Dialect::DialectB {
        ops.swap(0, 1);
    }
    if ops.is_empty() {
        mnemonic.to_string()
    } else {
        format!("{} {}", mnemonic, ops.join(", "))
    }
}

/// Renders a program as MiniASM text in its own dialect.
pub fn print_program(program: &Program) -> String {
    print_program_as(program, program.dialect)
}

pub fn print_program_as(program: &Program, dialect: Dialect) -> String {
    let mut out = String::new();
    if program.entry != "main" {
        out.push_str(&format!(".entry {}\n", program.entry));
    }
    for p in program.procedures.values() {
        out.push_str(&format!("proc {}:\n", p.name));
        let mut by_block: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
        for (l, &b) in &p.labels {
            by_block.entry(b).or_default().push(l);
        }
        for b in &p.blocks {
            for l in by_block.get(&b.id).into_iter().flatten() {
                out.push_str(&format!("{l}:\n"));
            }
            for ins in &b.instructions {
                out.push_str("  ");
                out.push_str(&format_instruction(ins, dialect));
                out.push('\n');
            }
        }
    }
    out
}
