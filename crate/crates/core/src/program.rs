//! Block-structured assembly front end producing a layout-free
//! [`LogicalProgram`].
//!
//! Grammar (one statement per line, `;` starts a comment):
//!
//! ```text
//! program   := { line }
//! line      := [ label ":" ] [ directive | instr ] [ ";" comment ]
//! directive := ".data" ident int { int }      ; size in bytes, optional init words
//!            | ".mmio" ident                  ; one word in the shared I/O region
//!            | ".func" ident
//!            | ".entry" ident
//! instr     := mnemonic [ operand { "," operand } ]
//! operand   := reg | int | "&" ident | ident | "[" reg [ ("+"|"-") int ] "]"
//! reg       := "r0" .. "r15" | "sp"
//! ```
//!
//! A `.func` opens a function whose first block is labelled with the
//! function name. Any instruction following a control transfer starts a
//! new block; if it has no label one is generated as `<func>.<n>`.

use std::collections::{BTreeMap, HashSet};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::isa::{Format, Kind, Opcode, Reg, INSTR_WIDTH};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DiagCode {
    UnknownMnemonic,
    UndefinedTarget,
    DuplicateLabel,
    MalformedOperand,
    NoEntryFunction,
    OutsideFunction,
    EmptyBlock,
    FallsOffEnd,
    BadDirective,
    UndefinedObject,
    UnreachableBlock,
}

impl DiagCode {
    pub fn as_str(self) -> &'static str {
        match self {
            DiagCode::UnknownMnemonic => "E001",
            DiagCode::UndefinedTarget => "E002",
            DiagCode::DuplicateLabel => "E003",
            DiagCode::MalformedOperand => "E004",
            DiagCode::NoEntryFunction => "E005",
            DiagCode::OutsideFunction => "E006",
            DiagCode::EmptyBlock => "E007",
            DiagCode::FallsOffEnd => "E008",
            DiagCode::BadDirective => "E009",
            DiagCode::UndefinedObject => "E010",
            DiagCode::UnreachableBlock => "W101",
        }
    }

    pub fn severity(self) -> Severity {
        match self {
            DiagCode::UnreachableBlock => Severity::Warning,
            _ => Severity::Error,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub code: DiagCode,
    pub line: u32,
    pub column: u32,
    pub message: String,
}

impl Diagnostic {
    fn new(code: DiagCode, line: u32, column: u32, message: impl Into<String>) -> Self {
        Diagnostic {
            code,
            line,
            column,
            message: message.into(),
        }
    }

    pub fn severity(&self) -> Severity {
        self.code.severity()
    }

    pub fn is_error(&self) -> bool {
        self.severity() == Severity::Error
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity() {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(
            f,
            "{}:{}: {sev}[{}]: {}",
            self.line,
            self.column,
            self.code.as_str(),
            self.message
        )
    }
}

/// Stable identity of a logical instruction across all replicas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LogicalInstrId {
    pub function: u32,
    pub block: u32,
    pub index: u32,
}

impl fmt::Display for LogicalInstrId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.function, self.block, self.index)
    }
}

/// Symbolic operand carried by a logical instruction.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operand {
    None,
    Imm(i32),
    /// `&name`: base address of a data object, resolved per replica.
    Addr(String),
    /// Block label inside the current function.
    Label(String),
    /// Function name (CALL target).
    Func(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LogicalInstr {
    pub opcode: Opcode,
    pub dst: Option<Reg>,
    pub src1: Option<Reg>,
    pub src2: Option<Reg>,
    pub operand: Operand,
}

impl LogicalInstr {
    pub fn kind(&self) -> Kind {
        self.opcode.kind()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Terminator<'a> {
    Fallthrough,
    Branch { opcode: Opcode, target: &'a str },
    Jump { target: &'a str },
    Call { callee: &'a str },
    Ret,
    Halt,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasicBlock {
    pub label: String,
    pub instrs: Vec<LogicalInstr>,
}

impl BasicBlock {
    pub fn terminator(&self) -> Terminator<'_> {
        let Some(last) = self.instrs.last() else {
            return Terminator::Fallthrough;
        };
        match (last.kind(), &last.operand) {
            (Kind::Branch, Operand::Label(t)) => Terminator::Branch {
                opcode: last.opcode,
                target: t,
            },
            (Kind::Jump, Operand::Label(t)) => Terminator::Jump { target: t },
            (Kind::Call, Operand::Func(t)) => Terminator::Call { callee: t },
            (Kind::Ret, _) => Terminator::Ret,
            (Kind::Halt, _) => Terminator::Halt,
            _ => Terminator::Fallthrough,
        }
    }

    /// Whether control can continue to the next block in source order.
    pub fn falls_through(&self) -> bool {
        matches!(
            self.terminator(),
            Terminator::Fallthrough | Terminator::Branch { .. } | Terminator::Call { .. }
        )
    }

    pub fn byte_size(&self) -> u32 {
        self.instrs.len() as u32 * INSTR_WIDTH
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Function {
    pub name: String,
    pub blocks: Vec<BasicBlock>,
}

impl Function {
    pub fn block_index(&self, label: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.label == label)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataObject {
    pub name: String,
    pub size: u32,
    pub init: Vec<i32>,
    /// Lives in the shared (excluded) I/O region at the same address in
    /// every replica.
    pub shared: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogicalProgram {
    pub functions: Vec<Function>,
    pub data: Vec<DataObject>,
    pub entry: String,
}

impl LogicalProgram {
    pub fn function_index(&self, name: &str) -> Option<usize> {
        self.functions.iter().position(|f| f.name == name)
    }

    pub fn entry_index(&self) -> usize {
        self.function_index(&self.entry).expect("validated program has an entry")
    }

    pub fn data_index(&self, name: &str) -> Option<usize> {
        self.data.iter().position(|d| d.name == name)
    }

    pub fn instr(&self, id: LogicalInstrId) -> &LogicalInstr {
        &self.functions[id.function as usize].blocks[id.block as usize].instrs[id.index as usize]
    }

    /// All logical instruction ids in source order.
    pub fn instr_ids(&self) -> impl Iterator<Item = LogicalInstrId> + '_ {
        self.functions.iter().enumerate().flat_map(|(f, func)| {
            func.blocks.iter().enumerate().flat_map(move |(b, block)| {
                (0..block.instrs.len()).map(move |i| LogicalInstrId {
                    function: f as u32,
                    block: b as u32,
                    index: i as u32,
                })
            })
        })
    }

    pub fn instr_count(&self) -> usize {
        self.functions
            .iter()
            .flat_map(|f| &f.blocks)
            .map(|b| b.instrs.len())
            .sum()
    }

    /// Renders the program back into parseable assembly.
    pub fn pretty(&self) -> String {
        let mut out = String::new();
        for d in &self.data {
            if d.shared {
                let _ = writeln!(out, ".mmio {}", d.name);
            } else {
                let _ = write!(out, ".data {} {}", d.name, d.size);
                for w in &d.init {
                    let _ = write!(out, " {w}");
                }
                out.push('\n');
            }
        }
        let _ = writeln!(out, ".entry {}", self.entry);
        for func in &self.functions {
            let _ = writeln!(out, "\n.func {}", func.name);
            for (bi, block) in func.blocks.iter().enumerate() {
                if bi > 0 {
                    let _ = writeln!(out, "{}:", block.label);
                }
                for instr in &block.instrs {
                    let _ = writeln!(out, "    {}", render_instr(instr));
                }
            }
        }
        out
    }
}

fn render_instr(i: &LogicalInstr) -> String {
    let r = |x: Option<Reg>| x.map(|r| r.to_string()).unwrap_or_default();
    let op = i.opcode;
    let operand = match &i.operand {
        Operand::None => String::new(),
        Operand::Imm(v) => v.to_string(),
        Operand::Addr(n) => format!("&{n}"),
        Operand::Label(n) | Operand::Func(n) => n.clone(),
    };
    let offset = match &i.operand {
        Operand::Imm(v) if *v < 0 => format!("-{}", v.unsigned_abs()),
        Operand::Imm(v) => format!("+{v}"),
        _ => String::new(),
    };
    match op.format() {
        Format::Bare => op.to_string(),
        Format::Reg3 => format!("{op} {}, {}, {}", r(i.dst), r(i.src1), r(i.src2)),
        Format::Reg2 => format!("{op} {}, {}", r(i.src1), r(i.src2)),
        Format::Ldi => format!("{op} {}, {operand}", r(i.dst)),
        Format::Load => format!("{op} {}, [{}{offset}]", r(i.dst), r(i.src1)),
        Format::Store => format!("{op} [{}{offset}], {}", r(i.src1), r(i.src2)),
        Format::Disp => format!("{op} {operand}"),
    }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn parse_int(s: &str) -> Option<i64> {
    let s = s.trim();
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let v = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        i64::from_str_radix(hex, 16).ok()?
    } else {
        body.parse::<i64>().ok()?
    };
    Some(if neg { -v } else { v })
}

fn parse_i32(s: &str) -> Option<i32> {
    parse_int(s).and_then(|v| {
        if (i32::MIN as i64..=u32::MAX as i64).contains(&v) {
            Some(v as i32)
        } else {
            None
        }
    })
}

/// Parses `[rN]`, `[rN+imm]`, `[rN-imm]`.
fn parse_mem(s: &str) -> Option<(Reg, i32)> {
    let inner = s.trim().strip_prefix('[')?.strip_suffix(']')?.trim();
    let split = inner.find(['+', '-']);
    match split {
        None => Some((inner.parse().ok()?, 0)),
        Some(pos) => {
            let reg = inner[..pos].trim().parse().ok()?;
            let off = parse_i32(&inner[pos..].replace(' ', ""))?;
            Some((reg, off))
        }
    }
}

struct Parser {
    diags: Vec<Diagnostic>,
    functions: Vec<Function>,
    data: Vec<DataObject>,
    entry: Option<(String, u32)>,
    /// (function, block) -> line on which the block was opened
    block_lines: BTreeMap<(usize, usize), u32>,
    /// instruction id -> (line, column)
    instr_lines: BTreeMap<LogicalInstrId, (u32, u32)>,
    data_lines: BTreeMap<String, u32>,
    /// label seen but no instruction yet
    pending_label: Option<(String, u32)>,
    /// current block was closed by a terminator
    block_closed: bool,
}

impl Parser {
    fn error(&mut self, code: DiagCode, line: u32, col: u32, msg: impl Into<String>) {
        self.diags.push(Diagnostic::new(code, line, col, msg));
    }

    fn flush_empty_label(&mut self) {
        if let Some((label, line)) = self.pending_label.take() {
            self.error(
                DiagCode::EmptyBlock,
                line,
                1,
                format!("block `{label}` has no instructions"),
            );
        }
    }

    fn directive(&mut self, line: u32, text: &str) {
        let mut parts = text.split_whitespace();
        let name = parts.next().unwrap_or_default();
        let args: Vec<&str> = parts.collect();
        match name {
            ".data" => {
                if args.len() < 2 || !is_ident(args[0]) {
                    return self.error(DiagCode::BadDirective, line, 1, "expected `.data name size [init...]`");
                }
                let Some(size) = parse_int(args[1]).filter(|s| *s > 0 && *s % 4 == 0 && *s <= 1 << 16) else {
                    return self.error(DiagCode::BadDirective, line, 1, "data size must be a positive multiple of 4");
                };
                let mut init = Vec::new();
                for a in &args[2..] {
                    match parse_i32(a) {
                        Some(v) => init.push(v),
                        None => return self.error(DiagCode::MalformedOperand, line, 1, format!("bad init word `{a}`")),
                    }
                }
                if init.len() as i64 * 4 > size {
                    return self.error(DiagCode::BadDirective, line, 1, "more init words than the object holds");
                }
                self.add_data(line, args[0], size as u32, init, false);
            }
            ".mmio" => {
                if args.len() != 1 || !is_ident(args[0]) {
                    return self.error(DiagCode::BadDirective, line, 1, "expected `.mmio name`");
                }
                self.add_data(line, args[0], 4, Vec::new(), true);
            }
            ".func" => {
                if args.len() != 1 || !is_ident(args[0]) {
                    return self.error(DiagCode::BadDirective, line, 1, "expected `.func name`");
                }
                self.flush_empty_label();
                let fname = args[0].to_string();
                if self.functions.iter().any(|f| f.name == fname) {
                    self.error(DiagCode::DuplicateLabel, line, 1, format!("duplicate function `{fname}`"));
                }
                self.functions.push(Function {
                    name: fname.clone(),
                    blocks: Vec::new(),
                });
                self.pending_label = Some((fname, line));
                self.block_closed = false;
            }
            ".entry" => {
                if args.len() != 1 {
                    return self.error(DiagCode::BadDirective, line, 1, "expected `.entry name`");
                }
                self.entry = Some((args[0].to_string(), line));
            }
            other => self.error(DiagCode::BadDirective, line, 1, format!("unknown directive `{other}`")),
        }
    }

    fn add_data(&mut self, line: u32, name: &str, size: u32, init: Vec<i32>, shared: bool) {
        if self.data.iter().any(|d| d.name == name) {
            return self.error(DiagCode::DuplicateLabel, line, 1, format!("duplicate data object `{name}`"));
        }
        self.data_lines.insert(name.to_string(), line);
        self.data.push(DataObject {
            name: name.to_string(),
            size,
            init,
            shared,
        });
    }

    fn label(&mut self, line: u32, col: u32, label: &str) {
        if self.functions.is_empty() {
            return self.error(DiagCode::OutsideFunction, line, col, "label outside of a function");
        }
        if !is_ident(label) {
            return self.error(DiagCode::MalformedOperand, line, col, format!("bad label `{label}`"));
        }
        self.flush_empty_label();
        self.pending_label = Some((label.to_string(), line));
        self.block_closed = false;
    }

    fn instruction(&mut self, line: u32, col: u32, text: &str) {
        let (mnemonic, rest) = match text.find(char::is_whitespace) {
            Some(p) => (&text[..p], text[p..].trim()),
            None => (text, ""),
        };
        let Some(opcode) = Opcode::from_mnemonic(mnemonic) else {
            return self.error(DiagCode::UnknownMnemonic, line, col, format!("unknown mnemonic `{mnemonic}`"));
        };
        if self.functions.is_empty() {
            return self.error(DiagCode::OutsideFunction, line, col, "instruction outside of a function");
        }
        let operands = split_operands(rest);
        let instr = match build_instr(opcode, &operands) {
            Ok(i) => i,
            Err(msg) => return self.error(DiagCode::MalformedOperand, line, col, format!("{opcode}: {msg}")),
        };
        let fi = self.functions.len() - 1;
        let func = self.functions.last_mut().unwrap();
        let new_block = match self.pending_label.take() {
            Some((label, _)) => Some(label),
            None if func.blocks.is_empty() || self.block_closed => {
                Some(format!("{}.{}", func.name, func.blocks.len()))
            }
            None => None,
        };
        if let Some(label) = new_block {
            if func.blocks.iter().any(|b| b.label == label) {
                self.diags.push(Diagnostic::new(
                    DiagCode::DuplicateLabel,
                    line,
                    col,
                    format!("duplicate label `{label}` in `{}`", func.name),
                ));
            }
            func.blocks.push(BasicBlock {
                label,
                instrs: Vec::new(),
            });
            self.block_lines.insert((fi, func.blocks.len() - 1), line);
        }
        let bi = func.blocks.len() - 1;
        let block = &mut func.blocks[bi];
        self.instr_lines.insert(
            LogicalInstrId {
                function: fi as u32,
                block: bi as u32,
                index: block.instrs.len() as u32,
            },
            (line, col),
        );
        self.block_closed = opcode.is_control_transfer();
        block.instrs.push(instr);
    }
}

fn split_operands(rest: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0;
    let mut cur = String::new();
    for c in rest.chars() {
        match c {
            '[' => {
                depth += 1;
                cur.push(c);
            }
            ']' => {
                depth -= 1;
                cur.push(c);
            }
            ',' if depth == 0 => {
                out.push(cur.trim().to_string());
                cur.clear();
            }
            _ => cur.push(c),
        }
    }
    if !cur.trim().is_empty() || !out.is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

fn build_instr(opcode: Opcode, ops: &[String]) -> Result<LogicalInstr, String> {
    let expect = |n: usize| {
        if ops.len() == n {
            Ok(())
        } else {
            Err(format!("expected {n} operand(s), found {}", ops.len()))
        }
    };
    let reg = |s: &str| s.parse::<Reg>().map_err(|_| format!("bad register `{s}`"));
    let mut i = LogicalInstr {
        opcode,
        dst: None,
        src1: None,
        src2: None,
        operand: Operand::None,
    };
    match opcode.format() {
        Format::Bare => expect(0)?,
        Format::Reg3 => {
            expect(3)?;
            i.dst = Some(reg(&ops[0])?);
            i.src1 = Some(reg(&ops[1])?);
            i.src2 = Some(reg(&ops[2])?);
        }
        Format::Reg2 => {
            expect(2)?;
            i.src1 = Some(reg(&ops[0])?);
            i.src2 = Some(reg(&ops[1])?);
        }
        Format::Ldi => {
            expect(2)?;
            i.dst = Some(reg(&ops[0])?);
            i.operand = if let Some(name) = ops[1].strip_prefix('&') {
                if !is_ident(name) {
                    return Err(format!("bad object name `{name}`"));
                }
                Operand::Addr(name.to_string())
            } else {
                let v = parse_i32(&ops[1]).ok_or_else(|| format!("bad immediate `{}`", ops[1]))?;
                if !(-(1 << 19)..(1 << 19)).contains(&v) {
                    return Err(format!("immediate {v} does not fit in 20 bits"));
                }
                Operand::Imm(v)
            };
        }
        Format::Load => {
            expect(2)?;
            i.dst = Some(reg(&ops[0])?);
            let (base, off) = parse_mem(&ops[1]).ok_or_else(|| format!("bad memory operand `{}`", ops[1]))?;
            i.src1 = Some(base);
            i.operand = Operand::Imm(check_off(off)?);
        }
        Format::Store => {
            expect(2)?;
            let (base, off) = parse_mem(&ops[0]).ok_or_else(|| format!("bad memory operand `{}`", ops[0]))?;
            i.src1 = Some(base);
            i.src2 = Some(reg(&ops[1])?);
            i.operand = Operand::Imm(check_off(off)?);
        }
        Format::Disp => {
            expect(1)?;
            if !is_ident(&ops[0]) {
                return Err(format!("bad target `{}`", ops[0]));
            }
            i.operand = if opcode == Opcode::Call {
                Operand::Func(ops[0].clone())
            } else {
                Operand::Label(ops[0].clone())
            };
        }
    }
    Ok(i)
}

fn check_off(off: i32) -> Result<i32, String> {
    if (-2048..=2047).contains(&off) {
        Ok(off)
    } else {
        Err(format!("offset {off} does not fit in 12 bits"))
    }
}

/// Parses assembly source. Returns the program (with any warnings) or the
/// full list of diagnostics when there is at least one error.
pub fn parse(source: &str) -> Result<(LogicalProgram, Vec<Diagnostic>), Vec<Diagnostic>> {
    let mut p = Parser {
        diags: Vec::new(),
        functions: Vec::new(),
        data: Vec::new(),
        entry: None,
        block_lines: BTreeMap::new(),
        instr_lines: BTreeMap::new(),
        data_lines: BTreeMap::new(),
        pending_label: None,
        block_closed: false,
    };
    for (n, raw) in source.lines().enumerate() {
        let line = n as u32 + 1;
        let text = raw.split(';').next().unwrap_or_default();
        let indent = text.len() - text.trim_start().len();
        let mut text = text.trim();
        let mut col = indent as u32 + 1;
        if text.is_empty() {
            continue;
        }
        if text.starts_with('.') {
            p.directive(line, text);
            continue;
        }
        if let Some(pos) = text.find(':') {
            let label = text[..pos].trim();
            if !label.contains(char::is_whitespace) && !label.contains('[') {
                p.label(line, col, label);
                let rest = &text[pos + 1..];
                col += (pos + 1 + rest.len() - rest.trim_start().len()) as u32;
                text = rest.trim();
                if text.is_empty() {
                    continue;
                }
            }
        }
        p.instruction(line, col, text);
    }
    p.flush_empty_label();

    let entry = match &p.entry {
        Some((name, _)) => name.clone(),
        None if p.functions.iter().any(|f| f.name == "main") => "main".into(),
        None => p.functions.first().map(|f| f.name.clone()).unwrap_or_default(),
    };
    let program = LogicalProgram {
        functions: p.functions,
        data: p.data,
        entry,
    };
    let mut diags = p.diags;
    let locate = |id: LogicalInstrId| p.instr_lines.get(&id).copied().unwrap_or((0, 0));
    let block_line = |f: usize, b: usize| p.block_lines.get(&(f, b)).copied().unwrap_or(0);
    let entry_line = p.entry.as_ref().map(|e| e.1).unwrap_or(0);
    diags.extend(check(&program, &locate, &block_line, entry_line));
    if diags.iter().any(Diagnostic::is_error) {
        Err(diags)
    } else {
        Ok((program, diags))
    }
}

/// Checks target resolution, terminator placement and reachability.
pub fn validate(program: &LogicalProgram) -> Vec<Diagnostic> {
    check(program, &|_| (0, 0), &|_, _| 0, 0)
}

fn check(
    program: &LogicalProgram,
    locate: &dyn Fn(LogicalInstrId) -> (u32, u32),
    block_line: &dyn Fn(usize, usize) -> u32,
    entry_line: u32,
) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    if program.function_index(&program.entry).is_none() {
        let msg = if program.functions.is_empty() {
            "no entry function".to_string()
        } else {
            format!("no entry function: `{}` is not defined", program.entry)
        };
        diags.push(Diagnostic::new(DiagCode::NoEntryFunction, entry_line, 1, msg));
        return diags;
    }
    for (fi, func) in program.functions.iter().enumerate() {
        if func.blocks.is_empty() {
            diags.push(Diagnostic::new(
                DiagCode::EmptyBlock,
                block_line(fi, 0),
                1,
                format!("function `{}` has no instructions", func.name),
            ));
            continue;
        }
        for (bi, block) in func.blocks.iter().enumerate() {
            if block.instrs.is_empty() {
                diags.push(Diagnostic::new(
                    DiagCode::EmptyBlock,
                    block_line(fi, bi),
                    1,
                    format!("block `{}` has no instructions", block.label),
                ));
            }
            for (ii, instr) in block.instrs.iter().enumerate() {
                let id = LogicalInstrId {
                    function: fi as u32,
                    block: bi as u32,
                    index: ii as u32,
                };
                let (line, col) = locate(id);
                if instr.opcode.is_control_transfer() && ii + 1 != block.instrs.len() {
                    diags.push(Diagnostic::new(
                        DiagCode::MalformedOperand,
                        line,
                        col,
                        format!("{} must terminate block `{}`", instr.opcode, block.label),
                    ));
                }
                match &instr.operand {
                    Operand::Label(t) if func.block_index(t).is_none() => diags.push(Diagnostic::new(
                        DiagCode::UndefinedTarget,
                        line,
                        col,
                        format!("undefined target `{t}` in `{}`", func.name),
                    )),
                    Operand::Func(t) if program.function_index(t).is_none() => diags.push(Diagnostic::new(
                        DiagCode::UndefinedTarget,
                        line,
                        col,
                        format!("undefined target function `{t}`"),
                    )),
                    Operand::Addr(n) if program.data_index(n).is_none() => diags.push(Diagnostic::new(
                        DiagCode::UndefinedObject,
                        line,
                        col,
                        format!("undefined data object `{n}`"),
                    )),
                    _ => {}
                }
            }
        }
        let last = func.blocks.len() - 1;
        if func.blocks[last].falls_through() && !func.blocks[last].instrs.is_empty() {
            diags.push(Diagnostic::new(
                DiagCode::FallsOffEnd,
                block_line(fi, last),
                1,
                format!("control falls off the end of `{}`", func.name),
            ));
        }
    }
    if diags.iter().any(Diagnostic::is_error) {
        return diags;
    }
    for (fi, bi) in unreachable_blocks(program) {
        diags.push(Diagnostic::new(
            DiagCode::UnreachableBlock,
            block_line(fi, bi),
            1,
            format!(
                "block `{}` in `{}` is unreachable",
                program.functions[fi].blocks[bi].label, program.functions[fi].name
            ),
        ));
    }
    diags
}

/// Successor blocks of `(function, block)` in the logical CFG, including
/// call edges into callee entry blocks.
pub fn successors(program: &LogicalProgram, fi: usize, bi: usize) -> Vec<(usize, usize)> {
    let func = &program.functions[fi];
    let block = &func.blocks[bi];
    let mut out = Vec::new();
    match block.terminator() {
        Terminator::Branch { target, .. } => {
            out.extend(func.block_index(target).map(|t| (fi, t)));
        }
        Terminator::Jump { target } => out.extend(func.block_index(target).map(|t| (fi, t))),
        Terminator::Call { callee } => out.extend(program.function_index(callee).map(|f| (f, 0))),
        _ => {}
    }
    if block.falls_through() && bi + 1 < func.blocks.len() {
        out.push((fi, bi + 1));
    }
    out
}

fn unreachable_blocks(program: &LogicalProgram) -> Vec<(usize, usize)> {
    let mut seen = HashSet::new();
    let mut stack = vec![(program.entry_index(), 0usize)];
    while let Some(node) = stack.pop() {
        if seen.insert(node) {
            stack.extend(successors(program, node.0, node.1));
        }
    }
    let mut out = Vec::new();
    for (fi, func) in program.functions.iter().enumerate() {
        for bi in 0..func.blocks.len() {
            if !seen.contains(&(fi, bi)) {
                out.push((fi, bi));
            }
        }
    }
    out
}
