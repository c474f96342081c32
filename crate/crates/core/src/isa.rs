//! Toy 32-bit instruction set: opcode table, fixed-width encoding and a
//! totalized decoder.
//!
//! Every instruction is one little-endian 32-bit word. Bit layout:
//!
//! ```text
//!  31      24 23  20 19  16 15  12 11           0
//! +----------+------+------+------+--------------+
//! |  opcode  |  rd  | rs1  | rs2  |    imm12     |   R / memory formats
//! +----------+------+------+------+--------------+
//! |  opcode  |  rd  |          imm20             |   LDI
//! +----------+------+----------------------------+
//! |  opcode  |            disp24                 |   BEQ BNE BLT BGE JMP CALL
//! +----------+-----------------------------------+
//! ```
//!
//! Unused fields must be zero; a word with a nonzero unused field decodes
//! to [`DecodeOutcome::Invalid`] so that decoding is injective.

use std::fmt;
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::One;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Instruction width in bytes.
pub const INSTR_WIDTH: u32 = 4;
/// Data word size in bytes.
pub const WORD_SIZE: u32 = 4;
/// Register used as the stack pointer by CALL/RET.
pub const SP: Reg = Reg(15);

const IMM12_MIN: i32 = -(1 << 11);
const IMM12_MAX: i32 = (1 << 11) - 1;
const IMM20_MIN: i32 = -(1 << 19);
const IMM20_MAX: i32 = (1 << 19) - 1;
const DISP24_MIN: i32 = -(1 << 23);
const DISP24_MAX: i32 = (1 << 23) - 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodeError {
    #[error("{opcode} requires operand `{operand}`")]
    MissingOperand { opcode: Opcode, operand: &'static str },
    #[error("{opcode} does not take operand `{operand}`")]
    UnexpectedOperand { opcode: Opcode, operand: &'static str },
    #[error("{opcode}: immediate {value} outside [{min}, {max}]")]
    ImmediateRange {
        opcode: Opcode,
        value: i32,
        min: i32,
        max: i32,
    },
    #[error("register r{0} out of range")]
    BadRegister(u8),
}

/// A general-purpose register id, 0..=15.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Reg(u8);

impl Reg {
    pub const COUNT: usize = 16;

    pub fn new(id: u8) -> Option<Reg> {
        (id < 16).then_some(Reg(id))
    }

    pub fn id(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == SP {
            write!(f, "sp")
        } else {
            write!(f, "r{}", self.0)
        }
    }
}

impl FromStr for Reg {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("sp") {
            return Ok(SP);
        }
        let digits = s.strip_prefix('r').or_else(|| s.strip_prefix('R')).ok_or(())?;
        let id: u8 = digits.parse().map_err(|_| ())?;
        Reg::new(id).ok_or(())
    }
}

/// Condition codes evaluated against the flags set by CMP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cond {
    Eq,
    Ne,
    Lt,
    Ge,
}

impl Cond {
    pub fn code(self) -> u8 {
        match self {
            Cond::Eq => 0,
            Cond::Ne => 1,
            Cond::Lt => 2,
            Cond::Ge => 3,
        }
    }

    pub fn holds(self, flags: Flags) -> bool {
        match self {
            Cond::Eq => flags.eq,
            Cond::Ne => !flags.eq,
            Cond::Lt => flags.lt,
            Cond::Ge => !flags.lt,
        }
    }
}

/// Flags produced by CMP: equality and signed less-than.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Flags {
    pub eq: bool,
    pub lt: bool,
}

impl Flags {
    pub fn compare(a: u32, b: u32) -> Flags {
        Flags {
            eq: a == b,
            lt: (a as i32) < (b as i32),
        }
    }

    /// Packed form `lt << 1 | eq`, used as CMP's computed result.
    pub fn bits(self) -> u32 {
        ((self.lt as u32) << 1) | self.eq as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Alu,
    Load,
    Store,
    Branch,
    Jump,
    Call,
    Ret,
    Nop,
    Halt,
}

/// Operand format, which fixes the bit layout of the non-opcode fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    /// rd, rs1, rs2
    Reg3,
    /// rs1, rs2 (CMP)
    Reg2,
    /// rd, imm20
    Ldi,
    /// rd, [rs1 + imm12]
    Load,
    /// [rs1 + imm12], rs2
    Store,
    /// disp24
    Disp,
    /// no operands
    Bare,
}

macro_rules! opcodes {
    ($($name:ident = $code:literal, $mnemonic:literal, $kind:ident, $format:ident;)*) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "UPPERCASE")]
        pub enum Opcode {
            $($name,)*
        }

        impl Opcode {
            pub const ALL: &'static [Opcode] = &[$(Opcode::$name,)*];

            pub fn code(self) -> u8 {
                match self {
                    $(Opcode::$name => $code,)*
                }
            }

            pub fn from_code(code: u8) -> Option<Opcode> {
                match code {
                    $($code => Some(Opcode::$name),)*
                    _ => None,
                }
            }

            pub fn mnemonic(self) -> &'static str {
                match self {
                    $(Opcode::$name => $mnemonic,)*
                }
            }

            pub fn kind(self) -> Kind {
                match self {
                    $(Opcode::$name => Kind::$kind,)*
                }
            }

            pub fn format(self) -> Format {
                match self {
                    $(Opcode::$name => Format::$format,)*
                }
            }
        }
    };
}

opcodes! {
    Nop = 0x01, "NOP", Nop, Bare;
    Halt = 0x02, "HALT", Halt, Bare;
    Add = 0x10, "ADD", Alu, Reg3;
    Sub = 0x11, "SUB", Alu, Reg3;
    And = 0x12, "AND", Alu, Reg3;
    Or = 0x13, "OR", Alu, Reg3;
    Xor = 0x14, "XOR", Alu, Reg3;
    Shl = 0x15, "SHL", Alu, Reg3;
    Shr = 0x16, "SHR", Alu, Reg3;
    Cmp = 0x17, "CMP", Alu, Reg2;
    Ldi = 0x20, "LDI", Alu, Ldi;
    Load = 0x30, "LOAD", Load, Load;
    Store = 0x31, "STORE", Store, Store;
    Beq = 0x40, "BEQ", Branch, Disp;
    Bne = 0x41, "BNE", Branch, Disp;
    Blt = 0x42, "BLT", Branch, Disp;
    Bge = 0x43, "BGE", Branch, Disp;
    Jmp = 0x48, "JMP", Jump, Disp;
    Call = 0x50, "CALL", Call, Disp;
    Ret = 0x51, "RET", Ret, Bare;
}

impl Opcode {
    pub fn condition(self) -> Option<Cond> {
        match self {
            Opcode::Beq => Some(Cond::Eq),
            Opcode::Bne => Some(Cond::Ne),
            Opcode::Blt => Some(Cond::Lt),
            Opcode::Bge => Some(Cond::Ge),
            _ => None,
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Opcode> {
        Opcode::ALL
            .iter()
            .copied()
            .find(|op| op.mnemonic().eq_ignore_ascii_case(s))
    }

    /// Fixes the terminator role of an opcode inside a basic block.
    pub fn is_control_transfer(self) -> bool {
        matches!(
            self.kind(),
            Kind::Branch | Kind::Jump | Kind::Call | Kind::Ret | Kind::Halt
        )
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

/// A decoded (or to-be-encoded) instruction. Operands that the opcode's
/// format does not use are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub opcode: Opcode,
    pub dst: Option<Reg>,
    pub src1: Option<Reg>,
    pub src2: Option<Reg>,
    pub imm: Option<i32>,
}

impl Instruction {
    pub fn bare(opcode: Opcode) -> Instruction {
        Instruction {
            opcode,
            dst: None,
            src1: None,
            src2: None,
            imm: None,
        }
    }

    pub fn nop() -> Instruction {
        Self::bare(Opcode::Nop)
    }

    pub fn alu(opcode: Opcode, dst: Reg, src1: Reg, src2: Reg) -> Instruction {
        Instruction {
            opcode,
            dst: Some(dst),
            src1: Some(src1),
            src2: Some(src2),
            imm: None,
        }
    }

    pub fn cmp(src1: Reg, src2: Reg) -> Instruction {
        Instruction {
            opcode: Opcode::Cmp,
            dst: None,
            src1: Some(src1),
            src2: Some(src2),
            imm: None,
        }
    }

    pub fn ldi(dst: Reg, imm: i32) -> Instruction {
        Instruction {
            opcode: Opcode::Ldi,
            dst: Some(dst),
            src1: None,
            src2: None,
            imm: Some(imm),
        }
    }

    pub fn load(dst: Reg, base: Reg, offset: i32) -> Instruction {
        Instruction {
            opcode: Opcode::Load,
            dst: Some(dst),
            src1: Some(base),
            src2: None,
            imm: Some(offset),
        }
    }

    pub fn store(base: Reg, offset: i32, value: Reg) -> Instruction {
        Instruction {
            opcode: Opcode::Store,
            dst: None,
            src1: Some(base),
            src2: Some(value),
            imm: Some(offset),
        }
    }

    /// Branch, JMP or CALL with a byte displacement relative to the
    /// instruction's own address.
    pub fn transfer(opcode: Opcode, disp: i32) -> Instruction {
        debug_assert_eq!(opcode.format(), Format::Disp);
        Instruction {
            opcode,
            dst: None,
            src1: None,
            src2: None,
            imm: Some(disp),
        }
    }

    pub fn kind(&self) -> Kind {
        self.opcode.kind()
    }

    pub fn condition(&self) -> Option<Cond> {
        self.opcode.condition()
    }

    pub fn encode(&self) -> Result<u32, EncodeError> {
        encode(self)
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.opcode;
        let r = |x: Option<Reg>| x.map(|r| r.to_string()).unwrap_or_else(|| "?".into());
        let imm = self.imm.unwrap_or(0);
        match op.format() {
            Format::Bare => write!(f, "{op}"),
            Format::Reg3 => write!(f, "{op} {}, {}, {}", r(self.dst), r(self.src1), r(self.src2)),
            Format::Reg2 => write!(f, "{op} {}, {}", r(self.src1), r(self.src2)),
            Format::Ldi => write!(f, "{op} {}, {imm}", r(self.dst)),
            Format::Load => write!(f, "{op} {}, [{}{imm:+}]", r(self.dst), r(self.src1)),
            Format::Store => write!(f, "{op} [{}{imm:+}], {}", r(self.src1), r(self.src2)),
            Format::Disp => write!(f, "{op} {imm:+}"),
        }
    }
}

fn need(opcode: Opcode, v: Option<Reg>, operand: &'static str) -> Result<u32, EncodeError> {
    v.map(|r| r.0 as u32)
        .ok_or(EncodeError::MissingOperand { opcode, operand })
}

fn forbid<T>(opcode: Opcode, v: Option<T>, operand: &'static str) -> Result<(), EncodeError> {
    match v {
        Some(_) => Err(EncodeError::UnexpectedOperand { opcode, operand }),
        None => Ok(()),
    }
}

fn ranged(opcode: Opcode, v: Option<i32>, min: i32, max: i32) -> Result<i32, EncodeError> {
    let value = v.ok_or(EncodeError::MissingOperand {
        opcode,
        operand: "imm",
    })?;
    if value < min || value > max {
        return Err(EncodeError::ImmediateRange {
            opcode,
            value,
            min,
            max,
        });
    }
    Ok(value)
}

/// Encodes an instruction into its 32-bit word.
pub fn encode(instr: &Instruction) -> Result<u32, EncodeError> {
    let op = instr.opcode;
    let head = (op.code() as u32) << 24;
    let word = match op.format() {
        Format::Bare => {
            forbid(op, instr.dst, "dst")?;
            forbid(op, instr.src1, "src1")?;
            forbid(op, instr.src2, "src2")?;
            forbid(op, instr.imm, "imm")?;
            head
        }
        Format::Reg3 => {
            forbid(op, instr.imm, "imm")?;
            head | need(op, instr.dst, "dst")? << 20
                | need(op, instr.src1, "src1")? << 16
                | need(op, instr.src2, "src2")? << 12
        }
        Format::Reg2 => {
            forbid(op, instr.dst, "dst")?;
            forbid(op, instr.imm, "imm")?;
            head | need(op, instr.src1, "src1")? << 16 | need(op, instr.src2, "src2")? << 12
        }
        Format::Ldi => {
            forbid(op, instr.src1, "src1")?;
            forbid(op, instr.src2, "src2")?;
            let imm = ranged(op, instr.imm, IMM20_MIN, IMM20_MAX)?;
            head | need(op, instr.dst, "dst")? << 20 | (imm as u32 & 0x000F_FFFF)
        }
        Format::Load => {
            forbid(op, instr.src2, "src2")?;
            let imm = ranged(op, instr.imm, IMM12_MIN, IMM12_MAX)?;
            head | need(op, instr.dst, "dst")? << 20
                | need(op, instr.src1, "src1")? << 16
                | (imm as u32 & 0xFFF)
        }
        Format::Store => {
            forbid(op, instr.dst, "dst")?;
            let imm = ranged(op, instr.imm, IMM12_MIN, IMM12_MAX)?;
            head | need(op, instr.src1, "src1")? << 16
                | need(op, instr.src2, "src2")? << 12
                | (imm as u32 & 0xFFF)
        }
        Format::Disp => {
            forbid(op, instr.dst, "dst")?;
            forbid(op, instr.src1, "src1")?;
            forbid(op, instr.src2, "src2")?;
            let disp = ranged(op, instr.imm, DISP24_MIN, DISP24_MAX)?;
            head | (disp as u32 & 0x00FF_FFFF)
        }
    };
    Ok(word)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidReason {
    Unaligned,
    UnknownOpcode,
    ReservedBits,
}

/// Result of decoding a fetched word. Decoding never fails outright.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeOutcome {
    Valid(Instruction),
    Invalid { word: u32, reason: InvalidReason },
}

impl DecodeOutcome {
    pub fn instruction(&self) -> Option<&Instruction> {
        match self {
            DecodeOutcome::Valid(i) => Some(i),
            DecodeOutcome::Invalid { .. } => None,
        }
    }

    pub fn is_valid(&self) -> bool {
        matches!(self, DecodeOutcome::Valid(_))
    }
}

fn sign_extend(value: u32, bits: u32) -> i32 {
    let shift = 32 - bits;
    ((value << shift) as i32) >> shift
}

/// Decodes a word fetched from a (possibly unaligned) address.
pub fn decode(word: u32, alignment_ok: bool) -> DecodeOutcome {
    let invalid = |reason| DecodeOutcome::Invalid { word, reason };
    if !alignment_ok {
        return invalid(InvalidReason::Unaligned);
    }
    let Some(op) = Opcode::from_code((word >> 24) as u8) else {
        return invalid(InvalidReason::UnknownOpcode);
    };
    let rd = Reg(((word >> 20) & 0xF) as u8);
    let rs1 = Reg(((word >> 16) & 0xF) as u8);
    let rs2 = Reg(((word >> 12) & 0xF) as u8);
    let imm12 = sign_extend(word & 0xFFF, 12);
    let mut instr = Instruction::bare(op);
    let reserved = match op.format() {
        Format::Bare => word & 0x00FF_FFFF,
        Format::Reg3 => {
            instr = Instruction::alu(op, rd, rs1, rs2);
            word & 0xFFF
        }
        Format::Reg2 => {
            instr = Instruction::cmp(rs1, rs2);
            word & 0x00F0_0FFF
        }
        Format::Ldi => {
            instr = Instruction::ldi(rd, sign_extend(word & 0x000F_FFFF, 20));
            0
        }
        Format::Load => {
            instr = Instruction::load(rd, rs1, imm12);
            word & 0x0000_F000
        }
        Format::Store => {
            instr = Instruction::store(rs1, imm12, rs2);
            word & 0x00F0_0000
        }
        Format::Disp => {
            instr = Instruction::transfer(op, sign_extend(word & 0x00FF_FFFF, 24));
            0
        }
    };
    if reserved != 0 {
        return invalid(InvalidReason::ReservedBits);
    }
    DecodeOutcome::Valid(instr)
}

/// ISA field widths feeding the value-coincidence bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IsaConstants {
    pub opcode_bits: u32,
    pub reg_field_bits: u32,
    pub num_reg_fields: u32,
    pub value_bits: u32,
    pub instr_width: u32,
    pub word_size: u32,
}

impl Default for IsaConstants {
    fn default() -> Self {
        IsaConstants {
            opcode_bits: 8,
            reg_field_bits: 4,
            num_reg_fields: 3,
            value_bits: 32,
            instr_width: INSTR_WIDTH,
            word_size: WORD_SIZE,
        }
    }
}

impl IsaConstants {
    pub fn reg_bits(&self) -> u32 {
        self.reg_field_bits * self.num_reg_fields
    }
}

/// An exact power of two, `2^-exponent`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InversePowerOfTwo {
    pub exponent: u32,
}

impl InversePowerOfTwo {
    pub fn to_rational(self) -> BigRational {
        BigRational::new(BigInt::one(), BigInt::one() << self.exponent as usize)
    }
}

impl fmt::Display for InversePowerOfTwo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "2^-{}", self.exponent)
    }
}

/// Per-step value-coincidence bound `2^-(b_op + b_reg + b_val)`.
pub fn epsilon_bound(c: &IsaConstants) -> InversePowerOfTwo {
    InversePowerOfTwo {
        exponent: c.opcode_bits + c.reg_bits() + c.value_bits,
    }
}

/// Markdown reference for the opcode table and bit layout.
pub fn reference_markdown() -> String {
    let mut out = String::new();
    out.push_str("# ISA reference\n\n");
    out.push_str("Fixed-width 32-bit little-endian instruction words; instruction width 4 bytes.\n");
    out.push_str("Unused fields must be zero, otherwise the word is an invalid encoding.\n");
    out.push_str("Registers r0..r15; r15 is the stack pointer `sp`.\n\n");
    out.push_str("## Bit layout\n\n");
    out.push_str("| format | 31..24 | 23..20 | 19..16 | 15..12 | 11..0 |\n");
    out.push_str("|---|---|---|---|---|---|\n");
    out.push_str("| reg3 | opcode | rd | rs1 | rs2 | 0 |\n");
    out.push_str("| reg2 | opcode | 0 | rs1 | rs2 | 0 |\n");
    out.push_str("| ldi | opcode | rd | imm20[19..16] | imm20[15..12] | imm20[11..0] |\n");
    out.push_str("| load | opcode | rd | rs1 | 0 | imm12 |\n");
    out.push_str("| store | opcode | 0 | rs1 (base) | rs2 (value) | imm12 |\n");
    out.push_str("| disp | opcode | disp24[23..20] | disp24[19..16] | disp24[15..12] | disp24[11..0] |\n");
    out.push_str("| bare | opcode | 0 | 0 | 0 | 0 |\n\n");
    out.push_str("Immediates are two's complement. `disp24` is a byte displacement relative to the\n");
    out.push_str("address of the transfer instruction itself.\n\n");
    out.push_str("## Opcodes\n\n| code | mnemonic | kind | format | condition |\n|---|---|---|---|---|\n");
    for op in Opcode::ALL {
        out.push_str(&format!(
            "| 0x{:02X} | {} | {:?} | {:?} | {} |\n",
            op.code(),
            op.mnemonic(),
            op.kind(),
            op.format(),
            op.condition().map(|c| format!("{c:?}")).unwrap_or_else(|| "-".into())
        ));
    }
    out.push_str("\nAll other opcode values decode as invalid. Fetching from an unaligned address\n");
    out.push_str("also yields an invalid decode.\n");
    out
}
