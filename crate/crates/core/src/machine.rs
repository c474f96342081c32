//! Deterministic per-replica interpreter.
//!
//! Registers and memory words carry a shadow provenance tag recording
//! which relocatable base (data object, stack, return site) a value was
//! derived from. Tags never influence execution; the canonical projection
//! uses them to express pointer values relative to their base.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Region, ReplicaImage};
use crate::isa::{decode, Flags, Instruction, InvalidReason, Kind, Opcode, Reg, INSTR_WIDTH, SP, WORD_SIZE};
use crate::program::LogicalInstrId;

/// Relocatable base a value was derived from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProvKind {
    /// Data object, by index in name order (identical across replicas).
    Object(u32),
    Stack,
    /// Return address pushed by the CALL with this logical id.
    Return(LogicalInstrId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prov {
    pub kind: ProvKind,
    /// Replica-specific absolute base of `kind`.
    pub base: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TaggedWord {
    pub value: u32,
    pub tag: Option<Prov>,
}

impl TaggedWord {
    pub fn raw(value: u32) -> Self {
        TaggedWord { value, tag: None }
    }

    pub fn tagged(value: u32, tag: Prov) -> Self {
        TaggedWord { value, tag: Some(tag) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trap {
    InvalidInstruction(InvalidReason),
    /// Fetch from an address outside every mapped region.
    FetchFault,
    LoadFault,
    /// Store to an unmapped or read-only address.
    StoreFault,
    MisalignedAccess,
}

impl Trap {
    pub fn code(self) -> u8 {
        match self {
            Trap::InvalidInstruction(InvalidReason::Unaligned) => 1,
            Trap::InvalidInstruction(InvalidReason::UnknownOpcode) => 2,
            Trap::InvalidInstruction(InvalidReason::ReservedBits) => 3,
            Trap::FetchFault => 4,
            Trap::LoadFault => 5,
            Trap::StoreFault => 6,
            Trap::MisalignedAccess => 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    PcDelta(i32),
    PcSet(u32),
    RegSet { reg: Reg, value: u32 },
    RegBitflip { reg: Reg, bit: u8 },
    MemSet { addr: u32, value: u32 },
    MemBitflip { addr: u32, bit: u8 },
    /// Value-as-pointer: `dst := src`, tag included.
    RegCopy { dst: Reg, src: Reg },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PerturbError {
    #[error("perturbation address {0:#x} is outside replica memory or misaligned")]
    Address(u32),
    #[error("bit index {0} is out of range")]
    Bit(u8),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Segment {
    region: Region,
    bytes: Vec<u8>,
    writable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Memory {
    segments: Vec<Segment>,
    tags: HashMap<u32, Prov>,
}

impl Memory {
    fn segment(&self, addr: u32) -> Option<&Segment> {
        self.segments.iter().find(|s| s.region.contains_range(addr, WORD_SIZE))
    }

    pub fn is_mapped(&self, addr: u32) -> bool {
        self.segment(addr).is_some()
    }

    pub fn read(&self, addr: u32) -> Option<TaggedWord> {
        let seg = self.segment(addr)?;
        let off = (addr - seg.region.base) as usize;
        let value = u32::from_le_bytes(seg.bytes[off..off + 4].try_into().unwrap());
        Some(TaggedWord { value, tag: self.tags.get(&addr).copied() })
    }

    /// Writes one word. With `force`, read-only segments are writable too.
    fn write(&mut self, addr: u32, w: TaggedWord, force: bool) -> bool {
        let Some(seg) = self.segments.iter_mut().find(|s| s.region.contains_range(addr, WORD_SIZE)) else {
            return false;
        };
        if !seg.writable && !force {
            return false;
        }
        let off = (addr - seg.region.base) as usize;
        seg.bytes[off..off + 4].copy_from_slice(&w.value.to_le_bytes());
        match w.tag {
            Some(t) => self.tags.insert(addr, t),
            None => self.tags.remove(&addr),
        };
        true
    }

    pub fn read_value(&self, addr: u32) -> Option<u32> {
        self.read(addr).map(|w| w.value)
    }
}

/// Static facts about the image needed while executing.
#[derive(Debug, Clone, PartialEq, Eq)]
struct ImageInfo {
    symbols: HashMap<u32, Prov>,
    calls: HashMap<u32, LogicalInstrId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplicaState {
    pub replica: usize,
    pub pc: u32,
    pub regs: [TaggedWord; Reg::COUNT],
    pub flags: Flags,
    pub memory: Memory,
    pub halted: bool,
    pub trap: Option<Trap>,
    pub steps: u64,
    info: ImageInfo,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepEvent {
    pub replica: usize,
    pub pc_before: u32,
    /// `None` for an invalid or unfetchable word.
    pub instruction: Option<Instruction>,
    pub kind: Option<Kind>,
    /// Object index when the instruction is an `LDI &name` site.
    pub symbol: Option<u32>,
    pub loaded_value: Option<TaggedWord>,
    pub stored_value: Option<TaggedWord>,
    pub effective_address: Option<u32>,
    pub computed_result: Option<TaggedWord>,
    pub branch_taken: Option<bool>,
    pub is_nop: bool,
    pub trap: Option<Trap>,
    pub pc_after: u32,
}

impl StepEvent {
    fn new(replica: usize, pc: u32) -> Self {
        StepEvent {
            replica,
            pc_before: pc,
            instruction: None,
            kind: None,
            symbol: None,
            loaded_value: None,
            stored_value: None,
            effective_address: None,
            computed_result: None,
            branch_taken: None,
            is_nop: false,
            trap: None,
            pc_after: pc,
        }
    }
}

/// Object index used by [`ProvKind::Object`]: position in name order.
pub fn object_index(image: &ReplicaImage, name: &str) -> Option<u32> {
    image.phi_data.keys().position(|n| n == name).map(|i| i as u32)
}

pub fn reset(image: &ReplicaImage) -> ReplicaState {
    let mut code = image.code.clone();
    code.resize(image.code_region.size as usize, 0);
    let mut data = image.data.clone();
    data.resize(image.data_region.size as usize, 0);
    let mut segments = vec![
        Segment { region: image.code_region, bytes: code, writable: false },
        Segment { region: image.data_region, bytes: data, writable: true },
    ];
    for r in &image.shared_regions {
        segments.push(Segment { region: *r, bytes: vec![0; r.size as usize], writable: true });
    }

    let objects: HashMap<&str, u32> = image.phi_data.keys().enumerate().map(|(i, n)| (n.as_str(), i as u32)).collect();
    let symbols = image
        .symbols
        .iter()
        .map(|(addr, name)| {
            let base = image.phi_data[name];
            (*addr, Prov { kind: ProvKind::Object(objects[name.as_str()]), base })
        })
        .collect();
    let by_addr = image.logical_at();
    let calls = by_addr
        .into_iter()
        .filter(|(a, _)| image.instruction_at(*a).is_some_and(|i| i.opcode == Opcode::Call))
        .collect();

    let mut regs = [TaggedWord::default(); Reg::COUNT];
    regs[SP.index()] = TaggedWord::tagged(image.stack_base, Prov { kind: ProvKind::Stack, base: image.stack_base });
    ReplicaState {
        replica: image.replica,
        pc: image.entry,
        regs,
        flags: Flags::default(),
        memory: Memory { segments, tags: HashMap::new() },
        halted: false,
        trap: None,
        steps: 0,
        info: ImageInfo { symbols, calls },
    }
}

fn alu(op: Opcode, a: TaggedWord, b: TaggedWord) -> TaggedWord {
    let (x, y) = (a.value, b.value);
    let value = match op {
        Opcode::Add => x.wrapping_add(y),
        Opcode::Sub => x.wrapping_sub(y),
        Opcode::And => x & y,
        Opcode::Or => x | y,
        Opcode::Xor => x ^ y,
        Opcode::Shl => x.wrapping_shl(y & 31),
        Opcode::Shr => x.wrapping_shr(y & 31),
        _ => unreachable!("not a three-register ALU opcode"),
    };
    let tag = match (op, a.tag, b.tag) {
        (Opcode::Add, Some(t), None) | (Opcode::Add, None, Some(t)) => Some(t),
        (Opcode::Sub, Some(t), None) => Some(t),
        _ => None,
    };
    TaggedWord { value, tag }
}

impl ReplicaState {
    pub fn reg(&self, r: Reg) -> TaggedWord {
        self.regs[r.index()]
    }

    fn set_reg(&mut self, r: Reg, w: TaggedWord) {
        self.regs[r.index()] = w;
    }

    fn fail(&mut self, mut ev: StepEvent, trap: Trap) -> StepEvent {
        self.trap = Some(trap);
        self.halted = true;
        ev.trap = Some(trap);
        ev.pc_after = self.pc;
        ev
    }

    /// Executes one instruction. Returns `None` once halted.
    pub fn step(&mut self) -> Option<StepEvent> {
        if self.halted {
            return None;
        }
        self.steps += 1;
        let pc = self.pc;
        let mut ev = StepEvent::new(self.replica, pc);
        let Some(word) = self.memory.read(pc).map(|w| w.value) else {
            return Some(self.fail(ev, Trap::FetchFault));
        };
        let instr = match decode(word, pc % INSTR_WIDTH == 0).instruction() {
            Some(i) => *i,
            None => {
                let reason = match decode(word, pc % INSTR_WIDTH == 0) {
                    crate::isa::DecodeOutcome::Invalid { reason, .. } => reason,
                    crate::isa::DecodeOutcome::Valid(_) => unreachable!(),
                };
                return Some(self.fail(ev, Trap::InvalidInstruction(reason)));
            }
        };
        ev.instruction = Some(instr);
        ev.kind = Some(instr.kind());
        let r = |x: Option<Reg>| x.expect("decoded operand present");
        let imm = instr.imm.unwrap_or(0);
        let mut next = pc.wrapping_add(INSTR_WIDTH);

        match instr.opcode {
            Opcode::Nop => ev.is_nop = true,
            Opcode::Halt => self.halted = true,
            Opcode::Add | Opcode::Sub | Opcode::And | Opcode::Or | Opcode::Xor | Opcode::Shl | Opcode::Shr => {
                let out = alu(instr.opcode, self.reg(r(instr.src1)), self.reg(r(instr.src2)));
                self.set_reg(r(instr.dst), out);
                ev.computed_result = Some(out);
            }
            Opcode::Cmp => {
                self.flags = Flags::compare(self.reg(r(instr.src1)).value, self.reg(r(instr.src2)).value);
                ev.computed_result = Some(TaggedWord::raw(self.flags.bits()));
            }
            Opcode::Ldi => {
                let value = imm as u32;
                let out = match self.info.symbols.get(&pc) {
                    Some(p) => {
                        if let ProvKind::Object(i) = p.kind {
                            ev.symbol = Some(i);
                        }
                        TaggedWord::tagged(value, *p)
                    }
                    None => TaggedWord::raw(value),
                };
                self.set_reg(r(instr.dst), out);
                ev.computed_result = Some(out);
            }
            Opcode::Load | Opcode::Store => {
                let ea = self.reg(r(instr.src1)).value.wrapping_add_signed(imm);
                ev.effective_address = Some(ea);
                if ea % WORD_SIZE != 0 {
                    return Some(self.fail(ev, Trap::MisalignedAccess));
                }
                if instr.opcode == Opcode::Load {
                    let Some(w) = self.memory.read(ea) else {
                        return Some(self.fail(ev, Trap::LoadFault));
                    };
                    self.set_reg(r(instr.dst), w);
                    ev.loaded_value = Some(w);
                } else {
                    let w = self.reg(r(instr.src2));
                    if !self.memory.write(ea, w, false) {
                        return Some(self.fail(ev, Trap::StoreFault));
                    }
                    ev.stored_value = Some(w);
                }
            }
            Opcode::Beq | Opcode::Bne | Opcode::Blt | Opcode::Bge => {
                let taken = instr.condition().expect("branch has a condition").holds(self.flags);
                ev.branch_taken = Some(taken);
                if taken {
                    next = pc.wrapping_add_signed(imm);
                }
            }
            Opcode::Jmp => next = pc.wrapping_add_signed(imm),
            Opcode::Call => {
                let sp = self.reg(SP);
                let new_sp = TaggedWord { value: sp.value.wrapping_sub(WORD_SIZE), tag: sp.tag };
                let ret = match self.info.calls.get(&pc) {
                    Some(id) => TaggedWord::tagged(next, Prov { kind: ProvKind::Return(*id), base: next }),
                    None => TaggedWord::raw(next),
                };
                if new_sp.value % WORD_SIZE != 0 || !self.memory.write(new_sp.value, ret, false) {
                    return Some(self.fail(ev, Trap::StoreFault));
                }
                self.set_reg(SP, new_sp);
                ev.stored_value = Some(ret);
                next = pc.wrapping_add_signed(imm);
            }
            Opcode::Ret => {
                let sp = self.reg(SP);
                if sp.value % WORD_SIZE != 0 {
                    return Some(self.fail(ev, Trap::MisalignedAccess));
                }
                let Some(ret) = self.memory.read(sp.value) else {
                    return Some(self.fail(ev, Trap::LoadFault));
                };
                self.set_reg(SP, TaggedWord { value: sp.value.wrapping_add(WORD_SIZE), tag: sp.tag });
                ev.loaded_value = Some(ret);
                next = ret.value;
            }
        }
        if !self.halted {
            self.pc = next;
        }
        ev.pc_after = self.pc;
        Some(ev)
    }

    /// Applies one perturbation between steps.
    pub fn apply_perturbation(&mut self, p: &Perturbation) -> Result<(), PerturbError> {
        let bit = |b: u8| if b < 32 { Ok(1u32 << b) } else { Err(PerturbError::Bit(b)) };
        match *p {
            Perturbation::PcDelta(d) => self.pc = self.pc.wrapping_add_signed(d),
            Perturbation::PcSet(v) => self.pc = v,
            Perturbation::RegSet { reg, value } => self.set_reg(reg, TaggedWord::raw(value)),
            Perturbation::RegBitflip { reg, bit: b } => {
                let mask = bit(b)?;
                let w = self.reg(reg);
                self.set_reg(reg, TaggedWord { value: w.value ^ mask, tag: w.tag });
            }
            Perturbation::MemSet { addr, value } => {
                if addr % WORD_SIZE != 0 || !self.memory.write(addr, TaggedWord::raw(value), true) {
                    return Err(PerturbError::Address(addr));
                }
            }
            Perturbation::MemBitflip { addr, bit: b } => {
                let mask = bit(b)?;
                let w = self
                    .memory
                    .read(addr)
                    .filter(|_| addr % WORD_SIZE == 0)
                    .ok_or(PerturbError::Address(addr))?;
                self.memory.write(addr, TaggedWord { value: w.value ^ mask, tag: w.tag }, true);
            }
            Perturbation::RegCopy { dst, src } => self.set_reg(dst, self.reg(src)),
        }
        Ok(())
    }

    /// Current words of a data object.
    pub fn object_words(&self, image: &ReplicaImage, name: &str) -> Option<Vec<i32>> {
        let base = *image.phi_data.get(name)?;
        let size = image.data_sizes[name];
        (0..size / WORD_SIZE)
            .map(|k| self.memory.read_value(base + k * WORD_SIZE).map(|v| v as i32))
            .collect()
    }
}

/// Result of running one replica alone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SoloRun {
    pub state: ReplicaState,
    pub events: Vec<StepEvent>,
    /// Stopped by `max_steps` rather than HALT or a trap.
    pub exhausted: bool,
}

pub fn run_to_halt(image: &ReplicaImage, max_steps: u64) -> SoloRun {
    let mut state = reset(image);
    let mut events = Vec::new();
    while state.steps < max_steps {
        match state.step() {
            Some(e) => events.push(e),
            None => break,
        }
    }
    let exhausted = !state.halted;
    SoloRun { state, events, exhausted }
}
