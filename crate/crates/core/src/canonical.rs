//! Layout-free projection of step events and its digest.
//!
//! The byte serialization hashed by [`record_hash`] is specified in
//! `docs/canonical.md`.

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::isa::{Cond, Kind, Opcode, Reg};
use crate::machine::{ProvKind, StepEvent, TaggedWord, Trap};

pub const SERIALIZATION_VERSION: u8 = 1;

/// A value as seen by the comparison: either a plain word or an offset
/// from a relocatable base.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CanonWord {
    Raw(u32),
    Sym { base: ProvKind, offset: i32 },
}

impl From<TaggedWord> for CanonWord {
    fn from(w: TaggedWord) -> Self {
        match w.tag {
            Some(p) => CanonWord::Sym { base: p.kind, offset: w.value.wrapping_sub(p.base) as i32 },
            None => CanonWord::Raw(w.value),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CanonImm {
    Raw(i32),
    /// Masked `&name` immediate, by object index.
    Addr(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct CanonicalRecord {
    /// `None` for an undecodable or unfetchable word.
    pub opcode: Option<Opcode>,
    pub cond: Option<Cond>,
    pub src1: Option<Reg>,
    pub src2: Option<Reg>,
    pub dst: Option<Reg>,
    pub imm: Option<CanonImm>,
    pub loaded: Option<CanonWord>,
    pub result: Option<CanonWord>,
    pub stored: Option<CanonWord>,
    pub branch_taken: Option<bool>,
    pub trap: Option<Trap>,
}

pub type Digest = [u8; 32];

/// Projects one event. NOPs and unconditional jumps yield nothing.
pub fn canonicalize(e: &StepEvent) -> Option<CanonicalRecord> {
    let Some(instr) = e.instruction else {
        return Some(CanonicalRecord { trap: e.trap, ..Default::default() });
    };
    let kind = instr.kind();
    if matches!(kind, Kind::Nop | Kind::Jump) && e.trap.is_none() {
        return None;
    }
    let mut rec = CanonicalRecord {
        opcode: Some(instr.opcode),
        trap: e.trap,
        ..Default::default()
    };
    match kind {
        Kind::Alu => {
            rec.src1 = instr.src1;
            rec.src2 = instr.src2;
            rec.dst = instr.dst;
            if instr.opcode == Opcode::Ldi {
                rec.imm = Some(match e.symbol {
                    Some(obj) => CanonImm::Addr(obj),
                    None => CanonImm::Raw(instr.imm.unwrap_or(0)),
                });
            }
            rec.result = e.computed_result.map(CanonWord::from);
        }
        Kind::Load | Kind::Store => {
            rec.src1 = instr.src1;
            rec.src2 = instr.src2;
            rec.dst = instr.dst;
            rec.imm = instr.imm.map(CanonImm::Raw);
            rec.loaded = e.loaded_value.map(CanonWord::from);
            rec.stored = e.stored_value.map(CanonWord::from);
        }
        Kind::Branch => {
            rec.cond = instr.condition();
            rec.branch_taken = e.branch_taken;
        }
        Kind::Ret => rec.loaded = e.loaded_value.map(CanonWord::from),
        Kind::Call | Kind::Halt | Kind::Nop | Kind::Jump => {}
    }
    Some(rec)
}

fn put_word(out: &mut Vec<u8>, w: &CanonWord) {
    match *w {
        CanonWord::Raw(v) => {
            out.push(0);
            out.extend_from_slice(&v.to_le_bytes());
        }
        CanonWord::Sym { base, offset } => {
            match base {
                ProvKind::Object(i) => {
                    out.push(1);
                    out.extend_from_slice(&i.to_le_bytes());
                }
                ProvKind::Stack => out.push(2),
                ProvKind::Return(id) => {
                    out.push(3);
                    for x in [id.function, id.block, id.index] {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
            out.extend_from_slice(&offset.to_le_bytes());
        }
    }
}

/// Canonical byte serialization; the digest pre-image.
pub fn serialize(rec: &CanonicalRecord) -> Vec<u8> {
    let mut out = Vec::with_capacity(32);
    out.push(SERIALIZATION_VERSION);
    out.push(rec.opcode.map_or(0, |o| o.code()));
    let present = [
        rec.cond.is_some(),
        rec.src1.is_some(),
        rec.src2.is_some(),
        rec.dst.is_some(),
        rec.imm.is_some(),
        rec.loaded.is_some(),
        rec.result.is_some(),
        rec.stored.is_some(),
        rec.branch_taken.is_some(),
        rec.trap.is_some(),
    ];
    let mask = present.iter().enumerate().fold(0u16, |m, (i, p)| m | (u16::from(*p) << i));
    out.extend_from_slice(&mask.to_le_bytes());
    if let Some(c) = rec.cond {
        out.push(c.code());
    }
    for r in [rec.src1, rec.src2, rec.dst].into_iter().flatten() {
        out.push(r.id());
    }
    match rec.imm {
        Some(CanonImm::Raw(v)) => {
            out.push(0);
            out.extend_from_slice(&v.to_le_bytes());
        }
        Some(CanonImm::Addr(i)) => {
            out.push(1);
            out.extend_from_slice(&i.to_le_bytes());
        }
        None => {}
    }
    for w in [rec.loaded, rec.result, rec.stored].iter().flatten() {
        put_word(&mut out, w);
    }
    if let Some(t) = rec.branch_taken {
        out.push(u8::from(t));
    }
    if let Some(t) = rec.trap {
        out.push(t.code());
    }
    out
}

pub fn record_hash(rec: &CanonicalRecord) -> Digest {
    Sha256::digest(serialize(rec)).into()
}

/// Append-only canonical trace of one replica.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CanonicalTrace {
    pub records: Vec<CanonicalRecord>,
}

impl CanonicalTrace {
    pub fn push(&mut self, rec: CanonicalRecord) {
        self.records.push(rec);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Digest over the sequence of record digests.
    pub fn digest(&self) -> Digest {
        let mut h = Sha256::new();
        for r in &self.records {
            h.update(record_hash(r));
        }
        h.finalize().into()
    }

    pub fn from_events<'a>(events: impl IntoIterator<Item = &'a StepEvent>) -> Self {
        CanonicalTrace { records: events.into_iter().filter_map(canonicalize).collect() }
    }
}
