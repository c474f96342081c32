use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{DataLayout, DiversificationConfig, DiversifyError};
use crate::image::{Fragment, ReplicaImage};
use crate::isa::{Instruction, Kind, Opcode, INSTR_WIDTH};
use crate::program::{BasicBlock, LogicalInstrId, LogicalProgram, Operand, Terminator};

/// Physical order of functions and, per function, of its blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockOrder {
    pub functions: Vec<usize>,
    /// Indexed by function id.
    pub blocks: Vec<Vec<usize>>,
}

/// Replica 0 keeps source order, replica 1 reverses it, others shuffle.
fn permute<T>(items: &mut [T], r: usize, rng: &mut ChaCha8Rng) {
    match r {
        0 => {}
        1 => items.reverse(),
        _ => items.shuffle(rng),
    }
}

pub fn place_blocks(p: &LogicalProgram, r: usize, rng: &mut ChaCha8Rng) -> BlockOrder {
    let mut functions: Vec<usize> = (0..p.functions.len()).collect();
    permute(&mut functions, r, rng);
    let blocks = p
        .functions
        .iter()
        .map(|f| {
            let mut order: Vec<usize> = (0..f.blocks.len()).collect();
            permute(&mut order, r, rng);
            order
        })
        .collect();
    BlockOrder { functions, blocks }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Nop,
    /// Logical instruction index within the block.
    Logical(u32),
}

/// NOP placement for a block of `len` logical instructions: one NOP
/// before each instruction whose logical byte offset is `offset_r` mod `l`.
pub fn insert_nops(len: usize, r: usize, cfg: &DiversificationConfig) -> Vec<Slot> {
    let offset = cfg.nop_offset(r);
    let mut slots = Vec::with_capacity(len + len / 2);
    for i in 0..len as u32 {
        if (i * INSTR_WIDTH) % cfg.stride == offset {
            slots.push(Slot::Nop);
        }
        slots.push(Slot::Logical(i));
    }
    slots
}

/// Cut pattern for a block of `len` logical instructions. Each chunk holds
/// at most `L_crit/w - 1` logical instructions so that chunk plus stitch
/// jump fits `L_crit`; odd replicas lengthen the first chunk by one.
pub fn fragment(len: usize, r: usize, cfg: &DiversificationConfig) -> Vec<Range<u32>> {
    let len = len as u32;
    if len * INSTR_WIDTH <= cfg.critical_size {
        return vec![0..len];
    }
    let max = cfg.critical_size / INSTR_WIDTH - 1;
    let base = max.saturating_sub(1).max(1);
    let first = (base + (r as u32 % 2)).min(max);
    let mut out = vec![0..first.min(len)];
    let mut at = first;
    while at < len {
        let end = (at + base).min(len);
        out.push(at..end);
        at = end;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct UnitKey {
    function: usize,
    block: usize,
    chunk: usize,
}

#[derive(Debug, Clone, Copy)]
enum Item {
    Logical(LogicalInstrId),
    Nop,
    Stitch(UnitKey),
}

struct Unit {
    key: UnitKey,
    range: Range<u32>,
    last_chunk: bool,
    items: Vec<Item>,
}

fn build_units(p: &LogicalProgram, cfg: &DiversificationConfig, r: usize, rng: &mut ChaCha8Rng) -> Vec<Unit> {
    let order = place_blocks(p, r, rng);
    let mut units = Vec::new();
    for &fi in &order.functions {
        let func = &p.functions[fi];
        let padded = cfg.nop_scope.covers(&func.name);
        let mut pool = Vec::new();
        for &bi in &order.blocks[fi] {
            let len = func.blocks[bi].instrs.len();
            let slots = if padded {
                insert_nops(len, r, cfg)
            } else {
                (0..len as u32).map(Slot::Logical).collect()
            };
            let mut chunks = fragment(len, r, cfg);
            if r % 2 == 1 && chunks.len() == 1 && len >= 2 && is_self_loop(&func.blocks[bi]) {
                // Moving the closing branch into the pool, which precedes
                // the function in odd replicas, makes the back-edge forward.
                chunks = vec![0..len as u32 - 1, len as u32 - 1..len as u32];
            }
            let n_chunks = chunks.len();
            let mut rest = slots.into_iter().peekable();
            for (ci, range) in chunks.into_iter().enumerate() {
                let mut items = Vec::new();
                while let Some(&s) = rest.peek() {
                    match s {
                        Slot::Logical(i) if i >= range.end => break,
                        Slot::Logical(i) => items.push(Item::Logical(LogicalInstrId {
                            function: fi as u32,
                            block: bi as u32,
                            index: i,
                        })),
                        Slot::Nop => items.push(Item::Nop),
                    }
                    rest.next();
                }
                let unit = Unit {
                    key: UnitKey { function: fi, block: bi, chunk: ci },
                    range,
                    last_chunk: ci + 1 == n_chunks,
                    items,
                };
                if ci == 0 {
                    units.push(unit);
                } else {
                    pool.push(unit);
                }
            }
        }
        permute(&mut pool, r, rng);
        if r % 2 == 1 {
            units.splice(units.len() - order.blocks[fi].len()..units.len() - order.blocks[fi].len(), pool);
        } else {
            units.extend(pool);
        }
    }
    // Stitch jumps: every non-final chunk continues to the next one; a
    // final chunk that falls through jumps to its successor unless the
    // successor happens to be physically next.
    let next_keys: Vec<Option<UnitKey>> = (0..units.len()).map(|i| units.get(i + 1).map(|u| u.key)).collect();
    for (unit, next) in units.iter_mut().zip(next_keys) {
        let k = unit.key;
        let target = if !unit.last_chunk {
            Some(UnitKey { chunk: k.chunk + 1, ..k })
        } else if p.functions[k.function].blocks[k.block].falls_through() {
            Some(UnitKey { function: k.function, block: k.block + 1, chunk: 0 })
        } else {
            None
        };
        if let Some(t) = target {
            if !unit.last_chunk || next != Some(t) {
                unit.items.push(Item::Stitch(t));
            }
        }
    }
    units
}

fn is_self_loop(block: &BasicBlock) -> bool {
    matches!(block.terminator(), Terminator::Branch { target, .. } if target == block.label)
}

/// Maximum number of code-start padding words.
const MAX_START_PAD: u32 = 16;

pub(super) fn emit_replica(
    p: &LogicalProgram,
    cfg: &DiversificationConfig,
    r: usize,
    data: DataLayout,
    rng: &mut ChaCha8Rng,
) -> Result<ReplicaImage, DiversifyError> {
    let units = build_units(p, cfg, r, rng);
    let region = cfg.code_regions[r];
    let pad = rng.gen_range(0..MAX_START_PAD) * INSTR_WIDTH;

    let mut starts = HashMap::new();
    let mut at = region.base + pad;
    for u in &units {
        starts.insert(u.key, at);
        at += u.items.len() as u32 * INSTR_WIDTH;
    }
    let needed = at - region.base;
    if needed > region.size {
        return Err(DiversifyError::CodeOverflow { replica: r, needed, available: region.size });
    }

    let mut code = vec![0u8; needed as usize];
    let mut phi_code = BTreeMap::new();
    let mut nop_addresses = BTreeSet::new();
    let mut stitch_addresses = BTreeSet::new();
    let mut symbols = BTreeMap::new();
    let mut fragment_map = Vec::new();
    let main = |f: usize, b: usize| starts[&UnitKey { function: f, block: b, chunk: 0 }];

    for u in &units {
        let start = starts[&u.key];
        for (k, item) in u.items.iter().enumerate() {
            let addr = start + k as u32 * INSTR_WIDTH;
            let (instr, what) = match *item {
                Item::Nop => {
                    nop_addresses.insert(addr);
                    (Instruction::nop(), "NOP".to_string())
                }
                Item::Stitch(t) => {
                    stitch_addresses.insert(addr);
                    let disp = starts[&t] as i64 - addr as i64;
                    (Instruction::transfer(Opcode::Jmp, disp as i32), "stitch JMP".to_string())
                }
                Item::Logical(id) => {
                    phi_code.insert(id, addr);
                    let li = p.instr(id);
                    let func = &p.functions[id.function as usize];
                    let imm = match &li.operand {
                        Operand::None => None,
                        Operand::Imm(v) => Some(*v),
                        Operand::Addr(name) => {
                            symbols.insert(addr, name.clone());
                            Some(data.phi_data[name] as i32)
                        }
                        Operand::Label(l) => {
                            let b = func.block_index(l).expect("validated label");
                            Some((main(id.function as usize, b) as i64 - addr as i64) as i32)
                        }
                        Operand::Func(n) => {
                            let f = p.function_index(n).expect("validated callee");
                            Some((main(f, 0) as i64 - addr as i64) as i32)
                        }
                    };
                    let instr = Instruction {
                        opcode: li.opcode,
                        dst: li.dst,
                        src1: li.src1,
                        src2: li.src2,
                        imm,
                    };
                    (instr, format!("{} at {id}", li.opcode))
                }
            };
            let word = instr
                .encode()
                .map_err(|source| DiversifyError::Encode { replica: r, what, source })?;
            let off = (addr - region.base) as usize;
            code[off..off + 4].copy_from_slice(&word.to_le_bytes());
        }
        let end = start + u.items.len() as u32 * INSTR_WIDTH;
        fragment_map.push(Fragment {
            function: u.key.function as u32,
            block: u.key.block as u32,
            chunk: u.key.chunk as u32,
            first: u.range.start,
            last: u.range.end.saturating_sub(1),
            start,
            end,
        });
    }
    fragment_map.sort_by_key(|f| (f.function, f.block, f.chunk));

    let mut image = ReplicaImage {
        replica: r,
        code_region: region,
        code,
        data_region: cfg.data_regions[r],
        data: data.bytes,
        shared_regions: cfg.shared_regions.clone(),
        phi_code,
        phi_data: data.phi_data,
        data_sizes: data.sizes,
        stack_base: data.stack_base,
        stack_reserve: cfg.stack_reserve,
        entry: main(p.entry_index(), 0),
        nop_addresses,
        stitch_addresses,
        fragment_map,
        symbols,
        max_transparent_run: 0,
    };
    image.max_transparent_run = max_transparent_run(&image);
    Ok(image)
}

/// Longest chain of consecutive NOP/JMP executions starting from any slot.
/// Cycles made only of such instructions count as the slot total.
pub(crate) fn max_transparent_run(image: &ReplicaImage) -> u32 {
    let slots = image.code.len() as u32 / INSTR_WIDTH;
    let mut memo: HashMap<u32, u32> = HashMap::new();
    let mut best = 0;
    for a in image.slot_addresses() {
        let mut path = Vec::new();
        let mut cur = a;
        let tail = loop {
            if let Some(&m) = memo.get(&cur) {
                break m;
            }
            if path.contains(&cur) || path.len() as u32 > slots {
                break slots;
            }
            let next = match image.instruction_at(cur) {
                Some(i) if i.kind() == Kind::Nop => cur.wrapping_add(INSTR_WIDTH),
                Some(i) if i.kind() == Kind::Jump => cur.wrapping_add_signed(i.imm.unwrap_or(0)),
                _ => break 0,
            };
            path.push(cur);
            cur = next;
        };
        let mut run = tail;
        for &addr in path.iter().rev() {
            run = (run + 1).min(slots);
            memo.insert(addr, run);
        }
        best = best.max(memo.get(&a).copied().unwrap_or(0));
    }
    best
}
