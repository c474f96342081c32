use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::DiversificationConfig;
use crate::image::{Region, ReplicaImage};
use crate::isa::{Kind, INSTR_WIDTH};
use crate::program::LogicalProgram;

/// First overlapping byte found between two replicas.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AliasWitness {
    pub replicas: [usize; 2],
    pub address: u32,
    pub first: String,
    pub second: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFraction {
    pub replicas: [usize; 2],
    pub opposite: u32,
    pub total: u32,
    /// `opposite / total`, or 1.0 when there are no transfers.
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutCertificate {
    pub non_aliasing_code: bool,
    pub code_witness: Option<AliasWitness>,
    pub non_aliasing_data: bool,
    pub data_witness: Option<AliasWitness>,
    /// Every pair of replicas differs in at least one logical address.
    pub structural_independence: bool,
    /// Every logical instruction has a distinct address in every replica.
    pub per_id_distinct: bool,
    /// Every mapped address lies inside its replica's configured regions.
    pub regions_respected: bool,
    pub branch_sign_complementarity: Vec<PairFraction>,
    /// Smallest phase distance, in logical bytes, between NOP insertion
    /// points of two replicas in the same block. `None` when no block
    /// carries NOPs in two replicas.
    pub min_logical_separation: Option<u32>,
}

impl LayoutCertificate {
    pub fn passed(&self) -> bool {
        self.non_aliasing_code
            && self.non_aliasing_data
            && self.structural_independence
            && self.per_id_distinct
            && self.regions_respected
    }

    pub fn min_complementarity(&self) -> f64 {
        self.branch_sign_complementarity
            .iter()
            .map(|p| p.fraction)
            .fold(1.0, f64::min)
    }
}

struct Interval {
    start: u32,
    end: u32,
    replica: usize,
    label: String,
}

/// Sweeps all intervals; intervals of one replica never overlap each other,
/// so any overlap with the running maximum is a cross-replica alias.
fn first_alias(mut intervals: Vec<Interval>) -> Option<AliasWitness> {
    intervals.sort_by_key(|i| (i.start, i.end));
    let mut reach: Option<&Interval> = None;
    for cur in &intervals {
        if let Some(prev) = reach {
            if cur.start < prev.end && cur.replica != prev.replica {
                return Some(AliasWitness {
                    replicas: [prev.replica, cur.replica],
                    address: cur.start,
                    first: prev.label.clone(),
                    second: cur.label.clone(),
                });
            }
        }
        if reach.is_none_or(|p| cur.end > p.end) {
            reach = Some(cur);
        }
    }
    None
}

fn in_shared(shared: &[Region], start: u32, end: u32) -> bool {
    shared.iter().any(|s| s.contains_range(start, end - start))
}

pub fn verify_certificate(
    p: &LogicalProgram,
    cfg: &DiversificationConfig,
    images: &[ReplicaImage],
) -> LayoutCertificate {
    let code: Vec<Interval> = images
        .iter()
        .flat_map(|img| {
            img.fragment_map.iter().filter(|f| f.end > f.start).map(move |f| Interval {
                start: f.start,
                end: f.end,
                replica: img.replica,
                label: format!("replica {} code of block {}/{} chunk {}", img.replica, f.function, f.block, f.chunk),
            })
        })
        .collect();
    let mut data = Vec::new();
    for img in images {
        for (name, &base) in &img.phi_data {
            let size = img.data_sizes.get(name).copied().unwrap_or(0);
            if size == 0 || in_shared(&img.shared_regions, base, base + size) {
                continue;
            }
            data.push(Interval {
                start: base,
                end: base + size,
                replica: img.replica,
                label: format!("replica {} object {name}", img.replica),
            });
        }
        if img.stack_reserve > 0 {
            data.push(Interval {
                start: img.stack_base - img.stack_reserve,
                end: img.stack_base,
                replica: img.replica,
                label: format!("replica {} stack", img.replica),
            });
        }
    }
    let code_witness = first_alias(code);
    let data_witness = first_alias(data);

    let mut structural_independence = true;
    let mut per_id_distinct = true;
    for (i, a) in images.iter().enumerate() {
        for b in &images[i + 1..] {
            let ids_equal = p.instr_ids().filter(|id| a.phi_code.get(id) == b.phi_code.get(id)).count();
            structural_independence &= ids_equal < p.instr_count();
            per_id_distinct &= ids_equal == 0;
        }
    }

    let regions_respected = images.iter().all(|img| {
        let code_ok = img.phi_code.len() == p.instr_count()
            && img.fragment_map.iter().all(|f| img.code_region.contains_range(f.start, f.end - f.start));
        let data_ok = img.phi_data.iter().all(|(name, &base)| {
            let size = img.data_sizes.get(name).copied().unwrap_or(0);
            img.data_region.contains_range(base, size) || in_shared(&img.shared_regions, base, base + size)
        });
        let nops_ok = img.phi_code.values().all(|a| !img.nop_addresses.contains(a));
        code_ok && data_ok && nops_ok
    });

    LayoutCertificate {
        non_aliasing_code: code_witness.is_none(),
        code_witness,
        non_aliasing_data: data_witness.is_none(),
        data_witness,
        structural_independence,
        per_id_distinct,
        regions_respected,
        branch_sign_complementarity: complementarity(p, images),
        min_logical_separation: min_separation(p, cfg, images),
    }
}

fn transfer_signs(p: &LogicalProgram, img: &ReplicaImage) -> Vec<i32> {
    p.instr_ids()
        .filter(|id| matches!(p.instr(*id).kind(), Kind::Branch | Kind::Jump | Kind::Call))
        .map(|id| {
            let addr = img.phi_code[&id];
            img.instruction_at(addr)
                .and_then(|i| i.imm)
                .map_or(0, i32::signum)
        })
        .collect()
}

fn complementarity(p: &LogicalProgram, images: &[ReplicaImage]) -> Vec<PairFraction> {
    let signs: Vec<Vec<i32>> = images.iter().map(|img| transfer_signs(p, img)).collect();
    let mut out = Vec::new();
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            let total = signs[i].len() as u32;
            let opposite = signs[i].iter().zip(&signs[j]).filter(|(a, b)| **a * **b < 0).count() as u32;
            let fraction = if total == 0 { 1.0 } else { opposite as f64 / total as f64 };
            out.push(PairFraction { replicas: [i, j], opposite, total, fraction });
        }
    }
    out
}

/// Logical byte offsets within the block at which a NOP precedes the
/// next logical instruction, read back from the image.
fn nop_positions(img: &ReplicaImage, function: u32, block: u32) -> BTreeSet<u32> {
    let logical = img.logical_at();
    let mut chunks: Vec<_> = img
        .fragment_map
        .iter()
        .filter(|f| f.function == function && f.block == block)
        .collect();
    chunks.sort_by_key(|f| f.chunk);
    let mut out = BTreeSet::new();
    let mut pending = false;
    for f in chunks {
        for addr in (f.start..f.end).step_by(INSTR_WIDTH as usize) {
            if img.nop_addresses.contains(&addr) {
                pending = true;
            } else if let Some(id) = logical.get(&addr) {
                if pending {
                    out.insert(id.index * INSTR_WIDTH);
                }
                pending = false;
            }
        }
    }
    out
}

fn min_separation(p: &LogicalProgram, cfg: &DiversificationConfig, images: &[ReplicaImage]) -> Option<u32> {
    let l = cfg.stride;
    let mut best: Option<u32> = None;
    for (fi, func) in p.functions.iter().enumerate() {
        for bi in 0..func.blocks.len() {
            let sets: Vec<_> = images.iter().map(|img| nop_positions(img, fi as u32, bi as u32)).collect();
            for i in 0..sets.len() {
                for j in i + 1..sets.len() {
                    for a in &sets[i] {
                        for b in &sets[j] {
                            let d = a.abs_diff(*b) % l;
                            let d = d.min(l - d);
                            best = Some(best.map_or(d, |x| x.min(d)));
                        }
                    }
                }
            }
        }
    }
    best
}
