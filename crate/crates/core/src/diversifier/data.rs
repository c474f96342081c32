use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{DiversificationConfig, DiversifyError};
use crate::isa::WORD_SIZE;
use crate::program::LogicalProgram;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataLayout {
    pub phi_data: BTreeMap<String, u32>,
    pub sizes: BTreeMap<String, u32>,
    /// Initial bytes from the data region base up to the last object.
    pub bytes: Vec<u8>,
    pub stack_base: u32,
}

/// Largest random gap, in words, inserted before each object.
const MAX_GAP_WORDS: u32 = 4;

/// Shuffles private objects into the replica's data region with random
/// gaps. Shared objects get fixed, replica-independent addresses.
pub fn place_data(
    p: &LogicalProgram,
    r: usize,
    cfg: &DiversificationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<DataLayout, DiversifyError> {
    let region = cfg.data_regions[r];
    let stack_base = cfg.stack_bases[r];
    let limit = stack_base - cfg.stack_reserve;

    let mut private: Vec<usize> = (0..p.data.len()).filter(|&i| !p.data[i].shared).collect();
    private.shuffle(rng);

    let mut phi_data = BTreeMap::new();
    let mut sizes = BTreeMap::new();
    let mut bytes = Vec::new();
    let mut cursor = region.base;
    for i in private {
        let obj = &p.data[i];
        cursor += rng.gen_range(0..=MAX_GAP_WORDS) * WORD_SIZE;
        let end = cursor as u64 + obj.size as u64;
        if end > limit as u64 {
            let needed = p.data.iter().filter(|d| !d.shared).map(|d| d.size).sum();
            return Err(DiversifyError::DataOverflow {
                replica: r,
                needed,
                available: limit - region.base,
            });
        }
        let off = (cursor - region.base) as usize;
        bytes.resize(off + obj.size as usize, 0);
        for (k, w) in obj.init.iter().enumerate() {
            let o = off + k * 4;
            bytes[o..o + 4].copy_from_slice(&w.to_le_bytes());
        }
        phi_data.insert(obj.name.clone(), cursor);
        sizes.insert(obj.name.clone(), obj.size);
        cursor = end as u32;
    }

    let shared: Vec<_> = p.data.iter().filter(|d| d.shared).collect();
    if !shared.is_empty() {
        let needed: u32 = shared.iter().map(|d| d.size).sum();
        let Some(region) = cfg.shared_regions.first().filter(|s| s.size >= needed) else {
            let available = cfg.shared_regions.first().map_or(0, |s| s.size);
            return Err(DiversifyError::SharedOverflow { needed, available });
        };
        let mut at = region.base;
        for d in shared {
            phi_data.insert(d.name.clone(), at);
            sizes.insert(d.name.clone(), d.size);
            at += d.size;
        }
    }

    Ok(DataLayout { phi_data, sizes, bytes, stack_base })
}
