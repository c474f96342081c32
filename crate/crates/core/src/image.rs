//! Replica images and the JSON interchange container written by `build`
//! and read by `run`, `campaign` and `analyze`.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diversifier::{DiversificationConfig, LayoutCertificate};
use crate::isa::{decode, DecodeOutcome, Instruction, INSTR_WIDTH};
use crate::program::{LogicalInstrId, LogicalProgram};

pub const CONTAINER_FORMAT: &str = "divex-image/1";

/// Half-open byte range `[base, base + size)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Region {
    pub base: u32,
    pub size: u32,
}

impl Region {
    pub const fn new(base: u32, size: u32) -> Region {
        Region { base, size }
    }

    pub fn end(&self) -> u32 {
        self.base + self.size
    }

    pub fn contains(&self, addr: u32) -> bool {
        addr >= self.base && addr < self.end()
    }

    /// Whether `[addr, addr + len)` lies entirely inside the region.
    pub fn contains_range(&self, addr: u32, len: u32) -> bool {
        addr >= self.base && (addr as u64 + len as u64) <= self.end() as u64
    }

    pub fn overlaps(&self, other: &Region) -> bool {
        self.base < other.end() && other.base < self.end()
    }
}

/// One contiguous run of a block's logical code placed in the image.
/// Chunk 0 sits at the block's own site; later chunks are fragments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fragment {
    pub function: u32,
    pub block: u32,
    pub chunk: u32,
    /// Logical instruction indices `[first, last]` covered.
    pub first: u32,
    pub last: u32,
    pub start: u32,
    pub end: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicaImage {
    pub replica: usize,
    pub code_region: Region,
    /// Code bytes starting at `code_region.base`.
    #[serde(with = "hex_bytes")]
    pub code: Vec<u8>,
    pub data_region: Region,
    /// Initial data bytes starting at `data_region.base`.
    #[serde(with = "hex_bytes")]
    pub data: Vec<u8>,
    pub shared_regions: Vec<Region>,
    #[serde(with = "id_map")]
    pub phi_code: BTreeMap<LogicalInstrId, u32>,
    pub phi_data: BTreeMap<String, u32>,
    pub data_sizes: BTreeMap<String, u32>,
    pub stack_base: u32,
    /// Bytes below `stack_base` reserved for the stack.
    pub stack_reserve: u32,
    pub entry: u32,
    pub nop_addresses: BTreeSet<u32>,
    /// Layout-inserted unconditional jumps (fragment and fallthrough stitching).
    pub stitch_addresses: BTreeSet<u32>,
    pub fragment_map: Vec<Fragment>,
    /// Addresses of LDI instructions whose immediate is a data object base.
    pub symbols: BTreeMap<u32, String>,
    /// Longest chain of NOP/JMP instructions reachable before a
    /// trace-producing instruction, over all slots of the image.
    pub max_transparent_run: u32,
}

impl ReplicaImage {
    pub fn code_end(&self) -> u32 {
        self.code_region.base + self.code.len() as u32
    }

    pub fn word_at(&self, addr: u32) -> Option<u32> {
        let off = addr.checked_sub(self.code_region.base)? as usize;
        let bytes = self.code.get(off..off + 4)?;
        Some(u32::from_le_bytes(bytes.try_into().unwrap()))
    }

    pub fn decode_at(&self, addr: u32) -> Option<DecodeOutcome> {
        self.word_at(addr)
            .map(|w| decode(w, addr % INSTR_WIDTH == 0))
    }

    pub fn instruction_at(&self, addr: u32) -> Option<Instruction> {
        self.decode_at(addr).and_then(|d| d.instruction().copied())
    }

    /// All w-aligned addresses in the code bytes.
    pub fn slot_addresses(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.code.len() as u32 / INSTR_WIDTH).map(|i| self.code_region.base + i * INSTR_WIDTH)
    }

    /// Inverse of `phi_code`.
    pub fn logical_at(&self) -> HashMap<u32, LogicalInstrId> {
        self.phi_code.iter().map(|(id, a)| (*a, *id)).collect()
    }

    pub fn is_shared(&self, addr: u32) -> bool {
        self.shared_regions.iter().any(|r| r.contains(addr))
    }
}

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("malformed image container: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported container format `{0}`")]
    Format(String),
}

/// Everything `build` produces for one program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageContainer {
    pub format: String,
    pub program: LogicalProgram,
    pub config: DiversificationConfig,
    pub images: Vec<ReplicaImage>,
    pub certificate: LayoutCertificate,
}

impl ImageContainer {
    pub fn new(
        program: LogicalProgram,
        config: DiversificationConfig,
        images: Vec<ReplicaImage>,
        certificate: LayoutCertificate,
    ) -> Self {
        ImageContainer {
            format: CONTAINER_FORMAT.to_string(),
            program,
            config,
            images,
            certificate,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("container serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ContainerError> {
        let c: ImageContainer = serde_json::from_str(text)?;
        if c.format != CONTAINER_FORMAT {
            return Err(ContainerError::Format(c.format));
        }
        Ok(c)
    }
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        hex::decode(text).map_err(serde::de::Error::custom)
    }
}

mod id_map {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::program::LogicalInstrId;

    #[derive(Serialize, Deserialize)]
    struct Entry {
        id: [u32; 3],
        addr: u32,
    }

    pub fn serialize<S: Serializer>(map: &BTreeMap<LogicalInstrId, u32>, s: S) -> Result<S::Ok, S::Error> {
        let entries: Vec<Entry> = map
            .iter()
            .map(|(id, addr)| Entry {
                id: [id.function, id.block, id.index],
                addr: *addr,
            })
            .collect();
        entries.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<LogicalInstrId, u32>, D::Error> {
        let entries = Vec::<Entry>::deserialize(d)?;
        Ok(entries
            .into_iter()
            .map(|e| {
                (
                    LogicalInstrId {
                        function: e.id[0],
                        block: e.id[1],
                        index: e.id[2],
                    },
                    e.addr,
                )
            })
            .collect())
    }
}
