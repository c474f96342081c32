//! Independent per-replica layout of one logical program.
//!
//! Each replica gets its own block order, NOP phase, fragmentation cut
//! pattern and data placement. The resulting images are checked for
//! byte-level non-aliasing before they are handed out.

mod certificate;
mod data;
mod layout;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Region, ReplicaImage};
use crate::isa::{EncodeError, INSTR_WIDTH};
use crate::program::{validate, LogicalProgram};

pub use certificate::{verify_certificate, AliasWitness, LayoutCertificate, PairFraction};
pub use data::{place_data, DataLayout};
pub use layout::{fragment, insert_nops, place_blocks, BlockOrder, Slot};

/// Which blocks receive periodic NOP padding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NopScope {
    Global,
    /// Only blocks of the named functions.
    Functions(Vec<String>),
    None,
}

impl NopScope {
    pub fn covers(&self, function: &str) -> bool {
        match self {
            NopScope::Global => true,
            NopScope::Functions(names) => names.iter().any(|n| n == function),
            NopScope::None => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiversificationConfig {
    pub replicas: usize,
    /// NOP stride `l` in bytes of logical code.
    pub stride: u32,
    pub nop_scope: NopScope,
    /// Blocks with more logical bytes than this are fragmented.
    pub critical_size: u32,
    pub code_regions: Vec<Region>,
    pub data_regions: Vec<Region>,
    pub stack_bases: Vec<u32>,
    #[serde(default = "default_stack_reserve")]
    pub stack_reserve: u32,
    pub seed: u64,
    pub shared_regions: Vec<Region>,
    pub max_layout_retries: u32,
}

/// Largest replica count for which [`DiversificationConfig::standard`]
/// has a built-in address map.
pub const MAX_STANDARD_REPLICAS: usize = 16;
pub const DEFAULT_CRITICAL_SIZE: u32 = 256;
pub const DEFAULT_SHARED_REGION: Region = Region::new(0x7_F000, 0x100);
const REGION_SIZE: u32 = 0x1000;

fn default_stack_reserve() -> u32 {
    1024
}

impl DiversificationConfig {
    /// Built-in address map: data regions from 0x4000 and code regions
    /// from 0x40000, 8 KiB apart, 4 KiB each. Stride defaults to `4·N`.
    pub fn standard(replicas: usize, seed: u64) -> Result<Self, ConfigError> {
        if replicas < 2 {
            return Err(ConfigError::TooFewReplicas(replicas));
        }
        if replicas > MAX_STANDARD_REPLICAS {
            return Err(ConfigError::NoStandardMap(replicas));
        }
        let code_regions = (0..replicas as u32)
            .map(|r| Region::new(0x4_0000 + r * 0x2000, REGION_SIZE))
            .collect();
        let data_regions: Vec<Region> = (0..replicas as u32)
            .map(|r| Region::new(0x4000 + r * 0x2000, REGION_SIZE))
            .collect();
        let stack_bases = data_regions
            .iter()
            .enumerate()
            .map(|(r, d)| d.end() - 16 * (r as u32 % 4))
            .collect();
        Ok(DiversificationConfig {
            replicas,
            stride: INSTR_WIDTH * replicas as u32,
            nop_scope: NopScope::Global,
            critical_size: DEFAULT_CRITICAL_SIZE,
            code_regions,
            data_regions,
            stack_bases,
            stack_reserve: default_stack_reserve(),
            seed,
            shared_regions: vec![DEFAULT_SHARED_REGION],
            max_layout_retries: 4,
        })
    }

    pub fn with_stride(mut self, stride: u32) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_critical_size(mut self, critical_size: u32) -> Self {
        self.critical_size = critical_size;
        self
    }

    pub fn with_nop_scope(mut self, scope: NopScope) -> Self {
        self.nop_scope = scope;
        self
    }

    /// NOP phase of replica `r` in logical bytes.
    pub fn nop_offset(&self, r: usize) -> u32 {
        self.stride / self.replicas as u32 * r as u32
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let n = self.replicas;
        if n < 2 {
            return Err(ConfigError::TooFewReplicas(n));
        }
        if self.stride == 0 || self.stride % n as u32 != 0 || (self.stride / n as u32) % INSTR_WIDTH != 0 {
            return Err(ConfigError::Stride { stride: self.stride, replicas: n });
        }
        if self.critical_size < 2 * INSTR_WIDTH || self.critical_size % INSTR_WIDTH != 0 {
            return Err(ConfigError::CriticalSize(self.critical_size));
        }
        for (what, len) in [
            ("code_regions", self.code_regions.len()),
            ("data_regions", self.data_regions.len()),
            ("stack_bases", self.stack_bases.len()),
        ] {
            if len != n {
                return Err(ConfigError::PerReplicaCount { field: what, got: len, expected: n });
            }
        }
        for (r, region) in self.code_regions.iter().chain(&self.data_regions).enumerate() {
            if region.base % INSTR_WIDTH != 0 || region.size % INSTR_WIDTH != 0 || region.size == 0 {
                return Err(ConfigError::Misaligned(r % n));
            }
            if region.base.checked_add(region.size).is_none() {
                return Err(ConfigError::Misaligned(r % n));
            }
        }
        for (r, (&sb, d)) in self.stack_bases.iter().zip(&self.data_regions).enumerate() {
            let ok = sb % INSTR_WIDTH == 0
                && sb <= d.end()
                && sb.checked_sub(self.stack_reserve).is_some_and(|lo| lo >= d.base);
            if !ok {
                return Err(ConfigError::StackBase(r));
            }
        }
        Ok(())
    }
}

/// Seed used when none is given. Fixed so that outputs are reproducible.
pub const DEFAULT_SEED: u64 = 0x5EED_0001;

/// Compact build description used by config files; expands to a
/// [`DiversificationConfig`] over the built-in address map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildOptions {
    pub replicas: usize,
    /// Defaults to `4·N`.
    pub stride: Option<u32>,
    pub critical_size: u32,
    pub nop_scope: NopScope,
    pub seed: u64,
    pub max_layout_retries: u32,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            replicas: 2,
            stride: None,
            critical_size: DEFAULT_CRITICAL_SIZE,
            nop_scope: NopScope::Global,
            seed: DEFAULT_SEED,
            max_layout_retries: 4,
        }
    }
}

impl BuildOptions {
    pub fn to_config(&self) -> Result<DiversificationConfig, ConfigError> {
        let mut cfg = DiversificationConfig::standard(self.replicas, self.seed)?
            .with_critical_size(self.critical_size)
            .with_nop_scope(self.nop_scope.clone());
        if let Some(l) = self.stride {
            cfg.stride = l;
        }
        cfg.max_layout_retries = self.max_layout_retries;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("at least 2 replicas are required, got {0}")]
    TooFewReplicas(usize),
    #[error("no built-in address map for {0} replicas; supply regions explicitly")]
    NoStandardMap(usize),
    #[error("stride {stride} must be divisible by N={replicas} with l/N a multiple of the instruction width")]
    Stride { stride: u32, replicas: usize },
    #[error("critical size {0} must be a multiple of the instruction width and at least two instructions")]
    CriticalSize(u32),
    #[error("{field} has {got} entries, expected {expected}")]
    PerReplicaCount { field: &'static str, got: usize, expected: usize },
    #[error("region of replica {0} is empty, misaligned or wraps the address space")]
    Misaligned(usize),
    #[error("stack of replica {0} does not fit its data region")]
    StackBase(usize),
}

#[derive(Debug, Error)]
pub enum DiversifyError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("program is not valid: {0}")]
    InvalidProgram(String),
    #[error("replica {replica}: code needs {needed} bytes, region holds {available}")]
    CodeOverflow { replica: usize, needed: u32, available: u32 },
    #[error("replica {replica}: data objects need {needed} bytes below the stack, region offers {available}")]
    DataOverflow { replica: usize, needed: u32, available: u32 },
    #[error("shared objects need {needed} bytes, shared region holds {available}")]
    SharedOverflow { needed: u32, available: u32 },
    #[error("replica {replica}: cannot encode {what}: {source}")]
    Encode { replica: usize, what: String, source: EncodeError },
    #[error("layout certificate failed after {attempts} attempts")]
    Certificate { attempts: u32, certificate: Box<LayoutCertificate> },
}

/// Output of [`diversify`].
#[derive(Debug, Clone, PartialEq)]
pub struct Build {
    pub images: Vec<ReplicaImage>,
    pub certificate: LayoutCertificate,
    /// Reseeds consumed before the certificate passed.
    pub retries: u32,
}

/// Lays out every replica and verifies the certificate, reseeding up to
/// `max_layout_retries` times.
pub fn diversify(p: &LogicalProgram, cfg: &DiversificationConfig) -> Result<Build, DiversifyError> {
    cfg.validate()?;
    if let Some(err) = validate(p).into_iter().find(|d| d.is_error()) {
        return Err(DiversifyError::InvalidProgram(err.to_string()));
    }
    let mut last = None;
    for attempt in 0..=cfg.max_layout_retries {
        let images = (0..cfg.replicas)
            .map(|r| layout_replica(p, cfg, r, attempt))
            .collect::<Result<Vec<_>, _>>()?;
        let certificate = verify_certificate(p, cfg, &images);
        if certificate.passed() {
            return Ok(Build { images, certificate, retries: attempt });
        }
        last = Some(certificate);
    }
    Err(DiversifyError::Certificate {
        attempts: cfg.max_layout_retries + 1,
        certificate: Box::new(last.expect("at least one attempt")),
    })
}

/// Builds one replica image. Pure in `(p, cfg, r, attempt)`.
pub fn layout_replica(
    p: &LogicalProgram,
    cfg: &DiversificationConfig,
    r: usize,
    attempt: u32,
) -> Result<ReplicaImage, DiversifyError> {
    let data = place_data(p, r, cfg, &mut replica_rng(cfg.seed, r, attempt, Stream::Data))?;
    layout::emit_replica(p, cfg, r, data, &mut replica_rng(cfg.seed, r, attempt, Stream::Code))
}

#[derive(Clone, Copy)]
enum Stream {
    Code = 1,
    Data = 2,
}

/// Independent generator per (seed, replica, attempt, purpose).
fn replica_rng(seed: u64, r: usize, attempt: u32, stream: Stream) -> ChaCha8Rng {
    let key = seed
        ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(r as u64 + 1)
        ^ (attempt as u64).rotate_left(40);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(stream as u64);
    rng
}
