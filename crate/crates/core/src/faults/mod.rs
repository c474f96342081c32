//! Perturbation taxonomy and fault-injection campaigns.
//!
//! An [`Injection`] is stated in logical terms (slice index, register,
//! stack top, data object word) and resolved separately against each
//! replica's layout right before its trigger slice.

mod campaign;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus;
use crate::diversifier::{BuildOptions, ConfigError, DiversifyError};
use crate::image::ReplicaImage;
use crate::isa::{Kind, Opcode, Reg, INSTR_WIDTH, SP};
use crate::machine::{PerturbError, Perturbation, TaggedWord};
use crate::monitor::{CheckPolicy, MonitorError};
use crate::program::{parse, LogicalProgram};

pub use campaign::{
    execute_campaign, prepare, run_all, run_trial, Aggregates, CAMPAIGN_FORMAT, CampaignResult, Prepared, Reference, ReferenceSlice,
    TrialResult, TIMEOUT_FACTOR,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correlation {
    FullyCorrelated,
    Partial,
    Single,
}

impl Correlation {
    pub fn as_str(self) -> &'static str {
        match self {
            Correlation::FullyCorrelated => "fully_correlated",
            Correlation::Partial => "partial",
            Correlation::Single => "single",
        }
    }
}

/// A memory word named independently of layout.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemLoc {
    Abs(u32),
    /// The word at the replica's current stack pointer.
    StackTop,
    Object { name: String, word: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutation {
    PcDelta(i32),
    PcSet(u32),
    RegSet { reg: Reg, value: u32 },
    RegBitflip { reg: Reg, bit: u8 },
    MemSet { loc: MemLoc, value: u32 },
    MemBitflip { loc: MemLoc, bit: u8 },
    RegCopy { dst: Reg, src: Reg },
}

impl fmt::Display for MemLoc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MemLoc::Abs(a) => write!(f, "{a:#x}"),
            MemLoc::StackTop => f.write_str("[sp]"),
            MemLoc::Object { name, word } => write!(f, "{name}[{word}]"),
        }
    }
}

impl fmt::Display for Mutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mutation::PcDelta(d) => write!(f, "{d:+}"),
            Mutation::PcSet(a) => write!(f, "pc={a:#x}"),
            Mutation::RegSet { reg, value } => write!(f, "r{}={value:#x}", reg.id()),
            Mutation::RegBitflip { reg, bit } => write!(f, "r{}^bit{bit}", reg.id()),
            Mutation::MemSet { loc, value } => write!(f, "{loc}={value:#x}"),
            Mutation::MemBitflip { loc, bit } => write!(f, "{loc}^bit{bit}"),
            Mutation::RegCopy { dst, src } => write!(f, "r{}=r{}", dst.id(), src.id()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot parse mutation `{0}`")]
pub struct ParseMutationError(pub String);

fn parse_number(s: &str) -> Option<u32> {
    let s = s.trim();
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u32::from_str_radix(hex, 16).ok(),
        None => s.parse::<u32>().ok().or_else(|| s.parse::<i32>().ok().map(|v| v as u32)),
    }
}

enum Lhs {
    Pc,
    Reg(Reg),
    Mem(MemLoc),
}

fn parse_lhs(s: &str) -> Option<Lhs> {
    let s = s.trim();
    if s.eq_ignore_ascii_case("pc") {
        return Some(Lhs::Pc);
    }
    if let Ok(r) = s.parse::<Reg>() {
        return Some(Lhs::Reg(r));
    }
    if s.eq_ignore_ascii_case("[sp]") {
        return Some(Lhs::Mem(MemLoc::StackTop));
    }
    if let Some((name, rest)) = s.split_once('[') {
        let word = rest.strip_suffix(']')?.trim().parse().ok()?;
        let name = name.trim();
        let ident = !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.');
        return ident.then(|| Lhs::Mem(MemLoc::Object { name: name.to_string(), word }));
    }
    parse_number(s).map(|a| Lhs::Mem(MemLoc::Abs(a)))
}

/// Accepts exactly the [`Display`](fmt::Display) syntax: `+8`, `-4`,
/// `pc=0x40010`, `r3=0`, `r3=r4`, `r3^bit5`, `[sp]=0x40000`,
/// `values[2]^bit0`, `0x7f000=1`.
impl FromStr for Mutation {
    type Err = ParseMutationError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let err = || ParseMutationError(text.to_string());
        let s = text.trim();
        if s.starts_with('+') || (s.starts_with('-') && !s.contains(['=', '^'])) {
            return s.parse::<i32>().map(Mutation::PcDelta).map_err(|_| err());
        }
        if let Some((lhs, bit)) = s.split_once("^bit") {
            let bit: u8 = bit.trim().parse().ok().filter(|b| *b < 32).ok_or_else(err)?;
            return match parse_lhs(lhs).ok_or_else(err)? {
                Lhs::Pc => Err(err()),
                Lhs::Reg(reg) => Ok(Mutation::RegBitflip { reg, bit }),
                Lhs::Mem(loc) => Ok(Mutation::MemBitflip { loc, bit }),
            };
        }
        let (lhs, rhs) = s.split_once('=').ok_or_else(err)?;
        match parse_lhs(lhs).ok_or_else(err)? {
            Lhs::Pc => parse_number(rhs).map(Mutation::PcSet).ok_or_else(err),
            Lhs::Reg(dst) => match rhs.trim().parse::<Reg>() {
                Ok(src) => Ok(Mutation::RegCopy { dst, src }),
                Err(()) => parse_number(rhs).map(|value| Mutation::RegSet { reg: dst, value }).ok_or_else(err),
            },
            Lhs::Mem(loc) => parse_number(rhs).map(|value| Mutation::MemSet { loc, value }).ok_or_else(err),
        }
    }
}

impl Mutation {
    /// Per-replica machine perturbation. `regs` is the replica's register
    /// file at the trigger boundary.
    pub fn resolve(&self, image: &ReplicaImage, regs: &[TaggedWord]) -> Result<Perturbation, FaultError> {
        let addr = |loc: &MemLoc| -> Result<u32, FaultError> {
            match loc {
                MemLoc::Abs(a) => Ok(*a),
                MemLoc::StackTop => Ok(regs[SP.index()].value),
                MemLoc::Object { name, word } => {
                    let base = image
                        .phi_data
                        .get(name)
                        .ok_or_else(|| FaultError::UnknownObject(name.clone()))?;
                    let size = image.data_sizes.get(name).copied().unwrap_or(0);
                    if word * INSTR_WIDTH >= size {
                        return Err(FaultError::UnknownObject(format!("{name}[{word}]")));
                    }
                    Ok(base + word * INSTR_WIDTH)
                }
            }
        };
        Ok(match self {
            Mutation::PcDelta(d) => Perturbation::PcDelta(*d),
            Mutation::PcSet(a) => Perturbation::PcSet(*a),
            Mutation::RegSet { reg, value } => Perturbation::RegSet { reg: *reg, value: *value },
            Mutation::RegBitflip { reg, bit } => Perturbation::RegBitflip { reg: *reg, bit: *bit },
            Mutation::MemSet { loc, value } => Perturbation::MemSet { addr: addr(loc)?, value: *value },
            Mutation::MemBitflip { loc, bit } => Perturbation::MemBitflip { addr: addr(loc)?, bit: *bit },
            Mutation::RegCopy { dst, src } => Perturbation::RegCopy { dst: *dst, src: *src },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Target {
    pub replica: usize,
    pub mutation: Mutation,
}

/// One fault event: mutations applied at the boundary before slice
/// `trigger`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Injection {
    pub trigger: u64,
    pub correlation: Correlation,
    pub targets: Vec<Target>,
}

impl Injection {
    pub fn correlated(trigger: u64, replicas: usize, mutation: Mutation) -> Self {
        Injection {
            trigger,
            correlation: Correlation::FullyCorrelated,
            targets: (0..replicas).map(|replica| Target { replica, mutation: mutation.clone() }).collect(),
        }
    }

    pub fn single(trigger: u64, replica: usize, mutation: Mutation) -> Self {
        Injection { trigger, correlation: Correlation::Single, targets: vec![Target { replica, mutation }] }
    }

    pub fn partial(trigger: u64, mutations: Vec<Mutation>) -> Self {
        Injection {
            trigger,
            correlation: Correlation::Partial,
            targets: mutations.into_iter().enumerate().map(|(replica, mutation)| Target { replica, mutation }).collect(),
        }
    }

    /// Checks the correlation tag against the mutation parameters.
    pub fn validate(&self, replicas: usize) -> Result<(), FaultError> {
        let bad = |why: &str| Err(FaultError::InvalidInjection(why.to_string()));
        let ids: BTreeSet<usize> = self.targets.iter().map(|t| t.replica).collect();
        if ids.len() != self.targets.len() {
            return bad("a replica is targeted twice");
        }
        if ids.iter().any(|&r| r >= replicas) {
            return bad("target replica out of range");
        }
        let all = ids.len() == replicas;
        let first = self.targets.first().map(|t| &t.mutation);
        let uniform = self.targets.iter().all(|t| Some(&t.mutation) == first);
        match self.correlation {
            Correlation::FullyCorrelated if !all => bad("fully correlated must target every replica"),
            Correlation::FullyCorrelated if !uniform => bad("fully correlated needs identical mutations"),
            Correlation::Partial if !all => bad("partial must target every replica"),
            Correlation::Partial if uniform => bad("partial mutations must not all be equal"),
            Correlation::Single if self.targets.len() != 1 => bad("single must have exactly one target"),
            _ => Ok(()),
        }
    }

    /// Combines `SLICE:WHO:MUTATION` flags, WHO being `all` or `rK`, into
    /// one injection and infers its correlation. All flags name one slice.
    pub fn from_flags<S: AsRef<str>>(flags: &[S], replicas: usize) -> Result<Self, FaultError> {
        let bad = |flag: &str, why: &str| FaultError::InvalidInjection(format!("`{flag}`: {why}"));
        let mut parsed = Vec::new();
        for flag in flags.iter().map(AsRef::as_ref) {
            let mut parts = flag.splitn(3, ':');
            let (Some(slice), Some(who), Some(mutation)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad(flag, "expected SLICE:WHO:MUTATION"));
            };
            let slice: u64 = slice.trim().parse().map_err(|_| bad(flag, "slice is not a number"))?;
            let who = match who.trim() {
                "all" => None,
                r => Some(r.strip_prefix('r').and_then(|n| n.parse::<usize>().ok()).ok_or_else(|| bad(flag, "WHO must be `all` or rK"))?),
            };
            let mutation: Mutation = mutation.parse().map_err(|e: ParseMutationError| bad(flag, &e.to_string()))?;
            parsed.push((slice, who, mutation));
        }
        let Some(&(trigger, _, _)) = parsed.first() else {
            return Err(FaultError::InvalidInjection("no injection flags".into()));
        };
        if parsed.iter().any(|p| p.0 != trigger) {
            return Err(FaultError::InvalidInjection("all flags must name the same slice".into()));
        }
        if let [(_, None, m)] = parsed.as_slice() {
            return Ok(Injection::correlated(trigger, replicas, m.clone()));
        }
        let mut targets = Vec::new();
        for (_, who, mutation) in parsed {
            let replica = who.ok_or_else(|| FaultError::InvalidInjection("`all` cannot be combined with per-replica flags".into()))?;
            targets.push(Target { replica, mutation });
        }
        targets.sort_by_key(|t| t.replica);
        let uniform = targets.iter().all(|t| t.mutation == targets[0].mutation);
        let correlation = match targets.len() {
            1 => Correlation::Single,
            n if n == replicas && uniform => Correlation::FullyCorrelated,
            n if n == replicas => Correlation::Partial,
            _ => return Err(FaultError::InvalidInjection("inject one replica, every replica, or `all`".into())),
        };
        let inj = Injection { trigger, correlation, targets };
        inj.validate(replicas)?;
        Ok(inj)
    }

    /// Compact parameter label: per-replica mutations joined with `;`.
    pub fn label(&self) -> String {
        self.targets
            .iter()
            .map(|t| match self.correlation {
                Correlation::Single => format!("r{}:{}", t.replica, t.mutation),
                _ => t.mutation.to_string(),
            })
            .collect::<Vec<_>>()
            .join(";")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FaultFamily {
    /// Identical `Δ` in all replicas for every `min_abs ≤ |Δ| ≤ max_abs`.
    CorrelatedDeltaSweep { min_abs: u32, max_abs: u32 },
    /// Independent `Δ_r ∈ [−max_abs, max_abs]`, not all equal.
    PartialDeltaRandom { max_abs: u32 },
    /// One random replica, `0 < |Δ| ≤ max_abs`.
    SingleReplicaRandom { max_abs: u32 },
    /// The return-address slot of a RET overwritten with one constant
    /// inside some replica's code.
    ReturnAddressOverwrite,
    /// Base register of a LOAD/STORE set to 0 in all replicas.
    NullPointer,
    /// Base register of a LOAD/STORE replaced by an untagged register.
    ValueAsPointer,
    /// One bit of one private object word flipped in one replica.
    DataBitflip,
    /// Explicit injections, one trial each.
    Fixed { injections: Vec<Injection> },
}

impl FaultFamily {
    pub fn name(&self) -> &'static str {
        match self {
            FaultFamily::CorrelatedDeltaSweep { .. } => "correlated_delta_sweep",
            FaultFamily::PartialDeltaRandom { .. } => "partial_delta_random",
            FaultFamily::SingleReplicaRandom { .. } => "single_replica_random",
            FaultFamily::ReturnAddressOverwrite => "return_address_overwrite",
            FaultFamily::NullPointer => "null_pointer",
            FaultFamily::ValueAsPointer => "value_as_pointer",
            FaultFamily::DataBitflip => "data_bitflip",
            FaultFamily::Fixed { .. } => "fixed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Exhaustive,
    Samples(usize),
}

/// Half-open range of slice indices eligible as triggers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteRange {
    pub start: u64,
    pub end: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProgramSource {
    Corpus(String),
    Path(std::path::PathBuf),
    Source(String),
}

impl ProgramSource {
    pub fn load(&self) -> Result<LogicalProgram, FaultError> {
        let text = match self {
            ProgramSource::Corpus(name) => {
                return corpus::find(name)
                    .map(|c| c.program())
                    .ok_or_else(|| FaultError::Program(format!("no corpus program named {name:?}")))
            }
            ProgramSource::Path(path) => std::fs::read_to_string(path)
                .map_err(|e| FaultError::Program(format!("{}: {e}", path.display())))?,
            ProgramSource::Source(s) => s.clone(),
        };
        parse(&text).map(|(p, _)| p).map_err(|diags| {
            FaultError::Program(diags.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorOptions {
    pub pc_policy: CheckPolicy,
    pub addr_policy: CheckPolicy,
    pub semantic_layer: bool,
}

impl Default for MonitorOptions {
    fn default() -> Self {
        MonitorOptions {
            pc_policy: CheckPolicy::PairwiseStrict,
            addr_policy: CheckPolicy::PairwiseStrict,
            semantic_layer: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignSpec {
    #[serde(default)]
    pub name: String,
    pub program: ProgramSource,
    #[serde(default)]
    pub build: BuildOptions,
    #[serde(default)]
    pub monitor: MonitorOptions,
    pub family: FaultFamily,
    pub sampling: Sampling,
    /// Defaults to every slice of the fault-free run.
    #[serde(default)]
    pub sites: Option<SiteRange>,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum FaultError {
    #[error("program: {0}")]
    Program(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Diversify(#[from] DiversifyError),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
    #[error("fault-free reference run did not terminate cleanly: {0}")]
    Reference(String),
    #[error("injection-site range {start}..{end} is empty or beyond the {slices}-slice reference run")]
    EmptyRange { start: u64, end: u64, slices: u64 },
    #[error("family {0} has no eligible injection site in the range")]
    NoSites(&'static str),
    #[error("family {0} is randomized and cannot be enumerated exhaustively")]
    NotEnumerable(&'static str),
    #[error("{0} requires a set of parameters that is empty")]
    EmptyFamily(&'static str),
    #[error("invalid injection: {0}")]
    InvalidInjection(String),
    #[error("unknown data object {0}")]
    UnknownObject(String),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
}

/// Deterministic list of injections for `spec` against a prepared build.
pub fn generate(spec: &CampaignSpec, prep: &Prepared) -> Result<Vec<Injection>, FaultError> {
    let n = prep.images.len();
    let total = prep.reference.slices.len() as u64;
    let range = spec.sites.unwrap_or(SiteRange { start: 0, end: total });
    if range.start >= range.end || range.end > total {
        return Err(FaultError::EmptyRange { start: range.start, end: range.end, slices: total });
    }
    let all_sites: Vec<u64> = (range.start..range.end).collect();
    let family = spec.family.name();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let count = || match spec.sampling {
        Sampling::Exhaustive => Err(FaultError::NotEnumerable(family)),
        Sampling::Samples(k) => Ok(k),
    };
    let sites_where = |pred: &dyn Fn(&ReferenceSlice) -> bool| -> Result<Vec<u64>, FaultError> {
        let s: Vec<u64> = all_sites.iter().copied().filter(|&t| pred(&prep.reference.slices[t as usize])).collect();
        if s.is_empty() {
            Err(FaultError::NoSites(family))
        } else {
            Ok(s)
        }
    };
    let mut out = Vec::new();
    match &spec.family {
        FaultFamily::CorrelatedDeltaSweep { min_abs, max_abs } => {
            let deltas = signed_deltas(*min_abs.max(&1), *max_abs);
            if deltas.is_empty() {
                return Err(FaultError::EmptyFamily(family));
            }
            match spec.sampling {
                Sampling::Exhaustive => {
                    for &t in &all_sites {
                        for &d in &deltas {
                            out.push(Injection::correlated(t, n, Mutation::PcDelta(d)));
                        }
                    }
                }
                Sampling::Samples(k) => {
                    for _ in 0..k {
                        let t = *all_sites.choose(&mut rng).unwrap();
                        let d = *deltas.choose(&mut rng).unwrap();
                        out.push(Injection::correlated(t, n, Mutation::PcDelta(d)));
                    }
                }
            }
        }
        FaultFamily::PartialDeltaRandom { max_abs } => {
            if *max_abs == 0 {
                return Err(FaultError::EmptyFamily(family));
            }
            let m = *max_abs as i32;
            for _ in 0..count()? {
                let t = *all_sites.choose(&mut rng).unwrap();
                let ds = loop {
                    let ds: Vec<i32> = (0..n).map(|_| rng.gen_range(-m..=m)).collect();
                    if ds.iter().any(|&d| d != ds[0]) {
                        break ds;
                    }
                };
                out.push(Injection::partial(t, ds.into_iter().map(Mutation::PcDelta).collect()));
            }
        }
        FaultFamily::SingleReplicaRandom { max_abs } => {
            let deltas = signed_deltas(1, *max_abs);
            if deltas.is_empty() {
                return Err(FaultError::EmptyFamily(family));
            }
            for _ in 0..count()? {
                let t = *all_sites.choose(&mut rng).unwrap();
                let r = rng.gen_range(0..n);
                let d = *deltas.choose(&mut rng).unwrap();
                out.push(Injection::single(t, r, Mutation::PcDelta(d)));
            }
        }
        FaultFamily::ReturnAddressOverwrite => {
            let sites = sites_where(&|s| s.retires(Opcode::Ret))?;
            for _ in 0..count()? {
                let t = *sites.choose(&mut rng).unwrap();
                let img = &prep.images[rng.gen_range(0..n)];
                let words = (img.code.len() as u32 / INSTR_WIDTH).max(1);
                let k = img.code_region.base + rng.gen_range(0..words) * INSTR_WIDTH;
                out.push(Injection::correlated(t, n, Mutation::MemSet { loc: MemLoc::StackTop, value: k }));
            }
        }
        FaultFamily::NullPointer => {
            let sites = sites_where(&|s| s.base_register().is_some())?;
            let mk = |t: u64| {
                let reg = prep.reference.slices[t as usize].base_register().unwrap();
                Injection::correlated(t, n, Mutation::RegSet { reg, value: 0 })
            };
            match spec.sampling {
                Sampling::Exhaustive => out.extend(sites.iter().map(|&t| mk(t))),
                Sampling::Samples(k) => {
                    for _ in 0..k {
                        out.push(mk(*sites.choose(&mut rng).unwrap()));
                    }
                }
            }
        }
        FaultFamily::ValueAsPointer => {
            let pairs: Vec<(u64, Reg, Reg)> = all_sites
                .iter()
                .flat_map(|&t| {
                    let s = &prep.reference.slices[t as usize];
                    let base = s.base_register();
                    base.into_iter().flat_map(move |b| s.plain_registers(b).into_iter().map(move |src| (t, b, src)))
                })
                .collect();
            if pairs.is_empty() {
                return Err(FaultError::NoSites(family));
            }
            let mk = |&(t, dst, src): &(u64, Reg, Reg)| Injection::correlated(t, n, Mutation::RegCopy { dst, src });
            match spec.sampling {
                Sampling::Exhaustive => out.extend(pairs.iter().map(mk)),
                Sampling::Samples(k) => {
                    for _ in 0..k {
                        out.push(mk(pairs.choose(&mut rng).unwrap()));
                    }
                }
            }
        }
        FaultFamily::DataBitflip => {
            let words: Vec<(String, u32)> = prep
                .program
                .data
                .iter()
                .filter(|d| !d.shared)
                .flat_map(|d| (0..d.size / INSTR_WIDTH).map(move |w| (d.name.clone(), w)))
                .collect();
            if words.is_empty() {
                return Err(FaultError::EmptyFamily(family));
            }
            for _ in 0..count()? {
                let t = *all_sites.choose(&mut rng).unwrap();
                let r = rng.gen_range(0..n);
                let (name, word) = words.choose(&mut rng).unwrap().clone();
                let bit = rng.gen_range(0..32);
                out.push(Injection::single(t, r, Mutation::MemBitflip { loc: MemLoc::Object { name, word }, bit }));
            }
        }
        FaultFamily::Fixed { injections } => {
            if injections.is_empty() {
                return Err(FaultError::EmptyFamily(family));
            }
            out.extend(injections.iter().cloned());
        }
    }
    for inj in &out {
        inj.validate(n)?;
    }
    Ok(out)
}

/// `±[min_abs, max_abs]` in ascending order.
fn signed_deltas(min_abs: u32, max_abs: u32) -> Vec<i32> {
    let pos: Vec<i32> = (min_abs..=max_abs).map(|d| d as i32).collect();
    pos.iter().rev().map(|d| -d).chain(pos.iter().copied()).collect()
}

impl ReferenceSlice {
    pub fn retires(&self, op: Opcode) -> bool {
        self.record.opcode == Some(op)
    }

    /// Base register of the memory access retired in this slice.
    pub fn base_register(&self) -> Option<Reg> {
        let op = self.record.opcode?;
        matches!(op.kind(), Kind::Load | Kind::Store).then_some(self.record.src1?)
    }

    /// Registers other than `exclude` and SP holding an untagged value
    /// in every replica at the boundary.
    pub fn plain_registers(&self, exclude: Reg) -> Vec<Reg> {
        (0..Reg::COUNT as u8)
            .filter_map(Reg::new)
            .filter(|&r| r != exclude && r != SP)
            .filter(|r| self.regs.iter().all(|file| file[r.index()].tag.is_none()))
            .collect()
    }
}

#[cfg(test)]
mod tests;
