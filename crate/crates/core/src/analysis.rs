//! Static undetected-execution bounds and their comparison with campaigns.
//!
//! `γ = C/|S|` is the density of canonically equivalent instructions in an
//! image, `ε` the per-step value-coincidence bound of the ISA, and
//! `P_undetected(k) = (γ·ε)^k`. All quantities are exact rationals.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::canonical::CanonImm;
use crate::faults::{CampaignResult, Correlation, FaultFamily};
use crate::image::{Region, ReplicaImage};
use crate::isa::{epsilon_bound, Cond, Instruction, IsaConstants, Kind, Opcode, Reg, INSTR_WIDTH};
use crate::machine::object_index;
use crate::monitor::Outcome;
use crate::program::LogicalInstrId;

/// An exact rational that serializes with a decimal rendering alongside.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Exact(pub BigRational);

impl Exact {
    pub fn value(&self) -> &BigRational {
        &self.0
    }

    /// `log2` of the value, approximate; display only.
    pub fn log2(&self) -> f64 {
        if !self.0.is_positive() {
            return f64::NEG_INFINITY;
        }
        log2_int(self.0.numer()) - log2_int(self.0.denom())
    }

    /// Scientific notation with `digits` significant digits, truncated.
    pub fn decimal(&self, digits: usize) -> String {
        to_scientific(&self.0, digits)
    }
}

impl fmt::Display for Exact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Serialize, Deserialize)]
struct ExactRepr {
    exact: String,
    #[serde(default)]
    decimal: String,
    #[serde(default)]
    log2: f64,
}

impl Serialize for Exact {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let log2 = (self.log2() * 1e6).round() / 1e6;
        ExactRepr { exact: self.0.to_string(), decimal: self.decimal(6), log2: if log2.is_finite() { log2 } else { 0.0 } }
            .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Exact {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = ExactRepr::deserialize(d)?;
        repr.exact.parse::<BigRational>().map(Exact).map_err(serde::de::Error::custom)
    }
}

fn log2_int(x: &BigInt) -> f64 {
    let bits = x.bits();
    let shift = bits.saturating_sub(60);
    let top = (x >> shift).to_f64().unwrap_or(f64::NAN);
    top.log2() + shift as f64
}

fn to_scientific(r: &BigRational, digits: usize) -> String {
    if r.is_zero() {
        return "0".into();
    }
    let sign = if r.is_negative() { "-" } else { "" };
    let r = r.abs();
    let ten = BigInt::from(10);
    let digits = digits.max(1);
    // Estimate the decimal exponent, then correct by at most one step.
    let mut e = ((log2_int(r.numer()) - log2_int(r.denom())) * std::f64::consts::LOG10_2).floor() as i64;
    let scaled = |e: i64| -> BigRational {
        let p = BigRational::from_integer(ten.pow(e.unsigned_abs() as u32));
        if e >= 0 {
            &r / p
        } else {
            &r * p
        }
    };
    let mut m = scaled(e);
    while m >= BigRational::from_integer(ten.clone()) {
        e += 1;
        m = scaled(e);
    }
    while m < BigRational::one() {
        e -= 1;
        m = scaled(e);
    }
    let mantissa = (m * BigRational::from_integer(ten.pow(digits as u32 - 1))).to_integer().to_string();
    let (head, tail) = mantissa.split_at(1);
    if tail.is_empty() {
        format!("{sign}{head}e{e}")
    } else {
        format!("{sign}{head}.{tail}e{e}")
    }
}

/// Layout-free static view of an instruction: everything the canonical
/// record holds except runtime values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StaticProjection {
    pub opcode: Opcode,
    pub cond: Option<Cond>,
    pub dst: Option<Reg>,
    pub src1: Option<Reg>,
    pub src2: Option<Reg>,
    pub imm: Option<CanonImm>,
}

/// Projection of the instruction at `addr`. Transfer displacements are
/// masked; LDI immediates at data-symbol sites become object indices.
pub fn static_projection(image: &ReplicaImage, addr: u32, instr: &Instruction) -> StaticProjection {
    let imm = match instr.kind() {
        Kind::Branch | Kind::Jump | Kind::Call => None,
        _ if instr.opcode == Opcode::Ldi => match image.symbols.get(&addr).and_then(|n| object_index(image, n)) {
            Some(obj) => Some(CanonImm::Addr(obj)),
            None => instr.imm.map(CanonImm::Raw),
        },
        _ => instr.imm.map(CanonImm::Raw),
    };
    StaticProjection {
        opcode: instr.opcode,
        cond: instr.condition(),
        dst: instr.dst,
        src1: instr.src1,
        src2: instr.src2,
        imm,
    }
}

/// Instruction entry points: every aligned slot that decodes.
pub fn entry_points(image: &ReplicaImage) -> Vec<(u32, Instruction)> {
    image.slot_addresses().filter_map(|a| image.instruction_at(a).map(|i| (a, i))).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Equivalence {
    pub id: LogicalInstrId,
    pub address: u32,
    /// Entry points with the same static projection, itself included.
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub replica: usize,
    pub s_count: u64,
    pub c_per_instruction: Vec<Equivalence>,
    pub c_max: u64,
    pub gamma: Exact,
    pub epsilon_exponent: u32,
    pub epsilon: Exact,
    pub p_step: Exact,
    /// `P_undetected(k)` at index `k − 1`.
    pub p_undetected: Vec<Exact>,
}

impl BoundReport {
    pub fn p_at(&self, k: usize) -> Option<&BigRational> {
        k.checked_sub(1).and_then(|i| self.p_undetected.get(i)).map(Exact::value)
    }

    pub fn max_k(&self) -> usize {
        self.p_undetected.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnalysisError {
    #[error("replica {0} has no decodable instruction in its code region")]
    EmptyCode(usize),
    #[error("replica {0} maps no logical instruction")]
    NoLogicalInstructions(usize),
    #[error("no images to analyze")]
    NoImages,
}

/// Bound report for one image. Pure in its arguments.
pub fn compute_bounds(image: &ReplicaImage, constants: &IsaConstants, k_max: usize) -> Result<BoundReport, AnalysisError> {
    let entries = entry_points(image);
    if entries.is_empty() {
        return Err(AnalysisError::EmptyCode(image.replica));
    }
    let mut classes: HashMap<StaticProjection, u64> = HashMap::new();
    for (a, i) in &entries {
        *classes.entry(static_projection(image, *a, i)).or_default() += 1;
    }
    let c_per_instruction: Vec<Equivalence> = image
        .phi_code
        .iter()
        .map(|(&id, &address)| {
            let count = image
                .instruction_at(address)
                .map_or(0, |i| classes[&static_projection(image, address, &i)]);
            Equivalence { id, address, count }
        })
        .collect();
    let c_max = c_per_instruction
        .iter()
        .map(|e| e.count)
        .max()
        .ok_or(AnalysisError::NoLogicalInstructions(image.replica))?;
    let s_count = entries.len() as u64;
    let gamma = BigRational::new(c_max.into(), s_count.into());
    let eps = epsilon_bound(constants);
    let epsilon = eps.to_rational();
    let p_step = &gamma * &epsilon;
    let mut p = BigRational::one();
    let p_undetected = (0..k_max)
        .map(|_| {
            p = &p * &p_step;
            Exact(p.clone())
        })
        .collect();
    Ok(BoundReport {
        replica: image.replica,
        s_count,
        c_per_instruction,
        c_max,
        gamma: Exact(gamma),
        epsilon_exponent: eps.exponent,
        epsilon: Exact(epsilon),
        p_step: Exact(p_step),
        p_undetected,
    })
}

/// Reports for every replica; the comparison uses the largest `p_step`.
pub fn compute_bounds_all(images: &[ReplicaImage], constants: &IsaConstants, k_max: usize) -> Result<Vec<BoundReport>, AnalysisError> {
    if images.is_empty() {
        return Err(AnalysisError::NoImages);
    }
    images.iter().map(|i| compute_bounds(i, constants, k_max)).collect()
}

pub fn worst_case(reports: &[BoundReport]) -> Option<&BoundReport> {
    reports.iter().max_by(|a, b| a.p_step.cmp(&b.p_step).then(b.replica.cmp(&a.replica)))
}

/// An image with exactly `slots` entry points of which `equivalent` share
/// one static projection (`ADD r1, r2, r3`); the rest are unique LDIs.
pub fn synthetic_image(slots: u32, equivalent: u32) -> ReplicaImage {
    assert!(equivalent >= 1 && equivalent <= slots, "need 1 <= equivalent <= slots");
    let base = 0x4_0000;
    let r = |i| Reg::new(i).unwrap();
    let mut code = Vec::with_capacity(slots as usize * 4);
    let mut phi_code = BTreeMap::new();
    for i in 0..slots {
        let instr = if i < equivalent {
            Instruction::alu(Opcode::Add, r(1), r(2), r(3))
        } else {
            Instruction::ldi(r(4), i as i32)
        };
        code.extend_from_slice(&instr.encode().expect("synthetic instruction encodes").to_le_bytes());
        phi_code.insert(LogicalInstrId { function: 0, block: 0, index: i }, base + i * INSTR_WIDTH);
    }
    ReplicaImage {
        replica: 0,
        code_region: Region::new(base, slots * INSTR_WIDTH),
        code,
        data_region: Region::new(0x4000, 0x1000),
        data: vec![0; 0x1000],
        shared_regions: Vec::new(),
        phi_code,
        phi_data: BTreeMap::new(),
        data_sizes: BTreeMap::new(),
        stack_base: 0x5000,
        stack_reserve: 1024,
        entry: base,
        nop_addresses: BTreeSet::new(),
        stitch_addresses: BTreeSet::new(),
        fragment_map: Vec::new(),
        symbols: BTreeMap::new(),
        max_transparent_run: 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Satisfied {
    Holds,
    Violated,
    /// The bound is below `1/n`: no outcome at this sample size could
    /// distinguish it from zero.
    UnresolvableAtSampleSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KComparison {
    pub k: usize,
    /// Counted trials that stayed undetected for at least `k` slices.
    pub undetected_at_k: u64,
    pub empirical_rate: Exact,
    pub bound: Exact,
    /// `1/n`, the smallest nonzero rate observable with `n` trials.
    pub resolution: Exact,
    pub satisfied: Satisfied,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HonestyFlag {
    /// Some `k` has a bound below the sample resolution.
    BoundBelowResolution,
    /// The campaign has no trial that counts.
    NoCountedTrials,
    /// The family is fully correlated, where detection is deterministic
    /// and the probabilistic bound is not the relevant guarantee.
    NotProbabilisticRegime,
    /// Timeouts and clean escapes are both counted as undetected at every k.
    TimeoutsCountedAsUndetected,
    /// Benign trials (no observable effect) were excluded from `n`.
    BenignExcluded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub family: String,
    /// Trials that count toward `n`.
    pub trials: u64,
    pub excluded_benign: u64,
    /// Replica whose bound was used.
    pub bound_replica: usize,
    pub rows: Vec<KComparison>,
    pub flags: Vec<HonestyFlag>,
    pub notes: Vec<String>,
}

impl ComparisonReport {
    pub fn all(&self, s: Satisfied) -> bool {
        self.rows.iter().all(|r| r.satisfied == s)
    }

    pub fn any(&self, s: Satisfied) -> bool {
        self.rows.iter().any(|r| r.satisfied == s)
    }
}

/// Empirical undetected rates at each `k = 1..=K` against `bounds`.
pub fn compare(campaign: &CampaignResult, bounds: &BoundReport) -> ComparisonReport {
    let counted: Vec<_> = campaign.trials.iter().filter(|t| t.error.is_none() && !t.benign).collect();
    let n = counted.len() as u64;
    let benign = campaign.trials.iter().filter(|t| t.error.is_none() && t.benign).count() as u64;
    let mut flags = Vec::new();
    let mut notes = Vec::new();
    let correlated = match &campaign.spec.family {
        FaultFamily::CorrelatedDeltaSweep { .. }
        | FaultFamily::ReturnAddressOverwrite
        | FaultFamily::NullPointer
        | FaultFamily::ValueAsPointer => true,
        FaultFamily::Fixed { injections } => injections.iter().all(|i| i.correlation == Correlation::FullyCorrelated),
        _ => false,
    };
    if correlated {
        flags.push(HonestyFlag::NotProbabilisticRegime);
        notes.push(format!(
            "family {} is fully correlated; the probabilistic bound is reported for reference only",
            campaign.family
        ));
    }
    if benign > 0 {
        flags.push(HonestyFlag::BenignExcluded);
        notes.push(format!("{benign} trials had no observable effect and are excluded from n"));
    }
    if counted.iter().any(|t| matches!(t.outcome, Some(Outcome::Timeout))) {
        flags.push(HonestyFlag::TimeoutsCountedAsUndetected);
    }
    if n == 0 {
        flags.push(HonestyFlag::NoCountedTrials);
        notes.push("no counted trials; every comparison is unresolvable".into());
    }
    let resolution = if n > 0 { BigRational::new(BigInt::one(), n.into()) } else { BigRational::one() };
    let rows: Vec<KComparison> = (1..=bounds.max_k())
        .map(|k| {
            let undetected_at_k = counted
                .iter()
                .filter(|t| match &t.outcome {
                    Some(Outcome::Detected(_)) => t.latency.is_some_and(|l| l >= k as u64),
                    Some(Outcome::Clean) | Some(Outcome::Timeout) => true,
                    None => false,
                })
                .count() as u64;
            let rate = if n > 0 { BigRational::new(undetected_at_k.into(), n.into()) } else { BigRational::zero() };
            let bound = bounds.p_at(k).cloned().unwrap_or_else(BigRational::zero);
            let satisfied = if n > 0 && rate > bound {
                Satisfied::Violated
            } else if n == 0 || bound < resolution {
                Satisfied::UnresolvableAtSampleSize
            } else {
                Satisfied::Holds
            };
            KComparison {
                k,
                undetected_at_k,
                empirical_rate: Exact(rate),
                bound: Exact(bound),
                resolution: Exact(resolution.clone()),
                satisfied,
            }
        })
        .collect();
    let vacuous: Vec<usize> = rows
        .iter()
        .filter(|r| r.satisfied == Satisfied::UnresolvableAtSampleSize && n > 0)
        .map(|r| r.k)
        .collect();
    if !vacuous.is_empty() {
        flags.push(HonestyFlag::BoundBelowResolution);
        notes.push(format!(
            "bound below 1/{n} at k = {vacuous:?}: zero observed escapes is consistent with the bound but cannot confirm it"
        ));
    }
    ComparisonReport {
        family: campaign.family.clone(),
        trials: n,
        excluded_benign: benign,
        bound_replica: bounds.replica,
        rows,
        flags,
        notes,
    }
}

/// Human-readable summary table.
pub fn render_bounds(reports: &[BoundReport]) -> String {
    let mut out = String::from("replica  |S|   C_max  gamma          p_step (log2)\n");
    for r in reports {
        out.push_str(&format!(
            "{:<8} {:<5} {:<6} {:<14} {:.3}\n",
            r.replica,
            r.s_count,
            r.c_max,
            r.gamma.to_string(),
            r.p_step.log2()
        ));
    }
    out
}

pub fn render_comparison(c: &ComparisonReport) -> String {
    let mut out = format!("family {} with n = {} counted trials\n", c.family, c.trials);
    out.push_str("k   undetected  rate          bound         status\n");
    for r in &c.rows {
        out.push_str(&format!(
            "{:<3} {:<11} {:<13} {:<13} {}\n",
            r.k,
            r.undetected_at_k,
            r.empirical_rate.decimal(4),
            r.bound.decimal(4),
            match r.satisfied {
                Satisfied::Holds => "holds",
                Satisfied::Violated => "violated",
                Satisfied::UnresolvableAtSampleSize => "unresolvable-at-sample-size",
            }
        ));
    }
    for n in &c.notes {
        out.push_str(&format!("note: {n}\n"));
    }
    out
}
