//! Lockstep slices and the three detection layers.
//!
//! A slice steps every replica until it retires one trace-producing
//! instruction. The monitor then checks, in order: structural PC
//! distinctness, effective-address non-aliasing, and semantic equality of
//! the canonical record digests.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{canonicalize, record_hash, CanonicalRecord, CanonicalTrace};
use crate::image::{Region, ReplicaImage};
use crate::machine::{reset, PerturbError, Perturbation, ReplicaState, StepEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckPolicy {
    /// Fires when any two replicas agree.
    PairwiseStrict,
    /// Fires only when all replicas agree.
    AllEqualCollapse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitorConfig {
    pub pc_policy: CheckPolicy,
    pub addr_policy: CheckPolicy,
    pub max_steps_per_slice: u32,
    pub shared_regions: Vec<Region>,
    /// Only for fixtures that need a monitor with a blind semantic layer.
    #[serde(default = "enabled")]
    pub semantic_layer: bool,
}

fn enabled() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MonitorError {
    #[error("step cap {cap} is below 1 + longest NOP/JMP run {run} of replica {replica}")]
    CapTooSmall { cap: u32, run: u32, replica: usize },
    #[error("perturbation for replica {replica} at slice {slice}: {source}")]
    Perturbation { replica: usize, slice: u64, source: PerturbError },
    #[error("perturbation targets replica {0}, which does not exist")]
    NoSuchReplica(usize),
}

impl MonitorConfig {
    /// Pairwise-strict policies with the smallest cap the images allow.
    pub fn for_images(images: &[ReplicaImage]) -> Self {
        let run = images.iter().map(|i| i.max_transparent_run).max().unwrap_or(0);
        MonitorConfig {
            pc_policy: CheckPolicy::PairwiseStrict,
            addr_policy: CheckPolicy::PairwiseStrict,
            max_steps_per_slice: run + 1,
            shared_regions: images.first().map(|i| i.shared_regions.clone()).unwrap_or_default(),
            semantic_layer: true,
        }
    }

    pub fn check_cap(&self, images: &[ReplicaImage]) -> Result<(), MonitorError> {
        for img in images {
            if self.max_steps_per_slice < img.max_transparent_run + 1 {
                return Err(MonitorError::CapTooSmall {
                    cap: self.max_steps_per_slice,
                    run: img.max_transparent_run,
                    replica: img.replica,
                });
            }
        }
        Ok(())
    }

    fn is_shared(&self, addr: u32) -> bool {
        self.shared_regions.iter().any(|r| r.contains(addr))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictKind {
    Ok,
    SemanticDivergence,
    StructuralPcViolation,
    StructuralAddrViolation,
    Stall,
}

impl VerdictKind {
    pub fn exit_code(self) -> i32 {
        match self {
            VerdictKind::Ok => 0,
            VerdictKind::SemanticDivergence => 10,
            VerdictKind::StructuralPcViolation => 11,
            VerdictKind::StructuralAddrViolation => 12,
            VerdictKind::Stall => 13,
        }
    }
}

/// Exit code for a run that exceeded its slice budget.
pub const TIMEOUT_EXIT_CODE: i32 = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    StructuralPc,
    NonAliasing,
    Semantic,
    Watchdog,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub kind: VerdictKind,
    pub layer: Layer,
    pub slice: u64,
    pub replicas: Option<[usize; 2]>,
    /// Slices since the first perturbation; set by the fault harness.
    pub latency: Option<u64>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceOutcome {
    pub slice: u64,
    /// `None` marks a stalled replica.
    pub records: Vec<Option<CanonicalRecord>>,
    pub retire_pcs: Vec<Option<u32>>,
    pub next_pcs: Vec<u32>,
    pub addresses: Vec<Vec<u32>>,
    pub verdict: VerdictKind,
}

/// Receives every step event and slice outcome of a run.
pub trait Observer {
    /// Called at each slice boundary before scheduled perturbations apply.
    fn on_boundary(&mut self, _slice: u64, _states: &[ReplicaState]) {}
    fn on_step(&mut self, _e: &StepEvent) {}
    fn on_slice(&mut self, _s: &SliceOutcome) {}
}

impl Observer for () {}

fn first_pair<T: PartialEq>(values: &[T]) -> Option<[usize; 2]> {
    for i in 0..values.len() {
        for j in i + 1..values.len() {
            if values[i] == values[j] {
                return Some([i, j]);
            }
        }
    }
    None
}

/// Structural PC check over one set of per-replica pcs.
pub fn check_structural(pcs: &[u32], policy: CheckPolicy) -> Option<[usize; 2]> {
    match policy {
        CheckPolicy::PairwiseStrict => first_pair(pcs),
        CheckPolicy::AllEqualCollapse => {
            (pcs.len() >= 2 && pcs.iter().all(|p| *p == pcs[0])).then_some([0, 1])
        }
    }
}

/// Address non-aliasing check over per-replica effective address sets.
/// Returns the witnessing pair and address.
pub fn check_non_aliasing(addrs: &[Vec<u32>], cfg: &MonitorConfig) -> Option<([usize; 2], u32)> {
    let relevant: Vec<Vec<u32>> = addrs
        .iter()
        .map(|a| a.iter().copied().filter(|x| !cfg.is_shared(*x)).collect())
        .collect();
    match cfg.addr_policy {
        CheckPolicy::PairwiseStrict => {
            for i in 0..relevant.len() {
                for j in i + 1..relevant.len() {
                    if let Some(a) = relevant[i].iter().find(|a| relevant[j].contains(a)) {
                        return Some(([i, j], *a));
                    }
                }
            }
            None
        }
        CheckPolicy::AllEqualCollapse => relevant
            .first()?
            .iter()
            .find(|a| relevant.iter().all(|s| s.contains(a)))
            .map(|a| ([0, 1], *a)),
    }
}

/// Semantic comparison. `None` entries are stall markers.
pub fn compare_semantic(records: &[Option<CanonicalRecord>]) -> Option<([usize; 2], String)> {
    let digests: Vec<_> = records.iter().map(|r| r.as_ref().map(record_hash)).collect();
    for i in 0..digests.len() {
        for j in i + 1..digests.len() {
            if digests[i] != digests[j] {
                return Some(([i, j], "canonical record digests differ".into()));
            }
        }
    }
    records
        .iter()
        .position(|r| r.is_some_and(|r| r.trap.is_some()))
        .map(|i| ([i, (i + 1) % records.len()], "replicas trapped".into()))
}

/// Runs one slice. Replicas that already halted contribute no step.
pub fn run_slice(
    states: &mut [ReplicaState],
    cfg: &MonitorConfig,
    slice: u64,
    observer: &mut dyn Observer,
) -> (SliceOutcome, Option<Verdict>) {
    let n = states.len();
    let mut records = Vec::with_capacity(n);
    let mut retire_pcs = Vec::with_capacity(n);
    let mut addresses = Vec::with_capacity(n);
    for s in states.iter_mut() {
        let mut addrs = Vec::new();
        let mut retired = None;
        for _ in 0..cfg.max_steps_per_slice {
            let Some(e) = s.step() else { break };
            observer.on_step(&e);
            addrs.extend(e.effective_address);
            if let Some(rec) = canonicalize(&e) {
                retired = Some((rec, e.pc_before));
                break;
            }
        }
        records.push(retired.map(|r| r.0));
        retire_pcs.push(retired.map(|r| r.1));
        addresses.push(addrs);
    }
    let next_pcs: Vec<u32> = states.iter().map(|s| s.pc).collect();

    let verdict = |kind, layer, replicas, detail: String| Verdict {
        kind,
        layer,
        slice,
        replicas,
        latency: None,
        detail,
    };
    let found = if let Some(i) = records.iter().position(Option::is_none) {
        Some(verdict(
            VerdictKind::Stall,
            Layer::Watchdog,
            Some([i, i]),
            format!("replica {i} retired nothing within {} steps", cfg.max_steps_per_slice),
        ))
    } else if let Some(pair) = check_structural(&retire_pcs.iter().map(|p| p.unwrap()).collect::<Vec<_>>(), cfg.pc_policy) {
        Some(verdict(VerdictKind::StructuralPcViolation, Layer::StructuralPc, Some(pair), "retirement pcs coincide".into()))
    } else if let Some(pair) = check_structural(&next_pcs, cfg.pc_policy) {
        Some(verdict(VerdictKind::StructuralPcViolation, Layer::StructuralPc, Some(pair), format!("next pcs coincide at {:#x}", next_pcs[pair[0]])))
    } else if let Some((pair, a)) = check_non_aliasing(&addresses, cfg) {
        Some(verdict(VerdictKind::StructuralAddrViolation, Layer::NonAliasing, Some(pair), format!("effective address {a:#x} shared")))
    } else if !cfg.semantic_layer {
        None
    } else {
        compare_semantic(&records)
            .map(|(pair, why)| verdict(VerdictKind::SemanticDivergence, Layer::Semantic, Some(pair), why))
    };
    let outcome = SliceOutcome {
        slice,
        records,
        retire_pcs,
        next_pcs,
        addresses,
        verdict: found.as_ref().map_or(VerdictKind::Ok, |v| v.kind),
    };
    observer.on_slice(&outcome);
    (outcome, found)
}

/// A perturbation applied to one replica before slice `slice` runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scheduled {
    pub slice: u64,
    pub replica: usize,
    pub perturbation: Perturbation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Clean,
    Detected(Verdict),
    Timeout,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        match self {
            Outcome::Clean => 0,
            Outcome::Detected(v) => v.kind.exit_code(),
            Outcome::Timeout => TIMEOUT_EXIT_CODE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub outcome: Outcome,
    pub slices: u64,
    pub traces: Vec<CanonicalTrace>,
    pub states: Vec<ReplicaState>,
}

/// Runs all replicas in lockstep until a verdict, clean termination or
/// `max_slices` slices.
pub fn run_to_completion(
    images: &[ReplicaImage],
    cfg: &MonitorConfig,
    schedule: &[Scheduled],
    max_slices: u64,
    observer: &mut dyn Observer,
) -> Result<RunReport, MonitorError> {
    if let Some(s) = schedule.iter().find(|s| s.replica >= images.len()) {
        return Err(MonitorError::NoSuchReplica(s.replica));
    }
    let mut states: Vec<ReplicaState> = images.iter().map(reset).collect();
    let mut traces = vec![CanonicalTrace::default(); images.len()];
    let first_trigger = schedule.iter().map(|s| s.slice).min();
    let mut slice = 0;
    let outcome = loop {
        if states.iter().all(|s| s.halted) {
            break Outcome::Clean;
        }
        if slice >= max_slices {
            break Outcome::Timeout;
        }
        observer.on_boundary(slice, &states);
        for s in schedule.iter().filter(|s| s.slice == slice) {
            states[s.replica]
                .apply_perturbation(&s.perturbation)
                .map_err(|source| MonitorError::Perturbation { replica: s.replica, slice, source })?;
        }
        let (out, verdict) = run_slice(&mut states, cfg, slice, observer);
        for (t, r) in traces.iter_mut().zip(out.records) {
            t.records.extend(r);
        }
        slice += 1;
        if let Some(mut v) = verdict {
            v.latency = first_trigger.filter(|t| *t <= v.slice).map(|t| v.slice - t);
            break Outcome::Detected(v);
        }
    };
    Ok(RunReport { outcome, slices: slice, traces, states })
}
