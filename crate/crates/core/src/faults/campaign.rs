use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate, CampaignSpec, FaultError, Injection};
use crate::canonical::{CanonicalRecord, CanonicalTrace};
use crate::diversifier::{diversify, DiversificationConfig};
use crate::image::ReplicaImage;
use crate::isa::Reg;
use crate::machine::{ReplicaState, TaggedWord};
use crate::monitor::{run_to_completion, Layer, MonitorConfig, Observer, Outcome, Scheduled, SliceOutcome, VerdictKind};
use crate::program::LogicalProgram;

/// Trial slice budget as a multiple of the fault-free slice count.
pub const TIMEOUT_FACTOR: u64 = 4;

pub const CAMPAIGN_FORMAT: &str = "divex-campaign/1";

/// Architectural state at one slice boundary of the fault-free run.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSlice {
    /// Per replica.
    pub pcs: Vec<u32>,
    pub regs: Vec<[TaggedWord; Reg::COUNT]>,
    /// Record retired in this slice (identical in every replica).
    pub record: CanonicalRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub slices: Vec<ReferenceSlice>,
    pub traces: Vec<CanonicalTrace>,
    /// Final words of every data object, per replica.
    pub final_words: Vec<BTreeMap<String, Vec<i32>>>,
}

/// A built campaign target together with its fault-free reference.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub program: LogicalProgram,
    pub config: DiversificationConfig,
    pub images: Vec<ReplicaImage>,
    pub monitor: MonitorConfig,
    pub reference: Reference,
}

impl Prepared {
    pub fn from_images(program: LogicalProgram, config: DiversificationConfig, images: Vec<ReplicaImage>, monitor: MonitorConfig) -> Result<Self, FaultError> {
        monitor.check_cap(&images)?;
        let reference = record_reference(&program, &images, &monitor)?;
        Ok(Prepared { program, config, images, monitor, reference })
    }

    pub fn budget(&self) -> u64 {
        TIMEOUT_FACTOR * self.reference.slices.len() as u64
    }

    /// Resolves `inj` against each targeted replica's layout.
    pub fn schedule(&self, inj: &Injection) -> Result<Vec<Scheduled>, FaultError> {
        inj.validate(self.images.len())?;
        let Some(at) = self.reference.slices.get(inj.trigger as usize) else {
            return Err(FaultError::InvalidInjection(format!(
                "trigger {} beyond the {}-slice reference run",
                inj.trigger,
                self.reference.slices.len()
            )));
        };
        inj.targets
            .iter()
            .map(|t| {
                Ok(Scheduled {
                    slice: inj.trigger,
                    replica: t.replica,
                    perturbation: t.mutation.resolve(&self.images[t.replica], &at.regs[t.replica])?,
                })
            })
            .collect()
    }
}

struct Recorder {
    slices: Vec<ReferenceSlice>,
}

impl Observer for Recorder {
    fn on_boundary(&mut self, _slice: u64, states: &[ReplicaState]) {
        self.slices.push(ReferenceSlice {
            pcs: states.iter().map(|s| s.pc).collect(),
            regs: states.iter().map(|s| s.regs).collect(),
            record: CanonicalRecord::default(),
        });
    }

    fn on_slice(&mut self, s: &SliceOutcome) {
        if let (Some(last), Some(Some(rec))) = (self.slices.last_mut(), s.records.first()) {
            last.record = *rec;
        }
    }
}

fn final_words(program: &LogicalProgram, image: &ReplicaImage, state: &ReplicaState) -> BTreeMap<String, Vec<i32>> {
    program
        .data
        .iter()
        .filter_map(|d| Some((d.name.clone(), state.object_words(image, &d.name)?)))
        .collect()
}

fn record_reference(program: &LogicalProgram, images: &[ReplicaImage], monitor: &MonitorConfig) -> Result<Reference, FaultError> {
    /// Generous bound; corpus programs finish in a few thousand slices.
    const REFERENCE_CAP: u64 = 10_000_000;
    let mut rec = Recorder { slices: Vec::new() };
    let report = run_to_completion(images, monitor, &[], REFERENCE_CAP, &mut rec)?;
    if report.outcome != Outcome::Clean {
        return Err(FaultError::Reference(format!("{:?}", report.outcome)));
    }
    let final_words = images.iter().zip(&report.states).map(|(i, s)| final_words(program, i, s)).collect();
    Ok(Reference { slices: rec.slices, traces: report.traces, final_words })
}

/// Parses, builds and records the fault-free reference for `spec`.
pub fn prepare(spec: &CampaignSpec) -> Result<Prepared, FaultError> {
    let program = spec.program.load()?;
    let config = spec.build.to_config()?;
    let build = diversify(&program, &config)?;
    let mut monitor = MonitorConfig::for_images(&build.images);
    monitor.pc_policy = spec.monitor.pc_policy;
    monitor.addr_policy = spec.monitor.addr_policy;
    monitor.semantic_layer = spec.monitor.semantic_layer;
    Prepared::from_images(program, config, build.images, monitor)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial_id: usize,
    pub injection: Injection,
    /// `None` when the trial could not be run; see `error`.
    pub outcome: Option<Outcome>,
    pub latency: Option<u64>,
    /// Clean termination despite the injection.
    pub undetected: bool,
    /// Undetected and observably identical to the fault-free run: same
    /// canonical traces and final data in every replica.
    pub benign: bool,
    pub slices: u64,
    pub error: Option<String>,
}

impl TrialResult {
    pub fn verdict(&self) -> Option<VerdictKind> {
        match &self.outcome {
            Some(Outcome::Detected(v)) => Some(v.kind),
            _ => None,
        }
    }

    pub fn layer(&self) -> Option<Layer> {
        match &self.outcome {
            Some(Outcome::Detected(v)) => Some(v.layer),
            _ => None,
        }
    }

    pub fn is_detected(&self) -> bool {
        self.verdict().is_some()
    }

    /// Undetected with an observable effect.
    pub fn is_escape(&self) -> bool {
        self.undetected && !self.benign
    }

    /// `clean`, `timeout`, `error` or the verdict kind.
    pub fn status(&self) -> String {
        match (&self.outcome, &self.error) {
            (Some(Outcome::Clean), None) => "clean".into(),
            (Some(Outcome::Timeout), None) => "timeout".into(),
            (Some(Outcome::Detected(v)), None) => name(&v.kind),
            _ => "error".into(),
        }
    }
}

/// Serde name of a unit variant.
fn name<T: Serialize>(t: &T) -> String {
    match serde_json::to_value(t) {
        Ok(serde_json::Value::String(s)) => s,
        _ => String::from("?"),
    }
}

/// Runs one injection on fresh replica states.
pub fn run_trial(prep: &Prepared, trial_id: usize, injection: &Injection) -> TrialResult {
    let mut result = TrialResult {
        trial_id,
        injection: injection.clone(),
        outcome: None,
        latency: None,
        undetected: false,
        benign: false,
        slices: 0,
        error: None,
    };
    let run = prep
        .schedule(injection)
        .and_then(|s| Ok(run_to_completion(&prep.images, &prep.monitor, &s, prep.budget(), &mut ())?));
    match run {
        Err(e) => result.error = Some(e.to_string()),
        Ok(report) => {
            result.slices = report.slices;
            if let Outcome::Detected(v) = &report.outcome {
                result.latency = v.latency;
            }
            if report.outcome == Outcome::Clean {
                result.undetected = true;
                result.benign = report.traces == prep.reference.traces
                    && prep
                        .images
                        .iter()
                        .zip(&report.states)
                        .zip(&prep.reference.final_words)
                        .all(|((i, s), w)| final_words(&prep.program, i, s) == *w);
            }
            result.outcome = Some(report.outcome);
        }
    }
    result
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub trials: usize,
    pub errors: usize,
    /// Excluded from every denominator.
    pub benign: usize,
    /// Trials that count: not benign and not errored.
    pub counted: usize,
    pub detected: usize,
    pub timeouts: usize,
    /// Clean terminations with an observable effect.
    pub undetected: usize,
    /// `detected / counted`; timeouts count against it.
    pub detection_rate: Option<f64>,
    pub by_layer: BTreeMap<String, usize>,
    pub latency_histogram: BTreeMap<u64, usize>,
    pub max_latency: Option<u64>,
}

impl Aggregates {
    pub fn from_trials(trials: &[TrialResult]) -> Self {
        let mut a = Aggregates {
            trials: trials.len(),
            errors: 0,
            benign: 0,
            counted: 0,
            detected: 0,
            timeouts: 0,
            undetected: 0,
            detection_rate: None,
            by_layer: BTreeMap::new(),
            latency_histogram: BTreeMap::new(),
            max_latency: None,
        };
        for t in trials {
            if t.error.is_some() {
                a.errors += 1;
                continue;
            }
            if t.benign {
                a.benign += 1;
                continue;
            }
            a.counted += 1;
            match &t.outcome {
                Some(Outcome::Detected(v)) => {
                    a.detected += 1;
                    *a.by_layer.entry(name(&v.layer)).or_default() += 1;
                    if let Some(l) = t.latency {
                        *a.latency_histogram.entry(l).or_default() += 1;
                        a.max_latency = a.max_latency.max(Some(l));
                    }
                }
                Some(Outcome::Timeout) => a.timeouts += 1,
                Some(Outcome::Clean) => a.undetected += 1,
                None => {}
            }
        }
        a.detection_rate = (a.counted > 0).then(|| a.detected as f64 / a.counted as f64);
        a
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignResult {
    pub format: String,
    pub spec: CampaignSpec,
    pub family: String,
    pub replicas: usize,
    pub reference_slices: u64,
    pub budget_slices: u64,
    pub trials: Vec<TrialResult>,
    pub aggregates: Aggregates,
    /// Filled by the analysis step.
    #[serde(default)]
    pub comparison: Option<crate::analysis::ComparisonReport>,
}

impl CampaignResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("campaign result serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// One row per trial.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["trial_id", "family", "correlation", "deltas", "site", "verdict", "layer", "latency", "undetected"])
            .expect("in-memory write");
        for t in &self.trials {
            w.write_record([
                t.trial_id.to_string(),
                self.family.clone(),
                t.injection.correlation.as_str().to_string(),
                t.injection.label(),
                t.injection.trigger.to_string(),
                t.status(),
                t.layer().map(|l| name(&l)).unwrap_or_default(),
                t.latency.map(|l| l.to_string()).unwrap_or_default(),
                t.undetected.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    /// Recomputes aggregates from the stored trials.
    pub fn recompute(&self) -> Aggregates {
        Aggregates::from_trials(&self.trials)
    }
}

/// Runs every trial of `spec`. `workers = 0` uses one thread per core.
pub fn execute_campaign(spec: &CampaignSpec, workers: usize) -> Result<CampaignResult, FaultError> {
    let prep = prepare(spec)?;
    let injections = generate(spec, &prep)?;
    let trials = run_all(&prep, &injections, workers);
    Ok(CampaignResult {
        format: CAMPAIGN_FORMAT.to_string(),
        spec: spec.clone(),
        family: spec.family.name().to_string(),
        replicas: prep.images.len(),
        reference_slices: prep.reference.slices.len() as u64,
        budget_slices: prep.budget(),
        aggregates: Aggregates::from_trials(&trials),
        trials,
        comparison: None,
    })
}

/// Order-preserving parallel map of [`run_trial`].
pub fn run_all(prep: &Prepared, injections: &[Injection], workers: usize) -> Vec<TrialResult> {
    let work = || injections.par_iter().enumerate().map(|(i, inj)| run_trial(prep, i, inj)).collect();
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(work),
        Err(_) => work(),
    }
}
