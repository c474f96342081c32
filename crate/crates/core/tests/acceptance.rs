//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::HashMap;
use std::time::Instant;

use num_bigint::BigInt;
use num_rational::BigRational;

use divex_core::analysis::{compare, compute_bounds, compute_bounds_all, synthetic_image, worst_case, HonestyFlag, Satisfied};
use divex_core::canonical::{CanonWord, CanonicalRecord};
use divex_core::corpus::{self, BENCHMARKS};
use divex_core::diversifier::{diversify, BuildOptions, DiversificationConfig, DiversifyError, NopScope};
use divex_core::faults::{
    execute_campaign, generate, prepare, run_all, CampaignSpec, FaultFamily, Injection, MonitorOptions, Mutation,
    Prepared, ProgramSource, Sampling, TrialResult,
};
use divex_core::image::ReplicaImage;
use divex_core::isa::{epsilon_bound, IsaConstants};
use divex_core::machine::ReplicaState;
use divex_core::monitor::{run_to_completion, MonitorConfig, Observer, Outcome, SliceOutcome, VerdictKind};
use divex_core::program::LogicalInstrId;

/// Worker threads for campaign criteria.
const WORKERS: usize = 8;
/// Criterion 2: every trial detected within this many slices.
const CORRELATED_MAX_LATENCY: u64 = 1;
/// Criterion 8: trials per (program, family) pair; 5 programs x 2 families.
const PROBABILISTIC_TRIALS_PER_CELL: usize = 1_000;
const PROBABILISTIC_MAX_DELTA: u32 = 64;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn spec(program: &str, build: BuildOptions, family: FaultFamily, sampling: Sampling, seed: u64) -> CampaignSpec {
    CampaignSpec {
        name: format!("acceptance-{program}"),
        program: ProgramSource::Corpus(program.into()),
        build,
        monitor: MonitorOptions::default(),
        family,
        sampling,
        sites: None,
        seed,
    }
}

fn build(replicas: usize, stride: u32, seed: u64) -> BuildOptions {
    BuildOptions { replicas, stride: Some(stride), seed, ..BuildOptions::default() }
}

#[derive(Default)]
struct SliceLog {
    slices: Vec<SliceOutcome>,
}

impl Observer for SliceLog {
    fn on_slice(&mut self, s: &SliceOutcome) {
        self.slices.push(s.clone());
    }
}

fn retired_logical(images: &[ReplicaImage], s: &SliceOutcome) -> Vec<Option<LogicalInstrId>> {
    images
        .iter()
        .zip(&s.retire_pcs)
        .map(|(img, pc)| pc.and_then(|pc| img.logical_at().get(&pc).copied()))
        .collect()
}

fn c1_fault_free() -> Verdict {
    let mut runs = 0;
    let mut failures = Vec::new();
    for c in BENCHMARKS {
        let p = c.program();
        for (n, strides) in [(2usize, [8u32, 16]), (3, [12, 24])] {
            for l in strides {
                for seed in 0..100u64 {
                    runs += 1;
                    let cfg = DiversificationConfig::standard(n, seed).unwrap().with_stride(l);
                    let images = match diversify(&p, &cfg) {
                        Ok(b) => b.images,
                        Err(e) => {
                            failures.push(format!("{} N={n} l={l} seed={seed}: {e}", c.name));
                            continue;
                        }
                    };
                    let mon = MonitorConfig::for_images(&images);
                    let r = run_to_completion(&images, &mon, &[], 1_000_000, &mut ()).unwrap();
                    let traces_equal = r.traces.iter().all(|t| t == &r.traces[0]);
                    let golden = images.iter().zip(&r.states).all(|(img, s)| {
                        c.golden().iter().all(|(name, want)| s.object_words(img, name).as_ref() == Some(want))
                    });
                    if r.outcome != Outcome::Clean || !traces_equal || !golden {
                        failures.push(format!(
                            "{} N={n} l={l} seed={seed}: outcome {:?}, traces equal {traces_equal}, golden {golden}",
                            c.name, r.outcome
                        ));
                    }
                }
            }
        }
    }
    verdict(
        failures.is_empty(),
        format!(
            "{runs} runs over {} programs, N in {{2,3}}, 100 seeds, 2 strides each; {} failures{}",
            BENCHMARKS.len(),
            failures.len(),
            failures.first().map(|f| format!(", first: {f}")).unwrap_or_default()
        ),
    )
}

fn c2_correlated_pc() -> Verdict {
    let s = spec(
        "loop_sum",
        build(2, 8, 1),
        FaultFamily::CorrelatedDeltaSweep { min_abs: 4, max_abs: 64 },
        Sampling::Exhaustive,
        1,
    );
    let r = execute_campaign(&s, WORKERS).unwrap();
    let misses: Vec<&TrialResult> = r
        .trials
        .iter()
        .filter(|t| !(t.is_detected() && t.latency.is_some_and(|l| l <= CORRELATED_MAX_LATENCY)))
        .collect();
    let mut by_delta: HashMap<String, usize> = HashMap::new();
    for t in &misses {
        *by_delta.entry(t.injection.label()).or_default() += 1;
    }
    let mut worst: Vec<_> = by_delta.into_iter().collect();
    worst.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    worst.truncate(6);
    let escapes = misses.iter().filter(|t| t.undetected).count();
    let late = misses.iter().filter(|t| t.is_detected()).count();
    verdict(
        misses.is_empty(),
        format!(
            "{} trials over {} slices; detected within {CORRELATED_MAX_LATENCY} slice: {}; misses {} (clean {escapes}, late {late}, timeout {}); most frequent missing deltas {:?}",
            r.trials.len(),
            r.reference_slices,
            r.trials.len() - misses.len(),
            misses.len(),
            misses.iter().filter(|t| t.outcome == Some(Outcome::Timeout)).count(),
            worst
        ),
    )
}

/// First site where a correlated `delta` lands every replica on one
/// logical instruction.
fn same_landing_site(prep: &Prepared, delta: i32) -> Option<(u64, LogicalInstrId)> {
    let maps: Vec<_> = prep.images.iter().map(|i| i.logical_at()).collect();
    prep.reference.slices.iter().enumerate().find_map(|(t, s)| {
        let ids: Vec<_> = s
            .pcs
            .iter()
            .zip(&maps)
            .map(|(pc, m)| m.get(&pc.wrapping_add_signed(delta)).copied())
            .collect();
        match ids[0] {
            Some(id) if ids.iter().all(|x| *x == Some(id)) => Some((t as u64, id)),
            _ => None,
        }
    })
}

fn c3_alignment_window() -> Verdict {
    // With w = 4 every |dPC| < 4 other than 0 is an unaligned fetch and traps,
    // so the window is exercised with l/N = 16 and a one-word shift.
    let s = spec("loop_sum", build(2, 32, 2), FaultFamily::NullPointer, Sampling::Exhaustive, 0);
    let prep = prepare(&s).unwrap();
    let delta = 4;
    let Some((site, target)) = same_landing_site(&prep, delta) else {
        return verdict(false, "no site found where a +4 shift lands both replicas on one logical instruction");
    };
    let inj = Injection::correlated(site, 2, Mutation::PcDelta(delta));
    let sched = prep.schedule(&inj).unwrap();
    let mut log = SliceLog::default();
    let r = run_to_completion(&prep.images, &prep.monitor, &sched, prep.budget(), &mut log).unwrap();
    let retired = retired_logical(&prep.images, &log.slices[site as usize]);
    let same = retired.iter().all(|x| *x == Some(target));
    let outcome = match &r.outcome {
        Outcome::Detected(v) => format!("detected {:?} after {} slices", v.kind, v.latency.unwrap_or(0)),
        o => format!("{o:?}"),
    };
    verdict(
        same,
        format!("|dPC|=4 < l/N=16 at slice {site}: both replicas retire {target}; {outcome}; no one-slice guarantee asserted"),
    )
}

fn c4_return_address() -> Verdict {
    let s = spec("call_chain", BuildOptions::default(), FaultFamily::ReturnAddressOverwrite, Sampling::Samples(100), 4);
    let r = execute_campaign(&s, WORKERS).unwrap();
    let ok = r
        .trials
        .iter()
        .filter(|t| t.verdict() == Some(VerdictKind::StructuralPcViolation) && t.latency == Some(0))
        .count();
    verdict(ok == 100 && r.trials.len() == 100, format!("{ok}/{} structural_pc_violation at latency 0", r.trials.len()))
}

fn c5_pointer_semantics() -> Verdict {
    let mut lines = Vec::new();
    let mut pass = true;
    for family in [FaultFamily::NullPointer, FaultFamily::ValueAsPointer] {
        let (mut ok, mut total) = (0, 0);
        for c in BENCHMARKS {
            let s = spec(c.name, BuildOptions::default(), family.clone(), Sampling::Samples(100), 5);
            let r = execute_campaign(&s, WORKERS).unwrap();
            total += r.trials.len();
            ok += r
                .trials
                .iter()
                .filter(|t| t.verdict() == Some(VerdictKind::StructuralAddrViolation) && t.latency == Some(0))
                .count();
        }
        pass &= ok == total && total > 0;
        lines.push(format!("{}: {ok}/{total}", family.name()));
    }
    verdict(pass, format!("structural_addr_violation at the dereferencing slice: {}", lines.join(", ")))
}

fn c6_epsilon() -> Verdict {
    let c = IsaConstants { opcode_bits: 8, reg_field_bits: 4, num_reg_fields: 3, value_bits: 32, ..IsaConstants::default() };
    let eps = epsilon_bound(&c).to_rational();
    let want = BigRational::new(BigInt::from(1), BigInt::from(1) << 52usize);
    verdict(eps == want, format!("epsilon = {eps}"))
}

fn c7_bound() -> Verdict {
    let b = compute_bounds(&synthetic_image(2048, 12), &IsaConstants::default(), 2).unwrap();
    let g = BigRational::new(12.into(), 2048.into());
    let e = BigRational::new(BigInt::from(1), BigInt::from(1) << 52usize);
    let want = (&g * &e) * (&g * &e);
    let got = b.p_at(2).cloned();
    verdict(
        b.s_count == 2048 && b.c_max == 12 && got.as_ref() == Some(&want),
        format!("|S|={} C={} P(2)={}", b.s_count, b.c_max, got.map(|g| g.to_string()).unwrap_or_default()),
    )
}

fn c8_probabilistic() -> Verdict {
    let mut total = 0;
    let mut escapes = 0;
    let mut timeouts = 0;
    let mut labelled = true;
    let mut detail = Vec::new();
    for c in BENCHMARKS {
        for (i, family) in [
            FaultFamily::PartialDeltaRandom { max_abs: PROBABILISTIC_MAX_DELTA },
            FaultFamily::SingleReplicaRandom { max_abs: PROBABILISTIC_MAX_DELTA },
        ]
        .into_iter()
        .enumerate()
        {
            let s = spec(c.name, BuildOptions::default(), family, Sampling::Samples(PROBABILISTIC_TRIALS_PER_CELL), 80 + i as u64);
            let r = execute_campaign(&s, WORKERS).unwrap();
            let prep = prepare(&s).unwrap();
            let bounds = compute_bounds_all(&prep.images, &IsaConstants::default(), 4).unwrap();
            let cmp = compare(&r, worst_case(&bounds).unwrap());
            total += r.trials.len();
            escapes += r.aggregates.undetected;
            timeouts += r.aggregates.timeouts;
            let honest = cmp.all(Satisfied::UnresolvableAtSampleSize)
                && cmp.flags.contains(&HonestyFlag::BoundBelowResolution)
                && !cmp.notes.is_empty();
            labelled &= honest;
            if r.aggregates.undetected > 0 || !honest {
                let v: Vec<_> = cmp.rows.iter().map(|r| format!("k={} {:?}", r.k, r.satisfied)).collect();
                detail.push(format!("{} {}: {} undetected, rows {v:?}", c.name, r.family, r.aggregates.undetected));
            }
        }
    }
    verdict(
        escapes == 0 && labelled,
        format!(
            "{total} trials, undetected {escapes}, timeouts {timeouts}, all comparisons unresolvable-at-sample-size with flags: {labelled}{}",
            if detail.is_empty() { String::new() } else { format!("; {}", detail.join("; ")) }
        ),
    )
}

fn c9_fragmentation() -> Verdict {
    let b = BuildOptions { critical_size: 16, nop_scope: NopScope::None, seed: 9, ..BuildOptions::default() };
    let s = spec("fragment_af", b, FaultFamily::NullPointer, Sampling::Exhaustive, 0);
    let prep = prepare(&s).unwrap();
    let p = &prep.program;
    let body = p.functions[0].block_index("body").unwrap() as u32;
    // Boundaries where some replica is about to take a cut between two
    // body instructions. In time order the first is the cut after B.
    let show = |x: &Option<LogicalInstrId>| match x {
        Some(x) if x.block == body => ["A", "B", "C", "D", "E", "F"][x.index as usize].to_string(),
        Some(x) => x.to_string(),
        None => "-".into(),
    };
    let mut lines = Vec::new();
    let mut example_ok = None;
    for (t, s) in prep.reference.slices.iter().enumerate() {
        let interior_cut = prep.images.iter().zip(&s.pcs).any(|(img, pc)| {
            let in_body_fragment = img.fragment_map.iter().any(|f| f.block == body && (f.start..f.end).contains(pc));
            let into_body = img.instruction_at(*pc).and_then(|j| j.imm).is_some_and(|d| {
                img.logical_at().get(&pc.wrapping_add_signed(d)).is_some_and(|x| x.block == body)
            });
            img.stitch_addresses.contains(pc) && in_body_fragment && into_body
        });
        if !interior_cut {
            continue;
        }
        let inj = Injection::correlated(t as u64, prep.images.len(), Mutation::PcDelta(4));
        let sched = prep.schedule(&inj).unwrap();
        let mut log = SliceLog::default();
        let r = run_to_completion(&prep.images, &prep.monitor, &sched, prep.budget(), &mut log).unwrap();
        let retired = log.slices.get(t).map(|s| retired_logical(&prep.images, s)).unwrap_or_default();
        let differ = retired.len() == 2 && retired[0] != retired[1];
        let latency = match &r.outcome {
            Outcome::Detected(v) => v.latency,
            _ => None,
        };
        let ok = differ && latency.is_some_and(|l| l <= 1);
        example_ok.get_or_insert(ok);
        lines.push(format!(
            "{}slice {t}: retire {} vs {}, latency {latency:?}",
            if lines.is_empty() { "after B, " } else { "" },
            retired.first().map(show).unwrap_or_default(),
            retired.get(1).map(show).unwrap_or_default()
        ));
    }
    verdict(
        example_ok == Some(true),
        format!("+4 at {} interior cut boundaries: {}", lines.len(), lines.join("; ")),
    )
}

fn c10_certificates() -> Verdict {
    let mut passed = 0;
    let mut total = 0;
    for c in corpus::all() {
        let p = c.program();
        for seed in 0..100 {
            total += 1;
            let cfg = DiversificationConfig::standard(2, seed).unwrap();
            if let Ok(b) = diversify(&p, &cfg) {
                passed += usize::from(b.certificate.non_aliasing_code && b.certificate.non_aliasing_data);
            }
        }
    }
    let mut cfg = DiversificationConfig::standard(2, 3).unwrap();
    cfg.code_regions[1] = cfg.code_regions[0];
    let witness = match diversify(&corpus::get("loop_sum").program(), &cfg) {
        Err(DiversifyError::Certificate { certificate, .. }) => certificate.code_witness.map(|w| w.address),
        _ => None,
    };
    verdict(
        passed == total && witness.is_some(),
        format!(
            "{passed}/{total} certificates pass; overlapping code regions -> witness at {}",
            witness.map_or("none".to_string(), |a| format!("{a:#x}"))
        ),
    )
}

#[derive(Default)]
struct Coupling {
    prefixes: Vec<Vec<CanonicalRecord>>,
    checked: usize,
    violations: usize,
}

impl Observer for Coupling {
    fn on_boundary(&mut self, _slice: u64, states: &[ReplicaState]) {
        if self.prefixes.is_empty() {
            self.prefixes = vec![Vec::new(); states.len()];
        }
        if self.prefixes.iter().all(|p| p == &self.prefixes[0]) {
            let canon = |s: &ReplicaState| -> Vec<CanonWord> { s.regs.iter().map(|w| CanonWord::from(*w)).collect() };
            let first = canon(&states[0]);
            self.checked += 1;
            if states.iter().any(|s| canon(s) != first) {
                self.violations += 1;
            }
        }
    }

    fn on_slice(&mut self, s: &SliceOutcome) {
        for (p, r) in self.prefixes.iter_mut().zip(&s.records) {
            p.extend(*r);
        }
    }
}

fn c11_temporal_coupling() -> Verdict {
    let mut runs = 0;
    let mut checked = 0;
    let mut violations = 0;
    let mut latencies = Vec::new();
    let mut candidates = Vec::new();
    for c in BENCHMARKS {
        let s = spec(c.name, BuildOptions::default(), FaultFamily::DataBitflip, Sampling::Samples(200), 11);
        let prep = prepare(&s).unwrap();
        let inj = generate(&s, &prep).unwrap();
        let trials = run_all(&prep, &inj, WORKERS);
        candidates.extend(trials.into_iter().filter(|t| t.is_detected()).map(|t| (t, s.clone())));
    }
    // Longest latencies first: they have the most boundaries between injection and detection.
    candidates.sort_by_key(|(t, _)| std::cmp::Reverse(t.latency));
    for (t, s) in candidates.into_iter().take(10) {
        let prep = prepare(&s).unwrap();
        let sched = prep.schedule(&t.injection).unwrap();
        let mut obs = Coupling::default();
        let r = run_to_completion(&prep.images, &prep.monitor, &sched, prep.budget(), &mut obs).unwrap();
        assert!(matches!(r.outcome, Outcome::Detected(_)));
        runs += 1;
        checked += obs.checked;
        violations += obs.violations;
        latencies.push(t.latency.unwrap_or(0));
    }
    verdict(
        runs == 10 && violations == 0,
        format!("{runs} detected runs (latencies {latencies:?}), {checked} boundaries with equal prefixes, {violations} with unequal register files"),
    )
}

fn main() {
    let criteria: [(u8, &str, fn() -> Verdict); 11] = [
        (1, "fault-free semantic equivalence", c1_fault_free),
        (2, "correlated dPC, |dPC| >= l/N, exhaustive", c2_correlated_pc),
        (3, "alignment window carries no guarantee", c3_alignment_window),
        (4, "return-address overwrite collapses pcs", c4_return_address),
        (5, "pointer-semantics violations", c5_pointer_semantics),
        (6, "epsilon exactness", c6_epsilon),
        (7, "bound arithmetic", c7_bound),
        (8, "probabilistic regime, property-based", c8_probabilistic),
        (9, "fragmentation decorrelates one-word shifts", c9_fragmentation),
        (10, "layout certificates", c10_certificates),
        (11, "temporal coupling of register files", c11_temporal_coupling),
    ];
    let only: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (id, name, f) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let v = f();
        println!(
            "criterion {id:>2} {} {name} ({:.1} s): {}",
            if v.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            v.detail
        );
        if !v.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
