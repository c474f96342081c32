use super::*;
use crate::analysis::{compare, compute_bounds, worst_case, compute_bounds_all, HonestyFlag, Satisfied};
use crate::isa::IsaConstants;
use crate::monitor::{Layer, Outcome, VerdictKind};

fn spec(program: &str, family: FaultFamily, sampling: Sampling) -> CampaignSpec {
    CampaignSpec {
        name: String::new(),
        program: ProgramSource::Corpus(program.into()),
        build: BuildOptions::default(),
        monitor: MonitorOptions::default(),
        family,
        sampling,
        sites: None,
        seed: 11,
    }
}

#[test]
fn correlated_sweep_count() {
    let mut s = spec("loop_sum", FaultFamily::CorrelatedDeltaSweep { min_abs: 1, max_abs: 64 }, Sampling::Exhaustive);
    s.sites = Some(SiteRange { start: 3, end: 13 });
    let prep = prepare(&s).unwrap();
    let inj = generate(&s, &prep).unwrap();
    assert_eq!(inj.len(), 1280);
    let deltas: BTreeSet<i32> = inj
        .iter()
        .map(|i| match i.targets[0].mutation {
            Mutation::PcDelta(d) => d,
            _ => unreachable!(),
        })
        .collect();
    assert_eq!(deltas.len(), 128);
    assert!(!deltas.contains(&0));
    assert!(inj.iter().all(|i| (3..13).contains(&i.trigger) && i.correlation == Correlation::FullyCorrelated));
}

#[test]
fn correlation_tags_are_checked() {
    let d = |x| Mutation::PcDelta(x);
    assert!(Injection::correlated(0, 3, d(4)).validate(3).is_ok());
    assert!(Injection::correlated(0, 2, d(4)).validate(3).is_err());
    let mut mixed = Injection::correlated(0, 2, d(4));
    mixed.targets[1].mutation = d(8);
    assert!(mixed.validate(2).is_err());
    assert!(Injection::partial(0, vec![d(4), d(4)]).validate(2).is_err());
    assert!(Injection::partial(0, vec![d(4), d(0)]).validate(2).is_ok());
    assert!(Injection::single(0, 1, d(2)).validate(2).is_ok());
    assert!(Injection::single(0, 2, d(2)).validate(2).is_err());
    let mut two = Injection::single(0, 0, d(2));
    two.targets.push(Target { replica: 1, mutation: d(2) });
    assert!(two.validate(2).is_err());
}

#[test]
fn unaligned_single_replica_shift_is_detected() {
    let inj = Injection::single(5, 0, Mutation::PcDelta(2));
    let s = spec("loop_sum", FaultFamily::Fixed { injections: vec![inj] }, Sampling::Exhaustive);
    let r = execute_campaign(&s, 1).unwrap();
    let t = &r.trials[0];
    assert_eq!(t.verdict(), Some(VerdictKind::SemanticDivergence));
    assert_eq!(t.latency, Some(0));
    assert!(!t.undetected);
}

#[test]
fn identity_perturbation_is_benign() {
    let inj = Injection::correlated(4, 2, Mutation::PcDelta(0));
    let s = spec("fibonacci", FaultFamily::Fixed { injections: vec![inj] }, Sampling::Exhaustive);
    let r = execute_campaign(&s, 1).unwrap();
    let t = &r.trials[0];
    assert_eq!(t.outcome, Some(Outcome::Clean));
    assert!(t.undetected && t.benign && !t.is_escape());
    assert_eq!(r.aggregates.benign, 1);
    assert_eq!(r.aggregates.counted, 0);
    assert_eq!(r.aggregates.detection_rate, None);
}

#[test]
fn null_pointer_targets_base_register_everywhere() {
    let s = spec("string_copy", FaultFamily::NullPointer, Sampling::Samples(30));
    let prep = prepare(&s).unwrap();
    let inj = generate(&s, &prep).unwrap();
    for i in &inj {
        let slice = &prep.reference.slices[i.trigger as usize];
        let base = slice.base_register().unwrap();
        assert_eq!(i.correlation, Correlation::FullyCorrelated);
        assert!(i.targets.iter().all(|t| t.mutation == Mutation::RegSet { reg: base, value: 0 }));
    }
    let trials = run_all(&prep, &inj, 2);
    for t in &trials {
        assert_eq!(t.verdict(), Some(VerdictKind::StructuralAddrViolation), "{t:?}");
        assert_eq!(t.latency, Some(0));
    }
}

#[test]
fn value_as_pointer_copies_an_untagged_register() {
    let s = spec("table_walk", FaultFamily::ValueAsPointer, Sampling::Samples(30));
    let prep = prepare(&s).unwrap();
    for i in generate(&s, &prep).unwrap() {
        let Mutation::RegCopy { dst, src } = i.targets[0].mutation else { panic!() };
        let slice = &prep.reference.slices[i.trigger as usize];
        assert_eq!(slice.base_register(), Some(dst));
        assert!(slice.regs.iter().all(|f| f[src.index()].tag.is_none()));
    }
}

#[test]
fn return_address_overwrite_collapses_pcs() {
    let s = spec("call_chain", FaultFamily::ReturnAddressOverwrite, Sampling::Samples(25));
    let r = execute_campaign(&s, 0).unwrap();
    for t in &r.trials {
        let Mutation::MemSet { loc: MemLoc::StackTop, value } = t.injection.targets[0].mutation else { panic!() };
        assert!(r.trials.len() == 25 && value % 4 == 0);
        assert_eq!(t.verdict(), Some(VerdictKind::StructuralPcViolation));
        assert_eq!(t.layer(), Some(Layer::StructuralPc));
        assert_eq!(t.latency, Some(0));
    }
}

#[test]
fn data_bitflip_hits_private_words() {
    let s = spec("table_walk", FaultFamily::DataBitflip, Sampling::Samples(40));
    let prep = prepare(&s).unwrap();
    for i in generate(&s, &prep).unwrap() {
        assert_eq!(i.correlation, Correlation::Single);
        let Mutation::MemBitflip { loc: MemLoc::Object { name, .. }, bit } = &i.targets[0].mutation else { panic!() };
        assert!(*bit < 32);
        assert!(!prep.program.data.iter().find(|d| &d.name == name).unwrap().shared);
    }
}

#[test]
fn campaigns_are_reproducible_across_worker_counts() {
    let s = spec("loop_sum", FaultFamily::PartialDeltaRandom { max_abs: 16 }, Sampling::Samples(60));
    let a = execute_campaign(&s, 1).unwrap();
    let b = execute_campaign(&s, 4).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.recompute(), a.aggregates);
    let mut other = s.clone();
    other.seed += 1;
    assert_ne!(execute_campaign(&other, 1).unwrap().trials, a.trials);
    let back = CampaignResult::from_json(&a.to_json()).unwrap();
    assert_eq!(back, a);
}

#[test]
fn csv_has_one_row_per_trial() {
    let s = spec("fibonacci", FaultFamily::SingleReplicaRandom { max_abs: 8 }, Sampling::Samples(12));
    let r = execute_campaign(&s, 1).unwrap();
    let csv = r.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("trial_id,family,correlation,deltas,site,verdict,layer,latency,undetected"));
    assert_eq!(lines.count(), 12);
    assert!(csv.contains(",single_replica_random,single,r"));
}

#[test]
fn empty_or_out_of_range_sites_are_rejected() {
    let mut s = spec("loop_sum", FaultFamily::CorrelatedDeltaSweep { min_abs: 4, max_abs: 8 }, Sampling::Exhaustive);
    let prep = prepare(&s).unwrap();
    s.sites = Some(SiteRange { start: 5, end: 5 });
    assert!(matches!(generate(&s, &prep), Err(FaultError::EmptyRange { .. })));
    s.sites = Some(SiteRange { start: 0, end: 1 << 40 });
    assert!(matches!(generate(&s, &prep), Err(FaultError::EmptyRange { .. })));
}

#[test]
fn randomized_families_are_not_enumerable() {
    let s = spec("loop_sum", FaultFamily::DataBitflip, Sampling::Exhaustive);
    let prep = prepare(&s).unwrap();
    assert!(matches!(generate(&s, &prep), Err(FaultError::NotEnumerable("data_bitflip"))));
}

#[test]
fn spec_round_trips_through_json() {
    let s = spec("loop_sum", FaultFamily::PartialDeltaRandom { max_abs: 64 }, Sampling::Samples(10));
    let j = serde_json::to_string(&s).unwrap();
    assert_eq!(serde_json::from_str::<CampaignSpec>(&j).unwrap(), s);
}

#[test]
fn zero_escapes_hold_when_resolvable() {
    let s = spec("fibonacci", FaultFamily::SingleReplicaRandom { max_abs: 16 }, Sampling::Samples(200));
    let r = execute_campaign(&s, 0).unwrap();
    assert_eq!(r.aggregates.undetected, 0);
    let prep = prepare(&s).unwrap();
    // A degenerate ISA with ε = 1, so the bound is γ and exceeds 1/n.
    let coarse = IsaConstants { opcode_bits: 0, reg_field_bits: 0, num_reg_fields: 0, value_bits: 0, ..Default::default() };
    let bounds = compute_bounds_all(&prep.images, &coarse, 1).unwrap();
    let c = compare(&r, worst_case(&bounds).unwrap());
    assert!(c.rows[0].bound.0 >= c.rows[0].resolution.0);
    assert!(c.all(Satisfied::Holds), "{c:?}");
}

#[test]
fn blind_semantic_layer_violates_the_bound() {
    let mut s = spec("table_walk", FaultFamily::DataBitflip, Sampling::Samples(60));
    s.monitor.semantic_layer = false;
    let r = execute_campaign(&s, 0).unwrap();
    assert!(r.aggregates.undetected > 0);
    let prep = prepare(&s).unwrap();
    let b = compute_bounds(&prep.images[0], &IsaConstants::default(), 3).unwrap();
    let c = compare(&r, &b);
    assert!(c.all(Satisfied::Violated), "{c:?}");
}

#[test]
fn tiny_bounds_are_flagged_unresolvable() {
    let s = spec("loop_sum", FaultFamily::PartialDeltaRandom { max_abs: 64 }, Sampling::Samples(50));
    let r = execute_campaign(&s, 0).unwrap();
    let prep = prepare(&s).unwrap();
    let bounds = compute_bounds_all(&prep.images, &IsaConstants::default(), 4).unwrap();
    let c = compare(&r, worst_case(&bounds).unwrap());
    assert_eq!(r.aggregates.undetected, 0);
    assert!(c.all(Satisfied::UnresolvableAtSampleSize));
    assert!(c.flags.contains(&HonestyFlag::BoundBelowResolution));
    assert!(!c.notes.is_empty());
}

#[test]
fn mutation_syntax_examples() {
    let r = |i| Reg::new(i).unwrap();
    let cases = [
        ("+8", Mutation::PcDelta(8)),
        ("-4", Mutation::PcDelta(-4)),
        ("pc=0x40010", Mutation::PcSet(0x40010)),
        ("r3=0", Mutation::RegSet { reg: r(3), value: 0 }),
        ("sp=r4", Mutation::RegCopy { dst: SP, src: r(4) }),
        ("r3^bit5", Mutation::RegBitflip { reg: r(3), bit: 5 }),
        ("[sp]=0x40000", Mutation::MemSet { loc: MemLoc::StackTop, value: 0x40000 }),
        ("values[2]^bit0", Mutation::MemBitflip { loc: MemLoc::Object { name: "values".into(), word: 2 }, bit: 0 }),
        ("0x7f000=1", Mutation::MemSet { loc: MemLoc::Abs(0x7f000), value: 1 }),
    ];
    for (text, m) in cases {
        assert_eq!(text.parse::<Mutation>(), Ok(m), "{text}");
    }
    for bad in ["", "8", "pc^bit1", "r3^bit32", "r16=1", "x[=1", "[sp]"] {
        assert!(bad.parse::<Mutation>().is_err(), "{bad}");
    }
}

fn arb_mutation() -> impl proptest::strategy::Strategy<Value = Mutation> {
    use proptest::prelude::*;
    let reg = (0u8..16).prop_map(|i| Reg::new(i).unwrap());
    let loc = prop_oneof![
        any::<u32>().prop_map(MemLoc::Abs),
        Just(MemLoc::StackTop),
        ("[a-z_][a-z0-9_]{0,8}", 0u32..64).prop_map(|(name, word)| MemLoc::Object { name, word }),
    ];
    prop_oneof![
        any::<i32>().prop_map(Mutation::PcDelta),
        any::<u32>().prop_map(Mutation::PcSet),
        (reg.clone(), any::<u32>()).prop_map(|(reg, value)| Mutation::RegSet { reg, value }),
        (reg.clone(), 0u8..32).prop_map(|(reg, bit)| Mutation::RegBitflip { reg, bit }),
        (loc.clone(), any::<u32>()).prop_map(|(loc, value)| Mutation::MemSet { loc, value }),
        (loc, 0u8..32).prop_map(|(loc, bit)| Mutation::MemBitflip { loc, bit }),
        (reg.clone(), reg).prop_map(|(dst, src)| Mutation::RegCopy { dst, src }),
    ]
}

proptest::proptest! {
    #[test]
    fn mutation_display_round_trips(m in arb_mutation()) {
        proptest::prop_assert_eq!(m.to_string().parse::<Mutation>(), Ok(m));
    }
}

#[test]
fn injection_flags_infer_correlation() {
    let inj = |f: &[&str]| Injection::from_flags(f, 2);
    assert_eq!(inj(&["4:all:+8"]).unwrap(), Injection::correlated(4, 2, Mutation::PcDelta(8)));
    assert_eq!(inj(&["4:r1:-4"]).unwrap(), Injection::single(4, 1, Mutation::PcDelta(-4)));
    assert_eq!(inj(&["4:r1:-4", "4:r0:+8"]).unwrap(), Injection::partial(4, vec![Mutation::PcDelta(8), Mutation::PcDelta(-4)]));
    assert_eq!(inj(&["4:r0:+8", "4:r1:+8"]).unwrap(), Injection::correlated(4, 2, Mutation::PcDelta(8)));
    for bad in [&["4:r0:+8", "5:r1:+8"][..], &["4:all:+8", "4:r1:+8"], &["4:r2:+8"], &["4:r0:+8", "4:r0:+4"], &[], &["4:+8"]] {
        assert!(inj(bad).is_err(), "{bad:?}");
    }
    assert!(Injection::from_flags(&["2:r0:+8", "2:r1:+8"], 3).is_err());
}
