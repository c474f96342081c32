use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use divex_core::canonical::CanonicalRecord;
use divex_core::faults::{execute_campaign, CampaignResult, CampaignSpec, Injection, Mutation, Prepared};
use divex_core::image::ImageContainer;
use divex_core::monitor::{run_to_completion, MonitorConfig};
use divex_core::{corpus, isa};
use tempfile::TempDir;

fn divex(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_divex")).args(args).current_dir(cwd).output().expect("divex runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn build(dir: &Path, program: &str, extra: &[&str]) -> ImageContainer {
    let mut args = vec!["build", program, "-o", "out"];
    args.extend_from_slice(extra);
    let o = divex(&args, dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    ImageContainer::from_json(&fs::read_to_string(dir.join("out/image.json")).unwrap()).unwrap()
}

/// Bytes occupied by decodable instructions, per replica.
fn code_bytes(c: &ImageContainer) -> Vec<BTreeSet<u32>> {
    c.images
        .iter()
        .map(|img| img.slot_addresses().filter(|&a| img.instruction_at(a).is_some()).flat_map(|a| a..a + isa::INSTR_WIDTH).collect())
        .collect()
}

#[test]
fn build_writes_a_container_whose_layouts_do_not_alias() {
    let t = TempDir::new().unwrap();
    let c = build(t.path(), "corpus:loop_sum", &["-n", "2", "--stride", "8"]);
    let cert: serde_json::Value = serde_json::from_str(&fs::read_to_string(t.path().join("out/certificate.json")).unwrap()).unwrap();
    assert_eq!(cert["non_aliasing_code"], true);
    assert_eq!(c.config.replicas, 2);
    assert_eq!(c.config.stride, 8);
    let bytes = code_bytes(&c);
    assert!(bytes[0].is_disjoint(&bytes[1]));
    for id in c.program.instr_ids() {
        assert_ne!(c.images[0].phi_code[&id], c.images[1].phi_code[&id]);
    }
    assert!(t.path().join("out/build.meta.json").exists());
}

#[test]
fn one_replica_is_a_usage_error() {
    let t = TempDir::new().unwrap();
    assert_eq!(code(&divex(&["build", "corpus:loop_sum", "-n", "1"], t.path())), 2);
    fs::write(t.path().join("one.toml"), "program = \"corpus:loop_sum\"\n[build]\nreplicas = 1\n").unwrap();
    assert_eq!(code(&divex(&["build", "--config", "one.toml"], t.path())), 2);
}

#[test]
fn missing_inputs_are_usage_errors() {
    let t = TempDir::new().unwrap();
    assert_eq!(code(&divex(&["build", "nope.s"], t.path())), 2);
    assert_eq!(code(&divex(&["build", "corpus:nope"], t.path())), 2);
    assert_eq!(code(&divex(&["run", "nope.json"], t.path())), 2);
    assert_eq!(code(&divex(&["campaign", "nope.toml"], t.path())), 2);
}

#[test]
fn rebuild_with_the_same_seed_is_byte_identical() {
    let t = TempDir::new().unwrap();
    build(t.path(), "corpus:table_walk", &["--seed", "42"]);
    let first = fs::read(t.path().join("out/image.json")).unwrap();
    build(t.path(), "corpus:table_walk", &["--seed", "42"]);
    assert_eq!(fs::read(t.path().join("out/image.json")).unwrap(), first);
    build(t.path(), "corpus:table_walk", &["--seed", "43"]);
    assert_ne!(fs::read(t.path().join("out/image.json")).unwrap(), first);
}

#[test]
fn overlapping_regions_fail_the_certificate_with_a_witness() {
    let t = TempDir::new().unwrap();
    fs::write(
        t.path().join("overlap.toml"),
        "program = \"corpus:table_walk\"\noutput_dir = \"bad\"\n[layout]\n\
         code_regions = [{ base = 0x40000, size = 0x1000 }, { base = 0x40000, size = 0x1000 }]\n",
    )
    .unwrap();
    let o = divex(&["build", "--config", "overlap.toml"], t.path());
    assert_eq!(code(&o), 3);
    assert!(!t.path().join("bad/image.json").exists());
    let cert: serde_json::Value = serde_json::from_str(&fs::read_to_string(t.path().join("bad/certificate.json")).unwrap()).unwrap();
    assert_eq!(cert["non_aliasing_code"], false);
    let w = cert["code_witness"]["address"].as_u64().unwrap();
    assert!((0x40000..0x41000).contains(&w));
}

#[test]
fn fault_free_runs_exit_zero_with_identical_traces() {
    let t = TempDir::new().unwrap();
    for c in corpus::BENCHMARKS {
        for n in ["2", "3"] {
            let container = build(t.path(), &format!("corpus:{}", c.name), &["-n", n]);
            let o = divex(&["run", "out/image.json", "--dump-trace", "-o", "traces"], t.path());
            assert_eq!(code(&o), 0, "{}", c.name);
            let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
            assert_eq!(summary["outcome"]["status"], "clean");
            assert_eq!(summary["seed"], container.config.seed);
            let dumps: Vec<String> = (0..container.images.len())
                .map(|r| fs::read_to_string(t.path().join(format!("traces/trace.r{r}.jsonl"))).unwrap())
                .collect();
            assert!(dumps.iter().all(|d| d == &dumps[0]), "{}", c.name);
            let got: Vec<CanonicalRecord> = dumps[0].lines().map(|l| serde_json::from_str(l).unwrap()).collect();
            for (name, words) in c.golden() {
                for r in 0..container.images.len() {
                    assert_eq!(&summary["final_data"][r][name], &serde_json::json!(words), "{} {name}", c.name);
                }
            }
            let mc = MonitorConfig::for_images(&container.images);
            let lib = run_to_completion(&container.images, &mc, &[], 1_000_000, &mut ()).unwrap();
            assert_eq!(got, lib.traces[0].records);
        }
    }
}

#[test]
fn injected_run_exit_codes_match_the_monitor() {
    let t = TempDir::new().unwrap();
    let c = build(t.path(), "corpus:call_chain", &[]);
    let mc = MonitorConfig::for_images(&c.images);
    let prep = Prepared::from_images(c.program.clone(), c.config.clone(), c.images.clone(), mc.clone()).unwrap();
    let code_addr = c.images[1].phi_code.values().next().copied().unwrap();
    let flags: Vec<Vec<String>> = vec![
        vec!["3:r0:+2".into()],
        vec!["3:all:+4".into()],
        vec!["3:all:+64".into()],
        vec![format!("3:all:pc={code_addr:#x}")],
        vec!["6:r0:-8".into(), "6:r1:+12".into()],
        vec!["6:all:sp=0".into()],
        vec!["8:r1:r1^bit3".into()],
        vec!["2:all:+0".into()],
    ];
    let mut seen = BTreeSet::new();
    for f in flags {
        let mut args = vec!["run", "out/image.json"];
        for x in &f {
            args.extend(["--inject", x.as_str()]);
        }
        let o = divex(&args, t.path());
        let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
        let inj: Injection = serde_json::from_value(summary["injection"].clone()).unwrap();
        let schedule = prep.schedule(&inj).unwrap();
        let expected = run_to_completion(&c.images, &mc, &schedule, prep.budget(), &mut ()).unwrap().outcome;
        assert_eq!(code(&o), expected.exit_code(), "{f:?}");
        assert_eq!(summary["exit_code"], expected.exit_code());
        seen.insert(code(&o));
    }
    assert!(seen.contains(&0) && seen.contains(&10) && seen.contains(&11), "{seen:?}");
}

#[test]
fn inject_classifies_against_the_reference() {
    let t = TempDir::new().unwrap();
    build(t.path(), "corpus:fibonacci", &[]);
    let o = divex(&["inject", "out/image.json", "4:all:+0"], t.path());
    assert_eq!(code(&o), 0);
    let trial: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(trial["benign"], true);
    let o = divex(&["inject", "out/image.json", "4:r1:+2"], t.path());
    assert_eq!(code(&o), 10);
    let trial: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(trial["injection"]["correlation"], "single");
    assert_eq!(trial["latency"], 0);
}

#[test]
fn malformed_injections_are_usage_errors() {
    let t = TempDir::new().unwrap();
    build(t.path(), "corpus:fibonacci", &[]);
    for bad in [
        vec!["4:r0:+4", "5:r1:+4"],
        vec!["4:all:+4", "4:r1:+4"],
        vec!["4:r7:+4"],
        vec!["4:r0:bogus"],
        vec!["x:r0:+4"],
        vec!["4:r0:+4", "4:r0:+8"],
    ] {
        let mut args = vec!["run", "out/image.json"];
        for b in &bad {
            args.extend(["--inject", b]);
        }
        assert_eq!(code(&divex(&args, t.path())), 2, "{bad:?}");
    }
}

#[test]
fn campaigns_are_deterministic_and_match_the_library() {
    let t = TempDir::new().unwrap();
    let spec = repo().join("campaigns/return_address_call_chain.toml");
    let spec = spec.to_str().unwrap();
    for (dir, workers) in [("a", "1"), ("b", "4")] {
        let o = divex(&["campaign", spec, "-w", workers, "-o", dir], t.path());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |p: &str| fs::read(t.path().join(p)).unwrap();
    assert_eq!(read("a/return_address_call_chain.json"), read("b/return_address_call_chain.json"));
    assert_eq!(read("a/return_address_call_chain.csv"), read("b/return_address_call_chain.csv"));
    let meta: serde_json::Value = serde_json::from_slice(&read("a/return_address_call_chain.meta.json")).unwrap();
    assert_eq!(meta["run"]["workers"], 1);

    let result = CampaignResult::from_json(&String::from_utf8(read("a/return_address_call_chain.json")).unwrap()).unwrap();
    let parsed: CampaignSpec = toml::from_str(&fs::read_to_string(spec).unwrap()).unwrap();
    let lib = execute_campaign(&parsed, 2).unwrap();
    assert_eq!(result, lib);
    assert_eq!(result.aggregates.detected, 100);
    assert_eq!(String::from_utf8(read("a/return_address_call_chain.csv")).unwrap(), lib.to_csv());
}

#[test]
fn shipped_campaign_specs_parse() {
    let mut names = BTreeSet::new();
    for entry in fs::read_dir(repo().join("campaigns")).unwrap() {
        let path = entry.unwrap().path();
        let spec: CampaignSpec = toml::from_str(&fs::read_to_string(&path).unwrap()).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(spec.name, path.file_stem().unwrap().to_str().unwrap());
        names.insert(spec.family.name());
    }
    for family in ["correlated_delta_sweep", "return_address_overwrite", "null_pointer", "value_as_pointer", "partial_delta_random", "single_replica_random"] {
        assert!(names.contains(family), "{family}");
    }
}

#[test]
fn documented_examples_are_valid() {
    let t = TempDir::new().unwrap();
    let examples = repo().join("docs/examples");
    let run = examples.join("run.toml");
    let o = divex(&["build", "--config", run.to_str().unwrap(), "-o", "out"], t.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(examples.join("campaign.toml")).unwrap();
    let spec: CampaignSpec = toml::from_str(&text).unwrap();
    assert_eq!(spec.family.name(), "partial_delta_random");
    // The commented-out fixed family is valid too.
    let fixed: String = text
        .lines()
        .map(|l| match l.strip_prefix("# ") {
            Some(rest) if rest.starts_with("kind = \"fixed\"") || rest.starts_with("[[family.injections]]") || rest.starts_with("trigger") || rest.starts_with("correlation =") || rest.starts_with("targets") => rest,
            _ => l,
        })
        .collect::<Vec<_>>()
        .join("\n")
        .replace("kind = \"partial_delta_random\"\nmax_abs = 64\n", "");
    let spec: CampaignSpec = toml::from_str(&fixed).unwrap();
    let divex_core::faults::FaultFamily::Fixed { injections } = spec.family else { panic!("{fixed}") };
    assert_eq!(injections[0].targets[0].mutation, Mutation::PcDelta(-4));
}

#[test]
fn analyze_reproduces_the_synthetic_example() {
    let t = TempDir::new().unwrap();
    let o = divex(&["analyze", "--synthetic", "2048,12", "--k-max", "2", "--json"], t.path());
    assert_eq!(code(&o), 0);
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let b = &r["bounds"][0];
    assert_eq!(b["s_count"], 2048);
    assert_eq!(b["c_max"], 12);
    // (12/2048 · 2^-52)^2 = (3 · 2^-61)^2 = 9 / 2^122
    assert_eq!(b["p_undetected"][1]["exact"], format!("9/{}", 1u128 << 122));
    assert_eq!(b["epsilon"]["exact"], format!("1/{}", 1u128 << 52));
    assert!(r["comparison"].is_null());
}

#[test]
fn analyze_compares_campaigns_and_skips_empty_ones() {
    let t = TempDir::new().unwrap();
    let spec = repo().join("campaigns/null_pointer_string_copy.toml");
    assert_eq!(code(&divex(&["campaign", spec.to_str().unwrap(), "-o", "res"], t.path())), 0);
    let o = divex(&["analyze", "--campaign", "res/null_pointer_string_copy.json", "--json", "-o", "analysis.json"], t.path());
    assert_eq!(code(&o), 0);
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r["comparison"]["trials"], 100);
    assert_eq!(r["comparison"]["rows"].as_array().unwrap().len(), 4);
    assert_eq!(fs::read_to_string(t.path().join("analysis.json")).unwrap(), stdout(&o));

    let mut empty = CampaignResult::from_json(&fs::read_to_string(t.path().join("res/null_pointer_string_copy.json")).unwrap()).unwrap();
    empty.trials.clear();
    empty.aggregates = empty.recompute();
    fs::write(t.path().join("empty.json"), empty.to_json()).unwrap();
    let o = divex(&["analyze", "--campaign", "empty.json", "--json"], t.path());
    assert_eq!(code(&o), 0);
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(r["comparison"].is_null());
    assert!(!r["bounds"].as_array().unwrap().is_empty());
}

#[test]
fn report_renders_every_output_kind() {
    let t = TempDir::new().unwrap();
    let spec = repo().join("campaigns/return_address_call_chain.toml");
    assert_eq!(code(&divex(&["campaign", spec.to_str().unwrap(), "-o", "res", "--analyze"], t.path())), 0);
    assert_eq!(code(&divex(&["analyze", "--synthetic", "2048,12", "-o", "bounds.json"], t.path())), 0);
    let o = divex(
        &["report", "res/return_address_call_chain.json", "res/return_address_call_chain.csv", "bounds.json", "-o", "report.md"],
        t.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let md = fs::read_to_string(t.path().join("report.md")).unwrap();
    assert!(md.contains("## Campaign `return_address_call_chain`"));
    assert!(md.contains("| structural_pc | 100 |"));
    assert!(md.contains("unresolvable-at-sample-size"));
    assert!(md.contains("| fully_correlated | structural_pc_violation | 100 |"));
    assert!(md.contains(&format!("| 2 | 9/{} |", 1u128 << 122)));
    fs::write(t.path().join("junk.json"), "{\"format\": \"other\"}").unwrap();
    assert_eq!(code(&divex(&["report", "junk.json"], t.path())), 2);
}

#[test]
fn isa_doc_lists_every_opcode() {
    let t = TempDir::new().unwrap();
    let o = divex(&["isa-doc"], t.path());
    assert_eq!(code(&o), 0);
    let md = stdout(&o);
    for op in isa::Opcode::ALL {
        assert!(md.contains(op.mnemonic()), "{}", op.mnemonic());
    }
}

#[test]
fn shipped_isa_reference_is_current() {
    let t = TempDir::new().unwrap();
    let o = divex(&["isa-doc"], t.path());
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o), fs::read_to_string(repo().join("docs/isa.md")).unwrap());
}

#[test]
fn assembly_guide_example_builds_and_runs_clean() {
    let guide = fs::read_to_string(repo().join("docs/assembly.md")).unwrap();
    let start = guide.find("```asm\n").expect("guide has an example") + "```asm\n".len();
    let len = guide[start..].find("```").unwrap();
    let t = TempDir::new().unwrap();
    fs::write(t.path().join("ex.s"), &guide[start..start + len]).unwrap();
    build(t.path(), "ex.s", &[]);
    let o = divex(&["run", "out/image.json"], t.path());
    assert_eq!(code(&o), 0, "{}", stdout(&o));
}
