use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Result};
use divex_core::faults::{run_trial, Injection, Prepared};
use divex_core::image::ImageContainer;
use divex_core::monitor::{run_to_completion, Outcome};
use serde::Serialize;

use crate::build::load_container;
use crate::config::{usage, RunConfig};
use crate::output;
use crate::{InjectArgs, MonitorArgs, RunArgs, EXIT_RUNTIME};

/// Slice budget for runs without an injection.
pub const FAULT_FREE_MAX_SLICES: u64 = 10_000_000;

fn merged(a: &MonitorArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = a.pc_policy {
        cfg.monitor.pc_policy = p.into();
    }
    if let Some(p) = a.addr_policy {
        cfg.monitor.addr_policy = p.into();
    }
    if a.max_steps_per_slice.is_some() {
        cfg.monitor.max_steps_per_slice = a.max_steps_per_slice;
    }
    if a.max_slices.is_some() {
        cfg.max_slices = a.max_slices;
    }
    Ok(cfg)
}

pub fn injection(flags: &[String], replicas: usize) -> Result<Injection> {
    Injection::from_flags(flags, replicas).map_err(|e| usage(format!("--inject: {e}")))
}

fn prepared(c: ImageContainer, cfg: &RunConfig) -> Result<Prepared> {
    let monitor = cfg.monitor.to_config(&c.images);
    Ok(Prepared::from_images(c.program, c.config, c.images, monitor)?)
}

#[derive(Serialize)]
struct RunSummary {
    outcome: Outcome,
    exit_code: i32,
    slices: u64,
    seed: u64,
    replicas: usize,
    injection: Option<Injection>,
    /// Final words of every data object, per replica.
    final_data: Vec<BTreeMap<String, Vec<i32>>>,
}

fn dump_traces(dir: &Path, traces: &[divex_core::canonical::CanonicalTrace]) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for (r, t) in traces.iter().enumerate() {
        let text: String = t.records.iter().map(|rec| serde_json::to_string(rec).expect("record serializes") + "\n").collect();
        let path = dir.join(format!("trace.r{r}.jsonl"));
        output::write(&path, &text)?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn cmd_run(a: RunArgs) -> Result<u8> {
    let mut cfg = merged(&a.monitor)?;
    if a.dump_trace {
        cfg.dump_trace = true;
    }
    if a.out_dir.is_some() {
        cfg.output_dir = a.out_dir.clone();
    }
    let container = load_container(&a.container)?;
    let (seed, n) = (container.config.seed, container.images.len());
    let (images, monitor, schedule, injection, budget) = if a.inject.is_empty() {
        let monitor = cfg.monitor.to_config(&container.images);
        monitor.check_cap(&container.images)?;
        (container.images, monitor, Vec::new(), None, cfg.max_slices.unwrap_or(FAULT_FREE_MAX_SLICES))
    } else {
        let inj = injection(&a.inject, n)?;
        let prep = prepared(container, &cfg)?;
        let schedule = prep.schedule(&inj)?;
        let budget = cfg.max_slices.unwrap_or_else(|| prep.budget());
        (prep.images, prep.monitor, schedule, Some(inj), budget)
    };
    let report = run_to_completion(&images, &monitor, &schedule, budget, &mut ())?;
    if cfg.dump_trace {
        dump_traces(cfg.output_dir.as_deref().unwrap_or(Path::new(".")), &report.traces)?;
    }
    let program_objects = |img: &divex_core::image::ReplicaImage, s: &divex_core::machine::ReplicaState| {
        img.phi_data.keys().filter_map(|name| Some((name.clone(), s.object_words(img, name)?))).collect()
    };
    let summary = RunSummary {
        exit_code: report.outcome.exit_code(),
        outcome: report.outcome,
        slices: report.slices,
        seed,
        replicas: n,
        injection,
        final_data: images.iter().zip(&report.states).map(|(i, s)| program_objects(i, s)).collect(),
    };
    print!("{}", output::json(&summary));
    Ok(summary.exit_code as u8)
}

pub fn cmd_inject(a: InjectArgs) -> Result<u8> {
    let cfg = merged(&a.monitor)?;
    let container = load_container(&a.container)?;
    let inj = injection(&a.inject, container.images.len())?;
    let prep = prepared(container, &cfg)?;
    let trial = run_trial(&prep, 0, &inj);
    print!("{}", output::json(&trial));
    match (&trial.outcome, &trial.error) {
        (Some(o), _) => Ok(o.exit_code() as u8),
        (None, Some(e)) => Err(anyhow!("{e}")),
        (None, None) => Ok(EXIT_RUNTIME),
    }
}
