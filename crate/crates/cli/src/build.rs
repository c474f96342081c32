use std::path::{Path, PathBuf};

use anyhow::Result;
use divex_core::diversifier::{diversify, DiversificationConfig, DiversifyError, LayoutCertificate};
use divex_core::image::ImageContainer;
use serde_json::json;

use crate::config::{program_source, usage, RunConfig};
use crate::output::{self, Meta};
use crate::{parse_nop_scope, BuildArgs, EXIT_CERTIFICATE};

pub const CONTAINER_FILE: &str = "image.json";
pub const CERTIFICATE_FILE: &str = "certificate.json";

fn merged(a: &BuildArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let b = &mut cfg.build;
    if let Some(n) = a.replicas {
        b.replicas = n as usize;
    }
    if a.stride.is_some() {
        b.stride = a.stride;
    }
    if let Some(c) = a.critical_size {
        b.critical_size = c;
    }
    if let Some(s) = &a.nop_scope {
        b.nop_scope = parse_nop_scope(s);
    }
    if let Some(s) = a.seed {
        b.seed = s;
    }
    if let Some(r) = a.max_layout_retries {
        b.max_layout_retries = r;
    }
    if let Some(p) = &a.program {
        cfg.program = Some(p.clone());
        cfg.base_dir = PathBuf::new();
    }
    if let Some(d) = &a.out_dir {
        cfg.output_dir = Some(d.clone());
    }
    Ok(cfg)
}

fn diversification(cfg: &RunConfig) -> Result<DiversificationConfig> {
    let mut d = cfg.build.to_config().map_err(|e| usage(e.to_string()))?;
    cfg.layout.apply(&mut d);
    d.validate().map_err(|e| usage(e.to_string()))?;
    Ok(d)
}

fn describe(c: &LayoutCertificate) -> String {
    let flag = |b: bool| if b { "pass" } else { "FAIL" };
    let mut s = format!(
        "certificate: {}  code non-aliasing {}  data non-aliasing {}  independence {}  distinct addresses {}  regions {}",
        flag(c.passed()),
        flag(c.non_aliasing_code),
        flag(c.non_aliasing_data),
        flag(c.structural_independence),
        flag(c.per_id_distinct),
        flag(c.regions_respected),
    );
    for w in c.code_witness.iter().chain(&c.data_witness) {
        s.push_str(&format!(
            "\nwitness: replicas {} and {} overlap at {:#x} ({} / {})",
            w.replicas[0], w.replicas[1], w.address, w.first, w.second
        ));
    }
    s
}

pub fn cmd_build(a: BuildArgs) -> Result<u8> {
    let meta = Meta::start();
    let cfg = merged(&a)?;
    let reference = cfg.program.clone().ok_or_else(|| usage("no program given (argument or `program` in the config)"))?;
    let program = program_source(&reference, &cfg.base_dir)?.load()?;
    let dcfg = diversification(&cfg)?;
    let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    let cert_path = dir.join(CERTIFICATE_FILE);
    let outcome = match diversify(&program, &dcfg) {
        Ok(b) => b,
        Err(DiversifyError::Certificate { attempts, certificate }) => {
            output::write(&cert_path, &output::json(&certificate))?;
            println!("{}", describe(&certificate));
            eprintln!("divex: layout certificate failed after {attempts} attempts; see {}", cert_path.display());
            return Ok(EXIT_CERTIFICATE);
        }
        Err(e) => return Err(e.into()),
    };
    let container = ImageContainer::new(program, dcfg.clone(), outcome.images, outcome.certificate.clone());
    let image_path = dir.join(CONTAINER_FILE);
    output::write(&image_path, &(container.to_json() + "\n"))?;
    output::write(&cert_path, &output::json(&outcome.certificate))?;
    println!(
        "built {} replicas of {reference}: stride {} bytes, seed {:#x}, {} reseeds",
        dcfg.replicas, dcfg.stride, dcfg.seed, outcome.retries
    );
    println!("{}", describe(&outcome.certificate));
    meta.finish(&dir, "build", &[image_path, cert_path], json!({ "program": reference, "seed": dcfg.seed }))?;
    Ok(0)
}

pub fn load_container(path: &Path) -> Result<ImageContainer> {
    let text = crate::config::read_text(path)?;
    Ok(ImageContainer::from_json(&text)?)
}
