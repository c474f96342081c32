//! Configuration files and program references.
//!
//! Files are TOML unless the extension is `.json`. Relative program paths
//! resolve against the directory of the file that names them.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use divex_core::diversifier::{BuildOptions, DiversificationConfig};
use divex_core::faults::{CampaignSpec, MonitorOptions, ProgramSource};
use divex_core::image::{Region, ReplicaImage};
use divex_core::monitor::{CheckPolicy, MonitorConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Rejected before any work starts; the process exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::error::Error for UsageError {}

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorSection {
    pub pc_policy: CheckPolicy,
    pub addr_policy: CheckPolicy,
    pub semantic_layer: bool,
    /// Defaults to one more than the longest NOP/JMP run of any replica.
    pub max_steps_per_slice: Option<u32>,
}

impl Default for MonitorSection {
    fn default() -> Self {
        let o = MonitorOptions::default();
        MonitorSection {
            pc_policy: o.pc_policy,
            addr_policy: o.addr_policy,
            semantic_layer: o.semantic_layer,
            max_steps_per_slice: None,
        }
    }
}

impl MonitorSection {
    pub fn to_config(&self, images: &[ReplicaImage]) -> MonitorConfig {
        let mut m = MonitorConfig::for_images(images);
        m.pc_policy = self.pc_policy;
        m.addr_policy = self.addr_policy;
        m.semantic_layer = self.semantic_layer;
        if let Some(cap) = self.max_steps_per_slice {
            m.max_steps_per_slice = cap;
        }
        m
    }
}

/// Replaces parts of the built-in address map. Each list needs one entry
/// per replica.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutOverride {
    pub code_regions: Option<Vec<Region>>,
    pub data_regions: Option<Vec<Region>>,
    pub stack_bases: Option<Vec<u32>>,
    pub shared_regions: Option<Vec<Region>>,
}

impl LayoutOverride {
    pub fn apply(&self, cfg: &mut DiversificationConfig) {
        if let Some(r) = &self.code_regions {
            cfg.code_regions = r.clone();
        }
        if let Some(r) = &self.data_regions {
            cfg.data_regions = r.clone();
        }
        if let Some(s) = &self.stack_bases {
            cfg.stack_bases = s.clone();
        }
        if let Some(r) = &self.shared_regions {
            cfg.shared_regions = r.clone();
        }
    }
}

/// Settings shared by `build`, `run` and `inject`. Command-line flags
/// override file values.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Assembly path or `corpus:NAME`.
    pub program: Option<String>,
    pub output_dir: Option<PathBuf>,
    pub dump_trace: bool,
    pub max_slices: Option<u64>,
    pub build: BuildOptions,
    pub layout: LayoutOverride,
    pub monitor: MonitorSection,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = read_structured(path)?;
        cfg.base_dir = parent_dir(path);
        Ok(cfg)
    }
}

pub fn parent_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(usage(format!("{} does not exist", path.display())));
    }
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn read_structured<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// `corpus:NAME` names a built-in program; anything else is a path.
pub fn program_source(reference: &str, base: &Path) -> Result<ProgramSource> {
    if let Some(name) = reference.strip_prefix("corpus:") {
        if divex_core::corpus::find(name).is_none() {
            let names: Vec<_> = divex_core::corpus::all().map(|c| c.name).collect();
            return Err(usage(format!("no corpus program `{name}`; available: {}", names.join(", "))));
        }
        return Ok(ProgramSource::Corpus(name.to_string()));
    }
    let path = base.join(reference);
    Ok(ProgramSource::Source(read_text(&path)?))
}

/// Reads a campaign spec. A `path` program is inlined as source so the
/// result file is self-contained.
pub fn load_campaign_spec(path: &Path) -> Result<CampaignSpec> {
    let mut spec: CampaignSpec = read_structured(path)?;
    if let ProgramSource::Path(p) = &spec.program {
        spec.program = ProgramSource::Source(read_text(&parent_dir(path).join(p))?);
    }
    if spec.name.is_empty() {
        spec.name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    }
    Ok(spec)
}
