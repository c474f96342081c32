use std::path::Path;

use anyhow::Result;
use divex_core::analysis::{
    compare, compute_bounds_all, render_bounds, render_comparison, synthetic_image, worst_case, BoundReport, ComparisonReport,
};
use divex_core::diversifier::diversify;
use divex_core::faults::{CampaignResult, CampaignSpec};
use divex_core::image::ReplicaImage;
use divex_core::isa::IsaConstants;
use serde::{Deserialize, Serialize};

use crate::build::load_container;
use crate::config::{read_text, usage};
use crate::output;
use crate::AnalyzeArgs;

pub const DEFAULT_K_MAX: usize = 4;
pub const ANALYSIS_FORMAT: &str = "divex-analysis/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub format: String,
    /// What the images came from.
    pub source: String,
    pub constants: IsaConstants,
    pub bounds: Vec<BoundReport>,
    /// Replica with the largest per-step bound.
    pub worst_replica: usize,
    /// Absent when no campaign, or an empty one, was supplied.
    pub comparison: Option<ComparisonReport>,
}

impl AnalysisReport {
    pub fn render(&self) -> String {
        let mut out = format!("bounds for {}\n", self.source);
        out.push_str(&render_bounds(&self.bounds));
        if let Some(w) = self.bounds.iter().find(|b| b.replica == self.worst_replica) {
            out.push_str(&format!("worst replica {}: ", w.replica));
            let ps: Vec<String> =
                w.p_undetected.iter().enumerate().map(|(i, p)| format!("P({}) = {}", i + 1, p.0)).collect();
            out.push_str(&ps.join(", "));
            out.push('\n');
        }
        if let Some(c) = &self.comparison {
            out.push('\n');
            out.push_str(&render_comparison(c));
        }
        out
    }
}

/// Rebuilds the replica images a campaign ran against.
pub fn images_for_spec(spec: &CampaignSpec) -> Result<Vec<ReplicaImage>> {
    let program = spec.program.load()?;
    let cfg = spec.build.to_config()?;
    Ok(diversify(&program, &cfg)?.images)
}

pub fn analyze(source: String, images: &[ReplicaImage], campaign: Option<&CampaignResult>, k_max: usize) -> Result<AnalysisReport> {
    if k_max == 0 {
        return Err(usage("--k-max must be at least 1"));
    }
    let constants = IsaConstants::default();
    let bounds = compute_bounds_all(images, &constants, k_max)?;
    let worst = worst_case(&bounds).expect("compute_bounds_all rejects empty input");
    let comparison = campaign.filter(|c| !c.trials.is_empty()).map(|c| compare(c, worst));
    Ok(AnalysisReport {
        format: ANALYSIS_FORMAT.to_string(),
        source,
        constants,
        worst_replica: worst.replica,
        bounds,
        comparison,
    })
}

fn parse_synthetic(s: &str) -> Result<(u32, u32)> {
    let bad = || usage(format!("--synthetic `{s}`: expected SLOTS,EQUIVALENT with 1 ≤ EQUIVALENT ≤ SLOTS"));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    let (slots, eq): (u32, u32) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
    if eq == 0 || eq > slots {
        return Err(bad());
    }
    Ok((slots, eq))
}

pub fn load_campaign(path: &Path) -> Result<CampaignResult> {
    CampaignResult::from_json(&read_text(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))
}

pub fn cmd_analyze(a: AnalyzeArgs) -> Result<u8> {
    let campaign = a.campaign.as_deref().map(load_campaign).transpose()?;
    let (source, images) = match (&a.synthetic, &a.container, &campaign) {
        (Some(s), _, _) => {
            let (slots, eq) = parse_synthetic(s)?;
            (format!("synthetic image: {slots} slots, {eq} equivalent"), vec![synthetic_image(slots, eq)])
        }
        (None, Some(p), _) => (p.display().to_string(), load_container(p)?.images),
        (None, None, Some(c)) => (format!("campaign {} build", c.spec.name), images_for_spec(&c.spec)?),
        (None, None, None) => return Err(usage("give a container, --campaign or --synthetic")),
    };
    let report = analyze(source, &images, campaign.as_ref(), a.k_max)?;
    let json = output::json(&report);
    if let Some(p) = &a.output {
        output::write(p, &json)?;
    }
    print!("{}", if a.json { json } else { report.render() });
    Ok(0)
}
