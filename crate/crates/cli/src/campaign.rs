use anyhow::Result;
use divex_core::faults::{execute_campaign, Aggregates, FaultError};
use serde_json::json;

use crate::analyze::{analyze, images_for_spec};
use crate::config::{load_campaign_spec, usage};
use crate::output::{self, Meta};
use crate::CampaignArgs;

pub fn summary(a: &Aggregates) -> String {
    let rate = a.detection_rate.map(|r| format!("{:.4}", r)).unwrap_or_else(|| "n/a".into());
    let mut s = format!(
        "trials {}  counted {}  detected {}  undetected {}  timeouts {}  benign {}  errors {}  detection rate {rate}\n",
        a.trials, a.counted, a.detected, a.undetected, a.timeouts, a.benign, a.errors
    );
    for (layer, n) in &a.by_layer {
        s.push_str(&format!("  {layer}: {n}\n"));
    }
    if let Some(m) = a.max_latency {
        s.push_str(&format!("  max latency {m} slices\n"));
    }
    s
}

pub fn cmd_campaign(a: CampaignArgs) -> Result<u8> {
    let meta = Meta::start();
    let spec = load_campaign_spec(&a.spec)?;
    let mut result = execute_campaign(&spec, a.workers).map_err(|e| match e {
        FaultError::Config(_) | FaultError::EmptyRange { .. } | FaultError::NotEnumerable(_) | FaultError::EmptyFamily(_) => {
            usage(e.to_string())
        }
        e => e.into(),
    })?;
    if a.analyze {
        let report = analyze(spec.name.clone(), &images_for_spec(&spec)?, Some(&result), a.k_max)?;
        result.comparison = report.comparison;
    }
    let stem = spec.name.as_str();
    let json_path = a.out_dir.join(format!("{stem}.json"));
    let csv_path = a.out_dir.join(format!("{stem}.csv"));
    output::write(&json_path, &(result.to_json() + "\n"))?;
    output::write(&csv_path, &result.to_csv())?;
    print!("campaign {stem}: family {}, seed {}\n{}", result.family, spec.seed, summary(&result.aggregates));
    if let Some(c) = &result.comparison {
        print!("{}", divex_core::analysis::render_comparison(c));
    }
    meta.finish(&a.out_dir, stem, &[json_path, csv_path], json!({ "seed": spec.seed, "workers": a.workers }))?;
    Ok(0)
}
