//! Deterministic output files plus the metadata sidecar that holds the
//! only nondeterministic fields (wall-clock times).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};

/// Writes to `path`, or stdout when absent.
pub fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("output serializes");
    s.push('\n');
    s
}

/// Wall-clock bookkeeping for one command invocation.
pub struct Meta {
    started: SystemTime,
    clock: Instant,
}

impl Meta {
    pub fn start() -> Self {
        Meta { started: SystemTime::now(), clock: Instant::now() }
    }

    /// Writes `<dir>/<stem>.meta.json` listing the outputs and `extra`.
    pub fn finish(self, dir: &Path, stem: &str, outputs: &[PathBuf], extra: Value) -> Result<()> {
        let secs = |t: SystemTime| t.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let meta = json!({
            "tool": concat!("divex ", env!("CARGO_PKG_VERSION")),
            "started_unix": secs(self.started),
            "finished_unix": secs(SystemTime::now()),
            "elapsed_ms": self.clock.elapsed().as_millis() as u64,
            "outputs": outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "run": extra,
        });
        write(&dir.join(format!("{stem}.meta.json")), &json(&meta))
    }
}
