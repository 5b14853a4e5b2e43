//! Run manifest embedded in every report, and the wall-clock sidecar.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::io::{write_json, IoError};

pub const TOOL: &str = "stint";

/// Everything needed to rerun a command. The output directory and thread
/// count are left out so that reruns compare byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub parameters: BTreeMap<String, Value>,
    pub argv: Vec<String>,
}

impl RunManifest {
    pub fn new(subcommand: &str, argv: &[String]) -> Self {
        Self {
            tool: TOOL.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: subcommand.to_string(),
            parameters: BTreeMap::new(),
            argv: replay_args(argv),
        }
    }

    pub fn set(&mut self, key: &str, value: impl Serialize) {
        self.parameters
            .insert(key.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
    }
}

/// Drops the program name and the `--out`/`--threads` options.
pub fn replay_args(argv: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        if a == "--out" || a == "--threads" {
            it.next();
        } else if !(a.starts_with("--out=") || a.starts_with("--threads=")) {
            out.push(a.clone());
        }
    }
    out
}

#[derive(Serialize)]
struct Timing {
    subcommand: String,
    started_unix: f64,
    wall_seconds: f64,
    threads: usize,
}

pub fn write_timing(dir: &Path, subcommand: &str, started: SystemTime, elapsed: Duration, threads: usize) -> Result<(), IoError> {
    let started_unix = started.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    write_json(
        &dir.join("timing.json"),
        &Timing {
            subcommand: subcommand.to_string(),
            started_unix,
            wall_seconds: elapsed.as_secs_f64(),
            threads,
        },
    )
}
