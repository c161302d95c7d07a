// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use serde_json::Value;

pub const SCHEMA_VERSION: u32 = 1;

/// Record of one command invocation, written next to its outputs.
///
/// No timestamps or host data, so re-running the same command yields the
/// same manifest.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool: &'static str,
    pub crate_version: &'static str,
    pub library_version: &'static str,
    pub command: &'static str,
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    pub config: Value,
    pub outputs: Vec<PathBuf>,
}

impl Manifest {
    pub fn new(command: &'static str, argv: &[String], seed: Option<u64>, config: Value) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            tool: "sae",
            crate_version: env!("CARGO_PKG_VERSION"),
            library_version: batchtopk_sae::VERSION,
            command,
            argv: argv.iter().skip(1).cloned().collect(),
            seed,
            config,
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")
            .with_context(|| format!("writing manifest {}", path.display()))
    }
}

/// `out` with its extension replaced by `suffix` (`run.ckpt` → `run.manifest.json`).
pub fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    out.with_extension(suffix)
}
