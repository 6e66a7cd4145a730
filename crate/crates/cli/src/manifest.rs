use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use acuity::etl::bundle::{sha256_file, write_atomic};
use acuity::etl::ShiftFunnel;
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const RUN_MANIFEST: &str = "run.json";
pub const TOOL_VERSION: &str = concat!("acuity ", env!("CARGO_PKG_VERSION"));

/// Record of one command run, written last into its output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    /// SHA-256 of each input file, keyed by path.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of each file written, keyed by name inside the output directory.
    pub outputs: BTreeMap<String, String>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
    pub funnel: Option<ShiftFunnel>,
}

pub struct Timer {
    start: Instant,
    pub timings: BTreeMap<String, f64>,
}

impl Timer {
    pub fn new() -> Self {
        Timer {
            start: Instant::now(),
            timings: BTreeMap::new(),
        }
    }

    /// Records the time since the previous lap under `stage`.
    pub fn lap(&mut self, stage: &str) {
        self.timings.insert(stage.to_string(), self.start.elapsed().as_secs_f64());
        self.start = Instant::now();
    }
}

impl RunManifest {
    pub fn new(command: &str, config_hash: String, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            config_hash,
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            timings: BTreeMap::new(),
            funnel: None,
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let digest = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    pub fn output(&mut self, dir: &Path, name: &str) -> Result<()> {
        let digest = sha256_file(&dir.join(name))?;
        self.outputs.insert(name.to_string(), digest);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        write_atomic(&dir.join(RUN_MANIFEST), &json)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Option<RunManifest>> {
        let path = dir.join(RUN_MANIFEST);
        if !path.exists() {
            return Ok(None);
        }
        let bytes = std::fs::read(&path).with_context(|| path.display().to_string())?;
        Ok(Some(serde_json::from_slice(&bytes).with_context(|| path.display().to_string())?))
    }

    /// Checks `dir/name` against the digest this run recorded for it.
    pub fn verify_output(&self, dir: &Path, name: &str) -> Result<()> {
        let Some(expected) = self.outputs.get(name) else {
            return Ok(());
        };
        if &sha256_file(&dir.join(name))? != expected {
            bail!("{} does not match the digest recorded in {RUN_MANIFEST}", dir.join(name).display());
        }
        Ok(())
    }
}
