//! Run manifests: written when a command starts, finalized when it ends.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use causalrm::evaluation::Experiment;
use chrono::{SecondsFormat, Utc};
use serde::Serialize;

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub status: String,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub seeds: Vec<u64>,
    pub variant: Option<String>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub error: Option<String>,
    /// Fully resolved configuration; `--config <this file>` replays it.
    pub config: Experiment,
}

pub struct ManifestWriter {
    path: PathBuf,
    pub manifest: RunManifest,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl ManifestWriter {
    /// Creates `out` if needed and writes `<out>/<command>.manifest.json`.
    pub fn start(
        out: &Path,
        command: &str,
        config: &Experiment,
        inputs: Vec<String>,
        variant: Option<String>,
    ) -> Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))?;
        let w = ManifestWriter {
            path: out.join(format!("{command}.manifest.json")),
            manifest: RunManifest {
                command: command.to_string(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                status: "running".into(),
                started_at: now(),
                finished_at: None,
                seeds: config.seeds.clone(),
                variant,
                inputs,
                outputs: Vec::new(),
                error: None,
                config: config.clone(),
            },
        };
        w.write()?;
        Ok(w)
    }

    pub fn output(&mut self, p: &Path) {
        self.manifest.outputs.push(p.display().to_string());
    }

    pub fn finish(mut self, result: &Result<()>) -> Result<()> {
        self.manifest.finished_at = Some(now());
        match result {
            Ok(()) => self.manifest.status = "ok".into(),
            Err(e) => {
                self.manifest.status = "error".into();
                self.manifest.error = Some(format!("{e:#}"));
            }
        }
        self.write()
    }

    fn write(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&self.path, text + "\n").with_context(|| format!("writing {}", self.path.display()))
    }
}
