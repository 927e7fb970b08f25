use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const PREAMBLE_PREFIX: &str = "# manifest ";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Self-description embedded as the first line of every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, without `--out`.
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub version: String,
    pub inputs: Vec<InputDigest>,
    /// `-` for standard output.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn preamble(&self) -> Result<String> {
        Ok(format!(
            "{}{}\n",
            PREAMBLE_PREFIX,
            serde_json::to_string(self)?
        ))
    }

    pub fn from_report(text: &str) -> Result<Self> {
        let first = text.lines().next().unwrap_or_default();
        let Some(json) = first.strip_prefix(PREAMBLE_PREFIX) else {
            bail!("report does not start with a manifest line");
        };
        serde_json::from_str(json).context("malformed manifest line")
    }
}

/// Drops `--out <path>` / `--out=<path>` from an argument list.
pub fn strip_out(args: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(args.len());
    let mut skip = false;
    for a in args {
        if skip {
            skip = false;
            continue;
        }
        if a == "--out" || a == "-o" {
            skip = true;
            continue;
        }
        if a.starts_with("--out=") {
            continue;
        }
        out.push(a.clone());
    }
    out
}
