//! Run manifests: arguments, seed, version and content digests of inputs
//! and outputs. No timestamps, so identical runs give identical manifests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{CliError, CliResult};

#[derive(Debug, Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    schema: u32,
    tool: &'static str,
    version: &'static str,
    subcommand: &'a str,
    arguments: &'a [String],
    seed: Option<u64>,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
}

fn digest(path: &Path) -> CliResult<FileDigest> {
    let bytes = fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let hash = Sha256::digest(&bytes);
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: hash.iter().map(|b| format!("{b:02x}")).collect(),
    })
}

pub struct RunRecord<'a> {
    pub subcommand: &'a str,
    pub arguments: &'a [String],
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl RunRecord<'_> {
    pub fn write(&self, path: &Path) -> CliResult<()> {
        let manifest = Manifest {
            schema: 1,
            tool: "fairproxy",
            version: env!("CARGO_PKG_VERSION"),
            subcommand: self.subcommand,
            arguments: self.arguments,
            seed: self.seed,
            inputs: self.inputs.iter().map(|p| digest(p)).collect::<CliResult<_>>()?,
            outputs: self.outputs.iter().map(|p| digest(p)).collect::<CliResult<_>>()?,
        };
        crate::commands::write_json(path, &manifest)
    }
}

/// `<output>.manifest.json` unless overridden.
pub fn default_path(explicit: &Option<PathBuf>, primary: &Path) -> PathBuf {
    explicit.clone().unwrap_or_else(|| {
        let mut name = primary.as_os_str().to_owned();
        name.push(".manifest.json");
        PathBuf::from(name)
    })
}
