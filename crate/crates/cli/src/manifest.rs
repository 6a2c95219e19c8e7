//! Run manifests: everything needed to repeat a command and check its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use drpca::io::SynthConfig;
use drpca::multilevel::RegistrationConfig;
use drpca::synth::{DeformationKind, LandscapeMetric};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Failure;

pub const MANIFEST_VERSION: u32 = 1;

/// A fully resolved command: inputs are absolute paths and configs are complete.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Invocation {
    Synth {
        config: SynthConfig,
    },
    Register {
        images: Vec<PathBuf>,
        config: RegistrationConfig,
    },
    Landscape {
        images: Vec<PathBuf>,
        metric: LandscapeMetric,
        kind: DeformationKind,
        k: usize,
    },
    EvalLandmarks {
        landmarks: PathBuf,
        fields: PathBuf,
    },
}

impl Invocation {
    pub fn inputs(&self) -> Vec<&Path> {
        match self {
            Invocation::Synth { .. } => Vec::new(),
            Invocation::Register { images, .. } | Invocation::Landscape { images, .. } => {
                images.iter().map(PathBuf::as_path).collect()
            }
            Invocation::EvalLandmarks { landmarks, fields } => vec![landmarks, fields],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub phase: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub tool_version: String,
    #[serde(flatten)]
    pub invocation: Invocation,
    pub inputs: Vec<FileRecord>,
    /// Relative to the directory holding the manifest.
    pub outputs: Vec<FileRecord>,
    /// Grid spacing of each pyramid level in full-resolution pixels, coarsest first.
    /// Stored displacements are always full-resolution pixel units.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level_spacing: Option<Vec<f64>>,
    pub timings: Vec<Timing>,
}

pub fn sha256_file(path: &Path) -> Result<String, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::io(format!("reading {}", path.display()), e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn record(path: &Path, name: &Path) -> Result<FileRecord, Failure> {
    Ok(FileRecord {
        path: name.to_path_buf(),
        sha256: sha256_file(path)?,
    })
}

pub fn load(path: &Path) -> Result<RunManifest, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::io(format!("reading {}", path.display()), e))?;
    let manifest: RunManifest = serde_json::from_str(&text)
        .map_err(|e| Failure::Usage(format!("{}: not a run manifest: {e}", path.display())))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Failure::Usage(format!(
            "{}: manifest version {} is not supported",
            path.display(),
            manifest.version
        )));
    }
    Ok(manifest)
}

pub fn to_json(manifest: &RunManifest) -> String {
    serde_json::to_string_pretty(manifest).expect("manifest serializes") + "\n"
}
