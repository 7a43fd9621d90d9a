//! Parameter directories: `manifest.json` plus one binary matrix file per
//! layer (`layer_1.bin` … `layer_{H+1}.bin`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{NetworkArch, NetworkParams};
use crate::error::{Error, Result};
use crate::linalg::io::{read_binary, write_binary};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsManifest {
    pub arch: NetworkArch,
    pub seed: Option<u64>,
    pub scale: Option<f64>,
    pub layer_files: Vec<String>,
}

fn layer_file(l: usize) -> String {
    format!("layer_{l}.bin")
}

pub fn save_params(
    dir: impl AsRef<Path>,
    params: &NetworkParams,
    seed: Option<u64>,
    scale: Option<f64>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut layer_files = Vec::new();
    for (i, w) in params.weights().iter().enumerate() {
        let name = layer_file(i + 1);
        write_binary(dir.join(&name), w)?;
        layer_files.push(name);
    }
    let manifest = ParamsManifest {
        arch: params.arch().clone(),
        seed,
        scale,
        layer_files,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_params(dir: impl AsRef<Path>) -> Result<(NetworkParams, ParamsManifest)> {
    let dir = dir.as_ref();
    let path: PathBuf = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: ParamsManifest =
        serde_json::from_str(&text).map_err(|e| Error::Json { path: path.clone(), source: e })?;
    let weights = manifest
        .layer_files
        .iter()
        .map(|f| read_binary(dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    let params = NetworkParams::new(manifest.arch.clone(), weights)?;
    Ok((params, manifest))
}
