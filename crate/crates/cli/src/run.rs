//! Per-run output directories, manifests and input lookup.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use modfab::harness::{fingerprint, ExperimentConfig};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Length of the fingerprint prefix used in directory names.
const PREFIX: usize = 12;

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: Option<u64>,
    fingerprint: &'a str,
    input: Option<String>,
    input_sha256: Option<String>,
    created_unix: u64,
    config: &'a ExperimentConfig,
}

pub struct Run {
    pub dir: PathBuf,
}

impl Run {
    /// Creates `<out>/<command>-<fingerprint prefix>/` and writes its manifest.
    /// The fingerprint covers the command, resolved config, seed and input bytes,
    /// so reruns with identical inputs land in the same directory.
    pub fn start(out: &Path, command: &str, cfg: &ExperimentConfig, seed: Option<u64>, input: Option<&Path>) -> Result<Self> {
        let input_sha256 = input.map(digest_file).transpose()?;
        let fp = fingerprint(&(command, cfg, seed, &input_sha256));
        let dir = out.join(format!("{command}-{}", &fp[..PREFIX]));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let manifest = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            fingerprint: &fp,
            input: input.map(|p| absolute(p).display().to_string()),
            input_sha256,
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            config: cfg,
        };
        let run = Self { dir };
        run.write("manifest.json", &serde_json::to_string_pretty(&manifest)?)?;
        Ok(run)
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

fn digest_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn absolute(path: &Path) -> PathBuf {
    fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf())
}

/// Resolves `--in` to a file called `name`: the path itself, `<path>/<name>`,
/// or the single run directory under `path` that contains one.
pub fn find_input(path: &Path, name: &str) -> Result<PathBuf> {
    if path.is_file() {
        return Ok(path.to_path_buf());
    }
    if !path.is_dir() {
        bail!("input {} does not exist", path.display());
    }
    let direct = path.join(name);
    if direct.is_file() {
        return Ok(direct);
    }
    let mut found: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path().join(name)))
        .filter(|p| p.is_file())
        .collect();
    found.sort();
    match found.len() {
        0 => bail!("no {name} under {}", path.display()),
        1 => Ok(found.remove(0)),
        _ => bail!(
            "{} run directories under {} contain {name}; pass one of them with --in",
            found.len(),
            path.display()
        ),
    }
}
