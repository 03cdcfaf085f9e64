use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crimecast::ingest::sha256_file;
use serde::{Deserialize, Serialize};

use crate::config::Loaded;
use crate::fail::{CliError, CliResult};

pub const TOOL_VERSION: &str = concat!("crimecast ", env!("CARGO_PKG_VERSION"));
pub const SUFFIX: &str = ".provenance.json";

/// Which directory a recorded path is relative to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Root {
    /// The directory holding the config file.
    Config,
    Workdir,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub root: Root,
    pub path: String,
    pub sha256: String,
}

/// Sidecar written by every command next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub command: String,
    pub config_hash: String,
    pub parameters: BTreeMap<String, String>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

fn root_dir(l: &Loaded, root: Root) -> PathBuf {
    match root {
        Root::Config => l.base.clone(),
        Root::Workdir => l.workdir(),
    }
}

fn hash(l: &Loaded, root: Root, rel: &str) -> CliResult<FileHash> {
    let path = root_dir(l, root).join(rel);
    let sha256 = sha256_file(&path).map_err(CliError::from)?;
    Ok(FileHash { root, path: rel.replace('\\', "/"), sha256 })
}

/// Collects inputs and outputs, then writes `<workdir>/<manifest_rel>`.
pub struct Recorder<'a> {
    loaded: &'a Loaded,
    command: String,
    parameters: BTreeMap<String, String>,
    inputs: Vec<(Root, String)>,
    outputs: Vec<String>,
}

impl<'a> Recorder<'a> {
    pub fn new(loaded: &'a Loaded, command: &str) -> Self {
        Self { loaded, command: command.into(), parameters: BTreeMap::new(), inputs: Vec::new(), outputs: Vec::new() }
    }

    pub fn param(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.parameters.insert(key.into(), value.to_string());
        self
    }

    /// A config-relative input, as written in the config file.
    pub fn config_input(&mut self, rel: &Path) -> &mut Self {
        self.inputs.push((Root::Config, rel.to_string_lossy().into_owned()));
        self
    }

    pub fn work_input(&mut self, rel: &str) -> &mut Self {
        self.inputs.push((Root::Workdir, rel.into()));
        self
    }

    pub fn output(&mut self, rel: &str) -> &mut Self {
        self.outputs.push(rel.into());
        self
    }

    pub fn write(&self, manifest_rel: &str) -> CliResult<Provenance> {
        let l = self.loaded;
        let p = Provenance {
            tool_version: TOOL_VERSION.into(),
            command: self.command.clone(),
            config_hash: l.hash.clone(),
            parameters: self.parameters.clone(),
            inputs: self.inputs.iter().map(|(r, p)| hash(l, *r, p)).collect::<CliResult<_>>()?,
            outputs: self.outputs.iter().map(|p| hash(l, Root::Workdir, p)).collect::<CliResult<_>>()?,
        };
        let path = l.workdir().join(manifest_rel);
        let body = serde_json::to_vec_pretty(&p).expect("provenance serializes");
        fs::write(&path, body).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
        Ok(p)
    }
}

fn manifests(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            manifests(&path, out)?;
        } else if path.to_string_lossy().ends_with(SUFFIX) {
            out.push(path);
        }
    }
    Ok(())
}

/// Outcome of checking every provenance sidecar under the workdir.
#[derive(Debug, Default)]
pub struct VerifyReport {
    pub checked: usize,
    pub files: usize,
    pub problems: Vec<String>,
}

pub fn verify(l: &Loaded) -> CliResult<VerifyReport> {
    let workdir = l.workdir();
    let mut found = Vec::new();
    manifests(&workdir, &mut found).map_err(|e| {
        CliError::Input(format!("cannot scan {}: {e}; run `crimecast ingest` first", workdir.display()))
    })?;
    let mut report = VerifyReport::default();
    for path in found {
        let shown = path.strip_prefix(&workdir).unwrap_or(&path).display().to_string();
        let text = fs::read_to_string(&path).map_err(|e| CliError::Input(format!("{shown}: {e}")))?;
        let p: Provenance = match serde_json::from_str(&text) {
            Ok(p) => p,
            Err(e) => {
                report.problems.push(format!("{shown}: unreadable manifest ({e})"));
                continue;
            }
        };
        report.checked += 1;
        if p.config_hash != l.hash {
            report.problems.push(format!("{shown}: produced under a different config"));
        }
        if p.tool_version != TOOL_VERSION {
            report.problems.push(format!("{shown}: produced by {}", p.tool_version));
        }
        for f in p.inputs.iter().chain(&p.outputs) {
            report.files += 1;
            let full = root_dir(l, f.root).join(&f.path);
            match sha256_file(&full) {
                Ok(h) if h == f.sha256 => {}
                Ok(_) => report.problems.push(format!("{shown}: {} changed", f.path)),
                Err(_) => report.problems.push(format!("{shown}: {} missing", f.path)),
            }
        }
    }
    Ok(report)
}
