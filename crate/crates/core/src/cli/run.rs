use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cli::{commands, exit_code, RunArgs, EXIT_CONFIG, EXIT_USAGE};
use crate::config::FlatConfig;
use crate::digest::{sha256_hex, sha256_parts};
use crate::error::{Error, Result};
use crate::lm::TinyLm;

pub const MANIFEST_FILE: &str = "manifest.json";
/// Wall-clock timings live apart from the manifest so that repeated runs
/// produce identical manifests.
pub const TIMING_FILE: &str = "timing.json";
const MARKER_FILE: &str = ".ratlab-run";

/// Self-description of a run directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// Effective config in canonical `key=value` form.
    pub config: String,
    pub config_hash: String,
    /// Directory relative config paths were resolved against.
    pub config_dir: PathBuf,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    /// sha256 of every input, by config key.
    pub inputs: BTreeMap<String, String>,
    /// sha256 of every file written, by path relative to the run directory.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn versions() -> BTreeMap<String, String> {
    [
        ("ratlab", env!("CARGO_PKG_VERSION").to_string()),
        ("checkpoint_format", crate::nn::FORMAT_VERSION.to_string()),
        ("kv_index", crate::rag::INDEX_VERSION.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

pub(crate) struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn config_failure(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        message: message.into(),
    }
}

fn absolute(p: &Path) -> PathBuf {
    if let Ok(c) = std::fs::canonicalize(p) {
        return c;
    }
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir().map(|d| d.join(p)).unwrap_or_else(|_| p.to_path_buf())
    }
}

/// Creates `out`, refusing to reuse an existing directory unless `force`
/// is set, and even then only when it is empty or an earlier run directory.
fn prepare_out(out: &Path, force: bool) -> std::result::Result<(), Failure> {
    if out.exists() {
        let empty = std::fs::read_dir(out).map(|mut d| d.next().is_none()).unwrap_or(false);
        if !empty {
            if !force {
                return Err(usage(format!(
                    "output directory {} already exists; pass --force to replace it",
                    out.display()
                )));
            }
            if !out.join(MARKER_FILE).exists() {
                return Err(usage(format!(
                    "refusing to replace {}: it is not a run directory",
                    out.display()
                )));
            }
            std::fs::remove_dir_all(out).map_err(|e| Failure::from(Error::io(out, e)))?;
        }
    }
    std::fs::create_dir_all(out).map_err(|e| Failure::from(Error::io(out, e)))?;
    std::fs::write(out.join(MARKER_FILE), "").map_err(|e| Failure::from(Error::io(out, e)))?;
    Ok(())
}

fn hash_path(path: &Path) -> Result<String> {
    if path.is_dir() {
        let files = list_files(path)?;
        let mut parts = Vec::with_capacity(files.len() * 2);
        for rel in files {
            let bytes = std::fs::read(path.join(&rel)).map_err(|e| Error::io(path.join(&rel), e))?;
            parts.push(rel.into_bytes());
            parts.push(bytes);
        }
        Ok(sha256_parts(parts.iter().map(Vec::as_slice)))
    } else {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(sha256_hex(bytes))
    }
}

/// Files under `dir` as sorted `/`-separated relative paths.
fn list_files(dir: &Path) -> Result<Vec<String>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("walked below root");
                out.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

/// Everything a subcommand may touch: its effective config, the directory
/// relative paths resolve against, and the run directory it writes into.
pub struct RunContext {
    pub subcommand: String,
    pub cfg: FlatConfig,
    pub base: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    inputs: BTreeMap<String, String>,
    expected_inputs: Option<BTreeMap<String, String>>,
}

impl RunContext {
    /// Rejects config keys outside `allowed` (plus `seed` and `workers`).
    pub fn ensure_known(&self, allowed: &[&str]) -> Result<()> {
        let mut all = vec!["seed", "workers"];
        all.extend_from_slice(allowed);
        self.cfg.ensure_known(&all)
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.cfg.get_or(key, default)
    }

    pub fn resolve(&self, value: &str) -> PathBuf {
        let p = PathBuf::from(value);
        if p.is_absolute() {
            p
        } else {
            self.base.join(p)
        }
    }

    /// Resolves, checks and fingerprints the input file named by `key`.
    pub fn input(&mut self, key: &str) -> Result<PathBuf> {
        let value = self.cfg.require_str(key)?.to_string();
        let path = self.resolve(&value);
        self.record_input(key, &path)?;
        Ok(path)
    }

    pub fn opt_input(&mut self, key: &str) -> Result<Option<PathBuf>> {
        if self.cfg.contains(key) {
            self.input(key).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Fingerprints an input reached indirectly (for example through an
    /// evaluation manifest). When replaying a manifest, a changed input is
    /// a config error.
    pub fn record_input(&mut self, label: &str, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::config(label, format!("{} does not exist", path.display())));
        }
        let hash = hash_path(path)?;
        if let Some(expected) = self.expected_inputs.as_ref().and_then(|m| m.get(label)) {
            if *expected != hash {
                return Err(Error::config(
                    label,
                    format!("{} changed since the manifest was written", path.display()),
                ));
            }
        }
        self.inputs.insert(label.to_string(), hash);
        Ok(())
    }

    pub fn load_model(&mut self, key: &str) -> Result<(TinyLm, serde_json::Value)> {
        let path = self.input(key)?;
        TinyLm::load(&path)
    }

    /// Path inside the run directory, creating parent directories.
    pub fn out_path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.out.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        Ok(p)
    }

    pub fn write_text(&self, rel: &str, text: &str) -> Result<()> {
        let p = self.out_path(rel)?;
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        self.write_text(rel, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    fn manifest(&self) -> Result<RunManifest> {
        let mut artifacts = BTreeMap::new();
        for rel in list_files(&self.out)? {
            if [MANIFEST_FILE, TIMING_FILE, MARKER_FILE].contains(&rel.as_str()) {
                continue;
            }
            let hash = hash_path(&self.out.join(&rel))?;
            artifacts.insert(rel, hash);
        }
        Ok(RunManifest {
            subcommand: self.subcommand.clone(),
            config: self.cfg.to_canonical_text(),
            config_hash: self.cfg.hash(),
            config_dir: self.base.clone(),
            seed: self.seed,
            versions: versions(),
            inputs: self.inputs.clone(),
            artifacts,
        })
    }
}

pub(crate) fn execute(name: &str, args: &RunArgs, shorthands: &[String]) -> std::result::Result<(), Failure> {
    let (mut cfg, base, expected_inputs) = if let Some(m) = &args.from_manifest {
        let man = RunManifest::load(m).map_err(|e| config_failure(format!("cannot read manifest: {e}")))?;
        if man.subcommand != name {
            return Err(usage(format!(
                "manifest {} records `{}`, not `{name}`",
                m.display(),
                man.subcommand
            )));
        }
        (FlatConfig::parse(&man.config)?, man.config_dir, Some(man.inputs))
    } else if let Some(c) = &args.config {
        let cfg = FlatConfig::load(c).map_err(|e| match e {
            Error::Io { .. } => config_failure(format!("cannot read config file: {e}")),
            e => Failure::from(e),
        })?;
        let base = absolute(c.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")));
        (cfg, base, None)
    } else {
        (FlatConfig::new(), absolute(Path::new(".")), None)
    };
    for spec in shorthands.iter().chain(&args.set) {
        cfg.apply_override(spec)?;
    }
    if let Some(seed) = args.seed {
        cfg.set("seed", seed);
    }
    let seed: u64 = cfg.get_or("seed", 0)?;
    let workers: usize = cfg.get_or("workers", 1)?;
    if workers == 0 {
        return Err(Error::config("workers", "must be at least 1").into());
    }
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(format!("{name}-{}", &cfg.hash()[..12])));
    prepare_out(&out, args.force)?;

    let mut ctx = RunContext {
        subcommand: name.to_string(),
        cfg,
        base,
        out,
        seed,
        inputs: BTreeMap::new(),
        expected_inputs,
    };
    let started = Instant::now();
    commands::dispatch(&mut ctx)?;
    let manifest = ctx.manifest()?;
    ctx.write_json(MANIFEST_FILE, &manifest)?;
    ctx.write_json(
        TIMING_FILE,
        &serde_json::json!({ "wall_clock_seconds": started.elapsed().as_secs_f64() }),
    )?;
    eprintln!("run directory: {}", ctx.out.display());
    Ok(())
}
