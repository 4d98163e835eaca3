//! Run directory layout, locking and atomic output replacement.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

/// An error the binary raises itself, reported with its own kind tag.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

pub const CONFIG: &str = "config.txt";
pub const CORPUS: &str = "corpus.jsonl";
pub const AUGMENT: &str = "augment";
pub const AUGMENT_CACHE: &str = "augment_cache.jsonl";
pub const PRETRAIN: &str = "pretrain";
pub const FINETUNE: &str = "finetune";

/// Exclusive access to a run directory for the lifetime of the value.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run: &Path) -> Result<Self> {
        let path = run.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::new(
                "locked",
                format!(
                    "{} is in use by another command (remove {} if stale)",
                    run.display(),
                    path.display()
                ),
            )
            .into()),
            Err(e) => Err(e).with_context(|| format!("creating {}", path.display())),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Builds `run/name` in a temporary sibling and renames it into place, so a
/// failed command leaves any previous output untouched.
pub fn publish_dir(run: &Path, name: &str, build: impl FnOnce(&Path) -> Result<()>) -> Result<PathBuf> {
    let target = run.join(name);
    let tmp = run.join(format!(".{name}.tmp"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).with_context(|| format!("removing {}", tmp.display()))?;
    }
    fs::create_dir_all(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    if let Err(e) = build(&tmp) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if target.exists() {
        fs::remove_dir_all(&target).with_context(|| format!("removing {}", target.display()))?;
    }
    fs::rename(&tmp, &target).with_context(|| format!("renaming into {}", target.display()))?;
    Ok(target)
}

/// Writes a single file through a temporary name.
pub fn publish_file(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::new(
            "missing",
            format!("{} not found; run `genret {hint}` first", path.display()),
        )
        .into())
    }
}
