//! Output directory layout and the single-writer lock.
//!
//! Every command materializes checkpoints/, logs/, traces/, curves/ under
//! the run directory and writes its resolved config beside them.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use crate::config::RunConfig;

pub struct OutDir {
    pub root: PathBuf,
    lock: PathBuf,
}

impl OutDir {
    /// Create (or reuse) the run directory, take the lock, and write the
    /// resolved config.
    pub fn prepare(cfg: &RunConfig) -> Result<Self> {
        let root = cfg.out_dir.clone();
        for sub in ["checkpoints", "logs", "traces", "curves"] {
            fs::create_dir_all(root.join(sub))
                .with_context(|| format!("creating {}", root.join(sub).display()))?;
        }
        let lock = root.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!(
                    "output dir {} is locked by another run (remove {} if stale)",
                    root.display(),
                    lock.display()
                );
            }
            Err(e) => return Err(e).context("taking output lock"),
        }
        fs::write(root.join("config.toml"), cfg.to_toml()?)?;
        Ok(OutDir { root, lock })
    }

    pub fn checkpoint(&self, stage: u32) -> PathBuf {
        self.root.join(format!("checkpoints/stage{stage}.gfck"))
    }

    pub fn metrics_log(&self, stage: u32) -> PathBuf {
        self.root.join(format!("logs/metrics-stage{stage}.jsonl"))
    }

    pub fn traces_file(&self, name: &str) -> PathBuf {
        self.root.join(format!("traces/{name}"))
    }

    pub fn curves_file(&self, name: &str) -> PathBuf {
        self.root.join(format!("curves/{name}"))
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

/// JSONL writer for structured records.
pub fn write_jsonl<T: serde::Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_blocks_second_writer_and_clears_on_drop() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.out_dir = dir.path().join("run");
        let first = OutDir::prepare(&cfg).unwrap();
        assert!(OutDir::prepare(&cfg).is_err());
        drop(first);
        let again = OutDir::prepare(&cfg).unwrap();
        drop(again);
        assert!(cfg.out_dir.join("config.toml").exists());
        assert!(cfg.out_dir.join("checkpoints").is_dir());
    }
}
