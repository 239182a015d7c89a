use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use openslot::config::RunConfig;

/// A fresh `<output_dir>/<command>-<utc timestamp>` directory holding the
/// resolved config. Never reuses an existing directory.
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(cfg: &RunConfig, command: &str) -> Result<Self> {
        let root = &cfg.paths.output_dir;
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
        let base = format!("{command}-{stamp}");
        let mut n = 1;
        let path = loop {
            let name = if n == 1 { base.clone() } else { format!("{base}-{n}") };
            let p = root.join(name);
            match fs::create_dir(&p) {
                Ok(()) => break p,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => n += 1,
                Err(e) => return Err(e).with_context(|| format!("creating {}", p.display())),
            }
        };
        let dir = Self { path };
        dir.write("config.txt", cfg.to_text()?.as_bytes())?;
        log::info!("run directory {}", dir.path.display());
        Ok(dir)
    }

    /// Writes a new file in the run directory; fails if it exists.
    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path.join(name);
        let mut f = fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&p)
            .with_context(|| format!("creating {}", p.display()))?;
        f.write_all(bytes).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }
}

/// Errors if `path` exists and `force` is off.
pub fn check_writable(path: &Path, force: bool, what: &str) -> Result<()> {
    if path.exists() && !force {
        anyhow::bail!("{what} {} already exists (use --force to replace it)", path.display());
    }
    Ok(())
}

pub fn check_exists(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        anyhow::bail!("missing {what}: {}", path.display());
    }
    Ok(())
}
