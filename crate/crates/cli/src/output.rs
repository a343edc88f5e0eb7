use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

/// Output directory plus the `--quiet` switch.
pub struct Output {
    dir: PathBuf,
    quiet: bool,
}

impl Output {
    pub fn create(dir: PathBuf, quiet: bool) -> anyhow::Result<Self> {
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { dir, quiet })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn say(&self, line: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", line.as_ref());
        }
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}
