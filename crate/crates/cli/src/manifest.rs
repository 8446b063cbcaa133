use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dau_core::config::Config;
use sha1::{Digest, Sha1};

/// Git blob id of `bytes`: SHA-1 over `blob <len>\0` and the content.
pub fn git_blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Record of one subcommand run, written as `manifest_<command>.txt`.
pub struct Manifest {
    command: &'static str,
    lines: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &'static str, cfg: &Config, config_path: Option<&Path>) -> Self {
        let mut m = Manifest {
            command,
            lines: Vec::new(),
        };
        m.push("command", command);
        m.push("version", env!("CARGO_PKG_VERSION"));
        m.push(
            "config",
            config_path.map_or("(defaults and overrides)".to_string(), |p| p.display().to_string()),
        );
        m.push("config_hash", format!("sha256:{}", cfg.hash()));
        m
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.lines.push((key.to_string(), value.to_string()));
    }

    /// Adds a checkpoint path with its content hash.
    pub fn checkpoint(&mut self, key: &str, path: &Path) -> std::io::Result<()> {
        let bytes = fs::read(path)?;
        self.push(key, path.display());
        self.push(&format!("{key}_hash"), format!("git-blob:{}", git_blob_hash(&bytes)));
        Ok(())
    }

    pub fn artifact(&mut self, path: &Path) {
        self.push("artifact", path.file_name().map_or(path.display().to_string(), |f| f.to_string_lossy().into_owned()));
    }

    pub fn write(&self, out: &Path) -> std::io::Result<PathBuf> {
        let mut s = String::new();
        for (k, v) in &self.lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        let path = out.join(format!("manifest_{}.txt", self.command));
        fs::write(&path, s)?;
        Ok(path)
    }
}
