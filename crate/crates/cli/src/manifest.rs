//! Run manifests: everything needed to repeat a command, written before it
//! starts computing.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

pub struct Manifest {
    lines: Vec<(String, String)>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl Manifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Manifest {
            lines: vec![
                ("tool".into(), "tokenseg".into()),
                ("version".into(), env!("CARGO_PKG_VERSION").into()),
                ("command".into(), command.into()),
                ("seed".into(), seed.to_string()),
            ],
        }
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.lines.push((key.into(), value.to_string()));
    }

    /// Embeds a resolved config text under `config.`.
    pub fn config(&mut self, text: &str) {
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                self.set(format!("config.{}", k.trim()), v.trim());
            }
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let digest = sha256_file(path)?;
        self.set(format!("input.{}", path.display()), format!("sha256:{digest}"));
        Ok(())
    }

    pub fn output(&mut self, name: &str, path: &Path) {
        self.set(format!("output.{name}"), path.display());
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for (k, v) in &self.lines {
            s.push_str(&format!("{k}={v}\n"));
        }
        fs::write(path, s).with_context(|| format!("writing manifest {}", path.display()))
    }
}
