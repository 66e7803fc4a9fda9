//! On-disk datasets: TSV3 volume/mask pairs listed in `index.csv`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use tokenseg::trainer::Case;
use tokenseg::volume::{load_mask, load_volume};

pub const INDEX_FILE: &str = "index.csv";
pub const INDEX_HEADER: &str = "case,volume,mask";

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub id: String,
    pub volume: PathBuf,
    pub mask: PathBuf,
}

/// Reads `dir/index.csv`; paths in the index are relative to `dir`.
pub fn read_index(dir: &Path) -> Result<Vec<Entry>> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading dataset index {}", path.display()))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == INDEX_HEADER => {}
        other => bail!("{}: expected header {INDEX_HEADER:?}, found {other:?}", path.display()),
    }
    let mut out = Vec::new();
    for (no, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        let [id, vol, mask] = parts[..] else {
            bail!("{}:{}: expected 3 fields, got {line:?}", path.display(), no + 2);
        };
        out.push(Entry {
            id: id.to_string(),
            volume: dir.join(vol),
            mask: dir.join(mask),
        });
    }
    if out.is_empty() {
        bail!("{} lists no cases", path.display());
    }
    Ok(out)
}

pub fn write_index(dir: &Path, entries: &[(String, String, String)]) -> Result<()> {
    let mut s = format!("{INDEX_HEADER}\n");
    for (id, v, m) in entries {
        s.push_str(&format!("{id},{v},{m}\n"));
    }
    let path = dir.join(INDEX_FILE);
    fs::write(&path, s).with_context(|| format!("writing {}", path.display()))
}

pub fn load_entry(e: &Entry) -> Result<Case> {
    let v = load_volume(&e.volume).with_context(|| format!("case {}", e.id))?;
    let m = load_mask(&e.mask).with_context(|| format!("case {}", e.id))?;
    Ok(Case::new(e.id.clone(), v, m).with_context(|| format!("case {}", e.id))?)
}

/// Every case, failing on the first unreadable one.
pub fn load_all(entries: &[Entry]) -> Result<Vec<Case>> {
    entries.iter().map(load_entry).collect()
}

/// Readable cases plus `(id, reason)` for the rest.
pub fn load_lenient(entries: &[Entry]) -> (Vec<Case>, Vec<(String, String)>) {
    let mut ok = Vec::new();
    let mut skipped = Vec::new();
    for e in entries {
        match load_entry(e) {
            Ok(c) => ok.push(c),
            Err(err) => skipped.push((e.id.clone(), format!("{err:#}"))),
        }
    }
    (ok, skipped)
}
