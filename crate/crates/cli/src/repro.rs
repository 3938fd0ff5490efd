//! Re-run a finished run directory from its resolved config and compare outputs byte for byte.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::commands::{self, Command, TRACE};
use crate::config::{Layers, CONFIG_NAME};
use crate::CliError;

#[derive(Debug, Default)]
pub struct ReproReport {
    pub compared: usize,
    pub missing: Vec<PathBuf>,
    pub extra: Vec<PathBuf>,
    pub differing: Vec<PathBuf>,
}

impl ReproReport {
    pub fn identical(&self) -> bool {
        self.missing.is_empty() && self.extra.is_empty() && self.differing.is_empty()
    }
}

fn files_under(root: &Path) -> Result<BTreeSet<PathBuf>, CliError> {
    let mut out = BTreeSet::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = fs::read_dir(&dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        for entry in entries {
            let path = entry.map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).expect("walked from root").to_path_buf());
            }
        }
    }
    Ok(out)
}

/// Wall-clock seconds in the training trace are the one intentionally
/// non-reproducible output; blank that column before comparing.
fn mask_secs(bytes: &[u8]) -> Vec<u8> {
    let text = String::from_utf8_lossy(bytes);
    let mut out = String::with_capacity(text.len());
    for line in text.lines() {
        match line.rsplit_once(',') {
            Some((head, _)) => out.push_str(head),
            None => out.push_str(line),
        }
        out.push('\n');
    }
    out.into_bytes()
}

fn comparable(rel: &Path, bytes: Vec<u8>) -> Vec<u8> {
    if rel.file_name().is_some_and(|n| n == TRACE) {
        mask_secs(&bytes)
    } else {
        bytes
    }
}

pub fn compare_dirs(original: &Path, rerun: &Path) -> Result<ReproReport, CliError> {
    let a = files_under(original)?;
    let b = files_under(rerun)?;
    let mut report = ReproReport {
        missing: a.difference(&b).cloned().collect(),
        extra: b.difference(&a).cloned().collect(),
        ..ReproReport::default()
    };
    let read = |root: &Path, rel: &Path| {
        let p = root.join(rel);
        fs::read(&p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
    };
    for rel in a.intersection(&b) {
        report.compared += 1;
        if comparable(rel, read(original, rel)?) != comparable(rel, read(rerun, rel)?) {
            report.differing.push(rel.clone());
        }
    }
    Ok(report)
}

pub fn repro(dir: &Path, keep: Option<&Path>) -> Result<ReproReport, CliError> {
    let cfg_path = dir.join(CONFIG_NAME);
    if !cfg_path.is_file() {
        return Err(CliError::Data(format!("{}: not a run directory (no {CONFIG_NAME})", dir.display())));
    }
    let cfg = Layers::from_file(&cfg_path)?.resolve()?;
    let cmd = cfg
        .command
        .as_deref()
        .and_then(Command::parse)
        .ok_or_else(|| CliError::Data(format!("{}: no replayable `command` recorded", cfg_path.display())))?;
    let tmp = tempfile::Builder::new()
        .prefix("nsmpp-repro-")
        .tempdir()
        .map_err(|e| CliError::Data(format!("temporary directory: {e}")))?;
    let target = keep.map_or_else(|| tmp.path().to_path_buf(), Path::to_path_buf);
    commands::run(&cfg, cmd, &target)?;
    compare_dirs(dir, &target)
}
