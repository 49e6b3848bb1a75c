//! On-disk layout of a data directory:
//!
//! ```text
//! train.fbnk          labeled few-shot training bank
//! id_test.fbnk        labeled ID test bank
//! ood_<name>.fbnk     one file per OOD dataset; <name> labels report rows
//! config.txt          effective configuration that generated the data (optional)
//! ```

use std::fs;
use std::path::Path;

use crate::data::bank::{read_bank, write_bank, FeatureBank};
use crate::data::config::{load_config, RunConfig};
use crate::data::synth::SyntheticBenchmark;
use crate::error::{Error, Result};

pub const TRAIN_FILE: &str = "train.fbnk";
pub const ID_TEST_FILE: &str = "id_test.fbnk";
pub const CONFIG_FILE: &str = "config.txt";
pub const OOD_PREFIX: &str = "ood_";
pub const BANK_EXT: &str = "fbnk";

pub fn ood_file_name(name: &str) -> String {
    format!("{OOD_PREFIX}{name}.{BANK_EXT}")
}

/// Writes the three synthetic banks and the generating configuration.
pub fn write_synthetic_dir(dir: impl AsRef<Path>, bench: &SyntheticBenchmark, run: &RunConfig, ood_name: &str) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_bank(&bench.train, dir.join(TRAIN_FILE))?;
    write_bank(&bench.id_test, dir.join(ID_TEST_FILE))?;
    write_bank(&bench.ood, dir.join(ood_file_name(ood_name)))?;
    fs::write(dir.join(CONFIG_FILE), run.dump())?;
    Ok(())
}

/// OOD bank paths in the directory, sorted by dataset name.
pub fn ood_bank_paths(dir: impl AsRef<Path>) -> Result<Vec<(String, std::path::PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir.as_ref())? {
        let path = entry?.path();
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let is_bank = path.extension().and_then(|e| e.to_str()) == Some(BANK_EXT);
        if let (true, Some(name)) = (is_bank, stem.strip_prefix(OOD_PREFIX)) {
            out.push((name.to_string(), path.clone()));
        }
    }
    out.sort();
    Ok(out)
}

fn require_dir(dir: &Path) -> Result<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("data directory {} does not exist", dir.display()),
        )))
    }
}

pub fn load_train(dir: impl AsRef<Path>) -> Result<FeatureBank> {
    require_dir(dir.as_ref())?;
    read_bank(dir.as_ref().join(TRAIN_FILE))
}

/// The ID test bank and every OOD bank, the latter sorted by name.
pub fn load_test(dir: impl AsRef<Path>) -> Result<(FeatureBank, Vec<(String, FeatureBank)>)> {
    let dir = dir.as_ref();
    require_dir(dir)?;
    let id_test = read_bank(dir.join(ID_TEST_FILE))?;
    let ood = ood_bank_paths(dir)?
        .into_iter()
        .map(|(name, p)| read_bank(&p).map(|b| (name, b)))
        .collect::<Result<Vec<_>>>()?;
    if ood.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no {OOD_PREFIX}*.{BANK_EXT} files in {}", dir.display()),
        )));
    }
    Ok((id_test, ood))
}

/// The configuration stored next to the data, if any.
pub fn load_dir_config(dir: impl AsRef<Path>) -> Result<Option<RunConfig>> {
    let path = dir.as_ref().join(CONFIG_FILE);
    if path.exists() {
        load_config(path).map(Some)
    } else {
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ood_files_are_discovered_sorted() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["ood_b.fbnk", "ood_a.fbnk", "train.fbnk", "ood_c.txt", "notes.fbnk"] {
            fs::write(dir.path().join(f), b"").unwrap();
        }
        let names: Vec<String> = ood_bank_paths(dir.path()).unwrap().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["a", "b"]);
        assert_eq!(ood_file_name("x"), "ood_x.fbnk");
    }

    #[test]
    fn missing_dir_is_io() {
        let err = load_test("/nonexistent/gacoop").err().unwrap();
        assert_eq!(err.kind(), crate::error::ErrorKind::Io);
    }
}
