use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::CliError;

/// Stamp carried by every artifact.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seeds: Seeds,
    pub version: &'static str,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Seeds {
    pub sampling: u64,
    pub fit: u64,
    pub gibbs: u64,
    pub povm: Option<u64>,
}

impl Provenance {
    /// Single-line form for sample headers and text comments.
    pub fn line(&self) -> String {
        format!(
            "config={} seeds=sampling:{},fit:{},gibbs:{},povm:{} version={}",
            self.config_hash,
            self.seeds.sampling,
            self.seeds.fit,
            self.seeds.gibbs,
            self.seeds.povm.map_or("none".to_string(), |s| s.to_string()),
            self.version
        )
    }
}

/// Files written by one command. Unless `commit` is called, dropping the
/// set deletes them again (and the directory, if this run created it).
pub struct ArtifactSet {
    dir: PathBuf,
    created_dir: bool,
    written: Vec<PathBuf>,
    committed: bool,
}

impl ArtifactSet {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        let created_dir = !dir.exists();
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(ArtifactSet { dir: dir.to_path_buf(), created_dir, written: Vec::new(), committed: false })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, contents: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        self.written.push(path.clone());
        fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    pub fn commit(mut self) -> Vec<PathBuf> {
        self.committed = true;
        std::mem::take(&mut self.written)
    }
}

impl Drop for ArtifactSet {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for p in &self.written {
            let _ = fs::remove_file(p);
        }
        if self.created_dir {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

/// File name with an optional stage tag: `samples.txt` or `samples-p0.5.txt`.
pub fn staged(stem: &str, label: &str, ext: &str) -> String {
    if label.is_empty() {
        format!("{stem}.{ext}")
    } else {
        format!("{stem}-{label}.{ext}")
    }
}
