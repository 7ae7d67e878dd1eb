//! Output files: atomic writes and the run manifest.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn file_name(command: &str) -> String {
        format!("{command}.manifest.json")
    }

    pub fn load(dir: &Path, command: &str) -> Result<Self> {
        let path = dir.join(Self::file_name(command));
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("bad manifest: {e}")))
    }
}

#[derive(Debug, Clone)]
pub struct OutputDir {
    root: PathBuf,
}

impl OutputDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| CliError::io(&root, e))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes through a temporary sibling and a rename, so a reader never
    /// sees a half-written file.
    pub fn write(&self, rel: &str, bytes: &[u8]) -> Result<ManifestEntry> {
        let path = self.root.join(rel);
        let dir = path.parent().unwrap_or(&self.root);
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
        let tmp = dir.join(format!(".{name}.partial"));
        let mut f = std::fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
        f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| CliError::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| CliError::io(&path, e))?;
        Ok(ManifestEntry {
            path: rel.to_string(),
            bytes: bytes.len() as u64,
            sha256: format!("{:x}", Sha256::digest(bytes)),
        })
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<ManifestEntry> {
        let text = serde_json::to_string_pretty(value)
            .map_err(|e| CliError::Core(pigpvae::Error::Json(e)))?;
        self.write(rel, (text + "\n").as_bytes())
    }

    /// Renders into memory with `f`, then writes atomically.
    pub fn write_with(
        &self,
        rel: &str,
        f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
    ) -> Result<ManifestEntry> {
        let mut buf = Vec::new();
        f(&mut buf).map_err(|e| CliError::io(self.root.join(rel), e))?;
        self.write(rel, &buf)
    }

    /// Writes `<command>.manifest.json` listing `files` in path order.
    pub fn finish(&self, command: &str, mut files: Vec<ManifestEntry>) -> Result<PathBuf> {
        files.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            command: command.to_string(),
            files,
        };
        let name = Manifest::file_name(command);
        self.write_json(&name, &manifest)?;
        Ok(self.root.join(name))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_lists_sorted_entries_with_digests() {
        let dir = tempfile::tempdir().unwrap();
        let out = OutputDir::create(dir.path().join("o")).unwrap();
        let b = out.write("sub/b.txt", b"bee").unwrap();
        let a = out.write("a.txt", b"").unwrap();
        assert_eq!(a.sha256, "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
        out.finish("test", vec![b, a]).unwrap();
        let m = Manifest::load(out.root(), "test").unwrap();
        assert_eq!(m.files.iter().map(|f| f.path.as_str()).collect::<Vec<_>>(), ["a.txt", "sub/b.txt"]);
        assert_eq!(std::fs::read(out.root().join("sub/b.txt")).unwrap(), b"bee");
        assert!(!out.root().join("sub/.b.txt.partial").exists());
    }
}
