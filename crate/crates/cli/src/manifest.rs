use crate::error::{CliError, CliResult};
use crate::invocation::Invocation;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Input chain applied to every image, for native and remote models alike.
pub const PREPROCESSING: &str = "bilinear resize to 256x256, center crop 224x224, scale to [0,1], \
     normalize with mean [0.485,0.456,0.406] and std [0.229,0.224,0.225]; applied identically for all backends";

/// Record of one command run, written as `manifest.json` in its output
/// directory. `invocation` is the fully resolved command and is enough to
/// re-run it with `xplain replay`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub invocation: Invocation,
    pub seeds: BTreeMap<String, u64>,
    pub preprocessing: String,
    /// Output files relative to the output directory.
    pub artifacts: Vec<PathBuf>,
    pub started_at: chrono::DateTime<chrono::Utc>,
    pub finished_at: chrono::DateTime<chrono::Utc>,
}

impl RunManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::config(format!("cannot read manifest {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("manifest {}: {e}", path.display())))
    }

    pub fn save(&self, out: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(out.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }
}

/// Collects the artifacts a command writes under its output directory.
pub struct Outputs {
    root: PathBuf,
    files: Vec<PathBuf>,
}

impl Outputs {
    pub fn create(root: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(root).map_err(|e| {
            CliError::runtime(format!(
                "cannot create output directory {}: {e}",
                root.display()
            ))
        })?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Absolute path of `name` inside the output directory, recorded as an
    /// artifact.
    pub fn file(&mut self, name: &str) -> PathBuf {
        let rel = PathBuf::from(name);
        if !self.files.contains(&rel) {
            self.files.push(rel);
        }
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let path = self.file(name);
        std::fs::write(&path, contents)?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<PathBuf> {
        let text = serde_json::to_string_pretty(value).expect("value serializes");
        self.write(name, text + "\n")
    }

    pub fn into_files(self) -> Vec<PathBuf> {
        self.files
    }
}
