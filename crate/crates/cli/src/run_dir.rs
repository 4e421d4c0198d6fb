use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use cxr_sslx::pipeline::TrainConfig;
use cxr_sslx::{Error, Result};

pub const SNAPSHOT: &str = "config.snapshot";
pub const EPOCH_LOG: &str = "logs/epochs.txt";
pub const SSL_LOG: &str = "logs/ssl_loss.txt";
pub const MANIFEST: &str = "manifest.tsv";

/// `config.snapshot`, `checkpoints/`, `logs/epochs.txt`, `reports/`, `heatmaps/`.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    /// Creates the layout. An existing non-empty directory is refused unless `force` or `resume`.
    pub fn prepare(root: &Path, force: bool, resume: bool) -> Result<RunDir> {
        let occupied = root.is_dir() && fs::read_dir(root).map_err(|e| Error::io(root, e))?.next().is_some();
        if resume && !occupied {
            return Err(Error::InvalidArgument(format!("nothing to resume in {}", root.display())));
        }
        if occupied && !force && !resume {
            return Err(Error::InvalidArgument(format!(
                "run directory {} already exists; pass --force to reuse it",
                root.display()
            )));
        }
        for sub in ["checkpoints", "logs", "reports", "heatmaps"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn open(root: &Path) -> Result<RunDir> {
        if !root.join(SNAPSHOT).is_file() {
            return Err(Error::Data(format!("{} is not a run directory (no {SNAPSHOT})", root.display())));
        }
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    pub fn write(&self, rel: &str, text: &str) -> Result<()> {
        let p = self.path(rel);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    pub fn write_report(&self, name: &str, text: &str) -> Result<()> {
        let p = self.report(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    pub fn truncate(&self, rel: &str) -> Result<()> {
        self.write(rel, "")
    }

    pub fn append_line(&self, rel: &str, line: &str) -> Result<()> {
        let p = self.path(rel);
        let mut f = fs::OpenOptions::new().create(true).append(true).open(&p).map_err(|e| Error::io(&p, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&p, e))
    }

    pub fn read(&self, rel: &str) -> Result<String> {
        let p = self.path(rel);
        fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
    }

    pub fn save_snapshot(&self, config: &TrainConfig) -> Result<()> {
        self.write(SNAPSHOT, &config.to_toml())
    }

    pub fn load_snapshot(&self) -> Result<TrainConfig> {
        TrainConfig::load(&self.path(SNAPSHOT))
    }
}
