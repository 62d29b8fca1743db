//! Path conventions inside an output directory.
//!
//! ```text
//! config.resolved
//! comparison.csv
//! <phase>/rounds.csv
//! checkpoints/<strategy>/instruct/client_<id>.ckpt
//! checkpoints/<strategy>/reward/rm_helpful.ckpt
//! checkpoints/<strategy>/reward/rm_harmless.ckpt
//! report/<phase>_<metric>.csv
//! ERROR
//! ```

use std::path::{Path, PathBuf};

use pwff_core::fed::{Phase, StrategyName};

pub const CONFIG: &str = "config.resolved";
pub const COMPARISON: &str = "comparison.csv";
pub const ERROR_MARKER: &str = "ERROR";

#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join(CONFIG)
    }

    pub fn comparison(&self) -> PathBuf {
        self.root.join(COMPARISON)
    }

    pub fn error_marker(&self) -> PathBuf {
        self.root.join(ERROR_MARKER)
    }

    pub fn rounds(&self, phase: Phase) -> PathBuf {
        self.root.join(phase.as_str()).join("rounds.csv")
    }

    fn checkpoints(&self, s: StrategyName) -> PathBuf {
        self.root.join("checkpoints").join(s.as_str())
    }

    pub fn client_checkpoint(&self, s: StrategyName, client: usize) -> PathBuf {
        self.checkpoints(s).join("instruct").join(format!("client_{:02}.ckpt", client))
    }

    pub fn reward_checkpoint(&self, s: StrategyName, objective: &str) -> PathBuf {
        self.checkpoints(s).join("reward").join(format!("rm_{}.ckpt", objective))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

/// `path` relative to `root` for messages, or the full path when outside it.
pub fn display(root: &Path, path: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).display().to_string()
}
