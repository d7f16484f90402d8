//! Run directory layout: config.json, checkpoint-best.json,
//! checkpoint-last.json, metrics.csv, log.txt.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use anyhow::{Context, Result};

use coffee_core::train::{metrics_csv, save_checkpoint, Checkpoint, MetricRow};

use crate::config::RunConfig;

pub const CONFIG_FILE: &str = "config.json";
pub const BEST_CHECKPOINT: &str = "checkpoint-best.json";
pub const LAST_CHECKPOINT: &str = "checkpoint-last.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LOG_FILE: &str = "log.txt";

pub struct RunDir {
    pub path: PathBuf,
    log: Mutex<File>,
}

impl RunDir {
    /// Create the directory, echo the effective config and open the log.
    pub fn create(path: &Path, config: &RunConfig) -> Result<Self> {
        fs::create_dir_all(path).with_context(|| format!("cannot create run directory {}", path.display()))?;
        fs::write(path.join(CONFIG_FILE), serde_json::to_string_pretty(config)? + "\n")?;
        let log = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path.join(LOG_FILE))?;
        Ok(Self { path: path.to_path_buf(), log: Mutex::new(log) })
    }

    /// Write a line to the log and to stderr.
    pub fn log(&self, line: &str) {
        eprintln!("{line}");
        if let Ok(mut f) = self.log.lock() {
            let _ = writeln!(f, "{line}");
        }
    }

    pub fn log_row(&self, r: &MetricRow) {
        self.log(&format!(
            "epoch {:>3} step {:>8} {:<5} loss {:.6} acc {:.4} lr {} ({} ms)",
            r.epoch, r.step, r.split, r.loss, r.accuracy, r.lr, r.wall_ms
        ));
    }

    pub fn finish(&self, metrics: &[MetricRow], best: &Checkpoint, last: &Checkpoint) -> Result<()> {
        fs::write(self.path.join(METRICS_FILE), metrics_csv(metrics))?;
        save_checkpoint(best, &self.path.join(BEST_CHECKPOINT))?;
        save_checkpoint(last, &self.path.join(LAST_CHECKPOINT))?;
        Ok(())
    }
}

pub fn default_run_dir(config: &RunConfig) -> PathBuf {
    let name = config.preset().unwrap_or("custom");
    PathBuf::from("runs").join(format!("{name}-seed{}", config.train().seed))
}
