//! Output files: CSV tables, JSON summaries and a run manifest, all named
//! `<hash>_<command>_<name>` inside the output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::CliError;

pub struct Run {
    pub dir: PathBuf,
    pub hash: String,
    pub command: String,
    quiet: bool,
    started: Instant,
    outputs: Vec<String>,
    echo: Value,
}

fn io(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Fixed-width scientific notation so reruns compare byte for byte.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

impl Run {
    pub fn start(cfg: &ExperimentConfig, command: &str, quiet: bool) -> Result<Self, CliError> {
        let dir = PathBuf::from(&cfg.output);
        fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
        let echo = cfg.echo.iter().map(|(k, v)| (k.clone(), Value::String(v.clone()))).collect();
        Ok(Run {
            dir,
            hash: cfg.hash(),
            command: command.into(),
            quiet,
            started: Instant::now(),
            outputs: Vec::new(),
            echo: Value::Object(echo),
        })
    }

    pub fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("[{}] {}", self.command, msg.as_ref());
        }
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let file = format!("{}_{}_{}", self.hash, self.command, name);
        self.outputs.push(file.clone());
        self.dir.join(file)
    }

    pub fn csv<R, I>(&mut self, name: &str, header: &[&str], rows: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator<Item = String>,
    {
        let path = self.path(&format!("{name}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(|e| io(&path, e))?;
        w.write_record(header).map_err(|e| io(&path, e))?;
        for row in rows {
            let row: Vec<String> = row.into_iter().collect();
            w.write_record(&row).map_err(|e| io(&path, e))?;
        }
        w.flush().map_err(|e| io(&path, e))?;
        Ok(())
    }

    pub fn json(&mut self, name: &str, value: &Value) -> Result<(), CliError> {
        let path = self.path(&format!("{name}.json"));
        let text = serde_json::to_string_pretty(value).map_err(|e| io(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| io(&path, e))
    }

    pub fn text(&mut self, name: &str, body: &str) -> Result<(), CliError> {
        let path = self.path(name);
        fs::write(&path, body).map_err(|e| io(&path, e))
    }

    /// Writes the manifest and returns its path. The wall time lives only
    /// here so the data files stay reproducible.
    pub fn finish(self) -> Result<PathBuf, CliError> {
        let manifest = json!({
            "command": self.command,
            "config_hash": self.hash,
            "config": self.echo,
            "versions": { "subdiff": subdiff::VERSION, env!("CARGO_PKG_NAME"): env!("CARGO_PKG_VERSION") },
            "wall_time_seconds": self.started.elapsed().as_secs_f64(),
            "outputs": self.outputs,
        });
        let path = self.dir.join(format!("{}_{}_manifest.json", self.hash, self.command));
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| io(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| io(&path, e))?;
        self.note(format!("wrote {}", path.display()));
        Ok(path)
    }
}
