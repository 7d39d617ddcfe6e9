//! JSON reports and line-delimited metric logs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use neurossm::config::ExperimentConfig;

use crate::error::{io_err, CliResult};

/// A command's report. `timing` holds wall-clock measurements and is left
/// out of `report_hash`, so reruns with identical inputs hash the same.
pub struct Report {
    pub command: &'static str,
    pub stage_hash: Option<String>,
    pub results: Value,
    pub timing: Value,
}

impl Report {
    pub fn new(command: &'static str, results: Value) -> Self {
        Self { command, stage_hash: None, results, timing: json!({}) }
    }

    pub fn with_stage_hash(mut self, h: String) -> Self {
        self.stage_hash = Some(h);
        self
    }

    pub fn with_timing(mut self, timing: Value) -> Self {
        self.timing = timing;
        self
    }

    pub fn to_value(&self, cfg: &ExperimentConfig) -> Value {
        let mut body = json!({
            "command": self.command,
            "config_hash": cfg.config_hash(),
            "stage_hash": self.stage_hash,
            "seed": cfg.seed,
            "results": self.results,
            "config": cfg,
        });
        let hash = hex::encode(Sha256::digest(body.to_string().as_bytes()));
        body["report_hash"] = Value::String(hash);
        body["timing"] = self.timing.clone();
        body
    }

    /// Writes `dir/<command>_report.json` and returns the written value.
    pub fn write(&self, cfg: &ExperimentConfig, dir: &Path) -> CliResult<Value> {
        let v = self.to_value(cfg);
        let path = dir.join(format!("{}_report.json", self.command.replace('-', "_")));
        write_json(&path, &v)?;
        Ok(v)
    }
}

pub fn write_json(path: &Path, v: &impl Serialize) -> CliResult<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(v).expect("report serializes");
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(())
}

/// One JSON object per line, flushed after every record.
pub struct JsonlWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> CliResult<Self> {
        ensure_parent(path)?;
        let f = File::create(path).map_err(io_err(path))?;
        Ok(Self { path: path.to_path_buf(), out: BufWriter::new(f) })
    }

    pub fn record(&mut self, v: &impl Serialize) -> CliResult<()> {
        let line = serde_json::to_string(v).expect("record serializes");
        writeln!(self.out, "{line}").and_then(|_| self.out.flush()).map_err(io_err(&self.path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_timing() {
        let cfg = ExperimentConfig::default();
        let a = Report::new("eval", json!({"acc": 0.5})).with_timing(json!({"s": 1.0})).to_value(&cfg);
        let b = Report::new("eval", json!({"acc": 0.5})).with_timing(json!({"s": 2.0})).to_value(&cfg);
        let c = Report::new("eval", json!({"acc": 0.6})).to_value(&cfg);
        assert_eq!(a["report_hash"], b["report_hash"]);
        assert_ne!(a["report_hash"], c["report_hash"]);
        assert_eq!(a["config"]["seed"], json!(0));
    }

    #[test]
    fn jsonl_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut w = JsonlWriter::create(&p).unwrap();
        w.record(&json!({"epoch": 1})).unwrap();
        w.record(&json!({"epoch": 2})).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1]["epoch"], json!(2));
    }
}
