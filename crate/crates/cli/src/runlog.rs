use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use serde_json::{json, Value};

/// Append-only JSON-lines log. Every record carries the command name.
pub struct RunLog {
    cmd: &'static str,
    out: BufWriter<File>,
}

impl RunLog {
    pub fn open(path: &Path, cmd: &'static str) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .with_context(|| format!("opening log {}", path.display()))?;
        Ok(Self {
            cmd,
            out: BufWriter::new(f),
        })
    }

    pub fn record(&mut self, mut v: Value) -> Result<()> {
        if let Value::Object(m) = &mut v {
            m.insert("cmd".into(), json!(self.cmd));
        }
        writeln!(self.out, "{v}")?;
        Ok(())
    }
}

impl Drop for RunLog {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}
