use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Append-only JSONL metrics log. At most one record per step, steps
/// strictly increasing; every record carries `step` and `wall_time` (seconds
/// since the writer was opened; excluded from determinism guarantees).
pub struct MetricsWriter {
    out: BufWriter<File>,
    last_step: Option<u64>,
    t0: Instant,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = File::create(path)?;
        Ok(MetricsWriter { out: BufWriter::new(file), last_step: None, t0: Instant::now() })
    }

    pub fn log(&mut self, step: u64, mut fields: Map<String, Value>) -> Result<()> {
        if let Some(last) = self.last_step {
            if step <= last {
                return Err(Error::config(format!(
                    "metrics steps must strictly increase: {step} after {last}"
                )));
            }
        }
        fields.insert("step".into(), Value::from(step));
        fields.insert(
            "wall_time".into(),
            Value::from(self.t0.elapsed().as_secs_f64()),
        );
        let line = serde_json::to_string(&Value::Object(fields))
            .map_err(|e| Error::config(e.to_string()))?;
        writeln!(self.out, "{line}")?;
        self.out.flush()?;
        self.last_step = Some(step);
        Ok(())
    }
}

/// Reads a metrics file back as parsed records.
pub fn read_metrics(path: &Path) -> Result<Vec<Map<String, Value>>> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Value>(&line) {
            Ok(Value::Object(map)) => out.push(map),
            _ => return Err(Error::Corrupt(format!("bad metrics line: {line}"))),
        }
    }
    Ok(out)
}
