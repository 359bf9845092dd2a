//! Append-only JSONL run log.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// One line per record: `{"stage", "step", "wall_s", <metrics>}`. Flushed after every
/// record. Step numbers must not decrease within a stage.
pub struct RunLog {
    out: Option<(PathBuf, BufWriter<File>)>,
    start: Instant,
    last: Option<(String, u64)>,
    echo: bool,
}

impl RunLog {
    /// Discards records.
    pub fn sink() -> Self {
        Self {
            out: None,
            start: Instant::now(),
            last: None,
            echo: false,
        }
    }

    /// Appends to `path`, creating it if needed.
    pub fn append(path: &Path) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: Some((path.to_path_buf(), BufWriter::new(f))),
            start: Instant::now(),
            last: None,
            echo: false,
        })
    }

    /// Also prints each record through the `log` facade at info level.
    pub fn with_echo(mut self, echo: bool) -> Self {
        self.echo = echo;
        self
    }

    pub fn record<M: Serialize>(&mut self, stage: &str, step: u64, metrics: &M) -> Result<()> {
        if let Some((s, last)) = &self.last {
            if s == stage && step < *last {
                return Err(Error::invalid(format!(
                    "run log step went backwards in stage {stage}: {step} after {last}"
                )));
            }
        }
        self.last = Some((stage.to_owned(), step));
        let mut obj = Map::new();
        obj.insert("stage".into(), Value::from(stage));
        obj.insert("step".into(), Value::from(step));
        obj.insert("wall_s".into(), Value::from(self.start.elapsed().as_secs_f64()));
        match serde_json::to_value(metrics)? {
            Value::Object(m) => obj.extend(m),
            Value::Null => {}
            other => {
                obj.insert("value".into(), other);
            }
        }
        let line = Value::Object(obj).to_string();
        if self.echo {
            log::info!("{line}");
        }
        if let Some((path, w)) = &mut self.out {
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }
}
