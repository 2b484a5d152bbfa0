//! Line-oriented JSON event log on stderr.

use std::io::Write;
use std::time::Instant;

use serde_json::{json, Map, Value};

pub struct EventLog {
    start: Instant,
    quiet: bool,
}

impl EventLog {
    pub fn new(quiet: bool) -> Self {
        EventLog {
            start: Instant::now(),
            quiet,
        }
    }

    /// Writes `{"t": seconds, "level", "phase", "event", ...fields}`.
    pub fn emit(&self, level: &str, phase: &str, event: &str, fields: Value) {
        if self.quiet {
            return;
        }
        let mut m = Map::new();
        m.insert("t".into(), json!((self.start.elapsed().as_secs_f64() * 1e3).round() / 1e3));
        m.insert("level".into(), json!(level));
        m.insert("phase".into(), json!(phase));
        m.insert("event".into(), json!(event));
        if let Value::Object(extra) = fields {
            m.extend(extra);
        }
        let mut err = std::io::stderr().lock();
        let _ = writeln!(err, "{}", Value::Object(m));
    }

    pub fn info(&self, phase: &str, event: &str, fields: Value) {
        self.emit("info", phase, event, fields);
    }
}
