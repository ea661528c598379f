//! Structured JSON-lines trace records.

use std::io::Write;
use std::sync::Mutex;

use serde::Serialize;
use serde_json::Value;

pub trait EventSink: Send + Sync {
    fn emit(&self, kind: &str, fields: Value);
}

/// Discards everything.
#[derive(Debug, Default)]
pub struct NullSink;

impl EventSink for NullSink {
    fn emit(&self, _kind: &str, _fields: Value) {}
}

/// Writes one JSON object per line: `{"event": kind, ...fields}`.
pub struct JsonLinesSink {
    out: Mutex<Box<dyn Write + Send>>,
}

impl JsonLinesSink {
    pub fn new(out: impl Write + Send + 'static) -> Self {
        Self {
            out: Mutex::new(Box::new(out)),
        }
    }
}

fn record(kind: &str, fields: Value) -> Value {
    let mut obj = serde_json::Map::new();
    obj.insert("event".into(), Value::String(kind.into()));
    match fields {
        Value::Object(m) => obj.extend(m),
        Value::Null => {}
        other => {
            obj.insert("data".into(), other);
        }
    }
    Value::Object(obj)
}

impl EventSink for JsonLinesSink {
    fn emit(&self, kind: &str, fields: Value) {
        let line = record(kind, fields).to_string();
        let mut out = self.out.lock().unwrap();
        if let Err(e) = writeln!(out, "{line}").and_then(|_| out.flush()) {
            log::warn!("cannot write trace record: {e}");
        }
    }
}

/// Keeps records in memory; handy in tests.
#[derive(Debug, Default)]
pub struct MemorySink {
    records: Mutex<Vec<Value>>,
}

impl MemorySink {
    pub fn records(&self) -> Vec<Value> {
        self.records.lock().unwrap().clone()
    }

    pub fn of_kind(&self, kind: &str) -> Vec<Value> {
        self.records()
            .into_iter()
            .filter(|r| r["event"] == kind)
            .collect()
    }
}

impl EventSink for MemorySink {
    fn emit(&self, kind: &str, fields: Value) {
        self.records.lock().unwrap().push(record(kind, fields));
    }
}

/// Serializes `v` for use as event fields, falling back to `null`.
pub fn fields<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}
