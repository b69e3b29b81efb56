use std::path::Path;

use serde_json::{Map, Value};

use crate::error::Result;

/// Line-delimited JSON records; each object carries a `"record"` field naming its kind.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportLog {
    pub records: Vec<Value>,
}

impl ReportLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, kind: &str, fields: Map<String, Value>) {
        let mut obj = Map::new();
        obj.insert("record".into(), Value::String(kind.into()));
        obj.extend(fields);
        self.records.push(Value::Object(obj));
    }

    pub fn extend(&mut self, other: ReportLog) {
        self.records.extend(other.records);
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&r.to_string());
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| crate::NtaaError::Format {
                    offset: i as u64,
                    reason: format!("report line: {e}"),
                })
            })
            .collect::<Result<_>>()?;
        Ok(ReportLog { records })
    }

    /// Records of one kind, in order.
    pub fn of_kind<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a Value> + 'a {
        self.records.iter().filter(move |r| r.get("record").and_then(Value::as_str) == Some(kind))
    }
}

pub fn write_report_log(path: impl AsRef<Path>, log: &ReportLog) -> Result<()> {
    std::fs::write(path, log.to_text())?;
    Ok(())
}
