//! Append-only forensic event log.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

/// One security-relevant decision. Field order is the export order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub time_ms: u64,
    pub actor: String,
    pub action: String,
    pub outcome: String,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct EventLog {
    records: Vec<EventRecord>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a record and returns its sequence number. Sequence numbers
    /// start at 1 and increase by one per record.
    pub fn append(
        &mut self,
        time_ms: u64,
        actor: impl Into<String>,
        action: impl Into<String>,
        outcome: impl Into<String>,
        detail: impl Into<String>,
    ) -> u64 {
        let seq = self.records.last().map_or(1, |r| r.seq + 1);
        let rec = EventRecord {
            seq,
            time_ms,
            actor: actor.into(),
            action: action.into(),
            outcome: outcome.into(),
            detail: detail.into(),
        };
        log::debug!(
            "event #{} {} {} {} {}",
            rec.seq,
            rec.actor,
            rec.action,
            rec.outcome,
            rec.detail
        );
        self.records.push(rec);
        seq
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Owned copy for readers that outlive the current borrow of the
    /// platform.
    pub fn snapshot(&self) -> Vec<EventRecord> {
        self.records.clone()
    }

    /// Records appended after (and excluding) `seq`.
    pub fn since(&self, seq: u64) -> &[EventRecord] {
        let start = self.records.partition_point(|r| r.seq <= seq);
        &self.records[start..]
    }

    pub fn last_seq(&self) -> u64 {
        self.records.last().map_or(0, |r| r.seq)
    }

    pub fn count(&self, action: &str, outcome: Option<&str>) -> usize {
        self.records
            .iter()
            .filter(|r| r.action == action && outcome.is_none_or(|o| r.outcome == o))
            .count()
    }

    /// One JSON object per line with fields
    /// `seq,time_ms,actor,action,outcome,detail`.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<EventRecord>, _>>()?;
        Ok(EventLog { records })
    }
}
