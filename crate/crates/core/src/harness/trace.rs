use std::fmt;
use std::io;

use serde::{Deserialize, Serialize};

use crate::automaton::{FlagSet, TcpState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TraceKind {
    StateChange,
    SegmentSent,
    SegmentReceived,
    UserCall,
    TimerFired,
    EventRaised,
    /// A state change the guard refused.
    Violation,
}

/// One line of a trace. Field order is the serialization order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: u64,
    pub ep: String,
    pub kind: TraceKind,
    pub from: Option<TcpState>,
    pub to: Option<TcpState>,
    pub flags: Option<FlagSet>,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScenarioTrace {
    pub records: Vec<TraceRecord>,
}

impl ScenarioTrace {
    pub fn push(&mut self, r: TraceRecord) {
        self.records.push(r);
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> serde_json::Result<ScenarioTrace> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(ScenarioTrace { records })
    }

    pub fn write_jsonl<W: io::Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(self.to_jsonl().as_bytes())
    }

    pub fn of_kind(&self, kind: TraceKind) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    /// Flags of every segment put on the wire, in order.
    pub fn segments_sent(&self) -> Vec<FlagSet> {
        self.of_kind(TraceKind::SegmentSent)
            .filter_map(|r| r.flags)
            .collect()
    }

    /// The state sequence of one endpoint, starting with the first `from`.
    pub fn state_path(&self, ep: &str) -> Vec<TcpState> {
        let mut path = Vec::new();
        for r in self.of_kind(TraceKind::StateChange).filter(|r| r.ep == ep) {
            if path.is_empty() {
                path.extend(r.from);
            }
            path.extend(r.to);
        }
        path
    }

    /// Aligned, human-readable rendering.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:>6}  {:<2}  {:<15}  {:<12}  {:<12}  {:<11}  {}\n",
            "t", "ep", "kind", "from", "to", "flags", "detail"
        );
        for r in &self.records {
            let opt = |s: Option<String>| s.unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "{:>6}  {:<2}  {:<15}  {:<12}  {:<12}  {:<11}  {}\n",
                r.t,
                r.ep,
                format!("{:?}", r.kind),
                opt(r.from.map(|s| s.to_string())),
                opt(r.to.map(|s| s.to_string())),
                opt(r.flags.map(|f| f.to_string())),
                r.detail
            ));
        }
        out
    }
}

impl fmt::Display for ScenarioTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_jsonl())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_order_is_stable() {
        let r = TraceRecord {
            t: 3,
            ep: "A".into(),
            kind: TraceKind::SegmentSent,
            from: None,
            to: None,
            flags: Some(FlagSet::SYN | FlagSet::ACK),
            detail: "sock=1".into(),
        };
        let line = serde_json::to_string(&r).unwrap();
        assert_eq!(
            line,
            r#"{"t":3,"ep":"A","kind":"SegmentSent","from":null,"to":null,"flags":"SYN+ACK","detail":"sock=1"}"#
        );
        let trace = ScenarioTrace { records: vec![r] };
        assert_eq!(ScenarioTrace::from_jsonl(&trace.to_jsonl()).unwrap(), trace);
    }
}
