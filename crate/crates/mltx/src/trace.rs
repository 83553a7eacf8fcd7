//! JSON Lines trace format.
//!
//! One line per round: `{"seq":n,"agent":...,"delta":{machine:[...]},"gamma":
//! {machine:[...]},"ctl":[...],"reads":{machine:{path:value}},"events":[...]}`
//! with updates encoded as `["genuine", path, value]` and
//! `["partial", path, op, arg]`. The first line is a header carrying the
//! workload digest, seed, scheduler and mode flags; the last line records the
//! run outcome. Traces are replayable: the same workload, seed and flags
//! reproduce the file byte for byte.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::ops::{GenuineUpdate, LockMode, PartialUpdate};
use crate::store::{LocationPath, StoreValue};

pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub version: u32,
    pub workload_digest: String,
    pub seed: u64,
    pub scheduler: String,
    pub strict_subsumption: bool,
    pub stagger: bool,
    pub max_rounds: u64,
}

/// Controller bookkeeping recorded per round; enough to audit lock lifetimes
/// and control-state transitions from the trace alone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "k", rename_all = "snake_case")]
pub enum CtlUpdate {
    Lock { path: LocationPath, machine: String, mode: LockMode, held: bool },
    State { machine: String, state: String },
    Victim { machine: String, victim: bool },
    Transact { machine: String, member: bool },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Register { machine: String },
    LockRequest { machine: String, locks: Vec<(LocationPath, LockMode)> },
    LockGranted { machine: String, locks: Vec<(LocationPath, LockMode)> },
    LockRefused { machine: String, locks: Vec<(LocationPath, LockMode)> },
    Fire { group: Vec<String>, pcs: BTreeMap<String, usize> },
    CommitRequested { machine: String },
    AbortRequested { machine: String, reason: String },
    Victimized { machine: String, deadlocked: Vec<String> },
    Undo { machine: String, step_seq: u64, restored: Vec<GenuineUpdate> },
    Recovered { machine: String },
    Commit { machine: String },
    Abort { machine: String },
}

/// One scheduler round: the activation of a single agent. A fire round lists
/// every partner's contributions under that partner's machine id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Round {
    pub seq: u64,
    pub agent: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub delta: BTreeMap<String, Vec<GenuineUpdate>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub gamma: BTreeMap<String, Vec<PartialUpdate>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ctl: Vec<CtlUpdate>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub reads: BTreeMap<String, BTreeMap<LocationPath, StoreValue>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<Event>,
}

impl Round {
    pub fn new(seq: u64, agent: impl Into<String>) -> Round {
        Round {
            seq,
            agent: agent.into(),
            delta: BTreeMap::new(),
            gamma: BTreeMap::new(),
            ctl: Vec::new(),
            reads: BTreeMap::new(),
            events: Vec::new(),
        }
    }

    /// The fire event's group, if this round fired one.
    pub fn fire_group(&self) -> Option<&[String]> {
        self.events.iter().find_map(|e| match e {
            Event::Fire { group, .. } => Some(group.as_slice()),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// All machines committed or aborted.
    Complete,
    RoundLimitExceeded,
    /// No agent was enabled although machines remained.
    Stuck,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceFooter {
    pub outcome: Outcome,
    pub committed: Vec<String>,
    pub aborted: Vec<String>,
    pub rounds: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub header: TraceHeader,
    pub rounds: Vec<Round>,
    pub footer: TraceFooter,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("empty trace")]
    Empty,
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("missing footer line")]
    MissingFooter,
    #[error("malformed trace: {0}")]
    Malformed(String),
}

impl Trace {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        out.push_str(&serde_json::to_string(&self.header).expect("header serializes"));
        out.push('\n');
        for round in &self.rounds {
            out.push_str(&serde_json::to_string(round).expect("round serializes"));
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&self.footer).expect("footer serializes"));
        out.push('\n');
        out
    }

    pub fn parse(text: &str) -> Result<Trace, TraceError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (hline_no, hline) = lines.next().ok_or(TraceError::Empty)?;
        let header: TraceHeader = serde_json::from_str(hline)
            .map_err(|source| TraceError::Json { line: hline_no + 1, source })?;
        let mut rounds = Vec::new();
        let mut footer: Option<TraceFooter> = None;
        for (no, line) in lines {
            if footer.is_some() {
                return Err(TraceError::Malformed("content after footer".to_string()));
            }
            // rounds carry "seq"; the footer carries "outcome"
            if line.contains("\"outcome\"") {
                if let Ok(f) = serde_json::from_str::<TraceFooter>(line) {
                    footer = Some(f);
                    continue;
                }
            }
            let round: Round = serde_json::from_str(line)
                .map_err(|source| TraceError::Json { line: no + 1, source })?;
            rounds.push(round);
        }
        let footer = footer.ok_or(TraceError::MissingFooter)?;
        Ok(Trace { header, rounds, footer })
    }

    pub fn events(&self) -> impl Iterator<Item = (u64, &Event)> + '_ {
        self.rounds.iter().flat_map(|r| r.events.iter().map(move |e| (r.seq, e)))
    }
}

/// SHA-256 hex digest of a workload file's text; ties traces to workloads.
pub fn workload_digest(text: &str) -> String {
    let hash = Sha256::digest(text.as_bytes());
    let mut out = String::with_capacity(64);
    for b in hash {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(s: &str) -> LocationPath {
        LocationPath::parse(s).unwrap()
    }

    fn sample_trace() -> Trace {
        let header = TraceHeader {
            version: TRACE_VERSION,
            workload_digest: workload_digest("w"),
            seed: 7,
            scheduler: "rr".to_string(),
            strict_subsumption: false,
            stagger: false,
            max_rounds: 100,
        };
        let mut r0 = Round::new(0, "register");
        r0.events.push(Event::Register { machine: "m1".to_string() });
        let mut r1 = Round::new(1, "m1");
        r1.delta.insert(
            "m1".to_string(),
            vec![GenuineUpdate { loc: path("/x"), val: StoreValue::Int(5) }],
        );
        r1.gamma.insert(
            "m1".to_string(),
            vec![PartialUpdate { loc: path("/y"), op: "add".to_string(), arg: StoreValue::Int(1) }],
        );
        r1.reads
            .entry("m1".to_string())
            .or_default()
            .insert(path("/x"), StoreValue::Int(4));
        r1.events.push(Event::Fire {
            group: vec!["m1".to_string()],
            pcs: [("m1".to_string(), 0)].into_iter().collect(),
        });
        r1.ctl.push(CtlUpdate::Lock {
            path: path("/x"),
            machine: "m1".to_string(),
            mode: LockMode::Write,
            held: true,
        });
        let footer = TraceFooter {
            outcome: Outcome::Complete,
            committed: vec!["m1".to_string()],
            aborted: vec![],
            rounds: 2,
        };
        Trace { header, rounds: vec![r0, r1], footer }
    }

    #[test]
    fn jsonl_round_trip() {
        let t = sample_trace();
        let text = t.to_jsonl();
        let back = Trace::parse(&text).unwrap();
        assert_eq!(t, back);
        // serialization is stable
        assert_eq!(text, back.to_jsonl());
    }

    #[test]
    fn update_encoding_is_tagged_tuples() {
        let t = sample_trace();
        let text = t.to_jsonl();
        assert!(text.contains(r#"["genuine","/x",5]"#));
        assert!(text.contains(r#"["partial","/y","add",1]"#));
    }

    #[test]
    fn digest_is_stable_hex() {
        let d = workload_digest("machine m1\n");
        assert_eq!(d.len(), 64);
        assert_eq!(d, workload_digest("machine m1\n"));
        assert_ne!(d, workload_digest("machine m2\n"));
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!(matches!(Trace::parse(""), Err(TraceError::Empty)));
        assert!(Trace::parse("{\"not\":\"a header\"}\n").is_err());
        let t = sample_trace();
        let mut text = t.to_jsonl();
        text.push_str("{\"seq\":9,\"agent\":\"x\"}\n");
        assert!(matches!(Trace::parse(&text), Err(TraceError::Malformed(_))));
    }
}
