//! Operation history and the sequential reference it is checked against.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogOp {
    Put,
    Remove,
    Get,
}

/// What the tree answered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogResult {
    Ok,
    Removed(bool),
    Got(Option<u64>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogRecord {
    pub worker: u32,
    pub op: LogOp,
    pub key: Vec<u8>,
    pub value: u64,
    pub result: LogResult,
}

impl fmt::Display for LogRecord {
    /// `worker TAB op TAB key-hex TAB value TAB result`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.op {
            LogOp::Put => "put",
            LogOp::Remove => "remove",
            LogOp::Get => "get",
        };
        let (value, result) = match self.result {
            LogResult::Ok => (self.value, "ok"),
            LogResult::Removed(true) => (self.value, "removed"),
            LogResult::Removed(false) => (self.value, "missing"),
            LogResult::Got(Some(v)) => (v, "found"),
            LogResult::Got(None) => (self.value, "absent"),
        };
        write!(f, "{}\t{op}\t{}\t{value}\t{result}", self.worker, hex::encode(&self.key))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub msg: String,
}

impl FromStr for LogRecord {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let fields: Vec<&str> = s.split('\t').collect();
        let [worker, op, key, value, result] = fields[..] else {
            return Err(format!("expected 5 fields, got {}", fields.len()));
        };
        let worker = worker.parse().map_err(|e| format!("worker: {e}"))?;
        let key = hex::decode(key).map_err(|e| format!("key: {e}"))?;
        let value: u64 = value.parse().map_err(|e| format!("value: {e}"))?;
        let (op, result) = match (op, result) {
            ("put", "ok") => (LogOp::Put, LogResult::Ok),
            ("remove", "removed") => (LogOp::Remove, LogResult::Removed(true)),
            ("remove", "missing") => (LogOp::Remove, LogResult::Removed(false)),
            ("get", "found") => (LogOp::Get, LogResult::Got(Some(value))),
            ("get", "absent") => (LogOp::Get, LogResult::Got(None)),
            _ => return Err(format!("unknown op/result pair {op}/{result}")),
        };
        // only puts carry a value of their own
        let value = if op == LogOp::Put { value } else { 0 };
        Ok(LogRecord { worker, op, key, value, result })
    }
}

/// Append-only operation history. Each worker's records appear in the order
/// the worker issued them.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OracleLog {
    records: Vec<LogRecord>,
}

impl OracleLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: LogRecord) {
        self.records.push(record);
    }

    /// Appends another worker's history.
    pub fn append(&mut self, other: OracleLog) {
        self.records.extend(other.records);
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.to_string());
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, ParseError> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| l.parse().map_err(|msg| ParseError { line: i + 1, msg }))
            .collect::<Result<_, _>>()?;
        Ok(Self { records })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReplayError {
    #[error("key {key:02x?} mutated by workers {first} and {second}")]
    MultipleWriters { key: Vec<u8>, first: u32, second: u32 },
    #[error("record {index}: {record} inconsistent with the reference state {expected:?}")]
    Inconsistent { index: usize, record: String, expected: Option<u64> },
}

/// Replays a log into a sorted reference map, starting from empty.
pub fn oracle_replay(log: &OracleLog) -> Result<BTreeMap<Vec<u8>, u64>, ReplayError> {
    replay_from(BTreeMap::new(), log)
}

/// Replays a log on top of `initial`. Every key may be mutated by one worker
/// only. That worker's own reads and removes must match the reference state
/// exactly; other workers' reads must match some state the key held.
pub fn replay_from(
    initial: BTreeMap<Vec<u8>, u64>,
    log: &OracleLog,
) -> Result<BTreeMap<Vec<u8>, u64>, ReplayError> {
    let mut owner: HashMap<&[u8], u32> = HashMap::new();
    let mut history: HashMap<&[u8], HashSet<Option<u64>>> = HashMap::new();
    for r in log.records() {
        if r.op == LogOp::Get {
            continue;
        }
        let first = *owner.entry(&r.key).or_insert(r.worker);
        if first != r.worker {
            return Err(ReplayError::MultipleWriters { key: r.key.clone(), first, second: r.worker });
        }
        let states = history.entry(&r.key).or_insert_with(|| HashSet::from([initial.get(&r.key).copied()]));
        states.insert(match r.op {
            LogOp::Put => Some(r.value),
            _ => None,
        });
    }

    let mut state = initial.clone();
    for (index, r) in log.records().iter().enumerate() {
        let current = state.get(&r.key).copied();
        let bad = || ReplayError::Inconsistent { index, record: r.to_string(), expected: current };
        match (r.op, r.result) {
            (LogOp::Put, LogResult::Ok) => {
                state.insert(r.key.clone(), r.value);
            }
            (LogOp::Remove, LogResult::Removed(removed)) => {
                if removed != current.is_some() {
                    return Err(bad());
                }
                state.remove(&r.key);
            }
            (LogOp::Get, LogResult::Got(got)) => {
                let consistent = match owner.get(&r.key[..]) {
                    Some(&w) if w == r.worker => got == current,
                    Some(_) => history[&r.key[..]].contains(&got),
                    None => got == initial.get(&r.key).copied(),
                };
                if !consistent {
                    return Err(bad());
                }
            }
            _ => return Err(bad()),
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(worker: u32, op: LogOp, key: &str, value: u64, result: LogResult) -> LogRecord {
        LogRecord { worker, op, key: key.as_bytes().to_vec(), value, result }
    }

    #[test]
    fn empty_log() {
        assert!(oracle_replay(&OracleLog::new()).unwrap().is_empty());
    }

    #[test]
    fn put_remove_put() {
        let mut log = OracleLog::new();
        log.push(rec(0, LogOp::Put, "k", 1, LogResult::Ok));
        log.push(rec(0, LogOp::Remove, "k", 0, LogResult::Removed(true)));
        log.push(rec(0, LogOp::Put, "k", 2, LogResult::Ok));
        let map = oracle_replay(&log).unwrap();
        assert_eq!(map, BTreeMap::from([(b"k".to_vec(), 2)]));
    }

    #[test]
    fn two_writers_rejected() {
        let mut log = OracleLog::new();
        log.push(rec(0, LogOp::Put, "k", 1, LogResult::Ok));
        log.push(rec(1, LogOp::Remove, "k", 0, LogResult::Removed(true)));
        assert!(matches!(oracle_replay(&log), Err(ReplayError::MultipleWriters { .. })));
    }

    #[test]
    fn owner_get_must_be_exact() {
        let mut log = OracleLog::new();
        log.push(rec(0, LogOp::Put, "k", 1, LogResult::Ok));
        log.push(rec(0, LogOp::Get, "k", 0, LogResult::Got(None)));
        assert!(matches!(oracle_replay(&log), Err(ReplayError::Inconsistent { index: 1, .. })));
    }

    #[test]
    fn foreign_get_may_see_any_version() {
        let mut log = OracleLog::new();
        log.push(rec(1, LogOp::Get, "k", 0, LogResult::Got(Some(1))));
        log.push(rec(1, LogOp::Get, "k", 0, LogResult::Got(None)));
        log.push(rec(0, LogOp::Put, "k", 1, LogResult::Ok));
        log.push(rec(0, LogOp::Put, "k", 2, LogResult::Ok));
        assert!(oracle_replay(&log).is_ok());
        log.push(rec(1, LogOp::Get, "k", 0, LogResult::Got(Some(3))));
        assert!(oracle_replay(&log).is_err());
    }

    #[test]
    fn wrong_remove_result() {
        let mut log = OracleLog::new();
        log.push(rec(0, LogOp::Remove, "k", 0, LogResult::Removed(true)));
        assert!(oracle_replay(&log).is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut log = OracleLog::new();
        log.push(rec(3, LogOp::Put, "a\tb", 17, LogResult::Ok));
        log.push(rec(3, LogOp::Get, "a\tb", 0, LogResult::Got(Some(17))));
        log.push(rec(1, LogOp::Get, "zz", 0, LogResult::Got(None)));
        log.push(rec(3, LogOp::Remove, "a\tb", 0, LogResult::Removed(true)));
        log.push(rec(2, LogOp::Remove, "q", 0, LogResult::Removed(false)));
        let text = log.to_text();
        assert_eq!(text.lines().next().unwrap(), "3\tput\t610962\t17\tok");
        assert_eq!(OracleLog::parse(&text).unwrap(), log);
        assert!(OracleLog::parse("1\tput\tzz\t1\tok").is_err());
    }
}
