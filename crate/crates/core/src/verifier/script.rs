//! Deterministic latch interleavings. Each actor is a thread that performs
//! one latch request at a time; the driver issues steps in order and checks
//! whether each request was granted or left waiting.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::latch::{Holder, LatchError, LatchKind, LatchTable};
use crate::PageNo;

const STEP_TIMEOUT: Duration = Duration::from_secs(5);
const POLL: Duration = Duration::from_micros(200);
/// Time given to a woken waiter before it is declared still blocked.
const SETTLE: Duration = Duration::from_millis(20);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Granted,
    Blocked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Acquire { actor: u32, page: PageNo, kind: LatchKind, expect: Outcome },
    Release { actor: u32, page: PageNo, kind: LatchKind },
    /// A request that blocked earlier must have been granted by now.
    ExpectGranted { actor: u32, page: PageNo, kind: LatchKind },
    /// A request that blocked earlier must still be waiting.
    ExpectStillBlocked { actor: u32, page: PageNo, kind: LatchKind },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceEvent {
    Granted,
    Blocked,
    Released,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEntry {
    pub step: usize,
    pub actor: u32,
    pub page: PageNo,
    pub kind: LatchKind,
    pub event: TraceEvent,
}

impl fmt::Display for TraceEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{} actor {} {} page {}: {:?}", self.step, self.actor, self.kind, self.page, self.event)
    }
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("step {step}: {msg}")]
    Unexpected { step: usize, msg: String },
    #[error("step {step}: {source}")]
    Latch { step: usize, source: LatchError },
}

enum Cmd {
    Acquire(PageNo, LatchKind),
    Release(PageNo, LatchKind),
    Shutdown,
}

type Key = (u32, PageNo, LatchKind);

struct Ack {
    key: Key,
    release: bool,
    result: Result<(), LatchError>,
}

struct Driver {
    table_rx: Receiver<Ack>,
    arrived: HashMap<(Key, bool), Result<(), LatchError>>,
}

impl Driver {
    fn pump(&mut self, wait: Duration) -> bool {
        match self.table_rx.recv_timeout(wait) {
            Ok(a) => {
                self.arrived.insert((a.key, a.release), a.result);
                true
            }
            Err(RecvTimeoutError::Timeout) => false,
            Err(RecvTimeoutError::Disconnected) => panic!("script actor exited early"),
        }
    }

    fn take(&mut self, key: Key, release: bool) -> Option<Result<(), LatchError>> {
        while self.pump(Duration::ZERO) {}
        self.arrived.remove(&(key, release))
    }
}

/// Runs `steps` against `table` with one thread per actor and returns the
/// observed trace. Every latch still held at the end is released.
pub fn scripted_interleaving(table: &LatchTable, steps: &[Step]) -> Result<Vec<TraceEntry>, ScriptError> {
    let actors: HashSet<u32> = steps
        .iter()
        .map(|s| match *s {
            Step::Acquire { actor, .. }
            | Step::Release { actor, .. }
            | Step::ExpectGranted { actor, .. }
            | Step::ExpectStillBlocked { actor, .. } => actor,
        })
        .collect();

    thread::scope(|scope| {
        let (ack_tx, ack_rx) = mpsc::channel::<Ack>();
        let mut inboxes: HashMap<u32, Sender<Cmd>> = HashMap::new();
        for &actor in &actors {
            let (tx, rx) = mpsc::channel::<Cmd>();
            inboxes.insert(actor, tx);
            let ack_tx = ack_tx.clone();
            scope.spawn(move || actor_loop(table, actor, rx, ack_tx));
        }
        drop(ack_tx);
        let mut driver = Driver { table_rx: ack_rx, arrived: HashMap::new() };
        let result = drive(table, steps, &inboxes, &mut driver);
        for tx in inboxes.values() {
            let _ = tx.send(Cmd::Shutdown);
        }
        result
    })
}

fn actor_loop(table: &LatchTable, actor: u32, rx: Receiver<Cmd>, ack: Sender<Ack>) {
    let holder = Holder::Actor(actor);
    let mut held: Vec<(PageNo, LatchKind)> = Vec::new();
    for cmd in rx {
        match cmd {
            Cmd::Acquire(page, kind) => {
                let result = table.acquire(holder, page, kind);
                if result.is_ok() {
                    held.push((page, kind));
                }
                let _ = ack.send(Ack { key: (actor, page, kind), release: false, result });
            }
            Cmd::Release(page, kind) => {
                let result = table.release(holder, page, kind);
                held.retain(|h| *h != (page, kind));
                let _ = ack.send(Ack { key: (actor, page, kind), release: true, result });
            }
            Cmd::Shutdown => break,
        }
    }
    for (page, kind) in held.into_iter().rev() {
        let _ = table.release(holder, page, kind);
    }
}

fn drive(
    table: &LatchTable,
    steps: &[Step],
    inboxes: &HashMap<u32, Sender<Cmd>>,
    driver: &mut Driver,
) -> Result<Vec<TraceEntry>, ScriptError> {
    let mut trace = Vec::new();
    let mut blocked: HashSet<Key> = HashSet::new();
    let unexpected = |step: usize, msg: String| ScriptError::Unexpected { step, msg };
    for (i, step) in steps.iter().enumerate() {
        let entry = |actor, page, kind, event| TraceEntry { step: i, actor, page, kind, event };
        match *step {
            Step::Acquire { actor, page, kind, expect } => {
                let key = (actor, page, kind);
                inboxes[&actor].send(Cmd::Acquire(page, kind)).expect("actor alive");
                let deadline = Instant::now() + STEP_TIMEOUT;
                let observed = loop {
                    if let Some(r) = driver.take(key, false) {
                        r.map_err(|source| ScriptError::Latch { step: i, source })?;
                        break Outcome::Granted;
                    }
                    if table.is_waiting(Holder::Actor(actor), page, kind) {
                        break Outcome::Blocked;
                    }
                    if Instant::now() > deadline {
                        return Err(unexpected(i, format!("actor {actor} neither granted nor waiting")));
                    }
                    driver.pump(POLL);
                };
                if observed == Outcome::Blocked {
                    blocked.insert(key);
                }
                trace.push(entry(actor, page, kind, match observed {
                    Outcome::Granted => TraceEvent::Granted,
                    Outcome::Blocked => TraceEvent::Blocked,
                }));
                if observed != expect {
                    return Err(unexpected(i, format!("actor {actor} {kind} on {page}: {observed:?}, expected {expect:?}")));
                }
            }
            Step::Release { actor, page, kind } => {
                if blocked.iter().any(|b| b.0 == actor) {
                    return Err(unexpected(i, format!("actor {actor} is blocked and cannot release")));
                }
                inboxes[&actor].send(Cmd::Release(page, kind)).expect("actor alive");
                let deadline = Instant::now() + STEP_TIMEOUT;
                let r = loop {
                    if let Some(r) = driver.take((actor, page, kind), true) {
                        break r;
                    }
                    if Instant::now() > deadline {
                        return Err(unexpected(i, format!("actor {actor} did not release")));
                    }
                    driver.pump(POLL);
                };
                r.map_err(|source| ScriptError::Latch { step: i, source })?;
                trace.push(entry(actor, page, kind, TraceEvent::Released));
            }
            Step::ExpectGranted { actor, page, kind } => {
                let key = (actor, page, kind);
                if !blocked.remove(&key) {
                    return Err(unexpected(i, format!("actor {actor} has no blocked {kind} on {page}")));
                }
                let deadline = Instant::now() + STEP_TIMEOUT;
                loop {
                    if let Some(r) = driver.take(key, false) {
                        r.map_err(|source| ScriptError::Latch { step: i, source })?;
                        break;
                    }
                    if Instant::now() > deadline {
                        return Err(unexpected(i, format!("actor {actor} {kind} on {page} still blocked")));
                    }
                    driver.pump(POLL);
                }
                trace.push(entry(actor, page, kind, TraceEvent::Granted));
            }
            Step::ExpectStillBlocked { actor, page, kind } => {
                let key = (actor, page, kind);
                if !blocked.contains(&key) {
                    return Err(unexpected(i, format!("actor {actor} has no blocked {kind} on {page}")));
                }
                driver.pump(SETTLE);
                if driver.arrived.contains_key(&(key, false)) || driver.take(key, false).is_some() {
                    return Err(unexpected(i, format!("actor {actor} {kind} on {page} was granted")));
                }
                trace.push(entry(actor, page, kind, TraceEvent::Blocked));
            }
        }
    }
    Ok(trace)
}

/// One cell of the compatibility matrix as observed through real threads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatrixCell {
    pub held: LatchKind,
    pub requested: LatchKind,
    pub observed: Outcome,
}

/// Drives every (held, requested) pair on a fresh page: actor 0 takes
/// `held`, actor 1 requests `requested`.
pub fn compatibility_matrix(table: &LatchTable) -> Result<Vec<MatrixCell>, ScriptError> {
    let mut cells = Vec::new();
    for (i, held) in LatchKind::ALL.into_iter().enumerate() {
        for (j, requested) in LatchKind::ALL.into_iter().enumerate() {
            let page = 1_000_000 + (i * 5 + j) as PageNo;
            let expect = if crate::latch::is_compatible(held, requested) { Outcome::Granted } else { Outcome::Blocked };
            let mut steps = vec![
                Step::Acquire { actor: 0, page, kind: held, expect: Outcome::Granted },
                Step::Acquire { actor: 1, page, kind: requested, expect },
                Step::Release { actor: 0, page, kind: held },
            ];
            if expect == Outcome::Blocked {
                steps.push(Step::ExpectGranted { actor: 1, page, kind: requested });
            }
            steps.push(Step::Release { actor: 1, page, kind: requested });
            let observed = match scripted_interleaving(table, &steps) {
                Ok(trace) => trace[1].event,
                Err(ScriptError::Unexpected { step: 1, .. }) => {
                    if expect == Outcome::Granted {
                        TraceEvent::Blocked
                    } else {
                        TraceEvent::Granted
                    }
                }
                Err(e) => return Err(e),
            };
            let observed = if observed == TraceEvent::Granted { Outcome::Granted } else { Outcome::Blocked };
            cells.push(MatrixCell { held, requested, observed });
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use LatchKind::*;

    #[test]
    fn matrix_matches_table() {
        let table = LatchTable::default();
        let cells = compatibility_matrix(&table).unwrap();
        assert_eq!(cells.len(), 25);
        for c in cells {
            let expected = if crate::latch::is_compatible(c.held, c.requested) { Outcome::Granted } else { Outcome::Blocked };
            assert_eq!(c.observed, expected, "{:?} then {:?}", c.held, c.requested);
        }
        for p in 1_000_000..1_000_025 {
            assert!(table.is_idle(p));
        }
    }

    #[test]
    fn writer_waits_for_both_readers() {
        let table = LatchTable::default();
        let trace = scripted_interleaving(
            &table,
            &[
                Step::Acquire { actor: 0, page: 5, kind: ReadLock, expect: Outcome::Granted },
                Step::Acquire { actor: 1, page: 5, kind: ReadLock, expect: Outcome::Granted },
                Step::Acquire { actor: 2, page: 5, kind: WriteLock, expect: Outcome::Blocked },
                Step::Release { actor: 0, page: 5, kind: ReadLock },
                Step::ExpectStillBlocked { actor: 2, page: 5, kind: WriteLock },
                Step::Release { actor: 1, page: 5, kind: ReadLock },
                Step::ExpectGranted { actor: 2, page: 5, kind: WriteLock },
            ],
        )
        .unwrap();
        assert_eq!(trace.len(), 7);
        assert!(table.is_idle(5));
    }

    #[test]
    fn waiting_writer_blocks_new_readers() {
        let table = LatchTable::default();
        scripted_interleaving(
            &table,
            &[
                Step::Acquire { actor: 0, page: 9, kind: ReadLock, expect: Outcome::Granted },
                Step::Acquire { actor: 1, page: 9, kind: WriteLock, expect: Outcome::Blocked },
                Step::Acquire { actor: 2, page: 9, kind: ReadLock, expect: Outcome::Blocked },
                Step::Release { actor: 0, page: 9, kind: ReadLock },
                Step::ExpectGranted { actor: 1, page: 9, kind: WriteLock },
                Step::ExpectStillBlocked { actor: 2, page: 9, kind: ReadLock },
                Step::Release { actor: 1, page: 9, kind: WriteLock },
                Step::ExpectGranted { actor: 2, page: 9, kind: ReadLock },
            ],
        )
        .unwrap();
        assert!(table.is_idle(9));
    }

    #[test]
    fn waiting_node_delete_does_not_block_intents() {
        let table = LatchTable::default();
        scripted_interleaving(
            &table,
            &[
                Step::Acquire { actor: 0, page: 3, kind: AccessIntent, expect: Outcome::Granted },
                Step::Acquire { actor: 1, page: 3, kind: NodeDelete, expect: Outcome::Blocked },
                Step::Acquire { actor: 2, page: 3, kind: AccessIntent, expect: Outcome::Granted },
                Step::Release { actor: 0, page: 3, kind: AccessIntent },
                Step::ExpectStillBlocked { actor: 1, page: 3, kind: NodeDelete },
                Step::Release { actor: 2, page: 3, kind: AccessIntent },
                Step::ExpectGranted { actor: 1, page: 3, kind: NodeDelete },
            ],
        )
        .unwrap();
    }

    #[test]
    fn wrong_expectation_is_reported() {
        let table = LatchTable::default();
        let err = scripted_interleaving(
            &table,
            &[
                Step::Acquire { actor: 0, page: 4, kind: WriteLock, expect: Outcome::Granted },
                Step::Acquire { actor: 1, page: 4, kind: ParentModification, expect: Outcome::Blocked },
            ],
        )
        .unwrap_err();
        assert!(matches!(err, ScriptError::Unexpected { step: 1, .. }));
        assert!(table.is_idle(4));
    }
}
