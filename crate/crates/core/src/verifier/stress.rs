//! Randomized multi-threaded workload checked against the operation oracle.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::audit::{audit, AuditReport};
use super::oracle::{replay_from, LogOp, LogRecord, LogResult, OracleLog};
use crate::latch::LatchKind;
use crate::tree::BLinkTree;

const SCAN_LIMIT: usize = 64;
const MAX_REPORTED_ERRORS: usize = 20;

/// Relative operation weights, written `put/remove/get/scan`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mix {
    pub put: u32,
    pub remove: u32,
    pub get: u32,
    pub scan: u32,
}

impl Default for Mix {
    fn default() -> Self {
        Self { put: 40, remove: 20, get: 35, scan: 5 }
    }
}

impl Mix {
    fn total(&self) -> u32 {
        self.put + self.remove + self.get + self.scan
    }
}

impl FromStr for Mix {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<u32> = s
            .split('/')
            .map(|p| p.trim().parse::<u32>().map_err(|e| format!("{p:?}: {e}")))
            .collect::<Result<_, _>>()?;
        let [put, remove, get, scan] = parts[..] else {
            return Err(format!("expected put/remove/get/scan, got {s:?}"));
        };
        let mix = Mix { put, remove, get, scan };
        if mix.total() == 0 {
            return Err("mix weights sum to zero".into());
        }
        Ok(mix)
    }
}

impl fmt::Display for Mix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}/{}", self.put, self.remove, self.get, self.scan)
    }
}

/// How the key universe is divided among workers. Each key has exactly one
/// mutating worker either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Partition {
    /// Worker `w` owns one contiguous block of key ids.
    Contiguous,
    /// Key id `i` belongs to worker `i % workers`, so neighbouring keys (and
    /// therefore leaves) are shared by all workers.
    #[default]
    Interleaved,
}

#[derive(Debug, Clone)]
pub struct StressConfig {
    pub workers: u32,
    pub ops_per_worker: u64,
    pub mix: Mix,
    pub seed: u64,
    pub keys_per_worker: u64,
    pub partition: Partition,
}

impl Default for StressConfig {
    fn default() -> Self {
        Self {
            workers: 8,
            ops_per_worker: 50_000,
            mix: Mix::default(),
            seed: 0x5eed,
            keys_per_worker: 2_000,
            partition: Partition::default(),
        }
    }
}

impl StressConfig {
    fn key_id(&self, worker: u32, i: u64) -> u64 {
        match self.partition {
            Partition::Contiguous => worker as u64 * self.keys_per_worker + i,
            Partition::Interleaved => i * self.workers as u64 + worker as u64,
        }
    }

    fn universe(&self) -> u64 {
        self.workers as u64 * self.keys_per_worker
    }
}

/// Stress keys are `k` plus a 12-digit id plus 0..=3 padding bytes, so key
/// lengths vary while id order equals key order.
pub fn stress_key(id: u64) -> Vec<u8> {
    let mut k = format!("k{id:012}").into_bytes();
    k.resize(k.len() + (id % 4) as usize, b'.');
    k
}

const UNIVERSE_LOW: &[u8] = b"k";
const UNIVERSE_HIGH: &[u8] = b"l";

#[derive(Debug, Clone)]
pub struct StressReport {
    pub ops: u64,
    pub elapsed: Duration,
    pub final_keys: usize,
    pub access_intent_waits: u64,
    pub errors: Vec<String>,
    pub audit: AuditReport,
}

impl StressReport {
    pub fn passed(&self) -> bool {
        self.errors.is_empty() && self.audit.passed()
    }

    pub fn ops_per_sec(&self) -> f64 {
        self.ops as f64 / self.elapsed.as_secs_f64().max(1e-9)
    }
}

impl fmt::Display for StressReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "ops={} elapsed_ms={} ops_per_sec={:.0} final_keys={} access_intent_waits={} errors={}",
            self.ops,
            self.elapsed.as_millis(),
            self.ops_per_sec(),
            self.final_keys,
            self.access_intent_waits,
            self.errors.len()
        )?;
        for e in &self.errors {
            writeln!(f, "  - {e}")?;
        }
        write!(f, "{}", self.audit)
    }
}

struct WorkerResult {
    log: OracleLog,
    model: BTreeMap<Vec<u8>, u64>,
    errors: Vec<String>,
}

/// Runs the workload on `tree` and checks it. The tree may already hold
/// keys; anything inside the stress key range counts as initial state.
pub fn run_stress(tree: &BLinkTree, cfg: &StressConfig) -> crate::Result<StressReport> {
    assert!(cfg.workers > 0 && cfg.keys_per_worker > 0, "empty workload");
    let initial: BTreeMap<Vec<u8>, u64> = tree.scan(Some(UNIVERSE_LOW), Some(UNIVERSE_HIGH))?.into_iter().collect();
    tree.latches().record_parent_modifications(true);

    let started = Instant::now();
    let results: Vec<WorkerResult> = thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.workers)
            .map(|w| {
                let initial = &initial;
                s.spawn(move || run_worker(tree, cfg, w, initial))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("stress worker panicked")).collect()
    });
    let elapsed = started.elapsed();

    let mut errors: Vec<String> = Vec::new();
    let mut log = OracleLog::new();
    let mut union = initial.clone();
    for (w, r) in results.into_iter().enumerate() {
        for i in 0..cfg.keys_per_worker {
            union.remove(&stress_key(cfg.key_id(w as u32, i)));
        }
        union.extend(r.model);
        errors.extend(r.errors);
        log.append(r.log);
    }

    let final_state: BTreeMap<Vec<u8>, u64> =
        tree.scan(Some(UNIVERSE_LOW), Some(UNIVERSE_HIGH))?.into_iter().collect();
    match replay_from(initial, &log) {
        Ok(expected) if expected == final_state => {}
        Ok(expected) => errors.push(format!(
            "final scan ({} keys) differs from oracle replay ({} keys)",
            final_state.len(),
            expected.len()
        )),
        Err(e) => errors.push(format!("oracle replay: {e}")),
    }
    if union != final_state {
        errors.push(format!("final scan differs from per-worker models ({} keys)", union.len()));
    }
    errors.truncate(MAX_REPORTED_ERRORS);

    let audit = audit(tree, true);
    tree.latches().record_parent_modifications(false);
    Ok(StressReport {
        ops: cfg.workers as u64 * cfg.ops_per_worker,
        elapsed,
        final_keys: final_state.len(),
        access_intent_waits: tree.latches().stats().get(LatchKind::AccessIntent).waits,
        errors,
        audit,
    })
}

fn run_worker(tree: &BLinkTree, cfg: &StressConfig, worker: u32, initial: &BTreeMap<Vec<u8>, u64>) -> WorkerResult {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(worker as u64 + 1);
    let mut model: BTreeMap<Vec<u8>, u64> = (0..cfg.keys_per_worker)
        .map(|i| stress_key(cfg.key_id(worker, i)))
        .filter_map(|k| initial.get(&k).map(|&v| (k, v)))
        .collect();
    let mut log = OracleLog::new();
    let mut errors = Vec::new();
    let total = cfg.mix.total();

    for _ in 0..cfg.ops_per_worker {
        if errors.len() >= MAX_REPORTED_ERRORS {
            break;
        }
        let roll = rng.gen_range(0..total);
        let own = stress_key(cfg.key_id(worker, rng.gen_range(0..cfg.keys_per_worker)));
        let outcome = if roll < cfg.mix.put {
            let value: u64 = rng.gen();
            tree.put(&own, value).map(|()| {
                model.insert(own.clone(), value);
                log.push(LogRecord { worker, op: LogOp::Put, key: own, value, result: LogResult::Ok });
            })
        } else if roll < cfg.mix.put + cfg.mix.remove {
            tree.remove(&own).map(|removed| {
                let expected = model.remove(&own).is_some();
                if removed != expected {
                    errors.push(format!("worker {worker}: remove {own:02x?} returned {removed}, expected {expected}"));
                }
                log.push(LogRecord { worker, op: LogOp::Remove, key: own, value: 0, result: LogResult::Removed(removed) });
            })
        } else if roll < cfg.mix.put + cfg.mix.remove + cfg.mix.get {
            // a quarter of reads target keys other workers are mutating
            let key = if rng.gen_ratio(1, 4) { stress_key(rng.gen_range(0..cfg.universe())) } else { own };
            tree.get(&key).map(|got| {
                if let Some(&expected) = model.get(&key) {
                    if got != Some(expected) {
                        errors.push(format!("worker {worker}: get {key:02x?} = {got:?}, expected {expected}"));
                    }
                } else if is_owned(cfg, worker, &key) && got.is_some() {
                    errors.push(format!("worker {worker}: get {key:02x?} = {got:?}, expected nothing"));
                }
                log.push(LogRecord { worker, op: LogOp::Get, key, value: 0, result: LogResult::Got(got) });
            })
        } else {
            let low = stress_key(rng.gen_range(0..cfg.universe()));
            let high = stress_key(rng.gen_range(0..cfg.universe()));
            let (low, high) = if low <= high { (low, high) } else { (high, low) };
            check_scan(tree, &low, &high, worker, &mut errors)
        };
        if let Err(e) = outcome {
            errors.push(format!("worker {worker}: {e}"));
            break;
        }
    }
    WorkerResult { log, model, errors }
}

fn is_owned(cfg: &StressConfig, worker: u32, key: &[u8]) -> bool {
    let digits = std::str::from_utf8(&key[1..13]).ok().and_then(|d| d.parse::<u64>().ok());
    let Some(id) = digits else { return false };
    match cfg.partition {
        Partition::Contiguous => id / cfg.keys_per_worker == worker as u64,
        Partition::Interleaved => id % cfg.workers as u64 == worker as u64,
    }
}

fn check_scan(tree: &BLinkTree, low: &[u8], high: &[u8], worker: u32, errors: &mut Vec<String>) -> crate::Result<()> {
    let mut prev: Option<Vec<u8>> = None;
    let mut n = 0;
    tree.scan_with(Some(low), Some(high), |k, _| {
        if k < low || k >= high {
            errors.push(format!("worker {worker}: scan [{low:02x?}, {high:02x?}) returned {k:02x?}"));
        }
        if prev.as_deref().is_some_and(|p| p >= k) {
            errors.push(format!("worker {worker}: scan out of order at {k:02x?}"));
        }
        prev = Some(k.to_vec());
        n += 1;
        n < SCAN_LIMIT
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::TreeOptions;

    #[test]
    fn mix_parses() {
        assert_eq!("40/20/35/5".parse::<Mix>().unwrap(), Mix::default());
        assert!("1/2/3".parse::<Mix>().is_err());
        assert!("0/0/0/0".parse::<Mix>().is_err());
        assert_eq!(Mix::default().to_string(), "40/20/35/5");
    }

    #[test]
    fn keys_sort_by_id() {
        let keys: Vec<_> = (0..50).map(stress_key).collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(stress_key(7), b"k000000000007...".to_vec());
    }

    #[test]
    fn ownership() {
        let cfg = StressConfig { workers: 3, keys_per_worker: 10, ..Default::default() };
        for w in 0..3 {
            for i in 0..10 {
                let k = stress_key(cfg.key_id(w, i));
                assert!(is_owned(&cfg, w, &k));
                assert!(!is_owned(&cfg, (w + 1) % 3, &k));
            }
        }
    }

    #[test]
    fn small_run_passes() {
        let tree = BLinkTree::in_memory(&TreeOptions::default().page_bits(9)).unwrap();
        tree.put(b"k000000000001", 99).unwrap();
        for partition in [Partition::Contiguous, Partition::Interleaved] {
            let cfg = StressConfig {
                workers: 4,
                ops_per_worker: 2_000,
                keys_per_worker: 300,
                partition,
                ..Default::default()
            };
            let report = run_stress(&tree, &cfg).unwrap();
            assert!(report.passed(), "{report}");
        }
    }
}
