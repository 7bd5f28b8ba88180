//! Per-page latches in three independent sets.
//!
//! | set | shared         | exclusive            |
//! |-----|----------------|----------------------|
//! | 1   | `AccessIntent` | `NodeDelete`         |
//! | 2   | `ReadLock`     | `WriteLock`          |
//! | 3   |                | `ParentModification` |
//!
//! Requests only ever conflict with latches of the same set. Within set 2 a
//! waiting `WriteLock` holds back later `ReadLock` requests. Within set 1 a
//! waiting `NodeDelete` does not hold back `AccessIntent`: it only drains the
//! intents already granted.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use parking_lot::{Condvar, Mutex};
use thiserror::Error;

use crate::PageNo;

/// Default bound on pages with live latch state.
pub const DEFAULT_LATCH_CAPACITY: usize = 65536;

const SHARDS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LatchKind {
    AccessIntent,
    NodeDelete,
    ReadLock,
    WriteLock,
    ParentModification,
}

impl LatchKind {
    pub const ALL: [LatchKind; 5] = [
        LatchKind::AccessIntent,
        LatchKind::NodeDelete,
        LatchKind::ReadLock,
        LatchKind::WriteLock,
        LatchKind::ParentModification,
    ];

    /// Latch set number, 1 through 3.
    pub fn set(self) -> u8 {
        match self {
            LatchKind::AccessIntent | LatchKind::NodeDelete => 1,
            LatchKind::ReadLock | LatchKind::WriteLock => 2,
            LatchKind::ParentModification => 3,
        }
    }

    pub fn is_shared(self) -> bool {
        matches!(self, LatchKind::AccessIntent | LatchKind::ReadLock)
    }

    pub fn short_name(self) -> &'static str {
        match self {
            LatchKind::AccessIntent => "AI",
            LatchKind::NodeDelete => "ND",
            LatchKind::ReadLock => "RL",
            LatchKind::WriteLock => "WL",
            LatchKind::ParentModification => "PM",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for LatchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

/// Whether `requested` can be granted while another actor holds `held` on
/// the same page.
pub fn is_compatible(held: LatchKind, requested: LatchKind) -> bool {
    use LatchKind::*;
    if held.set() != requested.set() {
        return true;
    }
    matches!((held, requested), (AccessIntent, AccessIntent) | (ReadLock, ReadLock))
}

/// The two matrix cells the protocol never exercises: once `NodeDelete` is
/// held no reference to the node remains, so nobody can ask for
/// `AccessIntent` or a second `NodeDelete`.
pub fn is_protocol_unreachable(held: LatchKind, requested: LatchKind) -> bool {
    held == LatchKind::NodeDelete
        && matches!(requested, LatchKind::AccessIntent | LatchKind::NodeDelete)
}

/// Identity of a latch holder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Holder {
    /// One tree operation.
    Op(u64),
    /// A named actor in a scripted test.
    Actor(u32),
    /// The left link of a deleted node, which keeps an intent on its target
    /// until the deleted node itself is freed.
    Link(PageNo),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LatchError {
    #[error("{holder:?} already holds a set-{set} latch on page {page}")]
    Reentrant { holder: Holder, page: PageNo, set: u8 },
    #[error("{holder:?} does not hold {kind} on page {page}")]
    NotHeld { holder: Holder, page: PageNo, kind: LatchKind },
    #[error("latch table full ({0} pages)")]
    TableFull(usize),
}

#[derive(Default)]
struct PageLatch {
    intents: Vec<Holder>,
    node_delete: Option<Holder>,
    readers: Vec<Holder>,
    writer: Option<Holder>,
    writers_waiting: usize,
    parent_mod: Option<Holder>,
    waiting: Vec<(Holder, LatchKind)>,
}

impl PageLatch {
    fn is_idle(&self) -> bool {
        self.intents.is_empty()
            && self.node_delete.is_none()
            && self.readers.is_empty()
            && self.writer.is_none()
            && self.parent_mod.is_none()
            && self.waiting.is_empty()
    }

    fn holds_in_set(&self, holder: Holder, set: u8) -> bool {
        match set {
            1 => self.intents.contains(&holder) || self.node_delete == Some(holder),
            2 => self.readers.contains(&holder) || self.writer == Some(holder),
            _ => self.parent_mod == Some(holder),
        }
    }

    fn holds(&self, holder: Holder, kind: LatchKind) -> bool {
        match kind {
            LatchKind::AccessIntent => self.intents.contains(&holder),
            LatchKind::NodeDelete => self.node_delete == Some(holder),
            LatchKind::ReadLock => self.readers.contains(&holder),
            LatchKind::WriteLock => self.writer == Some(holder),
            LatchKind::ParentModification => self.parent_mod == Some(holder),
        }
    }

    fn grantable(&self, kind: LatchKind) -> bool {
        match kind {
            LatchKind::AccessIntent => self.node_delete.is_none(),
            LatchKind::NodeDelete => self.node_delete.is_none() && self.intents.is_empty(),
            LatchKind::ReadLock => self.writer.is_none() && self.writers_waiting == 0,
            LatchKind::WriteLock => self.writer.is_none() && self.readers.is_empty(),
            LatchKind::ParentModification => self.parent_mod.is_none(),
        }
    }

    fn grant(&mut self, holder: Holder, kind: LatchKind) {
        match kind {
            LatchKind::AccessIntent => self.intents.push(holder),
            LatchKind::NodeDelete => self.node_delete = Some(holder),
            LatchKind::ReadLock => self.readers.push(holder),
            LatchKind::WriteLock => self.writer = Some(holder),
            LatchKind::ParentModification => self.parent_mod = Some(holder),
        }
    }

    fn revoke(&mut self, holder: Holder, kind: LatchKind) -> bool {
        fn take(v: &mut Vec<Holder>, h: Holder) -> bool {
            match v.iter().position(|x| *x == h) {
                Some(i) => {
                    v.swap_remove(i);
                    true
                }
                None => false,
            }
        }
        fn clear(slot: &mut Option<Holder>, h: Holder) -> bool {
            if *slot == Some(h) {
                *slot = None;
                true
            } else {
                false
            }
        }
        match kind {
            LatchKind::AccessIntent => take(&mut self.intents, holder),
            LatchKind::NodeDelete => clear(&mut self.node_delete, holder),
            LatchKind::ReadLock => take(&mut self.readers, holder),
            LatchKind::WriteLock => clear(&mut self.writer, holder),
            LatchKind::ParentModification => clear(&mut self.parent_mod, holder),
        }
    }
}

/// Counter snapshot for one latch kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct KindStats {
    pub acquisitions: u64,
    pub waits: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LatchStats {
    pub per_kind: [KindStats; 5],
    pub live_pages: usize,
}

impl LatchStats {
    pub fn get(&self, kind: LatchKind) -> KindStats {
        self.per_kind[kind.index()]
    }
}

/// A granted `ParentModification` interval, in global event sequence numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PmInterval {
    pub page: PageNo,
    pub holder: Holder,
    pub granted: u64,
    pub released: Option<u64>,
}

#[derive(Default)]
struct Counters {
    acquisitions: [AtomicU64; 5],
    waits: [AtomicU64; 5],
}

struct Shard {
    pages: Mutex<HashMap<PageNo, PageLatch>>,
    wake: Condvar,
}

/// Table of latch state for every page that currently has any.
pub struct LatchTable {
    shards: Vec<Shard>,
    capacity: usize,
    live: AtomicUsize,
    counters: Counters,
    seq: AtomicU64,
    pm_log: Mutex<Option<Vec<PmInterval>>>,
}

impl fmt::Debug for LatchTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LatchTable")
            .field("capacity", &self.capacity)
            .field("live", &self.live.load(Ordering::Relaxed))
            .finish()
    }
}

impl Default for LatchTable {
    fn default() -> Self {
        Self::new(DEFAULT_LATCH_CAPACITY)
    }
}

impl LatchTable {
    pub fn new(capacity: usize) -> Self {
        Self {
            shards: (0..SHARDS)
                .map(|_| Shard { pages: Mutex::new(HashMap::new()), wake: Condvar::new() })
                .collect(),
            capacity,
            live: AtomicUsize::new(0),
            counters: Counters::default(),
            seq: AtomicU64::new(0),
            pm_log: Mutex::new(None),
        }
    }

    fn shard(&self, page: PageNo) -> &Shard {
        &self.shards[(page as usize).wrapping_mul(0x9E37_79B9) % SHARDS]
    }

    fn entry<'m>(
        &self,
        map: &'m mut HashMap<PageNo, PageLatch>,
        page: PageNo,
    ) -> Result<&'m mut PageLatch, LatchError> {
        if !map.contains_key(&page) {
            if self.live.load(Ordering::Relaxed) >= self.capacity {
                return Err(LatchError::TableFull(self.capacity));
            }
            self.live.fetch_add(1, Ordering::Relaxed);
        }
        Ok(map.entry(page).or_default())
    }

    fn prune(&self, map: &mut HashMap<PageNo, PageLatch>, page: PageNo) {
        if map.get(&page).is_some_and(PageLatch::is_idle) {
            map.remove(&page);
            self.live.fetch_sub(1, Ordering::Relaxed);
        }
    }

    /// Blocks until `kind` is granted on `page` to `holder`.
    pub fn acquire(&self, holder: Holder, page: PageNo, kind: LatchKind) -> Result<(), LatchError> {
        let shard = self.shard(page);
        let mut map = shard.pages.lock();
        let state = self.entry(&mut map, page)?;
        if state.holds_in_set(holder, kind.set()) {
            let err = LatchError::Reentrant { holder, page, set: kind.set() };
            self.prune(&mut map, page);
            return Err(err);
        }
        self.counters.acquisitions[kind.index()].fetch_add(1, Ordering::Relaxed);
        if !state.grantable(kind) {
            self.counters.waits[kind.index()].fetch_add(1, Ordering::Relaxed);
            state.waiting.push((holder, kind));
            if kind == LatchKind::WriteLock {
                state.writers_waiting += 1;
            }
            loop {
                shard.wake.wait(&mut map);
                let state = map.get_mut(&page).expect("waiter keeps page state alive");
                if state.grantable(kind) {
                    let i = state.waiting.iter().position(|w| *w == (holder, kind)).unwrap();
                    state.waiting.swap_remove(i);
                    if kind == LatchKind::WriteLock {
                        state.writers_waiting -= 1;
                    }
                    break;
                }
            }
        }
        let state = map.get_mut(&page).unwrap();
        state.grant(holder, kind);
        if kind == LatchKind::ParentModification {
            self.log_pm_grant(page, holder);
        }
        Ok(())
    }

    /// Grants immediately or returns `false` without waiting.
    pub fn try_acquire(&self, holder: Holder, page: PageNo, kind: LatchKind) -> Result<bool, LatchError> {
        let shard = self.shard(page);
        let mut map = shard.pages.lock();
        let state = self.entry(&mut map, page)?;
        if state.holds_in_set(holder, kind.set()) {
            let err = LatchError::Reentrant { holder, page, set: kind.set() };
            self.prune(&mut map, page);
            return Err(err);
        }
        if !state.grantable(kind) {
            self.prune(&mut map, page);
            return Ok(false);
        }
        self.counters.acquisitions[kind.index()].fetch_add(1, Ordering::Relaxed);
        state.grant(holder, kind);
        if kind == LatchKind::ParentModification {
            self.log_pm_grant(page, holder);
        }
        Ok(true)
    }

    pub fn release(&self, holder: Holder, page: PageNo, kind: LatchKind) -> Result<(), LatchError> {
        let shard = self.shard(page);
        let mut map = shard.pages.lock();
        let released = map.get_mut(&page).is_some_and(|s| s.revoke(holder, kind));
        if !released {
            return Err(LatchError::NotHeld { holder, page, kind });
        }
        if kind == LatchKind::ParentModification {
            self.log_pm_release(page, holder);
        }
        let has_waiters = !map[&page].waiting.is_empty();
        self.prune(&mut map, page);
        drop(map);
        if has_waiters {
            shard.wake.notify_all();
        }
        Ok(())
    }

    pub fn holds(&self, holder: Holder, page: PageNo, kind: LatchKind) -> bool {
        self.shard(page).pages.lock().get(&page).is_some_and(|s| s.holds(holder, kind))
    }

    /// True while `holder` is blocked waiting for `kind` on `page`.
    pub fn is_waiting(&self, holder: Holder, page: PageNo, kind: LatchKind) -> bool {
        self.shard(page)
            .pages
            .lock()
            .get(&page)
            .is_some_and(|s| s.waiting.contains(&(holder, kind)))
    }

    /// Number of actors blocked waiting for `kind` on `page`.
    pub fn waiters(&self, page: PageNo, kind: LatchKind) -> usize {
        self.shard(page)
            .pages
            .lock()
            .get(&page)
            .map_or(0, |s| s.waiting.iter().filter(|w| w.1 == kind).count())
    }

    /// True when no latch is held or awaited on `page`.
    pub fn is_idle(&self, page: PageNo) -> bool {
        self.shard(page).pages.lock().get(&page).is_none_or(PageLatch::is_idle)
    }

    /// Latches currently held on `page` by anyone, as `(holder, kind)`.
    pub fn held_on(&self, page: PageNo) -> Vec<(Holder, LatchKind)> {
        let map = self.shard(page).pages.lock();
        let Some(s) = map.get(&page) else { return Vec::new() };
        let mut out: Vec<_> = s.intents.iter().map(|h| (*h, LatchKind::AccessIntent)).collect();
        out.extend(s.node_delete.map(|h| (h, LatchKind::NodeDelete)));
        out.extend(s.readers.iter().map(|h| (*h, LatchKind::ReadLock)));
        out.extend(s.writer.map(|h| (h, LatchKind::WriteLock)));
        out.extend(s.parent_mod.map(|h| (h, LatchKind::ParentModification)));
        out
    }

    pub fn stats(&self) -> LatchStats {
        let mut per_kind = [KindStats::default(); 5];
        for (i, k) in per_kind.iter_mut().enumerate() {
            k.acquisitions = self.counters.acquisitions[i].load(Ordering::Relaxed);
            k.waits = self.counters.waits[i].load(Ordering::Relaxed);
        }
        LatchStats { per_kind, live_pages: self.live.load(Ordering::Relaxed) }
    }

    /// Starts (or restarts) recording `ParentModification` grant intervals.
    pub fn record_parent_modifications(&self, on: bool) {
        *self.pm_log.lock() = on.then(Vec::new);
    }

    pub fn parent_modification_intervals(&self) -> Vec<PmInterval> {
        self.pm_log.lock().clone().unwrap_or_default()
    }

    fn log_pm_grant(&self, page: PageNo, holder: Holder) {
        if let Some(log) = self.pm_log.lock().as_mut() {
            let granted = self.seq.fetch_add(1, Ordering::Relaxed);
            log.push(PmInterval { page, holder, granted, released: None });
        }
    }

    fn log_pm_release(&self, page: PageNo, holder: Holder) {
        if let Some(log) = self.pm_log.lock().as_mut() {
            let at = self.seq.fetch_add(1, Ordering::Relaxed);
            if let Some(iv) = log
                .iter_mut()
                .rev()
                .find(|iv| iv.page == page && iv.holder == holder && iv.released.is_none())
            {
                iv.released = Some(at);
            }
        }
    }
}

/// Pairs of overlapping `ParentModification` intervals on the same page.
pub fn overlapping_intervals(intervals: &[PmInterval]) -> Vec<(PmInterval, PmInterval)> {
    let mut by_page: HashMap<PageNo, Vec<PmInterval>> = HashMap::new();
    for iv in intervals {
        by_page.entry(iv.page).or_default().push(*iv);
    }
    let mut out = Vec::new();
    for list in by_page.values_mut() {
        list.sort_by_key(|iv| iv.granted);
        for w in list.windows(2) {
            let end = w[0].released.unwrap_or(u64::MAX);
            if w[1].granted < end {
                out.push((w[0], w[1]));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;
    use std::thread;
    use std::time::Duration;
    use LatchKind::*;

    const A: Holder = Holder::Actor(1);
    const B: Holder = Holder::Actor(2);
    const C: Holder = Holder::Actor(3);

    fn wait_until(f: impl Fn() -> bool) {
        for _ in 0..10_000 {
            if f() {
                return;
            }
            thread::sleep(Duration::from_millis(1));
        }
        panic!("condition not reached");
    }

    #[test]
    fn matrix_spot_checks() {
        assert!(!is_compatible(WriteLock, ReadLock));
        assert!(!is_compatible(ParentModification, ParentModification));
        assert!(is_compatible(NodeDelete, WriteLock));
        assert!(is_compatible(ReadLock, ReadLock));
        assert!(is_compatible(WriteLock, ParentModification));
        assert!(!is_compatible(AccessIntent, NodeDelete));
    }

    #[test]
    fn cross_set_always_compatible() {
        for a in LatchKind::ALL {
            for b in LatchKind::ALL {
                if a.set() != b.set() {
                    assert!(is_compatible(a, b), "{a} {b}");
                }
                assert_eq!(is_compatible(a, b), is_compatible(b, a));
            }
        }
    }

    #[test]
    fn shared_read_granted() {
        let t = LatchTable::default();
        t.acquire(A, 5, ReadLock).unwrap();
        assert!(t.try_acquire(B, 5, ReadLock).unwrap());
        assert!(t.try_acquire(C, 5, ParentModification).unwrap());
    }

    #[test]
    fn write_then_pm_granted() {
        let t = LatchTable::default();
        t.acquire(A, 5, WriteLock).unwrap();
        assert!(t.try_acquire(B, 5, ParentModification).unwrap());
        assert!(!t.try_acquire(C, 5, ReadLock).unwrap());
    }

    #[test]
    fn acquire_release_idle() {
        let t = LatchTable::default();
        t.acquire(A, 9, ReadLock).unwrap();
        t.release(A, 9, ReadLock).unwrap();
        assert!(t.is_idle(9));
        assert_eq!(t.stats().live_pages, 0);
    }

    #[test]
    fn release_without_acquire() {
        let t = LatchTable::default();
        assert_eq!(
            t.release(A, 1, WriteLock),
            Err(LatchError::NotHeld { holder: A, page: 1, kind: WriteLock })
        );
        t.acquire(A, 1, ReadLock).unwrap();
        assert!(t.release(A, 1, WriteLock).is_err());
    }

    #[test]
    fn upgrade_is_violation() {
        let t = LatchTable::default();
        t.acquire(A, 1, ReadLock).unwrap();
        assert_eq!(t.acquire(A, 1, WriteLock), Err(LatchError::Reentrant { holder: A, page: 1, set: 2 }));
        // one latch per set is fine
        t.acquire(A, 1, AccessIntent).unwrap();
        t.acquire(A, 1, ParentModification).unwrap();
    }

    #[test]
    fn node_delete_drains_intent() {
        let t = Arc::new(LatchTable::default());
        t.acquire(A, 3, AccessIntent).unwrap();
        let t2 = t.clone();
        let h = thread::spawn(move || t2.acquire(B, 3, NodeDelete).unwrap());
        wait_until(|| t.is_waiting(B, 3, NodeDelete));
        assert!(!t.holds(B, 3, NodeDelete));
        t.release(A, 3, AccessIntent).unwrap();
        h.join().unwrap();
        assert!(t.holds(B, 3, NodeDelete));
    }

    #[test]
    fn two_readers_one_releases_writer_still_blocked() {
        let t = Arc::new(LatchTable::default());
        t.acquire(A, 4, ReadLock).unwrap();
        t.acquire(B, 4, ReadLock).unwrap();
        let t2 = t.clone();
        let h = thread::spawn(move || t2.acquire(C, 4, WriteLock).unwrap());
        wait_until(|| t.is_waiting(C, 4, WriteLock));
        t.release(A, 4, ReadLock).unwrap();
        thread::sleep(Duration::from_millis(20));
        assert!(t.is_waiting(C, 4, WriteLock));
        assert!(t.holds(B, 4, ReadLock));
        t.release(B, 4, ReadLock).unwrap();
        h.join().unwrap();
        assert!(t.holds(C, 4, WriteLock));
    }

    #[test]
    fn waiting_writer_holds_back_new_readers() {
        let t = Arc::new(LatchTable::default());
        t.acquire(A, 4, ReadLock).unwrap();
        let t2 = t.clone();
        let h = thread::spawn(move || t2.acquire(B, 4, WriteLock).unwrap());
        wait_until(|| t.is_waiting(B, 4, WriteLock));
        assert!(!t.try_acquire(C, 4, ReadLock).unwrap());
        t.release(A, 4, ReadLock).unwrap();
        h.join().unwrap();
    }

    #[test]
    fn waiting_node_delete_does_not_block_intent() {
        let t = Arc::new(LatchTable::default());
        t.acquire(A, 4, AccessIntent).unwrap();
        let t2 = t.clone();
        let h = thread::spawn(move || t2.acquire(B, 4, NodeDelete).unwrap());
        wait_until(|| t.is_waiting(B, 4, NodeDelete));
        assert!(t.try_acquire(C, 4, AccessIntent).unwrap());
        t.release(A, 4, AccessIntent).unwrap();
        t.release(C, 4, AccessIntent).unwrap();
        h.join().unwrap();
        assert_eq!(t.stats().get(AccessIntent).waits, 0);
        assert_eq!(t.stats().get(NodeDelete).waits, 1);
    }

    #[test]
    fn capacity_bound() {
        let t = LatchTable::new(2);
        t.acquire(A, 1, ReadLock).unwrap();
        t.acquire(A, 2, ReadLock).unwrap();
        assert_eq!(t.acquire(A, 3, ReadLock), Err(LatchError::TableFull(2)));
        t.release(A, 1, ReadLock).unwrap();
        t.acquire(A, 3, ReadLock).unwrap();
    }

    #[test]
    fn pm_intervals_never_overlap() {
        let t = Arc::new(LatchTable::default());
        t.record_parent_modifications(true);
        let handles: Vec<_> = (0..4)
            .map(|i| {
                let t = t.clone();
                thread::spawn(move || {
                    for _ in 0..200 {
                        t.acquire(Holder::Actor(i), 7, ParentModification).unwrap();
                        t.release(Holder::Actor(i), 7, ParentModification).unwrap();
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        let ivs = t.parent_modification_intervals();
        assert_eq!(ivs.len(), 800);
        assert!(overlapping_intervals(&ivs).is_empty());
    }

    #[test]
    fn exclusive_mutual_exclusion_under_contention() {
        use std::sync::atomic::AtomicI64;
        let t = Arc::new(LatchTable::default());
        let inside = Arc::new(AtomicI64::new(0));
        let handles: Vec<_> = (0..6)
            .map(|i| {
                let (t, inside) = (t.clone(), inside.clone());
                thread::spawn(move || {
                    let me = Holder::Actor(i);
                    for n in 0..500 {
                        if (n + i) % 3 == 0 {
                            t.acquire(me, 1, WriteLock).unwrap();
                            assert_eq!(inside.swap(-1, Ordering::SeqCst), 0);
                            inside.store(0, Ordering::SeqCst);
                            t.release(me, 1, WriteLock).unwrap();
                        } else {
                            t.acquire(me, 1, ReadLock).unwrap();
                            assert!(inside.fetch_add(1, Ordering::SeqCst) >= 0);
                            inside.fetch_sub(1, Ordering::SeqCst);
                            t.release(me, 1, ReadLock).unwrap();
                        }
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(t.is_idle(1));
    }
}
