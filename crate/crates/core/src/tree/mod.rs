//! The B-link tree: latch-coupled search, insert with split, delete with
//! synchronous consolidation, and the parent fence maintenance that goes
//! with both.
//!
//! Latch order is top-down between levels and left-to-right within a level,
//! except that a search resting on a deleted node follows its link left.
//! The root lives at a fixed page; a root split rewrites that page in place
//! as a branch one level up.

mod search;
mod smo;

use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;

use crate::error::{Error, Result};
use crate::latch::{Holder, LatchKind, LatchTable, DEFAULT_LATCH_CAPACITY};
use crate::page_format::{compare_keys, Node, PageConfig};
use crate::page_store::{PageStore, StoreOptions, DEFAULT_CACHE_PAGES, ROOT_PAGE};
use crate::PageNo;

pub(crate) use search::Access;

/// Deepest level tracked by the per-level hop counters.
pub const MAX_TRACKED_LEVELS: usize = 32;

#[derive(Debug, Clone)]
pub struct TreeOptions {
    pub page_bits: u8,
    /// Full protocol when true. When false, searches skip `AccessIntent`
    /// coupling and consolidated pages are never reclaimed.
    pub access_intent: bool,
    pub cache_pages: usize,
    pub latch_capacity: usize,
    pub max_pages: Option<u64>,
}

impl Default for TreeOptions {
    fn default() -> Self {
        Self {
            page_bits: 12,
            access_intent: true,
            cache_pages: DEFAULT_CACHE_PAGES,
            latch_capacity: DEFAULT_LATCH_CAPACITY,
            max_pages: None,
        }
    }
}

impl TreeOptions {
    pub fn page_bits(mut self, bits: u8) -> Self {
        self.page_bits = bits;
        self
    }

    pub fn access_intent(mut self, on: bool) -> Self {
        self.access_intent = on;
        self
    }

    fn store_options(&self) -> StoreOptions {
        StoreOptions { cache_pages: self.cache_pages, max_pages: self.max_pages }
    }
}

/// Instrumentation points, delivered synchronously to an installed hook on
/// the thread performing the operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TreeEvent {
    Latched { holder: Holder, page: PageNo, kind: LatchKind },
    Released { holder: Holder, page: PageNo, kind: LatchKind },
    /// `AccessIntent` is held on `page` and the previous node's latch has
    /// been released; the set-2 request on `page` comes next.
    IntentCoupled { holder: Holder, page: PageNo },
    RightHop { holder: Holder, level: u8, from: PageNo, to: PageNo },
    LeftHop { holder: Holder, level: u8, from: PageNo, to: PageNo },
    Cleanup { page: PageNo, reclaimed: usize },
    Split { page: PageNo, right: PageNo, level: u8 },
    RootSplit { new_level: u8 },
    /// Consolidation of `right` into `left` reached the start of `step`.
    Consolidate { step: u8, left: PageNo, right: PageNo },
    PageFreed { page: PageNo },
}

pub type Hook = Arc<dyn Fn(&TreeEvent) + Send + Sync>;

#[derive(Default)]
struct Counters {
    splits: AtomicU64,
    root_splits: AtomicU64,
    cleanups: AtomicU64,
    consolidations: AtomicU64,
    pages_freed: AtomicU64,
    pages_leaked: AtomicU64,
    left_hops: AtomicU64,
    restarts: AtomicU64,
    right_hops: [AtomicU64; MAX_TRACKED_LEVELS],
}

/// Snapshot of the structural counters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TreeStats {
    pub height: u8,
    pub splits: u64,
    pub root_splits: u64,
    pub cleanups: u64,
    pub consolidations: u64,
    pub pages_freed: u64,
    pub pages_leaked: u64,
    pub left_hops: u64,
    pub restarts: u64,
    pub right_hops: Vec<u64>,
}

impl TreeStats {
    pub fn right_hops_at(&self, level: u8) -> u64 {
        self.right_hops.get(level as usize).copied().unwrap_or(0)
    }
}

/// A node image together with the set-2 latch the reading operation holds.
#[derive(Debug)]
pub struct LatchedNode {
    pub page: PageNo,
    pub node: Node,
    pub held: LatchKind,
}

/// Shared handle to one tree. All methods may be called concurrently.
pub struct BLinkTree {
    store: PageStore,
    latches: LatchTable,
    cfg: PageConfig,
    access_intent: bool,
    height: AtomicU8,
    next_op: AtomicU64,
    counters: Counters,
    hook_on: AtomicBool,
    hook: RwLock<Option<Hook>>,
}

impl std::fmt::Debug for BLinkTree {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BLinkTree")
            .field("cfg", &self.cfg)
            .field("height", &self.height())
            .field("access_intent", &self.access_intent)
            .finish()
    }
}

impl BLinkTree {
    /// Creates a tree in a new (or empty) file, or in memory when `path` is
    /// `None`.
    pub fn create(path: Option<&Path>, opts: &TreeOptions) -> Result<Self> {
        let cfg = PageConfig::new(opts.page_bits)?;
        let store = PageStore::create(path, cfg, &opts.store_options())?;
        Self::assemble(store, opts)
    }

    pub fn in_memory(opts: &TreeOptions) -> Result<Self> {
        Self::create(None, opts)
    }

    /// Opens an existing file. `opts.page_bits` must match the file.
    pub fn open(path: &Path, opts: &TreeOptions) -> Result<Self> {
        let store = PageStore::open(path, Some(opts.page_bits), &opts.store_options())?;
        Self::assemble(store, opts)
    }

    /// Opens an existing file whatever its page size.
    pub fn open_any(path: &Path, opts: &TreeOptions) -> Result<Self> {
        let store = PageStore::open(path, None, &opts.store_options())?;
        Self::assemble(store, opts)
    }

    pub fn open_or_create(path: &Path, opts: &TreeOptions) -> Result<Self> {
        let empty = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        if empty {
            Self::create(Some(path), opts)
        } else {
            Self::open(path, opts)
        }
    }

    fn assemble(store: PageStore, opts: &TreeOptions) -> Result<Self> {
        let cfg = store.config();
        let root = Node::from_bytes(&store.read_page(ROOT_PAGE)?, cfg)?;
        Ok(Self {
            store,
            latches: LatchTable::new(opts.latch_capacity),
            cfg,
            access_intent: opts.access_intent,
            height: AtomicU8::new(root.level() + 1),
            next_op: AtomicU64::new(1),
            counters: Counters::default(),
            hook_on: AtomicBool::new(false),
            hook: RwLock::new(None),
        })
    }

    pub fn config(&self) -> PageConfig {
        self.cfg
    }

    pub fn root_page(&self) -> PageNo {
        ROOT_PAGE
    }

    pub fn height(&self) -> u8 {
        self.height.load(Ordering::Acquire)
    }

    pub fn access_intent_enabled(&self) -> bool {
        self.access_intent
    }

    pub fn store(&self) -> &PageStore {
        &self.store
    }

    pub fn latches(&self) -> &LatchTable {
        &self.latches
    }

    pub fn set_hook(&self, hook: Option<Hook>) {
        let on = hook.is_some();
        *self.hook.write() = hook;
        self.hook_on.store(on, Ordering::Release);
    }

    pub fn stats(&self) -> TreeStats {
        let c = &self.counters;
        let load = |a: &AtomicU64| a.load(Ordering::Relaxed);
        TreeStats {
            height: self.height(),
            splits: load(&c.splits),
            root_splits: load(&c.root_splits),
            cleanups: load(&c.cleanups),
            consolidations: load(&c.consolidations),
            pages_freed: load(&c.pages_freed),
            pages_leaked: load(&c.pages_leaked),
            left_hops: load(&c.left_hops),
            restarts: load(&c.restarts),
            right_hops: c.right_hops.iter().map(load).collect(),
        }
    }

    /// Reads and decodes a page without latching. Only meaningful while the
    /// tree is quiescent.
    pub fn read_node_unlatched(&self, page: PageNo) -> Result<Node> {
        Ok(Node::from_bytes(&self.store.read_page(page)?, self.cfg)?)
    }

    pub fn get(&self, key: &[u8]) -> Result<Option<u64>> {
        self.cfg.validate_key(key)?;
        let op = self.op();
        let ln = op.search(key, 0, Access::Read)?;
        let found = ln
            .node
            .find_exact(key)
            .filter(|&s| !ln.node.is_key_deleted(s))
            .map(|s| ln.node.value(s));
        op.release(ln)?;
        Ok(found)
    }

    pub fn put(&self, key: &[u8], value: u64) -> Result<()> {
        self.cfg.validate_key(key)?;
        self.op().insert(key, value, 0)
    }

    /// Removes `key`; returns whether it was present.
    pub fn remove(&self, key: &[u8]) -> Result<bool> {
        self.cfg.validate_key(key)?;
        self.op().delete(key)
    }

    /// Live pairs with `low <= key < high`, in key order.
    pub fn scan(&self, low: Option<&[u8]>, high: Option<&[u8]>) -> Result<Vec<(Vec<u8>, u64)>> {
        let mut out = Vec::new();
        self.scan_with(low, high, |k, v| {
            out.push((k.to_vec(), v));
            true
        })?;
        Ok(out)
    }

    /// Streams live pairs in `[low, high)` to `visit` until it returns false.
    /// Walks the leaf level left to right, coupling latches across links.
    pub fn scan_with<F>(&self, low: Option<&[u8]>, high: Option<&[u8]>, mut visit: F) -> Result<()>
    where
        F: FnMut(&[u8], u64) -> bool,
    {
        for k in low.iter().chain(high.iter()) {
            self.cfg.validate_key(k)?;
        }
        let op = self.op();
        let start: &[u8] = low.unwrap_or(&[0]);
        let mut cur = op.search(start, 0, Access::Read)?;
        let mut done_through: Option<Vec<u8>> = None;
        loop {
            if cur.node.is_deleted() {
                let to = cur.node.link();
                cur = op.hop_left(cur, to, LatchKind::ReadLock)?;
                continue;
            }
            let node = &cur.node;
            for s in 0..node.count() {
                let slot = node.slot(s);
                if slot.deleted || slot.key.is_empty() {
                    continue;
                }
                if low.is_some_and(|l| slot.key < l) {
                    continue;
                }
                if done_through.as_deref().is_some_and(|d| compare_keys(slot.key, d).is_le()) {
                    continue;
                }
                if high.is_some_and(|h| slot.key >= h) || !visit(slot.key, slot.value) {
                    return op.release(cur);
                }
            }
            let fence = node.fence_key();
            let past_high = high.is_some_and(|h| compare_keys(fence, h).is_ge());
            if node.link() == 0 || fence.is_empty() || past_high {
                return op.release(cur);
            }
            if done_through.as_deref().is_none_or(|d| compare_keys(fence, d).is_gt()) {
                done_through = Some(fence.to_vec());
            }
            let to = node.link();
            cur = op.couple(cur, to, LatchKind::ReadLock)?;
        }
    }

    pub(crate) fn op(&self) -> Op<'_> {
        Op { tree: self, holder: Holder::Op(self.next_op.fetch_add(1, Ordering::Relaxed)) }
    }

    fn emit(&self, event: TreeEvent) {
        if self.hook_on.load(Ordering::Acquire) {
            let hook = self.hook.read().clone();
            if let Some(h) = hook {
                h(&event);
            }
        }
    }
}

/// One tree operation; owns a latch-holder identity.
pub(crate) struct Op<'t> {
    tree: &'t BLinkTree,
    holder: Holder,
}

impl<'t> Op<'t> {
    fn latch(&self, page: PageNo, kind: LatchKind) -> Result<()> {
        self.tree.latches.acquire(self.holder, page, kind)?;
        self.tree.emit(TreeEvent::Latched { holder: self.holder, page, kind });
        Ok(())
    }

    fn unlatch(&self, page: PageNo, kind: LatchKind) -> Result<()> {
        self.tree.latches.release(self.holder, page, kind)?;
        self.tree.emit(TreeEvent::Released { holder: self.holder, page, kind });
        Ok(())
    }

    pub(crate) fn release(&self, ln: LatchedNode) -> Result<()> {
        self.unlatch(ln.page, ln.held)
    }

    fn read(&self, page: PageNo) -> Result<Node> {
        debug_assert!(
            self.tree.latches.holds(self.holder, page, LatchKind::ReadLock)
                || self.tree.latches.holds(self.holder, page, LatchKind::WriteLock),
            "read of page {page} without a set-2 latch"
        );
        let node = Node::from_bytes(&self.tree.store.read_page(page)?, self.tree.cfg)?;
        Ok(node)
    }

    fn write(&self, page: PageNo, node: &Node) -> Result<()> {
        debug_assert!(
            self.tree.latches.holds(self.holder, page, LatchKind::WriteLock)
                || self.tree.latches.holds(self.holder, page, LatchKind::ParentModification),
            "write of page {page} without WriteLock or ParentModification"
        );
        self.tree.store.write_page(page, node.as_bytes())?;
        Ok(())
    }

    /// Writes a freshly allocated page nobody else can reach yet.
    fn write_new(&self, page: PageNo, node: &Node) -> Result<()> {
        self.tree.store.write_page(page, node.as_bytes())?;
        Ok(())
    }

    fn alloc(&self) -> Result<PageNo> {
        let page = self.tree.store.alloc_page()?;
        debug_assert!(self.tree.latches.is_idle(page), "allocated page {page} still latched");
        Ok(page)
    }

    fn corruption<T>(&self, msg: String) -> Result<T> {
        Err(Error::Corruption(msg))
    }
}
