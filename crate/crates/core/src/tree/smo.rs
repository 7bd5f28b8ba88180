//! Insert, delete and the structure modifications they trigger.

use std::sync::atomic::Ordering;

use super::{Access, LatchedNode, Op, TreeEvent};
use crate::error::Result;
use crate::latch::{Holder, LatchKind};
use crate::page_format::{InsertOutcome, Node, MAX_FENCE};
use crate::page_store::ROOT_PAGE;
use crate::PageNo;

impl<'t> Op<'t> {
    /// Adds or updates `key` at `level`. Leaf inserts pass level 0; split
    /// posts new fences one level up through the same path.
    pub(crate) fn insert(&self, key: &[u8], value: u64, level: u8) -> Result<()> {
        loop {
            let mut ln = self.search(key, level, Access::Write)?;
            if ln.node.insert_slot(key, value)? != InsertOutcome::NoRoom {
                self.write(ln.page, &ln.node)?;
                return self.release(ln);
            }
            let reclaimed = ln.node.cleanup();
            if reclaimed > 0 {
                self.tree.counters.cleanups.fetch_add(1, Ordering::Relaxed);
                self.tree.emit(TreeEvent::Cleanup { page: ln.page, reclaimed });
                if ln.node.insert_slot(key, value)? != InsertOutcome::NoRoom {
                    self.write(ln.page, &ln.node)?;
                    return self.release(ln);
                }
            }
            self.split(ln)?;
        }
    }

    /// Splits a full node held under `WriteLock`. Returns with every latch
    /// released; the caller restarts its insert from the root.
    fn split(&self, ln: LatchedNode) -> Result<()> {
        let page = ln.page;
        let level = ln.node.level();
        self.latch(page, LatchKind::ParentModification)?;
        if page == ROOT_PAGE {
            return self.split_root(ln);
        }
        let old_fence = ln.node.fence_key().to_vec();
        let right_page = match self.alloc() {
            Ok(p) => p,
            Err(e) => {
                self.unlatch(page, LatchKind::ParentModification)?;
                self.release(ln)?;
                return Err(e);
            }
        };
        let mut left = ln.node;
        let right = left.split_off()?;
        left.set_link(right_page);
        // until its parent entry is in place, the new node must not start an
        // SMO of its own
        self.latch(right_page, LatchKind::ParentModification)?;
        self.write(right_page, &right)?;
        self.write(page, &left)?;
        self.tree.counters.splits.fetch_add(1, Ordering::Relaxed);
        self.tree.emit(TreeEvent::Split { page, right: right_page, level });
        self.unlatch(page, LatchKind::WriteLock)?;

        let median = left.fence_key().to_vec();
        self.insert(&median, page, level + 1)?;
        self.repoint(&old_fence, level + 1, right_page)?;

        self.unlatch(right_page, LatchKind::ParentModification)?;
        self.unlatch(page, LatchKind::ParentModification)
    }

    /// Root split: both halves move to fresh pages and the fixed root page
    /// becomes a two-entry branch one level up.
    fn split_root(&self, ln: LatchedNode) -> Result<()> {
        let level = ln.node.level();
        let pages = self.alloc().and_then(|l| Ok((l, self.alloc()?)));
        let (left_page, right_page) = match pages {
            Ok(p) => p,
            Err(e) => {
                self.unlatch(ROOT_PAGE, LatchKind::ParentModification)?;
                self.release(ln)?;
                return Err(e);
            }
        };
        let mut left = ln.node.clone();
        let right = left.split_off()?;
        left.set_link(right_page);
        self.write_new(right_page, &right)?;
        self.write_new(left_page, &left)?;
        let root = Node::from_entries(
            self.tree.cfg,
            level + 1,
            0,
            [(left.fence_key(), left_page, false), (MAX_FENCE, right_page, false)],
        );
        self.write(ROOT_PAGE, &root)?;
        self.tree.height.store(level + 2, Ordering::Release);
        self.tree.counters.splits.fetch_add(1, Ordering::Relaxed);
        self.tree.counters.root_splits.fetch_add(1, Ordering::Relaxed);
        self.tree.emit(TreeEvent::RootSplit { new_level: level + 1 });
        self.release(ln)?;
        self.unlatch(ROOT_PAGE, LatchKind::ParentModification)
    }

    /// Points the entry for `fence_key` at `level` to `child`.
    fn repoint(&self, fence_key: &[u8], level: u8, child: PageNo) -> Result<()> {
        let mut ln = self.search(fence_key, level, Access::Write)?;
        match ln.node.find_exact(fence_key) {
            Some(s) if !ln.node.is_key_deleted(s) => {
                ln.node.set_value(s, child);
                self.write(ln.page, &ln.node)?;
                self.release(ln)
            }
            _ => {
                let msg = format!("level {level} page {} lacks a live entry for {fence_key:02x?}", ln.page);
                self.release(ln)?;
                self.corruption(msg)
            }
        }
    }

    /// Leaf delete. Sets the key-deleted bit and consolidates the node if
    /// that emptied it.
    pub(crate) fn delete(&self, key: &[u8]) -> Result<bool> {
        let mut ln = self.search(key, 0, Access::Write)?;
        let Some(s) = ln.node.find_exact(key).filter(|&s| !ln.node.is_key_deleted(s)) else {
            self.release(ln)?;
            return Ok(false);
        };
        ln.node.mark_key_deleted(s)?;
        self.finish_delete(ln)?;
        Ok(true)
    }

    /// Removes a consolidated child's entry from its parent level. An entry
    /// that is the parent's own fence keeps its key as the (deleted) fence, so
    /// the parent's key range never changes.
    fn delete_fence_from_parent(&self, fence_key: &[u8], level: u8) -> Result<()> {
        let mut ln = self.search(fence_key, level, Access::Write)?;
        let Some(s) = ln.node.find_exact(fence_key).filter(|&s| !ln.node.is_key_deleted(s)) else {
            let msg = format!("level {level} page {} lacks a live entry for {fence_key:02x?}", ln.page);
            self.release(ln)?;
            return self.corruption(msg);
        };
        ln.node.mark_key_deleted(s)?;
        self.finish_delete(ln)
    }

    fn finish_delete(&self, ln: LatchedNode) -> Result<()> {
        if ln.node.is_empty() && ln.node.link() != 0 && ln.page != ROOT_PAGE {
            self.consolidate(ln)
        } else {
            self.write(ln.page, &ln.node)?;
            self.release(ln)
        }
    }

    /// Merges the right sibling into the empty node `ln` (held under
    /// `WriteLock`), unlinks the sibling from the parent level and, under the
    /// full protocol, drains and frees it.
    fn consolidate(&self, ln: LatchedNode) -> Result<()> {
        let left_page = ln.page;
        let level = ln.node.level();
        let right_page = ln.node.link();
        let step = |n: u8| self.tree.emit(TreeEvent::Consolidate { step: n, left: left_page, right: right_page });

        step(1);
        self.latch(right_page, LatchKind::WriteLock)?;
        let mut right = self.read(right_page)?;
        if right.is_deleted() || right.level() != level {
            let msg = format!("right sibling {right_page} of {left_page} is deleted or misplaced");
            self.unlatch(right_page, LatchKind::WriteLock)?;
            self.release(ln)?;
            return self.corruption(msg);
        }
        // an SMO still posting the sibling's own parent entries must finish
        // before its fence can be repointed
        self.latch(right_page, LatchKind::ParentModification)?;
        step(2);
        let old_left_fence = ln.node.fence_key().to_vec();
        let right_fence = right.fence_key().to_vec();
        let mut left = ln.node;
        left.copy_contents_from(&right);
        step(3);
        right.set_deleted(true);
        right.set_link(left_page);
        self.write(left_page, &left)?;
        self.write(right_page, &right)?;
        if self.tree.access_intent {
            // the deleted node's left link is a reference until it is freed
            self.tree.latches.acquire(Holder::Link(right_page), left_page, LatchKind::AccessIntent)?;
        }
        step(4);
        self.latch(left_page, LatchKind::ParentModification)?;
        step(5);
        self.unlatch(left_page, LatchKind::WriteLock)?;
        self.unlatch(right_page, LatchKind::WriteLock)?;
        self.unlatch(right_page, LatchKind::ParentModification)?;
        self.tree.counters.consolidations.fetch_add(1, Ordering::Relaxed);

        step(6);
        self.delete_fence_from_parent(&old_left_fence, level + 1)?;
        self.repoint(&right_fence, level + 1, left_page)?;
        step(7);
        self.unlatch(left_page, LatchKind::ParentModification)?;

        if !self.tree.access_intent {
            self.tree.counters.pages_leaked.fetch_add(1, Ordering::Relaxed);
            return Ok(());
        }
        step(8);
        self.latch(right_page, LatchKind::NodeDelete)?;
        self.latch(right_page, LatchKind::WriteLock)?;
        step(9);
        self.unlatch(right_page, LatchKind::WriteLock)?;
        self.unlatch(right_page, LatchKind::NodeDelete)?;
        self.tree.latches.release(Holder::Link(right_page), left_page, LatchKind::AccessIntent)?;
        self.tree.store.free_page(right_page)?;
        self.tree.counters.pages_freed.fetch_add(1, Ordering::Relaxed);
        self.tree.emit(TreeEvent::PageFreed { page: right_page });
        Ok(())
    }
}
