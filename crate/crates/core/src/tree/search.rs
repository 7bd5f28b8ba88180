use std::sync::atomic::Ordering;

use super::{LatchedNode, Op, TreeEvent, MAX_TRACKED_LEVELS};
use crate::error::{Error, Result};
use crate::latch::LatchKind;
use crate::page_format::compare_keys;
use crate::page_store::ROOT_PAGE;
use crate::PageNo;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Access {
    Read,
    Write,
}

impl<'t> Op<'t> {
    /// Descends to the node at `level` whose key range covers `key`, holding
    /// `WriteLock` there when `access` is `Write` and `ReadLock` otherwise.
    /// Levels above the target are always read-latched.
    pub(crate) fn search(&self, key: &[u8], level: u8, access: Access) -> Result<LatchedNode> {
        let kind_for = |l: u8| {
            if l == level && access == Access::Write {
                LatchKind::WriteLock
            } else {
                LatchKind::ReadLock
            }
        };
        loop {
            let height = self.tree.height();
            if level >= height {
                return Err(Error::LevelOutOfRange { level, height });
            }
            let root_level = height - 1;
            let kind = kind_for(root_level);
            self.latch(ROOT_PAGE, kind)?;
            let node = self.read(ROOT_PAGE)?;
            if node.level() != root_level {
                // root split since the height was read
                self.unlatch(ROOT_PAGE, kind)?;
                self.tree.counters.restarts.fetch_add(1, Ordering::Relaxed);
                continue;
            }
            let mut cur = LatchedNode { page: ROOT_PAGE, node, held: kind };
            loop {
                let lvl = cur.node.level();
                if cur.node.is_deleted() {
                    let to = cur.node.link();
                    cur = self.hop_left(cur, to, kind_for(lvl))?;
                    continue;
                }
                if compare_keys(key, cur.node.fence_key()).is_gt() {
                    let to = cur.node.link();
                    cur = self.hop_right(cur, to, kind_for(lvl))?;
                    continue;
                }
                if lvl == level {
                    return Ok(cur);
                }
                let node = &cur.node;
                let mut s = node.find_slot(key);
                while s < node.count() && node.is_key_deleted(s) {
                    s += 1;
                }
                if s == node.count() {
                    // the range ends in a deleted fence; its keys now live
                    // under the right sibling
                    let to = node.link();
                    cur = self.hop_right(cur, to, kind_for(lvl))?;
                    continue;
                }
                let child = node.value(s);
                cur = self.couple(cur, child, kind_for(lvl - 1))?;
                if cur.node.level() != lvl - 1 {
                    let msg = format!("page {} at level {} under a level-{lvl} parent", cur.page, cur.node.level());
                    self.release(cur)?;
                    return self.corruption(msg);
                }
            }
        }
    }

    fn hop_right(&self, cur: LatchedNode, to: PageNo, kind: LatchKind) -> Result<LatchedNode> {
        let level = cur.node.level();
        if to == 0 {
            let msg = format!("rightmost page {} does not cover the search key", cur.page);
            self.release(cur)?;
            return self.corruption(msg);
        }
        if let Some(c) = self.tree.counters.right_hops.get(level as usize) {
            c.fetch_add(1, Ordering::Relaxed);
        }
        debug_assert!((level as usize) < MAX_TRACKED_LEVELS);
        self.tree.emit(TreeEvent::RightHop { holder: self.holder, level, from: cur.page, to });
        let next = self.couple(cur, to, kind)?;
        self.check_level(next, level)
    }

    /// Moves from a deleted node to the node that absorbed its contents.
    pub(crate) fn hop_left(&self, cur: LatchedNode, to: PageNo, kind: LatchKind) -> Result<LatchedNode> {
        let level = cur.node.level();
        if to == 0 {
            let msg = format!("deleted page {} has no left link", cur.page);
            self.release(cur)?;
            return self.corruption(msg);
        }
        self.tree.counters.left_hops.fetch_add(1, Ordering::Relaxed);
        self.tree.emit(TreeEvent::LeftHop { holder: self.holder, level, from: cur.page, to });
        let next = self.couple(cur, to, kind)?;
        self.check_level(next, level)
    }

    fn check_level(&self, ln: LatchedNode, level: u8) -> Result<LatchedNode> {
        if ln.node.level() != level {
            let msg = format!("sibling page {} at level {}, expected {level}", ln.page, ln.node.level());
            self.release(ln)?;
            return self.corruption(msg);
        }
        Ok(ln)
    }

    /// Moves from `cur` to page `to`, acquiring `kind` there. With the full
    /// protocol an `AccessIntent` on `to` bridges the release of `cur`.
    pub(crate) fn couple(&self, cur: LatchedNode, to: PageNo, kind: LatchKind) -> Result<LatchedNode> {
        if self.tree.access_intent {
            self.latch(to, LatchKind::AccessIntent)?;
            self.release(cur)?;
            self.tree.emit(TreeEvent::IntentCoupled { holder: self.holder, page: to });
            self.latch(to, kind)?;
            self.unlatch(to, LatchKind::AccessIntent)?;
        } else {
            self.release(cur)?;
            self.latch(to, kind)?;
        }
        let node = self.read(to)?;
        Ok(LatchedNode { page: to, node, held: kind })
    }
}
