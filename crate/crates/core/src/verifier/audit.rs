//! Structural audit of a tree and its page file.

use std::collections::HashSet;
use std::fmt;

use crate::latch::{overlapping_intervals, LatchKind};
use crate::page_format::{compare_keys, Node};
use crate::page_store::ROOT_PAGE;
use crate::tree::BLinkTree;
use crate::PageNo;

const MAX_REPORTED_MISMATCHES: usize = 10;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub quiesced: bool,
    pub height: u8,
    /// Live nodes per level, leaf level first.
    pub nodes_per_level: Vec<u64>,
    pub live_keys: u64,
    pub live_pages: u64,
    pub free_pages: u64,
    /// Pages neither reachable nor free. Only deleted nodes left behind by
    /// the deferred-reclamation mode may end up here.
    pub leaked_pages: u64,
    pub top_page: u64,
    pub access_intent_waits: u64,
    pub pm_overlaps: u64,
    pub use_after_free: u64,
    pub violations: Vec<String>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    /// Machine-readable `key=value` lines.
    pub fn to_kv_lines(&self) -> Vec<String> {
        let mut out = vec![
            format!("quiesced={}", self.quiesced),
            format!("height={}", self.height),
        ];
        for (level, n) in self.nodes_per_level.iter().enumerate() {
            out.push(format!("level{level}_nodes={n}"));
        }
        out.extend([
            format!("live_keys={}", self.live_keys),
            format!("live_pages={}", self.live_pages),
            format!("free_pages={}", self.free_pages),
            format!("leaked_pages={}", self.leaked_pages),
            format!("top_page={}", self.top_page),
            format!("access_intent_waits={}", self.access_intent_waits),
            format!("pm_overlaps={}", self.pm_overlaps),
            format!("use_after_free={}", self.use_after_free),
            format!("violations={}", self.violations.len()),
        ]);
        out
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "audit ({})", if self.quiesced { "quiesced" } else { "online" })?;
        writeln!(f, "  height {}, {} live keys", self.height, self.live_keys)?;
        for (level, n) in self.nodes_per_level.iter().enumerate().rev() {
            writeln!(f, "  level {level}: {n} nodes")?;
        }
        writeln!(
            f,
            "  pages: {} live, {} free, {} leaked, top {}",
            self.live_pages, self.free_pages, self.leaked_pages, self.top_page
        )?;
        writeln!(
            f,
            "  latch anomalies: {} AccessIntent waits, {} overlapping ParentModification pairs",
            self.access_intent_waits, self.pm_overlaps
        )?;
        writeln!(f, "violations: {}", self.violations.len())?;
        for v in &self.violations {
            writeln!(f, "  - {v}")?;
        }
        Ok(())
    }
}

struct LevelWalk {
    nodes: Vec<(PageNo, Node)>,
    complete: bool,
}

/// Checks every structural invariant reachable from the root.
///
/// With `quiesced` set the caller guarantees no concurrent mutators; pages
/// are read directly and the full set of checks runs, including page
/// conservation and parent/child agreement. Otherwise each level is walked
/// under `ReadLock` coupling and only per-level ordering is checked.
pub fn audit(tree: &BLinkTree, quiesced: bool) -> AuditReport {
    let mut report = if quiesced { audit_quiesced(tree) } else { audit_online(tree) };
    report.quiesced = quiesced;
    report.access_intent_waits = tree.latches().stats().get(LatchKind::AccessIntent).waits;
    report.pm_overlaps = overlapping_intervals(&tree.latches().parent_modification_intervals()).len() as u64;
    report.use_after_free = tree.store().stats().use_after_free;
    if report.access_intent_waits > 0 {
        report.violations.push(format!("AccessIntent blocked {} times", report.access_intent_waits));
    }
    if report.pm_overlaps > 0 {
        report.violations.push(format!("{} overlapping ParentModification grants", report.pm_overlaps));
    }
    if report.use_after_free > 0 {
        report.violations.push(format!("{} accesses to free pages", report.use_after_free));
    }
    report
}

fn audit_quiesced(tree: &BLinkTree) -> AuditReport {
    let mut report = AuditReport { height: tree.height(), top_page: tree.store().top_page(), ..Default::default() };
    let v = &mut report.violations;
    let root = match tree.read_node_unlatched(ROOT_PAGE) {
        Ok(n) => n,
        Err(e) => {
            v.push(format!("root page unreadable: {e}"));
            return report;
        }
    };
    if root.level() + 1 != report.height {
        v.push(format!("root level {} disagrees with height {}", root.level(), report.height));
    }
    let root_level = root.level();
    report.nodes_per_level = vec![0; root_level as usize + 1];
    let mut seen: HashSet<PageNo> = HashSet::new();
    let mut upper: Option<LevelWalk> = None;
    let mut start = Some(ROOT_PAGE);
    let mut all_complete = true;

    for level in (0..=root_level).rev() {
        let Some(first) = start else {
            v.push(format!("no live entry leads to level {level}"));
            all_complete = false;
            break;
        };
        let walk = walk_level(tree, level, first, &mut seen, v);
        report.nodes_per_level[level as usize] = walk.nodes.len() as u64;
        if level == 0 {
            report.live_keys = walk
                .nodes
                .iter()
                .map(|(_, n)| n.slots().filter(|s| !s.deleted && !s.key.is_empty()).count() as u64)
                .sum();
        }
        if let Some(up) = &upper {
            if up.complete && walk.complete {
                check_parent_entries(up, &walk, v);
            }
        }
        all_complete &= walk.complete;
        start = walk
            .nodes
            .iter()
            .find_map(|(_, n)| n.slots().find(|s| !s.deleted).map(|s| s.value))
            .filter(|_| level > 0);
        upper = Some(walk);
    }
    report.live_pages = seen.len() as u64;

    let free = match tree.store().free_list() {
        Ok(f) => f,
        Err(e) => {
            v.push(format!("free list unreadable: {e}"));
            return report;
        }
    };
    report.free_pages = free.len() as u64;
    for p in &free {
        if seen.contains(p) {
            v.push(format!("page {p} is both live and free"));
        }
    }
    if !all_complete {
        return report;
    }
    let free: HashSet<_> = free.into_iter().collect();
    let mut unaccounted = Vec::new();
    for p in ROOT_PAGE..=report.top_page {
        if !seen.contains(&p) && !free.contains(&p) {
            unaccounted.push(p);
        }
    }
    if tree.access_intent_enabled() {
        if !unaccounted.is_empty() {
            v.push(format!(
                "page conservation: {} pages neither live nor free (first {})",
                unaccounted.len(),
                unaccounted[0]
            ));
        }
    } else {
        for p in unaccounted {
            match tree.read_node_unlatched(p) {
                Ok(n) if n.is_deleted() => report.leaked_pages += 1,
                _ => v.push(format!("page {p} is unreachable and not a deleted node")),
            }
        }
    }
    report
}

fn walk_level(tree: &BLinkTree, level: u8, first: PageNo, seen: &mut HashSet<PageNo>, v: &mut Vec<String>) -> LevelWalk {
    let mut nodes: Vec<(PageNo, Node)> = Vec::new();
    let mut page = first;
    let mut prev_fence: Option<Vec<u8>> = None;
    loop {
        if !seen.insert(page) {
            v.push(format!("level {level}: page {page} visited twice"));
            return LevelWalk { nodes, complete: false };
        }
        if tree.store().is_free(page) {
            v.push(format!("level {level}: live chain reaches free page {page}"));
            return LevelWalk { nodes, complete: false };
        }
        let node = match tree.read_node_unlatched(page) {
            Ok(n) => n,
            Err(e) => {
                v.push(format!("level {level}: page {page}: {e}"));
                return LevelWalk { nodes, complete: false };
            }
        };
        if node.level() != level {
            v.push(format!("level {level}: page {page} has level {}", node.level()));
        }
        if node.is_deleted() {
            v.push(format!("level {level}: deleted page {page} on the live chain"));
        }
        if let Some(prev) = &prev_fence {
            if compare_keys(node.key(0), prev).is_le() {
                v.push(format!("level {level}: page {page} holds keys at or below its left neighbour's fence"));
            }
        }
        prev_fence = Some(node.fence_key().to_vec());
        let link = node.link();
        let max_fence = node.has_max_fence();
        nodes.push((page, node));
        match (link, max_fence) {
            (0, true) => return LevelWalk { nodes, complete: true },
            (0, false) => {
                v.push(format!("level {level}: rightmost page {page} lacks the maximal fence"));
                return LevelWalk { nodes, complete: true };
            }
            (_, true) => {
                v.push(format!("level {level}: page {page} has the maximal fence but links to {link}"));
                return LevelWalk { nodes, complete: false };
            }
            _ => page = link,
        }
    }
}

/// Live parent entries, read left to right, must name exactly the child
/// level's nodes in chain order, each keyed by that child's fence.
fn check_parent_entries(parents: &LevelWalk, children: &LevelWalk, v: &mut Vec<String>) {
    let entries: Vec<(&[u8], u64)> = parents
        .nodes
        .iter()
        .flat_map(|(_, n)| n.slots().filter(|s| !s.deleted).map(|s| (s.key, s.value)))
        .collect();
    let level = children.nodes.first().map_or(0, |(_, n)| n.level());
    if entries.len() != children.nodes.len() {
        v.push(format!(
            "level {}: {} live entries for {} child nodes",
            level + 1,
            entries.len(),
            children.nodes.len()
        ));
    }
    let mut reported = 0;
    for ((key, child), (page, node)) in entries.iter().zip(&children.nodes) {
        if *child != *page || *key != node.fence_key() {
            v.push(format!(
                "level {}: entry {:02x?}->{child} but child chain has page {page} with fence {:02x?}",
                level + 1,
                key,
                node.fence_key()
            ));
            reported += 1;
            if reported == MAX_REPORTED_MISMATCHES {
                break;
            }
        }
    }
}

fn audit_online(tree: &BLinkTree) -> AuditReport {
    let mut report = AuditReport { height: tree.height(), top_page: tree.store().top_page(), ..Default::default() };
    let height = report.height;
    report.nodes_per_level = vec![0; height as usize];
    let op = tree.op();
    for level in 0..height {
        let mut cur = match op.search(&[0], level, crate::tree::Access::Read) {
            Ok(c) => c,
            Err(e) => {
                report.violations.push(format!("level {level}: search failed: {e}"));
                continue;
            }
        };
        let mut prev: Option<Vec<u8>> = None;
        loop {
            if cur.node.is_deleted() {
                let to = cur.node.link();
                match op.hop_left(cur, to, LatchKind::ReadLock) {
                    Ok(c) => cur = c,
                    Err(e) => {
                        report.violations.push(format!("level {level}: {e}"));
                        break;
                    }
                }
                continue;
            }
            let fence = cur.node.fence_key().to_vec();
            if prev.as_deref().is_none_or(|p| compare_keys(&fence, p).is_gt()) {
                report.nodes_per_level[level as usize] += 1;
                if level == 0 {
                    report.live_keys +=
                        cur.node.slots().filter(|s| !s.deleted && !s.key.is_empty()).count() as u64;
                }
                prev = Some(fence);
            }
            let link = cur.node.link();
            if link == 0 {
                if !cur.node.has_max_fence() {
                    report.violations.push(format!("level {level}: rightmost page {} lacks the maximal fence", cur.page));
                }
                let _ = op.release(cur);
                break;
            }
            match op.couple(cur, link, LatchKind::ReadLock) {
                Ok(c) => cur = c,
                Err(e) => {
                    report.violations.push(format!("level {level}: {e}"));
                    break;
                }
            }
        }
    }
    report
}
