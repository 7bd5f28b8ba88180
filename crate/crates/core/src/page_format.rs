//! In-page layout of a tree node and the single-node manipulations on it.
//!
//! A node occupies exactly one page of `2^page_bits` bytes:
//!
//! ```text
//! offset  size  field
//! 0       1     level (0 = leaf)
//! 1       1     flags (bit 0 = node deleted)
//! 2       2     reserved, zero
//! 4       4     count        (occupied slots, fence included)
//! 8       4     active       (slots whose key-deleted bit is clear)
//! 12      4     free_offset  (start of the key heap)
//! 16      8     link         (right sibling, or left node once deleted)
//! 24      16*n  slot table
//! ...           free gap
//! free_offset   key heap, growing down from the page end
//! ```
//!
//! Each slot is `key_offset: u32`, `flags: u8` (bit 0 = key deleted), three
//! reserved bytes and `value: u64`. A key record in the heap is a length byte
//! followed by the key bytes. A zero-length record encodes the maximal fence
//! carried by the rightmost node of each level; user keys are never empty so
//! nothing else can collide with it. All integers are little-endian.

use std::cmp::Ordering;

use thiserror::Error;

/// Smallest and largest supported `page_bits`.
pub const MIN_PAGE_BITS: u8 = 9;
pub const MAX_PAGE_BITS: u8 = 20;

pub const HEADER_SIZE: usize = 24;
pub const SLOT_SIZE: usize = 16;
pub const MAX_KEY_LEN: usize = 255;

/// Key bytes of the synthetic upper fence of a rightmost node.
pub const MAX_FENCE: &[u8] = &[];

const NODE_DELETED: u8 = 0x01;
const KEY_DELETED: u8 = 0x01;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("page_bits {0} outside [9, 20]")]
    PageBits(u8),
    #[error("invalid key of length {len} (allowed 1..={max})")]
    InvalidKey { len: usize, max: usize },
    #[error("slot {0} already deleted")]
    AlreadyDeleted(usize),
    #[error("slot {0} out of range")]
    SlotOutOfRange(usize),
    #[error("key lies beyond the node's upper fence")]
    BeyondFence,
    #[error("node has too few slots to split")]
    TooFewToSplit,
    #[error("corrupt page: {0}")]
    Corrupt(String),
}

/// Node size configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PageConfig {
    page_bits: u8,
}

impl PageConfig {
    pub fn new(page_bits: u8) -> Result<Self, FormatError> {
        if !(MIN_PAGE_BITS..=MAX_PAGE_BITS).contains(&page_bits) {
            return Err(FormatError::PageBits(page_bits));
        }
        Ok(Self { page_bits })
    }

    pub fn page_bits(&self) -> u8 {
        self.page_bits
    }

    pub fn page_size(&self) -> usize {
        1 << self.page_bits
    }

    /// Longest key this page size accepts. Four maximal entries must fit in
    /// one node: splitting then always makes room and leaves both halves with
    /// at least two entries, which keeps the fan-out (and height) sane.
    pub fn max_key_len(&self) -> usize {
        let per_entry = (self.page_size() - HEADER_SIZE) / 4;
        (per_entry - SLOT_SIZE - 1).min(MAX_KEY_LEN)
    }

    pub fn validate_key(&self, key: &[u8]) -> Result<(), FormatError> {
        let max = self.max_key_len();
        if key.is_empty() || key.len() > max {
            return Err(FormatError::InvalidKey { len: key.len(), max });
        }
        Ok(())
    }
}

impl Default for PageConfig {
    fn default() -> Self {
        Self { page_bits: 12 }
    }
}

/// Total order on stored keys: unsigned lexicographic, shorter prefix first,
/// with the empty key acting as the maximal fence.
pub fn compare_keys(a: &[u8], b: &[u8]) -> Ordering {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => Ordering::Equal,
        (true, false) => Ordering::Greater,
        (false, true) => Ordering::Less,
        (false, false) => a.cmp(b),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    Inserted,
    Updated,
    NoRoom,
}

/// Borrowed view of one slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotRef<'a> {
    pub key: &'a [u8],
    pub value: u64,
    pub deleted: bool,
}

/// An owned node image, always exactly one page long.
#[derive(Clone, PartialEq, Eq)]
pub struct Node {
    buf: Vec<u8>,
}

impl std::fmt::Debug for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Node")
            .field("level", &self.level())
            .field("deleted", &self.is_deleted())
            .field("count", &self.count())
            .field("active", &self.active())
            .field("link", &self.link())
            .finish()
    }
}

fn read_u32(buf: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(buf[at..at + 4].try_into().unwrap())
}

fn read_u64(buf: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(buf[at..at + 8].try_into().unwrap())
}

fn write_u32(buf: &mut [u8], at: usize, v: u32) {
    buf[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

fn write_u64(buf: &mut [u8], at: usize, v: u64) {
    buf[at..at + 8].copy_from_slice(&v.to_le_bytes());
}

impl Node {
    /// A node holding only its fence entry.
    pub fn with_fence(cfg: PageConfig, level: u8, fence: &[u8], value: u64, deleted: bool) -> Self {
        Self::from_entries(cfg, level, 0, [(fence, value, deleted)])
    }

    /// The initial root: an empty leaf with the maximal fence, marked deleted
    /// so it never reads as data.
    pub fn empty_leaf(cfg: PageConfig) -> Self {
        Self::with_fence(cfg, 0, MAX_FENCE, 0, true)
    }

    /// Builds a node from entries already in ascending key order; the last
    /// entry becomes the fence.
    pub fn from_entries<'k, I>(cfg: PageConfig, level: u8, link: u64, entries: I) -> Self
    where
        I: IntoIterator<Item = (&'k [u8], u64, bool)>,
    {
        let mut node = Node { buf: vec![0; cfg.page_size()] };
        node.buf[0] = level;
        node.set_link(link);
        node.rebuild(entries.into_iter().map(|(k, v, d)| (k.to_vec(), v, d)).collect());
        node
    }

    /// Validates and wraps a page image.
    pub fn from_bytes(bytes: &[u8], cfg: PageConfig) -> Result<Self, FormatError> {
        let corrupt = |msg: String| Err(FormatError::Corrupt(msg));
        let size = cfg.page_size();
        if bytes.len() != size {
            return corrupt(format!("page length {} != {}", bytes.len(), size));
        }
        if bytes[1] & !NODE_DELETED != 0 || bytes[2] != 0 || bytes[3] != 0 {
            return corrupt("reserved header bits set".into());
        }
        let count = read_u32(bytes, 4) as usize;
        let active = read_u32(bytes, 8) as usize;
        let free = read_u32(bytes, 12) as usize;
        if count == 0 {
            return corrupt("count is zero; the fence slot is missing".into());
        }
        let table_end = count
            .checked_mul(SLOT_SIZE)
            .and_then(|n| n.checked_add(HEADER_SIZE))
            .filter(|&end| end <= size);
        let Some(table_end) = table_end else {
            return corrupt(format!("count {count} overflows the page"));
        };
        if free < table_end || free > size {
            return corrupt(format!("free_offset {free} outside [{table_end}, {size}]"));
        }
        let node = Node { buf: bytes.to_vec() };
        let mut live = 0;
        let mut prev: Option<&[u8]> = None;
        for i in 0..count {
            let at = HEADER_SIZE + i * SLOT_SIZE;
            let off = read_u32(bytes, at) as usize;
            if off < free || off >= size {
                return corrupt(format!("slot {i} key offset {off} outside the key heap"));
            }
            let len = bytes[off] as usize;
            if off + 1 + len > size {
                return corrupt(format!("slot {i} key runs past the page end"));
            }
            if len == 0 && i + 1 != count {
                return corrupt(format!("maximal fence at non-final slot {i}"));
            }
            if bytes[at + 4] & !KEY_DELETED != 0 {
                return corrupt(format!("slot {i} has unknown flag bits"));
            }
            if bytes[at + 4] & KEY_DELETED == 0 {
                live += 1;
            }
            let key = &bytes[off + 1..off + 1 + len];
            if let Some(p) = prev {
                if compare_keys(p, key) != Ordering::Less {
                    return corrupt(format!("slot {i} key out of order"));
                }
            }
            prev = Some(key);
        }
        if live != active {
            return corrupt(format!("active {active} but {live} live slots"));
        }
        Ok(node)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.buf
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn page_size(&self) -> usize {
        self.buf.len()
    }

    pub fn level(&self) -> u8 {
        self.buf[0]
    }

    pub fn is_leaf(&self) -> bool {
        self.level() == 0
    }

    pub fn is_deleted(&self) -> bool {
        self.buf[1] & NODE_DELETED != 0
    }

    pub fn set_deleted(&mut self, deleted: bool) {
        if deleted {
            self.buf[1] |= NODE_DELETED;
        } else {
            self.buf[1] &= !NODE_DELETED;
        }
    }

    pub fn count(&self) -> usize {
        read_u32(&self.buf, 4) as usize
    }

    pub fn active(&self) -> usize {
        read_u32(&self.buf, 8) as usize
    }

    /// No live slots remain, fence included.
    pub fn is_empty(&self) -> bool {
        self.active() == 0
    }

    pub fn free_offset(&self) -> usize {
        read_u32(&self.buf, 12) as usize
    }

    pub fn link(&self) -> u64 {
        read_u64(&self.buf, 16)
    }

    pub fn set_link(&mut self, link: u64) {
        write_u64(&mut self.buf, 16, link);
    }

    /// Bytes available between the slot table and the key heap.
    pub fn free_gap(&self) -> usize {
        self.free_offset() - (HEADER_SIZE + self.count() * SLOT_SIZE)
    }

    fn slot_at(i: usize) -> usize {
        HEADER_SIZE + i * SLOT_SIZE
    }

    pub fn key(&self, slot: usize) -> &[u8] {
        let off = read_u32(&self.buf, Self::slot_at(slot)) as usize;
        let len = self.buf[off] as usize;
        &self.buf[off + 1..off + 1 + len]
    }

    pub fn value(&self, slot: usize) -> u64 {
        read_u64(&self.buf, Self::slot_at(slot) + 8)
    }

    pub fn set_value(&mut self, slot: usize, value: u64) {
        write_u64(&mut self.buf, Self::slot_at(slot) + 8, value);
    }

    pub fn is_key_deleted(&self, slot: usize) -> bool {
        self.buf[Self::slot_at(slot) + 4] & KEY_DELETED != 0
    }

    pub fn slot(&self, slot: usize) -> SlotRef<'_> {
        SlotRef { key: self.key(slot), value: self.value(slot), deleted: self.is_key_deleted(slot) }
    }

    pub fn slots(&self) -> impl Iterator<Item = SlotRef<'_>> + '_ {
        (0..self.count()).map(move |i| self.slot(i))
    }

    pub fn fence_slot(&self) -> usize {
        self.count() - 1
    }

    pub fn fence_key(&self) -> &[u8] {
        self.key(self.fence_slot())
    }

    /// True when this node carries the maximal fence, i.e. it is the
    /// rightmost node of its level.
    pub fn has_max_fence(&self) -> bool {
        self.fence_key().is_empty()
    }

    /// Smallest slot whose key is >= `key`, or `count()` when `key` lies
    /// beyond the fence.
    pub fn find_slot(&self, key: &[u8]) -> usize {
        let (mut lo, mut hi) = (0, self.count());
        while lo < hi {
            let mid = (lo + hi) / 2;
            if compare_keys(self.key(mid), key) == Ordering::Less {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Slot holding exactly `key`, deleted or not.
    pub fn find_exact(&self, key: &[u8]) -> Option<usize> {
        let s = self.find_slot(key);
        (s < self.count() && self.key(s) == key).then_some(s)
    }

    /// Adds `key` or updates it in place. The key must not lie beyond the
    /// fence.
    pub fn insert_slot(&mut self, key: &[u8], value: u64) -> Result<InsertOutcome, FormatError> {
        if key.is_empty() || key.len() > MAX_KEY_LEN {
            return Err(FormatError::InvalidKey { len: key.len(), max: MAX_KEY_LEN });
        }
        let count = self.count();
        let s = self.find_slot(key);
        if s == count {
            return Err(FormatError::BeyondFence);
        }
        if self.key(s) == key {
            self.set_value(s, value);
            if self.is_key_deleted(s) {
                self.buf[Self::slot_at(s) + 4] &= !KEY_DELETED;
                self.set_active(self.active() + 1);
            }
            return Ok(InsertOutcome::Updated);
        }
        let need = SLOT_SIZE + 1 + key.len();
        if need > self.free_gap() {
            return Ok(InsertOutcome::NoRoom);
        }
        let off = self.free_offset() - 1 - key.len();
        self.buf[off] = key.len() as u8;
        self.buf[off + 1..off + 1 + key.len()].copy_from_slice(key);
        self.set_free_offset(off);
        let from = Self::slot_at(s);
        self.buf.copy_within(from..Self::slot_at(count), from + SLOT_SIZE);
        self.write_slot(s, off, false, value);
        self.set_count(count + 1);
        self.set_active(self.active() + 1);
        Ok(InsertOutcome::Inserted)
    }

    /// Sets the key-deleted bit; the key bytes stay resident.
    pub fn mark_key_deleted(&mut self, slot: usize) -> Result<(), FormatError> {
        if slot >= self.count() {
            return Err(FormatError::SlotOutOfRange(slot));
        }
        if self.is_key_deleted(slot) {
            return Err(FormatError::AlreadyDeleted(slot));
        }
        self.buf[Self::slot_at(slot) + 4] |= KEY_DELETED;
        self.set_active(self.active() - 1);
        Ok(())
    }

    /// Drops deleted slots other than the fence and compacts the key heap.
    /// Returns the number of bytes added to the free gap.
    pub fn cleanup(&mut self) -> usize {
        let fence = self.fence_slot();
        let has_garbage = (0..fence).any(|i| self.is_key_deleted(i));
        let before = self.free_gap();
        if !has_garbage {
            return 0;
        }
        let keep: Vec<_> = (0..self.count())
            .filter(|&i| i == fence || !self.is_key_deleted(i))
            .map(|i| (self.key(i).to_vec(), self.value(i), self.is_key_deleted(i)))
            .collect();
        self.rebuild(keep);
        self.free_gap() - before
    }

    /// Moves the upper half of the slots into a new node and returns it.
    /// `self` keeps the lower half, its highest retained key becoming the new
    /// fence. The returned node inherits `self`'s link; the caller relinks
    /// `self` once the new node has a page.
    pub fn split_off(&mut self) -> Result<Node, FormatError> {
        let count = self.count();
        if count < 2 {
            return Err(FormatError::TooFewToSplit);
        }
        let mid = count / 2;
        let entries: Vec<_> = (0..count)
            .map(|i| (self.key(i).to_vec(), self.value(i), self.is_key_deleted(i)))
            .collect();
        let mut right = Node { buf: vec![0; self.page_size()] };
        right.buf[0] = self.level();
        right.set_link(self.link());
        right.rebuild(entries[mid..].to_vec());
        self.rebuild(entries[..mid].to_vec());
        Ok(right)
    }

    /// Replaces this node's contents (slots, fence and link) with `other`'s.
    /// The result is never marked deleted.
    pub fn copy_contents_from(&mut self, other: &Node) {
        self.buf.copy_from_slice(&other.buf);
        self.set_deleted(false);
    }

    fn set_count(&mut self, v: usize) {
        write_u32(&mut self.buf, 4, v as u32);
    }

    fn set_active(&mut self, v: usize) {
        write_u32(&mut self.buf, 8, v as u32);
    }

    fn set_free_offset(&mut self, v: usize) {
        write_u32(&mut self.buf, 12, v as u32);
    }

    fn write_slot(&mut self, slot: usize, key_off: usize, deleted: bool, value: u64) {
        let at = Self::slot_at(slot);
        write_u32(&mut self.buf, at, key_off as u32);
        self.buf[at + 4..at + 8].fill(0);
        if deleted {
            self.buf[at + 4] = KEY_DELETED;
        }
        write_u64(&mut self.buf, at + 8, value);
    }

    /// Rewrites slot table and heap from scratch, leaving the gap zeroed.
    fn rebuild(&mut self, entries: Vec<(Vec<u8>, u64, bool)>) {
        let size = self.buf.len();
        self.buf[HEADER_SIZE..].fill(0);
        let mut off = size;
        let mut active = 0;
        for (i, (key, value, deleted)) in entries.iter().enumerate() {
            off -= 1 + key.len();
            self.buf[off] = key.len() as u8;
            self.buf[off + 1..off + 1 + key.len()].copy_from_slice(key);
            self.write_slot(i, off, *deleted, *value);
            if !deleted {
                active += 1;
            }
        }
        self.set_count(entries.len());
        self.set_active(active);
        self.set_free_offset(off);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> PageConfig {
        PageConfig::new(12).unwrap()
    }

    fn node_dmt() -> Node {
        Node::from_entries(cfg(), 0, 0, [(&b"d"[..], 1, false), (b"m", 2, false), (b"t", 3, false)])
    }

    #[test]
    fn compare_keys_basics() {
        assert_eq!(compare_keys(b"abc", b"abc"), Ordering::Equal);
        assert_eq!(compare_keys(b"ab", b"abc"), Ordering::Less);
        assert_eq!(compare_keys(&[0x00], &[0xff]), Ordering::Less);
        assert_eq!(compare_keys(&[0xff; 255], MAX_FENCE), Ordering::Less);
    }

    #[test]
    fn page_bits_bounds() {
        assert_eq!(PageConfig::new(8), Err(FormatError::PageBits(8)));
        assert_eq!(PageConfig::new(21), Err(FormatError::PageBits(21)));
        assert!(PageConfig::new(9).is_ok());
        assert!(PageConfig::new(20).is_ok());
        assert_eq!(PageConfig::new(11).unwrap().max_key_len(), 255);
        assert_eq!(PageConfig::new(10).unwrap().max_key_len(), 233);
        assert_eq!(PageConfig::new(9).unwrap().max_key_len(), 105);
    }

    #[test]
    fn find_slot_cases() {
        let n = node_dmt();
        assert_eq!(n.find_slot(b"m"), 1);
        assert_eq!(n.find_slot(b"a"), 0);
        // linear scan oracle
        for probe in [&b"a"[..], b"d", b"e", b"m", b"n", b"t", b"z", b"zz"] {
            let expect = (0..n.count()).find(|&i| probe <= n.key(i)).unwrap_or(n.count());
            assert_eq!(n.find_slot(probe), expect, "{probe:?}");
        }
        assert_eq!(n.find_slot(b"z"), 3);
    }

    #[test]
    fn insert_then_update() {
        let mut n = Node::empty_leaf(cfg());
        assert_eq!(n.insert_slot(b"k", 7).unwrap(), InsertOutcome::Inserted);
        assert_eq!(n.count(), 2);
        assert_eq!(n.key(0), b"k");
        assert_eq!(n.insert_slot(b"k", 9).unwrap(), InsertOutcome::Updated);
        assert_eq!(n.value(0), 9);
        assert_eq!(n.count(), 2);
        assert_eq!(n.insert_slot(&[1; 256], 0), Err(FormatError::InvalidKey { len: 256, max: 255 }));
    }

    #[test]
    fn update_revives_deleted_slot() {
        let mut n = node_dmt();
        n.mark_key_deleted(1).unwrap();
        assert_eq!(n.insert_slot(b"m", 5).unwrap(), InsertOutcome::Updated);
        assert!(!n.is_key_deleted(1));
        assert_eq!(n.active(), 3);
    }

    #[test]
    fn insert_beyond_fence_rejected() {
        let mut n = node_dmt();
        assert_eq!(n.insert_slot(b"z", 1), Err(FormatError::BeyondFence));
    }

    #[test]
    fn no_room_leaves_node_untouched() {
        let mut n = Node::empty_leaf(PageConfig::new(9).unwrap());
        let mut i = 0u32;
        loop {
            let before = n.clone();
            let key = format!("key{i:06}");
            match n.insert_slot(key.as_bytes(), i as u64).unwrap() {
                InsertOutcome::Inserted => i += 1,
                InsertOutcome::NoRoom => {
                    assert_eq!(n.as_bytes(), before.as_bytes());
                    break;
                }
                InsertOutcome::Updated => unreachable!(),
            }
        }
        // 24-byte header, 16-byte fence slot plus one heap byte, 26 bytes per key
        assert_eq!(i as usize, (512 - 24 - 17) / 26);
        assert!(n.free_gap() < 26);
    }

    #[test]
    fn mark_deleted_cases() {
        let mut n = node_dmt();
        n.mark_key_deleted(1).unwrap();
        assert_eq!((n.active(), n.count()), (2, 3));
        n.mark_key_deleted(2).unwrap();
        assert_eq!(n.fence_key(), b"t");
        assert_eq!(n.mark_key_deleted(2), Err(FormatError::AlreadyDeleted(2)));
        assert_eq!(n.mark_key_deleted(9), Err(FormatError::SlotOutOfRange(9)));
    }

    #[test]
    fn cleanup_noop() {
        let mut n = node_dmt();
        let before = n.clone();
        assert_eq!(n.cleanup(), 0);
        assert_eq!(n, before);
    }

    #[test]
    fn cleanup_reclaims_exact_bytes() {
        let entries: Vec<(Vec<u8>, u64, bool)> = vec![
            (b"aaaa".to_vec(), 1, true),
            (b"bb".to_vec(), 2, false),
            (b"ccccc".to_vec(), 3, true),
            (b"dddddd".to_vec(), 4, true),
            (b"zz".to_vec(), 5, false),
        ];
        let mut n = Node::from_entries(cfg(), 0, 0, entries.iter().map(|(k, v, d)| (&k[..], *v, *d)));
        let gap = n.free_gap();
        // keys 4+5+6 plus their length bytes, plus three slot entries
        assert_eq!(n.cleanup(), 15 + 3 + 3 * SLOT_SIZE);
        assert_eq!(n.free_gap(), gap + 66);
        let keys: Vec<_> = n.slots().map(|s| s.key.to_vec()).collect();
        assert_eq!(keys, vec![b"bb".to_vec(), b"zz".to_vec()]);
    }

    #[test]
    fn cleanup_keeps_deleted_fence() {
        let mut n = node_dmt();
        n.mark_key_deleted(2).unwrap();
        assert_eq!(n.cleanup(), 0);
        assert_eq!(n.count(), 3);
        assert_eq!(n.fence_key(), b"t");
        assert!(n.is_key_deleted(2));
    }

    #[test]
    fn split_halves() {
        let entries: Vec<Vec<u8>> = (0..10).map(|i| format!("k{i}").into_bytes()).collect();
        let mut n = Node::from_entries(cfg(), 0, 77, entries.iter().map(|k| (&k[..], 1, false)));
        let right = n.split_off().unwrap();
        assert_eq!(n.count(), 5);
        assert_eq!(right.count(), 5);
        assert_eq!(n.fence_key(), b"k4");
        assert_eq!(right.fence_key(), b"k9");
        assert_eq!(right.link(), 77);
        for (i, s) in n.slots().chain(right.slots()).enumerate() {
            assert_eq!(s.key, &entries[i][..]);
        }
    }

    #[test]
    fn zero_page_is_corrupt() {
        let err = Node::from_bytes(&vec![0; 4096], cfg()).unwrap_err();
        assert!(matches!(err, FormatError::Corrupt(_)));
    }

    #[test]
    fn wrong_length_is_corrupt() {
        assert!(Node::from_bytes(&[0; 512], cfg()).is_err());
    }

    #[test]
    fn empty_leaf_round_trips() {
        let n = Node::empty_leaf(cfg());
        assert_eq!(n.count(), 1);
        assert!(n.has_max_fence());
        let back = Node::from_bytes(n.as_bytes(), cfg()).unwrap();
        assert_eq!(back, n);
    }

    #[derive(Debug, Clone)]
    enum Step {
        Insert(Vec<u8>, u64),
        Delete(usize),
        Cleanup,
    }

    fn step() -> impl Strategy<Value = Step> {
        prop_oneof![
            4 => (proptest::collection::vec(any::<u8>(), 1..24), any::<u64>()).prop_map(|(k, v)| Step::Insert(k, v)),
            2 => any::<usize>().prop_map(Step::Delete),
            1 => Just(Step::Cleanup),
        ]
    }

    proptest! {
        #[test]
        fn random_nodes_round_trip(keys in proptest::collection::btree_set(proptest::collection::vec(any::<u8>(), 1..40), 100)) {
            let mut n = Node::empty_leaf(cfg());
            for (i, k) in keys.iter().enumerate() {
                prop_assert_ne!(n.insert_slot(k, i as u64).unwrap(), InsertOutcome::NoRoom);
            }
            let back = Node::from_bytes(n.as_bytes(), cfg()).unwrap();
            prop_assert_eq!(&back, &n);
            prop_assert_eq!(back.as_bytes(), n.as_bytes());
        }

        #[test]
        fn mutations_preserve_invariants(steps in proptest::collection::vec(step(), 1..200)) {
            let mut n = Node::empty_leaf(PageConfig::new(10).unwrap());
            for s in steps {
                let live_before: Vec<Vec<u8>> =
                    n.slots().filter(|s| !s.deleted).map(|s| s.key.to_vec()).collect();
                let fence_before = n.fence_key().to_vec();
                match s {
                    Step::Insert(k, v) => {
                        if n.insert_slot(&k, v).unwrap() != InsertOutcome::NoRoom {
                            let at = n.find_slot(&k);
                            prop_assert_eq!(n.key(at), &k[..]);
                            prop_assert_eq!(n.value(at), v);
                        }
                    }
                    Step::Delete(i) => {
                        let i = i % n.count();
                        let _ = n.mark_key_deleted(i);
                    }
                    Step::Cleanup => {
                        n.cleanup();
                        let live_after: Vec<Vec<u8>> =
                            n.slots().filter(|s| !s.deleted).map(|s| s.key.to_vec()).collect();
                        prop_assert_eq!(live_after, live_before);
                        prop_assert_eq!(n.fence_key(), &fence_before[..]);
                    }
                }
                prop_assert!(HEADER_SIZE + n.count() * SLOT_SIZE <= n.free_offset());
                let back = Node::from_bytes(n.as_bytes(), PageConfig::new(10).unwrap());
                prop_assert!(back.is_ok(), "{:?}", back);
            }
        }
    }
}
