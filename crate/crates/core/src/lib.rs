//! A persistent, concurrent B-link tree whose node deletion is synchronous:
//! empty nodes are merged with their right sibling, unlinked from the parent
//! level and returned to the free list while the tree stays fully available.
//!
//! Synchronization uses five latch kinds in three independent per-page sets
//! (see [`latch`]). Searches couple a parent latch to the child through a
//! non-blocking `AccessIntent`, which is what lets a deleted page be drained
//! and reused safely.

pub mod error;
pub mod latch;
pub mod page_format;
pub mod page_store;
pub mod tree;
pub mod verifier;

/// Page number within a tree file. Page 0 is the header and doubles as the
/// null link.
pub type PageNo = u64;

pub use error::{Error, Result};
pub use latch::{is_compatible, Holder, LatchKind, LatchTable};
pub use page_format::{compare_keys, Node, PageConfig};
pub use page_store::{FileHeader, PageStore, StoreOptions};
pub use tree::{BLinkTree, TreeEvent, TreeOptions, TreeStats};
