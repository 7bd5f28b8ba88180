//! Shared fixtures for the benchmarks.

use blink_core::{BLinkTree, TreeOptions};

pub fn key(i: u64) -> Vec<u8> {
    format!("bench{i:010}").into_bytes()
}

/// In-memory tree holding keys `0..n`, inserted in a scrambled order.
pub fn populated(n: u64, opts: &TreeOptions) -> BLinkTree {
    let tree = BLinkTree::in_memory(opts).expect("in-memory tree");
    for i in 0..n {
        let id = scramble(i, n);
        tree.put(&key(id), id).expect("put");
    }
    tree
}

/// A bijection on `0..n` that visits ids out of order.
pub fn scramble(i: u64, n: u64) -> u64 {
    // 2^32 - 5 is prime, so stepping by it mod n is a permutation unless it
    // shares a factor with n
    const STEP: u64 = 4_294_967_291;
    if n.is_multiple_of(STEP) {
        i
    } else {
        (i * STEP) % n
    }
}
