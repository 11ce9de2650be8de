//! Work-efficient (Blelloch) prefix scan over an associative operator.
//!
//! `op(earlier, later)` combines two adjacent segments; it need not be
//! commutative. Each tree level updates disjoint pairs, so a level runs
//! data-parallel while the combination order stays fixed by the tree. Results
//! do not depend on the worker count.

use crate::parallel;

/// Inclusive prefixes: `out[i] = items[0] ⊕ … ⊕ items[i]`.
pub fn inclusive_scan<T, F>(items: &[T], identity: &T, op: F) -> Vec<T>
where
    T: Clone + Send + Sync,
    F: Fn(&T, &T) -> T + Sync + Send,
{
    let exclusive = exclusive_scan(items, identity, &op);
    let pairs: Vec<(&T, &T)> = exclusive.iter().zip(items).collect();
    parallel::map_collect(&pairs, |(e, x)| op(e, x))
}

/// Exclusive prefixes: `out[0] = identity`, `out[i] = items[0] ⊕ … ⊕ items[i-1]`.
pub fn exclusive_scan<T, F>(items: &[T], identity: &T, op: F) -> Vec<T>
where
    T: Clone + Send + Sync,
    F: Fn(&T, &T) -> T + Sync + Send,
{
    let n = items.len();
    if n == 0 {
        return Vec::new();
    }
    let size = n.next_power_of_two();
    let mut a: Vec<T> = items.to_vec();
    a.resize(size, identity.clone());

    // up-sweep: the last slot of each block of `stride` holds the block total
    let mut stride = 2;
    while stride <= size {
        parallel::for_each_chunk_mut(&mut a, stride, |blk| {
            let half = blk.len() / 2;
            blk[blk.len() - 1] = op(&blk[half - 1], &blk[blk.len() - 1]);
        });
        stride *= 2;
    }

    // down-sweep: push exclusive prefixes back down the tree
    a[size - 1] = identity.clone();
    let mut stride = size;
    while stride >= 2 {
        parallel::for_each_chunk_mut(&mut a, stride, |blk| {
            let (l, r) = (blk.len() / 2 - 1, blk.len() - 1);
            let left_total = blk[l].clone();
            blk[l] = blk[r].clone();
            blk[r] = op(&blk[r], &left_total);
        });
        stride /= 2;
    }
    a.truncate(n);
    a
}
