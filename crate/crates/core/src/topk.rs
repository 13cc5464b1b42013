//! Bounded top-k selection over a stream of (id, distance) candidates.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::vector::{Neighbor, SearchResult};

#[derive(Debug, Clone, Copy)]
struct Ranked(Neighbor);

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.rank_cmp(&other.0)
    }
}

/// Keeps the `k` best candidates seen so far in a max-heap whose root is the
/// current worst survivor.
#[derive(Debug)]
pub struct TopK {
    k: usize,
    heap: BinaryHeap<Ranked>,
}

impl TopK {
    pub fn new(k: usize) -> Self {
        TopK {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    /// Distance a new candidate must beat (or tie with a lower id) to enter.
    #[inline]
    pub fn worst(&self) -> Option<&Neighbor> {
        if self.heap.len() < self.k {
            None
        } else {
            self.heap.peek().map(|r| &r.0)
        }
    }

    #[inline]
    pub fn push(&mut self, id: usize, dist: f64) {
        if self.k == 0 {
            return;
        }
        let cand = Ranked(Neighbor { id, dist });
        if self.heap.len() < self.k {
            self.heap.push(cand);
        } else if let Some(mut top) = self.heap.peek_mut() {
            if cand < *top {
                *top = cand;
            }
        }
    }

    pub fn into_result(self) -> SearchResult {
        SearchResult {
            entries: self
                .heap
                .into_sorted_vec()
                .into_iter()
                .map(|r| r.0)
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ties_resolve_to_lower_id() {
        let mut t = TopK::new(2);
        t.push(5, 1.0);
        t.push(3, 1.0);
        t.push(4, 1.0);
        t.push(9, 0.5);
        assert_eq!(t.into_result().ids(), vec![9, 3]);
    }

    #[test]
    fn short_stream_returns_everything() {
        let mut t = TopK::new(10);
        t.push(1, 2.0);
        t.push(0, 3.0);
        assert_eq!(t.into_result().ids(), vec![1, 0]);
    }

    proptest! {
        #[test]
        fn matches_full_sort(dists in proptest::collection::vec(0u8..20, 0..200), k in 1usize..50) {
            let mut t = TopK::new(k);
            for (i, &d) in dists.iter().enumerate() {
                t.push(i, d as f64);
            }
            let mut all: Vec<(u8, usize)> = dists.iter().copied().zip(0..).collect();
            all.sort();
            let want: Vec<usize> = all.into_iter().take(k).map(|(_, i)| i).collect();
            prop_assert_eq!(t.into_result().ids(), want);
        }
    }
}
