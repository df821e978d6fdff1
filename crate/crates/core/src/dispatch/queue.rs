//! Ordered queues used by the dispatcher and migrator.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};

/// `f64` with a total order, for use as a map key.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrdF64(pub f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct SloKey {
    tpot: OrdF64,
    time: OrdF64,
    id: u64,
}

/// Requests ordered by `(tpot, time, id)`, tightest TPOT first.
///
/// The dispatcher keys on arrival time, the migrator on first-token time.
#[derive(Debug, Clone, Default)]
pub struct SloQueue {
    order: BTreeSet<SloKey>,
    keys: HashMap<u64, SloKey>,
}

/// Pending requests awaiting prefill dispatch.
pub type RequestQueue = SloQueue;
/// Prefilled requests awaiting a decode worker.
pub type MigrationQueue = SloQueue;

impl SloQueue {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns `false` if `id` is already queued.
    pub fn push(&mut self, id: u64, tpot: f64, time: f64) -> bool {
        if self.keys.contains_key(&id) {
            return false;
        }
        let key = SloKey {
            tpot: OrdF64(tpot),
            time: OrdF64(time),
            id,
        };
        self.order.insert(key);
        self.keys.insert(id, key);
        true
    }

    pub fn remove(&mut self, id: u64) -> bool {
        match self.keys.remove(&id) {
            Some(key) => self.order.remove(&key),
            None => false,
        }
    }

    pub fn pop(&mut self) -> Option<u64> {
        let key = self.order.pop_first()?;
        self.keys.remove(&key.id);
        Some(key.id)
    }

    pub fn contains(&self, id: u64) -> bool {
        self.keys.contains_key(&id)
    }

    /// Ids in dispatch order.
    pub fn iter(&self) -> impl Iterator<Item = u64> + '_ {
        self.order.iter().map(|k| k.id)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Workers ordered by maturity time, ties broken by id.
#[derive(Debug, Clone, Default)]
pub struct WorkerQueue {
    order: BTreeSet<(OrdF64, usize)>,
    maturity: HashMap<usize, f64>,
}

impl WorkerQueue {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or re-keys a worker.
    pub fn push(&mut self, worker: usize, maturity: f64) {
        if let Some(old) = self.maturity.insert(worker, maturity) {
            self.order.remove(&(OrdF64(old), worker));
        }
        self.order.insert((OrdF64(maturity), worker));
    }

    pub fn pop(&mut self) -> Option<(usize, f64)> {
        let (m, w) = self.order.pop_first()?;
        self.maturity.remove(&w);
        Some((w, m.0))
    }

    pub fn peek(&self) -> Option<(usize, f64)> {
        self.order.first().map(|&(m, w)| (w, m.0))
    }

    pub fn remove(&mut self, worker: usize) -> bool {
        match self.maturity.remove(&worker) {
            Some(m) => self.order.remove(&(OrdF64(m), worker)),
            None => false,
        }
    }

    pub fn maturity(&self, worker: usize) -> Option<f64> {
        self.maturity.get(&worker).copied()
    }

    pub fn contains(&self, worker: usize) -> bool {
        self.maturity.contains_key(&worker)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn workers(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.order.iter().map(|&(m, w)| (w, m.0))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn tpot_then_time_then_id() {
        let mut q = SloQueue::new();
        q.push(1, 0.9, 0.0);
        q.push(2, 0.5, 3.0);
        q.push(3, 0.5, 1.0);
        q.push(4, 0.5, 1.0);
        assert!(!q.push(4, 0.1, 0.0));
        assert_eq!(q.iter().collect::<Vec<_>>(), vec![3, 4, 2, 1]);
        assert!(q.remove(4));
        assert_eq!(q.pop(), Some(3));
        assert_eq!(q.len(), 2);
    }

    #[test]
    fn worker_queue_rekeys() {
        let mut q = WorkerQueue::new();
        q.push(0, 2.0);
        q.push(1, 1.0);
        q.push(0, 0.5);
        assert_eq!(q.len(), 2);
        assert_eq!(q.pop(), Some((0, 0.5)));
        assert_eq!(q.peek(), Some((1, 1.0)));
    }

    proptest! {
        #[test]
        fn pop_order_respects_key(entries in proptest::collection::vec((0u8..4, 0u16..50), 1..64)) {
            let mut q = SloQueue::new();
            for (i, (tpot, t)) in entries.iter().enumerate() {
                q.push(i as u64, f64::from(*tpot) / 10.0, f64::from(*t));
            }
            let mut last: Option<(u8, u16, u64)> = None;
            while let Some(id) = q.pop() {
                let (tpot, t) = entries[id as usize];
                let key = (tpot, t, id);
                if let Some(prev) = last {
                    prop_assert!(prev < key);
                }
                last = Some(key);
            }
        }

        #[test]
        fn argmin_invariant_under_positive_rescale(
            mats in proptest::collection::vec(0.0..100.0f64, 1..16),
            scale in 0.01..100.0f64,
        ) {
            let mut a = WorkerQueue::new();
            let mut b = WorkerQueue::new();
            for (w, m) in mats.iter().enumerate() {
                a.push(w, *m);
                b.push(w, *m * scale);
            }
            prop_assert_eq!(a.peek().map(|p| p.0), b.peek().map(|p| p.0));
            let min = mats.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert_eq!(a.peek().unwrap().1, min);
        }
    }
}
