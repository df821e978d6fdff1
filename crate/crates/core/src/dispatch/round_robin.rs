//! Round-robin baseline: FIFO order, rotating over workers that can hold the
//! request's prompt.

use std::collections::VecDeque;

#[derive(Debug, Clone, Default)]
pub struct RoundRobin {
    cursor: usize,
}

impl RoundRobin {
    pub fn new() -> Self {
        Self::default()
    }

    /// Picks the next worker in rotation with at least `need` free tokens.
    /// `workers` is `(id, free_tokens)` in a stable order.
    pub fn pick(&mut self, workers: &[(usize, u64)], need: u64) -> Option<usize> {
        let n = workers.len();
        if n == 0 {
            return None;
        }
        let start = self.cursor % n;
        for k in 0..n {
            let i = (start + k) % n;
            if workers[i].1 >= need {
                self.cursor = i + 1;
                return Some(workers[i].0);
            }
        }
        None
    }

    /// Assigns requests from the head of `pending` (`(id, tokens)`) until the
    /// head does not fit anywhere. Free counts in `workers` are debited.
    pub fn drain(
        &mut self,
        pending: &mut VecDeque<(u64, u64)>,
        workers: &mut [(usize, u64)],
    ) -> Vec<(u64, usize)> {
        let mut out = Vec::new();
        while let Some(&(id, need)) = pending.front() {
            let Some(w) = self.pick(workers, need) else {
                break;
            };
            let slot = workers
                .iter_mut()
                .find(|(i, _)| *i == w)
                .expect("picked from list");
            slot.1 -= need;
            pending.pop_front();
            out.push((id, w));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alternates_between_two_workers() {
        let mut rr = RoundRobin::new();
        let mut workers = vec![(0, 1000), (1, 1000)];
        let mut pending: VecDeque<(u64, u64)> = (0..4).map(|i| (i, 10)).collect();
        let got: Vec<usize> = rr
            .drain(&mut pending, &mut workers)
            .into_iter()
            .map(|(_, w)| w)
            .collect();
        assert_eq!(got, vec![0, 1, 0, 1]);
    }

    #[test]
    fn skips_full_worker_and_blocks_head_of_line() {
        let mut rr = RoundRobin::new();
        let mut workers = vec![(0, 5), (1, 100)];
        let mut pending: VecDeque<(u64, u64)> =
            [(0, 10), (1, 10), (2, 500), (3, 1)].into_iter().collect();
        let got = rr.drain(&mut pending, &mut workers);
        assert_eq!(got, vec![(0, 1), (1, 1)]);
        assert_eq!(pending.len(), 2);
    }
}
