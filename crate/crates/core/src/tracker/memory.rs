use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::matcher::ResponseMap;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct MemoryEntry {
    /// Context crop centered on the estimated target.
    pub crop: Tensor,
    /// Raw scores of the frame's response; the stored map is their sigmoid.
    pub response: ResponseMap,
    pub frame: usize,
    /// Windowed peak probability that admitted the entry.
    pub confidence: f64,
}

impl MemoryEntry {
    pub fn entropy(&self) -> f64 {
        response_entropy(self.response.scores())
    }
}

/// Shannon entropy of the softmax of `scores` over all positions.
pub fn response_entropy(scores: &[f64]) -> f64 {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let log_z = z.ln();
    exps.iter()
        .zip(scores)
        .filter(|(e, _)| **e > 0.0)
        .map(|(e, s)| {
            let p = e / z;
            -p * (s - max - log_z)
        })
        .sum()
}

/// Ring buffer of confident frames; evicts the oldest entry when full.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    capacity: usize,
    entries: VecDeque<MemoryEntry>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        MemoryBank {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, entry: MemoryEntry) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }

    /// Entries oldest first.
    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.iter()
    }

    pub fn get(&self, i: usize) -> Option<&MemoryEntry> {
        self.entries.get(i)
    }

    /// Indices (oldest-first positions) of the `m` lowest-entropy entries,
    /// without replacement, ties going to the newer entry.
    pub fn select(&self, m: usize) -> Result<Vec<usize>> {
        let entropies: Vec<f64> = self.entries.iter().map(MemoryEntry::entropy).collect();
        select_min_entropy(&entropies, m)
    }
}

/// Positions of the `m` smallest entropies; among equal values the later
/// position wins. Result is ordered by rank.
pub fn select_min_entropy(entropies: &[f64], m: usize) -> Result<Vec<usize>> {
    if entropies.len() < m {
        return Err(Error::MemoryUnderflow {
            have: entropies.len(),
            need: m,
        });
    }
    let mut order: Vec<usize> = (0..entropies.len()).collect();
    order.sort_by(|&a, &b| entropies[a].total_cmp(&entropies[b]).then(b.cmp(&a)));
    order.truncate(m);
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(scores: Vec<f64>, frame: usize) -> MemoryEntry {
        let n = scores.len();
        MemoryEntry {
            crop: Tensor::zeros(vec![1, 1, 3]),
            response: ResponseMap::new(1, n, scores).unwrap(),
            frame,
            confidence: 1.0,
        }
    }

    #[test]
    fn entropy_extremes() {
        let uniform = response_entropy(&[0.3; 81]);
        assert!((uniform - (81f64).ln()).abs() < 1e-12);
        let mut peaked = vec![0.0; 81];
        peaked[40] = 1e4;
        assert!(response_entropy(&peaked) < 1e-12);
    }

    #[test]
    fn ring_evicts_oldest() {
        let mut m = MemoryBank::new(3);
        for f in 0..5 {
            m.push(entry(vec![0.0, 1.0], f));
        }
        assert_eq!(m.len(), 3);
        let frames: Vec<usize> = m.entries().map(|e| e.frame).collect();
        assert_eq!(frames, vec![2, 3, 4]);
    }

    #[test]
    fn peaked_first_uniform_last() {
        let mut m = MemoryBank::new(8);
        m.push(entry(vec![0.0; 9], 0));
        m.push(entry(vec![0.0, 0.0, 0.0, 0.0, 50.0, 0.0, 0.0, 0.0, 0.0], 1));
        m.push(entry(vec![0.0, 1.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0], 2));
        assert_eq!(m.select(3).unwrap(), vec![1, 2, 0]);
        assert_eq!(m.select(1).unwrap(), vec![1]);
    }

    #[test]
    fn ties_prefer_newer_and_underflow_is_reported() {
        let e = [0.5, 0.2, 0.2, 0.2];
        assert_eq!(select_min_entropy(&e, 2).unwrap(), vec![3, 2]);
        assert!(matches!(
            select_min_entropy(&e, 5),
            Err(Error::MemoryUnderflow { have: 4, need: 5 })
        ));
    }
}
