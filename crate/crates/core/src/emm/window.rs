use std::collections::VecDeque;

// Probabilities are accumulated as fixed-point integers scaled by 2^100 so
// that the running sum never drifts, however many pushes and evictions occur.
// Any f64 in [2^-48, 1] converts exactly; smaller values lose < 2^-100.
const FIXED_SHIFT: i32 = 100;

/// FIFO of the last `k` transition probabilities, scored by their mean.
#[derive(Debug, Clone)]
pub struct ScoreWindow {
    capacity: usize,
    entries: VecDeque<u128>,
    sum: u128,
}

impl ScoreWindow {
    /// # Panics
    /// If `capacity` is zero.
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "score window capacity must be positive");
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity.min(1 << 16)),
            sum: 0,
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

    /// Pushes a probability, evicting the oldest entry when full.
    pub fn push(&mut self, prob: f64) {
        let fixed = to_fixed(prob);
        if self.entries.len() == self.capacity {
            let old = self.entries.pop_front().expect("window is full");
            self.sum -= old;
        }
        self.entries.push_back(fixed);
        self.sum += fixed;
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.sum = 0;
    }

    /// Mean of the stored probabilities; `None` while the window is empty.
    pub fn average(&self) -> Option<f64> {
        let n = self.entries.len() as u128;
        if n == 0 {
            return None;
        }
        let (q, r) = (self.sum / n, self.sum % n);
        let mean = q as f64 + r as f64 / n as f64;
        Some(mean * 2f64.powi(-FIXED_SHIFT))
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|&e| e as f64 * 2f64.powi(-FIXED_SHIFT))
    }
}

fn to_fixed(prob: f64) -> u128 {
    debug_assert!((0.0..=1.0).contains(&prob), "probability {prob} out of range");
    (prob.clamp(0.0, 1.0) * 2f64.powi(FIXED_SHIFT)) as u128
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window_of(k: usize, probs: &[f64]) -> ScoreWindow {
        let mut w = ScoreWindow::new(k);
        probs.iter().for_each(|&p| w.push(p));
        w
    }

    #[test]
    fn averages() {
        assert_eq!(window_of(4, &[0.5, 0.25]).average(), Some(0.375));
        assert_eq!(window_of(4, &[1.0]).average(), Some(1.0));
        let third = window_of(4, &[0.0, 0.0, 1.0]).average().unwrap();
        assert!((third - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(ScoreWindow::new(3).average(), None);
    }

    #[test]
    fn evicts_oldest_at_capacity() {
        let mut w = window_of(2, &[0.0, 0.5]);
        w.push(1.0);
        assert_eq!(w.len(), 2);
        assert_eq!(w.iter().collect::<Vec<_>>(), vec![0.5, 1.0]);
        assert_eq!(w.average(), Some(0.75));
    }

    #[test]
    fn repeated_probability_is_exact() {
        for p in [0.1, 0.3, 2.0 / 3.0, 0.012, 1.0 / 7.0] {
            let mut w = ScoreWindow::new(10_000);
            for _ in 0..25_000 {
                w.push(p);
            }
            assert_eq!(w.average(), Some(p));
        }
    }

    #[test]
    fn clear_empties() {
        let mut w = window_of(3, &[0.2, 0.4]);
        w.clear();
        assert!(w.is_empty());
        assert_eq!(w.average(), None);
    }
}
