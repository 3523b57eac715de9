use std::collections::VecDeque;

use rand::Rng;

/// Fixed-capacity FIFO; pushing into a full buffer evicts the oldest item.
#[derive(Clone, Debug)]
pub struct RingBuffer<T> {
    capacity: usize,
    items: VecDeque<T>,
}

impl<T> RingBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "ring buffer capacity must be positive");
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Returns the evicted item, if any.
    pub fn push(&mut self, item: T) -> Option<T> {
        let evicted = if self.items.len() == self.capacity {
            self.items.pop_front()
        } else {
            None
        };
        self.items.push_back(item);
        evicted
    }

    /// Item `i`, oldest first.
    pub fn get(&self, i: usize) -> Option<&T> {
        self.items.get(i)
    }

    pub fn newest(&self) -> Option<&T> {
        self.items.back()
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    /// `n` distinct items drawn uniformly (without replacement within the draw).
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<&T> {
        let n = n.min(self.items.len());
        rand::seq::index::sample(rng, self.items.len(), n)
            .into_iter()
            .map(|i| &self.items[i])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn evicts_oldest_first() {
        let mut b = RingBuffer::new(3);
        assert_eq!(b.push(1), None);
        b.push(2);
        b.push(3);
        assert_eq!(b.push(4), Some(1));
        assert_eq!(b.push(5), Some(2));
        assert_eq!(b.iter().copied().collect::<Vec<_>>(), vec![3, 4, 5]);
        assert_eq!(b.newest(), Some(&5));
    }

    #[test]
    fn sample_is_distinct_and_deterministic() {
        let mut b = RingBuffer::new(256);
        for i in 0..100 {
            b.push(i);
        }
        let s1: Vec<i32> = b.sample(32, &mut ChaCha8Rng::seed_from_u64(3)).into_iter().copied().collect();
        let s2: Vec<i32> = b.sample(32, &mut ChaCha8Rng::seed_from_u64(3)).into_iter().copied().collect();
        assert_eq!(s1, s2);
        let mut u = s1.clone();
        u.sort();
        u.dedup();
        assert_eq!(u.len(), 32);
    }

    proptest! {
        #[test]
        fn never_exceeds_capacity(cap in 1usize..40, pushes in 0usize..200) {
            let mut b = RingBuffer::new(cap);
            for i in 0..pushes {
                b.push(i);
                prop_assert!(b.len() <= cap);
            }
            // The survivors are exactly the newest `min(cap, pushes)` sentinels.
            let expect: Vec<usize> = (pushes.saturating_sub(cap)..pushes).collect();
            prop_assert_eq!(b.iter().copied().collect::<Vec<_>>(), expect);
        }
    }
}
