use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{name_hash, TaskStream};

/// Stored training dialogs of completed tasks, as indices into each
/// service's dialogs.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBuffer {
    pub entries: BTreeMap<String, Vec<usize>>,
}

impl MemoryBuffer {
    pub fn insert(&mut self, task_id: &str, indices: Vec<usize>) {
        self.entries.insert(task_id.to_string(), indices);
    }

    pub fn get(&self, task_id: &str) -> &[usize] {
        self.entries.get(task_id).map_or(&[], Vec::as_slice)
    }

    pub fn total(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }
}

/// Uniform sample without replacement from task `k`'s training split. The
/// draw depends only on `seed` and the task id, so every method given the
/// same seed stores the same dialogs.
pub fn sample_memory(stream: &TaskStream, k: usize, capacity: usize, seed: u64) -> Vec<usize> {
    let train = &stream.splits[k].train;
    if capacity >= train.len() {
        return train.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(&stream.services[k].id));
    let mut picked: Vec<usize> = sample(&mut rng, train.len(), capacity).into_iter().map(|i| train[i]).collect();
    picked.sort_unstable();
    picked
}

/// Splits `total` across tasks in proportion to `sizes` by largest
/// remainder, giving every task at least one slot.
pub fn proportional_budget(sizes: &[usize], total: usize) -> Vec<usize> {
    let n = sizes.len();
    if n == 0 {
        return Vec::new();
    }
    let sum: usize = sizes.iter().sum();
    if sum == 0 {
        return proportional_budget(&vec![1; n], total);
    }
    let (total_w, sum_w) = (total as u128, sum as u128);
    let mut caps: Vec<usize> = sizes.iter().map(|&s| (total_w * s as u128 / sum_w) as usize).collect();
    let rems: Vec<u128> = sizes.iter().map(|&s| total_w * s as u128 % sum_w).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| rems[b].cmp(&rems[a]).then(a.cmp(&b)));
    let left = total - caps.iter().sum::<usize>();
    for &i in &order[..left] {
        caps[i] += 1;
    }
    // Lift empty tasks by taking from the largest.
    while let Some(z) = caps.iter().position(|&c| c == 0) {
        let (big, _) = caps.iter().enumerate().max_by_key(|&(i, &c)| (c, std::cmp::Reverse(i))).unwrap();
        if caps[big] <= 1 {
            break;
        }
        caps[big] -= 1;
        caps[z] += 1;
    }
    caps
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::{generate_stream, GeneratorConfig};
    use proptest::prelude::*;

    #[test]
    fn budget_examples() {
        assert_eq!(proportional_budget(&[100, 300], 100), vec![25, 75]);
        assert_eq!(proportional_budget(&[40; 6], 300), vec![50; 6]);
        assert_eq!(proportional_budget(&[1, 1000], 2), vec![1, 1]);
    }

    proptest! {
        #[test]
        fn budget_sums_exactly(sizes in prop::collection::vec(1usize..500, 1..20), extra in 0usize..500) {
            let total = sizes.len() + extra;
            let caps = proportional_budget(&sizes, total);
            prop_assert_eq!(caps.iter().sum::<usize>(), total);
            prop_assert!(caps.iter().all(|&c| c >= 1));
        }
    }

    #[test]
    fn memory_sampling() {
        let cfg = GeneratorConfig { n_services: 2, min_samples: 57, max_samples: 57, seed: 1, ..Default::default() };
        let s = generate_stream(&cfg).unwrap();
        assert!(sample_memory(&s, 0, 0, 3).is_empty());
        assert_eq!(sample_memory(&s, 0, 50, 3).len(), 40);
        let a = sample_memory(&s, 1, 10, 3);
        assert_eq!(a, sample_memory(&s, 1, 10, 3));
        assert_eq!(a.len(), 10);
        assert!(a.iter().all(|i| s.splits[1].train.contains(i)));
    }
}
