use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EntityId, KgPair};
use crate::error::{Error, Result};

/// Partition of a pair's anchors into supervision and held-out links.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorSplit {
    pub train: Vec<(EntityId, EntityId)>,
    pub test: Vec<(EntityId, EntityId)>,
    pub seed: u64,
}

impl AnchorSplit {
    /// Every anchor is supervision. This is the setting where a pair is
    /// judged for alignability from its pre-aligned part alone.
    pub fn all_train(pair: &KgPair) -> Self {
        Self {
            train: pair.anchors.clone(),
            test: Vec::new(),
            seed: 0,
        }
    }
}

/// Seeded shuffle, then the first `round(train_ratio·|anchors|)` links train.
pub fn split_anchors(pair: &KgPair, train_ratio: f64, seed: u64) -> Result<AnchorSplit> {
    if !(train_ratio > 0.0 && train_ratio < 1.0) {
        return Err(Error::invalid(format!(
            "train_ratio must lie in (0, 1), got {train_ratio}"
        )));
    }
    if pair.anchors.len() < 2 {
        return Err(Error::invalid("need at least two anchors to split"));
    }
    let mut anchors = pair.anchors.clone();
    anchors.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (train_ratio * anchors.len() as f64).round() as usize;
    let test = anchors.split_off(n_train);
    Ok(AnchorSplit {
        train: anchors,
        test,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::kgdata::{Triple, TripleStore};

    fn pair_with_anchors(n: usize) -> KgPair {
        let s = TripleStore::new(vec![Triple::new(0, 0, 1)], n.max(2), 1).unwrap();
        let t = TripleStore::new(vec![Triple::new(0, 0, 1)], n.max(2), 1).unwrap();
        KgPair::new(s, t, (0..n).map(|i| (i, i)).collect(), None, None).unwrap()
    }

    #[test]
    fn ten_anchors_half_split() {
        let sp = split_anchors(&pair_with_anchors(10), 0.5, 3).unwrap();
        assert_eq!((sp.train.len(), sp.test.len()), (5, 5));
    }

    #[test]
    fn split_count_matches_rounding() {
        // round(0.3 · 33183) = round(9954.9) = 9955
        let sp = split_anchors(&pair_with_anchors(33_183), 0.3, 0).unwrap();
        assert_eq!(sp.train.len(), 9_955);
        assert_eq!(sp.test.len(), 33_183 - 9_955);
    }

    #[test]
    fn split_is_a_seeded_partition() {
        let p = pair_with_anchors(50);
        let a = split_anchors(&p, 0.3, 11).unwrap();
        let b = split_anchors(&p, 0.3, 11).unwrap();
        assert_eq!(a, b);
        let c = split_anchors(&p, 0.3, 12).unwrap();
        assert_ne!(a.train, c.train);
        let train: HashSet<_> = a.train.iter().collect();
        assert!(a.test.iter().all(|x| !train.contains(x)));
        let all: HashSet<_> = a.train.iter().chain(&a.test).copied().collect();
        assert_eq!(all, p.anchors.iter().copied().collect());
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(split_anchors(&pair_with_anchors(1), 0.5, 0).is_err());
        assert!(split_anchors(&pair_with_anchors(10), 0.0, 0).is_err());
        assert!(split_anchors(&pair_with_anchors(10), 1.0, 0).is_err());
    }
}
