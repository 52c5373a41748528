//! Transforms that move the matchable proportion of a pair down (`minus`:
//! break anchors by deleting one partner) or up (`plus`: delete dangling
//! entities). Both re-index densely, preserving the original id order.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EntityId, KgPair, Triple, TripleStore};
use crate::error::{Error, Result};

fn check_frac(frac: f64) -> Result<()> {
    if (0.0..=1.0).contains(&frac) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "delete_frac must lie in [0, 1], got {frac}"
        )))
    }
}

/// Removes `deleted` entities from `store`; returns the new store and the
/// old→new id map.
fn drop_entities(store: &TripleStore, deleted: &BTreeSet<EntityId>) -> (TripleStore, Vec<Option<EntityId>>) {
    let mut map = vec![None; store.n_entities()];
    let mut next = 0;
    for (old, slot) in map.iter_mut().enumerate() {
        if !deleted.contains(&old) {
            *slot = Some(next);
            next += 1;
        }
    }
    let triples = store
        .triples()
        .iter()
        .filter_map(|t| {
            Some(Triple::new(map[t.head]?, t.relation, map[t.tail]?))
        })
        .collect();
    let store = TripleStore::new(triples, next, store.n_relations())
        .expect("surviving triples stay valid");
    (store, map)
}

fn remap(set: &BTreeSet<EntityId>, map: &[Option<EntityId>]) -> BTreeSet<EntityId> {
    set.iter().filter_map(|&e| map[e]).collect()
}

fn rebuild(
    pair: &KgPair,
    del_src: &BTreeSet<EntityId>,
    del_tgt: &BTreeSet<EntityId>,
    anchors: &[(EntityId, EntityId)],
    dang_src: &BTreeSet<EntityId>,
    dang_tgt: &BTreeSet<EntityId>,
) -> Result<KgPair> {
    let (source, map_s) = drop_entities(&pair.source, del_src);
    let (target, map_t) = drop_entities(&pair.target, del_tgt);
    let anchors = anchors
        .iter()
        .map(|&(s, t)| (map_s[s].expect("kept"), map_t[t].expect("kept")))
        .collect();
    KgPair::new(
        source,
        target,
        anchors,
        Some(remap(dang_src, &map_s)),
        Some(remap(dang_tgt, &map_t)),
    )
}

/// Deletes `round(delete_frac·|anchors|)` anchor pairs by removing one side
/// (source or target, chosen by a fair coin) of each; the other side becomes
/// dangling.
pub fn transform_minus(pair: &KgPair, delete_frac: f64, seed: u64) -> Result<KgPair> {
    check_frac(delete_frac)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = pair.anchors.len();
    let k = (delete_frac * n as f64).round() as usize;
    let chosen: BTreeSet<usize> = sample(&mut rng, n, k).into_iter().collect();

    let mut del_src = BTreeSet::new();
    let mut del_tgt = BTreeSet::new();
    let mut dang_src = pair.dangling_src();
    let mut dang_tgt = pair.dangling_tgt();
    let mut kept = Vec::with_capacity(n - k);
    for (i, &(s, t)) in pair.anchors.iter().enumerate() {
        if !chosen.contains(&i) {
            kept.push((s, t));
        } else if rng.random_bool(0.5) {
            del_src.insert(s);
            dang_tgt.insert(t);
        } else {
            del_tgt.insert(t);
            dang_src.insert(s);
        }
    }
    rebuild(pair, &del_src, &del_tgt, &kept, &dang_src, &dang_tgt)
}

/// Deletes `round(delete_frac·|dangling|)` dangling entities from each graph.
pub fn transform_plus(pair: &KgPair, delete_frac: f64, seed: u64) -> Result<KgPair> {
    check_frac(delete_frac)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |set: &BTreeSet<EntityId>| -> BTreeSet<EntityId> {
        let items: Vec<_> = set.iter().copied().collect();
        let k = (delete_frac * items.len() as f64).round() as usize;
        sample(&mut rng, items.len(), k)
            .into_iter()
            .map(|i| items[i])
            .collect()
    };
    let dang_src = pair.dangling_src();
    let dang_tgt = pair.dangling_tgt();
    let del_src = pick(&dang_src);
    let del_tgt = pick(&dang_tgt);
    rebuild(
        pair,
        &del_src,
        &del_tgt,
        &pair.anchors,
        &dang_src,
        &dang_tgt,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kgdata::{gen_synthetic_pair, SynthConfig};

    fn base() -> KgPair {
        gen_synthetic_pair(&SynthConfig {
            n_match: 500,
            n_dang_src: 200,
            n_dang_tgt: 300,
            seed: 4,
            ..Default::default()
        })
        .unwrap()
    }

    fn assert_consistent(p: &KgPair) {
        let n = p.n_total_entities();
        assert_eq!(
            p.dangling_src().len() + p.dangling_tgt().len() + 2 * p.anchors.len(),
            n,
            "every entity is either anchored or dangling"
        );
    }

    #[test]
    fn zero_fraction_is_identity() {
        let p = base();
        assert_eq!(transform_minus(&p, 0.0, 1).unwrap(), p);
        assert_eq!(transform_plus(&p, 0.0, 1).unwrap(), p);
    }

    #[test]
    fn minus_counts() {
        let p = base();
        let m = transform_minus(&p, 0.2, 7).unwrap();
        assert_eq!(m.anchors.len(), 400);
        let new_dangling = m.dangling_src().len() + m.dangling_tgt().len() - 500;
        assert_eq!(new_dangling, 100);
        assert_eq!(m.n_total_entities(), 1500 - 100);
        assert!(m.matchable_ratio() < p.matchable_ratio());
        assert_consistent(&m);
    }

    #[test]
    fn plus_counts() {
        let p = base();
        let q = transform_plus(&p, 0.5, 7).unwrap();
        assert_eq!(q.dangling_src().len(), 100);
        assert_eq!(q.dangling_tgt().len(), 150);
        assert_eq!(q.anchors.len(), 500);
        assert!(q.matchable_ratio() > p.matchable_ratio());
        let all = transform_plus(&p, 1.0, 7).unwrap();
        assert!(all.dangling_src().is_empty() && all.dangling_tgt().is_empty());
        assert_consistent(&all);
    }

    #[test]
    fn rejects_fraction_out_of_range() {
        assert!(transform_minus(&base(), 1.2, 0).is_err());
        assert!(transform_plus(&base(), -0.2, 0).is_err());
    }
}
