use std::collections::{BTreeSet, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{KgPair, Triple, TripleStore};
use crate::error::{Error, Result};

/// Planted-community generator settings.
///
/// Matchable entities form `community_count` dense communities that are
/// copied into both graphs; `cross_noise` is the per-graph probability that a
/// copied edge is rewired to a random intra-community edge. Dangling entities
/// hang off one random community through `dangling_degree` edges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_match: usize,
    pub n_dang_src: usize,
    pub n_dang_tgt: usize,
    pub n_relations: usize,
    pub community_count: usize,
    pub intra_edge_prob: f64,
    pub cross_noise: f64,
    pub dangling_degree: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_match: 500,
            n_dang_src: 200,
            n_dang_tgt: 300,
            n_relations: 8,
            community_count: 10,
            intra_edge_prob: 0.2,
            cross_noise: 0.0,
            dangling_degree: 2,
            seed: 0,
        }
    }
}

type Edge = (usize, usize, usize);

fn random_edge(rng: &mut ChaCha8Rng, a: usize, b: usize, n_rel: usize) -> Edge {
    let r = rng.random_range(0..n_rel);
    if rng.random_bool(0.5) {
        (a, r, b)
    } else {
        (b, r, a)
    }
}

fn key(e: &Edge) -> (usize, usize) {
    (e.0.min(e.2), e.0.max(e.2))
}

pub fn gen_synthetic_pair(cfg: &SynthConfig) -> Result<KgPair> {
    for (name, p) in [
        ("intra_edge_prob", cfg.intra_edge_prob),
        ("cross_noise", cfg.cross_noise),
    ] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("{name} must lie in [0, 1], got {p}")));
        }
    }
    if cfg.n_match < cfg.community_count {
        return Err(Error::invalid("n_match must be at least community_count"));
    }
    if cfg.community_count == 0 && (cfg.n_match + cfg.n_dang_src + cfg.n_dang_tgt) > 0 {
        return Err(Error::invalid("community_count must be positive"));
    }
    if cfg.n_relations == 0 && cfg.n_match > 1 {
        return Err(Error::invalid("n_relations must be positive"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let communities: Vec<Vec<usize>> = (0..cfg.community_count)
        .map(|c| (c..cfg.n_match).step_by(cfg.community_count).collect())
        .collect();

    let mut core = Vec::new();
    for members in &communities {
        for (i, &a) in members.iter().enumerate() {
            for &b in &members[i + 1..] {
                if rng.random_bool(cfg.intra_edge_prob) {
                    core.push(random_edge(&mut rng, a, b, cfg.n_relations));
                }
            }
        }
    }
    // Every matchable entity gets at least one edge.
    let mut touched = vec![false; cfg.n_match];
    for e in &core {
        touched[e.0] = true;
        touched[e.2] = true;
    }
    for u in 0..cfg.n_match {
        let members = &communities[u % cfg.community_count];
        if !touched[u] && members.len() > 1 {
            let others: Vec<usize> = members.iter().copied().filter(|&v| v != u).collect();
            let v = *others.choose(&mut rng).expect("community has another member");
            core.push(random_edge(&mut rng, u, v, cfg.n_relations));
            touched[u] = true;
            touched[v] = true;
        }
    }

    let src = build_side(cfg, &core, &communities, cfg.n_dang_src, &mut rng);
    let tgt = build_side(cfg, &core, &communities, cfg.n_dang_tgt, &mut rng);

    let mut anchors: Vec<_> = (0..cfg.n_match).map(|u| (src.perm[u], tgt.perm[u])).collect();
    anchors.sort_unstable();
    KgPair::new(
        src.store,
        tgt.store,
        anchors,
        Some(src.dangling),
        Some(tgt.dangling),
    )
}

struct Side {
    store: TripleStore,
    perm: Vec<usize>,
    dangling: BTreeSet<usize>,
}

fn build_side(
    cfg: &SynthConfig,
    core: &[Edge],
    communities: &[Vec<usize>],
    n_dangling: usize,
    rng: &mut ChaCha8Rng,
) -> Side {
    let mut present: HashSet<(usize, usize)> = core.iter().map(key).collect();
    let mut edges = Vec::with_capacity(core.len());
    for &e in core {
        if cfg.cross_noise > 0.0 && rng.random_bool(cfg.cross_noise) {
            let members = &communities[e.0 % cfg.community_count];
            // Rewire to a fresh intra-community edge when one exists.
            let mut rewired = None;
            for _ in 0..32 {
                let a = *members.choose(rng).expect("non-empty");
                let b = *members.choose(rng).expect("non-empty");
                if a != b && !present.contains(&key(&(a, 0, b))) {
                    rewired = Some(random_edge(rng, a, b, cfg.n_relations));
                    break;
                }
            }
            if let Some(r) = rewired {
                present.remove(&key(&e));
                present.insert(key(&r));
                edges.push(r);
                continue;
            }
        }
        edges.push(e);
    }

    for d in 0..n_dangling {
        let node = cfg.n_match + d;
        let members = &communities[rng.random_range(0..communities.len())];
        let k = cfg.dangling_degree.min(members.len());
        for &m in members.choose_multiple(rng, k) {
            edges.push(random_edge(rng, node, m, cfg.n_relations.max(1)));
        }
    }

    let n = cfg.n_match + n_dangling;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut triples: Vec<Triple> = edges
        .iter()
        .map(|&(h, r, t)| Triple::new(perm[h], r, perm[t]))
        .collect();
    triples.sort_unstable();
    triples.dedup();
    let dangling = (cfg.n_match..n).map(|u| perm[u]).collect();
    let store = TripleStore::new(triples, n, cfg.n_relations.max(1))
        .expect("generator emits valid ids");
    Side {
        store,
        perm,
        dangling,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_are_forced_by_construction() {
        let cfg = SynthConfig {
            n_match: 500,
            n_dang_src: 200,
            n_dang_tgt: 300,
            ..Default::default()
        };
        let p = gen_synthetic_pair(&cfg).unwrap();
        assert_eq!(p.source.n_entities(), 700);
        assert_eq!(p.target.n_entities(), 800);
        assert_eq!(p.anchors.len(), 500);
        assert_eq!(p.dangling_src().len(), 200);
        assert_eq!(p.dangling_tgt().len(), 300);
    }

    #[test]
    fn same_seed_same_pair() {
        let cfg = SynthConfig {
            n_match: 60,
            n_dang_src: 10,
            n_dang_tgt: 20,
            community_count: 4,
            cross_noise: 0.1,
            seed: 9,
            ..Default::default()
        };
        assert_eq!(gen_synthetic_pair(&cfg).unwrap(), gen_synthetic_pair(&cfg).unwrap());
        let other = SynthConfig {
            seed: 10,
            ..cfg.clone()
        };
        assert_ne!(
            gen_synthetic_pair(&other).unwrap(),
            gen_synthetic_pair(&cfg).unwrap()
        );
    }

    #[test]
    fn bad_probabilities_are_rejected() {
        for cfg in [
            SynthConfig {
                intra_edge_prob: 1.5,
                ..Default::default()
            },
            SynthConfig {
                cross_noise: -0.1,
                ..Default::default()
            },
        ] {
            assert!(gen_synthetic_pair(&cfg).is_err());
        }
        let too_few = SynthConfig {
            n_match: 3,
            community_count: 4,
            ..Default::default()
        };
        assert!(gen_synthetic_pair(&too_few).is_err());
    }

    #[test]
    fn every_matchable_entity_has_an_edge() {
        let cfg = SynthConfig {
            n_match: 80,
            intra_edge_prob: 0.01,
            community_count: 8,
            ..Default::default()
        };
        let p = gen_synthetic_pair(&cfg).unwrap();
        let deg = p.source.degree();
        assert!(p.anchors.iter().all(|&(s, _)| deg[s] > 0));
    }
}
