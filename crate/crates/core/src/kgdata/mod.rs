//! Paired knowledge graphs: storage, file IO, anchor splits, a planted
//! community generator and the dataset transforms used to shift the
//! matchable proportion.

mod io;
mod split;
mod synth;
mod transform;

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_kg_pair, save_kg_pair};
pub use split::{split_anchors, AnchorSplit};
pub use synth::{gen_synthetic_pair, SynthConfig};
pub use transform::{transform_minus, transform_plus};

pub type EntityId = usize;
pub type RelationId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }
}

/// One knowledge graph with dense entity and relation ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripleStore {
    triples: Vec<Triple>,
    n_entities: usize,
    n_relations: usize,
}

impl TripleStore {
    /// Rejects out-of-range ids and duplicate triples.
    pub fn new(triples: Vec<Triple>, n_entities: usize, n_relations: usize) -> Result<Self> {
        let mut seen = HashSet::with_capacity(triples.len());
        for t in &triples {
            if t.head >= n_entities || t.tail >= n_entities {
                return Err(Error::Validation(format!(
                    "triple {t:?} references an entity >= {n_entities}"
                )));
            }
            if t.relation >= n_relations {
                return Err(Error::Validation(format!(
                    "triple {t:?} references a relation >= {n_relations}"
                )));
            }
            if !seen.insert(*t) {
                return Err(Error::Validation(format!("duplicate triple {t:?}")));
            }
        }
        Ok(Self {
            triples,
            n_entities,
            n_relations,
        })
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn n_entities(&self) -> usize {
        self.n_entities
    }

    pub fn n_relations(&self) -> usize {
        self.n_relations
    }

    pub fn degree(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_entities];
        for t in &self.triples {
            deg[t.head] += 1;
            deg[t.tail] += 1;
        }
        deg
    }
}

/// Two knowledge graphs plus their anchor links.
///
/// The truth sets are evaluation-only labels; when absent, every entity not
/// covered by an anchor is taken to be dangling (the anchor list of a
/// benchmark pair enumerates all matchable entities).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgPair {
    pub source: TripleStore,
    pub target: TripleStore,
    pub anchors: Vec<(EntityId, EntityId)>,
    pub truth_dangling_src: Option<BTreeSet<EntityId>>,
    pub truth_dangling_tgt: Option<BTreeSet<EntityId>>,
}

impl KgPair {
    pub fn new(
        source: TripleStore,
        target: TripleStore,
        anchors: Vec<(EntityId, EntityId)>,
        truth_dangling_src: Option<BTreeSet<EntityId>>,
        truth_dangling_tgt: Option<BTreeSet<EntityId>>,
    ) -> Result<Self> {
        let pair = Self {
            source,
            target,
            anchors,
            truth_dangling_src,
            truth_dangling_tgt,
        };
        pair.validate()?;
        Ok(pair)
    }

    fn validate(&self) -> Result<()> {
        let mut src_seen = HashSet::new();
        let mut tgt_seen = HashSet::new();
        for &(s, t) in &self.anchors {
            if s >= self.source.n_entities || t >= self.target.n_entities {
                return Err(Error::Validation(format!(
                    "anchor ({s}, {t}) out of range"
                )));
            }
            if !src_seen.insert(s) {
                return Err(Error::Validation(format!(
                    "source entity {s} appears in more than one anchor"
                )));
            }
            if !tgt_seen.insert(t) {
                return Err(Error::Validation(format!(
                    "target entity {t} appears in more than one anchor"
                )));
            }
        }
        let check = |set: &Option<BTreeSet<EntityId>>, seen: &HashSet<EntityId>, n, side| {
            if let Some(set) = set {
                for &e in set {
                    if e >= n {
                        return Err(Error::Validation(format!(
                            "{side} dangling id {e} out of range"
                        )));
                    }
                    if seen.contains(&e) {
                        return Err(Error::Validation(format!(
                            "{side} dangling id {e} is also an anchor"
                        )));
                    }
                }
            }
            Ok(())
        };
        check(
            &self.truth_dangling_src,
            &src_seen,
            self.source.n_entities,
            "source",
        )?;
        check(
            &self.truth_dangling_tgt,
            &tgt_seen,
            self.target.n_entities,
            "target",
        )?;
        Ok(())
    }

    pub fn n_total_entities(&self) -> usize {
        self.source.n_entities + self.target.n_entities
    }

    pub fn n_total_relations(&self) -> usize {
        self.source.n_relations + self.target.n_relations
    }

    /// Position of a source entity in the joint (source ++ target) vocabulary.
    pub fn global_src(&self, e: EntityId) -> usize {
        e
    }

    /// Position of a target entity in the joint vocabulary.
    pub fn global_tgt(&self, e: EntityId) -> usize {
        self.source.n_entities + e
    }

    /// Inverse of the joint numbering: `(is_target, local id)`.
    pub fn local(&self, g: usize) -> (bool, EntityId) {
        if g < self.source.n_entities {
            (false, g)
        } else {
            (true, g - self.source.n_entities)
        }
    }

    pub fn dangling_src(&self) -> BTreeSet<EntityId> {
        match &self.truth_dangling_src {
            Some(s) => s.clone(),
            None => {
                let anchored: HashSet<_> = self.anchors.iter().map(|a| a.0).collect();
                (0..self.source.n_entities)
                    .filter(|e| !anchored.contains(e))
                    .collect()
            }
        }
    }

    pub fn dangling_tgt(&self) -> BTreeSet<EntityId> {
        match &self.truth_dangling_tgt {
            Some(s) => s.clone(),
            None => {
                let anchored: HashSet<_> = self.anchors.iter().map(|a| a.1).collect();
                (0..self.target.n_entities)
                    .filter(|e| !anchored.contains(e))
                    .collect()
            }
        }
    }

    /// Ground-truth dangling flags over the joint vocabulary.
    pub fn dangling_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.n_total_entities()];
        for e in self.dangling_src() {
            mask[self.global_src(e)] = true;
        }
        for e in self.dangling_tgt() {
            mask[self.global_tgt(e)] = true;
        }
        mask
    }

    /// Fraction of all entities that are matchable (`2·|anchors| / N`).
    pub fn matchable_ratio(&self) -> f64 {
        let n = self.n_total_entities();
        if n == 0 {
            return 0.0;
        }
        2.0 * self.anchors.len() as f64 / n as f64
    }
}

/// Smallest power of two strictly above `8.33·log_base(n_entities)`.
pub fn suggest_dim(n_entities: usize, base: f64) -> Result<usize> {
    if n_entities < 2 {
        return Err(Error::invalid("suggest_dim needs at least two entities"));
    }
    if !(base > 0.0 && base != 1.0) {
        return Err(Error::invalid(format!("invalid logarithm base {base}")));
    }
    Ok(pow2_strictly_above(dim_lower_bound(n_entities, base)))
}

fn pow2_strictly_above(bound: f64) -> usize {
    let mut d = 1usize;
    while (d as f64) <= bound {
        d *= 2;
    }
    d
}

pub fn dim_lower_bound(n_entities: usize, base: f64) -> f64 {
    8.33 * (n_entities as f64).ln() / base.ln()
}
