//! Selective-aggregation entity encoder.
//!
//! Both graphs are embedded by one shared encoder over their joint entity
//! vocabulary (source ids first, then target ids). Each layer aggregates
//! neighbour messages gated by the neighbour's learnable dangling indicator,
//! weighted by relation-projection attention and reflected by a per-triple
//! Householder matrix. Layer outputs are concatenated, aligned across graphs
//! through a shared set of proxy vectors, and fused by a learned gate; the
//! indicator itself is appended as the last embedding coordinate.

mod checkpoint;
mod layers;

use std::rc::Rc;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::ipule::{ClassifierHead, HeadFeatures};
use crate::kgdata::KgPair;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::{
    attention_coeffs, gate_fuse, householder, intra_repr, layer_forward, orth_penalty,
    proxy_attention, relation_project,
};
pub(crate) use layers::{forward, orth_penalty_var, ForwardOptions};

/// Where dropout is applied during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutSite {
    LayerInput,
    Attention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeesaConfig {
    pub dim: usize,
    pub depth: usize,
    pub n_proxy: usize,
    pub dropout: f64,
    pub dropout_site: DropoutSite,
    /// Aggregate over incoming as well as outgoing triples.
    pub bidirectional: bool,
    pub clf_hidden: usize,
    pub clf_features: HeadFeatures,
}

impl Default for KeesaConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            depth: 2,
            n_proxy: 64,
            dropout: 0.3,
            dropout_site: DropoutSite::LayerInput,
            bidirectional: true,
            clf_hidden: 64,
            clf_features: HeadFeatures::default(),
        }
    }
}

impl KeesaConfig {
    /// Width of the concatenated intra-graph representation, `(L+1)·d`.
    pub fn concat_width(&self) -> usize {
        (self.depth + 1) * self.dim
    }

    /// Width of the final embedding, `(L+1)·d + 1`.
    pub fn output_width(&self) -> usize {
        self.concat_width() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("dim must be at least 1"));
        }
        if self.n_proxy == 0 {
            return Err(Error::invalid("n_proxy must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        if self.clf_hidden == 0 {
            return Err(Error::invalid("clf_hidden must be at least 1"));
        }
        Ok(())
    }
}

/// Learnable encoder state. Householder matrices are derived per triple
/// from `rel_emb` and never stored.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    /// `h^0`, `n_entities × d`.
    pub ent_emb: Mat,
    /// `n_relations × d`.
    pub rel_emb: Mat,
    /// Dangling indicators `r_e`, `n_entities × 1`.
    pub indicator: Mat,
    /// `W_r`, `d × d`.
    pub rel_proj: Mat,
    /// Attention vector `v`, `d × 1`.
    pub attn_vec: Mat,
    /// `n_proxy × (L+1)d`.
    pub proxies: Mat,
    /// `W_g`, `(L+1)d × (L+1)d`, applied as `W_g · h`.
    pub gate_weight: Mat,
    /// `1 × (L+1)d`.
    pub gate_bias: Mat,
    pub clf_head: ClassifierHead,
    pub depth: usize,
}

pub const N_PARAM_BLOCKS: usize = 12;

fn normal_mat(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Mat {
    let dist = Normal::new(0.0, std).expect("positive std");
    Mat::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

pub(crate) fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
}

impl EncoderParams {
    pub fn init(n_entities: usize, n_relations: usize, cfg: &KeesaConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.dim;
        let w = cfg.concat_width();
        let scale = 1.0 / (d as f64).sqrt();
        Ok(Self {
            ent_emb: normal_mat(&mut rng, n_entities, d, scale),
            rel_emb: normal_mat(&mut rng, n_relations.max(1), d, scale),
            indicator: Mat::ones((n_entities, 1)),
            rel_proj: Array2::eye(d),
            attn_vec: glorot(&mut rng, d, 1),
            proxies: normal_mat(&mut rng, cfg.n_proxy, w, 1.0 / (w as f64).sqrt()),
            gate_weight: glorot(&mut rng, w, w),
            gate_bias: Mat::zeros((1, w)),
            clf_head: ClassifierHead::init(cfg.clf_features, cfg.depth + 1, d, cfg.clf_hidden, &mut rng),
            depth: cfg.depth,
        })
    }

    pub fn n_entities(&self) -> usize {
        self.ent_emb.nrows()
    }

    pub fn n_relations(&self) -> usize {
        self.rel_emb.nrows()
    }

    pub fn dim(&self) -> usize {
        self.ent_emb.ncols()
    }

    pub fn n_proxy(&self) -> usize {
        self.proxies.nrows()
    }

    pub fn clf_hidden(&self) -> usize {
        self.clf_head.hidden()
    }

    /// Parameter blocks in checkpoint order.
    pub fn blocks(&self) -> [&Mat; N_PARAM_BLOCKS] {
        [
            &self.ent_emb,
            &self.rel_emb,
            &self.indicator,
            &self.rel_proj,
            &self.attn_vec,
            &self.proxies,
            &self.gate_weight,
            &self.gate_bias,
            &self.clf_head.w1,
            &self.clf_head.b1,
            &self.clf_head.w2,
            &self.clf_head.b2,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut Mat; N_PARAM_BLOCKS] {
        [
            &mut self.ent_emb,
            &mut self.rel_emb,
            &mut self.indicator,
            &mut self.rel_proj,
            &mut self.attn_vec,
            &mut self.proxies,
            &mut self.gate_weight,
            &mut self.gate_bias,
            &mut self.clf_head.w1,
            &mut self.clf_head.b1,
            &mut self.clf_head.w2,
            &mut self.clf_head.b2,
        ]
    }

    /// Pushes every block onto `tape` as a leaf.
    pub(crate) fn leaves(&self, tape: &mut Tape) -> ParamVars {
        let v = self.blocks().map(|m| tape.leaf(m.clone()));
        ParamVars {
            ent_emb: v[0],
            rel_emb: v[1],
            indicator: v[2],
            rel_proj: v[3],
            attn_vec: v[4],
            proxies: v[5],
            gate_weight: v[6],
            gate_bias: v[7],
            clf_w1: v[8],
            clf_b1: v[9],
            clf_w2: v[10],
            clf_b2: v[11],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|m| m.iter().all(|x| x.is_finite()))
    }
}

/// Tape handles for each parameter block.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ParamVars {
    pub ent_emb: Var,
    pub rel_emb: Var,
    pub indicator: Var,
    pub rel_proj: Var,
    pub attn_vec: Var,
    pub proxies: Var,
    pub gate_weight: Var,
    pub gate_bias: Var,
    pub clf_w1: Var,
    pub clf_b1: Var,
    pub clf_w2: Var,
    pub clf_b2: Var,
}

impl ParamVars {
    pub fn all(&self) -> [Var; N_PARAM_BLOCKS] {
        [
            self.ent_emb,
            self.rel_emb,
            self.indicator,
            self.rel_proj,
            self.attn_vec,
            self.proxies,
            self.gate_weight,
            self.gate_bias,
            self.clf_w1,
            self.clf_b1,
            self.clf_w2,
            self.clf_b2,
        ]
    }
}

/// Message-passing edges `(i, k, j)`: entity `i` aggregates neighbour `j`
/// through relation `k`, all in joint ids. Edges are kept in canonical
/// sorted order so the encoder does not depend on triple order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeList {
    pub n_entities: usize,
    pub n_relations: usize,
    pub heads: Rc<[usize]>,
    pub rels: Rc<[usize]>,
    pub tails: Rc<[usize]>,
}

impl EdgeList {
    pub fn new(n_entities: usize, n_relations: usize, mut edges: Vec<(usize, usize, usize)>) -> Result<Self> {
        for &(i, k, j) in &edges {
            if i >= n_entities || j >= n_entities || k >= n_relations {
                return Err(Error::invalid(format!("edge ({i}, {k}, {j}) out of range")));
            }
        }
        edges.sort_unstable();
        edges.dedup();
        Ok(Self {
            n_entities,
            n_relations,
            heads: edges.iter().map(|e| e.0).collect(),
            rels: edges.iter().map(|e| e.1).collect(),
            tails: edges.iter().map(|e| e.2).collect(),
        })
    }

    /// Union graph of a pair; target relations are offset past the source
    /// vocabulary.
    pub fn from_pair(pair: &KgPair, bidirectional: bool) -> Self {
        let mut edges = Vec::new();
        let rel_off = pair.source.n_relations();
        let mut push = |h: usize, r: usize, t: usize| {
            edges.push((h, r, t));
            if bidirectional && h != t {
                edges.push((t, r, h));
            }
        };
        for t in pair.source.triples() {
            push(pair.global_src(t.head), t.relation, pair.global_src(t.tail));
        }
        for t in pair.target.triples() {
            push(
                pair.global_tgt(t.head),
                rel_off + t.relation,
                pair.global_tgt(t.tail),
            );
        }
        Self::new(pair.n_total_entities(), pair.n_total_relations(), edges)
            .expect("pair triples are validated")
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }
}

/// Final per-entity embeddings `h^f`, width `(L+1)·d + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub hf: Mat,
    /// `h^0 … h^L`, retained when requested.
    pub layers: Option<Vec<Mat>>,
}

impl EmbeddingTable {
    pub fn n_entities(&self) -> usize {
        self.hf.nrows()
    }

    pub fn width(&self) -> usize {
        self.hf.ncols()
    }

    pub fn row(&self, e: usize) -> Array1<f64> {
        self.hf.row(e).to_owned()
    }

    /// Rows for the given joint ids, in order.
    pub fn select(&self, ids: &[usize]) -> Mat {
        self.hf.select(ndarray::Axis(0), ids)
    }
}

/// Embeds every entity of `pair` (joint numbering) in inference mode.
pub fn encode(pair: &KgPair, params: &EncoderParams, depth: usize) -> Result<EmbeddingTable> {
    if params.n_entities() != pair.n_total_entities() {
        return Err(Error::invalid(format!(
            "params cover {} entities, pair has {}",
            params.n_entities(),
            pair.n_total_entities()
        )));
    }
    if params.n_relations() < pair.n_total_relations() {
        return Err(Error::invalid("params do not cover the relation vocabulary"));
    }
    let graph = EdgeList::from_pair(pair, true);
    encode_graph(&graph, params, depth, true)
}

/// [`encode`] over an explicit edge list.
pub fn encode_graph(
    graph: &EdgeList,
    params: &EncoderParams,
    depth: usize,
    keep_layers: bool,
) -> Result<EmbeddingTable> {
    let width = (depth + 1) * params.dim();
    if params.proxies.ncols() != width || params.gate_weight.nrows() != width {
        return Err(Error::invalid(format!(
            "params were built for depth {}, asked for {depth}",
            params.depth
        )));
    }
    let mut tape = Tape::new();
    let vars = params.leaves(&mut tape);
    let out = forward(&mut tape, graph, &vars, depth, &ForwardOptions::inference());
    Ok(EmbeddingTable {
        hf: tape.value(out.hf).clone(),
        layers: keep_layers.then(|| out.layers.iter().map(|&v| tape.value(v).clone()).collect()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kgdata::{gen_synthetic_pair, SynthConfig, Triple, TripleStore};

    pub(crate) fn small_cfg() -> KeesaConfig {
        KeesaConfig {
            dim: 4,
            depth: 2,
            n_proxy: 3,
            clf_hidden: 5,
            ..Default::default()
        }
    }

    #[test]
    fn depth_zero_uses_only_h0() {
        let pair = gen_synthetic_pair(&SynthConfig {
            n_match: 12,
            n_dang_src: 2,
            n_dang_tgt: 3,
            community_count: 3,
            ..Default::default()
        })
        .unwrap();
        let cfg = KeesaConfig {
            depth: 0,
            ..small_cfg()
        };
        let p = EncoderParams::init(pair.n_total_entities(), pair.n_total_relations(), &cfg, 1).unwrap();
        let emb = encode(&pair, &p, 0).unwrap();
        let layers = emb.layers.as_ref().unwrap();
        assert_eq!(layers.len(), 1);
        assert_eq!(layers[0], p.ent_emb);
        let hp = proxy_attention(&p.ent_emb, &p.proxies).unwrap();
        let fused = gate_fuse(&p.ent_emb, &hp, &p.gate_weight, &p.gate_bias, &p.indicator).unwrap();
        assert_eq!(emb.hf, fused);
    }

    #[test]
    fn last_column_is_indicator() {
        let pair = gen_synthetic_pair(&SynthConfig {
            n_match: 20,
            n_dang_src: 4,
            n_dang_tgt: 4,
            community_count: 4,
            ..Default::default()
        })
        .unwrap();
        let cfg = small_cfg();
        let mut p = EncoderParams::init(pair.n_total_entities(), pair.n_total_relations(), &cfg, 2).unwrap();
        p.indicator.mapv_inplace(|_| 0.0);
        for (i, v) in p.indicator.iter_mut().enumerate() {
            *v = i as f64 * 0.1 - 1.0;
        }
        let emb = encode(&pair, &p, cfg.depth).unwrap();
        assert_eq!(emb.width(), cfg.output_width());
        for i in 0..emb.n_entities() {
            assert_eq!(emb.hf[[i, emb.width() - 1]], p.indicator[[i, 0]]);
        }
    }

    #[test]
    fn encode_rejects_mismatched_params() {
        let s = TripleStore::new(vec![Triple::new(0, 0, 1)], 2, 1).unwrap();
        let pair = KgPair::new(s.clone(), s, vec![(0, 0)], None, None).unwrap();
        let p = EncoderParams::init(3, 2, &small_cfg(), 0).unwrap();
        assert!(encode(&pair, &p, 2).is_err());
        let p = EncoderParams::init(4, 2, &small_cfg(), 0).unwrap();
        assert!(encode(&pair, &p, 1).is_err());
        assert!(encode(&pair, &p, 2).is_ok());
    }

    #[test]
    fn edge_list_is_canonical() {
        let a = EdgeList::new(3, 2, vec![(2, 1, 0), (0, 0, 1), (0, 0, 1)]).unwrap();
        let b = EdgeList::new(3, 2, vec![(0, 0, 1), (2, 1, 0)]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert!(EdgeList::new(3, 2, vec![(0, 2, 1)]).is_err());
    }
}
