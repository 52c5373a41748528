use std::collections::HashSet;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{classifier_var, head_input, ClassPriors, IpuleConfig};
use crate::aligneval::{mutual_nn_pairs, similarity_matrix, Metric};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::keesa::{encode_graph, forward, orth_penalty_var, EdgeList, EmbeddingTable, EncoderParams, ForwardOptions};
use crate::kgdata::KgPair;
use crate::losses::{info_loss_var, pu_loss_var, ContrastiveBatch, NegativeStrategy};
use crate::optim::RmsProp;

/// What a training step minimises. The orthogonality penalty is always added.
#[derive(Clone, Copy, Debug)]
pub enum Objective {
    /// `β·L_info + (1 − β)·L_pu`.
    Joint { priors: ClassPriors, beta: f64 },
    Pu { priors: ClassPriors },
    Align,
}

/// Encoder, classifier and optimiser state over one pair's joint graph.
pub struct Trainer {
    params: EncoderParams,
    graph: EdgeList,
    opt: RmsProp,
    cfg: IpuleConfig,
    rng: ChaCha8Rng,
    src_pool: Vec<usize>,
    tgt_pool: Vec<usize>,
    steps: u64,
}

impl Trainer {
    pub fn new(pair: &KgPair, cfg: &IpuleConfig) -> Result<Self> {
        let params = EncoderParams::init(
            pair.n_total_entities(),
            pair.n_total_relations(),
            &cfg.encoder,
            cfg.seed,
        )?;
        Self::with_params(pair, params, cfg)
    }

    pub fn with_params(pair: &KgPair, params: EncoderParams, cfg: &IpuleConfig) -> Result<Self> {
        cfg.validate()?;
        if params.n_entities() != pair.n_total_entities() || params.depth != cfg.encoder.depth {
            return Err(Error::invalid("parameters do not match the pair or encoder depth"));
        }
        let n_src = pair.source.n_entities();
        Ok(Self {
            params,
            graph: EdgeList::from_pair(pair, cfg.encoder.bidirectional),
            opt: RmsProp::new(cfg.lr),
            cfg: cfg.clone(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed),
            src_pool: (0..n_src).collect(),
            tgt_pool: (n_src..pair.n_total_entities()).collect(),
            steps: 0,
        })
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn into_params(self) -> EncoderParams {
        self.params
    }

    /// One pass over `anchors` (joint ids) in shuffled batches; returns the
    /// mean step loss.
    pub fn epoch(
        &mut self,
        anchors: &[(usize, usize)],
        labeled: &[usize],
        unlabeled: &[usize],
        obj: &Objective,
    ) -> Result<f64> {
        let needs_anchors = !matches!(obj, Objective::Pu { .. });
        if needs_anchors && anchors.is_empty() {
            return Err(Error::invalid("contrastive training needs anchors"));
        }
        let mut order = anchors.to_vec();
        order.shuffle(&mut self.rng);
        let labeled: Rc<[usize]> = labeled.into();
        let unlabeled: Rc<[usize]> = unlabeled.into();
        let mut total = 0.0;
        let chunks: Vec<&[(usize, usize)]> = if order.is_empty() {
            vec![&[]]
        } else {
            order.chunks(self.cfg.batch_size).collect()
        };
        for chunk in &chunks {
            total += self.step(chunk, &labeled, &unlabeled, obj)?;
        }
        Ok(total / chunks.len() as f64)
    }

    fn step(&mut self, chunk: &[(usize, usize)], labeled: &Rc<[usize]>, unlabeled: &Rc<[usize]>, obj: &Objective) -> Result<f64> {
        let batch = match obj {
            Objective::Pu { .. } => None,
            _ => Some(self.batch(chunk)),
        };
        let mut t = Tape::new();
        let v = self.params.leaves(&mut t);
        let opts = ForwardOptions {
            dropout: self.cfg.encoder.dropout,
            site: self.cfg.encoder.dropout_site,
            seed: self.cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(self.steps),
        };
        let out = forward(&mut t, &self.graph, &v, self.cfg.encoder.depth, &opts);

        let encoder_grad = self.cfg.pu_encoder_grad;
        let (features, n_blocks) = (self.params.clf_head.features, self.params.clf_head.n_blocks);
        let pu = |t: &mut Tape, priors: &ClassPriors| {
            let hf = if encoder_grad { out.hf } else { t.leaf(t.value(out.hf).clone()) };
            let hf = head_input(t, hf, features, n_blocks);
            let probs = classifier_var(t, hf, v.clf_w1, v.clf_b1, v.clf_w2, v.clf_b2);
            pu_loss_var(t, probs, labeled.clone(), unlabeled.clone(), priors)
        };
        let nn_descent = self.cfg.pu_nn_descent;
        // (reported loss, differentiated objective)
        let (loss, objective) = match obj {
            Objective::Joint { priors, beta } => {
                let li = info_loss_var(&mut t, out.hf, batch.as_ref().expect("built"), &self.cfg.contrastive);
                let lp = pu(&mut t, priors);
                let li = t.scale(li, *beta);
                let mut mix = |x: Var| {
                    let x = t.scale(x, 1.0 - beta);
                    t.add(li, x)
                };
                let loss = mix(lp.loss);
                (loss, if nn_descent { mix(lp.descent) } else { loss })
            }
            Objective::Pu { priors } => {
                let lp = pu(&mut t, priors);
                (lp.loss, if nn_descent { lp.descent } else { lp.loss })
            }
            Objective::Align => {
                let l = info_loss_var(&mut t, out.hf, batch.as_ref().expect("built"), &self.cfg.contrastive);
                (l, l)
            }
        };
        let (loss, objective) = if self.cfg.mu_orth > 0.0 {
            let o = orth_penalty_var(&mut t, v.rel_proj);
            let o = t.scale(o, self.cfg.mu_orth);
            (t.add(loss, o), t.add(objective, o))
        } else {
            (loss, objective)
        };
        let value = t.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {}", self.steps)));
        }
        let mut grads = t.backward(objective);
        let g: Vec<_> = v.all().iter().map(|&x| grads.take(x)).collect();
        self.opt.step(&mut self.params.blocks_mut(), &g);
        self.steps += 1;
        Ok(value)
    }

    fn batch(&mut self, chunk: &[(usize, usize)]) -> ContrastiveBatch {
        match self.cfg.neg_strategy {
            NegativeStrategy::InBatch => {
                ContrastiveBatch::in_batch(chunk, self.cfg.n_neg, NegativeStrategy::InBatch, &mut self.rng)
            }
            NegativeStrategy::Uniform => ContrastiveBatch::from_pools(
                chunk,
                &self.src_pool,
                &self.tgt_pool,
                self.cfg.n_neg,
                NegativeStrategy::Uniform,
                &mut self.rng,
            ),
        }
    }

    pub fn embed(&self) -> Result<EmbeddingTable> {
        encode_graph(&self.graph, &self.params, self.cfg.encoder.depth, false)
    }

    /// Inference embeddings and `P(matchable)` per joint id.
    pub fn predict(&self) -> Result<(EmbeddingTable, Vec<f64>)> {
        let emb = self.embed()?;
        let p = self.params.clf_head.predict(&emb.hf);
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("classifier output".into()));
        }
        Ok((emb, p))
    }
}

/// New anchor pairs (local ids) found as mutual nearest neighbours among
/// matchable entities that are not yet anchored.
pub fn augment_anchors(
    emb: &EmbeddingTable,
    pair: &KgPair,
    current: &[(usize, usize)],
    matchable: &[bool],
    metric: Metric,
) -> Result<Vec<(usize, usize)>> {
    let used_s: HashSet<usize> = current.iter().map(|a| a.0).collect();
    let used_t: HashSet<usize> = current.iter().map(|a| a.1).collect();
    let srcs: Vec<usize> = (0..pair.source.n_entities())
        .filter(|s| !used_s.contains(s) && matchable[pair.global_src(*s)])
        .collect();
    let tgts: Vec<usize> = (0..pair.target.n_entities())
        .filter(|t| !used_t.contains(t) && matchable[pair.global_tgt(*t)])
        .collect();
    if srcs.is_empty() || tgts.is_empty() {
        return Ok(Vec::new());
    }
    let gs: Vec<usize> = srcs.iter().map(|&s| pair.global_src(s)).collect();
    let gt: Vec<usize> = tgts.iter().map(|&t| pair.global_tgt(t)).collect();
    let sim = similarity_matrix(&emb.select(&gs), &emb.select(&gt), metric)?;
    Ok(mutual_nn_pairs(&sim)
        .into_iter()
        .map(|(i, j, _)| (srcs[i], tgts[j]))
        .collect())
}
