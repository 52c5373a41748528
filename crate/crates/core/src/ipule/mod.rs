//! Iterative positive-unlabeled learning of the matchable/dangling split.
//!
//! Labeled positives are the entities of the training anchors; everything
//! else is unlabeled. After a joint warm-up on the contrastive and PU
//! objectives, the loop alternates an E-step (re-estimate the unlabeled
//! matchable prior from classifier output) with an M-step (retrain on the
//! PU risk under the new priors).

mod classifier;
mod priors;
mod train;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keesa::{EmbeddingTable, EncoderParams, KeesaConfig};
use crate::kgdata::{AnchorSplit, KgPair};
use crate::losses::{ContrastiveConfig, NegativeStrategy};

pub use classifier::{ClassifierHead, HeadFeatures};
pub(crate) use classifier::{classifier_var, head_input};
pub use priors::{unlabeled_prior, ClassPriors};
pub use train::{augment_anchors, Objective, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IpuleConfig {
    pub encoder: KeesaConfig,
    pub contrastive: ContrastiveConfig,
    pub lr: f64,
    /// Anchor pairs per optimisation step.
    pub batch_size: usize,
    /// Upper bound on negatives per query.
    pub n_neg: usize,
    pub neg_strategy: NegativeStrategy,
    /// Weight of the contrastive loss during warm-up; the PU risk gets `1 − β`.
    pub beta: f64,
    /// Weight of the relation-projection orthogonality penalty.
    pub mu_orth: f64,
    /// Let the PU risk update the encoder; when off it trains only the
    /// classifier head on fixed `h^f`.
    pub pu_encoder_grad: bool,
    /// When the non-negative correction of the PU risk goes negative,
    /// descend on its negation rather than on the flat clamp.
    pub pu_nn_descent: bool,
    pub warmup_epochs: usize,
    pub m_step_epochs: usize,
    pub max_em_iters: usize,
    /// Relative loss change below which an iteration counts as stable.
    pub tol_loss: f64,
    /// Absolute change of `π_p` below which an iteration counts as stable.
    pub tol_prior: f64,
    /// Consecutive stable iterations needed to stop.
    pub patience: usize,
    /// Epochs of contrastive training for the alignment model.
    pub align_epochs: usize,
    pub tau_align: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for IpuleConfig {
    fn default() -> Self {
        Self {
            encoder: KeesaConfig::default(),
            contrastive: ContrastiveConfig::default(),
            lr: 0.005,
            batch_size: 5120,
            n_neg: 256,
            neg_strategy: NegativeStrategy::InBatch,
            beta: 1e-3,
            mu_orth: 0.1,
            pu_encoder_grad: false,
            pu_nn_descent: false,
            warmup_epochs: 10,
            m_step_epochs: 5,
            max_em_iters: 50,
            tol_loss: 1e-4,
            tol_prior: 1e-3,
            patience: 3,
            align_epochs: 100,
            tau_align: 0.05,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl IpuleConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !(self.lr > 0.0) {
            return Err(Error::invalid("lr must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::invalid("beta must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.tau_align) || !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::invalid("tau_align and threshold must be probabilities"));
        }
        if !(self.contrastive.lambda > 0.0) || self.contrastive.gamma < 0.0 {
            return Err(Error::invalid("lambda must be positive and gamma non-negative"));
        }
        if self.mu_orth < 0.0 || self.tol_loss < 0.0 || self.tol_prior < 0.0 {
            return Err(Error::invalid("weights and tolerances must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Em,
}

/// One row per warm-up epoch and per EM iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
    pub pi_p: f64,
    pub pi_p_u: f64,
}

#[derive(Clone, Debug)]
pub struct DetectionResult {
    /// `P(matchable)` per joint entity id.
    pub prob_matchable: Vec<f64>,
    /// Matchable flag per joint id; labeled entities are always matchable.
    pub matchable: Vec<bool>,
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub priors: ClassPriors,
    pub history: Vec<HistoryRecord>,
    pub em_iters: usize,
    pub converged: bool,
    pub alignable: bool,
    pub params: EncoderParams,
    pub embeddings: EmbeddingTable,
}

impl DetectionResult {
    pub fn predicted_dangling(&self) -> Vec<bool> {
        self.matchable.iter().map(|m| !m).collect()
    }
}

/// Labeled positives (both ends of the training anchors) and the rest.
pub fn pu_sets(pair: &KgPair, split: &AnchorSplit) -> (Vec<usize>, Vec<usize>) {
    let mut is_p = vec![false; pair.n_total_entities()];
    for &(s, t) in &split.train {
        is_p[pair.global_src(s)] = true;
        is_p[pair.global_tgt(t)] = true;
    }
    let labeled = (0..is_p.len()).filter(|&e| is_p[e]).collect();
    let unlabeled = (0..is_p.len()).filter(|&e| !is_p[e]).collect();
    (labeled, unlabeled)
}

/// Matchable share of the unlabeled set at `threshold`, turned into priors.
pub fn e_step(prob_matchable: &[f64], unlabeled: &[usize], pi_p_tr: f64, threshold: f64) -> Result<ClassPriors> {
    if unlabeled.is_empty() {
        return Err(Error::invalid("unlabeled set is empty"));
    }
    let mut pos = 0usize;
    for &e in unlabeled {
        let p = *prob_matchable
            .get(e)
            .ok_or_else(|| Error::invalid(format!("entity {e} has no probability")))?;
        if p > threshold {
            pos += 1;
        }
    }
    ClassPriors::from_unlabeled(pos as f64 / unlabeled.len() as f64, pi_p_tr)
}

pub fn is_alignable(priors: &ClassPriors, tau_align: f64) -> bool {
    priors.pi_p_u >= tau_align
}

pub fn run_ipule(pair: &KgPair, split: &AnchorSplit, cfg: &IpuleConfig) -> Result<DetectionResult> {
    cfg.validate()?;
    let (labeled, unlabeled) = pu_sets(pair, split);
    let mut priors = ClassPriors::initial(labeled.len(), unlabeled.len())?;
    let pi_p_tr = priors.pi_p_tr;
    let anchors: Vec<(usize, usize)> = split
        .train
        .iter()
        .map(|&(s, t)| (pair.global_src(s), pair.global_tgt(t)))
        .collect();
    let mut trainer = Trainer::new(pair, cfg)?;
    let mut history = Vec::new();

    let warm = Objective::Joint { priors, beta: cfg.beta };
    for _ in 0..cfg.warmup_epochs {
        let loss = trainer.epoch(&anchors, &labeled, &unlabeled, &warm)?;
        history.push(HistoryRecord {
            step: history.len(),
            phase: Phase::Warmup,
            loss,
            pi_p: priors.pi_p,
            pi_p_u: priors.pi_p_u,
        });
    }

    let mut converged = false;
    let mut stable = 0;
    let mut prev_loss: Option<f64> = None;
    let mut em_iters = 0;
    for _ in 0..cfg.max_em_iters {
        let (_, probs) = trainer.predict()?;
        let next = e_step(&probs, &unlabeled, pi_p_tr, cfg.threshold)?;
        let d_prior = (next.pi_p - priors.pi_p).abs();
        priors = next;
        if priors.pi_n == 0.0 {
            log::warn!("every unlabeled entity is predicted matchable; stopping");
            converged = true;
            break;
        }
        let obj = Objective::Pu { priors };
        let mut loss = f64::NAN;
        for _ in 0..cfg.m_step_epochs.max(1) {
            loss = trainer.epoch(&anchors, &labeled, &unlabeled, &obj)?;
        }
        em_iters += 1;
        history.push(HistoryRecord {
            step: history.len(),
            phase: Phase::Em,
            loss,
            pi_p: priors.pi_p,
            pi_p_u: priors.pi_p_u,
        });
        let loss_stable = prev_loss.is_some_and(|p| (loss - p).abs() <= cfg.tol_loss * p.abs().max(1e-12));
        stable = if loss_stable || d_prior < cfg.tol_prior { stable + 1 } else { 0 };
        prev_loss = Some(loss);
        log::debug!("em iter {em_iters}: loss {loss:.6}, pi_p_u {:.4}", priors.pi_p_u);
        if stable >= cfg.patience {
            converged = true;
            break;
        }
    }
    if cfg.max_em_iters == 0 {
        converged = true;
    }

    let (embeddings, probs) = trainer.predict()?;
    priors = e_step(&probs, &unlabeled, pi_p_tr, cfg.threshold)?;
    let mut matchable: Vec<bool> = probs.iter().map(|&p| p > cfg.threshold).collect();
    for &e in &labeled {
        matchable[e] = true;
    }
    Ok(DetectionResult {
        prob_matchable: probs,
        matchable,
        labeled,
        unlabeled,
        alignable: is_alignable(&priors, cfg.tau_align),
        priors,
        history,
        em_iters,
        converged,
        params: trainer.into_params(),
        embeddings,
    })
}

/// Trains the alignment model on the training anchors with the contrastive
/// loss and orthogonality penalty, starting from `init` when given. Returns
/// the parameters, their inference embeddings and the per-epoch losses.
pub fn train_alignment(
    pair: &KgPair,
    split: &AnchorSplit,
    cfg: &IpuleConfig,
    init: Option<EncoderParams>,
) -> Result<(EncoderParams, EmbeddingTable, Vec<f64>)> {
    let anchors: Vec<(usize, usize)> = split
        .train
        .iter()
        .map(|&(s, t)| (pair.global_src(s), pair.global_tgt(t)))
        .collect();
    let mut trainer = match init {
        Some(p) => Trainer::with_params(pair, p, cfg)?,
        None => Trainer::new(pair, cfg)?,
    };
    let mut losses = Vec::with_capacity(cfg.align_epochs);
    for _ in 0..cfg.align_epochs {
        losses.push(trainer.epoch(&anchors, &[], &[], &Objective::Align)?);
    }
    let emb = trainer.embed()?;
    Ok((trainer.into_params(), emb, losses))
}

pub fn write_history_csv(history: &[HistoryRecord], path: &Path) -> Result<()> {
    let mut s = String::from("step,phase,loss,pi_p,pi_p_u\n");
    for h in history {
        let phase = match h.phase {
            Phase::Warmup => "warmup",
            Phase::Em => "em",
        };
        writeln!(s, "{},{phase},{},{},{}", h.step, h.loss, h.pi_p, h.pi_p_u).expect("string write");
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
