//! Training objectives: the margin-based contrastive alignment loss and the
//! positive-unlabeled risk used for dangling detection.

use std::rc::Rc;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{logsumexp, Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::ipule::ClassPriors;

/// Probabilities are clipped to `[PROB_CLIP, 1 − PROB_CLIP]` before logs.
pub const PROB_CLIP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeStrategy {
    /// Other entities of the same mini-batch.
    InBatch,
    /// Uniform draws from the candidate pool.
    Uniform,
}

/// Picks up to `n` negatives for `anchor` from `pool`, never returning the
/// anchor or its positive. In-batch keeps pool order; uniform samples
/// without replacement.
pub fn sample_negatives(
    anchor: usize,
    positive: usize,
    pool: &[usize],
    n: usize,
    strategy: NegativeStrategy,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let cands: Vec<usize> = pool
        .iter()
        .copied()
        .filter(|&e| e != anchor && e != positive)
        .collect();
    if cands.len() <= n {
        return cands;
    }
    match strategy {
        NegativeStrategy::InBatch => cands[..n].to_vec(),
        NegativeStrategy::Uniform => {
            let mut idx = sample(rng, cands.len(), n).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| cands[i]).collect()
        }
    }
}

/// `−‖a − b‖₂`.
pub fn similarity(a: &[f64], b: &[f64]) -> f64 {
    -a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `max(0, sim_neg − sim_pos + γ)`.
pub fn margin_h(sim_neg: f64, sim_pos: f64, gamma: f64) -> f64 {
    (sim_neg - sim_pos + gamma).max(0.0)
}

/// `−ln( e^{λ s⁺} / (e^{λ s⁺} + Σ e^{λ s⁻}) )` with `s = −‖·‖`.
pub fn infonce(query: &[f64], positive: &[f64], negatives: &[Vec<f64>], lambda: f64) -> f64 {
    // Dividing numerator and denominator by e^{λ s⁺} keeps small losses exact.
    let lp = lambda * similarity(query, positive);
    let shifted = negatives.iter().map(|n| lambda * similarity(query, n) - lp);
    logsumexp(std::iter::once(0.0).chain(shifted).collect::<Vec<_>>())
}

/// `Σ_i ln(1 + Σ_j exp(λ H_ij))` for one margin row per query.
pub fn info_loss_from_margins(h: &[Vec<f64>], lambda: f64) -> f64 {
    h.iter()
        .map(|row| logsumexp(std::iter::once(0.0).chain(row.iter().map(|&x| lambda * x)).collect::<Vec<_>>()))
        .sum()
}

/// The two sides of `max_j H_j ≤ (1/λ) ln Σ_j e^{λ H_j} ≤ max_j H_j + ln(N)/λ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothMax {
    pub smooth: f64,
    pub max: f64,
    pub upper: f64,
}

impl SmoothMax {
    pub fn holds(&self, tol: f64) -> bool {
        self.max <= self.smooth + tol && self.smooth <= self.upper + tol
    }
}

pub fn tuns_bound_check(h: &[f64], lambda: f64) -> Result<SmoothMax> {
    if h.is_empty() {
        return Err(Error::invalid("need at least one margin"));
    }
    if !(lambda > 0.0) {
        return Err(Error::invalid("lambda must be positive"));
    }
    let max = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let smooth = logsumexp(h.iter().map(|&x| lambda * x).collect::<Vec<_>>()) / lambda;
    Ok(SmoothMax {
        smooth,
        max,
        upper: max + (h.len() as f64).ln() / lambda,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub gamma: f64,
    pub lambda: f64,
    /// L2-normalise embeddings before measuring distances.
    pub normalize: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            lambda: 30.0,
            normalize: true,
        }
    }
}

/// Queries with their positives and negatives, all as embedding row ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContrastiveBatch {
    pub queries: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<Vec<usize>>,
}

impl ContrastiveBatch {
    /// Both directions of every anchor, negatives drawn from the batch
    /// members of the opposite side.
    pub fn in_batch(anchors: &[(usize, usize)], n_neg: usize, strategy: NegativeStrategy, rng: &mut impl Rng) -> Self {
        let src: Vec<usize> = anchors.iter().map(|a| a.0).collect();
        let tgt: Vec<usize> = anchors.iter().map(|a| a.1).collect();
        Self::from_pools(anchors, &src, &tgt, n_neg, strategy, rng)
    }

    /// Both directions of every anchor; source queries draw negatives from
    /// `tgt_pool` and target queries from `src_pool`.
    pub fn from_pools(
        anchors: &[(usize, usize)],
        src_pool: &[usize],
        tgt_pool: &[usize],
        n_neg: usize,
        strategy: NegativeStrategy,
        rng: &mut impl Rng,
    ) -> Self {
        let mut b = Self::default();
        for &(s, t) in anchors {
            b.queries.push(s);
            b.positives.push(t);
            b.negatives.push(sample_negatives(s, t, tgt_pool, n_neg, strategy, rng));
            b.queries.push(t);
            b.positives.push(s);
            b.negatives.push(sample_negatives(t, s, src_pool, n_neg, strategy, rng));
        }
        b
    }

    fn validate(&self, n_rows: usize) -> Result<()> {
        if self.queries.len() != self.positives.len() || self.queries.len() != self.negatives.len() {
            return Err(Error::invalid("batch fields have different lengths"));
        }
        let all = self
            .queries
            .iter()
            .chain(&self.positives)
            .chain(self.negatives.iter().flatten());
        if all.into_iter().any(|&e| e >= n_rows) {
            return Err(Error::invalid("batch refers to a missing embedding row"));
        }
        Ok(())
    }
}

/// Tape form of the contrastive loss over embedding matrix `emb`.
pub(crate) fn info_loss_var(tape: &mut Tape, emb: Var, batch: &ContrastiveBatch, cfg: &ContrastiveConfig) -> Var {
    let e = if cfg.normalize { tape.row_normalize(emb) } else { emb };
    let m = batch.queries.len();
    let q = tape.gather_rows(e, batch.queries.clone().into());
    let p = tape.gather_rows(e, batch.positives.clone().into());
    let d_pos = tape.row_distance(q, p);

    let mut q_rep = Vec::new();
    let mut n_flat = Vec::new();
    for (i, negs) in batch.negatives.iter().enumerate() {
        q_rep.extend(std::iter::repeat_n(i, negs.len()));
        n_flat.extend(negs.iter().copied());
    }
    let q_ids: Rc<[usize]> = q_rep.iter().map(|&i| batch.queries[i]).collect();
    let qn = tape.gather_rows(e, q_ids);
    let nn = tape.gather_rows(e, n_flat.into());
    let d_neg = tape.row_distance(qn, nn);
    let seg: Rc<[usize]> = q_rep.into();
    let d_pos_rep = tape.gather_rows(d_pos, seg.clone());
    // sim⁻ − sim⁺ = d⁺ − d⁻
    let diff = tape.sub(d_pos_rep, d_neg);
    let h = tape.shift(diff, cfg.gamma);
    let h = tape.relu(h);
    let scaled = tape.scale(h, cfg.lambda);
    let per_query = tape.segment_log1p_sum_exp(scaled, seg, m);
    tape.sum(per_query)
}

pub fn spectral_contrastive_loss(emb: &Mat, batch: &ContrastiveBatch, cfg: &ContrastiveConfig) -> Result<f64> {
    batch.validate(emb.nrows())?;
    let mut t = Tape::new();
    let e = t.leaf(emb.clone());
    let l = info_loss_var(&mut t, e, batch, cfg);
    let v = t.scalar(l);
    if !v.is_finite() {
        return Err(Error::NonFinite("contrastive loss".into()));
    }
    Ok(v)
}

/// Empirical risks: `R_p^+` and `R_p^-` over labeled positives, `R_u^-` over
/// the unlabeled set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskTerms {
    pub r_p_pos: f64,
    pub r_p_neg: f64,
    pub r_u_neg: f64,
}

fn nll(p: f64) -> f64 {
    -p.clamp(PROB_CLIP, 1.0 - PROB_CLIP).ln()
}

/// Negative-log-likelihood risks from `P(matchable)` per entity.
pub fn risk_terms(prob_matchable: &[f64], labeled_pos: &[usize], unlabeled: &[usize]) -> Result<RiskTerms> {
    if labeled_pos.is_empty() || unlabeled.is_empty() {
        return Err(Error::invalid("labeled and unlabeled sets must be non-empty"));
    }
    let get = |i: usize| {
        prob_matchable
            .get(i)
            .copied()
            .ok_or_else(|| Error::invalid(format!("entity {i} has no probability")))
    };
    let mean = |ids: &[usize], f: &dyn Fn(f64) -> f64| -> Result<f64> {
        let mut s = 0.0;
        for &i in ids {
            s += f(get(i)?);
        }
        Ok(s / ids.len() as f64)
    };
    Ok(RiskTerms {
        r_p_pos: mean(labeled_pos, &|p| nll(p))?,
        r_p_neg: mean(labeled_pos, &|p| nll(1.0 - p))?,
        r_u_neg: mean(unlabeled, &|p| nll(1.0 - p))?,
    })
}

/// `α π_p R_p^+ + max(0, R_u^- − π_p^u R_p^-)`.
pub fn pu_loss(terms: &RiskTerms, priors: &ClassPriors) -> Result<f64> {
    priors.validate()?;
    if priors.pi_n == 0.0 {
        return Err(Error::invalid("pi_n is zero, the reweighting is undefined"));
    }
    Ok(priors.alpha * priors.pi_p * terms.r_p_pos + (terms.r_u_neg - priors.pi_p_u * terms.r_p_neg).max(0.0))
}

/// `π_p R_p^+ + (π_n / π_n^u)(R_u^- − π_p^u R_p^-)`, an unbiased estimate of
/// the classification risk.
pub fn unbiased_risk(terms: &RiskTerms, priors: &ClassPriors) -> Result<f64> {
    priors.validate()?;
    if priors.pi_n_u == 0.0 {
        return Err(Error::invalid("pi_n_u is zero, the reweighting is undefined"));
    }
    Ok(priors.pi_p * terms.r_p_pos + priors.pi_n / priors.pi_n_u * (terms.r_u_neg - priors.pi_p_u * terms.r_p_neg))
}

/// `β·L_info + (1 − β)·L_pu + μ_o·L_o`.
pub fn combined_warmup_loss(l_info: f64, l_pu: f64, l_o: f64, beta: f64, mu_o: f64) -> f64 {
    beta * l_info + (1.0 - beta) * l_pu + mu_o * l_o
}

/// Tape form of [`pu_loss`] over class probabilities (`n × 2`, column 0 is
/// matchable). `descent` is what to differentiate: the loss
/// itself, or `−(R_u^- − π_p^u R_p^-)` when that term is negative, which
/// pushes the correction back to non-negative instead of leaving it flat.
pub(crate) struct PuVars {
    pub loss: Var,
    pub descent: Var,
}

pub(crate) fn pu_loss_var(
    tape: &mut Tape,
    probs: Var,
    labeled: Rc<[usize]>,
    unlabeled: Rc<[usize]>,
    priors: &ClassPriors,
) -> PuVars {
    let pos = tape.slice_cols(probs, 0, 1);
    let neg = tape.slice_cols(probs, 1, 1);
    let mut risk = |col: Var, ids: Rc<[usize]>| {
        let x = tape.gather_rows(col, ids);
        let l = tape.clamped_ln(x, PROB_CLIP, 1.0 - PROB_CLIP);
        let m = tape.mean(l);
        tape.scale(m, -1.0)
    };
    let r_p_pos = risk(pos, labeled.clone());
    let r_p_neg = risk(neg, labeled);
    let r_u_neg = risk(neg, unlabeled);
    let a = tape.scale(r_p_pos, priors.alpha * priors.pi_p);
    let b = tape.scale(r_p_neg, priors.pi_p_u);
    let inner = tape.sub(r_u_neg, b);
    let clamped = tape.relu(inner);
    let loss = tape.add(a, clamped);
    let descent = if tape.scalar(inner) < 0.0 { tape.scale(inner, -1.0) } else { loss };
    PuVars { loss, descent }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use crate::ipule::unlabeled_prior;

    fn priors(pi_p: f64, pi_p_u: f64) -> ClassPriors {
        ClassPriors::new(pi_p, pi_p_u, 0.3).unwrap()
    }

    #[test]
    fn margin_examples() {
        assert_eq!(margin_h(-0.5, -0.2, 1.0), 0.7);
        assert_eq!(margin_h(-3.0, -0.2, 1.0), 0.0);
    }

    #[test]
    fn zero_margins_give_log_one_plus_n() {
        let h = vec![vec![0.0; 7]; 4];
        let want = 4.0 * 8f64.ln();
        assert!((info_loss_from_margins(&h, 30.0) - want).abs() < 1e-12);
    }

    #[test]
    fn smooth_max_bounds() {
        let b = tuns_bound_check(&[0.1, 0.5, 0.2], 30.0).unwrap();
        assert!(b.holds(0.0));
        assert!(tuns_bound_check(&[], 1.0).is_err());
        let tie = tuns_bound_check(&[1.0, 1.0], 2.0).unwrap();
        assert!((tie.smooth - tie.upper).abs() < 1e-12);
    }

    #[test]
    fn in_batch_negatives_exclude_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = sample_negatives(1, 11, &[10, 11, 12, 13], 5, NegativeStrategy::InBatch, &mut rng);
        assert_eq!(n, vec![10, 12, 13]);
        let n = sample_negatives(1, 11, &[10, 11, 12, 13], 2, NegativeStrategy::Uniform, &mut rng);
        assert_eq!(n.len(), 2);
        assert!(!n.contains(&11));
    }

    #[test]
    fn tape_loss_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let emb = Mat::from_shape_fn((8, 3), |_| rng.random_range(-1.0..1.0));
        let anchors = [(0, 4), (1, 5), (2, 6)];
        let batch = ContrastiveBatch::in_batch(&anchors, 10, NegativeStrategy::InBatch, &mut rng);
        let cfg = ContrastiveConfig {
            normalize: false,
            ..Default::default()
        };
        let got = spectral_contrastive_loss(&emb, &batch, &cfg).unwrap();
        let row = |i: usize| emb.row(i).to_vec();
        let h: Vec<Vec<f64>> = (0..batch.queries.len())
            .map(|k| {
                let q = row(batch.queries[k]);
                let sp = similarity(&q, &row(batch.positives[k]));
                batch.negatives[k]
                    .iter()
                    .map(|&n| margin_h(similarity(&q, &row(n)), sp, cfg.gamma))
                    .collect()
            })
            .collect();
        let want = info_loss_from_margins(&h, cfg.lambda);
        assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0));
    }

    #[test]
    fn batch_validation() {
        let emb = Mat::zeros((3, 2));
        let bad = ContrastiveBatch {
            queries: vec![0],
            positives: vec![5],
            negatives: vec![vec![1]],
        };
        assert!(spectral_contrastive_loss(&emb, &bad, &ContrastiveConfig::default()).is_err());
    }

    #[test]
    fn risk_terms_clip_extremes() {
        let t = risk_terms(&[1.0, 0.0, 0.5], &[0], &[1, 2]).unwrap();
        assert_eq!(t.r_p_pos, -(1.0 - PROB_CLIP).ln());
        assert!((t.r_p_neg + PROB_CLIP.ln()).abs() < 1e-9);
        assert!(t.r_p_neg.is_finite());
        assert!((t.r_u_neg - 0.5 * (-(1.0 - PROB_CLIP).ln() + 2f64.ln())).abs() < 1e-12);
        assert!(risk_terms(&[0.5], &[], &[0]).is_err());
        assert!(risk_terms(&[0.5], &[3], &[0]).is_err());
    }

    #[test]
    fn even_odds_give_ln_two_everywhere() {
        let t = risk_terms(&[0.5; 4], &[0, 1], &[2, 3]).unwrap();
        for v in [t.r_p_pos, t.r_p_neg, t.r_u_neg] {
            assert!((v - 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_computed_risk_means() {
        let t = risk_terms(&[0.8, 0.4, 0.3, 0.9], &[0, 1], &[2, 3]).unwrap();
        assert!((t.r_p_pos - -(0.8f64.ln() + 0.4f64.ln()) / 2.0).abs() < 1e-15);
        assert!((t.r_p_neg - -(0.2f64.ln() + 0.6f64.ln()) / 2.0).abs() < 1e-15);
        assert!((t.r_u_neg - -(0.7f64.ln() + 0.1f64.ln()) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn pu_loss_worked_example() {
        let pi_p_u = unlabeled_prior(0.6, 0.3).unwrap();
        let p = ClassPriors::new(0.6, pi_p_u, 0.3).unwrap();
        assert!((p.alpha - 1.0 / 0.7).abs() < 1e-12);
        let t = RiskTerms {
            r_p_pos: 0.2,
            r_p_neg: 1.0,
            r_u_neg: 0.5,
        };
        let l = pu_loss(&t, &p).unwrap();
        let want = (4.0 / 7.0) / 0.4 * 0.6 * 0.2 + (0.5 - 3.0 / 7.0);
        assert!((l - want).abs() < 1e-12);
        assert!((l - 0.2429).abs() < 5e-5);
    }

    #[test]
    fn unlabeled_all_negative_drops_the_subtraction() {
        let t = RiskTerms {
            r_p_pos: 0.3,
            r_p_neg: 2.0,
            r_u_neg: 0.7,
        };
        let p = ClassPriors::new(0.25, 0.0, 0.25).unwrap();
        assert!((pu_loss(&t, &p).unwrap() - (p.alpha * 0.25 * 0.3 + 0.7)).abs() < 1e-15);
        let balanced = ClassPriors::new(0.0, 0.0, 0.0).unwrap();
        assert_eq!(balanced.pi_n, balanced.pi_n_u);
        assert!((unbiased_risk(&t, &balanced).unwrap() - 0.7).abs() < 1e-15);
        let zero = RiskTerms {
            r_p_pos: 0.0,
            r_p_neg: 0.0,
            r_u_neg: 0.0,
        };
        assert_eq!(unbiased_risk(&zero, &balanced).unwrap(), 0.0);
    }

    #[test]
    fn warmup_mixture() {
        assert_eq!(combined_warmup_loss(2.0, 3.0, 4.0, 1.0, 0.0), 2.0);
        assert_eq!(combined_warmup_loss(2.0, 3.0, 4.0, 0.0, 0.0), 3.0);
        assert!((combined_warmup_loss(1.0, 1.0, 1.0, 1e-3, 0.1) - (1e-3 + 0.999 + 0.1)).abs() < 1e-15);
    }

    #[test]
    fn pu_loss_clamps_negative_inner_term() {
        let t = RiskTerms {
            r_p_pos: 0.2,
            r_p_neg: 5.0,
            r_u_neg: 0.1,
        };
        let p = priors(0.5, 0.4);
        let l = pu_loss(&t, &p).unwrap();
        assert!((l - p.alpha * 0.5 * 0.2).abs() < 1e-15);
        let mut degenerate = p;
        degenerate.pi_n = 0.0;
        degenerate.pi_p = 1.0;
        assert!(pu_loss(&t, &degenerate).is_err());
    }

    #[test]
    fn pu_tape_matches_scalar() {
        let probs = Mat::from_shape_vec(
            (5, 2),
            vec![0.9, 0.1, 0.6, 0.4, 0.2, 0.8, 0.7, 0.3, 0.05, 0.95],
        )
        .unwrap();
        let p = priors(0.55, 0.35);
        let mut t = Tape::new();
        let v = t.leaf(probs.clone());
        let l = pu_loss_var(&mut t, v, vec![0, 1].into(), vec![2, 3, 4].into(), &p);
        let col: Vec<f64> = probs.column(0).to_vec();
        let want = pu_loss(&risk_terms(&col, &[0, 1], &[2, 3, 4]).unwrap(), &p).unwrap();
        assert!((t.scalar(l.loss) - want).abs() < 1e-12);
    }

    #[test]
    fn negative_correction_descends_on_its_negation() {
        // Labeled rows nearly certain positive, so π_p^u R_p^- outweighs R_u^-.
        let probs = Mat::from_shape_vec((3, 2), vec![0.99, 0.01, 0.99, 0.01, 0.5, 0.5]).unwrap();
        let p = priors(0.55, 0.35);
        let mut t = Tape::new();
        let v = t.leaf(probs.clone());
        let l = pu_loss_var(&mut t, v, vec![0, 1].into(), vec![2].into(), &p);
        let terms = risk_terms(&probs.column(0).to_vec(), &[0, 1], &[2]).unwrap();
        let inner = terms.r_u_neg - p.pi_p_u * terms.r_p_neg;
        assert!(inner < 0.0);
        assert!((t.scalar(l.loss) - p.alpha * p.pi_p * terms.r_p_pos).abs() < 1e-12);
        assert!((t.scalar(l.descent) + inner).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn infonce_equals_log1p_form(seed in 0u64..500, n_neg in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = || (0..4).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
            let q = v();
            let p = v();
            let negs: Vec<Vec<f64>> = (0..n_neg).map(|_| v()).collect();
            let lambda = 30.0;
            let sp = similarity(&q, &p);
            let row: Vec<f64> = negs.iter().map(|n| similarity(&q, n) - sp).collect();
            let a = infonce(&q, &p, &negs, lambda);
            let b = info_loss_from_margins(&[row], lambda);
            prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1e-300), "{} vs {}", a, b);
        }

        #[test]
        fn smooth_max_bound_holds(h in proptest::collection::vec(-5.0f64..5.0, 1..20), lambda in 0.1f64..100.0) {
            prop_assert!(tuns_bound_check(&h, lambda).unwrap().holds(1e-12));
        }

        #[test]
        fn info_loss_nonnegative(h in proptest::collection::vec(proptest::collection::vec(0.0f64..3.0, 0..6), 1..5)) {
            prop_assert!(info_loss_from_margins(&h, 30.0) >= 0.0);
        }
    }
}
