//! Similarity, mutual-nearest-neighbour alignment and evaluation metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::keesa::EmbeddingTable;
use crate::kgdata::KgPair;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Metric {
    Cosine,
    Csls { k: usize },
}

impl Default for Metric {
    fn default() -> Self {
        Metric::Csls { k: 10 }
    }
}

fn norm(v: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in v {
        s += x * x;
    }
    s.sqrt()
}

/// `a·b / (‖a‖‖b‖)`, summed left to right; zero when either norm is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    cosine_with_norms(a, b, na, nb)
}

fn cosine_with_norms(a: &[f64], b: &[f64], na: f64, nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let mut dot = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
    }
    dot / (na * nb)
}

fn rows(m: &Mat) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn cosine_matrix(src: &Mat, tgt: &Mat) -> Result<Mat> {
    if src.ncols() != tgt.ncols() {
        return Err(Error::invalid("source and target widths differ"));
    }
    let (s, t) = (rows(src), rows(tgt));
    let ns: Vec<f64> = s.iter().map(|r| norm(r)).collect();
    let nt: Vec<f64> = t.iter().map(|r| norm(r)).collect();
    Ok(Mat::from_shape_fn((s.len(), t.len()), |(i, j)| {
        cosine_with_norms(&s[i], &t[j], ns[i], nt[j])
    }))
}

/// Mean of the `k` largest values, summed in descending order.
fn top_k_mean(mut vals: Vec<f64>, k: usize) -> f64 {
    let desc = |a: &f64, b: &f64| b.total_cmp(a);
    if k < vals.len() {
        vals.select_nth_unstable_by(k - 1, desc);
        vals.truncate(k);
    }
    vals.sort_unstable_by(desc);
    vals.iter().sum::<f64>() / vals.len() as f64
}

fn clip_k(k: usize, n: usize, side: &str) -> Result<usize> {
    if k == 0 {
        return Err(Error::invalid("CSLS k must be at least 1"));
    }
    if k > n {
        log::warn!("CSLS k = {k} exceeds the {n} {side} candidates; using {n}");
        return Ok(n);
    }
    Ok(k)
}

/// `2·cos(x, y) − r_T(x) − r_S(y)`, where `r_T(x)` is the mean cosine of `x`
/// to its `k` nearest targets and `r_S(y)` that of `y` to its `k` nearest
/// sources.
pub fn csls_matrix(src: &Mat, tgt: &Mat, k: usize) -> Result<Mat> {
    let cos = cosine_matrix(src, tgt)?;
    let (n, m) = cos.dim();
    if n == 0 || m == 0 {
        return Ok(cos);
    }
    let kt = clip_k(k, m, "target")?;
    let ks = clip_k(k, n, "source")?;
    let r_t: Vec<f64> = (0..n).map(|i| top_k_mean(cos.row(i).to_vec(), kt)).collect();
    let r_s: Vec<f64> = (0..m).map(|j| top_k_mean(cos.column(j).to_vec(), ks)).collect();
    Ok(Mat::from_shape_fn((n, m), |(i, j)| 2.0 * cos[[i, j]] - r_t[i] - r_s[j]))
}

pub fn similarity_matrix(src: &Mat, tgt: &Mat, metric: Metric) -> Result<Mat> {
    match metric {
        Metric::Cosine => cosine_matrix(src, tgt),
        Metric::Csls { k } => csls_matrix(src, tgt, k),
    }
}

/// Pairs `(i, j, sim)` where `j` is the best column of row `i` and `i` the
/// best row of column `j`; ties go to the lowest index.
pub fn mutual_nn_pairs(sim: &Mat) -> Vec<(usize, usize, f64)> {
    let (n, m) = sim.dim();
    if n == 0 || m == 0 {
        return Vec::new();
    }
    let mut row_best = vec![0usize; n];
    let mut col_best = vec![0usize; m];
    for i in 0..n {
        for j in 0..m {
            let v = sim[[i, j]];
            if v > sim[[i, row_best[i]]] {
                row_best[i] = j;
            }
            if v > sim[[col_best[j], j]] {
                col_best[j] = i;
            }
        }
    }
    (0..n)
        .filter(|&i| col_best[row_best[i]] == i)
        .map(|i| (i, row_best[i], sim[[i, row_best[i]]]))
        .collect()
}

/// Ranked candidate lists (local target ids, best first) per local source id.
pub type Rankings = BTreeMap<usize, Vec<usize>>;

/// Ranks `tgt_ids` for each of `src_ids` (local ids), keeping `depth`
/// candidates. Ties keep candidate order.
pub fn rank_candidates(
    emb: &EmbeddingTable,
    pair: &KgPair,
    src_ids: &[usize],
    tgt_ids: &[usize],
    metric: Metric,
    depth: usize,
) -> Result<Rankings> {
    let gs: Vec<usize> = src_ids.iter().map(|&s| pair.global_src(s)).collect();
    let gt: Vec<usize> = tgt_ids.iter().map(|&t| pair.global_tgt(t)).collect();
    if gs.iter().chain(&gt).any(|&g| g >= emb.n_entities()) {
        return Err(Error::invalid("entity outside the embedding table"));
    }
    let sim = similarity_matrix(&emb.select(&gs), &emb.select(&gt), metric)?;
    let mut out = Rankings::new();
    for (i, &s) in src_ids.iter().enumerate() {
        let mut order: Vec<usize> = (0..tgt_ids.len()).collect();
        order.sort_by(|&a, &b| sim[[i, b]].total_cmp(&sim[[i, a]]));
        order.truncate(depth);
        out.insert(s, order.into_iter().map(|j| tgt_ids[j]).collect());
    }
    Ok(out)
}

/// Share of `truth` pairs whose target sits in the top `k` of its source's
/// ranking.
pub fn hits_at_k(rankings: &Rankings, truth: &[(usize, usize)], k: usize) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::invalid("no ground-truth pairs"));
    }
    let mut hits = 0usize;
    for &(s, t) in truth {
        let list = rankings
            .get(&s)
            .ok_or_else(|| Error::invalid(format!("no ranking for source {s}")))?;
        if list.iter().take(k).any(|&c| c == t) {
            hits += 1;
        }
    }
    Ok(hits as f64 / truth.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    /// `(source, target, similarity)` in local ids.
    pub pairs: Vec<(usize, usize, f64)>,
    pub rankings: Rankings,
    pub metric: Metric,
}

/// Mutual-NN alignment among entities flagged matchable (joint ids).
pub fn align(
    emb: &EmbeddingTable,
    pair: &KgPair,
    matchable: &[bool],
    metric: Metric,
    depth: usize,
) -> Result<AlignmentResult> {
    if matchable.len() != pair.n_total_entities() {
        return Err(Error::invalid("matchable mask does not cover the pair"));
    }
    let srcs: Vec<usize> = (0..pair.source.n_entities())
        .filter(|&s| matchable[pair.global_src(s)])
        .collect();
    let tgts: Vec<usize> = (0..pair.target.n_entities())
        .filter(|&t| matchable[pair.global_tgt(t)])
        .collect();
    if srcs.is_empty() || tgts.is_empty() {
        log::warn!("no matchable entities on one side; alignment is empty");
        return Ok(AlignmentResult {
            pairs: Vec::new(),
            rankings: Rankings::new(),
            metric,
        });
    }
    let gs: Vec<usize> = srcs.iter().map(|&s| pair.global_src(s)).collect();
    let gt: Vec<usize> = tgts.iter().map(|&t| pair.global_tgt(t)).collect();
    let sim = similarity_matrix(&emb.select(&gs), &emb.select(&gt), metric)?;
    let pairs = mutual_nn_pairs(&sim)
        .into_iter()
        .map(|(i, j, v)| (srcs[i], tgts[j], v))
        .collect();
    let rankings = rank_candidates(emb, pair, &srcs, &tgts, metric, depth)?;
    Ok(AlignmentResult {
        pairs,
        rankings,
        metric,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

/// Precision/recall/F1 with `true` as the positive class.
pub fn binary_prf(pred: &[bool], truth: &[bool]) -> Result<Prf> {
    if pred.len() != truth.len() {
        return Err(Error::invalid("prediction and truth lengths differ"));
    }
    let tp = pred.iter().zip(truth).filter(|(p, t)| **p && **t).count() as f64;
    let n_pred = pred.iter().filter(|p| **p).count() as f64;
    let n_true = truth.iter().filter(|t| **t).count() as f64;
    let precision = if n_pred > 0.0 {
        tp / n_pred
    } else {
        log::warn!("no positive predictions; precision set to 0");
        0.0
    };
    let recall = if n_true > 0.0 { tp / n_true } else { 0.0 };
    Ok(Prf::from_pr(precision, recall))
}

/// Detection metrics with dangling as the positive class.
pub fn detection_prf(pred_dangling: &[bool], truth_dangling: &[bool]) -> Result<Prf> {
    binary_prf(pred_dangling, truth_dangling)
}

/// Alignment precision and recall as `p·H@1` and `r·H@1`, where `p`, `r`
/// are the matchable-class classifier precision and recall and `H@1` is
/// measured on correctly classified matchable sources.
pub fn consolidated_alignment_prf(precision: f64, recall: f64, hits1_classified: f64) -> Prf {
    Prf::from_pr(precision * hits1_classified, recall * hits1_classified)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelaxedHits {
    #[serde(rename = "hits@1")]
    pub hits1: f64,
    #[serde(rename = "hits@10")]
    pub hits10: f64,
    #[serde(rename = "hits@50")]
    pub hits50: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Dangling is the positive class.
    pub detection: Prf,
    pub alignment_relaxed: RelaxedHits,
    pub alignment_consolidated: Prf,
}

/// Held-out evaluation of a detection and an embedding.
///
/// * detection: over `unlabeled` (joint ids).
/// * relaxed: each test source ranked against the test targets only.
/// * consolidated: the matchable-class precision and recall over unlabeled
///   sources, times Hits@1 of correctly classified test sources ranked
///   against every unlabeled target predicted matchable.
pub fn evaluate(
    emb: &EmbeddingTable,
    pair: &KgPair,
    test: &[(usize, usize)],
    unlabeled: &[usize],
    matchable: &[bool],
    metric: Metric,
) -> Result<MetricReport> {
    let n = pair.n_total_entities();
    if matchable.len() != n {
        return Err(Error::invalid("matchable mask does not cover the pair"));
    }
    if unlabeled.iter().any(|&e| e >= n) {
        return Err(Error::invalid("unlabeled id outside the pair"));
    }
    let truth = pair.dangling_mask();
    let pick = |m: &[bool], ids: &[usize]| ids.iter().map(|&e| m[e]).collect::<Vec<_>>();
    let pred_dangling: Vec<bool> = matchable.iter().map(|m| !m).collect();
    let detection = detection_prf(&pick(&pred_dangling, unlabeled), &pick(&truth, unlabeled))?;

    let alignment_relaxed = if test.is_empty() {
        RelaxedHits { hits1: 0.0, hits10: 0.0, hits50: 0.0 }
    } else {
        let srcs: Vec<usize> = test.iter().map(|a| a.0).collect();
        let tgts: Vec<usize> = test.iter().map(|a| a.1).collect();
        let r = rank_candidates(emb, pair, &srcs, &tgts, metric, 50)?;
        RelaxedHits {
            hits1: hits_at_k(&r, test, 1)?,
            hits10: hits_at_k(&r, test, 10)?,
            hits50: hits_at_k(&r, test, 50)?,
        }
    };

    let n_src = pair.source.n_entities();
    let u_src: Vec<usize> = unlabeled.iter().copied().filter(|&e| e < n_src).collect();
    let is_match: Vec<bool> = truth.iter().map(|d| !d).collect();
    let cls = binary_prf(&pick(matchable, &u_src), &pick(&is_match, &u_src))?;
    let classified: Vec<(usize, usize)> = test
        .iter()
        .copied()
        .filter(|&(s, _)| matchable[pair.global_src(s)])
        .collect();
    let cands: Vec<usize> = unlabeled
        .iter()
        .filter(|&&e| e >= n_src && matchable[e])
        .map(|&e| e - n_src)
        .collect();
    let h1 = if classified.is_empty() || cands.is_empty() {
        0.0
    } else {
        let srcs: Vec<usize> = classified.iter().map(|a| a.0).collect();
        let r = rank_candidates(emb, pair, &srcs, &cands, metric, 1)?;
        hits_at_k(&r, &classified, 1)?
    };
    Ok(MetricReport {
        detection,
        alignment_relaxed,
        alignment_consolidated: consolidated_alignment_prf(cls.precision, cls.recall, h1),
    })
}

pub fn write_pairs_csv(pairs: &[(usize, usize, f64)], path: &Path) -> Result<()> {
    let mut s = String::from("src_id,tgt_id,score\n");
    for (a, b, v) in pairs {
        writeln!(s, "{a},{b},{v}").expect("string write");
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let s = serde_json::to_string_pretty(value)?;
    fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
}
