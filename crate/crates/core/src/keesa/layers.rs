//! Tape-level building blocks of the encoder, plus plain-matrix wrappers
//! that run the same code on a throwaway tape.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DropoutSite, EdgeList, EncoderParams, ParamVars};
use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub(crate) struct ForwardOptions {
    pub dropout: f64,
    pub site: DropoutSite,
    pub seed: u64,
}

impl ForwardOptions {
    pub fn inference() -> Self {
        Self {
            dropout: 0.0,
            site: DropoutSite::LayerInput,
            seed: 0,
        }
    }
}

pub(crate) struct ForwardOutput {
    pub hf: Var,
    pub layers: Vec<Var>,
}

/// Attention weights per edge: segment softmax over each head entity of
/// `r_j · vᵀ(W_r h_rk)`.
fn attention_var(tape: &mut Tape, g: &EdgeList, rel: Var, ind: Var, proj: Var, attn: Var) -> Var {
    let proj_t = tape.transpose(proj);
    let projected = tape.matmul(rel, proj_t);
    let per_rel = tape.matmul(projected, attn);
    let per_edge = tape.gather_rows(per_rel, g.rels.clone());
    let r_j = tape.gather_rows(ind, g.tails.clone());
    let logits = tape.mul(per_edge, r_j);
    tape.segment_softmax(logits, g.heads.clone(), g.n_entities)
}

/// One aggregation step. `edge_coef` is `tanh(r_j)·α_ijk` per edge and
/// `self_coef` is `tanh(r_i)` per entity.
fn layer_var(tape: &mut Tape, g: &EdgeList, h: Var, rel_hat: Var, edge_coef: Var, self_coef: Var) -> Var {
    let h_j = tape.gather_rows(h, g.tails.clone());
    let r = tape.gather_rows(rel_hat, g.rels.clone());
    let hr = tape.mul(h_j, r);
    let dot = tape.row_sum(hr);
    let along = tape.mul_col(r, dot);
    let along = tape.scale(along, 2.0);
    let reflected = tape.sub(h_j, along);
    let msg = tape.mul_col(reflected, edge_coef);
    let agg = tape.scatter_rows(msg, g.heads.clone(), g.n_entities);
    let own = tape.mul_col(h, self_coef);
    let pre = tape.add(agg, own);
    tape.tanh(pre)
}

/// `H − softmax(cos(H, Q))·Q`.
fn proxy_var(tape: &mut Tape, h: Var, proxies: Var) -> Var {
    let hn = tape.row_normalize(h);
    let qn = tape.row_normalize(proxies);
    let qn_t = tape.transpose(qn);
    let cos = tape.matmul(hn, qn_t);
    let a = tape.row_softmax(cos);
    let aq = tape.matmul(a, proxies);
    tape.sub(h, aq)
}

/// `[θ⊙H + (1−θ)⊙H_p ‖ r]` with `θ = σ(H_p W_gᵀ + b)`.
fn gate_var(tape: &mut Tape, h: Var, hp: Var, w: Var, b: Var, ind: Var) -> Var {
    let w_t = tape.transpose(w);
    let z = tape.matmul(hp, w_t);
    let z = tape.add_row(z, b);
    let theta = tape.sigmoid(z);
    let diff = tape.sub(h, hp);
    let gated = tape.mul(theta, diff);
    let fused = tape.add(hp, gated);
    tape.concat_cols(&[fused, ind])
}

/// `‖W_rᵀW_r − I‖²_F`.
pub(crate) fn orth_penalty_var(tape: &mut Tape, w: Var) -> Var {
    let d = tape.value(w).ncols();
    let w_t = tape.transpose(w);
    let gram = tape.matmul(w_t, w);
    let eye = tape.leaf(Array2::eye(d));
    let diff = tape.sub(gram, eye);
    let sq = tape.mul(diff, diff);
    tape.sum(sq)
}

fn dropout_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize, p: f64) -> Mat {
    let keep = 1.0 / (1.0 - p);
    Mat::from_shape_fn((rows, cols), |_| if rng.random_bool(p) { 0.0 } else { keep })
}

pub(crate) fn forward(
    tape: &mut Tape,
    g: &EdgeList,
    p: &ParamVars,
    depth: usize,
    opts: &ForwardOptions,
) -> ForwardOutput {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let drop = opts.dropout > 0.0;

    let mut alpha = attention_var(tape, g, p.rel_emb, p.indicator, p.rel_proj, p.attn_vec);
    if drop && opts.site == DropoutSite::Attention {
        let mask = tape.leaf(dropout_mask(&mut rng, g.len(), 1, opts.dropout));
        alpha = tape.mul(alpha, mask);
    }
    let gate = tape.tanh(p.indicator);
    let gate_j = tape.gather_rows(gate, g.tails.clone());
    let edge_coef = tape.mul(alpha, gate_j);
    let rel_hat = tape.row_normalize(p.rel_emb);

    let mut layers = vec![p.ent_emb];
    let mut h = p.ent_emb;
    for _ in 0..depth {
        let mut input = h;
        if drop && opts.site == DropoutSite::LayerInput {
            let (r, c) = tape.value(h).dim();
            let mask = tape.leaf(dropout_mask(&mut rng, r, c, opts.dropout));
            input = tape.mul(h, mask);
        }
        h = layer_var(tape, g, input, rel_hat, edge_coef, gate);
        layers.push(h);
    }
    let intra = if layers.len() == 1 {
        layers[0]
    } else {
        tape.concat_cols(&layers)
    };
    let hp = proxy_var(tape, intra, p.proxies);
    let hf = gate_var(tape, intra, hp, p.gate_weight, p.gate_bias, p.indicator);
    ForwardOutput { hf, layers }
}

/// `I − 2 r̂ r̂ᵀ` for the unit direction of `rel`.
pub fn householder(rel: &Array1<f64>) -> Result<Mat> {
    let n = rel.dot(rel).sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::invalid("relation vector has no direction"));
    }
    let u = rel / n;
    let d = u.len();
    Ok(Mat::from_shape_fn((d, d), |(i, j)| f64::from(u8::from(i == j)) - 2.0 * u[i] * u[j]))
}

/// `r_e · W_r h_r`.
pub fn relation_project(rel: &Array1<f64>, r_e: f64, rel_proj: &Mat) -> Result<Array1<f64>> {
    if rel_proj.ncols() != rel.len() {
        return Err(Error::invalid("relation vector does not match W_r"));
    }
    Ok(rel_proj.dot(rel) * r_e)
}

fn check_graph(g: &EdgeList, params: &EncoderParams) -> Result<()> {
    if g.n_entities != params.n_entities() || g.n_relations > params.n_relations() {
        return Err(Error::invalid("edge list does not match parameter vocabulary"));
    }
    Ok(())
}

/// Attention weight of every edge of `g`, in edge-list order.
pub fn attention_coeffs(g: &EdgeList, params: &EncoderParams) -> Result<Vec<f64>> {
    check_graph(g, params)?;
    let mut t = Tape::new();
    let rel = t.leaf(params.rel_emb.clone());
    let ind = t.leaf(params.indicator.clone());
    let proj = t.leaf(params.rel_proj.clone());
    let attn = t.leaf(params.attn_vec.clone());
    let a = attention_var(&mut t, g, rel, ind, proj, attn);
    Ok(t.value(a).column(0).to_vec())
}

/// `h^{l+1}` from `h^l`.
pub fn layer_forward(h_prev: &Mat, params: &EncoderParams, g: &EdgeList) -> Result<Mat> {
    check_graph(g, params)?;
    if h_prev.dim() != params.ent_emb.dim() {
        return Err(Error::invalid("h_prev has the wrong shape"));
    }
    let mut t = Tape::new();
    let rel = t.leaf(params.rel_emb.clone());
    let ind = t.leaf(params.indicator.clone());
    let proj = t.leaf(params.rel_proj.clone());
    let attn = t.leaf(params.attn_vec.clone());
    let h = t.leaf(h_prev.clone());
    let alpha = attention_var(&mut t, g, rel, ind, proj, attn);
    let gate = t.tanh(ind);
    let gate_j = t.gather_rows(gate, g.tails.clone());
    let coef = t.mul(alpha, gate_j);
    let rel_hat = t.row_normalize(rel);
    let out = layer_var(&mut t, g, h, rel_hat, coef, gate);
    Ok(t.value(out).clone())
}

/// Concatenation `[h^0 ‖ … ‖ h^L]`.
pub fn intra_repr(layers: &[Mat]) -> Result<Mat> {
    if layers.is_empty() {
        return Err(Error::invalid("need at least one layer"));
    }
    let views: Vec<_> = layers.iter().map(|m| m.view()).collect();
    ndarray::concatenate(ndarray::Axis(1), &views)
        .map_err(|_| Error::invalid("layers have different row counts"))
}

pub fn proxy_attention(h: &Mat, proxies: &Mat) -> Result<Mat> {
    if h.ncols() != proxies.ncols() {
        return Err(Error::invalid("proxy width does not match representation width"));
    }
    let mut t = Tape::new();
    let hv = t.leaf(h.clone());
    let q = t.leaf(proxies.clone());
    let out = proxy_var(&mut t, hv, q);
    Ok(t.value(out).clone())
}

pub fn gate_fuse(h: &Mat, h_proxy: &Mat, gate_weight: &Mat, gate_bias: &Mat, indicator: &Mat) -> Result<Mat> {
    let w = h.ncols();
    if h.dim() != h_proxy.dim()
        || gate_weight.dim() != (w, w)
        || gate_bias.dim() != (1, w)
        || indicator.dim() != (h.nrows(), 1)
    {
        return Err(Error::invalid("gate_fuse: shape mismatch"));
    }
    let mut t = Tape::new();
    let hv = t.leaf(h.clone());
    let hp = t.leaf(h_proxy.clone());
    let wv = t.leaf(gate_weight.clone());
    let bv = t.leaf(gate_bias.clone());
    let r = t.leaf(indicator.clone());
    let out = gate_var(&mut t, hv, hp, wv, bv, r);
    Ok(t.value(out).clone())
}

pub fn orth_penalty(rel_proj: &Mat) -> f64 {
    let mut t = Tape::new();
    let w = t.leaf(rel_proj.clone());
    let out = orth_penalty_var(&mut t, w);
    t.scalar(out)
}

#[cfg(test)]
mod tests {
    use super::super::tests::small_cfg;
    use super::super::{encode_graph, KeesaConfig};
    use super::*;
    use crate::autodiff::sigmoid;

    fn toy() -> (EdgeList, EncoderParams) {
        let g = EdgeList::new(
            5,
            3,
            vec![(0, 0, 1), (0, 1, 2), (1, 2, 0), (2, 0, 3), (3, 1, 1), (0, 2, 4)],
        )
        .unwrap();
        let mut p = EncoderParams::init(5, 3, &small_cfg(), 7).unwrap();
        for (i, r) in p.indicator.iter_mut().enumerate() {
            *r = 0.3 + 0.2 * i as f64;
        }
        p.rel_proj[[0, 1]] = 0.25;
        p.rel_proj[[2, 3]] = -0.4;
        (g, p)
    }

    /// Straight-line evaluation of one layer, entity by entity.
    fn naive_layer(h: &Mat, p: &EncoderParams, g: &EdgeList) -> Mat {
        let n = h.nrows();
        let d = h.ncols();
        let mut out = Mat::zeros((n, d));
        for i in 0..n {
            let edges: Vec<usize> = (0..g.len()).filter(|&e| g.heads[e] == i).collect();
            let logits: Vec<f64> = edges
                .iter()
                .map(|&e| {
                    let hr = p.rel_emb.row(g.rels[e]).to_owned();
                    let proj = relation_project(&hr, p.indicator[[g.tails[e], 0]], &p.rel_proj).unwrap();
                    proj.dot(&p.attn_vec.column(0))
                })
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let mut acc = h.row(i).to_owned() * p.indicator[[i, 0]].tanh();
            for (&e, l) in edges.iter().zip(&logits) {
                let a = (l - m).exp() / z;
                let j = g.tails[e];
                let hr = p.rel_emb.row(g.rels[e]).to_owned();
                let rhat = &hr / hr.dot(&hr).sqrt();
                let hj = h.row(j).to_owned();
                let refl = &hj - &(&rhat * (2.0 * rhat.dot(&hj)));
                acc = acc + refl * (a * p.indicator[[j, 0]].tanh());
            }
            out.row_mut(i).assign(&acc.mapv(f64::tanh));
        }
        out
    }

    #[test]
    fn layer_matches_naive_loop() {
        let (g, p) = toy();
        let got = layer_forward(&p.ent_emb, &p, &g).unwrap();
        let want = naive_layer(&p.ent_emb, &p, &g);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_sums_to_one_per_head() {
        let (g, p) = toy();
        let a = attention_coeffs(&g, &p).unwrap();
        let mut sums = [0.0; 5];
        for (e, &w) in a.iter().enumerate() {
            assert!(w > 0.0);
            sums[g.heads[e]] += w;
        }
        for (i, s) in sums.iter().enumerate() {
            if g.heads.contains(&i) {
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_indicator_blocks_messages() {
        let (g, mut p) = toy();
        p.indicator[[4, 0]] = 0.0;
        let base = layer_forward(&p.ent_emb, &p, &g).unwrap();
        let mut h = p.ent_emb.clone();
        h.row_mut(4).mapv_inplace(|x| x + 3.0);
        let moved = layer_forward(&h, &p, &g).unwrap();
        // Entity 0 is the only receiver of entity 4.
        assert_eq!(base.row(0), moved.row(0));
        // Entity 4 itself has no neighbours and a zero self-weight.
        assert!(moved.row(4).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn isolated_entity_keeps_scaled_self() {
        let g = EdgeList::new(2, 1, vec![(0, 0, 1)]).unwrap();
        let cfg = KeesaConfig {
            dim: 3,
            ..small_cfg()
        };
        let p = EncoderParams::init(2, 1, &cfg, 1).unwrap();
        let out = layer_forward(&p.ent_emb, &p, &g).unwrap();
        let want = p.ent_emb.row(1).mapv(|x| (x * 1f64.tanh()).tanh());
        assert_eq!(out.row(1), want);
    }

    #[test]
    fn householder_matrix_matches_reflection() {
        let r: Array1<f64> = Array1::from(vec![0.3, -1.2, 0.5, 2.0]);
        let w = householder(&r).unwrap();
        let id = w.t().dot(&w);
        assert!(id.indexed_iter().all(|((i, j), &v)| (v - f64::from(u8::from(i == j))).abs() < 1e-12));
        let flipped = w.dot(&r);
        assert!(flipped.iter().zip(&r).all(|(a, b)| (a + b).abs() < 1e-12));
        assert!(householder(&Array1::zeros(3)).is_err());
    }

    #[test]
    fn householder_reflection_is_involutive() {
        let r: Array1<f64> = Array1::from(vec![0.3, -1.2, 0.5, 2.0]);
        let rhat = &r / r.dot(&r).sqrt();
        let h: Array1<f64> = Array1::from(vec![1.0, 2.0, -0.5, 0.25]);
        let m = |x: &Array1<f64>| x - &(&rhat * (2.0 * rhat.dot(x)));
        let twice = m(&m(&h));
        for (a, b) in twice.iter().zip(&h) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((m(&h).dot(&m(&h)) - h.dot(&h)).abs() < 1e-12);
    }

    #[test]
    fn proxy_gate_by_hand() {
        let h = Mat::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
        let q = Mat::from_shape_vec((2, 2), vec![2.0, 0.0, 0.0, 1.0]).unwrap();
        let hp = proxy_attention(&h, &q).unwrap();
        let e = 1f64.exp();
        let a0 = e / (e + 1.0);
        let a1 = 1.0 / (e + 1.0);
        assert!((hp[[0, 0]] - (1.0 - 2.0 * a0)).abs() < 1e-12);
        assert!((hp[[0, 1]] + a1).abs() < 1e-12);

        let w = Mat::eye(2);
        let b = Mat::zeros((1, 2));
        let r = Mat::from_elem((1, 1), 0.7);
        let f = gate_fuse(&h, &hp, &w, &b, &r).unwrap();
        let th0 = sigmoid(hp[[0, 0]]);
        assert!((f[[0, 0]] - (th0 * 1.0 + (1.0 - th0) * hp[[0, 0]])).abs() < 1e-12);
        assert_eq!(f[[0, 2]], 0.7);
    }

    #[test]
    fn orth_penalty_zero_for_orthogonal() {
        assert_eq!(orth_penalty(&Mat::eye(4)), 0.0);
        let (c, s) = (0.6, 0.8);
        let rot = Mat::from_shape_vec((2, 2), vec![c, -s, s, c]).unwrap();
        assert!(orth_penalty(&rot) < 1e-24);
        assert!((orth_penalty(&(Mat::eye(2) * 2.0)) - 18.0).abs() < 1e-12);
    }

    #[test]
    fn encode_is_invariant_to_edge_order() {
        let (g, p) = toy();
        let mut edges: Vec<_> = (0..g.len()).map(|e| (g.heads[e], g.rels[e], g.tails[e])).collect();
        edges.reverse();
        let g2 = EdgeList::new(5, 3, edges).unwrap();
        let a = encode_graph(&g, &p, 2, false).unwrap();
        let b = encode_graph(&g2, &p, 2, false).unwrap();
        assert_eq!(a.hf, b.hf);
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let (g, p) = toy();
        let loss = |p: &EncoderParams| -> (f64, Vec<Mat>) {
            let mut t = Tape::new();
            let v = p.leaves(&mut t);
            let out = forward(&mut t, &g, &v, 2, &ForwardOptions::inference());
            let sq = t.mul(out.hf, out.hf);
            let s = t.sum(sq);
            let orth = orth_penalty_var(&mut t, v.rel_proj);
            let total = t.add(s, orth);
            let grads = t.backward(total);
            (t.scalar(total), v.all().iter().map(|&x| grads.wrt(x)).collect())
        };
        let (_, analytic) = loss(&p);
        let eps = 1e-6;
        // The classifier head does not enter this loss.
        for b in 0..8 {
            let n = p.blocks()[b].len();
            for idx in (0..n).step_by(n.div_ceil(6).max(1)) {
                let mut plus = p.clone();
                let mut minus = p.clone();
                let cols = p.blocks()[b].ncols();
                let at = (idx / cols, idx % cols);
                plus.blocks_mut()[b][at] += eps;
                minus.blocks_mut()[b][at] -= eps;
                let fd = (loss(&plus).0 - loss(&minus).0) / (2.0 * eps);
                let a = analytic[b][at];
                assert!(
                    (fd - a).abs() <= 1e-5 * (1.0 + fd.abs()),
                    "block {b} idx {idx}: {a} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn dropout_is_seeded_and_off_at_inference() {
        let (g, p) = toy();
        let run = |opts: &ForwardOptions| {
            let mut t = Tape::new();
            let v = p.leaves(&mut t);
            let out = forward(&mut t, &g, &v, 2, opts);
            t.value(out.hf).clone()
        };
        let train = ForwardOptions {
            dropout: 0.3,
            site: DropoutSite::LayerInput,
            seed: 5,
        };
        assert_eq!(run(&train), run(&train));
        assert_ne!(run(&train), run(&ForwardOptions::inference()));
        assert_eq!(
            run(&ForwardOptions::inference()),
            encode_graph(&g, &p, 2, false).unwrap().hf
        );
    }
}
