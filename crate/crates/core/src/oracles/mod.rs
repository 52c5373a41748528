//! Independent reference computations used to check the production code:
//! a two-Gaussian PU world with known risk, finite-difference gradients and
//! brute-force similarity search.

mod suite;

pub use suite::{
    check_gradients, check_infonce_identity, check_metric_identities, check_oracle_equivalence, check_smooth_max_sandwich,
    check_structure, check_unbiasedness, check_variance_order, gradient_toy, run_suite, Check, Suite, PHI_MINUS_ONE,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};

use crate::aligneval::cosine;
use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::ipule::{unlabeled_prior, ClassPriors};
use crate::losses::{unbiased_risk, RiskTerms};

/// Scores `x ~ N(mean_p, sd)` for positives and `N(mean_n, sd)` for
/// negatives, scored by the fixed classifier `g(x) = x − threshold`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPuWorld {
    pub mean_p: f64,
    pub mean_n: f64,
    pub sd: f64,
    pub pi_p: f64,
    pub pi_p_tr: f64,
    pub pi_p_u: f64,
    pub threshold: f64,
}

impl GaussianPuWorld {
    pub fn new(mean_p: f64, mean_n: f64, sd: f64, pi_p: f64, pi_p_tr: f64, threshold: f64) -> Result<Self> {
        if !(sd > 0.0) {
            return Err(Error::invalid("sd must be positive"));
        }
        Ok(Self {
            mean_p,
            mean_n,
            sd,
            pi_p,
            pi_p_tr,
            pi_p_u: unlabeled_prior(pi_p, pi_p_tr)?,
            threshold,
        })
    }

    pub fn priors(&self) -> Result<ClassPriors> {
        ClassPriors::new(self.pi_p, self.pi_p_u, self.pi_p_tr)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointLoss {
    ZeroOne,
    Logistic,
}

impl PointLoss {
    /// `ℓ(g(x), y)` for `y = ±1`.
    pub fn eval(self, score: f64, positive: bool) -> f64 {
        let margin = if positive { score } else { -score };
        match self {
            PointLoss::ZeroOne => f64::from(u8::from(margin <= 0.0)),
            PointLoss::Logistic => (-margin).exp().ln_1p(),
        }
    }
}

fn gaussian_expectation(mean: f64, sd: f64, f: impl Fn(f64) -> f64) -> f64 {
    // Composite Simpson over ±12 standard deviations.
    let n = 6000;
    let (a, b) = (mean - 12.0 * sd, mean + 12.0 * sd);
    let h = (b - a) / n as f64;
    let pdf = |x: f64| {
        let z = (x - mean) / sd;
        (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
    };
    let g = |x: f64| pdf(x) * f(x);
    let mut s = g(a) + g(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * g(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Expected loss `π_p E_p[ℓ(g,+1)] + π_n E_n[ℓ(g,−1)]`; closed form for the
/// zero-one loss, numerical quadrature for the logistic loss.
pub fn true_risk(world: &GaussianPuWorld, loss: PointLoss) -> f64 {
    let t = world.threshold;
    let pi_n = 1.0 - world.pi_p;
    match loss {
        PointLoss::ZeroOne => {
            let phi = |z: f64| StatNormal::new(0.0, 1.0).expect("standard normal").cdf(z);
            world.pi_p * phi((t - world.mean_p) / world.sd)
                + pi_n * (1.0 - phi((t - world.mean_n) / world.sd))
        }
        PointLoss::Logistic => {
            let ep = gaussian_expectation(world.mean_p, world.sd, |x| loss.eval(x - t, true));
            let en = gaussian_expectation(world.mean_n, world.sd, |x| loss.eval(x - t, false));
            world.pi_p * ep + pi_n * en
        }
    }
}

/// Empirical risk terms from one draw of `n_p` labeled positives and `n_u`
/// unlabeled points.
pub fn sample_risk_terms(
    world: &GaussianPuWorld,
    loss: PointLoss,
    n_p: usize,
    n_u: usize,
    rng: &mut ChaCha8Rng,
) -> RiskTerms {
    let pos = Normal::new(world.mean_p, world.sd).expect("sd checked");
    let neg = Normal::new(world.mean_n, world.sd).expect("sd checked");
    let t = world.threshold;
    let (mut rpp, mut rpn) = (0.0, 0.0);
    for _ in 0..n_p {
        let x = pos.sample(rng);
        rpp += loss.eval(x - t, true);
        rpn += loss.eval(x - t, false);
    }
    let mut run = 0.0;
    for _ in 0..n_u {
        let x = if rand::Rng::random_bool(rng, world.pi_p_u) {
            pos.sample(rng)
        } else {
            neg.sample(rng)
        };
        run += loss.eval(x - t, false);
    }
    RiskTerms {
        r_p_pos: rpp / n_p as f64,
        r_p_neg: rpn / n_p as f64,
        r_u_neg: run / n_u as f64,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub mean_estimate: f64,
    pub std_error: f64,
    pub true_risk: f64,
    pub resamples: usize,
}

impl McReport {
    /// Whether the truth lies within `z` standard errors of the MC mean.
    pub fn within(&self, z: f64) -> bool {
        (self.mean_estimate - self.true_risk).abs() <= z * self.std_error
    }
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

fn check_sizes(n_p: usize, n_u: usize, resamples: usize) -> Result<()> {
    if n_p == 0 || n_u == 0 {
        return Err(Error::invalid("sample sizes must be positive"));
    }
    if resamples < 2 {
        return Err(Error::invalid("need at least two resamples"));
    }
    Ok(())
}

/// Monte-Carlo mean of the unbiased PU risk estimator against the true risk.
pub fn mc_unbiasedness(
    world: &GaussianPuWorld,
    loss: PointLoss,
    n_p: usize,
    n_u: usize,
    resamples: usize,
    seed: u64,
) -> Result<McReport> {
    check_sizes(n_p, n_u, resamples)?;
    let priors = world.priors()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let est = (0..resamples)
        .map(|_| unbiased_risk(&sample_risk_terms(world, loss, n_p, n_u, &mut rng), &priors))
        .collect::<Result<Vec<_>>>()?;
    let (mean, var) = mean_var(&est);
    Ok(McReport {
        mean_estimate: mean,
        std_error: (var / resamples as f64).sqrt(),
        true_risk: true_risk(world, loss),
        resamples,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    /// Variance of the estimator that distinguishes `π_p^u` from `π_p`.
    pub var_ours: f64,
    /// Variance of `π_p R_p^+ + R_u^- − π_p R_p^-`, which assumes `π_p^u = π_p`.
    pub var_nn: f64,
    /// Same estimator with the negative part clamped at zero.
    pub var_nn_clamped: f64,
}

/// Sample variances of both estimators over shared resamples.
pub fn variance_compare(
    world: &GaussianPuWorld,
    loss: PointLoss,
    n_p: usize,
    n_u: usize,
    resamples: usize,
    seed: u64,
) -> Result<VarianceReport> {
    check_sizes(n_p, n_u, resamples)?;
    let priors = world.priors()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ours = Vec::with_capacity(resamples);
    let mut naive = Vec::with_capacity(resamples);
    let mut clamped = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let r = sample_risk_terms(world, loss, n_p, n_u, &mut rng);
        ours.push(unbiased_risk(&r, &priors)?);
        let neg = r.r_u_neg - priors.pi_p * r.r_p_neg;
        naive.push(priors.pi_p * r.r_p_pos + neg);
        clamped.push(priors.pi_p * r.r_p_pos + neg.max(0.0));
    }
    Ok(VarianceReport {
        var_ours: mean_var(&ours).1,
        var_nn: mean_var(&naive).1,
        var_nn_clamped: mean_var(&clamped).1,
    })
}

/// Central finite differences of `f` at `x`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return Err(Error::invalid("eps must be positive"));
    }
    let mut buf = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        buf[i] = x[i] + eps;
        let hi = f(&buf);
        buf[i] = x[i] - eps;
        let lo = f(&buf);
        buf[i] = x[i];
        let d = (hi - lo) / (2.0 * eps);
        if !d.is_finite() {
            return Err(Error::NonFinite(format!("finite difference at coordinate {i}")));
        }
        g.push(d);
    }
    Ok(g)
}

/// CSLS by full sorting of every row and column.
pub fn naive_csls(src: &Mat, tgt: &Mat, k: usize) -> Mat {
    let (n, m) = (src.nrows(), tgt.nrows());
    let mut cos = Mat::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            cos[[i, j]] = cosine(&src.row(i).to_vec(), &tgt.row(j).to_vec());
        }
    }
    let mean_top = |mut v: Vec<f64>| {
        v.sort_by(|a, b| b.total_cmp(a));
        let k = k.min(v.len());
        v[..k].iter().sum::<f64>() / k as f64
    };
    let r_t: Vec<f64> = (0..n).map(|i| mean_top(cos.row(i).to_vec())).collect();
    let r_s: Vec<f64> = (0..m).map(|j| mean_top(cos.column(j).to_vec())).collect();
    let mut out = Mat::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            out[[i, j]] = 2.0 * cos[[i, j]] - r_t[i] - r_s[j];
        }
    }
    out
}

/// Mutual nearest neighbours by explicit per-row and per-column scans.
pub fn naive_mutual_nn(sim: &Mat) -> Vec<(usize, usize)> {
    let (n, m) = sim.dim();
    let argmax = |vals: Vec<f64>| {
        let mut best = 0;
        for (i, v) in vals.iter().enumerate() {
            if *v > vals[best] {
                best = i;
            }
        }
        best
    };
    let mut out = Vec::new();
    if m == 0 {
        return out;
    }
    for i in 0..n {
        let j = argmax(sim.row(i).to_vec());
        if argmax(sim.column(j).to_vec()) == i {
            out.push((i, j));
        }
    }
    out
}
