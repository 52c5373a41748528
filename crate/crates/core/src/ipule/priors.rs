use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class priors of the transductive PU setting. `pi_p`/`pi_n` refer to all
/// entities, `pi_p_u`/`pi_n_u` to the unlabeled part and `pi_p_tr` is the
/// labeled share `|P| / (|P| + |U|)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPriors {
    pub pi_p: f64,
    pub pi_n: f64,
    pub pi_p_u: f64,
    pub pi_n_u: f64,
    pub pi_p_tr: f64,
    /// Positive-risk weight `π_n^u / π_n`.
    pub alpha: f64,
}

fn check_unit(name: &str, x: f64) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must lie in [0, 1], got {x}")))
    }
}

impl ClassPriors {
    pub fn new(pi_p: f64, pi_p_u: f64, pi_p_tr: f64) -> Result<Self> {
        check_unit("pi_p", pi_p)?;
        check_unit("pi_p_u", pi_p_u)?;
        check_unit("pi_p_tr", pi_p_tr)?;
        let pi_n = 1.0 - pi_p;
        let pi_n_u = 1.0 - pi_p_u;
        let alpha = if pi_n > 0.0 {
            pi_n_u / pi_n
        } else {
            // Limit of the consistent case, where π_n = (1 − π_p^tr) π_n^u.
            1.0 / (1.0 - pi_p_tr).max(f64::MIN_POSITIVE)
        };
        Ok(Self {
            pi_p,
            pi_n,
            pi_p_u,
            pi_n_u,
            pi_p_tr,
            alpha,
        })
    }

    /// Starting point of the EM loop: every share equals `π_p^tr`, `α = 1`.
    pub fn initial(n_labeled: usize, n_unlabeled: usize) -> Result<Self> {
        if n_labeled == 0 || n_unlabeled == 0 {
            return Err(Error::invalid("need labeled and unlabeled entities"));
        }
        let tr = n_labeled as f64 / (n_labeled + n_unlabeled) as f64;
        Self::new(tr, tr, tr)
    }

    /// Priors implied by a matchable share of the unlabeled set.
    pub fn from_unlabeled(pi_p_u: f64, pi_p_tr: f64) -> Result<Self> {
        check_unit("pi_p_u", pi_p_u)?;
        check_unit("pi_p_tr", pi_p_tr)?;
        Self::new(pi_p_tr + (1.0 - pi_p_tr) * pi_p_u, pi_p_u, pi_p_tr)
    }

    pub fn validate(&self) -> Result<()> {
        for (n, x) in [
            ("pi_p", self.pi_p),
            ("pi_n", self.pi_n),
            ("pi_p_u", self.pi_p_u),
            ("pi_n_u", self.pi_n_u),
            ("pi_p_tr", self.pi_p_tr),
        ] {
            check_unit(n, x)?;
        }
        if (self.pi_p + self.pi_n - 1.0).abs() > 1e-9 || (self.pi_p_u + self.pi_n_u - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("class priors must sum to one"));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::invalid("alpha must be finite and non-negative"));
        }
        Ok(())
    }
}

/// `π_p^u = (π_p − π_p^tr) / (1 − π_p^tr)`.
pub fn unlabeled_prior(pi_p: f64, pi_p_tr: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&pi_p_tr) {
        return Err(Error::invalid("pi_p_tr must lie in [0, 1)"));
    }
    if pi_p < pi_p_tr {
        return Err(Error::invalid("pi_p cannot be below pi_p_tr"));
    }
    Ok((pi_p - pi_p_tr) / (1.0 - pi_p_tr))
}
