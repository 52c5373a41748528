use crate::autodiff::Mat;

/// RMSprop with one running second-moment estimate per parameter block.
#[derive(Clone, Debug)]
pub struct RmsProp {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    sq: Vec<Mat>,
}

impl RmsProp {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            rho: 0.9,
            eps: 1e-7,
            sq: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Mat], grads: &[Mat]) {
        assert_eq!(params.len(), grads.len());
        if self.sq.is_empty() {
            self.sq = grads.iter().map(|g| Mat::zeros(g.dim())).collect();
        }
        for ((p, g), s) in params.iter_mut().zip(grads).zip(&mut self.sq) {
            ndarray::Zip::from(&mut **p).and(g).and(s).for_each(|p, &g, s| {
                *s = self.rho * *s + (1.0 - self.rho) * g * g;
                *p -= self.lr * g / (s.sqrt() + self.eps);
            });
        }
    }
}
