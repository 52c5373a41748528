use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::keesa::glorot;

/// What the perceptron sees of an `h^f` row made of `n_blocks` layer blocks
/// and the indicator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadFeatures {
    /// The row as is.
    Embedding,
    /// L2 norm of every layer block, then the indicator.
    #[default]
    BlockNorms,
    /// The row followed by the block norms.
    Both,
}

impl HeadFeatures {
    pub fn code(self) -> u32 {
        match self {
            Self::Embedding => 0,
            Self::BlockNorms => 1,
            Self::Both => 2,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Self::Embedding),
            1 => Ok(Self::BlockNorms),
            2 => Ok(Self::Both),
            _ => Err(Error::invalid(format!("unknown classifier feature code {code}"))),
        }
    }

    /// Perceptron input width for an `h^f` of `n_blocks` blocks of width `d`.
    pub fn width(self, n_blocks: usize, d: usize) -> usize {
        match self {
            Self::Embedding => n_blocks * d + 1,
            Self::BlockNorms => n_blocks + 1,
            Self::Both => n_blocks * d + 1 + n_blocks,
        }
    }
}

/// Two-layer perceptron over features of `h^f` with a two-way softmax;
/// column 0 is the matchable class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub features: HeadFeatures,
    pub n_blocks: usize,
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

impl ClassifierHead {
    pub fn init(features: HeadFeatures, n_blocks: usize, d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let input = features.width(n_blocks, d);
        Self {
            features,
            n_blocks,
            w1: glorot(rng, input, hidden),
            b1: Mat::zeros((1, hidden)),
            w2: glorot(rng, hidden, 2),
            b2: Mat::zeros((1, 2)),
        }
    }

    pub fn input_width(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.ncols()
    }

    /// `P(matchable)` per row of `hf`.
    pub fn predict(&self, hf: &Mat) -> Vec<f64> {
        let mut t = Tape::new();
        let x = t.leaf(hf.clone());
        let [w1, b1, w2, b2] = [&self.w1, &self.b1, &self.w2, &self.b2].map(|m| t.leaf(m.clone()));
        let x = head_input(&mut t, x, self.features, self.n_blocks);
        let p = classifier_var(&mut t, x, w1, b1, w2, b2);
        t.value(p).column(0).to_vec()
    }
}

/// Maps `h^f` rows to the perceptron input.
pub(crate) fn head_input(tape: &mut Tape, hf: Var, features: HeadFeatures, n_blocks: usize) -> Var {
    if features == HeadFeatures::Embedding {
        return hf;
    }
    let (n, w) = tape.value(hf).dim();
    let d = (w - 1) / n_blocks;
    let zero = tape.leaf(Mat::zeros((n, d)));
    let mut parts: Vec<Var> = (0..n_blocks)
        .map(|b| {
            let block = tape.slice_cols(hf, b * d, d);
            tape.row_distance(block, zero)
        })
        .collect();
    match features {
        HeadFeatures::BlockNorms => parts.push(tape.slice_cols(hf, w - 1, 1)),
        _ => parts.insert(0, hf),
    }
    tape.concat_cols(&parts)
}

/// Class probabilities, `n × 2`.
pub(crate) fn classifier_var(tape: &mut Tape, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Var {
    let z = tape.matmul(x, w1);
    let z = tape.add_row(z, b1);
    let h = tape.relu(z);
    let o = tape.matmul(h, w2);
    let o = tape.add_row(o, b2);
    tape.row_softmax(o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn probabilities_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = ClassifierHead::init(HeadFeatures::Embedding, 1, 2, 4, &mut rng);
        let x = Mat::from_shape_fn((6, 3), |(i, j)| (i as f64 - 2.0) * (j as f64 + 0.5));
        let p = head.predict(&x);
        assert_eq!(p.len(), 6);
        assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn zero_weights_give_even_odds() {
        let head = ClassifierHead {
            features: HeadFeatures::Embedding,
            n_blocks: 1,
            w1: Mat::zeros((2, 3)),
            b1: Mat::zeros((1, 3)),
            w2: Mat::zeros((3, 2)),
            b2: Mat::zeros((1, 2)),
        };
        assert_eq!(head.predict(&Mat::ones((2, 2))), vec![0.5, 0.5]);
    }

    #[test]
    fn block_norm_features() {
        let mut t = Tape::new();
        let hf = t.leaf(Mat::from_shape_vec((2, 5), vec![3.0, 4.0, 0.0, 0.0, 0.7, 1.0, 0.0, 0.0, 2.0, -1.0]).unwrap());
        let x = head_input(&mut t, hf, HeadFeatures::BlockNorms, 2);
        assert_eq!(t.value(x), &Mat::from_shape_vec((2, 3), vec![5.0, 0.0, 0.7, 1.0, 2.0, -1.0]).unwrap());
        let both = head_input(&mut t, hf, HeadFeatures::Both, 2);
        assert_eq!(t.value(both).ncols(), 7);
        for f in [HeadFeatures::Embedding, HeadFeatures::BlockNorms, HeadFeatures::Both] {
            assert_eq!(HeadFeatures::from_code(f.code()).unwrap(), f);
            let x = head_input(&mut t, hf, f, 2);
            assert_eq!(f.width(2, 2), t.value(x).ncols());
        }
        assert!(HeadFeatures::from_code(9).is_err());
    }
}
