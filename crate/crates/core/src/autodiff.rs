//! A small reverse-mode automatic differentiation tape over dense `f64`
//! matrices.
//!
//! Every value on the tape is a 2-D matrix; scalars are `1×1`. Nodes are
//! appended in evaluation order, so a single reverse sweep from the output
//! computes all gradients. The tape only covers the handful of operators the
//! encoder, losses and classifier need; each operator's backward rule is
//! checked against central finite differences in the unit tests below.

use std::rc::Rc;

use ndarray::{concatenate, s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    ClampedLn { x: Var, lo: f64, hi: f64 },
    RowSum(Var),
    Sum(Var),
    GatherRows(Var, Rc<[usize]>),
    ScatterRows { x: Var, idx: Rc<[usize]> },
    SegmentSoftmax { x: Var, seg: Rc<[usize]>, n: usize },
    RowSoftmax(Var),
    RowLogSumExp(Var),
    SegmentLog1pSumExp { x: Var, seg: Rc<[usize]> },
    RowNormalize(Var),
    RowDistance(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize, len: usize },
}

/// Evaluation tape. Values are computed eagerly when a node is pushed.
#[derive(Default)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Mat>,
}

/// Gradients from [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the output w.r.t. `v`; zeros if `v` did not influence it.
    pub fn wrt(&self, v: Var) -> Mat {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Mat::zeros(self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Mat {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Mat::zeros(self.shapes[v.0]))
    }
}

fn shape(m: &Mat) -> (usize, usize) {
    (m.nrows(), m.ncols())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, op: Op, value: Mat) -> Var {
        self.ops.push(op);
        self.values.push(value);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.values[v.0]
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = &self.values[v.0];
        debug_assert_eq!(shape(m), (1, 1));
        m[[0, 0]]
    }

    /// Parameters and constants are both leaves.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn constant_scalar(&mut self, c: f64) -> Var {
        self.leaf(Mat::from_elem((1, 1), c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.values[a.0].dot(&self.values[b.0]);
        self.push(Op::MatMul(a, b), v)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.values[a.0].t().to_owned();
        self.push(Op::Transpose(a), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] + &self.values[b.0];
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] - &self.values[b.0];
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] * &self.values[b.0];
        self.push(Op::Mul(a, b), v)
    }

    /// `a` (n×m) plus a broadcast row vector `row` (1×m).
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = &self.values[a.0] + &self.values[row.0];
        self.push(Op::AddRow(a, row), v)
    }

    /// `a` (n×m) scaled row-wise by a column vector `col` (n×1).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let v = &self.values[a.0] * &self.values[col.0];
        self.push(Op::MulCol(a, col), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = &self.values[a.0] * c;
        self.push(Op::Scale(a, c), v)
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let v = &self.values[a.0] + c;
        self.push(Op::Shift(a), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    /// `ln(clamp(x, lo, hi))`; the gradient vanishes where the clamp is active.
    pub fn clamped_ln(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let v = self.values[x.0].mapv(|t| t.clamp(lo, hi).ln());
        self.push(Op::ClampedLn { x, lo, hi }, v)
    }

    /// n×m → n×1.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.values[a.0].sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(Op::RowSum(a), v)
    }

    /// Any shape → 1×1.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.values[a.0].sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.values[a.0].len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<[usize]>) -> Var {
        let v = self.values[a.0].select(Axis(0), &idx);
        self.push(Op::GatherRows(a, idx), v)
    }

    /// `out[idx[e]] += x[e]` into an `n`-row zero matrix.
    pub fn scatter_rows(&mut self, x: Var, idx: Rc<[usize]>, n: usize) -> Var {
        let src = &self.values[x.0];
        let mut out = Mat::zeros((n, src.ncols()));
        for (e, &t) in idx.iter().enumerate() {
            let mut row = out.row_mut(t);
            row += &src.row(e);
        }
        self.push(Op::ScatterRows { x, idx }, out)
    }

    /// Softmax of a column vector within groups given by `seg` (length = rows).
    pub fn segment_softmax(&mut self, x: Var, seg: Rc<[usize]>, n: usize) -> Var {
        let v = segment_softmax_values(self.values[x.0].column(0).to_vec(), &seg, n);
        let v = Mat::from_shape_vec((v.len(), 1), v).expect("column shape");
        self.push(Op::SegmentSoftmax { x, seg, n }, v)
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let mut v = self.values[a.0].clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row /= z;
        }
        self.push(Op::RowSoftmax(a), v)
    }

    /// n×m → n×1, overflow-safe.
    pub fn row_logsumexp(&mut self, a: Var) -> Var {
        let src = &self.values[a.0];
        let mut v = Mat::zeros((src.nrows(), 1));
        for (i, row) in src.rows().into_iter().enumerate() {
            v[[i, 0]] = logsumexp(row.iter().copied());
        }
        self.push(Op::RowLogSumExp(a), v)
    }

    /// Column vector → `n×1` with `out[s] = ln(1 + Σ_{e: seg[e]=s} exp(x[e]))`.
    pub fn segment_log1p_sum_exp(&mut self, x: Var, seg: Rc<[usize]>, n: usize) -> Var {
        let src = &self.values[x.0];
        let mut m = vec![0.0f64; n];
        for (e, &s) in seg.iter().enumerate() {
            m[s] = m[s].max(src[[e, 0]]);
        }
        let mut z: Vec<f64> = m.iter().map(|&m| (-m).exp()).collect();
        for (e, &s) in seg.iter().enumerate() {
            z[s] += (src[[e, 0]] - m[s]).exp();
        }
        let v = Mat::from_shape_fn((n, 1), |(s, _)| m[s] + z[s].ln());
        self.push(Op::SegmentLog1pSumExp { x, seg }, v)
    }

    /// L2-normalise each row; all-zero rows stay zero.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let mut v = self.values[a.0].clone();
        for mut row in v.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row /= n;
            }
        }
        self.push(Op::RowNormalize(a), v)
    }

    /// Row-wise Euclidean distance, n×1.
    pub fn row_distance(&mut self, a: Var, b: Var) -> Var {
        let diff = &self.values[a.0] - &self.values[b.0];
        let v = diff
            .map_axis(Axis(1), |r| r.dot(&r).sqrt())
            .insert_axis(Axis(1));
        self.push(Op::RowDistance(a, b), v)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.values[p.0].view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(Op::ConcatCols(parts.to_vec()), v)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.values[x.0].slice(s![.., start..start + len]).to_owned();
        self.push(Op::SliceCols { x, start, len }, v)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(
            shape(&self.values[output.0]),
            (1, 1),
            "backward expects a scalar output"
        );
        let n = output.0 + 1;
        let mut grads: Vec<Option<Mat>> = vec![None; self.values.len()];
        grads[output.0] = Some(Mat::ones((1, 1)));

        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let out = &self.values[id];
            match &self.ops[id] {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.values[b.0].t());
                    let gb = self.values[a.0].t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.values[b.0];
                    let gb = &g * &self.values[a.0];
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *a, g);
                }
                Op::MulCol(a, col) => {
                    let gc = (&g * &self.values[a.0])
                        .sum_axis(Axis(1))
                        .insert_axis(Axis(1));
                    let ga = &g * &self.values[col.0];
                    accumulate(&mut grads, *col, gc);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g * *c),
                Op::Shift(a) => accumulate(&mut grads, *a, g),
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(out).for_each(|d, &y| *d *= 1.0 - y * y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(out).for_each(|d, &y| *d *= y * (1.0 - y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&self.values[a.0])
                        .for_each(|d, &x| {
                            if x <= 0.0 {
                                *d = 0.0
                            }
                        });
                    accumulate(&mut grads, *a, ga);
                }
                Op::ClampedLn { x, lo, hi } => {
                    let mut gx = g;
                    Zip::from(&mut gx).and(&self.values[x.0]).for_each(|d, &t| {
                        if t > *lo && t < *hi {
                            *d /= t;
                        } else {
                            *d = 0.0;
                        }
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::RowSum(a) => {
                    let src = shape(&self.values[a.0]);
                    let ga = g.broadcast(src).expect("row_sum broadcast").to_owned();
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Mat::from_elem(shape(&self.values[a.0]), g[[0, 0]]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let mut ga = Mat::zeros(shape(&self.values[a.0]));
                    for (e, &src) in idx.iter().enumerate() {
                        let mut row = ga.row_mut(src);
                        row += &g.row(e);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ScatterRows { x, idx } => {
                    let gx = g.select(Axis(0), idx);
                    accumulate(&mut grads, *x, gx);
                }
                Op::SegmentSoftmax { x, seg, n } => {
                    let mut dot = vec![0.0; *n];
                    for (e, &s) in seg.iter().enumerate() {
                        dot[s] += out[[e, 0]] * g[[e, 0]];
                    }
                    let mut gx = Mat::zeros(shape(out));
                    for (e, &s) in seg.iter().enumerate() {
                        gx[[e, 0]] = out[[e, 0]] * (g[[e, 0]] - dot[s]);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::RowSoftmax(a) => {
                    let mut ga = Mat::zeros(shape(out));
                    for i in 0..out.nrows() {
                        let y = out.row(i);
                        let d = g.row(i);
                        let dot = y.dot(&d);
                        for j in 0..out.ncols() {
                            ga[[i, j]] = y[j] * (d[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowLogSumExp(a) => {
                    let src = &self.values[a.0];
                    let mut ga = Mat::zeros(shape(src));
                    for i in 0..src.nrows() {
                        let lse = out[[i, 0]];
                        for j in 0..src.ncols() {
                            ga[[i, j]] = g[[i, 0]] * (src[[i, j]] - lse).exp();
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SegmentLog1pSumExp { x, seg } => {
                    let src = &self.values[x.0];
                    let mut gx = Mat::zeros(shape(src));
                    for (e, &s) in seg.iter().enumerate() {
                        gx[[e, 0]] = g[[s, 0]] * (src[[e, 0]] - out[[s, 0]]).exp();
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::RowNormalize(a) => {
                    let src = &self.values[a.0];
                    let mut ga = Mat::zeros(shape(src));
                    for i in 0..src.nrows() {
                        let x = src.row(i);
                        let norm = x.dot(&x).sqrt();
                        if norm == 0.0 {
                            continue;
                        }
                        let y = out.row(i);
                        let d = g.row(i);
                        let yd = y.dot(&d);
                        for j in 0..src.ncols() {
                            ga[[i, j]] = (d[j] - y[j] * yd) / norm;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowDistance(a, b) => {
                    let diff = &self.values[a.0] - &self.values[b.0];
                    let mut ga = Mat::zeros(shape(&diff));
                    for i in 0..diff.nrows() {
                        let dist = out[[i, 0]];
                        if dist == 0.0 {
                            continue;
                        }
                        let k = g[[i, 0]] / dist;
                        for j in 0..diff.ncols() {
                            ga[[i, j]] = k * diff[[i, j]];
                        }
                    }
                    accumulate(&mut grads, *b, -&ga);
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.values[p.0].ncols();
                        let gp = g.slice(s![.., start..start + w]).to_owned();
                        accumulate(&mut grads, *p, gp);
                        start += w;
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let mut gx = Mat::zeros(shape(&self.values[x.0]));
                    gx.slice_mut(s![.., *start..*start + *len]).assign(&g);
                    accumulate(&mut grads, *x, gx);
                }
            }
        }

        Gradients {
            grads,
            shapes: self.values.iter().map(shape).collect(),
        }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Overflow-safe `ln Σ exp(x)`; `-inf` for an empty sequence. The largest
/// term is split off so small tails keep full relative precision.
pub fn logsumexp(xs: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let mut m = f64::NEG_INFINITY;
    let mut arg = 0;
    for (i, x) in xs.clone().into_iter().enumerate() {
        if x > m || i == 0 {
            m = x;
            arg = i;
        }
    }
    if m.is_infinite() || m.is_nan() {
        return m;
    }
    let rest: f64 = xs
        .into_iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, x)| (x - m).exp())
        .sum();
    m + rest.ln_1p()
}

fn segment_softmax_values(x: Vec<f64>, seg: &[usize], n: usize) -> Vec<f64> {
    let mut max = vec![f64::NEG_INFINITY; n];
    for (&v, &s) in x.iter().zip(seg) {
        max[s] = max[s].max(v);
    }
    let mut out: Vec<f64> = x
        .iter()
        .zip(seg)
        .map(|(&v, &s)| (v - max[s]).exp())
        .collect();
    let mut z = vec![0.0; n];
    for (&e, &s) in out.iter().zip(seg) {
        z[s] += e;
    }
    for (o, &s) in out.iter_mut().zip(seg) {
        *o /= z[s];
    }
    out
}
