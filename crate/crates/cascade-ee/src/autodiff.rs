//! Reverse-mode automatic differentiation over 2-d f64 tensors.
//!
//! A [`Tape`] records an eager forward computation; [`Tape::backward`]
//! propagates gradients to every recorded node and flushes leaf gradients
//! into the [`ParameterStore`]. Only the operations the model needs are
//! provided; everything is double precision.

use ndarray::{s, Array2, Axis};

use crate::params::{ParamId, ParameterStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    /// a: (n, d) plus row b: (1, d) broadcast over rows.
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// a: (n, d) times row b: (1, d) broadcast over rows.
    MulRow(Var, Var),
    MatMul(Var, Var),
    /// a @ b.T without materializing the transpose.
    MatMulT(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    /// Softmax along each row.
    SoftmaxRows(Var),
    /// Per-row (x - mean) / (std + eps), biased std over the row.
    NormalizeRows(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    /// Replicate a (1, d) row n times.
    BroadcastRow(Var),
    MeanRows(Var),
    /// Columnwise max over rows; caches argmax row per column.
    MaxRows(Var, Vec<usize>),
    Transpose(Var),
    /// Elementwise multiply by a fixed (already scaled) dropout mask.
    Dropout(Var, Array2<f64>),
    /// Summed binary cross-entropy of probabilities against 0/1 labels,
    /// with probabilities clamped to [clamp, 1 - clamp]. Output is (1, 1).
    Bce(Var, Array2<f64>, f64),
}

pub struct Tape {
    values: Vec<Array2<f64>>,
    ops: Vec<Op>,
    params: Vec<Option<ParamId>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { values: Vec::new(), ops: Vec::new(), params: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, op: Op, param: Option<ParamId>) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.params.push(param);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.values[v.0]
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, None)
    }

    /// Leaf holding a copy of a stored parameter; backward accumulates into
    /// the store's gradient for it.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Leaf, Some(id))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.values[a.0] + &self.values[b.0];
        self.push(value, Op::Add(a, b), None)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.values[row.0].nrows(), 1);
        let value = &self.values[a.0] + &self.values[row.0].row(0);
        self.push(value, Op::AddRow(a, row), None)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = &self.values[a.0] - &self.values[b.0];
        self.push(value, Op::Sub(a, b), None)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = &self.values[a.0] * &self.values[b.0];
        self.push(value, Op::Mul(a, b), None)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.values[row.0].nrows(), 1);
        let value = &self.values[a.0] * &self.values[row.0].row(0);
        self.push(value, Op::MulRow(a, row), None)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.values[a.0].dot(&self.values[b.0]);
        self.push(value, Op::MatMul(a, b), None)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.values[a.0].dot(&self.values[b.0].t());
        self.push(value, Op::MatMulT(a, b), None)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = &self.values[a.0] * k;
        self.push(value, Op::Scale(a, k), None)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.values[a.0].mapv(f64::tanh);
        self.push(value, Op::Tanh(a), None)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.values[a.0].mapv(sigmoid);
        self.push(value, Op::Sigmoid(a), None)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.values[a.0].mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a), None)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.values[a.0].mapv(f64::abs);
        self.push(value, Op::Abs(a), None)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = &self.values[a.0];
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(value, Op::SoftmaxRows(a), None)
    }

    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = &self.values[a.0];
        let mut value = x.clone();
        for mut row in value.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let denom = var.sqrt() + eps;
            row.mapv_inplace(|v| (v - mean) / denom);
        }
        self.push(value, Op::NormalizeRows(a, eps), None)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.values[v.0].view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("column concat");
        self.push(value, Op::ConcatCols(parts.to_vec()), None)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.values[v.0].view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("row concat");
        self.push(value, Op::ConcatRows(parts.to_vec()), None)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.values[a.0].slice(s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(a, start, end), None)
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let src = &self.values[a.0];
        let mut value = Array2::zeros((indices.len(), src.ncols()));
        for (i, &idx) in indices.iter().enumerate() {
            value.row_mut(i).assign(&src.row(idx));
        }
        self.push(value, Op::GatherRows(a, indices.to_vec()), None)
    }

    pub fn broadcast_row(&mut self, row: Var, n: usize) -> Var {
        debug_assert_eq!(self.values[row.0].nrows(), 1);
        let src = self.values[row.0].row(0).to_owned();
        let value = Array2::from_shape_fn((n, src.len()), |(_, j)| src[j]);
        self.push(value, Op::BroadcastRow(row), None)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = &self.values[a.0];
        let n = x.nrows() as f64;
        let value = x.sum_axis(Axis(0)).insert_axis(Axis(0)) / n;
        self.push(value, Op::MeanRows(a), None)
    }

    pub fn max_rows(&mut self, a: Var) -> Var {
        let x = &self.values[a.0];
        let mut argmax = vec![0usize; x.ncols()];
        let mut value = Array2::zeros((1, x.ncols()));
        for j in 0..x.ncols() {
            let mut best = f64::NEG_INFINITY;
            for i in 0..x.nrows() {
                if x[[i, j]] > best {
                    best = x[[i, j]];
                    argmax[j] = i;
                }
            }
            value[[0, j]] = best;
        }
        self.push(value, Op::MaxRows(a, argmax), None)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.values[a.0].t().to_owned();
        self.push(value, Op::Transpose(a), None)
    }

    /// Mask entries are expected to be 0 or 1/(1-p) (inverted dropout).
    pub fn dropout(&mut self, a: Var, mask: Array2<f64>) -> Var {
        let value = &self.values[a.0] * &mask;
        self.push(value, Op::Dropout(a, mask), None)
    }

    pub fn bce(&mut self, probs: Var, labels: Array2<f64>, clamp: f64) -> Var {
        let p = &self.values[probs.0];
        debug_assert_eq!(p.raw_dim(), labels.raw_dim());
        let mut total = 0.0;
        for (pv, y) in p.iter().zip(labels.iter()) {
            let pc = pv.clamp(clamp, 1.0 - clamp);
            total -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        }
        let value = Array2::from_elem((1, 1), total);
        self.push(value, Op::Bce(probs, labels, clamp), None)
    }

    /// Backpropagate from a (1, 1) scalar node and accumulate parameter
    /// gradients into the store.
    pub fn backward(&mut self, output: Var, store: &mut ParameterStore) {
        let n = self.values.len();
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; n];
        debug_assert_eq!(self.values[output.0].len(), 1);
        grads[output.0] = Some(Array2::ones((1, 1)));

        for i in (0..n).rev() {
            let grad = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &grad, &mut grads);
            if let Some(id) = self.params[i] {
                store.accumulate_grad(id, &grad);
            }
        }
    }

    fn accumulate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let mut bump = |v: Var, delta: Array2<f64>| match &mut grads[v.0] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        };
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                bump(*a, g.clone());
                bump(*b, g.clone());
            }
            Op::AddRow(a, row) => {
                bump(*a, g.clone());
                bump(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Sub(a, b) => {
                bump(*a, g.clone());
                bump(*b, -g.clone());
            }
            Op::Mul(a, b) => {
                bump(*a, g * &self.values[b.0]);
                bump(*b, g * &self.values[a.0]);
            }
            Op::MulRow(a, row) => {
                bump(*a, g * &self.values[row.0].row(0));
                let da_row = (g * &self.values[a.0]).sum_axis(Axis(0)).insert_axis(Axis(0));
                bump(*row, da_row);
            }
            Op::MatMul(a, b) => {
                bump(*a, g.dot(&self.values[b.0].t()));
                bump(*b, self.values[a.0].t().dot(g));
            }
            Op::MatMulT(a, b) => {
                // y = a b^T: da = g b, db = g^T a
                bump(*a, g.dot(&self.values[b.0]));
                bump(*b, g.t().dot(&self.values[a.0]));
            }
            Op::Scale(a, k) => bump(*a, g * *k),
            Op::Tanh(a) => {
                let y = &self.values[i];
                bump(*a, g * &y.mapv(|v| 1.0 - v * v));
            }
            Op::Sigmoid(a) => {
                let y = &self.values[i];
                bump(*a, g * &y.mapv(|v| v * (1.0 - v)));
            }
            Op::Relu(a) => {
                let x = &self.values[a.0];
                bump(*a, g * &x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
            }
            Op::Abs(a) => {
                let x = &self.values[a.0];
                bump(*a, g * &x.mapv(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }));
            }
            Op::SoftmaxRows(a) => {
                let y = &self.values[i];
                let mut dx = y.clone();
                for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                    let dot: f64 = (0..row.len()).map(|j| g[[r, j]] * y[[r, j]]).sum();
                    for j in 0..row.len() {
                        row[j] = y[[r, j]] * (g[[r, j]] - dot);
                    }
                }
                bump(*a, dx);
            }
            Op::NormalizeRows(a, eps) => {
                let x = &self.values[a.0];
                let mut dx = Array2::zeros(x.raw_dim());
                let d = x.ncols() as f64;
                for r in 0..x.nrows() {
                    let row = x.row(r);
                    let mean = row.sum() / d;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
                    let std = var.sqrt();
                    let denom = std + eps;
                    let grow = g.row(r);
                    let gmean = grow.sum() / d;
                    // d loss / d centered = dot of upstream grad with centered row
                    let gc: f64 = grow
                        .iter()
                        .zip(row.iter())
                        .map(|(gv, xv)| gv * (xv - mean))
                        .sum();
                    let std_safe = std.max(1e-30);
                    for j in 0..x.ncols() {
                        let centered = row[j] - mean;
                        dx[[r, j]] = (grow[j] - gmean) / denom
                            - gc * centered / (d * std_safe * denom * denom);
                    }
                }
                bump(*a, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for v in parts {
                    let w = self.values[v.0].ncols();
                    bump(*v, g.slice(s![.., offset..offset + w]).to_owned());
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for v in parts {
                    let h = self.values[v.0].nrows();
                    bump(*v, g.slice(s![offset..offset + h, ..]).to_owned());
                    offset += h;
                }
            }
            Op::SliceCols(a, start, end) => {
                let mut dx = Array2::zeros(self.values[a.0].raw_dim());
                dx.slice_mut(s![.., *start..*end]).assign(g);
                bump(*a, dx);
            }
            Op::GatherRows(a, indices) => {
                let mut dx = Array2::zeros(self.values[a.0].raw_dim());
                for (r, &idx) in indices.iter().enumerate() {
                    let mut target = dx.row_mut(idx);
                    target += &g.row(r);
                }
                bump(*a, dx);
            }
            Op::BroadcastRow(row) => {
                bump(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MeanRows(a) => {
                let n = self.values[a.0].nrows();
                let scaled = g.row(0).mapv(|v| v / n as f64);
                let dx = Array2::from_shape_fn((n, scaled.len()), |(_, j)| scaled[j]);
                bump(*a, dx);
            }
            Op::MaxRows(a, argmax) => {
                let mut dx = Array2::zeros(self.values[a.0].raw_dim());
                for (j, &r) in argmax.iter().enumerate() {
                    dx[[r, j]] += g[[0, j]];
                }
                bump(*a, dx);
            }
            Op::Transpose(a) => bump(*a, g.t().to_owned()),
            Op::Dropout(a, mask) => bump(*a, g * mask),
            Op::Bce(probs, labels, clamp) => {
                let p = &self.values[probs.0];
                let scale = g[[0, 0]];
                let mut dx = Array2::zeros(p.raw_dim());
                for ((dst, pv), y) in dx.iter_mut().zip(p.iter()).zip(labels.iter()) {
                    if *pv > *clamp && *pv < 1.0 - *clamp {
                        *dst = scale * (-y / pv + (1.0 - y) / (1.0 - pv));
                    }
                }
                bump(*probs, dx);
            }
        }
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
