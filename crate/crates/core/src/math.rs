//! Dense row-major matrices and the handful of kernels the model needs.
//!
//! All arithmetic is `f64` and every reduction runs in a fixed order
//! (row-major, left to right) so identical inputs produce identical bits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    /// Column vector view of a slice.
    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dim("matmul", self.shape(), other.shape()));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::dim("add", self.shape(), other.shape()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// `self · x` for a vector `x` of length `cols`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::dim("matvec", self.shape(), (x.len(), 1)));
        }
        Ok(self.matvec_unchecked(x))
    }

    #[inline]
    pub(crate) fn matvec_unchecked(&self, x: &[f64]) -> Vec<f64> {
        self.data
            .chunks_exact(self.cols)
            .map(|row| dot(row, x))
            .collect()
    }

    /// `selfᵀ · y` for a vector `y` of length `rows`.
    pub(crate) fn matvec_t_unchecked(&self, y: &[f64]) -> Vec<f64> {
        matvec_t_slice(&self.data, self.cols, y)
    }

    /// Accumulates `scale · u vᵀ` into `self` (rank-one update).
    pub fn add_outer(&mut self, scale: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        add_outer_slice(&mut self.data, self.cols, scale, u, v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Rank-one update on a row-major buffer with `cols` columns.
pub(crate) fn add_outer_slice(dst: &mut [f64], cols: usize, scale: f64, u: &[f64], v: &[f64]) {
    debug_assert_eq!(v.len(), cols);
    debug_assert_eq!(dst.len(), u.len() * cols);
    for (row, &ui) in dst.chunks_exact_mut(cols).zip(u) {
        let s = scale * ui;
        if s == 0.0 {
            continue;
        }
        for (o, &vj) in row.iter_mut().zip(v) {
            *o += s * vj;
        }
    }
}

/// `Mᵀ y` for a row-major buffer with `cols` columns.
pub(crate) fn matvec_t_slice(m: &[f64], cols: usize, y: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (row, &yi) in m.chunks_exact(cols).zip(y) {
        if yi == 0.0 {
            continue;
        }
        for (o, &w) in out.iter_mut().zip(row) {
            *o += w * yi;
        }
    }
    out
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Numerically stable softmax of a slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of a logit row against a target id, with its gradient.
///
/// Returns `-log softmax(logits)[target]` and `softmax(logits) - onehot(target)`.
pub fn softmax_cross_entropy_slice(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::TokenOutOfRange {
            token: target as u32,
            vocab: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut grad: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = grad.iter().sum();
    let loss = sum.ln() - (logits[target] - max);
    for g in &mut grad {
        *g /= sum;
    }
    grad[target] -= 1.0;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("cross-entropy loss {loss}")));
    }
    Ok((loss, grad))
}

/// Matrix form of [`softmax_cross_entropy_slice`]; `logits` must be `1×V`.
pub fn softmax_cross_entropy(logits: &Matrix, target: usize) -> Result<(f64, Matrix)> {
    if logits.rows() != 1 {
        return Err(Error::dim(
            "softmax_cross_entropy",
            logits.shape(),
            (1, logits.cols()),
        ));
    }
    let (loss, grad) = softmax_cross_entropy_slice(logits.data(), target)?;
    Ok((loss, Matrix::new(1, logits.cols(), grad)?))
}

/// Compares an analytic gradient against central finite differences.
///
/// `loss_fn` returns the loss and its analytic gradient at the given point.
/// The result is `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
pub fn grad_check<F>(mut loss_fn: F, params: &[f64], epsilon: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    if !(epsilon > 0.0 && epsilon <= 1e-3) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must lie in (0, 1e-3], got {epsilon}"
        )));
    }
    let (base, analytic) = loss_fn(params);
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("loss {base} at the base point")));
    }
    if analytic.len() != params.len() {
        return Err(Error::dim(
            "grad_check",
            (analytic.len(), 1),
            (params.len(), 1),
        ));
    }
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        probe[i] = params[i] + epsilon;
        let (plus, _) = loss_fn(&probe);
        probe[i] = params[i] - epsilon;
        let (minus, _) = loss_fn(&probe);
        probe[i] = params[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at coordinate {i} (+ε: {plus}, -ε: {minus})"
            )));
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let rel = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            s
        })
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_is_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random(3, 4, &mut rng);
        assert_eq!(Matrix::identity(3).matmul(&m).unwrap(), m);
    }

    #[test]
    fn hand_product() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Matrix::from_rows(&[vec![0.0], vec![1.0]]);
        assert_eq!(
            a.matmul(&b).unwrap(),
            Matrix::from_rows(&[vec![2.0], vec![4.0]])
        );
    }

    #[test]
    fn matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(5, 4, &mut rng);
        let b = random(4, 3, &mut rng);
        let got = a.matmul(&b).unwrap();
        let want = naive(&a, &b);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let err = Matrix::zeros(2, 3)
            .matmul(&Matrix::zeros(2, 3))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let (loss, _) = softmax_cross_entropy_slice(&[0.5; 32], 11).unwrap();
        assert!((loss - 32f64.ln()).abs() < 1e-12);
        assert!((loss - 3.4657).abs() < 1e-4);
    }

    #[test]
    fn saturated_logit() {
        let mut logits = vec![0.0; 8];
        logits[3] = 30.0;
        let (loss, _) = softmax_cross_entropy_slice(&logits, 3).unwrap();
        assert!(loss < 1e-9);
    }

    #[test]
    fn two_class_formula() {
        // -log(e^z_t / (e^1 + e^2)) by hand for each target.
        let logits = Matrix::new(1, 2, vec![1.0, 2.0]).unwrap();
        let e = std::f64::consts::E;
        let (loss1, grad) = softmax_cross_entropy(&logits, 1).unwrap();
        assert!((loss1 - ((1.0 + e).ln() - 1.0)).abs() < 1e-12);
        assert!((loss1 - 0.3133).abs() < 1e-4);
        assert!(grad.data().iter().sum::<f64>().abs() < 1e-12);
        let (loss0, _) = softmax_cross_entropy(&logits, 0).unwrap();
        assert!((loss0 - (1.0 + e).ln()).abs() < 1e-12);
    }

    #[test]
    fn target_out_of_range() {
        assert!(matches!(
            softmax_cross_entropy_slice(&[0.0, 1.0], 2),
            Err(Error::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn grad_check_linear_layer() {
        // loss = sum(W x) * 0.5 + ||W x||^2 / 2 with W as params.
        let x = [0.3, -1.2, 0.7];
        let f = |w: &[f64]| {
            let m = Matrix::new(2, 3, w.to_vec()).unwrap();
            let y = m.matvec(&x).unwrap();
            let loss = 0.5 * y.iter().sum::<f64>() + 0.5 * dot(&y, &y);
            let dy: Vec<f64> = y.iter().map(|v| 0.5 + v).collect();
            let mut g = Matrix::zeros(2, 3);
            g.add_outer(1.0, &dy, &x);
            (loss, g.into_data())
        };
        let w = [0.1, 0.2, -0.3, 0.4, -0.5, 0.6];
        assert!(grad_check(f, &w, 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn grad_check_constant_function() {
        let f = |p: &[f64]| (4.0, vec![0.0; p.len()]);
        assert!(grad_check(f, &[1.0, 2.0], 1e-5).unwrap() < 1e-5);
    }

    #[test]
    fn grad_check_rejects_bad_epsilon_and_nan() {
        let f = |p: &[f64]| (0.0, vec![0.0; p.len()]);
        assert!(grad_check(f, &[1.0], 0.1).is_err());
        let g = |p: &[f64]| (if p[0] > 1.0 { f64::NAN } else { 0.0 }, vec![0.0; 1]);
        let err = grad_check(g, &[1.0], 1e-5).unwrap_err();
        assert!(err.to_string().contains("coordinate 0"));
    }

    proptest! {
        #[test]
        fn softmax_grad_sums_to_zero(logits in prop::collection::vec(-20.0f64..20.0, 2..40), t in 0usize..40) {
            let t = t % logits.len();
            let (_, g) = softmax_cross_entropy_slice(&logits, t).unwrap();
            prop_assert!(g.iter().sum::<f64>().abs() < 1e-12);
        }

        #[test]
        fn matmul_associative_with_oracle(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scale = 1e3;
            let a = random(3, 4, &mut rng).scale(scale);
            let b = random(4, 2, &mut rng).scale(scale);
            let c = random(2, 3, &mut rng).scale(scale);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = naive(&naive(&a, &b), &c);
            for (l, r) in left.data().iter().zip(right.data()) {
                prop_assert!((l - r).abs() <= 1e-12 * r.abs().max(1.0));
            }
            // fixed accumulation order: repeated evaluation is bit-identical
            let again = a.matmul(&b).unwrap().matmul(&c).unwrap();
            prop_assert_eq!(left, again);
        }
    }
}
