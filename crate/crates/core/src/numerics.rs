//! Dense linear algebra, parameter initialization and a finite-difference
//! gradient oracle.
//!
//! Everything is `f64`. Matrices are row-major with `rows` = output width and
//! `cols` = input width, so an affine layer computes `W x + b`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn new(values: Vec<f64>) -> Self {
        DenseVector(values)
    }

    pub fn zeros(len: usize) -> Self {
        DenseVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &DenseVector) -> f64 {
        dot(&self.0, &other.0)
    }
}

impl From<Vec<f64>> for DenseVector {
    fn from(values: Vec<f64>) -> Self {
        DenseVector(values)
    }
}

impl std::ops::Index<usize> for DenseVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::dim("matrix values", rows * cols, values.len()));
        }
        Ok(DenseMatrix { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::dim("matrix row", cols, row.len()));
            }
            values.extend_from_slice(row);
        }
        Ok(DenseMatrix {
            rows: rows.len(),
            cols,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.values[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.cols..(row + 1) * self.cols]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        &mut self.values[row * self.cols..(row + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Seeded pseudorandom stream.
///
/// Backed by ChaCha8 (`rand_chacha`), whose output is specified bit-for-bit
/// and independent of platform and pointer width.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream, keyed by `stream`. Lets one seed drive
    /// several consumers without their draws interleaving.
    pub fn fork(&self, stream: u64) -> RngState {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        RngState {
            seed: self.seed,
            inner: rng,
        }
    }

    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        self.inner.random_range(low..=high)
    }

    pub fn unit(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn gaussian(&mut self, mean: f64, std_dev: f64) -> f64 {
        if std_dev == 0.0 {
            return mean;
        }
        Normal::new(mean, std_dev)
            .expect("std_dev is finite and non-negative")
            .sample(&mut self.inner)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle driven by this stream.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.inner.random_range(0..=i);
            items.swap(i, j);
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out += alpha * x`
pub(crate) fn axpy(alpha: f64, x: &[f64], out: &mut [f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

pub fn affine_forward(
    input: &DenseVector,
    weights: &DenseMatrix,
    bias: &DenseVector,
) -> Result<DenseVector> {
    if input.len() != weights.cols {
        return Err(Error::dim("affine input", weights.cols, input.len()));
    }
    if bias.len() != weights.rows {
        return Err(Error::dim("affine bias", weights.rows, bias.len()));
    }
    let out = (0..weights.rows)
        .map(|i| dot(weights.row(i), input.as_slice()) + bias[i])
        .collect();
    Ok(DenseVector(out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrads {
    pub grad_input: DenseVector,
    pub grad_weights: DenseMatrix,
    pub grad_bias: DenseVector,
}

pub fn affine_backward(
    upstream: &DenseVector,
    input: &DenseVector,
    weights: &DenseMatrix,
) -> Result<AffineGrads> {
    let mut grad_weights = DenseMatrix::zeros(weights.rows, weights.cols);
    let mut grad_bias = DenseVector::zeros(weights.rows);
    let grad_input = affine_backward_accumulate(
        upstream,
        input,
        weights,
        &mut grad_weights,
        &mut grad_bias,
    )?;
    Ok(AffineGrads {
        grad_input,
        grad_weights,
        grad_bias,
    })
}

/// Like [`affine_backward`] but adds the weight and bias gradients into
/// existing buffers, so a batch can be reduced without reallocating.
pub fn affine_backward_accumulate(
    upstream: &DenseVector,
    input: &DenseVector,
    weights: &DenseMatrix,
    grad_weights: &mut DenseMatrix,
    grad_bias: &mut DenseVector,
) -> Result<DenseVector> {
    if upstream.len() != weights.rows {
        return Err(Error::dim("affine upstream gradient", weights.rows, upstream.len()));
    }
    if input.len() != weights.cols {
        return Err(Error::dim("affine input", weights.cols, input.len()));
    }
    if grad_weights.rows != weights.rows || grad_weights.cols != weights.cols {
        return Err(Error::dim(
            "affine weight gradient",
            weights.rows * weights.cols,
            grad_weights.rows * grad_weights.cols,
        ));
    }
    if grad_bias.len() != weights.rows {
        return Err(Error::dim("affine bias gradient", weights.rows, grad_bias.len()));
    }
    let mut grad_input = vec![0.0; weights.cols];
    for (i, &g) in upstream.as_slice().iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        grad_bias.0[i] += g;
        axpy(g, input.as_slice(), grad_weights.row_mut(i));
        axpy(g, weights.row(i), &mut grad_input);
    }
    Ok(DenseVector(grad_input))
}

pub fn relu(input: &DenseVector) -> DenseVector {
    DenseVector(input.0.iter().map(|&v| v.max(0.0)).collect())
}

/// Subgradient at exactly zero is taken as 0.
pub fn relu_backward(upstream: &DenseVector, input: &DenseVector) -> Result<DenseVector> {
    if upstream.len() != input.len() {
        return Err(Error::dim("relu upstream gradient", input.len(), upstream.len()));
    }
    Ok(DenseVector(
        upstream
            .0
            .iter()
            .zip(&input.0)
            .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
            .collect(),
    ))
}

/// Xavier/Glorot uniform: entries in `[-sqrt(6/(rows+cols)), +sqrt(6/(rows+cols))]`.
pub fn xavier_init(rows: usize, cols: usize, rng: &mut RngState) -> Result<DenseMatrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument(format!(
            "xavier_init needs non-zero dimensions, got {rows}x{cols}"
        )));
    }
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let values = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
    Ok(DenseMatrix { rows, cols, values })
}

pub fn gaussian_init(rows: usize, cols: usize, std_dev: f64, rng: &mut RngState) -> DenseMatrix {
    let values = (0..rows * cols).map(|_| rng.gaussian(0.0, std_dev)).collect();
    DenseMatrix { rows, cols, values }
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn finite_difference_gradient<F>(mut f: F, x: &DenseVector, h: f64) -> Result<DenseVector>
where
    F: FnMut(&DenseVector) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("step h must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.0[i];
        probe.0[i] = orig + h;
        let up = f(&probe);
        probe.0[i] = orig - h;
        let down = f(&probe);
        probe.0[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective at coordinate {i} evaluated to {up} / {down}"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(DenseVector(grad))
}

/// Largest elementwise relative error, with a floor on the denominator so
/// entries that are both near zero do not dominate.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(values: &[f64]) -> DenseVector {
        DenseVector::new(values.to_vec())
    }

    #[test]
    fn affine_forward_examples() {
        let out = affine_forward(&v(&[1.0, 2.0]), &DenseMatrix::identity(2), &v(&[0.0, 0.0])).unwrap();
        assert_eq!(out, v(&[1.0, 2.0]));

        let w = DenseMatrix::from_rows(&[vec![2.0, 3.0]]).unwrap();
        assert_eq!(affine_forward(&v(&[1.0, 1.0]), &w, &v(&[1.0])).unwrap(), v(&[6.0]));

        let mut rng = RngState::new(3);
        let w = xavier_init(4, 2, &mut rng).unwrap();
        let b = v(&[0.5, -1.0, 2.0, 0.25]);
        assert_eq!(affine_forward(&v(&[0.0, 0.0]), &w, &b).unwrap(), b);
    }

    #[test]
    fn affine_forward_reports_both_dims() {
        let err = affine_forward(&v(&[1.0, 2.0, 3.0]), &DenseMatrix::identity(2), &v(&[0.0, 0.0]))
            .unwrap_err();
        match err {
            Error::Dimension { expected, actual, .. } => assert_eq!((expected, actual), (2, 3)),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn affine_backward_examples() {
        let w = DenseMatrix::from_rows(&[vec![4.0, 5.0]]).unwrap();
        let g = affine_backward(&v(&[1.0]), &v(&[2.0, 3.0]), &w).unwrap();
        assert_eq!(g.grad_weights, DenseMatrix::from_rows(&[vec![2.0, 3.0]]).unwrap());
        assert_eq!(g.grad_input, v(&[4.0, 5.0]));
        assert_eq!(g.grad_bias, v(&[1.0]));

        let g = affine_backward(&v(&[0.0, 0.0]), &v(&[2.0, 3.0]), &DenseMatrix::identity(2)).unwrap();
        assert!(g.grad_input.as_slice().iter().all(|&x| x == 0.0));
        assert!(g.grad_weights.as_slice().iter().all(|&x| x == 0.0));
        assert!(g.grad_bias.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn affine_backward_matches_finite_differences() {
        let mut rng = RngState::new(11);
        for _ in 0..20 {
            let w = gaussian_init(5, 3, 1.0, &mut rng);
            let b = DenseVector::new((0..5).map(|_| rng.gaussian(0.0, 1.0)).collect());
            let x = DenseVector::new((0..3).map(|_| rng.gaussian(0.0, 1.0)).collect());
            let up = DenseVector::new((0..5).map(|_| rng.gaussian(0.0, 1.0)).collect());
            let grads = affine_backward(&up, &x, &w).unwrap();

            // scalar objective <up, Wx + b>
            let objective = |w: &DenseMatrix, x: &DenseVector, b: &DenseVector| {
                affine_forward(x, w, b).unwrap().dot(&up)
            };
            let fd_x = finite_difference_gradient(|p| objective(&w, p, &b), &x, 1e-5).unwrap();
            assert!(max_relative_error(fd_x.as_slice(), grads.grad_input.as_slice()) < 1e-6);

            let flat_w = DenseVector::new(w.as_slice().to_vec());
            let fd_w = finite_difference_gradient(
                |p| objective(&DenseMatrix::from_vec(5, 3, p.as_slice().to_vec()).unwrap(), &x, &b),
                &flat_w,
                1e-5,
            )
            .unwrap();
            assert!(max_relative_error(fd_w.as_slice(), grads.grad_weights.as_slice()) < 1e-6);

            let fd_b = finite_difference_gradient(|p| objective(&w, &x, p), &b, 1e-5).unwrap();
            assert!(max_relative_error(fd_b.as_slice(), grads.grad_bias.as_slice()) < 1e-6);
        }
    }

    #[test]
    fn relu_cases() {
        assert_eq!(relu(&v(&[-1.0, 0.0, 2.0])), v(&[0.0, 0.0, 2.0]));
        assert_eq!(
            relu_backward(&v(&[5.0, 5.0, 5.0]), &v(&[-1.0, 0.0, 2.0])).unwrap(),
            v(&[0.0, 0.0, 5.0])
        );
    }

    #[test]
    fn xavier_bounds_determinism_and_mean() {
        let mut a = RngState::new(42);
        let mut b = RngState::new(42);
        let ma = xavier_init(7, 9, &mut a).unwrap();
        let mb = xavier_init(7, 9, &mut b).unwrap();
        assert_eq!(ma, mb);
        let bound = (6.0f64 / 16.0).sqrt();
        assert!(ma.as_slice().iter().all(|x| x.abs() <= bound));

        let mut rng = RngState::new(2024);
        let big = xavier_init(100, 1000, &mut rng).unwrap();
        let mean = big.as_slice().iter().sum::<f64>() / big.as_slice().len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");

        assert!(xavier_init(0, 3, &mut rng).is_err());
    }

    #[test]
    fn finite_difference_examples() {
        let g = finite_difference_gradient(|x| x.dot(x), &v(&[1.0, 2.0]), 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);

        let g = finite_difference_gradient(|_| 7.0, &v(&[1.0, 2.0, 3.0]), 1e-5).unwrap();
        assert!(g.as_slice().iter().all(|&x| x == 0.0));

        let g = finite_difference_gradient(|x| x[0] * x[1], &v(&[3.0, 5.0]), 1e-5).unwrap();
        assert!((g[0] - 5.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);

        assert!(finite_difference_gradient(|_| f64::NAN, &v(&[1.0]), 1e-5).is_err());
        assert!(finite_difference_gradient(|_| 0.0, &v(&[1.0]), 0.0).is_err());
    }

    #[test]
    fn rng_fork_is_deterministic_and_distinct() {
        let root = RngState::new(9);
        let mut a = root.fork(1);
        let mut b = root.fork(1);
        let mut c = root.fork(2);
        let xa: Vec<f64> = (0..4).map(|_| a.unit()).collect();
        let xb: Vec<f64> = (0..4).map(|_| b.unit()).collect();
        let xc: Vec<f64> = (0..4).map(|_| c.unit()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn affine_is_linear(
                x in proptest::collection::vec(-1.0f64..1.0, 4),
                y in proptest::collection::vec(-1.0f64..1.0, 4),
                alpha in -1.0f64..1.0,
                beta in -1.0f64..1.0,
                seed in any::<u64>(),
            ) {
                let mut rng = RngState::new(seed);
                let w = xavier_init(3, 4, &mut rng).unwrap();
                let zero = DenseVector::zeros(3);
                let mix: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + beta * b).collect();
                let lhs = affine_forward(&DenseVector::new(mix), &w, &zero).unwrap();
                let fx = affine_forward(&DenseVector::new(x), &w, &zero).unwrap();
                let fy = affine_forward(&DenseVector::new(y), &w, &zero).unwrap();
                for i in 0..3 {
                    prop_assert!((lhs[i] - (alpha * fx[i] + beta * fy[i])).abs() < 1e-12);
                }
            }

            #[test]
            fn relu_is_idempotent(x in proptest::collection::vec(-1e6f64..1e6, 0..16)) {
                let once = relu(&DenseVector::new(x));
                prop_assert_eq!(relu(&once), once);
            }
        }
    }
}
