//! Dense matrices, log-domain arithmetic, seeded randomness and a
//! central-difference gradient checker.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Mat {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Builds a matrix from row-major data, rejecting bad lengths and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                context: "Mat::from_vec",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Mat::from_vec"));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Dimension {
                    context: "Mat::from_rows",
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Mat::from_vec(rows.len(), cols, data)
    }

    /// A `1 × n` matrix.
    pub fn row_vector(values: Vec<f64>) -> Self {
        Mat {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Mat { rows, cols, data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
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

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn scale_in_place(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    /// `self += k * other`
    pub fn axpy(&mut self, k: f64, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
    }
}

/// Numerically stable `log(exp(a) + exp(b))`.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `log Σ exp(x_i)` with max-shift.
pub fn logsumexp(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::EmptyInput("logsumexp"));
    }
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    if max == f64::INFINITY {
        return Ok(f64::INFINITY);
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

/// `exp(γ e_t) / Σ_u exp(γ e_u)`.
pub fn sharpened_softmax(energies: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if energies.is_empty() {
        return Err(Error::EmptyInput("sharpened_softmax"));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
    }
    if energies.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFinite("attention energies"));
    }
    Ok(sharpened_softmax_unchecked(energies, gamma))
}

pub(crate) fn sharpened_softmax_unchecked(energies: &[f64], gamma: f64) -> Vec<f64> {
    let max = energies
        .iter()
        .map(|e| gamma * e)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = energies.iter().map(|e| (gamma * e - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    out
}

/// Log-softmax over the entries of `logits` whose `mask` bit is set; masked-out
/// entries become `-inf`.
pub(crate) fn masked_log_softmax(logits: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let allowed = |i: usize| mask.is_none_or(|m| m[i]);
    let max = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, &v)| (v - max).exp())
        .sum();
    let log_z = max + z.ln();
    logits
        .iter()
        .enumerate()
        .map(|(i, &v)| if allowed(i) { v - log_z } else { f64::NEG_INFINITY })
        .collect()
}

/// Five-point central-difference gradient check. Returns `max_i |fd_i - g_i| / max(|g_i|, 1e-8)`.
pub fn finite_diff_check<F>(mut f: F, x: &[f64], grad: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    if x.len() != grad.len() {
        return Err(Error::Dimension {
            context: "finite_diff_check",
            expected: x.len(),
            actual: grad.len(),
        });
    }
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut at = |k: f64| {
            probe[i] = x[i] + k * eps;
            f(&probe)
        };
        let vals = [at(2.0), at(1.0), at(-1.0), at(-2.0)];
        probe[i] = x[i];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("finite_diff_check objective"));
        }
        let fd = (8.0 * (vals[1] - vals[2]) - (vals[0] - vals[3])) / (12.0 * eps);
        let rel = (fd - grad[i]).abs() / grad[i].abs().max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Mixes a base seed with a stream tag (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded, reproducible random source.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent generator for a named sub-stream of this seed.
    pub fn fork(&self, stream: u64) -> Rng {
        Rng::new(derive_seed(self.seed, stream))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn int_inclusive(&mut self, lo: i64, hi: i64) -> i64 {
        self.inner.random_range(lo..=hi)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Draws an index from an unnormalized non-negative weight vector.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (i, &w) in weights.iter().enumerate() {
            if u < w {
                return i;
            }
            u -= w;
        }
        // rounding can leave u marginally above the last bucket
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
