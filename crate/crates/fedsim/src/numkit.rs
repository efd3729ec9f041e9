//! Minimal numeric kernel: flat 64-bit vectors, row-major matrices, and a
//! counter-based random stream with the samplers the rest of the crate
//! consumes.
//!
//! Everything here is plain `f64`. The models are small enough that
//! determinism and gradient-check precision matter more than memory or
//! BLAS-level speed.

use crate::error::{Error, Result};

/// Weyl increment used by the splittable counter RNG.
const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const STREAM_MUL: u64 = 0xA24B_AED4_963E_E407;

/// SplitMix64 finalizer (Stafford variant 13). Bijective on `u64`.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Flat vector of 64-bit floats. The universal currency for model
/// parameters, updates, and control variates.
#[derive(Clone, Debug, PartialEq)]
pub struct Vec64 {
    values: Vec<f64>,
}

impl Vec64 {
    pub fn zeros(len: usize) -> Self {
        Vec64 {
            values: vec![0.0; len],
        }
    }

    pub fn splat(value: f64, len: usize) -> Self {
        debug_assert!(value.is_finite());
        Vec64 {
            values: vec![value; len],
        }
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()), "non-finite entry");
        Vec64 { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.values.iter()
    }

    /// `self *= a`.
    pub fn scale(&mut self, a: f64) {
        for v in &mut self.values {
            *v *= a;
        }
    }

    /// `self += a * x`. Panics on length mismatch; this is the hot inner
    /// kernel and callers validate shapes at their own boundaries.
    pub fn axpy(&mut self, a: f64, x: &Vec64) {
        assert_eq!(self.len(), x.len(), "axpy length mismatch");
        for (v, xv) in self.values.iter_mut().zip(x.values.iter()) {
            *v += a * xv;
        }
    }

    /// Elementwise difference, with a checked length.
    pub fn sub(&self, other: &Vec64) -> Result<Vec64> {
        if self.len() != other.len() {
            return Err(Error::Dimension(format!(
                "vector lengths {} and {} differ",
                self.len(),
                other.len()
            )));
        }
        Ok(Vec64::from_vec(
            self.values
                .iter()
                .zip(other.values.iter())
                .map(|(a, b)| a - b)
                .collect(),
        ))
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Returns a validation error if any entry is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Validation(format!(
                "{context}: non-finite value at index {i}"
            ))),
        }
    }
}

impl std::ops::Index<usize> for Vec64 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

impl std::ops::IndexMut<usize> for Vec64 {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.values[i]
    }
}

/// Dense row-major matrix of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat64 {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Mat64 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat64 {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        Ok(Mat64 { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

/// Counter-based splittable random stream.
///
/// The state is exactly `(seed, stream_id, counter)`: any sampler called
/// with equal state returns equal bits on every platform, and distinct
/// stream ids give statistically independent sequences. This is what makes
/// per-client randomness independent of client execution order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        RngStream {
            seed,
            stream_id,
            counter: 0,
        }
    }

    /// Derives an independent child stream. Distinct tags under the same
    /// parent always yield distinct stream ids.
    pub fn substream(&self, tag: u64) -> RngStream {
        RngStream {
            seed: self.seed,
            stream_id: mix64(self.stream_id ^ GOLDEN_GAMMA).wrapping_add(tag),
            counter: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn next_u64(&mut self) -> u64 {
        let base = mix64(
            self.seed
                ^ mix64(
                    self.stream_id
                        .wrapping_mul(STREAM_MUL)
                        .wrapping_add(GOLDEN_GAMMA),
                ),
        );
        let out = mix64(base.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)));
        self.counter = self.counter.wrapping_add(1);
        out
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1]`; safe to feed to `ln`.
    fn next_open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` via rejection (no modulo bias).
    pub fn next_below(&mut self, n: usize) -> usize {
        assert!(n > 0, "next_below(0)");
        let n = n as u64;
        let rem = (u64::MAX % n + 1) % n; // 2^64 mod n
        let limit = u64::MAX - rem; // accept x <= limit, a multiple of n minus 1
        loop {
            let x = self.next_u64();
            if x <= limit {
                return (x % n) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller; consumes exactly two uniforms.
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = self.next_open01();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Gamma(alpha, 1) draw via the Marsaglia-Tsang squeeze method, with
    /// the `u^{1/alpha}` boost for `alpha < 1`.
    pub fn gamma(&mut self, alpha: f64) -> Result<f64> {
        if !(alpha > 0.0) {
            return Err(Error::Validation(format!(
                "gamma shape must be positive, got {alpha}"
            )));
        }
        if alpha < 1.0 {
            let boost = self.next_open01().powf(1.0 / alpha);
            return Ok(self.gamma(alpha + 1.0)? * boost);
        }
        let d = alpha - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.standard_normal();
            let v = (1.0 + c * x).powi(3);
            if v <= 0.0 {
                continue;
            }
            let u = self.next_f64();
            let x2 = x * x;
            if u < 1.0 - 0.0331 * x2 * x2 {
                return Ok(d * v);
            }
            if u > 0.0 && u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
                return Ok(d * v);
            }
            if u == 0.0 {
                return Ok(d * v);
            }
        }
    }

    /// Fisher-Yates shuffle driven by this stream.
    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        for i in (1..slice.len()).rev() {
            let j = self.next_below(i + 1);
            slice.swap(i, j);
        }
    }
}

/// Convex (or affine) combination of vectors: `out[j] = sum_i w[i] * v[i][j]`.
///
/// Weights must sum to 1 within 1e-9.
pub fn weighted_sum(vectors: &[Vec64], weights: &[f64]) -> Result<Vec64> {
    if vectors.is_empty() {
        return Err(Error::Validation(
            "weighted_sum requires at least one vector".into(),
        ));
    }
    if vectors.len() != weights.len() {
        return Err(Error::Dimension(format!(
            "{} vectors but {} weights",
            vectors.len(),
            weights.len()
        )));
    }
    let len = vectors[0].len();
    for (i, v) in vectors.iter().enumerate() {
        if v.len() != len {
            return Err(Error::Dimension(format!(
                "vector {i} has length {}, expected {len}",
                v.len()
            )));
        }
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!(
            "weights sum to {total}, expected 1"
        )));
    }
    let mut out = Vec64::zeros(len);
    for (v, &w) in vectors.iter().zip(weights.iter()) {
        out.axpy(w, v);
    }
    Ok(out)
}

/// `n` Gaussian draws with the given mean and standard deviation.
pub fn gaussian(rng: &mut RngStream, n: usize, mean: f64, std: f64) -> Result<Vec64> {
    if std < 0.0 {
        return Err(Error::Validation(format!(
            "standard deviation must be nonnegative, got {std}"
        )));
    }
    if n == 0 {
        return Err(Error::Validation("gaussian requires n >= 1".into()));
    }
    Ok(Vec64::from_vec(
        (0..n).map(|_| mean + std * rng.standard_normal()).collect(),
    ))
}

/// A Dirichlet draw: independent Gamma(alpha_i, 1) samples normalized to
/// the probability simplex.
pub fn dirichlet(rng: &mut RngStream, alphas: &Vec64) -> Result<Vec64> {
    if alphas.is_empty() {
        return Err(Error::Validation(
            "dirichlet needs at least one alpha".into(),
        ));
    }
    for (i, &a) in alphas.iter().enumerate() {
        if !(a > 0.0) {
            return Err(Error::Validation(format!(
                "dirichlet alpha[{i}] must be positive, got {a}"
            )));
        }
    }
    loop {
        let draws: Vec<f64> = alphas
            .iter()
            .map(|&a| rng.gamma(a))
            .collect::<Result<_>>()?;
        let total: f64 = draws.iter().sum();
        // Retried only if every gamma draw underflowed to zero.
        if total > 0.0 && total.is_finite() {
            return Ok(Vec64::from_vec(draws.iter().map(|g| g / total).collect()));
        }
    }
}

/// Index of the maximum entry; ties break toward the lowest index.
pub fn argmax(values: &[f64]) -> Result<usize> {
    if values.is_empty() {
        return Err(Error::Validation("argmax of empty vector".into()));
    }
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    Ok(best)
}
