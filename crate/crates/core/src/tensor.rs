//! Dense numeric substrate: per-sample feature maps, a row-major matrix,
//! a handful of elementwise ops and a seedable generator.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};

/// One sample's activations, feature-major: `data[f * spatial + s]`.
///
/// Fully connected activations use `spatial == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    features: usize,
    spatial: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(features: usize, spatial: usize, data: Vec<f64>) -> Result<Self> {
        if features == 0 || spatial == 0 {
            return Err(shape_err("feature map needs at least one feature and one position"));
        }
        if data.len() != features * spatial {
            return Err(shape_err(format!(
                "{} values for {features} features x {spatial} positions",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map"));
        }
        Ok(Self { features, spatial, data })
    }

    /// Fully connected map (one value per feature).
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(n, 1, data)
    }

    pub fn zeros(features: usize, spatial: usize) -> Self {
        assert!(features > 0 && spatial > 0, "empty feature map");
        Self { features, spatial, data: vec![0.0; features * spatial] }
    }

    /// Builds a map without the finiteness scan. Used on hot paths whose
    /// inputs were already validated.
    pub(crate) fn from_parts(features: usize, spatial: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), features * spatial);
        Self { features, spatial, data }
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn spatial(&self) -> usize {
        self.spatial
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Values of feature `f` across its spatial extent.
    pub fn feature(&self, f: usize) -> &[f64] {
        &self.data[f * self.spatial..(f + 1) * self.spatial]
    }

    pub fn feature_mut(&mut self, f: usize) -> &mut [f64] {
        &mut self.data[f * self.spatial..(f + 1) * self.spatial]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.features == other.features && self.spatial == other.spatial
    }

    pub(crate) fn check_same_shape(&self, other: &FeatureMap, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(shape_err(format!(
                "{what}: {}x{} vs {}x{}",
                self.features, self.spatial, other.features, other.spatial
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-feature arithmetic mean over the spatial extent.
pub fn feature_mean(m: &FeatureMap) -> Vec<f64> {
    let n = m.spatial as f64;
    (0..m.features).map(|f| m.feature(f).iter().sum::<f64>() / n).collect()
}

/// Per-feature population variance (divides by the spatial count).
pub fn feature_var(m: &FeatureMap) -> Vec<f64> {
    if m.spatial == 1 {
        return vec![0.0; m.features];
    }
    let n = m.spatial as f64;
    feature_mean(m)
        .into_iter()
        .enumerate()
        .map(|(f, mu)| m.feature(f).iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n)
        .collect()
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// `self * v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(shape_err(format!("matvec: {}x{} times {}", self.rows, self.cols, v.len())));
        }
        Ok((0..self.rows).map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * b).sum()).collect())
    }

    /// `self^T * v`.
    pub fn matvec_t(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(shape_err(format!("matvec_t: ({}x{})^T times {}", self.rows, self.cols, v.len())));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += a * vr;
            }
        }
        Ok(out)
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(shape_err(format!("matmul: {}x{} * {}x{}", a.rows, a.cols, b.rows, b.cols)));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    // i-k-j order keeps the inner loop contiguous in both b and out.
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

fn check_len(a: &[f64], b: &[f64], op: &str) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(shape_err(format!("{op}: length {} vs {}", a.len(), b.len())))
    }
}

pub fn add(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    check_len(a, b, "add")?;
    Ok(a.iter().zip(b).map(|(x, y)| x + y).collect())
}

pub fn scale(a: &[f64], c: f64) -> Vec<f64> {
    a.iter().map(|x| x * c).collect()
}

pub fn relu(a: &[f64]) -> Vec<f64> {
    a.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect()
}

/// Passes `grad` where the pre-activation was positive, zero elsewhere.
pub fn relu_backward(pre: &[f64], grad: &[f64]) -> Result<Vec<f64>> {
    check_len(pre, grad, "relu_backward")?;
    Ok(pre.iter().zip(grad).map(|(&p, &g)| if p > 0.0 { g } else { 0.0 }).collect())
}

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a, b, "dot")?;
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

pub fn l2_norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Angle in degrees between two vectors.
///
/// Uses the `2 atan2(|u - v|, |u + v|)` form on the unit vectors, which is
/// exact (zero) for bitwise-identical inputs and well conditioned near 0
/// and 180 degrees, unlike `acos` of the cosine.
pub fn angle_degrees(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a, b, "angle")?;
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidParam("angle of a zero vector".into()));
    }
    let mut diff = 0.0;
    let mut sum = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (u, v) = (x / na, y / nb);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    Ok((2.0 * diff.sqrt().atan2(sum.sqrt())).to_degrees())
}

/// Cosine similarity.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(dot(a, b)? / (l2_norm(a) * l2_norm(b)))
}

/// Seedable generator. Identical seeds give identical streams on every
/// platform (ChaCha8 keyed by the seed).
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for a named sub-stream of this seed.
    pub fn fork(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Rng { seed: self.seed, inner }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn gaussian(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.normal()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal_vec(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n).map(|_| std * self.normal()).collect()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn feature_mean_examples() {
        let m = FeatureMap::new(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(feature_mean(&m), vec![2.5]);

        let m = FeatureMap::from_vec(vec![0.25, -7.5]).unwrap();
        assert_eq!(feature_mean(&m), vec![0.25, -7.5]);
    }

    #[test]
    fn feature_moments_match_summation_oracle() {
        let mut rng = Rng::new(7);
        let data = rng.normal_vec(6, 3.0);
        let m = FeatureMap::new(2, 3, data.clone()).unwrap();
        let mean = feature_mean(&m);
        let var = feature_var(&m);
        for f in 0..2 {
            let xs = &data[f * 3..f * 3 + 3];
            let mut s = 0.0;
            for x in xs {
                s += x;
            }
            let mu = s / 3.0;
            let mut ss = 0.0;
            for x in xs {
                ss += (x - mu) * (x - mu);
            }
            assert!((mean[f] - mu).abs() < 1e-12);
            assert!((var[f] - ss / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_var_degenerate_cases() {
        let m = FeatureMap::from_vec(vec![3.0, -1.0, 9.0]).unwrap();
        assert_eq!(feature_var(&m), vec![0.0; 3]);
        let m = FeatureMap::new(1, 4, vec![1.0; 4]).unwrap();
        assert_eq!(feature_var(&m), vec![0.0]);
    }

    #[test]
    fn rejects_bad_maps() {
        assert!(matches!(FeatureMap::new(2, 2, vec![0.0; 3]), Err(Error::Shape(_))));
        assert!(matches!(
            FeatureMap::new(1, 2, vec![0.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(FeatureMap::new(1, 1, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn elementwise_ops() {
        assert_eq!(relu(&[-1.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
        assert_eq!(relu_backward(&[-1.0, 0.0, 2.0], &[5.0, 5.0, 5.0]).unwrap(), vec![0.0, 0.0, 5.0]);
        let v = [3.0, -4.0, 12.0];
        assert!((dot(&v, &v).unwrap() - l2_norm(&v).powi(2)).abs() < 1e-12);
        assert!(add(&[1.0], &[1.0, 2.0]).is_err());
        assert!(dot(&[1.0], &[]).is_err());
        assert_eq!(scale(&[1.0, -2.0], 0.5), vec![0.5, -1.0]);
    }

    #[test]
    fn matmul_matches_naive_loop() {
        let mut rng = Rng::new(11);
        let a = Matrix::new(5, 7, rng.normal_vec(35, 1.0)).unwrap();
        let b = Matrix::new(7, 3, rng.normal_vec(21, 1.0)).unwrap();
        let fast = matmul(&a, &b).unwrap();
        let slow = naive_matmul(&a, &b);
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(matmul(&a, &a).is_err());
        let v = rng.normal_vec(7, 1.0);
        let mv = a.matvec(&v).unwrap();
        let col = Matrix::new(7, 1, v.clone()).unwrap();
        let mm = matmul(&a, &col).unwrap();
        for (x, y) in mv.iter().zip(mm.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let w = rng.normal_vec(5, 1.0);
        let tv = a.matvec_t(&w).unwrap();
        let tv2 = a.transpose().matvec(&w).unwrap();
        for (x, y) in tv.iter().zip(&tv2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rng_is_seed_deterministic() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        let xa: Vec<f64> = (0..100).map(|_| a.normal()).collect();
        let xb: Vec<f64> = (0..100).map(|_| b.normal()).collect();
        assert_eq!(xa, xb);
        let mut c = Rng::new(43);
        assert_ne!(xa[0], c.normal());
        let mut f1 = a.fork(3);
        let mut f2 = b.fork(3);
        assert_eq!(f1.uniform(), f2.uniform());
    }

    #[test]
    fn angle_is_exactly_zero_for_identical_vectors() {
        let v = [0.1, -0.7, 3.3];
        assert_eq!(angle_degrees(&v, &v).unwrap(), 0.0);
        let a = angle_degrees(&[1.0, 0.0], &[0.0, 2.0]).unwrap();
        assert!((a - 90.0).abs() < 1e-12);
        let a = angle_degrees(&[1.0, 0.0], &[-1.0, 0.0]).unwrap();
        assert!((a - 180.0).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn variance_is_second_moment_minus_squared_mean(
                spatial in 1usize..9,
                features in 1usize..5,
                seed in any::<u64>(),
            ) {
                let mut rng = super::Rng::new(seed);
                let data: Vec<f64> = (0..features * spatial).map(|_| rng.uniform_range(-10.0, 10.0)).collect();
                let m = FeatureMap::new(features, spatial, data.clone()).unwrap();
                let sq = FeatureMap::new(features, spatial, data.iter().map(|v| v * v).collect()).unwrap();
                let mean = feature_mean(&m);
                let mean_sq = feature_mean(&sq);
                let var = feature_var(&m);
                for f in 0..features {
                    prop_assert!((var[f] - (mean_sq[f] - mean[f] * mean[f])).abs() < 1e-10);
                }
                // Deterministic reductions.
                prop_assert_eq!(feature_var(&m), var);
            }
        }
    }
}
