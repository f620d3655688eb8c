//! Exact finite-population normalization and its projection-form gradient,
//! plus mini-batch and layer normalization built on it.

use crate::error::{shape_err, Error, Result};
use crate::online::SIGMA_FLOOR;
use crate::tensor::{FeatureMap, Matrix};

/// Decay of the batch-norm inference statistics.
pub const BN_RUNNING_DECAY: f64 = 0.99;

/// Finite sample `x ∈ R^N` standing in for a whole input distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationBatch {
    values: Vec<f64>,
}

impl PopulationBatch {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidParam(format!(
                "population needs at least 2 samples, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("population"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn normalize(&self) -> Result<ExactNorm> {
        exact_normalize(&self.values)
    }

    pub fn jacobian(&self) -> Result<Matrix> {
        jacobian_dense(&self.values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactNorm {
    pub y: Vec<f64>,
    pub mu: f64,
    pub sigma: f64,
}

/// Centered values, population mean and standard deviation.
///
/// Two values are centered as `±(x0 - x1) / 2` so that a pair always maps to
/// exactly `(±1, ∓1)`; the generic `x - mean` path can leave the two halves
/// one ulp apart.
fn centered_moments(x: &[f64]) -> (Vec<f64>, f64, f64) {
    let n = x.len() as f64;
    let (d, mu) = if x.len() == 2 {
        let h = (x[0] - x[1]) * 0.5;
        (vec![h, -h], 0.5 * x[0] + 0.5 * x[1])
    } else {
        let mu = x.iter().sum::<f64>() / n;
        (x.iter().map(|v| v - mu).collect(), mu)
    };
    let var = d.iter().map(|v| v * v).sum::<f64>() / n;
    (d, mu, var.sqrt())
}

/// `y = (x - mu) / sigma` with population moments. Fails when `sigma` is
/// below [`SIGMA_FLOOR`].
pub fn exact_normalize(x: &[f64]) -> Result<ExactNorm> {
    if x.len() < 2 {
        return Err(Error::InvalidParam(format!("exact normalization of {} value(s)", x.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("exact_normalize input"));
    }
    let (d, mu, sigma) = centered_moments(x);
    if sigma < SIGMA_FLOOR {
        return Err(Error::Degenerate { sigma, floor: SIGMA_FLOOR });
    }
    Ok(ExactNorm { y: d.into_iter().map(|v| v / sigma).collect(), mu, sigma })
}

/// `x' = (1/sigma) [y' - mean(y') 1 - mean(y' y) y]`, the input gradient of
/// [`exact_normalize`].
///
/// For `N = 2` the normalized output can only be `±(1, -1)`, the tangent
/// space is a point and the gradient is exactly zero.
pub fn exact_backward(y: &[f64], y_grad: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if y.len() != y_grad.len() {
        return Err(shape_err(format!("exact_backward: {} outputs, {} gradients", y.len(), y_grad.len())));
    }
    if y.len() == 2 {
        return Ok(vec![0.0; 2]);
    }
    let n = y.len() as f64;
    let m1 = y_grad.iter().sum::<f64>() / n;
    let my = y.iter().zip(y_grad).map(|(a, b)| a * b).sum::<f64>() / n;
    Ok(y.iter().zip(y_grad).map(|(yi, gi)| (gi - m1 - my * yi) / sigma).collect())
}

/// Removes the component of `v` along `dir`.
pub fn project_out(v: &[f64], dir: &[f64]) -> Vec<f64> {
    let dd: f64 = dir.iter().map(|d| d * d).sum();
    let vd: f64 = v.iter().zip(dir).map(|(a, b)| a * b).sum();
    let c = vd / dd;
    v.iter().zip(dir).map(|(a, b)| a - c * b).collect()
}

/// Removes the mean (the component along the ones vector).
pub fn project_out_ones(v: &[f64]) -> Vec<f64> {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|a| a - m).collect()
}

/// Dense Jacobian `J[i][j] = dy_i / dx_j = ((N δ_ij - 1) - y_i y_j) / (N σ)`.
pub fn jacobian_dense(x: &[f64]) -> Result<Matrix> {
    let ExactNorm { y, sigma, .. } = exact_normalize(x)?;
    let n = y.len();
    let nf = n as f64;
    let mut j = Matrix::zeros(n, n);
    for r in 0..n {
        for c in 0..n {
            let delta = if r == c { nf } else { 0.0 };
            j.set(r, c, ((delta - 1.0) - y[r] * y[c]) / (nf * sigma));
        }
    }
    Ok(j)
}

/// Floored variant used inside layers, where a constant feature must not
/// abort training.
#[derive(Debug, Clone)]
struct GroupNorm {
    y: Vec<f64>,
    sigma: f64,
    floored: bool,
}

fn normalize_group(x: &[f64]) -> (GroupNorm, f64, f64) {
    let (d, mu, sigma) = centered_moments(x);
    let floored = sigma < SIGMA_FLOOR;
    let s = sigma.max(SIGMA_FLOOR);
    let y = d.into_iter().map(|v| v / s).collect();
    (GroupNorm { y, sigma: s, floored }, mu, sigma)
}

fn backward_group(g: &GroupNorm, y_grad: &[f64]) -> Vec<f64> {
    if g.floored {
        // Division by a constant floor: only the mean is removed.
        let m = y_grad.iter().sum::<f64>() / y_grad.len() as f64;
        return y_grad.iter().map(|v| (v - m) / g.sigma).collect();
    }
    exact_backward(&g.y, y_grad, g.sigma).expect("lengths match by construction")
}

/// Mini-batch normalization: per feature over the batch and spatial extent.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    features: usize,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    cache: Option<(usize, usize, Vec<GroupNorm>)>,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        Self {
            features,
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            cache: None,
        }
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn running_mean(&self) -> &[f64] {
        &self.running_mean
    }

    pub fn running_var(&self) -> &[f64] {
        &self.running_var
    }

    fn check_batch(&self, batch: &[FeatureMap]) -> Result<usize> {
        let first = batch.first().ok_or_else(|| shape_err("empty batch"))?;
        if first.features() != self.features {
            return Err(shape_err(format!("batch norm has {} features, input {}", self.features, first.features())));
        }
        for m in batch {
            m.check_same_shape(first, "batch members")?;
        }
        Ok(first.spatial())
    }

    /// Training-mode forward over a batch of at least two samples.
    pub fn forward(&mut self, batch: &[FeatureMap]) -> Result<Vec<FeatureMap>> {
        let spatial = self.check_batch(batch)?;
        if batch.len() < 2 {
            return Err(Error::InvalidParam("batch normalization needs a batch of at least 2".into()));
        }
        let mut out: Vec<FeatureMap> = batch.to_vec();
        let mut groups = Vec::with_capacity(self.features);
        for f in 0..self.features {
            let vals: Vec<f64> = batch.iter().flat_map(|m| m.feature(f).iter().copied()).collect();
            let (g, mu, sigma) = normalize_group(&vals);
            for (b, o) in out.iter_mut().enumerate() {
                o.feature_mut(f).copy_from_slice(&g.y[b * spatial..(b + 1) * spatial]);
            }
            self.running_mean[f] = BN_RUNNING_DECAY * self.running_mean[f] + (1.0 - BN_RUNNING_DECAY) * mu;
            self.running_var[f] = BN_RUNNING_DECAY * self.running_var[f] + (1.0 - BN_RUNNING_DECAY) * sigma * sigma;
            groups.push(g);
        }
        self.cache = Some((batch.len(), spatial, groups));
        Ok(out)
    }

    pub fn backward(&mut self, grads: &[FeatureMap]) -> Result<Vec<FeatureMap>> {
        let (n, spatial, groups) = self
            .cache
            .take()
            .ok_or(Error::Handshake("batch norm backward without forward"))?;
        if grads.len() != n || grads.iter().any(|g| g.features() != self.features || g.spatial() != spatial) {
            return Err(shape_err("batch norm gradient does not match the cached batch"));
        }
        let mut out = grads.to_vec();
        for (f, g) in groups.iter().enumerate() {
            let vals: Vec<f64> = grads.iter().flat_map(|m| m.feature(f).iter().copied()).collect();
            let dx = backward_group(g, &vals);
            for (b, o) in out.iter_mut().enumerate() {
                o.feature_mut(f).copy_from_slice(&dx[b * spatial..(b + 1) * spatial]);
            }
        }
        Ok(out)
    }

    /// Inference with the running statistics.
    pub fn infer(&self, x: &FeatureMap) -> Result<FeatureMap> {
        if x.features() != self.features {
            return Err(shape_err("batch norm inference feature count"));
        }
        let mut y = x.clone();
        for f in 0..self.features {
            let s = self.running_var[f].sqrt().max(SIGMA_FLOOR);
            let m = self.running_mean[f];
            y.feature_mut(f).iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        Ok(y)
    }
}

/// Layer normalization: each sample normalized across all of its features
/// and positions.
#[derive(Debug, Clone, Default)]
pub struct LayerNorm {
    cache: Option<Vec<GroupNorm>>,
}

impl LayerNorm {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn normalize(x: &FeatureMap) -> Result<FeatureMap> {
        if x.len() < 2 {
            return Err(Error::InvalidParam("layer normalization needs at least 2 elements".into()));
        }
        let (g, _, _) = normalize_group(x.data());
        Ok(FeatureMap::from_parts(x.features(), x.spatial(), g.y))
    }

    pub fn forward(&mut self, batch: &[FeatureMap]) -> Result<Vec<FeatureMap>> {
        let mut out = Vec::with_capacity(batch.len());
        let mut groups = Vec::with_capacity(batch.len());
        for x in batch {
            if x.len() < 2 {
                return Err(Error::InvalidParam("layer normalization needs at least 2 elements".into()));
            }
            let (g, _, _) = normalize_group(x.data());
            out.push(FeatureMap::from_parts(x.features(), x.spatial(), g.y.clone()));
            groups.push(g);
        }
        self.cache = Some(groups);
        Ok(out)
    }

    pub fn backward(&mut self, grads: &[FeatureMap]) -> Result<Vec<FeatureMap>> {
        let groups = self.cache.take().ok_or(Error::Handshake("layer norm backward without forward"))?;
        if groups.len() != grads.len() {
            return Err(shape_err("layer norm gradient batch size"));
        }
        grads
            .iter()
            .zip(&groups)
            .map(|(g, grp)| {
                if g.len() != grp.y.len() {
                    return Err(shape_err("layer norm gradient size"));
                }
                Ok(FeatureMap::from_parts(g.features(), g.spatial(), backward_group(grp, g.data())))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn pair_maps_to_plus_minus_one() {
        let r = exact_normalize(&[0.3, 0.7]).unwrap();
        assert_eq!(r.y, vec![-1.0, 1.0]);
        assert!((r.mu - 0.5).abs() < 1e-15);
    }

    #[test]
    fn standardized_input_is_a_fixed_point() {
        let x = [-1.0, 1.0, -1.0, 1.0];
        let r = exact_normalize(&x).unwrap();
        assert_eq!(r.y, x.to_vec());
        assert_eq!(r.sigma, 1.0);
    }

    #[test]
    fn random_population_has_zero_mean_unit_variance() {
        let mut rng = Rng::new(1);
        let x: Vec<f64> = (0..50).map(|_| rng.gaussian(3.0, 2.0)).collect();
        let r = exact_normalize(&x).unwrap();
        assert!(r.y.iter().sum::<f64>().abs() < 1e-9);
        assert!((r.y.iter().map(|v| v * v).sum::<f64>() - 50.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(exact_normalize(&[2.0, 2.0, 2.0]), Err(Error::Degenerate { .. })));
        assert!(exact_normalize(&[1.0]).is_err());
        assert!(PopulationBatch::new(vec![1.0]).is_err());
        assert!(exact_backward(&[1.0, 2.0, 3.0], &[1.0], 1.0).is_err());
    }

    #[test]
    fn backward_annihilates_ones_and_y() {
        let mut rng = Rng::new(2);
        let x = rng.normal_vec(7, 1.0);
        let r = exact_normalize(&x).unwrap();
        let along_y: Vec<f64> = r.y.iter().map(|v| 3.0 * v).collect();
        let g = exact_backward(&r.y, &along_y, r.sigma).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
        let g = exact_backward(&r.y, &[-0.5; 7], r.sigma).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn jacobian_rows_sum_to_zero_and_matches_backward() {
        let mut rng = Rng::new(4);
        for n in [2usize, 5] {
            let x = rng.normal_vec(n, 1.0);
            let j = jacobian_dense(&x).unwrap();
            let r = exact_normalize(&x).unwrap();
            for row in 0..n {
                assert!(j.row(row).iter().sum::<f64>().abs() < 1e-12);
            }
            let yg = rng.normal_vec(n, 1.0);
            let via_j = j.matvec_t(&yg).unwrap();
            let direct = exact_backward(&r.y, &yg, r.sigma).unwrap();
            for (a, b) in via_j.iter().zip(&direct) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batch_norm_pair_and_errors() {
        let mut bn = BatchNorm::new(3);
        let a = FeatureMap::from_vec(vec![0.1, 5.0, -2.0]).unwrap();
        let b = FeatureMap::from_vec(vec![0.4, 1.0, -3.0]).unwrap();
        let out = bn.forward(&[a.clone(), b]).unwrap();
        for f in 0..3 {
            assert_eq!(out[0].data()[f].abs(), 1.0);
            assert_eq!(out[0].data()[f], -out[1].data()[f]);
        }
        let g = bn
            .backward(&[FeatureMap::from_vec(vec![1.0, 2.0, 3.0]).unwrap(), FeatureMap::from_vec(vec![-4.0, 0.5, 9.0]).unwrap()])
            .unwrap();
        assert!(g.iter().all(|m| m.data().iter().all(|v| *v == 0.0)));

        assert!(bn.forward(std::slice::from_ref(&a)).is_err());
        assert!(bn.backward(&[a.clone(), a.clone()]).is_err());
        let mut bn1 = BatchNorm::new(1);
        assert!(bn1.forward(&[a.clone(), a]).is_err());
    }

    #[test]
    fn batch_norm_constant_feature_is_floored() {
        let mut bn = BatchNorm::new(1);
        let x = vec![FeatureMap::from_vec(vec![2.0]).unwrap(); 4];
        let y = bn.forward(&x).unwrap();
        assert!(y.iter().all(|m| m.data()[0] == 0.0));
        let g = bn.backward(&x).unwrap();
        assert!(g.iter().all(|m| m.is_finite()));
    }

    #[test]
    fn batch_norm_running_stats_and_inference() {
        let mut bn = BatchNorm::new(1);
        let x: Vec<FeatureMap> = [1.0, 3.0].iter().map(|v| FeatureMap::from_vec(vec![*v]).unwrap()).collect();
        bn.forward(&x).unwrap();
        assert!((bn.running_mean()[0] - 0.02).abs() < 1e-15);
        assert!((bn.running_var()[0] - (0.99 + 0.01)).abs() < 1e-15);
        let y = bn.infer(&x[0]).unwrap();
        assert!(y.is_finite());
    }

    #[test]
    fn layer_norm_two_features() {
        let y = LayerNorm::normalize(&FeatureMap::from_vec(vec![1.0, 3.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
        assert!(LayerNorm::normalize(&FeatureMap::from_vec(vec![1.0]).unwrap()).is_err());
        let mut ln = LayerNorm::new();
        assert!(ln.backward(&[]).is_err());
    }
}
