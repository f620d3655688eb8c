//! Online normalization: per-feature streaming statistics in the forward
//! pass, a two-stage control process in the backward pass, an optional
//! affine transform and layer scaling across all features.
//!
//! Samples are processed one at a time. Each training sample makes exactly
//! one [`OnlineNormState::forward_sample`] call followed by exactly one
//! [`OnlineNormState::backward_sample`] call with the cache the forward call
//! produced; the state refuses stale or reused caches.

use crate::error::{shape_err, Error, Result};
use crate::param::Param;
use crate::tensor::{feature_mean, feature_var, FeatureMap};

/// Guard applied to every standard-deviation style divisor.
pub const SIGMA_FLOOR: f64 = 1e-5;

const RECORD_MAGIC: &[u8; 4] = b"ONRM";
const RECORD_VERSION: u32 = 1;
const RECORD_HEADER_LEN: usize = 48;
const FLAG_GRAD_RESCALE: u64 = 1;

fn check_decay(name: &str, alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParam(format!("{name} = {alpha} must lie strictly inside (0, 1)")))
    }
}

/// Running statistics and backward accumulators for one normalized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineNormState {
    mu: Vec<f64>,
    var: Vec<f64>,
    eps_y: Vec<f64>,
    eps_1: Vec<f64>,
    /// Running mean square of the orthogonalized gradient; only read when
    /// `grad_rescale` is set.
    grad_ms: Vec<f64>,
    alpha_f: f64,
    alpha_b: f64,
    sigma_floor: f64,
    grad_rescale: bool,
    seq: u64,
    awaiting: Option<u64>,
}

/// What a forward call hands to its matching backward call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    seq: u64,
    y: FeatureMap,
    sigma_used: Vec<f64>,
}

impl ForwardCache {
    /// Normalized output of the forward call (before affine and layer scaling).
    pub fn y(&self) -> &FeatureMap {
        &self.y
    }

    /// Per-feature divisor the forward call used (`max(sigma_{t-1}, floor)`).
    pub fn sigma_used(&self) -> &[f64] {
        &self.sigma_used
    }
}

impl OnlineNormState {
    pub fn new(features: usize, alpha_f: f64, alpha_b: f64) -> Result<Self> {
        Self::with_floor(features, alpha_f, alpha_b, SIGMA_FLOOR)
    }

    pub fn with_floor(features: usize, alpha_f: f64, alpha_b: f64, sigma_floor: f64) -> Result<Self> {
        if features == 0 {
            return Err(Error::InvalidParam("online norm needs at least one feature".into()));
        }
        check_decay("alpha_f", alpha_f)?;
        check_decay("alpha_b", alpha_b)?;
        if !(sigma_floor > 0.0 && sigma_floor.is_finite()) {
            return Err(Error::InvalidParam(format!("sigma_floor = {sigma_floor} must be positive")));
        }
        let mut s = Self {
            mu: Vec::new(),
            var: Vec::new(),
            eps_y: Vec::new(),
            eps_1: Vec::new(),
            grad_ms: Vec::new(),
            alpha_f,
            alpha_b,
            sigma_floor,
            grad_rescale: false,
            seq: 0,
            awaiting: None,
        };
        s.reset_to(features);
        Ok(s)
    }

    /// Divide the backward output by a running RMS of the gradient instead
    /// of the forward `sigma`.
    pub fn set_grad_rescale(&mut self, on: bool) {
        self.grad_rescale = on;
    }

    pub fn grad_rescale(&self) -> bool {
        self.grad_rescale
    }

    fn reset_to(&mut self, features: usize) {
        self.mu = vec![0.0; features];
        self.var = vec![1.0; features];
        self.eps_y = vec![0.0; features];
        self.eps_1 = vec![0.0; features];
        self.grad_ms = vec![1.0; features];
        self.awaiting = None;
    }

    /// Back to `mu = 0, var = 1`, zero accumulators. Outstanding caches
    /// become invalid.
    pub fn reset(&mut self) {
        let n = self.features();
        self.reset_to(n);
    }

    pub fn features(&self) -> usize {
        self.mu.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mu
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    pub fn eps_y(&self) -> &[f64] {
        &self.eps_y
    }

    pub fn eps_1(&self) -> &[f64] {
        &self.eps_1
    }

    pub fn alpha_f(&self) -> f64 {
        self.alpha_f
    }

    pub fn alpha_b(&self) -> f64 {
        self.alpha_b
    }

    pub fn sigma_floor(&self) -> f64 {
        self.sigma_floor
    }

    /// Number of forward calls since construction.
    pub fn steps(&self) -> u64 {
        self.seq
    }

    fn check_input(&self, x: &FeatureMap) -> Result<()> {
        if x.features() != self.features() {
            return Err(shape_err(format!(
                "input has {} features, state has {}",
                x.features(),
                self.features()
            )));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("online norm input"));
        }
        Ok(())
    }

    fn sigma(&self, f: usize) -> f64 {
        self.var[f].sqrt().max(self.sigma_floor)
    }

    fn normalize_with_current(&self, x: &FeatureMap) -> (FeatureMap, Vec<f64>) {
        let sigma_used: Vec<f64> = (0..self.features()).map(|f| self.sigma(f)).collect();
        let mut y = x.clone();
        for (f, &s) in sigma_used.iter().enumerate() {
            let mu = self.mu[f];
            for v in y.feature_mut(f) {
                *v = (*v - mu) / s;
            }
        }
        (y, sigma_used)
    }

    /// Normalizes one sample with the statistics of the previous step, then
    /// folds the sample into the running mean and variance.
    pub fn forward_sample(&mut self, x: &FeatureMap) -> Result<(FeatureMap, ForwardCache)> {
        self.check_input(x)?;
        let (y, sigma_used) = self.normalize_with_current(x);

        let a = self.alpha_f;
        let sample_mean = feature_mean(x);
        let sample_var = feature_var(x);
        for f in 0..self.features() {
            let prev = self.mu[f];
            let d = sample_mean[f] - prev;
            self.mu[f] = a * prev + (1.0 - a) * sample_mean[f];
            self.var[f] = a * self.var[f] + (1.0 - a) * sample_var[f] + a * (1.0 - a) * d * d;
        }

        self.seq += 1;
        self.awaiting = Some(self.seq);
        let cache = ForwardCache { seq: self.seq, y: y.clone(), sigma_used };
        Ok((y, cache))
    }

    /// Normalization with frozen statistics; the state is not touched.
    pub fn infer(&self, x: &FeatureMap) -> Result<FeatureMap> {
        self.check_input(x)?;
        Ok(self.normalize_with_current(x).0)
    }

    /// Backward control process for the sample `cache` came from.
    ///
    /// First removes the running component along `y`, then the running mean,
    /// accumulating both residuals in `eps_y` and `eps_1`.
    pub fn backward_sample(&mut self, y_grad: &FeatureMap, cache: &ForwardCache) -> Result<FeatureMap> {
        match self.awaiting {
            Some(seq) if seq == cache.seq => {}
            Some(_) => return Err(Error::Handshake("cache is not from the latest forward call")),
            None => return Err(Error::Handshake("backward without a pending forward call")),
        }
        y_grad.check_same_shape(&cache.y, "backward gradient vs cached output")?;
        if !y_grad.is_finite() {
            return Err(Error::NonFinite("online norm gradient"));
        }

        let k = 1.0 - self.alpha_b;
        let spatial = y_grad.spatial() as f64;
        let mut x_grad = y_grad.clone();
        for f in 0..self.features() {
            let y = cache.y.feature(f);
            let g = x_grad.feature_mut(f);

            let eps_y = self.eps_y[f];
            let mut proj = 0.0;
            let mut sq = 0.0;
            for (gi, yi) in g.iter_mut().zip(y) {
                *gi -= k * eps_y * yi;
                proj += *gi * yi;
                sq += *gi * *gi;
            }
            self.eps_y[f] = eps_y + proj / spatial;

            let divisor = if self.grad_rescale {
                let d = self.grad_ms[f].sqrt().max(self.sigma_floor);
                self.grad_ms[f] = self.alpha_b * self.grad_ms[f] + k * sq / spatial;
                d
            } else {
                cache.sigma_used[f]
            };

            let eps_1 = self.eps_1[f];
            let mut total = 0.0;
            for gi in g.iter_mut() {
                *gi = *gi / divisor - k * eps_1;
                total += *gi;
            }
            self.eps_1[f] = eps_1 + total / spatial;
        }
        self.awaiting = None;
        Ok(x_grad)
    }

    /// Little-endian checkpoint record; layout documented in the README.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.features();
        let mut out = Vec::with_capacity(RECORD_HEADER_LEN + 5 * 8 * n);
        out.extend_from_slice(RECORD_MAGIC);
        out.extend_from_slice(&RECORD_VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&self.alpha_f.to_le_bytes());
        out.extend_from_slice(&self.alpha_b.to_le_bytes());
        out.extend_from_slice(&self.sigma_floor.to_le_bytes());
        let flags = if self.grad_rescale { FLAG_GRAD_RESCALE } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        for v in [&self.mu, &self.var, &self.eps_y, &self.eps_1, &self.grad_ms] {
            for x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < RECORD_HEADER_LEN {
            return Err(Error::Decode(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[0..4] != RECORD_MAGIC {
            return Err(Error::Decode("bad magic".into()));
        }
        let word = |off: usize| -> [u8; 8] { bytes[off..off + 8].try_into().expect("8-byte slice") };
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4-byte slice"));
        if version != RECORD_VERSION {
            return Err(Error::Decode(format!("unsupported version {version}")));
        }
        let n = u64::from_le_bytes(word(8)) as usize;
        let alpha_f = f64::from_le_bytes(word(16));
        let alpha_b = f64::from_le_bytes(word(24));
        let floor = f64::from_le_bytes(word(32));
        let flags = u64::from_le_bytes(word(40));
        let expected = n
            .checked_mul(40)
            .and_then(|b| b.checked_add(RECORD_HEADER_LEN))
            .ok_or_else(|| Error::Decode("feature count overflows".into()))?;
        if bytes.len() != expected {
            return Err(Error::Decode(format!("expected {expected} bytes, got {}", bytes.len())));
        }
        let mut s = Self::with_floor(n, alpha_f, alpha_b, floor)?;
        s.grad_rescale = flags & FLAG_GRAD_RESCALE != 0;
        let mut off = RECORD_HEADER_LEN;
        for v in [&mut s.mu, &mut s.var, &mut s.eps_y, &mut s.eps_1, &mut s.grad_ms] {
            for x in v.iter_mut() {
                *x = f64::from_le_bytes(word(off));
                off += 8;
            }
        }
        if s.var.iter().any(|v| *v < 0.0) {
            return Err(Error::Decode("negative variance".into()));
        }
        if [&s.mu, &s.var, &s.eps_y, &s.eps_1, &s.grad_ms].iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::Decode("non-finite statistic".into()));
        }
        Ok(s)
    }
}

/// Cache of one layer-scaling call.
#[derive(Debug, Clone)]
pub struct LayerScaleCache {
    z: FeatureMap,
    zeta: f64,
}

impl LayerScaleCache {
    pub fn z(&self) -> &FeatureMap {
        &self.z
    }

    /// Divisor actually applied (`max(rms, floor)`).
    pub fn zeta(&self) -> f64 {
        self.zeta
    }
}

/// Divides a sample by its RMS over every feature and position.
pub fn layer_scale_forward(y: &FeatureMap, floor: f64) -> (FeatureMap, LayerScaleCache) {
    let ms = y.data().iter().map(|v| v * v).sum::<f64>() / y.len() as f64;
    let zeta = ms.sqrt().max(floor);
    let z = FeatureMap::from_parts(y.features(), y.spatial(), y.data().iter().map(|v| v / zeta).collect());
    (z.clone(), LayerScaleCache { z, zeta })
}

/// Exact gradient of [`layer_scale_forward`].
pub fn layer_scale_backward(z_grad: &FeatureMap, cache: &LayerScaleCache) -> Result<FeatureMap> {
    z_grad.check_same_shape(&cache.z, "layer scaling gradient vs cached output")?;
    let n = z_grad.len() as f64;
    let m = cache.z.data().iter().zip(z_grad.data()).map(|(z, g)| z * g).sum::<f64>() / n;
    let data = cache
        .z
        .data()
        .iter()
        .zip(z_grad.data())
        .map(|(z, g)| (g - z * m) / cache.zeta)
        .collect();
    Ok(FeatureMap::from_parts(z_grad.features(), z_grad.spatial(), data))
}

/// Per-feature gain and bias restoring the two degrees of freedom the
/// normalization removes.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub gain: Param,
    pub bias: Param,
}

impl AffineParams {
    pub fn new(features: usize) -> Self {
        Self { gain: Param::new(vec![1.0; features], false), bias: Param::new(vec![0.0; features], false) }
    }

    pub fn features(&self) -> usize {
        self.gain.len()
    }

    fn check(&self, m: &FeatureMap) -> Result<()> {
        if m.features() == self.features() {
            Ok(())
        } else {
            Err(shape_err(format!("affine has {} features, input {}", self.features(), m.features())))
        }
    }

    pub fn forward(&self, z: &FeatureMap) -> Result<FeatureMap> {
        self.check(z)?;
        let mut out = z.clone();
        for f in 0..self.features() {
            let (g, b) = (self.gain.value[f], self.bias.value[f]);
            for v in out.feature_mut(f) {
                *v = g * *v + b;
            }
        }
        Ok(out)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, z: &FeatureMap, out_grad: &FeatureMap) -> Result<FeatureMap> {
        self.check(z)?;
        z.check_same_shape(out_grad, "affine backward")?;
        let mut z_grad = out_grad.clone();
        for f in 0..self.features() {
            let zf = z.feature(f);
            let gf = out_grad.feature(f);
            self.gain.grad[f] += zf.iter().zip(gf).map(|(a, b)| a * b).sum::<f64>();
            self.bias.grad[f] += gf.iter().sum::<f64>();
            let g = self.gain.value[f];
            for v in z_grad.feature_mut(f) {
                *v *= g;
            }
        }
        Ok(z_grad)
    }

    pub fn zero_grad(&mut self) {
        self.gain.zero_grad();
        self.bias.zero_grad();
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnlineNormConfig {
    pub alpha_f: f64,
    pub alpha_b: f64,
    pub sigma_floor: f64,
    pub layer_scaling: bool,
    pub affine: bool,
    pub grad_rescale: bool,
}

impl Default for OnlineNormConfig {
    fn default() -> Self {
        Self {
            alpha_f: 0.999,
            alpha_b: 0.99,
            sigma_floor: SIGMA_FLOOR,
            layer_scaling: true,
            affine: true,
            grad_rescale: false,
        }
    }
}

#[derive(Debug, Clone)]
struct PendingSample {
    norm: ForwardCache,
    scale: Option<LayerScaleCache>,
}

/// Complete online normalization layer: streaming normalization, then the
/// optional affine transform, then optional layer scaling.
#[derive(Debug, Clone)]
pub struct OnlineNorm {
    state: OnlineNormState,
    affine: Option<AffineParams>,
    config: OnlineNormConfig,
    pending: Option<PendingSample>,
}

impl OnlineNorm {
    pub fn new(features: usize, config: OnlineNormConfig) -> Result<Self> {
        let mut state = OnlineNormState::with_floor(features, config.alpha_f, config.alpha_b, config.sigma_floor)?;
        state.set_grad_rescale(config.grad_rescale);
        Ok(Self {
            state,
            affine: config.affine.then(|| AffineParams::new(features)),
            config,
            pending: None,
        })
    }

    pub fn config(&self) -> &OnlineNormConfig {
        &self.config
    }

    pub fn state(&self) -> &OnlineNormState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut OnlineNormState {
        &mut self.state
    }

    pub fn affine(&self) -> Option<&AffineParams> {
        self.affine.as_ref()
    }

    pub fn affine_mut(&mut self) -> Option<&mut AffineParams> {
        self.affine.as_mut()
    }

    pub fn reset(&mut self) {
        self.state.reset();
        self.pending = None;
    }

    /// Replaces the streaming state, e.g. from a checkpoint record. The
    /// feature count must match; a pending forward call is dropped.
    pub fn load_state(&mut self, state: OnlineNormState) -> Result<()> {
        if state.features() != self.state.features() {
            return Err(shape_err(format!(
                "state has {} features, layer has {}",
                state.features(),
                self.state.features()
            )));
        }
        self.config.alpha_f = state.alpha_f();
        self.config.alpha_b = state.alpha_b();
        self.config.sigma_floor = state.sigma_floor();
        self.config.grad_rescale = state.grad_rescale();
        self.state = state;
        self.pending = None;
        Ok(())
    }

    fn finish(&self, y: &FeatureMap) -> Result<(FeatureMap, Option<LayerScaleCache>)> {
        let a = match &self.affine {
            Some(p) => p.forward(y)?,
            None => y.clone(),
        };
        if self.config.layer_scaling {
            let (z, cache) = layer_scale_forward(&a, self.config.sigma_floor);
            Ok((z, Some(cache)))
        } else {
            Ok((a, None))
        }
    }

    /// Training-mode forward: advances the running statistics.
    pub fn forward(&mut self, x: &FeatureMap) -> Result<FeatureMap> {
        let (y, norm) = self.state.forward_sample(x)?;
        let (z, scale) = self.finish(&y)?;
        self.pending = Some(PendingSample { norm, scale });
        Ok(z)
    }

    /// Inference-mode forward with frozen statistics.
    pub fn infer(&self, x: &FeatureMap) -> Result<FeatureMap> {
        let y = self.state.infer(x)?;
        Ok(self.finish(&y)?.0)
    }

    pub fn backward(&mut self, z_grad: &FeatureMap) -> Result<FeatureMap> {
        let pending = self
            .pending
            .take()
            .ok_or(Error::Handshake("backward without a pending forward call"))?;
        let a_grad = match &pending.scale {
            Some(c) => layer_scale_backward(z_grad, c)?,
            None => z_grad.clone(),
        };
        let y_grad = match &mut self.affine {
            Some(p) => p.backward(pending.norm.y(), &a_grad)?,
            None => a_grad,
        };
        self.state.backward_sample(&y_grad, &pending.norm)
    }
}
