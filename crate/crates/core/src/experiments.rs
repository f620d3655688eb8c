//! Desk-scale experiments: gradient bias of batch normalization against
//! batch size, activation growth under perturbed normalization statistics,
//! weight-norm equilibrium under L2 decay, and a decay-factor sweep.

use crate::config::RunConfig;
use crate::data::{generate_dataset, synthetic_images, Dataset, DatasetSpec, SYNTHETIC_SIDE};
use crate::error::{Error, Result};
use crate::net::{sgd_momentum_step, train, Conv2d, Dense, Layer, Network, NormalizerKind, Param, TrainRun};
use crate::online::{layer_scale_forward, SIGMA_FLOOR};
use crate::reference::{exact_backward, exact_normalize, BatchNorm};
use crate::tensor::{angle_degrees, l2_norm, FeatureMap, Rng};

/// Splits the configured dataset, builds the MLP and trains it.
pub fn run_training(cfg: &RunConfig) -> Result<(TrainRun, Network, Dataset)> {
    let t = &cfg.train;
    t.validate()?;
    let data = generate_dataset(&cfg.dataset, t.seed)?;
    let (train_set, val_set) = data.split(cfg.val_fraction);
    if train_set.is_empty() {
        return Err(Error::InvalidParam("no training samples after the validation split".into()));
    }
    let mut rng = Rng::new(t.seed).fork(7);
    let mut net =
        Network::mlp(train_set.input_len(), t.hidden, train_set.classes, t.normalizer, t.online_config(), &mut rng)?;
    if t.normalizer == NormalizerKind::Population {
        net.calibrate_population(&train_set.inputs)?;
    }
    let validation = (!val_set.is_empty()).then_some(&val_set);
    let run = train(t, &train_set, validation, &mut net)?;
    Ok((run, net, val_set))
}

#[derive(Debug, Clone)]
pub struct BiasConfig {
    pub seed: u64,
    pub dataset_size: usize,
    pub batch_sizes: Vec<usize>,
    pub repetitions: usize,
    pub channels: usize,
    pub classes: usize,
}

impl Default for BiasConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            dataset_size: 2048,
            batch_sizes: vec![2, 4, 8, 16, 32, 64, 128, 2048],
            repetitions: 10,
            channels: 8,
            classes: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasEntry {
    pub batch_size: usize,
    pub mean_angle_deg: f64,
    pub std_angle_deg: f64,
    pub repetitions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasReport {
    pub entries: Vec<BiasEntry>,
}

impl BiasReport {
    pub const HEADER: [&'static str; 4] = ["batch_size", "mean_angle_deg", "std_angle_deg", "repetitions"];

    pub fn angle(&self, batch_size: usize) -> Option<f64> {
        self.entries.iter().find(|e| e.batch_size == batch_size).map(|e| e.mean_angle_deg)
    }
}

/// `conv 3x3 -> batch norm -> relu -> dense -> softmax` with fixed weights.
fn bias_network(cfg: &BiasConfig) -> Result<Network> {
    let mut rng = Rng::new(cfg.seed).fork(11);
    let conv = Conv2d::new(1, cfg.channels, 3, SYNTHETIC_SIDE, SYNTHETIC_SIDE, &mut rng)?;
    let flat = cfg.channels * conv.out_height() * conv.out_width();
    Ok(Network::new(vec![
        Layer::Conv(conv),
        Layer::Norm(crate::net::Normalizer::Batch(BatchNorm::new(cfg.channels))),
        Layer::relu(),
        Layer::Dense(Dense::he(flat, cfg.classes, &mut rng)),
    ]))
}

/// Mean over batches of the per-batch gradient of the mean loss.
fn averaged_gradient(net: &mut Network, data: &Dataset, order: &[usize], batch: usize) -> Result<Vec<f64>> {
    let mut sum: Vec<f64> = Vec::new();
    let mut batches = 0usize;
    for chunk in order.chunks_exact(batch) {
        let xs: Vec<FeatureMap> = chunk.iter().map(|&i| data.inputs[i].clone()).collect();
        let ys: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
        net.zero_grad();
        net.train_batch(&xs, &ys)?;
        let g = net.grad_vector();
        if sum.is_empty() {
            sum = g;
        } else {
            sum.iter_mut().zip(&g).for_each(|(s, v)| *s += v);
        }
        batches += 1;
    }
    net.zero_grad();
    let inv = 1.0 / batches as f64;
    sum.iter_mut().for_each(|s| *s *= inv);
    Ok(sum)
}

/// Angle between the batch-averaged gradient and the full-population
/// gradient of a fixed-weight batch-normalized network, per batch size.
pub fn gradient_bias_experiment(cfg: &BiasConfig) -> Result<BiasReport> {
    if cfg.repetitions == 0 || cfg.batch_sizes.is_empty() {
        return Err(Error::InvalidParam("need at least one batch size and one repetition".into()));
    }
    for &b in &cfg.batch_sizes {
        if b < 2 {
            return Err(Error::InvalidParam(format!("batch size {b}: batch normalization needs at least 2")));
        }
        if !cfg.dataset_size.is_multiple_of(b) {
            return Err(Error::InvalidParam(format!("batch size {b} does not divide {}", cfg.dataset_size)));
        }
    }
    let data = synthetic_images(cfg.classes, cfg.dataset_size, cfg.seed)?;
    let mut net = bias_network(cfg)?;
    let identity: Vec<usize> = (0..data.len()).collect();
    let truth = averaged_gradient(&mut net, &data, &identity, data.len())?;

    let mut rng = Rng::new(cfg.seed).fork(12);
    let mut entries = Vec::new();
    for &b in &cfg.batch_sizes {
        let mut angles = Vec::with_capacity(cfg.repetitions);
        for _ in 0..cfg.repetitions {
            let mut order = identity.clone();
            if b < data.len() {
                rng.shuffle(&mut order);
            }
            let g = averaged_gradient(&mut net, &data, &order, b)?;
            angles.push(angle_degrees(&g, &truth)?);
        }
        let n = angles.len() as f64;
        let mean = angles.iter().sum::<f64>() / n;
        let var = angles.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        entries.push(BiasEntry { batch_size: b, mean_angle_deg: mean, std_angle_deg: var.sqrt(), repetitions: cfg.repetitions });
    }
    Ok(BiasReport { entries })
}

#[derive(Debug, Clone)]
pub struct GrowthConfig {
    pub depth: usize,
    pub width: usize,
    pub samples: usize,
    /// Spread of the perturbation: additive `noise * sigma * N(0,1)` on the
    /// mean, lognormal `exp(noise * N(0,1))` on the standard deviation.
    pub noise: f64,
    /// Systematic underestimate: standard deviations are scaled by
    /// `1 - bias_sigma_down`.
    pub bias_sigma_down: f64,
    pub layer_scaling: bool,
    pub seed: u64,
}

impl Default for GrowthConfig {
    fn default() -> Self {
        Self { depth: 64, width: 64, samples: 256, noise: 0.01, bias_sigma_down: 0.05, layer_scaling: false, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrowthProfile {
    pub depth: usize,
    pub noise: f64,
    pub bias_sigma_down: f64,
    pub layer_scaling: bool,
    /// RMS of each layer's normalized (and scaled, when enabled) output.
    pub rms: Vec<f64>,
}

impl GrowthProfile {
    /// Least-squares slope of `ln rms` against the layer index.
    pub fn log_slope(&self) -> f64 {
        let n = self.rms.len() as f64;
        if self.rms.len() < 2 {
            return 0.0;
        }
        let xm = (n - 1.0) / 2.0;
        let ym = self.rms.iter().map(|r| r.ln()).sum::<f64>() / n;
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for (i, r) in self.rms.iter().enumerate() {
            let dx = i as f64 - xm;
            sxy += dx * (r.ln() - ym);
            sxx += dx * dx;
        }
        sxy / sxx
    }

    pub fn max_min_ratio(&self) -> f64 {
        let max = self.rms.iter().copied().fold(0.0, f64::max);
        let min = self.rms.iter().copied().fold(f64::INFINITY, f64::min);
        max / min
    }
}

fn rms(xs: &[FeatureMap]) -> f64 {
    let (sum, count) = xs.iter().fold((0.0, 0usize), |(s, c), x| (s + x.data().iter().map(|v| v * v).sum::<f64>(), c + x.len()));
    (sum / count as f64).sqrt()
}

fn normalize_with(x: &FeatureMap, mean: &[f64], std: &[f64]) -> FeatureMap {
    let mut y = x.clone();
    for (f, (m, s)) in mean.iter().zip(std).enumerate() {
        y.feature_mut(f).iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    y
}

/// Runs a deep `dense -> normalize -> [layer scale] -> relu` chain twice:
/// once to record exact population statistics of every layer, then again
/// with those statistics perturbed.
pub fn activation_growth_experiment(cfg: &GrowthConfig) -> Result<GrowthProfile> {
    if cfg.depth == 0 || cfg.width == 0 || cfg.samples < 2 {
        return Err(Error::InvalidParam("growth needs depth >= 1, width >= 1 and at least 2 samples".into()));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) || !(0.0..1.0).contains(&cfg.bias_sigma_down) {
        return Err(Error::InvalidParam("noise must be >= 0 and bias_sigma_down in [0, 1)".into()));
    }
    let rng = Rng::new(cfg.seed);
    let mut wrng = rng.fork(21);
    let layers: Vec<Dense> = (0..cfg.depth).map(|_| Dense::he(cfg.width, cfg.width, &mut wrng)).collect();
    let inputs: Vec<FeatureMap> = {
        let mut xr = rng.fork(22);
        (0..cfg.samples).map(|_| FeatureMap::from_parts(cfg.width, 1, xr.normal_vec(cfg.width, 1.0))).collect()
    };
    let scale = |ys: Vec<FeatureMap>| -> Vec<FeatureMap> {
        if cfg.layer_scaling {
            ys.iter().map(|y| layer_scale_forward(y, SIGMA_FLOOR).0).collect()
        } else {
            ys
        }
    };
    let relu_all =
        |ys: &[FeatureMap]| -> Vec<FeatureMap> { ys.iter().map(|y| FeatureMap::from_parts(y.features(), 1, crate::tensor::relu(y.data()))).collect() };

    let mut coeffs = Vec::with_capacity(cfg.depth);
    let mut cur = inputs.clone();
    for d in &layers {
        let pre = cur.iter().map(|x| d.apply(x)).collect::<Result<Vec<_>>>()?;
        let fit = crate::net::FrozenNorm::fit(&pre)?;
        let ys: Vec<FeatureMap> = pre.iter().map(|x| normalize_with(x, &fit.mean, &fit.std)).collect();
        cur = relu_all(&scale(ys));
        coeffs.push(fit);
    }

    let mut nrng = rng.fork(23);
    let mut profile = Vec::with_capacity(cfg.depth);
    let mut cur = inputs;
    for (d, fit) in layers.iter().zip(&coeffs) {
        let mean: Vec<f64> = fit.mean.iter().zip(&fit.std).map(|(m, s)| m + cfg.noise * s * nrng.normal()).collect();
        let std: Vec<f64> = fit
            .std
            .iter()
            .map(|s| s * (1.0 - cfg.bias_sigma_down) * (cfg.noise * nrng.normal()).exp())
            .collect();
        let pre = cur.iter().map(|x| d.apply(x)).collect::<Result<Vec<_>>>()?;
        let ys = scale(pre.iter().map(|x| normalize_with(x, &mean, &std)).collect());
        profile.push(rms(&ys));
        cur = relu_all(&ys);
    }
    Ok(GrowthProfile {
        depth: cfg.depth,
        noise: cfg.noise,
        bias_sigma_down: cfg.bias_sigma_down,
        layer_scaling: cfg.layer_scaling,
        rms: profile,
    })
}

#[derive(Debug, Clone)]
pub struct EquilibriumConfig {
    pub eta: f64,
    pub lambda: f64,
    pub steps: usize,
    pub seed: u64,
    pub dims: usize,
    pub batch: usize,
    /// Probability that a training label is flipped.
    pub label_noise: f64,
    /// Skip the loss gradient so only L2 decay acts.
    pub zero_gradients: bool,
}

impl Default for EquilibriumConfig {
    fn default() -> Self {
        Self { eta: 0.1, lambda: 1e-3, steps: 20_000, seed: 1, dims: 16, batch: 32, label_noise: 0.1, zero_gradients: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquilibriumRecord {
    pub step: usize,
    pub w_norm: f64,
    pub grad_norm: f64,
    /// Mean of `grad_norm` over all steps so far.
    pub grad_norm_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumTrace {
    pub records: Vec<EquilibriumRecord>,
    /// `mean |w| / (sqrt(eta / 2 lambda) mean |w'|)` over the last quarter of
    /// the steps.
    pub ratio: f64,
    /// `mean |w|` over the last quarter of the steps.
    pub final_w_norm: f64,
}

impl EquilibriumTrace {
    pub const HEADER: [&'static str; 4] = ["step", "w_norm", "grad_norm", "grad_norm_mean"];
}

/// Logistic loss of `2 y_i` where `y` is `X w` normalized exactly over the
/// batch: the loss is invariant to the scale of `w`. Returns the loss
/// gradient with respect to `w`.
fn normalized_logistic_grad(w: &[f64], xs: &[Vec<f64>], labels: &[f64]) -> Result<Vec<f64>> {
    const LOGIT_SCALE: f64 = 2.0;
    let pre: Vec<f64> = xs.iter().map(|x| x.iter().zip(w).map(|(a, b)| a * b).sum()).collect();
    let norm = exact_normalize(&pre)?;
    let b = xs.len() as f64;
    let y_grad: Vec<f64> = norm
        .y
        .iter()
        .zip(labels)
        .map(|(y, t)| LOGIT_SCALE * (1.0 / (1.0 + (-LOGIT_SCALE * y).exp()) - t) / b)
        .collect();
    let pre_grad = exact_backward(&norm.y, &y_grad, norm.sigma)?;
    let mut g = vec![0.0; w.len()];
    for (x, d) in xs.iter().zip(&pre_grad) {
        g.iter_mut().zip(x).for_each(|(gi, xi)| *gi += d * xi);
    }
    Ok(g)
}

/// Plain SGD with L2 decay on one batch-normalized linear unit.
pub fn equilibrium_experiment(cfg: &EquilibriumConfig) -> Result<EquilibriumTrace> {
    if !(cfg.eta > 0.0 && cfg.lambda > 0.0) || cfg.steps < 4 || cfg.dims == 0 || cfg.batch < 2 {
        return Err(Error::InvalidParam("equilibrium needs eta, lambda > 0, steps >= 4, dims >= 1, batch >= 2".into()));
    }
    let rng = Rng::new(cfg.seed);
    let teacher = rng.fork(31).normal_vec(cfg.dims, 1.0);
    let mut w = Param::new(rng.fork(32).normal_vec(cfg.dims, 1.0 / (cfg.dims as f64).sqrt()), true);
    let mut drng = rng.fork(33);
    let mut records = Vec::with_capacity(cfg.steps);
    let mut grad_sum = 0.0;
    let tail = cfg.steps - cfg.steps / 4;
    let (mut tail_w, mut tail_g) = (0.0, 0.0);
    for step in 0..cfg.steps {
        let grad_norm = if cfg.zero_gradients {
            0.0
        } else {
            let xs: Vec<Vec<f64>> = (0..cfg.batch).map(|_| drng.normal_vec(cfg.dims, 1.0)).collect();
            let labels: Vec<f64> = xs
                .iter()
                .map(|x| {
                    let clean = x.iter().zip(&teacher).map(|(a, b)| a * b).sum::<f64>() > 0.0;
                    let flip = drng.uniform() < cfg.label_noise;
                    if clean != flip { 1.0 } else { 0.0 }
                })
                .collect();
            let g = normalized_logistic_grad(&w.value, &xs, &labels)?;
            w.grad.copy_from_slice(&g);
            l2_norm(&g)
        };
        sgd_momentum_step(&mut w, cfg.eta, 0.0, cfg.lambda);
        let w_norm = l2_norm(&w.value);
        if !w_norm.is_finite() {
            return Err(Error::Diverged { step: step + 1, loss: w_norm });
        }
        grad_sum += grad_norm;
        if step >= tail {
            tail_w += w_norm;
            tail_g += grad_norm;
        }
        records.push(EquilibriumRecord { step: step + 1, w_norm, grad_norm, grad_norm_mean: grad_sum / (step + 1) as f64 });
    }
    let n = (cfg.steps - tail) as f64;
    let predicted = (cfg.eta / (2.0 * cfg.lambda)).sqrt() * tail_g / n;
    Ok(EquilibriumTrace { records, ratio: tail_w / n / predicted, final_w_norm: tail_w / n })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub alpha_f: f64,
    pub alpha_b: f64,
    pub final_loss: f64,
    pub diverged: bool,
}

impl SweepCell {
    pub const HEADER: [&'static str; 4] = ["alpha_f", "alpha_b", "final_loss", "diverged"];
}

/// `1 - 10^-k` for `k` evenly spaced between `lo` and `hi`.
pub fn log_decay_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    (0..points)
        .map(|i| {
            let t = if points == 1 { 0.0 } else { i as f64 / (points - 1) as f64 };
            1.0 - 10f64.powf(-(lo + t * (hi - lo)))
        })
        .collect()
}

/// Trains the online-normalized MLP of `base` for every `(alpha_f,
/// alpha_b)` pair. A divergent cell is reported, not fatal.
pub fn decay_sweep(alpha_f_grid: &[f64], alpha_b_grid: &[f64], base: &RunConfig) -> Result<Vec<SweepCell>> {
    if alpha_f_grid.is_empty() || alpha_b_grid.is_empty() {
        return Err(Error::InvalidParam("sweep grids must be nonempty".into()));
    }
    let mut cells = Vec::new();
    for &alpha_f in alpha_f_grid {
        for &alpha_b in alpha_b_grid {
            let mut cfg = base.clone();
            cfg.train.normalizer = NormalizerKind::Online;
            cfg.train.alpha_f = alpha_f;
            cfg.train.alpha_b = alpha_b;
            let (run, _, _) = run_training(&cfg)?;
            let (final_loss, diverged) = match (run.diverged, run.final_record()) {
                (Some((_, loss)), _) => (loss, true),
                (None, Some(r)) => (r.loss, false),
                (None, None) => (f64::NAN, false),
            };
            cells.push(SweepCell { alpha_f, alpha_b, final_loss, diverged });
        }
    }
    Ok(cells)
}

/// Small blob task for quick sweeps.
pub fn sweep_base(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.seed = seed;
    cfg.train.epochs = 2;
    cfg.dataset = DatasetSpec::GaussianBlobs { classes: 3, samples: 1500, dims: 8, scale: 4.0, std: 1.0 };
    cfg
}
