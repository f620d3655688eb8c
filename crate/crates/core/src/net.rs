//! Small feed-forward networks with hand-written backprop: dense and
//! valid-padding conv layers, ReLU, a choice of normalizer, softmax
//! cross-entropy, SGD with momentum and L2 decay, and a training loop.

use std::fmt;
use std::str::FromStr;

use crate::data::Dataset;
use crate::error::{shape_err, Error, Result};
use crate::online::{OnlineNorm, OnlineNormConfig};
pub use crate::param::Param;
use crate::reference::{BatchNorm, LayerNorm};
use crate::tensor::{relu, relu_backward, FeatureMap, Rng};

/// Loss magnitude treated as divergence.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// `v <- mu v + (1 - mu)(g + lambda w)`, `w <- w - eta v`, then clears `g`.
/// Decay only touches parameters flagged for it.
pub fn sgd_momentum_step(p: &mut Param, eta: f64, mu: f64, lambda: f64) {
    let l = if p.decay { lambda } else { 0.0 };
    for ((w, g), v) in p.value.iter_mut().zip(p.grad.iter_mut()).zip(p.velocity.iter_mut()) {
        *v = mu * *v + (1.0 - mu) * (*g + l * *w);
        *w -= eta * *v;
        *g = 0.0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaledHyperparams {
    /// Learning rate scaled linearly with the batch size.
    pub eta: f64,
    /// Momentum with the per-sample decay held fixed.
    pub mu: f64,
    /// `eta` corrected for momentum implementations that do not multiply
    /// the gradient by `1 - mu`.
    pub eta_star: f64,
    /// Unchanged.
    pub lambda: f64,
}

/// Carries SGD hyperparameters from batch size `b_old` to `b_new`.
pub fn scale_hyperparams(eta: f64, mu: f64, lambda: f64, b_old: usize, b_new: usize) -> Result<ScaledHyperparams> {
    if b_old == 0 || b_new == 0 {
        return Err(Error::InvalidParam("batch sizes must be positive".into()));
    }
    let ratio = b_new as f64 / b_old as f64;
    let eta_new = ratio * eta;
    let mu_new = mu.powf(ratio);
    let eta_star = if mu == 1.0 { eta_new } else { (1.0 - mu_new) / (1.0 - mu) * eta_new };
    Ok(ScaledHyperparams { eta: eta_new, mu: mu_new, eta_star, lambda })
}

/// Fully connected layer; flattens its input.
#[derive(Debug, Clone)]
pub struct Dense {
    inputs: usize,
    outputs: usize,
    pub weight: Param,
    pub bias: Param,
    cache: Vec<FeatureMap>,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != inputs * outputs || bias.len() != outputs {
            return Err(shape_err(format!("dense {inputs}->{outputs}: {} weights, {} biases", weight.len(), bias.len())));
        }
        Ok(Self { inputs, outputs, weight: Param::new(weight, true), bias: Param::new(bias, false), cache: Vec::new() })
    }

    /// He-normal weights, zero bias.
    pub fn he(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let w = rng.normal_vec(inputs * outputs, (2.0 / inputs as f64).sqrt());
        Self::new(inputs, outputs, w, vec![0.0; outputs]).expect("consistent shapes")
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn apply(&self, x: &FeatureMap) -> Result<FeatureMap> {
        if x.len() != self.inputs {
            return Err(shape_err(format!("dense expects {} inputs, got {}", self.inputs, x.len())));
        }
        let xs = x.data();
        let out = (0..self.outputs)
            .map(|o| {
                let row = &self.weight.value[o * self.inputs..(o + 1) * self.inputs];
                self.bias.value[o] + row.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        Ok(FeatureMap::from_parts(self.outputs, 1, out))
    }

    pub fn forward(&mut self, batch: &[FeatureMap]) -> Result<Vec<FeatureMap>> {
        let out = batch.iter().map(|x| self.apply(x)).collect::<Result<Vec<_>>>()?;
        self.cache = batch.to_vec();
        Ok(out)
    }

    pub fn backward(&mut self, grads: &[FeatureMap]) -> Result<Vec<FeatureMap>> {
        if grads.len() != self.cache.len() {
            return Err(Error::Handshake("dense backward does not match forward"));
        }
        let inputs = std::mem::take(&mut self.cache);
        let mut out = Vec::with_capacity(grads.len());
        for (x, g) in inputs.iter().zip(grads) {
            if g.len() != self.outputs {
                return Err(shape_err("dense gradient size"));
            }
            let mut dx = vec![0.0; self.inputs];
            for (o, &go) in g.data().iter().enumerate() {
                self.bias.grad[o] += go;
                let wrow = &self.weight.value[o * self.inputs..(o + 1) * self.inputs];
                let grow = &mut self.weight.grad[o * self.inputs..(o + 1) * self.inputs];
                for i in 0..self.inputs {
                    grow[i] += go * x.data()[i];
                    dx[i] += go * wrow[i];
                }
            }
            out.push(FeatureMap::from_parts(x.features(), x.spatial(), dx));
        }
        Ok(out)
    }
}

/// Valid-padding, stride-1 2D convolution. Input features are channels and
/// the spatial extent is a row-major `height x width` grid.
#[derive(Debug, Clone)]
pub struct Conv2d {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    height: usize,
    width: usize,
    pub weight: Param,
    pub bias: Param,
    cache: Vec<FeatureMap>,
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, height: usize, width: usize, rng: &mut Rng) -> Result<Self> {
        if kernel == 0 || kernel > height || kernel > width || in_ch == 0 || out_ch == 0 {
            return Err(Error::InvalidParam(format!("conv {kernel}x{kernel} on {height}x{width}")));
        }
        let fan_in = (in_ch * kernel * kernel) as f64;
        let w = rng.normal_vec(out_ch * in_ch * kernel * kernel, (2.0 / fan_in).sqrt());
        Ok(Self {
            in_ch,
            out_ch,
            kernel,
            height,
            width,
            weight: Param::new(w, true),
            bias: Param::new(vec![0.0; out_ch], false),
            cache: Vec::new(),
        })
    }

    pub fn out_height(&self) -> usize {
        self.height - self.kernel + 1
    }

    pub fn out_width(&self) -> usize {
        self.width - self.kernel + 1
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    fn widx(&self, o: usize, c: usize, ki: usize, kj: usize) -> usize {
        ((o * self.in_ch + c) * self.kernel + ki) * self.kernel + kj
    }

    pub fn apply(&self, x: &FeatureMap) -> Result<FeatureMap> {
        if x.features() != self.in_ch || x.spatial() != self.height * self.width {
            return Err(shape_err(format!(
                "conv expects {}x{} input, got {}x{}",
                self.in_ch,
                self.height * self.width,
                x.features(),
                x.spatial()
            )));
        }
        let (oh, ow) = (self.out_height(), self.out_width());
        let mut out = vec![0.0; self.out_ch * oh * ow];
        for o in 0..self.out_ch {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = self.bias.value[o];
                    for c in 0..self.in_ch {
                        let xc = x.feature(c);
                        for ki in 0..self.kernel {
                            for kj in 0..self.kernel {
                                s += self.weight.value[self.widx(o, c, ki, kj)] * xc[(i + ki) * self.width + j + kj];
                            }
                        }
                    }
                    out[(o * oh + i) * ow + j] = s;
                }
            }
        }
        Ok(FeatureMap::from_parts(self.out_ch, oh * ow, out))
    }

    pub fn forward(&mut self, batch: &[FeatureMap]) -> Result<Vec<FeatureMap>> {
        let out = batch.iter().map(|x| self.apply(x)).collect::<Result<Vec<_>>>()?;
        self.cache = batch.to_vec();
        Ok(out)
    }

    pub fn backward(&mut self, grads: &[FeatureMap]) -> Result<Vec<FeatureMap>> {
        if grads.len() != self.cache.len() {
            return Err(Error::Handshake("conv backward does not match forward"));
        }
        let (oh, ow) = (self.out_height(), self.out_width());
        let inputs = std::mem::take(&mut self.cache);
        let mut out = Vec::with_capacity(grads.len());
        for (x, g) in inputs.iter().zip(grads) {
            if g.features() != self.out_ch || g.spatial() != oh * ow {
                return Err(shape_err("conv gradient shape"));
            }
            let mut dx = vec![0.0; x.len()];
            for o in 0..self.out_ch {
                let go = g.feature(o);
                for i in 0..oh {
                    for j in 0..ow {
                        let gv = go[i * ow + j];
                        if gv == 0.0 {
                            continue;
                        }
                        self.bias.grad[o] += gv;
                        for c in 0..self.in_ch {
                            let base = c * self.height * self.width;
                            for ki in 0..self.kernel {
                                for kj in 0..self.kernel {
                                    let wi = self.widx(o, c, ki, kj);
                                    let xi = base + (i + ki) * self.width + j + kj;
                                    self.weight.grad[wi] += gv * x.data()[xi];
                                    dx[xi] += gv * self.weight.value[wi];
                                }
                            }
                        }
                    }
                }
            }
            out.push(FeatureMap::from_parts(x.features(), x.spatial(), dx));
        }
        Ok(out)
    }
}

/// Fixed per-feature affine coefficients, e.g. exact statistics of a whole
/// dataset. Used as the exact-population normalizer.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FrozenNorm {
    pub fn identity(features: usize) -> Self {
        Self { mean: vec![0.0; features], std: vec![1.0; features] }
    }

    /// Exact population coefficients of `inputs` (per feature, over samples
    /// and positions).
    pub fn fit(inputs: &[FeatureMap]) -> Result<Self> {
        let first = inputs.first().ok_or_else(|| shape_err("no samples to fit"))?;
        let features = first.features();
        let count = (inputs.len() * first.spatial()) as f64;
        let mut mean = vec![0.0; features];
        let mut std = vec![0.0; features];
        for f in 0..features {
            let m = inputs.iter().map(|x| x.feature(f).iter().sum::<f64>()).sum::<f64>() / count;
            let v = inputs
                .iter()
                .map(|x| x.feature(f).iter().map(|v| (v - m) * (v - m)).sum::<f64>())
                .sum::<f64>()
                / count;
            mean[f] = m;
            std[f] = v.sqrt().max(crate::online::SIGMA_FLOOR);
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &FeatureMap) -> Result<FeatureMap> {
        if x.features() != self.mean.len() {
            return Err(shape_err("frozen normalizer feature count"));
        }
        let mut y = x.clone();
        for f in 0..self.mean.len() {
            let (m, s) = (self.mean[f], self.std[f]);
            y.feature_mut(f).iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        Ok(y)
    }

    fn backward(&self, g: &FeatureMap) -> FeatureMap {
        let mut d = g.clone();
        for f in 0..self.std.len() {
            let s = self.std[f];
            d.feature_mut(f).iter_mut().for_each(|v| *v /= s);
        }
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalizerKind {
    Online,
    Batch,
    Layer,
    /// Frozen coefficients computed from a full pass over the dataset.
    Population,
    None,
}

impl NormalizerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Online => "online",
            Self::Batch => "batch",
            Self::Layer => "layer",
            Self::Population => "population",
            Self::None => "none",
        }
    }

    pub fn build(&self, features: usize, online: OnlineNormConfig) -> Result<Normalizer> {
        Ok(match self {
            Self::Online => Normalizer::Online(Box::new(OnlineNorm::new(features, online)?)),
            Self::Batch => Normalizer::Batch(BatchNorm::new(features)),
            Self::Layer => Normalizer::Layer(LayerNorm::new()),
            Self::Population => Normalizer::Population(FrozenNorm::identity(features)),
            Self::None => Normalizer::Identity,
        })
    }
}

impl fmt::Display for NormalizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormalizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "online" => Ok(Self::Online),
            "batch" => Ok(Self::Batch),
            "layer" => Ok(Self::Layer),
            "population" => Ok(Self::Population),
            "none" => Ok(Self::None),
            other => Err(Error::InvalidParam(format!("unknown normalizer '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Normalizer {
    Online(Box<OnlineNorm>),
    Batch(BatchNorm),
    Layer(LayerNorm),
    Population(FrozenNorm),
    Identity,
}

impl Normalizer {
    pub fn kind(&self) -> NormalizerKind {
        match self {
            Self::Online(_) => NormalizerKind::Online,
            Self::Batch(_) => NormalizerKind::Batch,
            Self::Layer(_) => NormalizerKind::Layer,
            Self::Population(_) => NormalizerKind::Population,
            Self::Identity => NormalizerKind::None,
        }
    }

    fn forward(&mut self, batch: &[FeatureMap]) -> Result<Vec<FeatureMap>> {
        match self {
            Self::Online(n) => {
                if batch.len() != 1 {
                    return Err(Error::InvalidParam(
                        "online normalization processes one sample per forward/backward pair".into(),
                    ));
                }
                Ok(vec![n.forward(&batch[0])?])
            }
            Self::Batch(n) => n.forward(batch),
            Self::Layer(n) => n.forward(batch),
            Self::Population(n) => batch.iter().map(|x| n.apply(x)).collect(),
            Self::Identity => Ok(batch.to_vec()),
        }
    }

    fn backward(&mut self, grads: &[FeatureMap]) -> Result<Vec<FeatureMap>> {
        match self {
            Self::Online(n) => {
                if grads.len() != 1 {
                    return Err(shape_err("online normalization gradient batch"));
                }
                Ok(vec![n.backward(&grads[0])?])
            }
            Self::Batch(n) => n.backward(grads),
            Self::Layer(n) => n.backward(grads),
            Self::Population(n) => Ok(grads.iter().map(|g| n.backward(g)).collect()),
            Self::Identity => Ok(grads.to_vec()),
        }
    }

    fn infer(&self, x: &FeatureMap) -> Result<FeatureMap> {
        match self {
            Self::Online(n) => n.infer(x),
            Self::Batch(n) => n.infer(x),
            Self::Layer(_) => LayerNorm::normalize(x),
            Self::Population(n) => n.apply(x),
            Self::Identity => Ok(x.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Dense(Dense),
    Conv(Conv2d),
    Relu(Vec<FeatureMap>),
    Norm(Normalizer),
}

impl Layer {
    pub fn relu() -> Self {
        Layer::Relu(Vec::new())
    }

    fn forward(&mut self, batch: &[FeatureMap]) -> Result<Vec<FeatureMap>> {
        match self {
            Layer::Dense(d) => d.forward(batch),
            Layer::Conv(c) => c.forward(batch),
            Layer::Relu(cache) => {
                *cache = batch.to_vec();
                Ok(batch
                    .iter()
                    .map(|x| FeatureMap::from_parts(x.features(), x.spatial(), relu(x.data())))
                    .collect())
            }
            Layer::Norm(n) => n.forward(batch),
        }
    }

    fn backward(&mut self, grads: &[FeatureMap]) -> Result<Vec<FeatureMap>> {
        match self {
            Layer::Dense(d) => d.backward(grads),
            Layer::Conv(c) => c.backward(grads),
            Layer::Relu(cache) => {
                let pre = std::mem::take(cache);
                if pre.len() != grads.len() {
                    return Err(Error::Handshake("relu backward does not match forward"));
                }
                pre.iter()
                    .zip(grads)
                    .map(|(p, g)| Ok(FeatureMap::from_parts(g.features(), g.spatial(), relu_backward(p.data(), g.data())?)))
                    .collect()
            }
            Layer::Norm(n) => n.backward(grads),
        }
    }

    fn infer(&self, x: &FeatureMap) -> Result<FeatureMap> {
        match self {
            Layer::Dense(d) => d.apply(x),
            Layer::Conv(c) => c.apply(x),
            Layer::Relu(_) => Ok(FeatureMap::from_parts(x.features(), x.spatial(), relu(x.data()))),
            Layer::Norm(n) => n.infer(x),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
            _ => Vec::new(),
        }
    }

    fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            Layer::Conv(c) => vec![&c.weight, &c.bias],
            _ => Vec::new(),
        }
    }
}

/// Softmax cross-entropy of one sample: `(loss, d loss / d logits)`.
pub fn softmax_xent(logits: &FeatureMap, label: usize) -> Result<(f64, FeatureMap)> {
    let z = logits.data();
    if label >= z.len() {
        return Err(shape_err(format!("label {label} for {} classes", z.len())));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (z[label] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[label] -= 1.0;
    Ok((loss, FeatureMap::from_parts(logits.features(), logits.spatial(), grad)))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Sequential network.
#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<Layer>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    /// `dense -> normalizer -> relu -> dense`.
    pub fn mlp(
        inputs: usize,
        hidden: usize,
        classes: usize,
        kind: NormalizerKind,
        online: OnlineNormConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self::new(vec![
            Layer::Dense(Dense::he(inputs, hidden, rng)),
            Layer::Norm(kind.build(hidden, online)?),
            Layer::relu(),
            Layer::Dense(Dense::he(hidden, classes, rng)),
        ]))
    }

    /// True when some layer must see one sample per forward/backward pair.
    pub fn streams_samples(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::Norm(Normalizer::Online(_))))
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::Norm(Normalizer::Batch(_))))
    }

    pub fn forward(&mut self, batch: &[FeatureMap]) -> Result<Vec<FeatureMap>> {
        let mut cur = batch.to_vec();
        for l in &mut self.layers {
            cur = l.forward(&cur)?;
        }
        Ok(cur)
    }

    pub fn backward(&mut self, grads: &[FeatureMap]) -> Result<Vec<FeatureMap>> {
        let mut cur = grads.to_vec();
        for l in self.layers.iter_mut().rev() {
            cur = l.backward(&cur)?;
        }
        Ok(cur)
    }

    pub fn infer(&self, x: &FeatureMap) -> Result<FeatureMap> {
        let mut cur = x.clone();
        for l in &self.layers {
            cur = l.infer(&cur)?;
        }
        Ok(cur)
    }

    /// Weights and biases of every layer.
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Norm(Normalizer::Online(n)) => {
                    if let Some(a) = n.affine_mut() {
                        out.push(&mut a.gain);
                        out.push(&mut a.bias);
                    }
                }
                other => out.extend(other.params_mut()),
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().flat_map(|l| l.params()).map(|p| p.value.len()).sum::<usize>()
            + self
                .layers
                .iter()
                .filter_map(|l| match l {
                    Layer::Norm(Normalizer::Online(n)) => n.affine().map(|a| 2 * a.features()),
                    _ => None,
                })
                .sum::<usize>()
    }

    /// Concatenated gradients of all dense/conv parameters.
    pub fn grad_vector(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.params()).flat_map(|p| p.grad.iter().copied()).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// L2 norm of all decayed parameters.
    pub fn weight_norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .filter(|p| p.decay)
            .flat_map(|p| p.value.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Largest `|eps_y|` and `|eps_1|` over all online layers.
    pub fn accumulator_max(&self) -> (f64, f64) {
        let mut ey: f64 = 0.0;
        let mut e1: f64 = 0.0;
        for l in &self.layers {
            if let Layer::Norm(Normalizer::Online(n)) = l {
                ey = n.state().eps_y().iter().fold(ey, |m, v| m.max(v.abs()));
                e1 = n.state().eps_1().iter().fold(e1, |m, v| m.max(v.abs()));
            }
        }
        (ey, e1)
    }

    /// Fits every population normalizer to the activations it sees when
    /// `inputs` flow through the network, front to back.
    pub fn calibrate_population(&mut self, inputs: &[FeatureMap]) -> Result<()> {
        let mut cur = inputs.to_vec();
        for l in &mut self.layers {
            if let Layer::Norm(Normalizer::Population(p)) = l {
                *p = FrozenNorm::fit(&cur)?;
            }
            cur = cur.iter().map(|x| l.infer(x)).collect::<Result<Vec<_>>>()?;
        }
        Ok(())
    }

    /// Mean loss and accuracy with inference-mode normalizers.
    pub fn evaluate(&self, data: &Dataset) -> Result<(f64, f64)> {
        let mut loss = 0.0;
        let mut correct = 0usize;
        for (x, &y) in data.inputs.iter().zip(&data.labels) {
            let out = self.infer(x)?;
            loss += softmax_xent(&out, y)?.0;
            if argmax(out.data()) == y {
                correct += 1;
            }
        }
        let n = data.len() as f64;
        Ok((loss / n, correct as f64 / n))
    }

    /// Mean loss over `batch` in training mode; accumulates parameter
    /// gradients of that mean. Returns `(loss, correct)`.
    pub fn train_batch(&mut self, inputs: &[FeatureMap], labels: &[usize]) -> Result<(f64, usize)> {
        let scale = 1.0 / inputs.len() as f64;
        let mut loss = 0.0;
        let mut correct = 0;
        let mut handle = |net: &mut Network, xs: &[FeatureMap], ys: &[usize]| -> Result<()> {
            let outs = net.forward(xs)?;
            let mut grads = Vec::with_capacity(outs.len());
            for (o, &y) in outs.iter().zip(ys) {
                let (l, mut g) = softmax_xent(o, y)?;
                loss += l;
                if argmax(o.data()) == y {
                    correct += 1;
                }
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
                grads.push(g);
            }
            net.backward(&grads)?;
            Ok(())
        };
        if self.streams_samples() {
            for (x, y) in inputs.iter().zip(labels) {
                handle(self, std::slice::from_ref(x), std::slice::from_ref(y))?;
            }
        } else {
            handle(self, inputs, labels)?;
        }
        Ok((loss * scale, correct))
    }

    pub fn sgd_step(&mut self, eta: f64, mu: f64, lambda: f64) {
        for p in self.params_mut() {
            sgd_momentum_step(p, eta, mu, lambda);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub eta: f64,
    pub momentum: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub normalizer: NormalizerKind,
    pub alpha_f: f64,
    pub alpha_b: f64,
    pub layer_scaling: bool,
    pub affine: bool,
    pub hidden: usize,
    /// Steps between metrics rows; 0 means one row per epoch.
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 0.05,
            momentum: 0.9,
            lambda: 1e-4,
            batch_size: 32,
            epochs: 5,
            seed: 1,
            normalizer: NormalizerKind::Online,
            alpha_f: 0.999,
            alpha_b: 0.99,
            layer_scaling: true,
            affine: true,
            hidden: 32,
            eval_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad(format!("eta = {} must be finite and non-negative", self.eta));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum = {} must lie in [0, 1)", self.momentum));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda = {} must be non-negative", self.lambda));
        }
        for (name, a) in [("alpha_f", self.alpha_f), ("alpha_b", self.alpha_b)] {
            if !(a > 0.0 && a < 1.0) {
                return bad(format!("{name} = {a} must lie strictly inside (0, 1)"));
            }
        }
        if self.batch_size == 0 || self.epochs == 0 || self.hidden == 0 {
            return bad("batch_size, epochs and hidden must be positive".into());
        }
        if self.normalizer == NormalizerKind::Batch && self.batch_size < 2 {
            return bad("batch normalization needs batch_size >= 2".into());
        }
        Ok(())
    }

    pub fn online_config(&self) -> OnlineNormConfig {
        OnlineNormConfig {
            alpha_f: self.alpha_f,
            alpha_b: self.alpha_b,
            layer_scaling: self.layer_scaling,
            affine: self.affine,
            ..OnlineNormConfig::default()
        }
    }
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub weight_norm_l2: f64,
    pub eps_y_max: f64,
    pub eps_1_max: f64,
}

impl MetricsRecord {
    pub const HEADER: [&'static str; 7] =
        ["step", "epoch", "loss", "accuracy", "weight_norm_l2", "eps_y_max", "eps_1_max"];

    pub fn fields(&self) -> [String; 7] {
        [
            self.step.to_string(),
            self.epoch.to_string(),
            self.loss.to_string(),
            self.accuracy.to_string(),
            self.weight_norm_l2.to_string(),
            self.eps_y_max.to_string(),
            self.eps_1_max.to_string(),
        ]
    }
}

/// Result of [`train`]. A divergent run keeps the rows recorded before it
/// stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub records: Vec<MetricsRecord>,
    pub diverged: Option<(usize, f64)>,
}

impl TrainRun {
    pub fn final_record(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }
}

/// Trains `net` on `train_set`. Accuracy in the metrics is measured on
/// `validation` when given, otherwise it is the running training accuracy.
///
/// Networks containing an online normalizer run every sample through a full
/// forward/backward pass before the next one; parameters update once per
/// batch.
pub fn train(config: &TrainConfig, train_set: &Dataset, validation: Option<&Dataset>, net: &mut Network) -> Result<TrainRun> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidParam("empty training set".into()));
    }
    if train_set.len() < config.batch_size {
        return Err(Error::InvalidParam(format!(
            "training set of {} is smaller than one batch of {}",
            train_set.len(),
            config.batch_size
        )));
    }
    let mut rng = Rng::new(config.seed).fork(0x74_7261_696e);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut records = Vec::new();
    let mut step = 0usize;
    let mut loss_sum = 0.0;
    let mut seen = 0usize;
    let mut correct = 0usize;

    let record = |net: &Network, step: usize, epoch: usize, loss_sum: f64, seen: usize, correct: usize| -> Result<MetricsRecord> {
        let accuracy = match validation {
            Some(v) => net.evaluate(v)?.1,
            None => correct as f64 / seen.max(1) as f64,
        };
        let (ey, e1) = net.accumulator_max();
        Ok(MetricsRecord {
            step,
            epoch,
            loss: loss_sum / seen.max(1) as f64,
            accuracy,
            weight_norm_l2: net.weight_norm(),
            eps_y_max: ey,
            eps_1_max: e1,
        })
    };

    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        // Incomplete trailing batches are dropped.
        for chunk in order.chunks_exact(config.batch_size) {
            let xs: Vec<FeatureMap> = chunk.iter().map(|&i| train_set.inputs[i].clone()).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let (loss, ok) = net.train_batch(&xs, &ys)?;
            step += 1;
            if !loss.is_finite() || loss.abs() > DIVERGENCE_LOSS {
                return Ok(TrainRun { records, diverged: Some((step, loss)) });
            }
            net.sgd_step(config.eta, config.momentum, config.lambda);
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
            correct += ok;
            if config.eval_interval > 0 && step.is_multiple_of(config.eval_interval) {
                records.push(record(net, step, epoch, loss_sum, seen, correct)?);
                loss_sum = 0.0;
                seen = 0;
                correct = 0;
            }
        }
        if config.eval_interval == 0 {
            records.push(record(net, step, epoch, loss_sum, seen, correct)?);
            loss_sum = 0.0;
            seen = 0;
            correct = 0;
        }
    }
    Ok(TrainRun { records, diverged: None })
}
