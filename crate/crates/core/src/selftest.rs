//! Quick invariant checks behind the `selftest` subcommand.

use crate::emulation::max_deviation;
use crate::error::Result;
use crate::net::scale_hyperparams;
use crate::online::{layer_scale_backward, layer_scale_forward, OnlineNormState, SIGMA_FLOOR};
use crate::reference::{exact_backward, exact_normalize, BatchNorm};
use crate::tensor::{FeatureMap, Rng};

pub struct Check {
    pub name: &'static str,
    pub run: fn() -> Result<bool>,
}

pub const CHECKS: &[Check] = &[
    Check { name: "exact-backward-finite-differences", run: exact_backward_fd },
    Check { name: "exact-backward-orthogonality", run: exact_backward_orthogonal },
    Check { name: "batch-two-degeneracy", run: batch_two },
    Check { name: "forward-control-estimator", run: forward_control },
    Check { name: "backward-control-estimator", run: backward_control },
    Check { name: "layer-scale-gradient", run: layer_scale_fd },
    Check { name: "batched-emulation", run: emulation },
    Check { name: "hyperparameter-scaling", run: hyper },
    Check { name: "state-record-round-trip", run: record_round_trip },
];

fn linear_loss(x: &[f64], c: &[f64]) -> Result<f64> {
    Ok(exact_normalize(x)?.y.iter().zip(c).map(|(a, b)| a * b).sum())
}

fn exact_backward_fd() -> Result<bool> {
    let mut rng = Rng::new(101);
    for n in [3, 10, 50] {
        let x = rng.normal_vec(n, 1.0);
        let c = rng.normal_vec(n, 1.0);
        let norm = exact_normalize(&x)?;
        let g = exact_backward(&norm.y, &c, norm.sigma)?;
        let h = 1e-5;
        let mut err: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..n {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let fd = (linear_loss(&xp, &c)? - linear_loss(&xm, &c)?) / (2.0 * h);
            err = err.max((fd - g[i]).abs());
            scale = scale.max(g[i].abs());
        }
        if err > 1e-6 * scale.max(1e-12) {
            return Ok(false);
        }
    }
    Ok(true)
}

fn exact_backward_orthogonal() -> Result<bool> {
    let mut rng = Rng::new(102);
    let x = rng.normal_vec(20, 3.0);
    let norm = exact_normalize(&x)?;
    let g = exact_backward(&norm.y, &rng.normal_vec(20, 1.0), norm.sigma)?;
    let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let d1 = g.iter().sum::<f64>().abs();
    let dy = g.iter().zip(&norm.y).map(|(a, b)| a * b).sum::<f64>().abs();
    Ok(d1 <= 1e-9 * gn * 20f64.sqrt() && dy <= 1e-9 * gn * 20f64.sqrt())
}

fn batch_two() -> Result<bool> {
    let mut rng = Rng::new(103);
    let mut bn = BatchNorm::new(1);
    for _ in 0..100 {
        let a = FeatureMap::new(1, 1, vec![rng.normal()])?;
        let b = FeatureMap::new(1, 1, vec![rng.normal()])?;
        let out = bn.forward(&[a, b])?;
        let (p, q) = (out[0].data()[0], out[1].data()[0]);
        if !((p == 1.0 && q == -1.0) || (p == -1.0 && q == 1.0)) {
            return Ok(false);
        }
        let g = bn.backward(&[FeatureMap::new(1, 1, vec![rng.normal()])?, FeatureMap::new(1, 1, vec![rng.normal()])?])?;
        if g.iter().any(|m| m.data()[0] != 0.0) {
            return Ok(false);
        }
    }
    Ok(true)
}

fn forward_control() -> Result<bool> {
    let alpha = 0.99;
    let mut rng = Rng::new(104);
    let mut s = OnlineNormState::new(1, alpha, 0.9)?;
    let mut eps = 0.0;
    for _ in 0..2000 {
        let x = rng.gaussian(2.0, 3.0);
        let yhat = x - (1.0 - alpha) * eps;
        eps += yhat;
        s.forward_sample(&FeatureMap::new(1, 1, vec![x])?)?;
        if (s.mean()[0] - (1.0 - alpha) * eps).abs() > 1e-10 {
            return Ok(false);
        }
    }
    Ok(true)
}

fn backward_control() -> Result<bool> {
    let alpha = 0.99;
    let mut rng = Rng::new(105);
    let mut s = OnlineNormState::new(1, 0.9, alpha)?;
    let mut est = 0.0;
    for _ in 0..2000 {
        let (y, cache) = s.forward_sample(&FeatureMap::new(1, 1, vec![rng.normal()])?)?;
        let g = rng.normal();
        let yv = y.data()[0];
        est = (1.0 - (1.0 - alpha) * yv * yv) * est + (1.0 - alpha) * g * yv;
        s.backward_sample(&FeatureMap::new(1, 1, vec![g])?, &cache)?;
        if (est - (1.0 - alpha) * s.eps_y()[0]).abs() > 1e-10 {
            return Ok(false);
        }
    }
    Ok(true)
}

fn layer_scale_fd() -> Result<bool> {
    let mut rng = Rng::new(106);
    let y = FeatureMap::new(3, 2, rng.normal_vec(6, 1.0))?;
    let c = rng.normal_vec(6, 1.0);
    let loss = |d: &[f64]| -> f64 {
        let (z, _) = layer_scale_forward(&FeatureMap::from_parts(3, 2, d.to_vec()), SIGMA_FLOOR);
        z.data().iter().zip(&c).map(|(a, b)| a * b).sum()
    };
    let (_, cache) = layer_scale_forward(&y, SIGMA_FLOOR);
    let g = layer_scale_backward(&FeatureMap::new(3, 2, c.clone())?, &cache)?;
    let h = 1e-5;
    for i in 0..6 {
        let (mut p, mut m) = (y.data().to_vec(), y.data().to_vec());
        p[i] += h;
        m[i] -= h;
        let fd = (loss(&p) - loss(&m)) / (2.0 * h);
        if (fd - g.data()[i]).abs() > 1e-7 * g.data()[i].abs().max(1.0) {
            return Ok(false);
        }
    }
    Ok(true)
}

fn emulation() -> Result<bool> {
    let mut rng = Rng::new(107);
    for n in [1, 2, 3, 5, 8] {
        for alpha in [0.5, 0.99, 0.999] {
            let xs = rng.normal_vec(10 * n, 1.0);
            if max_deviation(&xs, n, alpha)? > 1e-10 {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn hyper() -> Result<bool> {
    let s = scale_hyperparams(0.1, 0.9, 1e-4, 256, 32)?;
    Ok(format!("{:.5}", s.mu) == "0.98692")
}

fn record_round_trip() -> Result<bool> {
    let mut rng = Rng::new(108);
    let mut s = OnlineNormState::new(4, 0.99, 0.9)?;
    for _ in 0..10 {
        let (_, cache) = s.forward_sample(&FeatureMap::new(4, 3, rng.normal_vec(12, 2.0))?)?;
        s.backward_sample(&FeatureMap::new(4, 3, rng.normal_vec(12, 1.0))?, &cache)?;
    }
    let back = OnlineNormState::from_bytes(&s.to_bytes())?;
    Ok(back.mean() == s.mean() && back.var() == s.var() && back.eps_y() == s.eps_y() && back.eps_1() == s.eps_1())
}

/// Runs every check; `(name, passed)` in order. An error counts as a failure.
pub fn run_all() -> Vec<(&'static str, bool)> {
    CHECKS.iter().map(|c| (c.name, (c.run)().unwrap_or(false))).collect()
}
