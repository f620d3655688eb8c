//! Group-of-`n` evaluation of the exponentially decaying mean and variance.
//!
//! Each group is produced from the previous group's outputs scaled by
//! `alpha^n` plus a length-`n` convolution with the powers of `alpha` over
//! the previous and current inputs. The results equal the one-at-a-time
//! recurrences up to rounding, so a whole group can be computed at once
//! while matching a purely streaming run.

use crate::error::{shape_err, Error, Result};

fn check_config(n: usize, alpha: f64) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidParam("group size must be at least 1".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParam(format!("alpha = {alpha} must lie strictly inside (0, 1)")));
    }
    Ok(())
}

/// Decaying sum over a stream delivered in groups: for every position `l`
/// of the current group,
/// `out[l] = alpha^n prev_out[l] + scale * sum_{j<n} alpha^j cat[n-1+l-j]`
/// where `cat` is the previous group without its first element followed by
/// the current group.
#[derive(Debug, Clone)]
struct GroupFilter {
    n: usize,
    scale: f64,
    powers: Vec<f64>,
    alpha_n: f64,
    prev_out: Vec<f64>,
    prev_in: Vec<f64>,
}

impl GroupFilter {
    fn new(n: usize, alpha: f64, scale: f64) -> Self {
        let mut powers = Vec::with_capacity(n);
        let mut p = 1.0;
        for _ in 0..n {
            powers.push(p);
            p *= alpha;
        }
        Self { n, scale, powers, alpha_n: p, prev_out: vec![0.0; n], prev_in: vec![0.0; n] }
    }

    fn step(&mut self, cur: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut cat = Vec::with_capacity(2 * n - 1);
        cat.extend_from_slice(&self.prev_in[1..]);
        cat.extend_from_slice(cur);
        let out: Vec<f64> = (0..n)
            .map(|l| {
                let conv: f64 = self.powers.iter().enumerate().map(|(j, a)| a * cat[n - 1 + l - j]).sum();
                self.alpha_n * self.prev_out[l] + self.scale * conv
            })
            .collect();
        self.prev_out.clone_from(&out);
        self.prev_in.copy_from_slice(cur);
        out
    }
}

/// Group evaluation of `mu_t = alpha mu_{t-1} + (1 - alpha) x_t` from
/// `mu_{-1} = 0`.
#[derive(Debug, Clone)]
pub struct EmulationState {
    alpha: f64,
    mean: GroupFilter,
}

impl EmulationState {
    pub fn new(n: usize, alpha: f64) -> Result<Self> {
        check_config(n, alpha)?;
        Ok(Self { alpha, mean: GroupFilter::new(n, alpha, 1.0 - alpha) })
    }

    pub fn group_size(&self) -> usize {
        self.mean.n
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `(1, alpha, ..., alpha^(n-1))`.
    pub fn powers(&self) -> &[f64] {
        &self.mean.powers
    }

    /// Running means for every sample of the group; advances the state.
    pub fn batched_mean(&mut self, group: &[f64]) -> Result<Vec<f64>> {
        if group.len() != self.mean.n {
            return Err(shape_err(format!("group of {} for group size {}", group.len(), self.mean.n)));
        }
        Ok(self.mean.step(group))
    }
}

/// Per-sample running moments of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Group evaluation of the running mean together with
/// `var_t = alpha var_{t-1} + alpha (1 - alpha) (x_t - mu_{t-1})^2`
/// from `mu_{-1} = var_{-1} = 0`.
///
/// The variance is a decaying sum of its increments
/// `d_t = alpha (1 - alpha) (x_t - mu_{t-1})^2`, so once a group's means are
/// known its increments are too, and the same group filter (with unit
/// scale) produces all of the group's variances.
#[derive(Debug, Clone)]
pub struct MomentEmulator {
    mean: EmulationState,
    var: GroupFilter,
    last_mean: f64,
}

impl MomentEmulator {
    pub fn new(n: usize, alpha: f64) -> Result<Self> {
        Ok(Self {
            mean: EmulationState::new(n, alpha)?,
            var: GroupFilter::new(n, alpha, 1.0),
            last_mean: 0.0,
        })
    }

    pub fn group_size(&self) -> usize {
        self.mean.group_size()
    }

    /// Running means and variances for every sample of the group.
    pub fn batched_variance(&mut self, group: &[f64]) -> Result<GroupMoments> {
        let mean = self.mean.batched_mean(group)?;
        let a = self.mean.alpha;
        let k = a * (1.0 - a);
        let increments: Vec<f64> = group
            .iter()
            .enumerate()
            .map(|(l, x)| {
                let prev = if l == 0 { self.last_mean } else { mean[l - 1] };
                k * (x - prev) * (x - prev)
            })
            .collect();
        let var = self.var.step(&increments);
        self.last_mean = *mean.last().expect("group is nonempty");
        Ok(GroupMoments { mean, var })
    }
}

/// One-at-a-time reference for the emulators: `(mu_t, var_t)` for every
/// input, starting from zero.
pub fn streaming_moments(xs: &[f64], alpha: f64) -> (Vec<f64>, Vec<f64>) {
    let mut mu = 0.0;
    let mut var = 0.0;
    let mut means = Vec::with_capacity(xs.len());
    let mut vars = Vec::with_capacity(xs.len());
    for &x in xs {
        let d = x - mu;
        var = alpha * var + alpha * (1.0 - alpha) * d * d;
        mu = alpha * mu + (1.0 - alpha) * x;
        means.push(mu);
        vars.push(var);
    }
    (means, vars)
}

/// Largest elementwise deviation between grouped and streaming moments
/// over `xs` (truncated to a whole number of groups).
pub fn max_deviation(xs: &[f64], n: usize, alpha: f64) -> Result<f64> {
    let mut emu = MomentEmulator::new(n, alpha)?;
    let used = xs.len() / n * n;
    let (sm, sv) = streaming_moments(&xs[..used], alpha);
    let mut worst: f64 = 0.0;
    for (g, chunk) in xs[..used].chunks(n).enumerate() {
        let m = emu.batched_variance(chunk)?;
        for l in 0..n {
            let t = g * n + l;
            worst = worst.max((m.mean[l] - sm[t]).abs()).max((m.var[l] - sv[t]).abs());
        }
    }
    Ok(worst)
}
