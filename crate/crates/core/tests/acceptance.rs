//! The twelve acceptance criteria. Each prints one PASS/FAIL line; the test
//! fails if any criterion fails.

use std::time::{Duration, Instant};

use onlinenorm::config::RunConfig;
use onlinenorm::data::DatasetSpec;
use onlinenorm::emulation::MomentEmulator;
use onlinenorm::experiments::{
    activation_growth_experiment, equilibrium_experiment, gradient_bias_experiment, run_training, BiasConfig,
    EquilibriumConfig, GrowthConfig,
};
use onlinenorm::net::{scale_hyperparams, NormalizerKind};
use onlinenorm::online::{layer_scale_backward, layer_scale_forward, SIGMA_FLOOR};
use onlinenorm::reference::{exact_backward, exact_normalize, BatchNorm};
use onlinenorm::{FeatureMap, OnlineNormState, Rng};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn scalar(v: f64) -> FeatureMap {
    FeatureMap::new(1, 1, vec![v]).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gradient_oracle() -> Outcome {
    let mut rng = Rng::new(1001);
    let h = 1e-5;
    let mut worst_rel: f64 = 0.0;
    let mut worst_orth: f64 = 0.0;
    for n in [2usize, 3, 10, 50] {
        for _ in 0..5 {
            let x = rng.normal_vec(n, 1.5);
            let c = rng.normal_vec(n, 1.0);
            let loss = |x: &[f64]| dot(&exact_normalize(x).unwrap().y, &c);
            let e = exact_normalize(&x).unwrap();
            let g = exact_backward(&e.y, &c, e.sigma).unwrap();
            let fd: Vec<f64> = (0..n)
                .map(|i| {
                    let (mut p, mut m) = (x.clone(), x.clone());
                    p[i] += h;
                    m[i] -= h;
                    (loss(&p) - loss(&m)) / (2.0 * h)
                })
                .collect();
            let diff: Vec<f64> = g.iter().zip(&fd).map(|(a, b)| a - b).collect();
            let scale = norm(&fd).max(norm(&g));
            if scale > 0.0 {
                worst_rel = worst_rel.max(norm(&diff) / scale);
            }
            let ones = vec![1.0; n];
            let gn = norm(&g);
            if gn > 0.0 {
                worst_orth = worst_orth
                    .max(dot(&g, &ones).abs() / (gn * norm(&ones)))
                    .max(dot(&g, &e.y).abs() / (gn * norm(&e.y)));
            }
        }
    }
    outcome(worst_rel <= 1e-6 && worst_orth <= 1e-9, format!("max rel err {worst_rel:.2e}, max orthogonality {worst_orth:.2e}"))
}

fn batch_two() -> Outcome {
    let mut rng = Rng::new(1002);
    let mut bn = BatchNorm::new(1);
    let mut bad = 0;
    for _ in 0..100 {
        let out = bn.forward(&[scalar(rng.gaussian(0.0, 3.0)), scalar(rng.gaussian(0.0, 3.0))]).unwrap();
        let (a, b) = (out[0].data()[0], out[1].data()[0]);
        if !((a == 1.0 && b == -1.0) || (a == -1.0 && b == 1.0)) {
            bad += 1;
        }
        let g = bn.backward(&[scalar(rng.normal()), scalar(rng.normal())]).unwrap();
        if g.iter().any(|m| m.data()[0] != 0.0) {
            bad += 1;
        }
    }
    outcome(bad == 0, format!("{bad} violations in 100 pairs"))
}

fn control_estimator() -> Outcome {
    let mut worst_f: f64 = 0.0;
    let mut worst_b: f64 = 0.0;
    for (k, alpha) in [0.5, 0.99, 0.999].into_iter().enumerate() {
        let mut rng = Rng::new(1003 + k as u64);
        // Forward: control form ŷ = x - (1-α) ε, ε += ŷ.
        let mut s = OnlineNormState::new(1, alpha, 0.9).unwrap();
        let mut eps = 0.0;
        for _ in 0..10_000 {
            let x = rng.gaussian(1.0, 2.0);
            let yhat = x - (1.0 - alpha) * eps;
            eps += yhat;
            s.forward_sample(&scalar(x)).unwrap();
            worst_f = worst_f.max((s.mean()[0] - (1.0 - alpha) * eps).abs());
        }
        // Backward: estimator form against the control accumulator.
        let mut s = OnlineNormState::new(1, 0.99, alpha).unwrap();
        let mut est = 0.0;
        for _ in 0..10_000 {
            let (y, cache) = s.forward_sample(&scalar(rng.normal())).unwrap();
            let yv = y.data()[0];
            let g = rng.normal();
            est = (1.0 - (1.0 - alpha) * yv * yv) * est + (1.0 - alpha) * g * yv;
            s.backward_sample(&scalar(g), &cache).unwrap();
            worst_b = worst_b.max((est - (1.0 - alpha) * s.eps_y()[0]).abs());
        }
    }
    outcome(worst_f <= 1e-10 && worst_b <= 1e-10, format!("forward {worst_f:.2e}, backward {worst_b:.2e}"))
}

fn asymptotic_moments() -> Outcome {
    let alpha = 0.99;
    let mut rng = Rng::new(1006);
    let mut s = OnlineNormState::new(1, alpha, 0.99).unwrap();
    let steps = 100_000;
    let mut ys = Vec::with_capacity(steps / 2);
    for t in 0..steps {
        let (y, _) = s.forward_sample(&scalar(rng.gaussian(5.0, 2.0))).unwrap();
        if t >= steps / 2 {
            ys.push(y.data()[0]);
        }
    }
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let var = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
    let target = 1.0 / alpha;
    outcome(
        mean.abs() <= 0.02 && (var / target - 1.0).abs() <= 0.03,
        format!("mean {mean:.4}, variance {var:.4} (target {target:.4})"),
    )
}

fn accumulator_bounds() -> Outcome {
    let mut rng = Rng::new(1007);
    let (features, spatial) = (4, 8);
    let mut s = OnlineNormState::new(features, 0.999, 0.99).unwrap();
    let (mut early_y, mut early_1, mut late_y, mut late_1) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for t in 0..100_000 {
        let x: Vec<f64> = (0..features * spatial).map(|i| (i % spatial) as f64 * 0.1 + rng.uniform_range(-1.0, 1.0)).collect();
        let (y, cache) = s.forward_sample(&FeatureMap::new(features, spatial, x).unwrap()).unwrap();
        // Gradient partly aligned with the output, plus a bias, all bounded.
        let g: Vec<f64> =
            y.data().iter().map(|v| (0.3 * v + 0.2 + rng.uniform_range(-1.0, 1.0)).clamp(-2.0, 2.0)).collect();
        s.backward_sample(&FeatureMap::new(features, spatial, g).unwrap(), &cache).unwrap();
        let my = s.eps_y().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let m1 = s.eps_1().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if t < 1000 {
            early_y = early_y.max(my);
            early_1 = early_1.max(m1);
        } else {
            late_y = late_y.max(my);
            late_1 = late_1.max(m1);
        }
    }
    outcome(
        late_y <= 10.0 * early_y && late_1 <= 10.0 * early_1,
        format!("eps_y {early_y:.3} -> {late_y:.3}, eps_1 {early_1:.3} -> {late_1:.3}"),
    )
}

fn batched_emulation() -> Outcome {
    let mut rng = Rng::new(1008);
    let mut worst: f64 = 0.0;
    for n in [1usize, 2, 3, 5, 8] {
        for alpha in [0.5, 0.99, 0.999] {
            let xs = rng.normal_vec(40 * n, 2.0);
            let (mut mu, mut var) = (0.0, 0.0);
            let mut want = Vec::new();
            for &x in &xs {
                var = alpha * var + alpha * (1.0 - alpha) * (x - mu) * (x - mu);
                mu = alpha * mu + (1.0 - alpha) * x;
                want.push((mu, var));
            }
            let mut emu = MomentEmulator::new(n, alpha).unwrap();
            for (g, chunk) in xs.chunks(n).enumerate() {
                let m = emu.batched_variance(chunk).unwrap();
                for l in 0..n {
                    let (wm, wv) = want[g * n + l];
                    worst = worst.max((m.mean[l] - wm).abs()).max((m.var[l] - wv).abs());
                }
            }
        }
    }
    outcome(worst <= 1e-10, format!("max deviation {worst:.2e}"))
}

fn hyperparameter_scaling() -> Outcome {
    let s = scale_hyperparams(0.1, 0.9, 1e-4, 256, 32).unwrap();
    let shown = format!("{:.5}", s.mu);
    outcome(shown == "0.98692", format!("momentum {shown}"))
}

fn gradient_bias() -> Outcome {
    let report = gradient_bias_experiment(&BiasConfig::default()).unwrap();
    let a2 = report.angle(2).unwrap();
    let a64 = report.angle(64).unwrap();
    let full = report.angle(2048).unwrap();
    let big_small =
        report.entries.iter().filter(|e| e.batch_size <= 32).map(|e| e.mean_angle_deg).fold(0.0, f64::max);
    outcome(
        a2 > a64 && full == 0.0 && big_small > 10.0,
        format!("angle(2) {a2:.2}, angle(64) {a64:.2}, angle(2048) {full}, max over b<=32 {big_small:.2}"),
    )
}

fn activation_growth() -> Outcome {
    let base = GrowthConfig { depth: 64, bias_sigma_down: 0.05, ..GrowthConfig::default() };
    let plain = activation_growth_experiment(&base).unwrap();
    let scaled = activation_growth_experiment(&GrowthConfig { layer_scaling: true, ..base }).unwrap();
    let slope = plain.log_slope();
    let ratio = scaled.max_min_ratio();
    outcome(slope > 0.01 && ratio < 10.0, format!("slope without scaling {slope:.4}, max/min with scaling {ratio:.4}"))
}

fn weight_equilibrium() -> Outcome {
    let cfg = EquilibriumConfig { eta: 0.1, lambda: 1e-3, steps: 20_000, ..EquilibriumConfig::default() };
    let trace = equilibrium_experiment(&cfg).unwrap();
    outcome((0.8..=1.25).contains(&trace.ratio), format!("ratio {:.4}", trace.ratio))
}

fn end_to_end_parity() -> Outcome {
    let run = |kind| {
        let mut cfg = RunConfig {
            dataset: DatasetSpec::GaussianBlobs { classes: 3, samples: 6000, dims: 8, scale: 4.0, std: 1.0 },
            ..RunConfig::default()
        };
        cfg.train.epochs = 5;
        cfg.train.batch_size = 32;
        cfg.train.normalizer = kind;
        let (run, _, _) = run_training(&cfg).unwrap();
        assert!(run.diverged.is_none());
        run.final_record().unwrap().accuracy
    };
    let online = run(NormalizerKind::Online);
    let batch = run(NormalizerKind::Batch);
    outcome(
        online >= batch - 0.02 && online > 0.9 && batch > 0.9,
        format!("validation accuracy online {:.2}%, batch {:.2}%", 100.0 * online, 100.0 * batch),
    )
}

fn layer_scale_gradient() -> Outcome {
    let mut rng = Rng::new(1012);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (f, s) = (1 + rng.below(4), 1 + rng.below(4));
        let n = f * s;
        let spread = 1.0 + rng.uniform() * 3.0;
        let y = rng.normal_vec(n, spread);
        let c = rng.normal_vec(n, 1.0);
        // Independent forward: y / sqrt(mean(y^2)), loss = c . z.
        let loss = |v: &[f64]| -> f64 {
            let r = (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
            v.iter().zip(&c).map(|(a, b)| a / r * b).sum()
        };
        let (_, cache) = layer_scale_forward(&FeatureMap::new(f, s, y.clone()).unwrap(), SIGMA_FLOOR);
        let g = layer_scale_backward(&FeatureMap::new(f, s, c.clone()).unwrap(), &cache).unwrap();
        let fd: Vec<f64> = (0..n)
            .map(|i| {
                let (mut p, mut m) = (y.clone(), y.clone());
                p[i] += h;
                m[i] -= h;
                (loss(&p) - loss(&m)) / (2.0 * h)
            })
            .collect();
        let diff: Vec<f64> = g.data().iter().zip(&fd).map(|(a, b)| a - b).collect();
        let scale = norm(&fd).max(norm(g.data()));
        if scale > 0.0 {
            worst = worst.max(norm(&diff) / scale);
        }
    }
    outcome(worst <= 1e-7, format!("max rel err {worst:.2e}"))
}

type Criterion = (&'static str, u64, fn() -> Outcome);

#[test]
fn acceptance() {
    let criteria: [Criterion; 12] = [
        ("1 gradient oracle", 1, gradient_oracle),
        ("2 batch-two degeneracy", 1, batch_two),
        ("3 control/estimator equivalence", 5, control_estimator),
        ("4 asymptotic moments", 10, asymptotic_moments),
        ("5 accumulator boundedness", 10, accumulator_bounds),
        ("6 batched emulation", 5, batched_emulation),
        ("7 hyperparameter scaling", 1, hyperparameter_scaling),
        ("8 gradient bias", 120, gradient_bias),
        ("9 activation growth", 60, activation_growth),
        ("10 weight equilibrium", 60, weight_equilibrium),
        ("11 end-to-end parity", 120, end_to_end_parity),
        ("12 layer-scaling gradient", 1, layer_scale_gradient),
    ];
    let mut failed = Vec::new();
    for (name, limit, run) in criteria {
        let start = Instant::now();
        let o = run();
        let took = start.elapsed();
        let in_time = took < Duration::from_secs(limit);
        let pass = o.pass && in_time;
        println!(
            "{} [{name}] {} ({:.2}s of {limit}s)",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            took.as_secs_f64()
        );
        if !pass {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
