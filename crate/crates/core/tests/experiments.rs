use onlinenorm::experiments::{
    activation_growth_experiment, decay_sweep, equilibrium_experiment, gradient_bias_experiment, log_decay_grid,
    run_training, sweep_base, BiasConfig, EquilibriumConfig, GrowthConfig,
};

#[test]
fn bias_experiment_rejects_bad_batch_sizes() {
    for sizes in [vec![1], vec![3], vec![4096]] {
        let cfg = BiasConfig { dataset_size: 64, batch_sizes: sizes.clone(), repetitions: 1, ..BiasConfig::default() };
        assert!(gradient_bias_experiment(&cfg).is_err(), "{sizes:?}");
    }
}

#[test]
fn small_bias_run_orders_angles() {
    let cfg = BiasConfig { dataset_size: 128, batch_sizes: vec![2, 16, 128], repetitions: 2, ..BiasConfig::default() };
    let r = gradient_bias_experiment(&cfg).unwrap();
    assert_eq!(r.entries.len(), 3);
    assert_eq!(r.angle(128), Some(0.0));
    assert!(r.angle(2).unwrap() > r.angle(16).unwrap());
    assert_eq!(r, gradient_bias_experiment(&cfg).unwrap());
}

#[test]
fn exact_statistics_keep_every_layer_at_unit_rms() {
    for layer_scaling in [false, true] {
        let cfg = GrowthConfig { depth: 16, width: 16, samples: 64, noise: 0.0, bias_sigma_down: 0.0, layer_scaling, seed: 3 };
        let p = activation_growth_experiment(&cfg).unwrap();
        assert_eq!(p.rms.len(), 16);
        for r in &p.rms {
            assert!((r - 1.0).abs() < 1e-9, "layer_scaling={layer_scaling}: rms {r}");
        }
    }
}

#[test]
fn systematic_underestimate_grows_geometrically_unless_scaled() {
    let base = GrowthConfig { depth: 24, width: 32, samples: 128, noise: 0.0, bias_sigma_down: 0.05, layer_scaling: false, seed: 4 };
    let grown = activation_growth_experiment(&base).unwrap();
    // Dividing by 0.95 sigma inflates each layer by at least 1/0.95; the
    // stale means add an offset on top.
    assert!(grown.rms.windows(2).all(|w| w[1] > w[0]));
    assert!(grown.log_slope() > (1.0f64 / 0.95).ln(), "{}", grown.log_slope());
    let scaled = activation_growth_experiment(&GrowthConfig { layer_scaling: true, ..base }).unwrap();
    assert!(scaled.max_min_ratio() < 1.0 + 1e-9);
}

#[test]
fn growth_rejects_bad_configs() {
    assert!(activation_growth_experiment(&GrowthConfig { depth: 0, ..GrowthConfig::default() }).is_err());
    assert!(activation_growth_experiment(&GrowthConfig { bias_sigma_down: 1.0, ..GrowthConfig::default() }).is_err());
    assert!(activation_growth_experiment(&GrowthConfig { noise: -1.0, ..GrowthConfig::default() }).is_err());
}

#[test]
fn zero_gradients_decay_the_weights_exactly() {
    let cfg = EquilibriumConfig { steps: 400, zero_gradients: true, eta: 0.2, lambda: 0.01, ..EquilibriumConfig::default() };
    let t = equilibrium_experiment(&cfg).unwrap();
    let w0 = t.records[0].w_norm / (1.0 - cfg.eta * cfg.lambda);
    for r in &t.records {
        let want = w0 * (1.0 - cfg.eta * cfg.lambda).powi(r.step as i32);
        assert!((r.w_norm - want).abs() <= 1e-12 * want.max(1e-300), "step {}", r.step);
        assert_eq!(r.grad_norm, 0.0);
    }
}

#[test]
fn weight_norm_settles_near_the_predicted_equilibrium() {
    let base = EquilibriumConfig { steps: 8000, ..EquilibriumConfig::default() };
    let a = equilibrium_experiment(&base).unwrap();
    assert!((a.ratio - 1.0).abs() < 0.15, "ratio {}", a.ratio);
    let b = equilibrium_experiment(&EquilibriumConfig { eta: 2.0 * base.eta, ..base }).unwrap();
    let growth = b.final_w_norm / a.final_w_norm;
    // Gradients scale as 1/|w|, so |w|^4 is proportional to eta / lambda.
    assert!((growth - 2f64.powf(0.25)).abs() < 0.06, "norm grew by {growth}");
}

#[test]
fn one_point_sweep_equals_a_single_run() {
    let base = sweep_base(5);
    let cells = decay_sweep(&[0.99], &[0.9], &base).unwrap();
    let mut cfg = base.clone();
    cfg.train.alpha_f = 0.99;
    cfg.train.alpha_b = 0.9;
    let (run, _, _) = run_training(&cfg).unwrap();
    assert_eq!(cells.len(), 1);
    assert!(!cells[0].diverged);
    assert_eq!(cells[0].final_loss, run.final_record().unwrap().loss);
}

#[test]
fn sweep_has_no_sharp_optimum_and_is_deterministic() {
    let grid = log_decay_grid(1.0, 3.0, 4);
    assert!((grid[0] - 0.9).abs() < 1e-12 && (grid[3] - 0.999).abs() < 1e-12);
    let base = sweep_base(6);
    let cells = decay_sweep(&grid, &grid, &base).unwrap();
    assert_eq!(cells.len(), 16);
    assert!(cells.iter().all(|c| !c.diverged && c.final_loss.is_finite()));
    let mut losses: Vec<f64> = cells.iter().map(|c| c.final_loss).collect();
    losses.sort_by(f64::total_cmp);
    let median = 0.5 * (losses[7] + losses[8]);
    assert!(losses[0] <= 1.05 * median);
    assert_eq!(cells, decay_sweep(&grid, &grid, &base).unwrap());
    assert!(decay_sweep(&[], &grid, &base).is_err());
}
