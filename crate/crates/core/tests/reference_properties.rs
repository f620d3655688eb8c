use onlinenorm::reference::{
    exact_backward, exact_normalize, jacobian_dense, project_out, project_out_ones, BatchNorm, LayerNorm,
};
use onlinenorm::{FeatureMap, Rng};
use proptest::prelude::*;

fn spread_vec() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 3..40).prop_filter("needs spread", |v| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64 > 1e-2
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn output_is_centered_with_squared_norm_n(x in spread_vec()) {
        let n = x.len() as f64;
        let e = exact_normalize(&x).unwrap();
        prop_assert!(e.y.iter().sum::<f64>().abs() < 1e-9);
        prop_assert!((dot(&e.y, &e.y) - n).abs() < 1e-9 * n);
    }

    #[test]
    fn backward_is_the_projection_pair_scaled(x in spread_vec(), seed in any::<u64>()) {
        let e = exact_normalize(&x).unwrap();
        let g = Rng::new(seed).normal_vec(x.len(), 1.0);
        let dx = exact_backward(&e.y, &g, e.sigma).unwrap();
        // Removing the y component and then the mean equals the closed form,
        // since y is already orthogonal to the ones vector.
        let want: Vec<f64> = project_out_ones(&project_out(&g, &e.y)).iter().map(|v| v / e.sigma).collect();
        for (a, b) in dx.iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
        }
        prop_assert!(dx.iter().sum::<f64>().abs() < 1e-9);
        prop_assert!(dot(&dx, &e.y).abs() < 1e-8 * (1.0 + e.sigma.recip()));
    }

    #[test]
    fn jacobian_transpose_applies_backward(x in spread_vec(), seed in any::<u64>()) {
        let e = exact_normalize(&x).unwrap();
        let j = jacobian_dense(&x).unwrap();
        let g = Rng::new(seed).normal_vec(x.len(), 1.0);
        let jt = j.matvec_t(&g).unwrap();
        let dx = exact_backward(&e.y, &g, e.sigma).unwrap();
        for (a, b) in jt.iter().zip(&dx) {
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn affine_change_of_input_leaves_output_unchanged(x in spread_vec(), a in 0.01f64..100.0, b in -100.0f64..100.0) {
        let y0 = exact_normalize(&x).unwrap().y;
        let shifted: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let y1 = exact_normalize(&shifted).unwrap().y;
        for (p, q) in y0.iter().zip(&y1) {
            prop_assert!((p - q).abs() < 1e-7);
        }
    }

    #[test]
    fn pairs_map_to_exact_signs(a in -1e6f64..1e6, d in 1e-3f64..1e3) {
        let e = exact_normalize(&[a + d, a]).unwrap();
        prop_assert_eq!(e.y, vec![1.0, -1.0]);
        prop_assert_eq!(exact_backward(&[1.0, -1.0], &[0.3, -7.0], e.sigma).unwrap(), vec![0.0, 0.0]);
    }
}

#[test]
fn jacobian_matches_central_differences() {
    let mut rng = Rng::new(11);
    for n in [3usize, 5, 16] {
        let x = rng.normal_vec(n, 2.0);
        let j = jacobian_dense(&x).unwrap();
        let h = 1e-6;
        for c in 0..n {
            let (mut p, mut m) = (x.clone(), x.clone());
            p[c] += h;
            m[c] -= h;
            let yp = exact_normalize(&p).unwrap().y;
            let ym = exact_normalize(&m).unwrap().y;
            for r in 0..n {
                let fd = (yp[r] - ym[r]) / (2.0 * h);
                assert!((fd - j.get(r, c)).abs() < 1e-6, "n={n} ({r},{c}) {fd} vs {}", j.get(r, c));
            }
        }
    }
}

fn batch_loss(batch: &[FeatureMap], weights: &[Vec<f64>]) -> f64 {
    let mut bn = BatchNorm::new(batch[0].features());
    let y = bn.forward(batch).unwrap();
    y.iter().zip(weights).map(|(m, w)| dot(m.data(), w)).sum()
}

#[test]
fn batch_norm_gradient_matches_finite_differences() {
    let mut rng = Rng::new(12);
    let batch: Vec<FeatureMap> = (0..4).map(|_| FeatureMap::new(2, 3, rng.normal_vec(6, 1.5)).unwrap()).collect();
    let weights: Vec<Vec<f64>> = (0..4).map(|_| rng.normal_vec(6, 1.0)).collect();
    let mut bn = BatchNorm::new(2);
    bn.forward(&batch).unwrap();
    let grads: Vec<FeatureMap> = weights.iter().map(|w| FeatureMap::new(2, 3, w.clone()).unwrap()).collect();
    let dx = bn.backward(&grads).unwrap();
    let h = 1e-6;
    for b in 0..4 {
        for i in 0..6 {
            let mut p = batch.clone();
            p[b].data_mut()[i] += h;
            let mut m = batch.clone();
            m[b].data_mut()[i] -= h;
            let fd = (batch_loss(&p, &weights) - batch_loss(&m, &weights)) / (2.0 * h);
            assert!((fd - dx[b].data()[i]).abs() < 1e-6, "sample {b} elem {i}: {fd} vs {}", dx[b].data()[i]);
        }
    }
    // Per feature, the gradient is orthogonal to the ones vector and to y.
    let y = BatchNorm::new(2).forward(&batch).unwrap();
    for f in 0..2 {
        let g: Vec<f64> = dx.iter().flat_map(|m| m.feature(f).to_vec()).collect();
        let yf: Vec<f64> = y.iter().flat_map(|m| m.feature(f).to_vec()).collect();
        assert!(g.iter().sum::<f64>().abs() < 1e-10);
        assert!(dot(&g, &yf).abs() < 1e-10);
    }
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let mut rng = Rng::new(13);
    let batch: Vec<FeatureMap> = (0..3).map(|_| FeatureMap::new(3, 2, rng.normal_vec(6, 2.0)).unwrap()).collect();
    let weights: Vec<Vec<f64>> = (0..3).map(|_| rng.normal_vec(6, 1.0)).collect();
    let loss = |b: &[FeatureMap]| -> f64 {
        b.iter().zip(&weights).map(|(m, w)| dot(LayerNorm::normalize(m).unwrap().data(), w)).sum()
    };
    let mut ln = LayerNorm::new();
    ln.forward(&batch).unwrap();
    let dx = ln.backward(&weights.iter().map(|w| FeatureMap::new(3, 2, w.clone()).unwrap()).collect::<Vec<_>>()).unwrap();
    let h = 1e-6;
    for b in 0..3 {
        for i in 0..6 {
            let mut p = batch.clone();
            p[b].data_mut()[i] += h;
            let mut m = batch.clone();
            m[b].data_mut()[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - dx[b].data()[i]).abs() < 1e-6);
        }
    }
}
