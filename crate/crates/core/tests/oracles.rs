use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use star_kit::heatmap::{softmax_normalize, soft_argmax};
use star_kit::losses::js_regularizer;
use star_kit::metrics::{auc, auc_from_curve, ced, fr, nme, Annotation, Normalizer};
use star_kit::moments::{covariance_biased, covariance_unbiased, eigen2x2, eigenvalues_raw, weight_sums};
use star_kit::{Covariance2, DiscreteHeatmap, Grid, Logits, Moments, Point};

fn random_heatmap(rng: &mut ChaCha8Rng, g: Grid, sparsity: f64) -> DiscreteHeatmap {
    let w: Vec<f64> = (0..g.len())
        .map(|_| if rng.random_bool(sparsity) { 0.0 } else { rng.random::<f64>() + 1e-9 })
        .collect();
    let total: f64 = w.iter().sum();
    DiscreteHeatmap::new(g, w.iter().map(|v| v / total).collect()).unwrap()
}

#[test]
fn covariances_match_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (w, h, sparsity) in [(8, 8, 0.0), (5, 9, 0.5), (12, 3, 0.8)] {
        let g = Grid::new(w, h).unwrap();
        for _ in 0..50 {
            let hm = random_heatmap(&mut rng, g, sparsity);
            let p = hm.probs();
            let (mut v1, mut v2, mut mx, mut my) = (0.0, 0.0, 0.0, 0.0);
            for r in 0..h {
                for c in 0..w {
                    let q = p[r * w + c];
                    v1 += q;
                    v2 += q * q;
                    mx += q * c as f64;
                    my += q * r as f64;
                }
            }
            let mu = Point::new(mx / v1, my / v1);
            let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
            for r in 0..h {
                for c in 0..w {
                    let q = p[r * w + c];
                    let (dx, dy) = (c as f64 - mu.x, r as f64 - mu.y);
                    sxx += q * dx * dx;
                    sxy += q * dx * dy;
                    syy += q * dy * dy;
                }
            }
            let Ok(u) = covariance_unbiased(&hm, mu) else {
                continue;
            };
            let b = covariance_biased(&hm, mu);
            let d = v1 - v2 / v1;
            let sums = weight_sums(&hm);
            assert!((sums.v1_sum - v1).abs() < 1e-14 && (sums.v2_sum - v2).abs() < 1e-14);
            assert!(b.max_abs_diff(&Covariance2::new(sxx / v1, sxy / v1, syy / v1)) <= 1e-12);
            assert!(u.max_abs_diff(&Covariance2::new(sxx / d, sxy / d, syy / d)) <= 1e-12);
            let m = Moments::of(&hm).unwrap();
            assert!((m.mu - mu).norm() <= 1e-12);
            assert!(m.eig.reconstruct().max_abs_diff(&m.unbiased) <= 1e-10);
        }
    }
}

#[test]
fn js_matches_textbook_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let g = Grid::new(6, 5).unwrap();
    for _ in 0..100 {
        let p = random_heatmap(&mut rng, g, 0.3);
        let q = random_heatmap(&mut rng, g, 0.3);
        let kl = |a: &[f64], m: &[f64]| -> f64 {
            a.iter().zip(m).filter(|(x, _)| **x > 0.0).map(|(x, y)| x * (x / y).ln()).sum()
        };
        let m: Vec<f64> = p.probs().iter().zip(q.probs()).map(|(a, b)| 0.5 * (a + b)).collect();
        let expected = 0.5 * kl(p.probs(), &m) + 0.5 * kl(q.probs(), &m);
        assert!((js_regularizer(&p, &q).unwrap() - expected).abs() < 1e-12);
    }
    let a = random_heatmap(&mut rng, g, 0.0);
    assert_eq!(js_regularizer(&a, &a).unwrap(), 0.0);
}

#[test]
fn eigenvalue_derivative_by_richardson() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut checked = 0;
    while checked < 100 {
        let s = Covariance2::new(rng.random_range(0.1..5.0), rng.random_range(-2.0..2.0), rng.random_range(0.1..5.0));
        let ds = Covariance2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let eig = eigen2x2(&s);
        if eig.gap() < 0.5 {
            continue;
        }
        let at = |t: f64| eigenvalues_raw(&Covariance2::new(s.xx + t * ds.xx, s.xy + t * ds.xy, s.yy + t * ds.yy));
        for (k, v) in [(0, eig.v1), (1, eig.v2)] {
            let lam = |t: f64| if k == 0 { at(t).0 } else { at(t).1 };
            let exact = ds.bilinear(v, v);
            let forward = |t: f64| (lam(t) - lam(0.0)) / t;
            let t = 1e-4;
            // First-order error halves with the step; one Richardson step removes it.
            let (e1, e2) = (forward(t) - exact, forward(t / 2.0) - exact);
            let extrapolated = 2.0 * forward(t / 2.0) - forward(t);
            let residual = (extrapolated - exact).abs();
            assert!(residual <= 0.01 * e1.abs() + 1e-9, "{extrapolated} vs {exact}");
            if e1.abs() > 1e-9 {
                assert!((e1 / e2 - 2.0).abs() < 0.05, "error ratio {}", e1 / e2);
            }
        }
        checked += 1;
    }
}

#[test]
fn rendered_anisotropic_gaussian_ratio() {
    let g = Grid::new(64, 64).unwrap();
    let c = Point::new(31.5, 31.5);
    let values = g
        .cells()
        .map(|(_, p)| {
            let d = p - c;
            -d.x * d.x / (2.0 * 9.0) - d.y * d.y / 2.0
        })
        .collect();
    let h = softmax_normalize(&Logits::new(g, values).unwrap(), 1.0).unwrap();
    let m = Moments::of(&h).unwrap();
    assert!((m.anisotropy() / 9.0 - 1.0).abs() < 0.05, "{}", m.anisotropy());
    assert!((soft_argmax(&h) - c).norm() < 1e-9);
}

#[test]
fn nme_matches_hand_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let pts = |rng: &mut ChaCha8Rng| -> Vec<Point> {
        (0..5).map(|_| Point::new(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0))).collect()
    };
    let (p, g) = (pts(&mut rng), pts(&mut rng));
    let d = ((g[0].x - g[3].x).powi(2) + (g[0].y - g[3].y).powi(2)).sqrt();
    let mut total = 0.0;
    for k in 0..5 {
        total += ((p[k].x - g[k].x).powi(2) + (p[k].y - g[k].y).powi(2)).sqrt();
    }
    let got = nme(
        &Annotation::new(p).unwrap(),
        &Annotation::new(g).unwrap(),
        &Normalizer::InterOcular { i: 0, j: 3 },
    )
    .unwrap();
    assert!((got - total / 5.0 / d).abs() < 1e-12);
}

#[test]
fn failure_rate_counts_507_images() {
    let mut nmes: Vec<f64> = (0..502).map(|i| 0.02 + 0.07 * i as f64 / 502.0).collect();
    nmes.extend([0.1000001, 0.2, 0.15, 0.31]);
    nmes.push(0.1); // on the threshold, not a failure
    assert_eq!(nmes.len(), 507);
    let expected = 4.0 / 507.0;
    assert!((fr(&nmes, 0.1).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn uniform_errors_give_linear_ced() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let nmes: Vec<f64> = (0..10_000).map(|_| rng.random_range(0.0..0.1)).collect();
    let curve = ced(&nmes, 0.1, 1000).unwrap();
    let worst = curve.iter().map(|&(t, f)| (f - t / 0.1).abs()).fold(0.0, f64::max);
    assert!(worst < 0.05, "{worst}");
    assert!((auc(&nmes, 0.1).unwrap() - 0.5).abs() < 0.02);
}

#[test]
fn exact_auc_agrees_with_sampled_curve() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let nmes: Vec<f64> = (0..300).map(|_| rng.random_range(0.0..0.15)).collect();
    let exact = auc(&nmes, 0.1).unwrap();
    // Trapezoids over a step function miss at most half a sampling interval per
    // step, so the gap closes as the export gets finer.
    let coarse = (exact - auc_from_curve(&ced(&nmes, 0.1, 1000).unwrap())).abs();
    let fine = (exact - auc_from_curve(&ced(&nmes, 0.1, 10_000).unwrap())).abs();
    assert!(coarse <= 0.5 / 999.0, "{coarse}");
    assert!(fine <= 0.5 / 9999.0, "{fine}");
}
