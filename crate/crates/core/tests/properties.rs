use proptest::prelude::*;
use star_kit::heatmap::{render_gaussian, soft_argmax, softmax_normalize};
use star_kit::losses::{js_regularizer, mahalanobis_loss, regression_loss, star_core};
use star_kit::metrics::{auc, ced, fr, nme, Annotation, Normalizer};
use star_kit::moments::{covariance_biased, covariance_unbiased, eigen2x2, eigenvalues_raw, EigenPair2};
use star_kit::{Covariance2, DiscreteHeatmap, DistanceKind, Grid, Logits, Moments, Point};

fn grid() -> Grid {
    Grid::new(7, 6).unwrap()
}

fn weights(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-4f64..1.0, n)
}

fn heatmap_from(w: &[f64], g: Grid) -> DiscreteHeatmap {
    let total: f64 = w.iter().sum();
    DiscreteHeatmap::new(g, w.iter().map(|v| v / total).collect()).unwrap()
}

fn kind() -> impl Strategy<Value = DistanceKind> {
    prop::sample::select(DistanceKind::all().to_vec())
}

fn eig_pair() -> impl Strategy<Value = EigenPair2> {
    (0.05f64..10.0, 0.05f64..10.0, 0.0..std::f64::consts::TAU).prop_map(|(a, b, t)| {
        let (l1, l2) = if a >= b { (a, b) } else { (b, a) };
        let v1 = Point::new(t.cos(), t.sin());
        EigenPair2 {
            lambda1: l1,
            v1,
            lambda2: l2,
            v2: Point::new(-v1.y, v1.x),
        }
    })
}

fn point(range: f64) -> impl Strategy<Value = Point> {
    (-range..range, -range..range).prop_map(|(x, y)| Point::new(x, y))
}

/// Rotates a heatmap by 90° counter-clockwise in (x, y) on a square grid.
fn rotate_90(h: &DiscreteHeatmap) -> DiscreteHeatmap {
    let n = h.grid().width();
    let mut out = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            // (x, y) = (c, r) maps to (n − 1 − r, c).
            out[c * n + (n - 1 - r)] = h.probs()[r * n + c];
        }
    }
    DiscreteHeatmap::new(h.grid(), out).unwrap()
}

proptest! {
    #[test]
    fn softmax_is_normalized_and_shift_invariant(
        v in prop::collection::vec(-30.0f64..30.0, 42),
        shift in -50.0f64..50.0,
    ) {
        let a = softmax_normalize(&Logits::new(grid(), v.clone()).unwrap(), 1.0).unwrap();
        let b = softmax_normalize(&Logits::new(grid(), v.iter().map(|x| x + shift).collect()).unwrap(), 1.0).unwrap();
        prop_assert!((a.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        for (p, q) in a.probs().iter().zip(b.probs()) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn soft_argmax_is_linear_in_mixtures(w1 in weights(42), w2 in weights(42), alpha in 0.0f64..=1.0) {
        let (h1, h2) = (heatmap_from(&w1, grid()), heatmap_from(&w2, grid()));
        let mix: Vec<f64> = h1.probs().iter().zip(h2.probs()).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
        let hm = DiscreteHeatmap::new(grid(), mix).unwrap();
        let (m1, m2, m) = (soft_argmax(&h1), soft_argmax(&h2), soft_argmax(&hm));
        prop_assert!((m.x - (alpha * m1.x + (1.0 - alpha) * m2.x)).abs() <= 1e-12);
        prop_assert!((m.y - (alpha * m1.y + (1.0 - alpha) * m2.y)).abs() <= 1e-12);
    }

    #[test]
    fn rendered_lattice_gaussian_decodes_to_center(cx in 6usize..=25, cy in 6usize..=25) {
        let h = render_gaussian(Grid::new(32, 32).unwrap(), Point::new(cx as f64, cy as f64), 1.0).unwrap();
        let mu = soft_argmax(&h);
        prop_assert!((mu.x - cx as f64).abs() <= 1e-6 && (mu.y - cy as f64).abs() <= 1e-6);
    }

    #[test]
    fn covariance_identities(w in weights(42)) {
        let h = heatmap_from(&w, grid());
        let mu = soft_argmax(&h);
        for s in [covariance_biased(&h, mu), covariance_unbiased(&h, mu).unwrap()] {
            let (l1, l2) = eigenvalues_raw(&s);
            prop_assert!((l1 + l2 - (s.xx + s.yy)).abs() <= 1e-10);
            prop_assert!((l1 * l2 - s.det()).abs() <= 1e-10);
            prop_assert!(s.is_psd(1e-12));
        }
    }

    #[test]
    fn quarter_turn_rotates_covariance(w in weights(36)) {
        let g = Grid::new(6, 6).unwrap();
        let h = heatmap_from(&w, g);
        let (a, b) = (Moments::of(&h).unwrap(), Moments::of(&rotate_90(&h)).unwrap());
        let expect = a.unbiased.rotated(std::f64::consts::FRAC_PI_2);
        prop_assert!(b.unbiased.max_abs_diff(&expect) <= 1e-12);
        prop_assert!((a.eig.lambda1 - b.eig.lambda1).abs() <= 1e-12);
        prop_assert!((a.eig.lambda2 - b.eig.lambda2).abs() <= 1e-12);
    }

    #[test]
    fn star_reduces_to_regression_at_identity(mu in point(8.0), y in point(8.0), k in kind()) {
        let eig = eigen2x2(&Covariance2::diag(1.0, 1.0));
        prop_assert!((star_core(mu, &eig, y, k, 1e-5) - regression_loss(mu, y, k)).abs() <= 1e-12);
    }

    #[test]
    fn star_scales_with_inverse_root_lambda(e in 0.1f64..10.0, l1 in 0.5f64..20.0, base in eig_pair()) {
        let pair = |l: f64| EigenPair2 { lambda1: l, ..base };
        let mu = Point::new(0.0, 0.0);
        let y = base.v1 * e;
        let ratio = star_core(mu, &pair(2.0 * l1), y, DistanceKind::L1, 1e-5)
            / star_core(mu, &pair(l1), y, DistanceKind::L1, 1e-5);
        prop_assert!((ratio - std::f64::consts::FRAC_1_SQRT_2).abs() <= 1e-12);
    }

    #[test]
    fn star_nonincreasing_in_lambda1(eig in eig_pair(), y in point(6.0), k in kind(), extra in 0.0f64..10.0) {
        let mu = Point::new(0.0, 0.0);
        let bigger = EigenPair2 { lambda1: eig.lambda1 + extra, ..eig };
        prop_assert!(star_core(mu, &bigger, y, k, 1e-5) <= star_core(mu, &eig, y, k, 1e-5) + 1e-15);
    }

    #[test]
    fn star_ignores_eigenvector_signs(eig in eig_pair(), y in point(6.0), k in kind()) {
        let mu = Point::new(0.5, -0.5);
        let flipped = EigenPair2 { v1: eig.v1 * -1.0, v2: eig.v2 * -1.0, ..eig };
        prop_assert_eq!(star_core(mu, &eig, y, k, 1e-5), star_core(mu, &flipped, y, k, 1e-5));
    }

    #[test]
    fn star_rotation_invariant(
        a in 0.1f64..9.0, b in 0.1f64..9.0, phi in 0.0..std::f64::consts::TAU,
        theta in 0.0..std::f64::consts::TAU, e in point(5.0), k in kind(),
    ) {
        let sigma = Covariance2::diag(a, b).rotated(phi);
        let (s, c) = theta.sin_cos();
        let er = Point::new(c * e.x - s * e.y, s * e.x + c * e.y);
        let zero = Point::new(0.0, 0.0);
        let before = star_core(zero, &eigen2x2(&sigma), e, k, 1e-5);
        let after = star_core(zero, &eigen2x2(&sigma.rotated(theta)), er, k, 1e-5);
        prop_assert!((before - after).abs() <= 1e-10);
    }

    #[test]
    fn js_bounded_and_symmetric(w1 in weights(42), w2 in weights(42)) {
        let (p, q) = (heatmap_from(&w1, grid()), heatmap_from(&w2, grid()));
        let (pq, qp) = (js_regularizer(&p, &q).unwrap(), js_regularizer(&q, &p).unwrap());
        prop_assert!((0.0..=std::f64::consts::LN_2).contains(&pq));
        prop_assert!((pq - qp).abs() <= 1e-12);
    }

    #[test]
    fn mahalanobis_identity_is_squared_error(mu in point(8.0), y in point(8.0)) {
        let e = y - mu;
        prop_assert_eq!(mahalanobis_loss(mu, &Covariance2::diag(1.0, 1.0), y, 1e-5), e.x * e.x + e.y * e.y);
    }

    #[test]
    fn nme_scale_invariant(
        pts in prop::collection::vec((point(50.0), point(3.0)), 2..10),
        scale in 0.1f64..20.0,
        d in 1.0f64..100.0,
    ) {
        let build = |k: f64, off: bool| {
            Annotation::new(pts.iter().map(|(g, o)| if off { (*g + *o) * k } else { *g * k }).collect()).unwrap()
        };
        let base = nme(&build(1.0, true), &build(1.0, false), &Normalizer::Constant { value: d }).unwrap();
        let scaled = nme(&build(scale, true), &build(scale, false), &Normalizer::Constant { value: d * scale }).unwrap();
        prop_assert!((base - scaled).abs() <= 1e-12);
    }

    #[test]
    fn fr_complements_ced(nmes in prop::collection::vec(0.0f64..0.3, 1..200), threshold in 0.01f64..0.3) {
        let curve = ced(&nmes, threshold, 50).unwrap();
        let last = curve.last().unwrap();
        prop_assert_eq!(last.0, threshold);
        prop_assert!((fr(&nmes, threshold).unwrap() - (1.0 - last.1)).abs() <= 1e-12);
        prop_assert!(curve.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].1));
        prop_assert!(auc(&nmes, threshold).unwrap() <= 1.0);
    }
}
