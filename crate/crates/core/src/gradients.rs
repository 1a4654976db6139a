//! Exact gradients of the per-landmark objective with respect to logits.
//!
//! The forward graph is fixed (`logits → h → μ, Σ → (λ, V) → loss`), so the
//! backward pass is written out by hand:
//!
//! ```text
//! dλ_k = v_kᵀ dΣ v_k
//! dv_1 = (v_2ᵀ dΣ v_1 / (λ1 − λ2)) v_2,   dv_2 = (v_1ᵀ dΣ v_2 / (λ2 − λ1)) v_1
//! ```
//!
//! Matrix cotangents use the full-matrix convention `dL = tr(G dΣ)`.
//! Under [`RestrictionMode::DetachRestriction`] the eigenpair receives no
//! gradient; in the other modes it does, except for the eigenvector terms
//! when the eigen-gap is below [`LossConfig::effective_eigenvector_gap`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{render_gaussian, softmax_normalize, DiscreteHeatmap, Grid, Logits, Point};
use crate::losses::{
    objective_with_frozen_eigen, parts_at, scalar_distance, scalar_distance_deriv,
    total_objective, LossConfig, LossParts, Objective, RestrictionMode,
};
use crate::moments::{Covariance2, EigenPair2, Moments, EIGEN_GAP_EPS};

/// Default central-difference step on logits.
pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// A row-major H×W array of partial derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl GradientField {
    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values
            .chunks(self.grid.width())
            .map(<[f64]>::to_vec)
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Frobenius inner product of two symmetric matrices.
fn sym_dot(a: &Covariance2, b: &Covariance2) -> f64 {
    a.xx * b.xx + 2.0 * a.xy * b.xy + a.yy * b.yy
}

fn outer_sym(u: Point, v: Point) -> Covariance2 {
    Covariance2::new(u.x * v.x, 0.5 * (u.x * v.y + u.y * v.x), u.y * v.y)
}

fn add(a: Covariance2, b: Covariance2) -> Covariance2 {
    Covariance2::new(a.xx + b.xx, a.xy + b.xy, a.yy + b.yy)
}

/// Pulls cotangents on `(λ1, λ2)` and `(v1, v2)` back onto `Σ`.
///
/// Eigenvector terms are dropped when the gap is below [`EIGEN_GAP_EPS`].
pub fn eigen_backward(eig: &EigenPair2, g_lambda: (f64, f64), g_v: (Point, Point)) -> Covariance2 {
    eigen_backward_with_gap(eig, g_lambda, g_v, EIGEN_GAP_EPS)
}

/// [`eigen_backward`] with the eigenvector terms dropped below `min_gap`.
pub fn eigen_backward_with_gap(
    eig: &EigenPair2,
    g_lambda: (f64, f64),
    g_v: (Point, Point),
    min_gap: f64,
) -> Covariance2 {
    let mut g = add(
        outer_sym(eig.v1, eig.v1).scale(g_lambda.0),
        outer_sym(eig.v2, eig.v2).scale(g_lambda.1),
    );
    let gap = eig.gap();
    if gap >= min_gap.max(EIGEN_GAP_EPS) {
        let c = (g_v.0.dot(eig.v2) - g_v.1.dot(eig.v1)) / gap;
        g = add(g, outer_sym(eig.v1, eig.v2).scale(c));
    }
    g
}

/// Loss parts, decoded quantities and `∂L/∂h` for one landmark.
#[derive(Debug, Clone)]
pub struct HeatmapGrad {
    pub parts: LossParts,
    pub mu: Point,
    /// `None` for the regression objective when the covariance is degenerate.
    pub eig: Option<EigenPair2>,
    pub d_probs: Vec<f64>,
}

/// Gradient of the objective with respect to the heatmap entries, each
/// treated as a free variable.
pub fn grad_wrt_heatmap(h: &DiscreteHeatmap, y_t: Point, cfg: &LossConfig) -> Result<HeatmapGrad> {
    let grid = h.grid();
    let probs = h.probs();
    let n = probs.len();
    let mut d_probs = vec![0.0; n];

    let (mu, eig, parts) = match cfg.objective {
        Objective::Regression => {
            let m = Moments::of(h).ok();
            let mu = m.map_or_else(|| crate::heatmap::soft_argmax(h), |m| m.mu);
            let parts = parts_at(h, y_t, cfg, mu, None)?;
            let e = y_t - mu;
            let g_mu = Point::new(
                -scalar_distance_deriv(cfg.distance, e.x),
                -scalar_distance_deriv(cfg.distance, e.y),
            );
            add_linear(&mut d_probs, grid, g_mu);
            (mu, m.map(|m| m.eig), parts)
        }
        Objective::Star | Objective::Mahalanobis => {
            let m = Moments::of(h)?;
            let parts = parts_at(h, y_t, cfg, m.mu, Some(&m.eig))?;
            let (mu, eig) = (m.mu, m.eig);
            let e = y_t - mu;
            let p = (eig.v1.dot(e), eig.v2.dot(e));
            let lam = (eig.lambda1, eig.lambda2);
            let floor = cfg.lambda_floor;
            let lt = (lam.0.max(floor), lam.1.max(floor));

            // Cotangents of the projections and (floored) eigenvalues.
            let (gp, mut gl) = if cfg.objective == Objective::Star {
                let d = cfg.distance;
                let a = (1.0 / lt.0.sqrt(), 1.0 / lt.1.sqrt());
                let gp = (a.0 * scalar_distance_deriv(d, p.0), a.1 * scalar_distance_deriv(d, p.1));
                let gl = (
                    -0.5 * scalar_distance(d, p.0) * a.0 / lt.0,
                    -0.5 * scalar_distance(d, p.1) * a.1 / lt.1,
                );
                (gp, gl)
            } else {
                let gp = (2.0 * p.0 / lt.0, 2.0 * p.1 / lt.1);
                let gl = (-p.0 * p.0 / (lt.0 * lt.0), -p.1 * p.1 / (lt.1 * lt.1));
                (gp, gl)
            };
            if lam.0 <= floor {
                gl.0 = 0.0;
            }
            if lam.1 <= floor {
                gl.1 = 0.0;
            }
            if let RestrictionMode::ValueRestriction { w } = cfg.restriction {
                gl.0 += 0.5 * w;
                gl.1 += 0.5 * w;
            }

            let mut g_mu = (eig.v1 * gp.0 + eig.v2 * gp.1) * -1.0;

            if !cfg.restriction.detaches() {
                let g_v = (e * gp.0, e * gp.1);
                let g_sigma = eigen_backward_with_gap(&eig, gl, g_v, cfg.effective_eigenvector_gap());

                // Σ = S / D with S = Σ h_i d_i d_iᵀ, D = V1 − V2/V1.
                let (v1, v2) = (m.sums.v1_sum, m.sums.v2_sum);
                let denom = m.sums.unbiased_denominator();
                let s = m.unbiased.scale(denom);
                let g_s = g_sigma.scale(1.0 / denom);
                let g_den = -sym_dot(&g_sigma, &s) / (denom * denom);
                // ∂S/∂μ contracts with r = Σ_j h_j d_j = μ (1 − V1).
                let r = mu * (1.0 - v1);
                g_mu = g_mu - g_s.apply(r) * 2.0;
                let den_const = 1.0 + v2 / (v1 * v1);
                let w = grid.width();
                for (r, (g_row, p_row)) in d_probs.chunks_exact_mut(w).zip(probs.chunks_exact(w)).enumerate() {
                    let dy = r as f64 - mu.y;
                    for (c, (g, &p)) in g_row.iter_mut().zip(p_row).enumerate() {
                        let d = Point::new(c as f64 - mu.x, dy);
                        *g = g_s.bilinear(d, d) + g_den * (den_const - 2.0 * p / v1);
                    }
                }
            }
            add_linear(&mut d_probs, grid, g_mu);
            (mu, Some(eig), parts)
        }
    };

    if cfg.dr_weight > 0.0 {
        // ∂JS/∂h_i = ½ ln(2h_i / (h_i + t_i)).
        let target = render_gaussian(grid, y_t, cfg.dr_sigma)?;
        for ((g, &p), &t) in d_probs.iter_mut().zip(probs).zip(target.probs()) {
            if p > 0.0 {
                *g += cfg.dr_weight * 0.5 * (2.0 * p / (p + t)).ln();
            }
        }
    }

    Ok(HeatmapGrad {
        parts,
        mu,
        eig,
        d_probs,
    })
}

/// `g_i += a · y_i` over the grid coordinates.
fn add_linear(g: &mut [f64], grid: Grid, a: Point) {
    for (r, row) in g.chunks_exact_mut(grid.width()).enumerate() {
        let base = a.y * r as f64;
        for (c, v) in row.iter_mut().enumerate() {
            *v += base + a.x * c as f64;
        }
    }
}

/// Vector-Jacobian product of the unit-temperature softmax.
pub fn softmax_backward(h: &DiscreteHeatmap, d_probs: &[f64]) -> Vec<f64> {
    let probs = h.probs();
    let inner: f64 = probs
        .iter()
        .zip(d_probs)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, g)| p * g)
        .sum();
    probs
        .iter()
        .zip(d_probs)
        .map(|(&p, &g)| if p > 0.0 { p * (g - inner) } else { 0.0 })
        .collect()
}

/// Loss, decoded mean/eigenpair and logit gradient in one pass.
#[derive(Debug, Clone)]
pub struct LogitGrad {
    pub parts: LossParts,
    pub mu: Point,
    pub eig: Option<EigenPair2>,
    pub grad: Vec<f64>,
}

pub fn value_and_grad(logits: &Logits, y_t: Point, cfg: &LossConfig) -> Result<LogitGrad> {
    let h = softmax_normalize(logits, 1.0)?;
    let hg = grad_wrt_heatmap(&h, y_t, cfg)?;
    Ok(LogitGrad {
        parts: hg.parts,
        mu: hg.mu,
        eig: hg.eig,
        grad: softmax_backward(&h, &hg.d_probs),
    })
}

/// Exact gradient of [`total_objective`] with respect to every logit.
pub fn grad_total(logits: &Logits, y_t: Point, cfg: &LossConfig) -> Result<GradientField> {
    let g = value_and_grad(logits, y_t, cfg)?;
    Ok(GradientField {
        grid: logits.grid(),
        values: g.grad,
    })
}

/// Central differences `(f(x + δ) − f(x − δ)) / 2δ`, one logit at a time.
pub fn finite_diff_grad<F>(objective: F, logits: &Logits, step: f64) -> GradientField
where
    F: Fn(&Logits) -> f64,
{
    let mut probe = logits.clone();
    let mut values = Vec::with_capacity(logits.values().len());
    for i in 0..logits.values().len() {
        let x0 = logits.values()[i];
        probe.values_mut()[i] = x0 + step;
        let up = objective(&probe);
        probe.values_mut()[i] = x0 - step;
        let down = objective(&probe);
        probe.values_mut()[i] = x0;
        values.push((up - down) / (2.0 * step));
    }
    GradientField {
        grid: logits.grid(),
        values,
    }
}

/// The objective as the configured differentiation rule sees it: with the
/// eigenpair frozen at `logits` under the detach rule, the full objective
/// otherwise.
pub fn reference_objective<'a>(
    logits: &Logits,
    y_t: Point,
    cfg: &'a LossConfig,
) -> Result<impl Fn(&Logits) -> f64 + 'a> {
    let frozen = if cfg.restriction.detaches() && cfg.objective.uses_eigen() {
        let h = softmax_normalize(logits, 1.0)?;
        Some(Moments::of(&h)?.eig)
    } else {
        None
    };
    Ok(move |l: &Logits| {
        let res = match &frozen {
            Some(eig) => softmax_normalize(l, 1.0)
                .and_then(|h| objective_with_frozen_eigen(&h, y_t, cfg, eig))
                .map(|p| p.total()),
            None => total_objective(l, y_t, cfg).map(|(v, _)| v),
        };
        res.unwrap_or(f64::NAN)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    /// `max |analytic − numeric| / max(‖analytic‖∞, ‖numeric‖∞)` over seeds.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub seeds: usize,
    /// Instances redrawn because they sat next to a kink or an eigen-degeneracy.
    pub resampled: usize,
    /// Index of the seed with the largest relative error.
    pub worst_seed: u64,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
    pub passed: bool,
}

/// Relative eigen-gap below which an instance is redrawn when eigenvector
/// derivatives are in play.
const GAP_RESAMPLE_RATIO: f64 = 0.05;

/// Draws a random logit field and target for `seed`, skipping instances where
/// finite differences are not a fair reference.
pub fn random_instance(
    cfg: &LossConfig,
    grid: Grid,
    seed: u64,
    step: f64,
) -> (Logits, Point, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // A one-logit perturbation moves μ by at most step·(W + H).
    let margin = 10.0 * step * (grid.width() + grid.height()) as f64;
    let mut redrawn = 0;
    loop {
        let values: Vec<f64> = (0..grid.len()).map(|_| rng.sample(StandardNormal)).collect();
        let logits = Logits::new(grid, values).expect("finite draws");
        let y_t = Point::new(
            rng.random_range(0.0..=(grid.width() - 1) as f64),
            rng.random_range(0.0..=(grid.height() - 1) as f64),
        );
        if instance_is_fair(&logits, y_t, cfg, margin) {
            return (logits, y_t, redrawn);
        }
        redrawn += 1;
    }
}

fn instance_is_fair(logits: &Logits, y_t: Point, cfg: &LossConfig, margin: f64) -> bool {
    let Ok(h) = softmax_normalize(logits, 1.0) else {
        return false;
    };
    let Ok(m) = Moments::of(&h) else {
        return false;
    };
    let e = y_t - m.mu;
    let projections = match cfg.objective {
        Objective::Regression => [e.x, e.y],
        Objective::Star => [m.eig.v1.dot(e), m.eig.v2.dot(e)],
        Objective::Mahalanobis => return eigen_gap_ok(&m.eig, cfg),
    };
    let kinks = cfg.distance.kinks();
    let near_kink = projections
        .iter()
        .any(|p| kinks.iter().any(|k| (p.abs() - k).abs() < margin));
    !near_kink && (cfg.objective == Objective::Regression || eigen_gap_ok(&m.eig, cfg))
}

/// Below the configured cut-off the analytic gradient omits eigenvector terms
/// by design, so finite differences are only a reference above it.
fn eigen_gap_ok(eig: &EigenPair2, cfg: &LossConfig) -> bool {
    let needed = (GAP_RESAMPLE_RATIO * (eig.lambda1 + eig.lambda2)).max(cfg.effective_eigenvector_gap());
    cfg.restriction.detaches() || eig.gap() >= needed
}

/// Compares [`grad_total`] against [`finite_diff_grad`] on `seeds` random
/// instances (seeds `0..seeds`).
pub fn grad_check(cfg: &LossConfig, grid: Grid, seeds: usize, tolerance: f64) -> Result<GradReport> {
    let list: Vec<u64> = (0..seeds as u64).collect();
    grad_check_seeds(cfg, grid, &list, tolerance, DEFAULT_FD_STEP)
}

pub fn grad_check_seeds(
    cfg: &LossConfig,
    grid: Grid,
    seeds: &[u64],
    tolerance: f64,
    step: f64,
) -> Result<GradReport> {
    if seeds.is_empty() {
        return Err(Error::EmptyInput("grad_check needs at least one seed"));
    }
    cfg.validate()?;
    let runs: Vec<Result<(u64, usize, f64, f64, GradientField, GradientField)>> = seeds
        .par_iter()
        .map(|&seed| {
            let (logits, y_t, redrawn) = random_instance(cfg, grid, seed, step);
            let analytic = grad_total(&logits, y_t, cfg)?;
            let f = reference_objective(&logits, y_t, cfg)?;
            let numeric = finite_diff_grad(f, &logits, step);
            let abs = analytic
                .values
                .iter()
                .zip(&numeric.values)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            let scale = analytic.max_abs().max(numeric.max_abs());
            let rel = if abs == 0.0 { 0.0 } else { abs / scale };
            Ok((seed, redrawn, abs, rel, analytic, numeric))
        })
        .collect();

    let mut report = GradReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        tolerance,
        seeds: seeds.len(),
        resampled: 0,
        worst_seed: seeds[0],
        analytic: Vec::new(),
        numeric: Vec::new(),
        passed: false,
    };
    let mut worst = f64::NEG_INFINITY;
    for run in runs {
        let (seed, redrawn, abs, rel, analytic, numeric) = run?;
        report.resampled += redrawn;
        report.max_abs_error = report.max_abs_error.max(abs);
        // NaN sorts as the worst case.
        let rel = if rel.is_nan() { f64::INFINITY } else { rel };
        if rel > worst {
            worst = rel;
            report.worst_seed = seed;
            report.analytic = analytic.rows();
            report.numeric = numeric.rows();
        }
    }
    report.max_rel_error = worst;
    report.passed = report.max_rel_error <= tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::DistanceKind;

    fn grid8() -> Grid {
        Grid::new(8, 8).unwrap()
    }

    #[test]
    fn stationary_point_has_zero_star_gradient() {
        let g = grid8();
        let logits = Logits::new(g, (0..64).map(|i| ((i * 7) % 11) as f64 * 0.1).collect()).unwrap();
        let h = softmax_normalize(&logits, 1.0).unwrap();
        let mu = crate::heatmap::soft_argmax(&h);
        let cfg = LossConfig::star(DistanceKind::L2, RestrictionMode::DetachRestriction);
        let grad = grad_total(&logits, mu, &cfg).unwrap();
        assert!(grad.max_abs() < 1e-14, "{}", grad.max_abs());
    }

    #[test]
    fn uniform_logits_detach_l2_matches_fd() {
        let g = grid8();
        let logits = Logits::zeros(g);
        let y = Point::new(2.3, 5.1);
        let cfg = LossConfig::star(DistanceKind::L2, RestrictionMode::DetachRestriction);
        let a = grad_total(&logits, y, &cfg).unwrap();
        let n = finite_diff_grad(reference_objective(&logits, y, &cfg).unwrap(), &logits, 1e-6);
        let err = a
            .values
            .iter()
            .zip(&n.values)
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(err / a.max_abs() < 1e-6, "{err}");
    }

    #[test]
    fn fd_of_linear_and_constant_objectives() {
        let g = Grid::new(3, 2).unwrap();
        let l = Logits::new(g, vec![0.1, -0.4, 2.0, 0.0, 1.0, 3.0]).unwrap();
        let ones = finite_diff_grad(|x| x.values().iter().sum(), &l, 1e-6);
        assert!(ones.values.iter().all(|v| (v - 1.0).abs() < 1e-9));
        let zero = finite_diff_grad(|_| 4.2, &l, 1e-6);
        assert!(zero.values.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn fd_of_soft_argmax_matches_softmax_jacobian() {
        let g = Grid::new(5, 4).unwrap();
        let l = Logits::new(g, (0..20).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let h = softmax_normalize(&l, 1.0).unwrap();
        let mu = crate::heatmap::soft_argmax(&h);
        // ∂μ_x/∂z_i = h_i (x_i − μ_x).
        let n = finite_diff_grad(
            |x| crate::heatmap::soft_argmax(&softmax_normalize(x, 1.0).unwrap()).x,
            &l,
            1e-6,
        );
        for (i, v) in n.values.iter().enumerate() {
            let expected = h.probs()[i] * (g.coord(i).x - mu.x);
            assert!((v - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn value_restriction_pullback_is_half_identity() {
        let eig = crate::moments::eigen2x2(&Covariance2::new(3.0, 0.7, 1.5));
        let w = 1.7;
        let g = eigen_backward(&eig, (0.5 * w, 0.5 * w), (Point::default(), Point::default()));
        assert!(g.max_abs_diff(&Covariance2::diag(0.5 * w, 0.5 * w)) < 1e-15);
    }

    #[test]
    fn eigenvector_cutoff_only_acts_below_the_gap() {
        let exact = LossConfig::star(DistanceKind::smooth_l1(), RestrictionMode::value(1.0));
        let cut = LossConfig {
            eigenvector_gap: 0.3,
            ..exact
        };
        assert!(grad_check(&cut, grid8(), 10, 1e-4).unwrap().passed);

        // Slightly elongated blob: gap well below the cut-off.
        let g = grid8();
        let values = g
            .cells()
            .map(|(_, p)| {
                let d = p - Point::new(3.5, 3.5);
                -d.x * d.x / 2.4 - d.y * d.y / 2.0
            })
            .collect();
        let logits = Logits::new(g, values).unwrap();
        let y_t = Point::new(4.5, 2.0);
        let a = value_and_grad(&logits, y_t, &exact).unwrap();
        let b = value_and_grad(&logits, y_t, &cut).unwrap();
        assert!(a.eig.unwrap().gap() < 0.3);
        assert_eq!(a.parts, b.parts);
        assert!(a.grad.iter().zip(&b.grad).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn tolerance_zero_fails() {
        let cfg = LossConfig::star(DistanceKind::L2, RestrictionMode::DetachRestriction);
        let r = grad_check(&cfg, grid8(), 2, 0.0).unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_error > 0.0);
    }

    #[test]
    fn gradients_sum_to_zero() {
        let cfg = LossConfig {
            dr_weight: 0.3,
            ..LossConfig::default()
        };
        for seed in 0..5 {
            let (l, y, _) = random_instance(&cfg, grid8(), seed, 1e-6);
            let g = grad_total(&l, y, &cfg).unwrap();
            let s: f64 = g.values.iter().sum();
            assert!(s.abs() < 1e-9, "{s}");
        }
    }

    #[test]
    fn degenerate_input_propagates() {
        let g = grid8();
        let mut v = vec![0.0; 64];
        v[9] = 5000.0;
        let l = Logits::new(g, v).unwrap();
        let r = grad_total(&l, Point::new(1.0, 1.0), &LossConfig::default());
        assert!(matches!(r, Err(Error::DegenerateDistribution { .. })));
    }

    #[test]
    fn empty_seed_list_is_rejected() {
        assert!(grad_check_seeds(&LossConfig::default(), grid8(), &[], 1e-4, 1e-6).is_err());
    }
}
