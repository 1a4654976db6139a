//! Distances and losses on decoded heatmaps.
//!
//! The ambiguity-guided loss projects the error `y_t − μ` onto the principal
//! axes of the heatmap covariance and scales each projected distance by
//! `1/√λ`, so error along a wide (ambiguous) axis is penalised less.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{render_gaussian, softmax_normalize, DiscreteHeatmap, Logits, Point};
use crate::moments::{eigen2x2, Covariance2, EigenPair2, Moments, DEFAULT_LAMBDA_FLOOR, EIGEN_GAP_EPS};

/// Scalar distance `d(x)` applied to one error component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistanceKind {
    L1,
    /// Squared error `x²`.
    L2,
    SmoothL1 {
        #[serde(default = "default_smooth_l1_s")]
        s: f64,
    },
    Wing {
        #[serde(default = "default_wing_omega")]
        omega: f64,
        #[serde(default = "default_wing_epsilon")]
        epsilon: f64,
    },
}

fn default_smooth_l1_s() -> f64 {
    0.01
}
fn default_wing_omega() -> f64 {
    10.0
}
fn default_wing_epsilon() -> f64 {
    2.0
}

impl DistanceKind {
    pub fn smooth_l1() -> Self {
        Self::SmoothL1 {
            s: default_smooth_l1_s(),
        }
    }

    pub fn wing() -> Self {
        Self::Wing {
            omega: default_wing_omega(),
            epsilon: default_wing_epsilon(),
        }
    }

    /// The four kinds with default parameters.
    pub fn all() -> [DistanceKind; 4] {
        [Self::L1, Self::L2, Self::smooth_l1(), Self::wing()]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::L1 => "l1",
            Self::L2 => "l2",
            Self::SmoothL1 { .. } => "smooth_l1",
            Self::Wing { .. } => "wing",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::L1 | Self::L2 => true,
            Self::SmoothL1 { s } => s > 0.0 && s.is_finite(),
            Self::Wing { omega, epsilon } => {
                omega > 0.0 && epsilon > 0.0 && omega.is_finite() && epsilon.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "distance parameters must be positive: {self:?}"
            )))
        }
    }

    /// Points of |x| where `d` is not differentiable.
    pub fn kinks(&self) -> Vec<f64> {
        match *self {
            Self::L1 => vec![0.0],
            Self::L2 => vec![],
            Self::SmoothL1 { s } => vec![s],
            Self::Wing { omega, .. } => vec![0.0, omega],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum RestrictionMode {
    /// Adds `w · (λ1 + λ2)/2`.
    #[serde(rename = "value")]
    ValueRestriction {
        #[serde(default = "default_w")]
        w: f64,
    },
    /// Eigenpairs enter the loss as constants for differentiation.
    #[serde(rename = "detach")]
    DetachRestriction,
    #[serde(rename = "none")]
    NoRestriction,
}

fn default_w() -> f64 {
    1.0
}

impl RestrictionMode {
    pub fn value(w: f64) -> Self {
        Self::ValueRestriction { w }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::ValueRestriction { .. } => "value",
            Self::DetachRestriction => "detach",
            Self::NoRestriction => "none",
        }
    }

    pub fn detaches(&self) -> bool {
        matches!(self, Self::DetachRestriction)
    }
}

/// The data term of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Principal-axis decomposition scaled by `1/√λ`.
    #[default]
    Star,
    /// Plain coordinate-wise `d(e_x) + d(e_y)`; never looks at the covariance,
    /// so the restriction mode has no effect.
    Regression,
    /// `eᵀ Σ⁻¹ e`; the distance kind is ignored.
    Mahalanobis,
}

impl Objective {
    pub fn uses_eigen(&self) -> bool {
        !matches!(self, Objective::Regression)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub objective: Objective,
    pub distance: DistanceKind,
    pub restriction: RestrictionMode,
    /// Weight of the Jensen–Shannon term; 0 disables it.
    pub dr_weight: f64,
    /// Width of the Gaussian target for the Jensen–Shannon term (px).
    pub dr_sigma: f64,
    /// Floor on eigenvalues before `1/√λ` (px²).
    pub lambda_floor: f64,
    /// Eigen-gap (px²) below which eigenvector derivatives are dropped from
    /// the gradient; never below [`EIGEN_GAP_EPS`]. Loss values are unaffected.
    pub eigenvector_gap: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Star,
            distance: DistanceKind::smooth_l1(),
            restriction: RestrictionMode::value(1.0),
            dr_weight: 0.0,
            dr_sigma: 1.0,
            lambda_floor: DEFAULT_LAMBDA_FLOOR,
            eigenvector_gap: EIGEN_GAP_EPS,
        }
    }
}

impl LossConfig {
    pub fn star(distance: DistanceKind, restriction: RestrictionMode) -> Self {
        Self {
            distance,
            restriction,
            ..Self::default()
        }
    }

    pub fn regression(distance: DistanceKind) -> Self {
        Self {
            objective: Objective::Regression,
            distance,
            restriction: RestrictionMode::NoRestriction,
            ..Self::default()
        }
    }

    /// Cut-off actually applied to the eigen-gap in the backward pass.
    pub fn effective_eigenvector_gap(&self) -> f64 {
        self.eigenvector_gap.max(EIGEN_GAP_EPS)
    }

    pub fn validate(&self) -> Result<()> {
        self.distance.validate()?;
        if let RestrictionMode::ValueRestriction { w } = self.restriction {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "restriction weight must be >= 0, got {w}"
                )));
            }
        }
        if !(self.dr_weight >= 0.0) || !self.dr_weight.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "dr_weight must be >= 0, got {}",
                self.dr_weight
            )));
        }
        if !(self.dr_sigma > 0.0) || !self.dr_sigma.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "dr_sigma must be > 0, got {}",
                self.dr_sigma
            )));
        }
        if !(self.eigenvector_gap >= 0.0) || !self.eigenvector_gap.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "eigenvector_gap must be >= 0, got {}",
                self.eigenvector_gap
            )));
        }
        if !(self.lambda_floor > 0.0) || !self.lambda_floor.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "lambda_floor must be > 0, got {}",
                self.lambda_floor
            )));
        }
        Ok(())
    }
}

pub fn scalar_distance(kind: DistanceKind, x: f64) -> f64 {
    let a = x.abs();
    match kind {
        DistanceKind::L1 => a,
        DistanceKind::L2 => x * x,
        DistanceKind::SmoothL1 { s } => {
            if a < s {
                0.5 * x * x / s
            } else {
                a - 0.5 * s
            }
        }
        DistanceKind::Wing { omega, epsilon } => {
            if a < omega {
                omega * (a / epsilon).ln_1p()
            } else {
                let c = omega - omega * (omega / epsilon).ln_1p();
                a - c
            }
        }
    }
}

/// `d′(x)`; the subgradient at the origin is 0 for L1 and Wing.
pub fn scalar_distance_deriv(kind: DistanceKind, x: f64) -> f64 {
    let a = x.abs();
    let sign = if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    };
    match kind {
        DistanceKind::L1 => sign,
        DistanceKind::L2 => 2.0 * x,
        DistanceKind::SmoothL1 { s } => {
            if a < s {
                x / s
            } else {
                sign
            }
        }
        DistanceKind::Wing { omega, epsilon } => {
            if a < omega {
                sign * omega / (epsilon + a)
            } else {
                sign
            }
        }
    }
}

/// `d(e_x) + d(e_y)` with `e = y_t − μ`.
pub fn regression_loss(mu: Point, y_t: Point, kind: DistanceKind) -> f64 {
    let e = y_t - mu;
    scalar_distance(kind, e.x) + scalar_distance(kind, e.y)
}

/// `d(v1ᵀe)/√λ1 + d(v2ᵀe)/√λ2` with floored eigenvalues.
pub fn star_core(
    mu: Point,
    eig: &EigenPair2,
    y_t: Point,
    kind: DistanceKind,
    lambda_floor: f64,
) -> f64 {
    let e = y_t - mu;
    let (l1, l2) = eig.floored(lambda_floor);
    scalar_distance(kind, eig.v1.dot(e)) / l1.sqrt() + scalar_distance(kind, eig.v2.dot(e)) / l2.sqrt()
}

/// `(λ1 + λ2)/2` on the unfloored eigenvalues.
pub fn value_restriction(eig: &EigenPair2) -> f64 {
    0.5 * (eig.lambda1 + eig.lambda2)
}

/// Jensen–Shannon divergence (natural log), in `[0, ln 2]`.
pub fn js_regularizer(h: &DiscreteHeatmap, target: &DiscreteHeatmap) -> Result<f64> {
    h.check_same_grid(target)?;
    let mut acc = 0.0;
    for (&p, &q) in h.probs().iter().zip(target.probs()) {
        let m2 = p + q;
        if p > 0.0 {
            acc += p * (2.0 * p / m2).ln();
        }
        if q > 0.0 {
            acc += q * (2.0 * q / m2).ln();
        }
    }
    Ok((0.5 * acc).clamp(0.0, std::f64::consts::LN_2))
}

/// `eᵀ Σ⁻¹ e` through the floored eigen-factorisation of `Σ`.
pub fn mahalanobis_loss(mu: Point, sigma: &Covariance2, y_t: Point, lambda_floor: f64) -> f64 {
    mahalanobis_eig(mu, &eigen2x2(sigma), y_t, lambda_floor)
}

pub(crate) fn mahalanobis_eig(mu: Point, eig: &EigenPair2, y_t: Point, lambda_floor: f64) -> f64 {
    let e = y_t - mu;
    let (l1, l2) = eig.floored(lambda_floor);
    let (p1, p2) = (eig.v1.dot(e), eig.v2.dot(e));
    p1 * p1 / l1 + p2 * p2 / l2
}

/// Individual, already weighted, contributions to the objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    /// Data term: the ambiguity-guided loss, or the regression / Mahalanobis
    /// loss when [`LossConfig::objective`] selects one of those.
    pub star: f64,
    /// `w · (λ1 + λ2)/2` in value-restriction mode, else 0.
    pub restriction: f64,
    /// `dr_weight · JS(h ‖ N(y_t, dr_sigma²))`.
    pub dr: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.star + self.restriction + self.dr
    }
}

/// Per-landmark objective evaluated on an already normalised heatmap.
pub fn objective_from_heatmap(
    h: &DiscreteHeatmap,
    y_t: Point,
    cfg: &LossConfig,
) -> Result<LossParts> {
    evaluate(h, y_t, cfg, None)
}

/// Same as [`objective_from_heatmap`] but with the eigenpair held fixed at
/// `eig`: the loss as seen by the detach rule.
pub fn objective_with_frozen_eigen(
    h: &DiscreteHeatmap,
    y_t: Point,
    cfg: &LossConfig,
    eig: &EigenPair2,
) -> Result<LossParts> {
    evaluate(h, y_t, cfg, Some(eig))
}

fn evaluate(
    h: &DiscreteHeatmap,
    y_t: Point,
    cfg: &LossConfig,
    frozen: Option<&EigenPair2>,
) -> Result<LossParts> {
    let (mu, eig) = match (cfg.objective, frozen) {
        (Objective::Regression, _) => (crate::heatmap::soft_argmax(h), None),
        (_, Some(e)) => (crate::heatmap::soft_argmax(h), Some(*e)),
        (_, None) => {
            let m = Moments::of(h)?;
            (m.mu, Some(m.eig))
        }
    };
    parts_at(h, y_t, cfg, mu, eig.as_ref())
}

/// Loss parts given an already decoded mean and (for eigen objectives) eigenpair.
pub(crate) fn parts_at(
    h: &DiscreteHeatmap,
    y_t: Point,
    cfg: &LossConfig,
    mu: Point,
    eig: Option<&EigenPair2>,
) -> Result<LossParts> {
    let mut parts = LossParts::default();
    match (cfg.objective, eig) {
        (Objective::Regression, _) => {
            parts.star = regression_loss(mu, y_t, cfg.distance);
        }
        (_, Some(eig)) => {
            parts.star = if cfg.objective == Objective::Star {
                star_core(mu, eig, y_t, cfg.distance, cfg.lambda_floor)
            } else {
                mahalanobis_eig(mu, eig, y_t, cfg.lambda_floor)
            };
            if let RestrictionMode::ValueRestriction { w } = cfg.restriction {
                parts.restriction = w * value_restriction(eig);
            }
        }
        (_, None) => unreachable!("eigen objectives are always decoded with an eigenpair"),
    }
    if cfg.dr_weight > 0.0 {
        let target = render_gaussian(h.grid(), y_t, cfg.dr_sigma)?;
        parts.dr = cfg.dr_weight * js_regularizer(h, &target)?;
    }
    Ok(parts)
}

/// Softmax, decode and evaluate one landmark.
pub fn total_objective(logits: &Logits, y_t: Point, cfg: &LossConfig) -> Result<(f64, LossParts)> {
    let h = softmax_normalize(logits, 1.0)?;
    let parts = objective_from_heatmap(&h, y_t, cfg)?;
    Ok((parts.total(), parts))
}

/// Mean of [`total_objective`] over landmarks, summed in input order.
pub fn mean_objective(items: &[(Logits, Point)], cfg: &LossConfig) -> Result<(f64, LossParts)> {
    if items.is_empty() {
        return Err(Error::EmptyInput("no landmarks to average"));
    }
    let mut acc = LossParts::default();
    for (logits, y_t) in items {
        let (_, p) = total_objective(logits, *y_t, cfg)?;
        acc.star += p.star;
        acc.restriction += p.restriction;
        acc.dr += p.dr;
    }
    let n = items.len() as f64;
    let mean = LossParts {
        star: acc.star / n,
        restriction: acc.restriction / n,
        dr: acc.dr / n,
    };
    Ok((mean.total(), mean))
}
