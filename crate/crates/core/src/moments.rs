//! Principal-component analysis of a discrete distribution: weighted mean,
//! weighted covariance (biased and Bessel-corrected) and the closed-form
//! eigen-decomposition of the resulting 2×2 symmetric matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{soft_argmax, DiscreteHeatmap, Point};

/// Smallest admissible value of the unbiased denominator `V1 - V2/V1`.
pub const DENOMINATOR_EPS: f64 = 1e-8;

/// Eigen-gap (px²) below which eigenvector derivatives are not propagated.
pub const EIGEN_GAP_EPS: f64 = 1e-8;

/// Default eigenvalue floor (px²) used wherever `1/λ` or `1/√λ` is taken.
pub const DEFAULT_LAMBDA_FLOOR: f64 = 1e-5;

/// Symmetric 2×2 matrix `[[xx, xy], [xy, yy]]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Covariance2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Covariance2 {
    pub const IDENTITY: Covariance2 = Covariance2 {
        xx: 1.0,
        xy: 0.0,
        yy: 1.0,
    };

    pub const fn new(xx: f64, xy: f64, yy: f64) -> Self {
        Self { xx, xy, yy }
    }

    pub fn diag(xx: f64, yy: f64) -> Self {
        Self { xx, xy: 0.0, yy }
    }

    pub fn trace(&self) -> f64 {
        self.xx + self.yy
    }

    pub fn det(&self) -> f64 {
        self.xx * self.yy - self.xy * self.xy
    }

    pub fn scale(&self, k: f64) -> Self {
        Self::new(self.xx * k, self.xy * k, self.yy * k)
    }

    /// `M v`.
    pub fn apply(&self, v: Point) -> Point {
        Point::new(self.xx * v.x + self.xy * v.y, self.xy * v.x + self.yy * v.y)
    }

    /// `uᵀ M v`.
    pub fn bilinear(&self, u: Point, v: Point) -> f64 {
        u.dot(self.apply(v))
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        (self.xx * self.xx + 2.0 * self.xy * self.xy + self.yy * self.yy).sqrt()
    }

    pub fn max_abs_diff(&self, other: &Covariance2) -> f64 {
        (self.xx - other.xx)
            .abs()
            .max((self.xy - other.xy).abs())
            .max((self.yy - other.yy).abs())
    }

    /// `R M Rᵀ` for the counter-clockwise rotation by `theta` radians.
    pub fn rotated(&self, theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        let xx = c * c * self.xx - 2.0 * c * s * self.xy + s * s * self.yy;
        let yy = s * s * self.xx + 2.0 * c * s * self.xy + c * c * self.yy;
        let xy = c * s * (self.xx - self.yy) + (c * c - s * s) * self.xy;
        Self::new(xx, xy, yy)
    }

    pub fn is_psd(&self, tol: f64) -> bool {
        self.xx >= -tol && self.yy >= -tol && self.det() >= -tol
    }
}

/// Eigenpairs of a symmetric 2×2 matrix, `lambda1 >= lambda2 >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenPair2 {
    pub lambda1: f64,
    pub v1: Point,
    pub lambda2: f64,
    pub v2: Point,
}

impl EigenPair2 {
    /// `V L Vᵀ`.
    pub fn reconstruct(&self) -> Covariance2 {
        let (a, b) = (self.v1, self.v2);
        Covariance2::new(
            self.lambda1 * a.x * a.x + self.lambda2 * b.x * b.x,
            self.lambda1 * a.x * a.y + self.lambda2 * b.x * b.y,
            self.lambda1 * a.y * a.y + self.lambda2 * b.y * b.y,
        )
    }

    pub fn gap(&self) -> f64 {
        self.lambda1 - self.lambda2
    }

    /// Eigenvalues raised to at least `floor`.
    pub fn floored(&self, floor: f64) -> (f64, f64) {
        (self.lambda1.max(floor), self.lambda2.max(floor))
    }
}

/// `V1 = Σ h_i`, `V2 = Σ h_i²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightSums {
    pub v1_sum: f64,
    pub v2_sum: f64,
}

impl WeightSums {
    /// Bessel-corrected denominator `V1 - V2/V1`.
    pub fn unbiased_denominator(&self) -> f64 {
        self.v1_sum - self.v2_sum / self.v1_sum
    }
}

pub fn weight_sums(h: &DiscreteHeatmap) -> WeightSums {
    let (mut v1, mut v2) = (0.0, 0.0);
    for &p in h.probs() {
        v1 += p;
        v2 += p * p;
    }
    WeightSums {
        v1_sum: v1,
        v2_sum: v2,
    }
}

/// Unnormalised scatter `Σ_i h_i (y_i − μ)(y_i − μ)ᵀ`.
pub(crate) fn scatter(h: &DiscreteHeatmap, mu: Point) -> Covariance2 {
    let (mut xx, mut xy, mut yy) = (0.0, 0.0, 0.0);
    for (r, row) in h.probs().chunks_exact(h.grid().width()).enumerate() {
        let dy = r as f64 - mu.y;
        let (mut row_xx, mut row_x, mut row_mass) = (0.0, 0.0, 0.0);
        for (c, &p) in row.iter().enumerate() {
            let dx = c as f64 - mu.x;
            row_xx += p * dx * dx;
            row_x += p * dx;
            row_mass += p;
        }
        xx += row_xx;
        xy += row_x * dy;
        yy += row_mass * dy * dy;
    }
    Covariance2::new(xx, xy, yy)
}

pub fn covariance_biased(h: &DiscreteHeatmap, mu: Point) -> Covariance2 {
    let v1 = weight_sums(h).v1_sum;
    scatter(h, mu).scale(1.0 / v1)
}

pub fn covariance_unbiased(h: &DiscreteHeatmap, mu: Point) -> Result<Covariance2> {
    let denominator = weight_sums(h).unbiased_denominator();
    if !(denominator >= DENOMINATOR_EPS) {
        return Err(Error::DegenerateDistribution {
            denominator,
            threshold: DENOMINATOR_EPS,
        });
    }
    Ok(scatter(h, mu).scale(1.0 / denominator))
}

fn sign_normalized(v: Point) -> Point {
    if v.x < 0.0 || (v.x == 0.0 && v.y < 0.0) {
        v * -1.0
    } else {
        v
    }
}

/// Unclamped eigenvalues `m ± r` with `m = tr/2`, `r = √(m² − det)`.
///
/// `r` is evaluated as `hypot((xx − yy)/2, xy)`, which equals `√(m² − det)`
/// without the cancellation of the textbook form.
pub fn eigenvalues_raw(sigma: &Covariance2) -> (f64, f64) {
    let m = 0.5 * (sigma.xx + sigma.yy);
    let r = (0.5 * (sigma.xx - sigma.yy)).hypot(sigma.xy);
    (m + r, m - r)
}

pub fn eigen2x2(sigma: &Covariance2) -> EigenPair2 {
    let (l1, l2) = eigenvalues_raw(sigma);
    let half_diff = 0.5 * (sigma.xx - sigma.yy);
    let r = half_diff.hypot(sigma.xy);

    let v1 = if r == 0.0 {
        // λ1 = λ2: any basis works, pick the canonical one.
        Point::new(1.0, 0.0)
    } else if sigma.xy == 0.0 {
        if sigma.xx >= sigma.yy {
            Point::new(1.0, 0.0)
        } else {
            Point::new(0.0, 1.0)
        }
    } else {
        // Rows of (Σ − λ1 I) are orthogonal to v1; use the better conditioned one.
        let v = if half_diff >= 0.0 {
            Point::new(half_diff + r, sigma.xy)
        } else {
            Point::new(sigma.xy, r - half_diff)
        };
        v * (1.0 / v.norm())
    };
    let v1 = sign_normalized(v1);
    let v2 = sign_normalized(Point::new(-v1.y, v1.x));

    EigenPair2 {
        lambda1: l1.max(0.0),
        v1,
        lambda2: l2.max(0.0),
        v2,
    }
}

/// Elliptical eccentricity `λ1/λ2`, both floored at [`DEFAULT_LAMBDA_FLOOR`].
pub fn anisotropy_ratio(e: &EigenPair2) -> f64 {
    let (l1, l2) = e.floored(DEFAULT_LAMBDA_FLOOR);
    l1 / l2
}

/// Everything the losses need from one heatmap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mu: Point,
    pub sums: WeightSums,
    pub biased: Covariance2,
    pub unbiased: Covariance2,
    pub eig: EigenPair2,
}

impl Moments {
    /// Mean, both covariance estimators and the eigenpairs of the unbiased one.
    pub fn of(h: &DiscreteHeatmap) -> Result<Self> {
        let mu = soft_argmax(h);
        let sums = weight_sums(h);
        let s = scatter(h, mu);
        let denominator = sums.unbiased_denominator();
        if !(denominator >= DENOMINATOR_EPS) {
            return Err(Error::DegenerateDistribution {
                denominator,
                threshold: DENOMINATOR_EPS,
            });
        }
        let unbiased = s.scale(1.0 / denominator);
        Ok(Self {
            mu,
            sums,
            biased: s.scale(1.0 / sums.v1_sum),
            unbiased,
            eig: eigen2x2(&unbiased),
        })
    }

    pub fn anisotropy(&self) -> f64 {
        anisotropy_ratio(&self.eig)
    }
}
