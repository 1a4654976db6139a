//! Landmark evaluation metrics: NME, cumulative error distribution,
//! failure rate and area under the CED curve.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::Point;

pub const DEFAULT_THRESHOLD: f64 = 0.10;
pub const DEFAULT_RESOLUTION: usize = 1000;

/// One image's landmarks, in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawAnnotation", into = "RawAnnotation")]
pub struct Annotation {
    points: Vec<Point>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAnnotation {
    points: Vec<[f64; 2]>,
}

impl TryFrom<RawAnnotation> for Annotation {
    type Error = Error;
    fn try_from(raw: RawAnnotation) -> Result<Self> {
        Annotation::new(raw.points.into_iter().map(|[x, y]| Point::new(x, y)).collect())
    }
}

impl From<Annotation> for RawAnnotation {
    fn from(a: Annotation) -> Self {
        RawAnnotation {
            points: a.points.iter().map(|p| [p.x, p.y]).collect(),
        }
    }
}

impl Annotation {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::ShapeMismatch(format!(
                "an annotation needs at least 2 landmarks, got {}",
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFiniteInput(format!("landmark {i}")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// How the per-image error is normalised.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Normalizer {
    /// Distance between two outer eye corners of the ground truth.
    InterOcular { i: usize, j: usize },
    /// Distance between the two pupil centres of the ground truth.
    InterPupil { i: usize, j: usize },
    Constant { value: f64 },
}

impl Normalizer {
    pub fn distance(&self, gt: &Annotation) -> Result<f64> {
        let d = match *self {
            Normalizer::InterOcular { i, j } | Normalizer::InterPupil { i, j } => {
                let n = gt.len();
                if i >= n || j >= n {
                    return Err(Error::ShapeMismatch(format!(
                        "normalizer indices ({i}, {j}) out of range for {n} landmarks"
                    )));
                }
                (gt.points[i] - gt.points[j]).norm()
            }
            Normalizer::Constant { value } => value,
        };
        if !(d > 0.0) {
            return Err(Error::ZeroNormalizer(d));
        }
        Ok(d)
    }
}

/// Mean landmark error of one image divided by the normalising distance.
pub fn nme(pred: &Annotation, gt: &Annotation, norm: &Normalizer) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {} landmarks, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let d = norm.distance(gt)?;
    let total: f64 = pred
        .points
        .iter()
        .zip(&gt.points)
        .map(|(p, g)| (*p - *g).norm())
        .sum();
    Ok(total / (gt.len() as f64 * d))
}

fn check_nonempty(nmes: &[f64]) -> Result<()> {
    if nmes.is_empty() {
        Err(Error::EmptyInput("NME list"))
    } else {
        Ok(())
    }
}

/// Fraction of images with NME strictly above `threshold`.
pub fn fr(nmes: &[f64], threshold: f64) -> Result<f64> {
    check_nonempty(nmes)?;
    let failures = nmes.iter().filter(|&&e| e > threshold).count();
    Ok(failures as f64 / nmes.len() as f64)
}

/// Fraction of images with NME `<= t`.
pub fn cumulative_fraction(nmes: &[f64], t: f64) -> f64 {
    nmes.iter().filter(|&&e| e <= t).count() as f64 / nmes.len() as f64
}

/// Area under the CED on `[0, threshold]`, divided by `threshold`.
///
/// The CED is a step function; integrating it exactly gives
/// `Σ_k max(0, threshold − e_k) / (n · threshold)` over `e_k <= threshold`.
pub fn auc(nmes: &[f64], threshold: f64) -> Result<f64> {
    check_nonempty(nmes)?;
    if !(threshold > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "AUC threshold must be positive, got {threshold}"
        )));
    }
    let area: f64 = nmes
        .iter()
        .filter(|&&e| e <= threshold)
        .map(|&e| threshold - e.max(0.0))
        .sum();
    Ok(area / (nmes.len() as f64 * threshold))
}

/// CED sampled at `resolution` evenly spaced thresholds in `[0, threshold]`.
pub fn ced(nmes: &[f64], threshold: f64, resolution: usize) -> Result<Vec<(f64, f64)>> {
    check_nonempty(nmes)?;
    if resolution < 2 {
        return Err(Error::InvalidConfig(format!(
            "CED resolution must be >= 2, got {resolution}"
        )));
    }
    let mut sorted = nmes.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut out = Vec::with_capacity(resolution);
    let mut k = 0;
    for j in 0..resolution {
        let t = if j + 1 == resolution {
            threshold
        } else {
            threshold * j as f64 / (resolution - 1) as f64
        };
        while k < sorted.len() && sorted[k] <= t {
            k += 1;
        }
        out.push((t, k as f64 / n));
    }
    Ok(out)
}

/// Trapezoidal area under a sampled CED, divided by its last threshold.
pub fn auc_from_curve(curve: &[(f64, f64)]) -> f64 {
    let area: f64 = curve
        .windows(2)
        .map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1))
        .sum();
    area / curve.last().map_or(1.0, |p| p.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub nme_per_image: Vec<f64>,
    pub mean_nme: f64,
    pub threshold: f64,
    pub fr: f64,
    pub auc: f64,
    pub ced: Vec<(f64, f64)>,
}

pub fn evaluate(
    preds: &[Annotation],
    gts: &[Annotation],
    norm: &Normalizer,
    threshold: f64,
    resolution: usize,
) -> Result<MetricReport> {
    if preds.len() != gts.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predicted images vs {} ground-truth images",
            preds.len(),
            gts.len()
        )));
    }
    let nmes = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| nme(p, g, norm))
        .collect::<Result<Vec<_>>>()?;
    check_nonempty(&nmes)?;
    Ok(MetricReport {
        mean_nme: nmes.iter().sum::<f64>() / nmes.len() as f64,
        threshold,
        fr: fr(&nmes, threshold)?,
        auc: auc(&nmes, threshold)?,
        ced: ced(&nmes, threshold, resolution)?,
        nme_per_image: nmes,
    })
}
