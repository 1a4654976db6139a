//! Desk-scale simulator for annotation ambiguity.
//!
//! Landmarks sit on a parametric contour. Annotators place "ambiguous"
//! landmarks with large noise along the contour tangent and small noise
//! along the normal; the remaining landmarks get small isotropic noise.
//! Every sample translates the whole contour by a random offset, and a
//! linear predictor maps the sample's feature vector to one heatmap per
//! landmark.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradients::value_and_grad;
use crate::heatmap::{softmax_normalize, Grid, Logits, Point};
use crate::losses::{LossConfig, RestrictionMode};
use crate::moments::{anisotropy_ratio, EigenPair2, Moments};

// RNG streams, so that changing how many draws one stage makes never
// shifts another stage.
const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;

/// Eigenvector cut-off (px², see [`LossConfig::eigenvector_gap`]) used by the
/// shipped training configuration. Near-round predicted heatmaps have gaps
/// well below this, and their eigenvector derivatives mostly chase label noise.
pub const TRAINING_EIGENVECTOR_GAP: f64 = 0.3;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ContourShape {
    /// Closed curve; landmark `k` of `n` sits at angle `2πk/n`.
    Ellipse { center: Point, semi_axes: [f64; 2] },
    /// `y = vertex.y + curvature·(x − vertex.x)²` for `|x − vertex.x| <= half_width`.
    Parabola {
        vertex: Point,
        curvature: f64,
        half_width: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContourSpec {
    pub shape: ContourShape,
    pub landmark_count: usize,
}

impl Default for ContourSpec {
    fn default() -> Self {
        Self {
            shape: ContourShape::Ellipse {
                center: Point::new(31.5, 31.5),
                semi_axes: [14.0, 10.0],
            },
            landmark_count: 8,
        }
    }
}

impl ContourSpec {
    /// Evenly spaced curve parameters in `[0, 1]`.
    pub fn parameters(&self) -> Vec<f64> {
        let n = self.landmark_count;
        match self.shape {
            ContourShape::Ellipse { .. } => (0..n).map(|k| k as f64 / n as f64).collect(),
            ContourShape::Parabola { .. } => {
                if n == 1 {
                    vec![0.5]
                } else {
                    (0..n).map(|k| k as f64 / (n - 1) as f64).collect()
                }
            }
        }
    }

    /// Point and unit tangent at curve parameter `t`.
    pub fn point_and_tangent(&self, t: f64) -> (Point, Point) {
        let (p, d) = match self.shape {
            ContourShape::Ellipse { center, semi_axes } => {
                let (s, c) = (2.0 * std::f64::consts::PI * t).sin_cos();
                (
                    Point::new(center.x + semi_axes[0] * c, center.y + semi_axes[1] * s),
                    Point::new(-semi_axes[0] * s, semi_axes[1] * c),
                )
            }
            ContourShape::Parabola {
                vertex,
                curvature,
                half_width,
            } => {
                let dx = (2.0 * t - 1.0) * half_width;
                (
                    Point::new(vertex.x + dx, vertex.y + curvature * dx * dx),
                    Point::new(1.0, 2.0 * curvature * dx),
                )
            }
        };
        (p, d * (1.0 / d.norm()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    pub sigma_tangent: f64,
    pub sigma_normal: f64,
    /// Per landmark: tangential noise if true, isotropic `sigma_normal` otherwise.
    pub ambiguous: Vec<bool>,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma_tangent: 3.0,
            sigma_normal: 0.5,
            ambiguous: (0..8).map(|k| k % 2 == 0).collect(),
        }
    }
}

impl NoiseModel {
    pub fn validate(&self, landmark_count: usize) -> Result<()> {
        if self.ambiguous.len() != landmark_count {
            return Err(Error::InvalidConfig(format!(
                "noise.ambiguous has {} flags for {landmark_count} landmarks",
                self.ambiguous.len()
            )));
        }
        if !(self.sigma_normal >= 0.0) || !(self.sigma_tangent >= 0.0) {
            return Err(Error::InvalidConfig("noise sigmas must be >= 0".into()));
        }
        if self.ambiguous.iter().any(|&a| a) && self.sigma_tangent < self.sigma_normal {
            return Err(Error::InvalidConfig(format!(
                "sigma_tangent ({}) must be >= sigma_normal ({}) for ambiguous landmarks",
                self.sigma_tangent, self.sigma_normal
            )));
        }
        Ok(())
    }
}

/// How a sample is turned into the predictor's input.
///
/// The landmark's offset from its base position is encoded with bilinear
/// ("tent") weights over a `lattice × lattice` grid spanning the
/// translation box, followed by `nuisance_dims` standard normal values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSpec {
    /// Each sample shifts the contour by a uniform offset in `[-t, t]²` (px).
    pub translation_px: f64,
    /// Gaussian jitter on the encoded offset (px).
    pub jitter_px: f64,
    /// Lattice points per axis; at least 2.
    pub lattice: usize,
    pub nuisance_dims: usize,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            translation_px: 4.0,
            jitter_px: 0.25,
            lattice: 5,
            nuisance_dims: 8,
        }
    }
}

impl FeatureSpec {
    pub fn dim(&self) -> usize {
        self.lattice * self.lattice + self.nuisance_dims
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.translation_px >= 0.0) || !(self.jitter_px >= 0.0) {
            return Err(Error::InvalidConfig(
                "translation_px and jitter_px must be >= 0".into(),
            ));
        }
        if self.lattice < 2 {
            return Err(Error::InvalidConfig(format!(
                "lattice must be >= 2, got {}",
                self.lattice
            )));
        }
        Ok(())
    }

    /// Writes the tent weights of `offset` into `out[..lattice²]`.
    pub fn encode_offset(&self, offset: Point, out: &mut [f64]) {
        let n = self.lattice;
        out[..n * n].iter_mut().for_each(|v| *v = 0.0);
        let t = self.translation_px;
        let cell = |o: f64| -> (usize, f64) {
            let u = if t > 0.0 {
                ((o + t) / (2.0 * t) * (n - 1) as f64).clamp(0.0, (n - 1) as f64)
            } else {
                0.5 * (n - 1) as f64
            };
            let i = (u.floor() as usize).min(n - 2);
            (i, u - i as f64)
        };
        let (i, fx) = cell(offset.x);
        let (j, fy) = cell(offset.y);
        out[j * n + i] = (1.0 - fx) * (1.0 - fy);
        out[j * n + i + 1] = fx * (1.0 - fy);
        out[(j + 1) * n + i] = (1.0 - fx) * fy;
        out[(j + 1) * n + i + 1] = fx * fy;
    }
}

/// One annotated landmark of one synthetic image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub feature: Vec<f64>,
    pub true_point: Point,
    pub annotation: Point,
    pub tangent: Point,
}

impl SyntheticSample {
    pub fn normal(&self) -> Point {
        Point::new(-self.tangent.y, self.tangent.x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkInfo {
    pub base: Point,
    pub tangent: Point,
    pub ambiguous: bool,
}

/// `samples[landmark][image]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub grid: Grid,
    pub landmarks: Vec<LandmarkInfo>,
    pub samples: Vec<Vec<SyntheticSample>>,
}

impl Dataset {
    pub fn n_images(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn n_landmarks(&self) -> usize {
        self.landmarks.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.samples
            .first()
            .and_then(|s| s.first())
            .map_or(0, |s| s.feature.len())
    }

    /// Splits off the images `[at, n)` into a second dataset.
    pub fn split_at(mut self, at: usize) -> (Dataset, Dataset) {
        let tail = self.samples.iter_mut().map(|s| s.split_off(at)).collect();
        let test = Dataset {
            grid: self.grid,
            landmarks: self.landmarks.clone(),
            samples: tail,
        };
        (self, test)
    }

    /// CSV dump: one row per (image, landmark).
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "image,landmark,ambiguous,true_x,true_y,annotation_x,annotation_y,tangent_x,tangent_y\n",
        );
        for s in 0..self.n_images() {
            for (l, info) in self.landmarks.iter().enumerate() {
                let x = &self.samples[l][s];
                out.push_str(&format!(
                    "{s},{l},{},{},{},{},{},{},{}\n",
                    info.ambiguous,
                    x.true_point.x,
                    x.true_point.y,
                    x.annotation.x,
                    x.annotation.y,
                    x.tangent.x,
                    x.tangent.y
                ));
            }
        }
        out
    }
}

pub fn generate_dataset(
    contour: &ContourSpec,
    noise: &NoiseModel,
    n_samples: usize,
    grid: Grid,
    seed: u64,
) -> Result<Dataset> {
    generate_dataset_with(contour, noise, &FeatureSpec::default(), n_samples, grid, seed)
}

pub fn generate_dataset_with(
    contour: &ContourSpec,
    noise: &NoiseModel,
    features: &FeatureSpec,
    n_samples: usize,
    grid: Grid,
    seed: u64,
) -> Result<Dataset> {
    if n_samples == 0 {
        return Err(Error::EmptyInput("n_samples must be >= 1"));
    }
    if contour.landmark_count == 0 {
        return Err(Error::InvalidConfig("landmark_count must be >= 1".into()));
    }
    noise.validate(contour.landmark_count)?;
    features.validate()?;
    let shift = features.translation_px;

    let margin = 4.0 * noise.sigma_tangent.max(noise.sigma_normal);
    let landmarks: Vec<LandmarkInfo> = contour
        .parameters()
        .into_iter()
        .zip(&noise.ambiguous)
        .map(|(t, &ambiguous)| {
            let (base, tangent) = contour.point_and_tangent(t);
            LandmarkInfo {
                base,
                tangent,
                ambiguous,
            }
        })
        .collect();
    let (max_x, max_y) = ((grid.width() - 1) as f64, (grid.height() - 1) as f64);
    for (index, lm) in landmarks.iter().enumerate() {
        let b = lm.base;
        let lo = margin + shift;
        if b.x < lo || b.y < lo || b.x > max_x - lo || b.y > max_y - lo {
            return Err(Error::LandmarkOutOfBounds {
                index,
                x: b.x,
                y: b.y,
                margin: lo,
            });
        }
    }

    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples: Vec<Vec<SyntheticSample>> = vec![Vec::with_capacity(n_samples); landmarks.len()];
    for _ in 0..n_samples {
        let offset = if shift > 0.0 {
            Point::new(rng.random_range(-shift..=shift), rng.random_range(-shift..=shift))
        } else {
            Point::default()
        };
        for (l, lm) in landmarks.iter().enumerate() {
            let true_point = lm.base + offset;
            let normal = Point::new(-lm.tangent.y, lm.tangent.x);
            let (st, sn) = if lm.ambiguous {
                (noise.sigma_tangent, noise.sigma_normal)
            } else {
                (noise.sigma_normal, noise.sigma_normal)
            };
            let n_t = st * std_normal.sample(&mut rng);
            let n_n = sn * std_normal.sample(&mut rng);
            let annotation = true_point + lm.tangent * n_t + normal * n_n;

            let mut feature = vec![0.0; features.dim()];
            let jitter = Point::new(std_normal.sample(&mut rng), std_normal.sample(&mut rng));
            let seen = true_point - lm.base + jitter * features.jitter_px;
            features.encode_offset(seen, &mut feature);
            let n_lattice = features.lattice * features.lattice;
            for v in &mut feature[n_lattice..] {
                *v = std_normal.sample(&mut rng);
            }
            samples[l].push(SyntheticSample {
                feature,
                true_point,
                annotation,
                tangent: lm.tangent,
            });
        }
    }
    Ok(Dataset {
        grid,
        landmarks,
        samples,
    })
}

/// `logits = W · feature + b`, reshaped row-major onto the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPredictor {
    grid: Grid,
    dim: usize,
    /// `[W | b]` with `W` (cells × dim) stored column by column, so that
    /// zero features can be skipped.
    params: Vec<f64>,
}

impl LinearPredictor {
    pub fn zeros(grid: Grid, dim: usize) -> Self {
        Self {
            grid,
            dim,
            params: vec![0.0; grid.len() * (dim + 1)],
        }
    }

    /// Weights drawn from `N(0, init_std²)`, zero bias.
    pub fn random(grid: Grid, dim: usize, init_std: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(grid, dim);
        if init_std > 0.0 {
            let normal = Normal::new(0.0, init_std).expect("positive std");
            let n = grid.len() * dim;
            p.params[..n].iter_mut().for_each(|w| *w = normal.sample(rng));
        }
        p
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Weight of feature `k` for cell `i`.
    pub fn weight(&self, cell: usize, k: usize) -> f64 {
        self.params[k * self.grid.len() + cell]
    }

    pub fn bias(&self) -> &[f64] {
        &self.params[self.grid.len() * self.dim..]
    }

    pub fn logits(&self, feature: &[f64]) -> Result<Logits> {
        if feature.len() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "feature of length {} for a predictor expecting {}",
                feature.len(),
                self.dim
            )));
        }
        let cells = self.grid.len();
        let (w, b) = self.params.split_at(cells * self.dim);
        let mut values = b.to_vec();
        for (column, &f) in w.chunks_exact(cells).zip(feature) {
            if f != 0.0 {
                values.iter_mut().zip(column).for_each(|(v, a)| *v += a * f);
            }
        }
        Logits::new(self.grid, values)
    }

    /// Sets the bias to `−|y_i − center|² / 2σ²`.
    pub fn set_bias_prior(&mut self, center: Point, sigma: f64) {
        let cells = self.grid.len();
        let grid = self.grid;
        let inv = 1.0 / (2.0 * sigma * sigma);
        for (i, b) in self.params[cells * self.dim..].iter_mut().enumerate() {
            let d = grid.coord(i) - center;
            *b = -d.dot(d) * inv;
        }
    }

    /// Adds `scale · ∂L/∂params` given `∂L/∂logits`.
    fn accumulate_grad(&self, feature: &[f64], d_logits: &[f64], scale: f64, out: &mut [f64]) {
        let cells = self.grid.len();
        let (gw, gb) = out.split_at_mut(cells * self.dim);
        for (column, &f) in gw.chunks_exact_mut(cells).zip(feature) {
            let k = f * scale;
            if k != 0.0 {
                column.iter_mut().zip(d_logits).for_each(|(g, dz)| *g += k * dz);
            }
        }
        gb.iter_mut().zip(d_logits).for_each(|(g, dz)| *g += scale * dz);
    }
}

/// One linear predictor per landmark.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapModel {
    pub predictors: Vec<LinearPredictor>,
}

/// A decoded landmark prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub point: Point,
    /// `None` when the heatmap is too concentrated for the unbiased covariance.
    pub eig: Option<EigenPair2>,
}

impl HeatmapModel {
    pub fn predict(&self, landmark: usize, feature: &[f64]) -> Result<Prediction> {
        let logits = self.predictors[landmark].logits(feature)?;
        let h = softmax_normalize(&logits, 1.0)?;
        let point = crate::heatmap::soft_argmax(&h);
        Ok(Prediction {
            point,
            eig: Moments::of(&h).ok().map(|m| m.eig),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Standard deviation of the initial weights.
    pub init_std: f64,
    /// The learning rate decays linearly to `learning_rate · final_lr_fraction`
    /// over the epochs; 1 keeps it constant.
    pub final_lr_fraction: f64,
    /// Width (px) of the Gaussian log-prior the biases start from, centred on
    /// each landmark's mean training annotation. 0 starts from uniform heatmaps.
    pub init_sigma_px: f64,
    /// Drives weight initialisation and shuffling; set from the run seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 8,
            batch_size: 16,
            init_std: 1e-2,
            final_lr_fraction: 0.1,
            init_sigma_px: 2.0,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch_size must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::InvalidConfig(
                "adam betas must lie in [0, 1) and eps must be > 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::InvalidConfig(format!(
                "final_lr_fraction must lie in [0, 1], got {}",
                self.final_lr_fraction
            )));
        }
        if !(self.init_std >= 0.0) || !(self.init_sigma_px >= 0.0) {
            return Err(Error::InvalidConfig(
                "init_std and init_sigma_px must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Adam with bias correction; also plain SGD.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    lr: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(cfg: &OptimizerConfig, n_params: usize) -> Self {
        let moments = if cfg.kind == OptimizerKind::Adam { n_params } else { 0 };
        Self {
            cfg: cfg.clone(),
            lr: cfg.learning_rate,
            step: 0,
            m: vec![0.0; moments],
            v: vec![0.0; moments],
        }
    }

    /// Learning rate for a zero-based epoch under the linear decay.
    pub fn learning_rate_at(cfg: &OptimizerConfig, epoch: usize) -> f64 {
        if cfg.epochs <= 1 {
            return cfg.learning_rate;
        }
        let progress = epoch as f64 / (cfg.epochs - 1) as f64;
        cfg.learning_rate * (1.0 - (1.0 - cfg.final_lr_fraction) * progress)
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.lr = Self::learning_rate_at(&self.cfg, epoch);
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        let lr = self.lr;
        self.step += 1;
        match self.cfg.kind {
            OptimizerKind::Sgd => {
                params.iter_mut().zip(grads).for_each(|(p, g)| *p -= lr * g);
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
                let c1 = 1.0 - b1.powi(self.step);
                let c2 = 1.0 - b2.powi(self.step);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut())
                    .zip(self.v.iter_mut())
                {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub star: f64,
    pub restriction: f64,
    pub dr: f64,
    pub mean_lambda1: f64,
    pub mean_lambda2: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss,star,restriction,dr,mean_lambda1,mean_lambda2\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.loss, r.star, r.restriction, r.dr, r.mean_lambda1, r.mean_lambda2
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: HeatmapModel,
    pub history: Vec<EpochRecord>,
}

/// Mini-batch training of one predictor per landmark on the annotations.
///
/// The batch loss is the mean over images and landmarks. Per-sample losses
/// are stored by image index and reduced in index order, so the recorded
/// history does not depend on the shuffle.
pub fn train(data: &Dataset, loss_cfg: &LossConfig, opt: &OptimizerConfig) -> Result<TrainedModel> {
    loss_cfg.validate()?;
    opt.validate()?;
    let n = data.n_images();
    let n_lm = data.n_landmarks();
    if n == 0 || n_lm == 0 {
        return Err(Error::EmptyInput("training set"));
    }
    let dim = data.feature_dim();
    let mut init_rng = rng_for(opt.seed, STREAM_INIT);
    let mut predictors: Vec<LinearPredictor> = (0..n_lm)
        .map(|_| LinearPredictor::random(data.grid, dim, opt.init_std, &mut init_rng))
        .collect();
    if opt.init_sigma_px > 0.0 {
        for (p, samples) in predictors.iter_mut().zip(&data.samples) {
            let sum = samples.iter().fold(Point::default(), |a, s| a + s.annotation);
            p.set_bias_prior(sum * (1.0 / n as f64), opt.init_sigma_px);
        }
    }
    let n_params = predictors[0].params.len();
    let mut optimizers: Vec<Optimizer> = (0..n_lm).map(|_| Optimizer::new(opt, n_params)).collect();
    let mut shuffle_rng = rng_for(opt.seed, STREAM_SHUFFLE);

    let mut order: Vec<usize> = (0..n).collect();
    let mut grad = vec![0.0; n_params];
    // [star, restriction, dr, λ1, λ2] per (landmark, image)
    let mut slots = vec![[0.0f64; 5]; n * n_lm];
    let mut eig_ok = vec![false; n * n_lm];
    let mut history = Vec::with_capacity(opt.epochs);

    for epoch in 0..opt.epochs {
        optimizers.iter_mut().for_each(|o| o.set_epoch(epoch));
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(opt.batch_size) {
            let scale = 1.0 / (batch.len() * n_lm) as f64;
            for (l, predictor) in predictors.iter_mut().enumerate() {
                grad.iter_mut().for_each(|g| *g = 0.0);
                for &s in batch {
                    let sample = &data.samples[l][s];
                    let logits = predictor.logits(&sample.feature)?;
                    let lg = value_and_grad(&logits, sample.annotation, loss_cfg)?;
                    predictor.accumulate_grad(&sample.feature, &lg.grad, scale, &mut grad);
                    let slot = l * n + s;
                    let (l1, l2) = lg.eig.map_or((0.0, 0.0), |e| (e.lambda1, e.lambda2));
                    slots[slot] = [lg.parts.star, lg.parts.restriction, lg.parts.dr, l1, l2];
                    eig_ok[slot] = lg.eig.is_some();
                }
                optimizers[l].step(&mut predictor.params, &grad);
            }
        }

        let mut acc = [0.0f64; 5];
        let mut n_eig = 0usize;
        for (slot, ok) in slots.iter().zip(&eig_ok) {
            for k in 0..3 {
                acc[k] += slot[k];
            }
            if *ok {
                acc[3] += slot[3];
                acc[4] += slot[4];
                n_eig += 1;
            }
        }
        let total = (n * n_lm) as f64;
        let n_eig = n_eig.max(1) as f64;
        let record = EpochRecord {
            epoch,
            loss: (acc[0] + acc[1] + acc[2]) / total,
            star: acc[0] / total,
            restriction: acc[1] / total,
            dr: acc[2] / total,
            mean_lambda1: acc[3] / n_eig,
            mean_lambda2: acc[4] / n_eig,
        };
        if !record.loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        history.push(record);
    }
    Ok(TrainedModel {
        model: HeatmapModel { predictors },
        history,
    })
}

/// Everything needed to build the train/test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub contour: ContourSpec,
    pub noise: NoiseModel,
    pub features: FeatureSpec,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            contour: ContourSpec::default(),
            noise: NoiseModel::default(),
            features: FeatureSpec::default(),
            n_train: 2000,
            n_test: 500,
        }
    }
}

impl DatasetConfig {
    pub fn generate(&self, grid: Grid, seed: u64) -> Result<(Dataset, Dataset)> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::InvalidConfig(
                "n_train and n_test must be >= 1".into(),
            ));
        }
        let all = generate_dataset_with(
            &self.contour,
            &self.noise,
            &self.features,
            self.n_train + self.n_test,
            grid,
            seed,
        )?;
        Ok(all.split_at(self.n_train))
    }
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Cross-model variance of one prediction, split along the contour frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceSplit {
    pub tangential: f64,
    pub normal: f64,
    pub total: f64,
}

/// Unbiased (`n − 1`) variance of `points`, projected onto `tangent` and its normal.
pub fn variance_split(points: &[Point], tangent: Point) -> VarianceSplit {
    let n = points.len();
    if n < 2 {
        return VarianceSplit {
            tangential: 0.0,
            normal: 0.0,
            total: 0.0,
        };
    }
    // Offsets from the first point keep identical predictions exactly zero.
    let origin = points[0];
    let centroid = points.iter().fold(Point::default(), |a, p| a + (*p - origin)) * (1.0 / n as f64);
    let normal = Point::new(-tangent.y, tangent.x);
    let (mut t, mut nn, mut tot) = (0.0, 0.0, 0.0);
    for p in points {
        let d = (*p - origin) - centroid;
        t += d.dot(tangent).powi(2);
        nn += d.dot(normal).powi(2);
        tot += d.dot(d);
    }
    let k = 1.0 / (n - 1) as f64;
    VarianceSplit {
        tangential: t * k,
        normal: nn * k,
        total: tot * k,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkVariance {
    pub landmark: usize,
    pub ambiguous: bool,
    pub mean_tangential: f64,
    pub median_tangential: f64,
    pub mean_normal: f64,
    pub median_normal: f64,
    pub mean_total: f64,
    pub median_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupVariance {
    pub landmarks: usize,
    pub mean_tangential: f64,
    pub median_tangential: f64,
    pub mean_normal: f64,
    pub median_normal: f64,
    pub mean_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub n_models: usize,
    pub seeds: Vec<u64>,
    pub per_landmark: Vec<LandmarkVariance>,
    pub ambiguous: GroupVariance,
    pub isotropic: GroupVariance,
    pub overall_mean_total: f64,
    pub overall_median_total: f64,
}

impl StabilityReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "landmark,ambiguous,mean_tangential,median_tangential,mean_normal,median_normal,mean_total,median_total\n",
        );
        for r in &self.per_landmark {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.landmark,
                r.ambiguous,
                r.mean_tangential,
                r.median_tangential,
                r.mean_normal,
                r.median_normal,
                r.mean_total,
                r.median_total
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct StabilityRun {
    pub report: StabilityReport,
    pub models: Vec<TrainedModel>,
}

/// Trains one model per seed (in parallel, collected in seed order) and
/// measures how much their test predictions disagree.
pub fn stability_from_seeds(
    train_set: &Dataset,
    test_set: &Dataset,
    loss_cfg: &LossConfig,
    opt_base: &OptimizerConfig,
    seeds: &[u64],
) -> Result<StabilityRun> {
    if seeds.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "stability needs at least 2 models, got {}",
            seeds.len()
        )));
    }
    let models: Vec<TrainedModel> = seeds
        .par_iter()
        .map(|&seed| {
            let opt = OptimizerConfig {
                seed,
                ..opt_base.clone()
            };
            train(train_set, loss_cfg, &opt)
        })
        .collect::<Result<_>>()?;

    let n_lm = test_set.n_landmarks();
    let mut per_landmark = Vec::with_capacity(n_lm);
    let mut splits_by_group: [Vec<VarianceSplit>; 2] = [Vec::new(), Vec::new()];
    let mut all_totals = Vec::new();
    for (l, info) in test_set.landmarks.iter().enumerate() {
        let mut splits = Vec::with_capacity(test_set.n_images());
        for sample in &test_set.samples[l] {
            let points = models
                .iter()
                .map(|m| m.model.predict(l, &sample.feature).map(|p| p.point))
                .collect::<Result<Vec<_>>>()?;
            splits.push(variance_split(&points, sample.tangent));
        }
        let mut t: Vec<f64> = splits.iter().map(|s| s.tangential).collect();
        let mut nn: Vec<f64> = splits.iter().map(|s| s.normal).collect();
        let mut tot: Vec<f64> = splits.iter().map(|s| s.total).collect();
        all_totals.extend_from_slice(&tot);
        per_landmark.push(LandmarkVariance {
            landmark: l,
            ambiguous: info.ambiguous,
            mean_tangential: mean(&t),
            median_tangential: median(&mut t),
            mean_normal: mean(&nn),
            median_normal: median(&mut nn),
            mean_total: mean(&tot),
            median_total: median(&mut tot),
        });
        splits_by_group[usize::from(info.ambiguous)].extend(splits);
    }

    let group = |splits: &[VarianceSplit], landmarks: usize| {
        let mut t: Vec<f64> = splits.iter().map(|s| s.tangential).collect();
        let mut nn: Vec<f64> = splits.iter().map(|s| s.normal).collect();
        let tot: Vec<f64> = splits.iter().map(|s| s.total).collect();
        GroupVariance {
            landmarks,
            mean_tangential: mean(&t),
            median_tangential: median(&mut t),
            mean_normal: mean(&nn),
            median_normal: median(&mut nn),
            mean_total: mean(&tot),
        }
    };
    let n_amb = test_set.landmarks.iter().filter(|l| l.ambiguous).count();
    let report = StabilityReport {
        n_models: seeds.len(),
        seeds: seeds.to_vec(),
        ambiguous: group(&splits_by_group[1], n_amb),
        isotropic: group(&splits_by_group[0], n_lm - n_amb),
        per_landmark,
        overall_mean_total: mean(&all_totals),
        overall_median_total: median(&mut all_totals),
    };
    Ok(StabilityRun { report, models })
}

/// `n_models` models seeded `opt_base.seed, opt_base.seed + 1, …`.
pub fn stability_experiment(
    n_models: usize,
    train_set: &Dataset,
    test_set: &Dataset,
    loss_cfg: &LossConfig,
    opt_base: &OptimizerConfig,
) -> Result<StabilityRun> {
    let seeds: Vec<u64> = (0..n_models as u64)
        .map(|m| opt_base.seed.wrapping_add(m))
        .collect();
    stability_from_seeds(train_set, test_set, loss_cfg, opt_base, &seeds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkAnisotropy {
    pub landmark: usize,
    pub ambiguous: bool,
    pub mean_ratio: f64,
    pub mean_lambda1: f64,
    pub mean_lambda2: f64,
    pub evaluated: usize,
    /// Test samples whose heatmap had a degenerate covariance.
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnisotropyReport {
    pub per_landmark: Vec<LandmarkAnisotropy>,
    pub ambiguous_mean_ratio: f64,
    pub isotropic_mean_ratio: f64,
}

impl AnisotropyReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "landmark,ambiguous,mean_ratio,mean_lambda1,mean_lambda2,evaluated,excluded\n",
        );
        for r in &self.per_landmark {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.landmark, r.ambiguous, r.mean_ratio, r.mean_lambda1, r.mean_lambda2, r.evaluated, r.excluded
            ));
        }
        out
    }
}

/// Mean `λ1/λ2` of the predicted heatmaps, per landmark.
pub fn anisotropy_experiment(model: &HeatmapModel, test_set: &Dataset) -> Result<AnisotropyReport> {
    let mut per_landmark = Vec::with_capacity(test_set.n_landmarks());
    for (l, info) in test_set.landmarks.iter().enumerate() {
        let (mut ratios, mut l1s, mut l2s) = (Vec::new(), Vec::new(), Vec::new());
        let mut excluded = 0;
        for sample in &test_set.samples[l] {
            match model.predict(l, &sample.feature)?.eig {
                Some(e) => {
                    ratios.push(anisotropy_ratio(&e));
                    l1s.push(e.lambda1);
                    l2s.push(e.lambda2);
                }
                None => excluded += 1,
            }
        }
        per_landmark.push(LandmarkAnisotropy {
            landmark: l,
            ambiguous: info.ambiguous,
            mean_ratio: mean(&ratios),
            mean_lambda1: mean(&l1s),
            mean_lambda2: mean(&l2s),
            evaluated: ratios.len(),
            excluded,
        });
    }
    let group_mean = |amb: bool| {
        let v: Vec<f64> = per_landmark
            .iter()
            .filter(|r| r.ambiguous == amb && r.evaluated > 0)
            .map(|r| r.mean_ratio)
            .collect();
        mean(&v)
    };
    Ok(AnisotropyReport {
        ambiguous_mean_ratio: group_mean(true),
        isotropic_mean_ratio: group_mean(false),
        per_landmark,
    })
}

#[derive(Debug, Clone)]
pub struct RestrictionReport {
    pub value_history: Vec<EpochRecord>,
    pub none_history: Vec<EpochRecord>,
    pub final_lambda1_value: f64,
    pub final_lambda1_none: f64,
}

impl RestrictionReport {
    /// Without a restriction the eigenvalues inflate.
    pub fn none_inflates(&self) -> bool {
        self.final_lambda1_none > self.final_lambda1_value
    }
}

/// Paired runs with value restriction (`w` from `base` or 1) and without.
pub fn restriction_experiment(
    train_set: &Dataset,
    base: &LossConfig,
    opt: &OptimizerConfig,
) -> Result<RestrictionReport> {
    let w = match base.restriction {
        RestrictionMode::ValueRestriction { w } => w,
        _ => 1.0,
    };
    let with_value = LossConfig {
        restriction: RestrictionMode::value(w),
        ..*base
    };
    let without = LossConfig {
        restriction: RestrictionMode::NoRestriction,
        ..*base
    };
    let runs: Vec<Result<TrainedModel>> = [with_value, without]
        .par_iter()
        .map(|cfg| train(train_set, cfg, opt))
        .collect();
    let mut runs = runs.into_iter();
    let value = runs.next().expect("two runs")?;
    let none = runs.next().expect("two runs")?;
    let last = |h: &[EpochRecord]| h.last().map_or(f64::NAN, |r| r.mean_lambda1);
    Ok(RestrictionReport {
        final_lambda1_value: last(&value.history),
        final_lambda1_none: last(&none.history),
        value_history: value.history,
        none_history: none.history,
    })
}
